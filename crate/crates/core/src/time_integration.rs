//! SSP-RK3 method-of-lines driver with the lagged switch protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec2};
use crate::space::Field;
use crate::stabilization::{switch_field, ResidualSampler, SwitchField};
use crate::transport::SemiDiscrete;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    SspRk3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeStepperConfig {
    pub scheme: Scheme,
    pub cfl: f64,
    pub dt_override: Option<f64>,
    pub t_end: f64,
    pub snapshot_times: Vec<f64>,
}

impl Default for TimeStepperConfig {
    fn default() -> Self {
        Self { scheme: Scheme::SspRk3, cfl: 0.3, dt_override: None, t_end: 0.0, snapshot_times: Vec::new() }
    }
}

impl TimeStepperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidParameter(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if let Some(dt) = self.dt_override {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::InvalidParameter(format!("dt_override must be > 0, got {dt}")));
            }
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::InvalidParameter(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_end)) {
            return Err(Error::InvalidParameter(format!("snapshot time {t} outside [0, {}]", self.t_end)));
        }
        Ok(())
    }
}

/// `dt = cfl h_min / (|beta| (2k + 1))`.
pub fn stable_dt(mesh: &Mesh, beta: Vec2, k: usize, cfl: f64) -> Result<f64> {
    let b = beta.norm();
    if b == 0.0 {
        return Err(Error::InvalidParameter("beta = 0 gives no advective time step; set dt_override".into()));
    }
    Ok(cfl * mesh.min_h() / (b * (2 * k + 1) as f64))
}

/// Upper estimate of the spectral radius of `M^{-1}(sum_T c0 S0_T + c1 S1_T)`
/// by power iteration in the mass inner product, with a 10% margin.
pub fn stabilization_spectral_radius(semi: &SemiDiscrete<'_>, c0: f64, c1: f64) -> Result<f64> {
    let n = semi.space.n_dofs();
    let ne = semi.space.n_elements();
    if c0 == 0.0 && c1 == 0.0 {
        return Ok(0.0);
    }
    let (w0, w1) = (vec![c0; ne], vec![c1; ne]);
    // Deterministic oscillatory start vector.
    let mut x: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) + 0.1).collect();
    let mut y = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..80 {
        let mut sx = vec![0.0; n];
        semi.stabilization.apply_weighted(&w0, &w1, &x, &mut sx);
        semi.mass.solve_into(&sx, &mut y)?;
        let mx = semi.mass.matrix.mul_vec(&x);
        let xmx = crate::sparse::dot(&x, &mx);
        if xmx == 0.0 {
            break;
        }
        lambda = crate::sparse::dot(&x, &sx) / xmx;
        let my = semi.mass.matrix.mul_vec(&y);
        let norm = crate::sparse::dot(&y, &my).sqrt();
        if norm == 0.0 {
            break;
        }
        x.iter_mut().zip(&y).for_each(|(a, b)| *a = b / norm);
    }
    Ok(1.1 * lambda)
}

/// Real-axis extent of the SSP-RK3 stability region, rounded down.
pub const RK3_REAL_LIMIT: f64 = 2.0;

/// How the switch is obtained at each stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SwitchMode {
    /// Recomputed from the stage state with the lagged time-derivative estimate.
    Live,
    /// Held at a constant value (0 = plain CIP, 1 = full artificial diffusion).
    Frozen(f64),
}

/// Stage function `F(u) = M^{-1} r(u, t; varpi)` with switch bookkeeping.
pub struct Evaluator<'s, 'a> {
    pub semi: &'s SemiDiscrete<'a>,
    pub mode: SwitchMode,
    sampler: ResidualSampler,
}

/// Result of one stage evaluation.
pub struct StageRate {
    pub rate: Vec<f64>,
    pub switch: SwitchField,
}

impl<'s, 'a> Evaluator<'s, 'a> {
    pub fn new(semi: &'s SemiDiscrete<'a>, mode: SwitchMode) -> Self {
        Self { semi, mode, sampler: ResidualSampler::new(semi.space) }
    }

    pub fn initial_switch(&self) -> SwitchField {
        let n = self.semi.space.n_elements();
        match self.mode {
            SwitchMode::Live => SwitchField::zeros(n),
            SwitchMode::Frozen(v) => SwitchField::constant(n, v),
        }
    }

    /// Switch for state `u` given the time-derivative estimate `dt_u`.
    pub fn switch_for(&self, u: &[f64], dt_u: &[f64], t: f64) -> Result<SwitchField> {
        let semi = self.semi;
        let f_h = semi.source_interpolant(t)?;
        let r = self.sampler.indicator(semi.space, u, dt_u, &f_h.coefficients, semi.spec.beta, &semi.params);
        let mut sw = switch_field(r, semi.space.mesh(), &semi.params);
        sw.source_time = Some(t);
        Ok(sw)
    }

    /// Evaluates `F(u)` at time `t`. `lag` is the switch from the previous
    /// stage; `guess` warm-starts the mass solves.
    pub fn rate(&self, u: &[f64], t: f64, lag: &SwitchField, guess: &[f64]) -> Result<StageRate> {
        let semi = self.semi;
        let load = semi.load(t);
        let mut r = vec![0.0; u.len()];
        semi.spatial_residual_into(u, &load, lag, &mut r);
        let mut rate = guess.to_vec();
        semi.mass.solve_into(&r, &mut rate)?;
        if self.mode != SwitchMode::Live {
            let mut sw = lag.clone();
            sw.source_time = Some(t);
            return Ok(StageRate { rate, switch: sw });
        }
        let sw = self.switch_for(u, &rate, t)?;
        if sw.varpi != lag.varpi {
            semi.spatial_residual_into(u, &load, &sw, &mut r);
            semi.mass.solve_into(&r, &mut rate)?;
        }
        Ok(StageRate { rate, switch: sw })
    }
}

/// State carried between steps.
#[derive(Clone, Debug)]
pub struct StepState {
    pub u: Vec<f64>,
    pub t: f64,
    /// Switch of the most recent stage, used as lag by the next one.
    pub switch: SwitchField,
    /// Most recent rate, used as CG initial guess.
    pub last_rate: Vec<f64>,
}

/// One SSP-RK3 step of size `dt`.
pub fn step_ssp_rk3(ev: &Evaluator<'_, '_>, state: &mut StepState, dt: f64) -> Result<()> {
    let n = state.u.len();
    let u0 = state.u.clone();
    let t = state.t;

    let s1 = ev.rate(&u0, t, &state.switch, &state.last_rate)?;
    let u1: Vec<f64> = (0..n).map(|i| u0[i] + dt * s1.rate[i]).collect();

    let s2 = ev.rate(&u1, t + dt, &s1.switch, &s1.rate)?;
    let u2: Vec<f64> = (0..n).map(|i| 0.75 * u0[i] + 0.25 * (u1[i] + dt * s2.rate[i])).collect();

    let s3 = ev.rate(&u2, t + 0.5 * dt, &s2.switch, &s2.rate)?;
    for i in 0..n {
        state.u[i] = u0[i] / 3.0 + 2.0 / 3.0 * (u2[i] + dt * s3.rate[i]);
    }
    state.t = t + dt;
    state.switch = s3.switch;
    state.last_rate = s3.rate;
    Ok(())
}

/// Per-step diagnostics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub mass: f64,
    pub energy: f64,
    pub linf: f64,
    pub max_varpi: f64,
    pub n_active_elements: usize,
}

/// Elements counted as active in diagnostics have `varpi` above this.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub field: Field,
    pub switch: SwitchField,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub records: Vec<StepRecord>,
    pub final_field: Field,
    pub final_switch: SwitchField,
}

impl Trajectory {
    pub fn snapshot_at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }
}

/// Everything an observer may look at after a step.
pub struct StepView<'v> {
    pub step: usize,
    pub state: &'v StepState,
    pub record: &'v StepRecord,
}

fn record(ev: &Evaluator<'_, '_>, state: &StepState, step: usize, dt: f64) -> StepRecord {
    let mu = ev.semi.mass.matrix.mul_vec(&state.u);
    StepRecord {
        step,
        t: state.t,
        dt,
        mass: mu.iter().sum(),
        energy: 0.5 * state.u.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>(),
        linf: state.u.iter().fold(0.0, |m, v| m.max(v.abs())),
        max_varpi: state.switch.max(),
        n_active_elements: state.switch.count_above(ACTIVE_THRESHOLD),
    }
}

/// Integrates from the initial interpolant to `config.t_end`, landing exactly
/// on every snapshot time.
pub fn run(
    semi: &SemiDiscrete<'_>,
    config: &TimeStepperConfig,
    mode: SwitchMode,
    mut observer: impl FnMut(&StepView<'_>) -> Result<()>,
) -> Result<Trajectory> {
    config.validate()?;
    let space = semi.space;
    let ev = Evaluator::new(semi, mode);
    let dt_nominal = match config.dt_override {
        Some(dt) => dt,
        None => {
            let (c0, c1) = match mode {
                SwitchMode::Live => (semi.params.sigma0, semi.params.sigma1),
                SwitchMode::Frozen(v) => (semi.params.sigma0 * (1.0 - v), semi.params.sigma1 * v),
            };
            let rho = stabilization_spectral_radius(semi, c0, c1)?;
            let advective = stable_dt(space.mesh(), semi.spec.beta, space.degree(), config.cfl)?;
            if rho > 0.0 {
                advective.min(RK3_REAL_LIMIT / rho)
            } else {
                advective
            }
        }
    };
    let u0 = semi.initial_field()?;
    let linf0 = u0.linf();
    let blow_up = 1e10 * linf0.max(f64::MIN_POSITIVE);
    let mut state = StepState {
        u: u0.coefficients,
        t: 0.0,
        switch: ev.initial_switch(),
        last_rate: vec![0.0; space.n_dofs()],
    };
    let mut targets: Vec<f64> = config.snapshot_times.clone();
    targets.push(config.t_end);
    targets.sort_by(f64::total_cmp);
    targets.dedup();

    let mut snapshots = Vec::new();
    let mut records = vec![record(&ev, &state, 0, 0.0)];
    observer(&StepView { step: 0, state: &state, record: &records[0] })?;
    let mut step = 0;
    for &target in &targets {
        while state.t < target {
            let remaining = target - state.t;
            // Avoid a sliver step just before the target.
            let dt = if remaining <= dt_nominal * (1.0 + 1e-9) { remaining } else { dt_nominal };
            step_ssp_rk3(&ev, &mut state, dt)?;
            if remaining == dt {
                state.t = target;
            }
            step += 1;
            if let Some((dof, &value)) = state.u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { dof, value });
            }
            let rec = record(&ev, &state, step, dt);
            if rec.linf > blow_up {
                return Err(Error::BlowUp { t: state.t, linf: rec.linf });
            }
            records.push(rec);
            observer(&StepView { step, state: &state, record: records.last().expect("pushed") })?;
        }
        if config.snapshot_times.contains(&target) {
            snapshots.push(Snapshot {
                t: target,
                field: Field::new(state.u.clone()).at_time(target),
                switch: state.switch.clone(),
            });
        }
    }
    Ok(Trajectory {
        snapshots,
        records,
        final_field: Field::new(state.u).at_time(state.t),
        final_switch: state.switch,
    })
}

pub fn write_diagnostics_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
