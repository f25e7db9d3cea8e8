//! Experiment drivers: convergence study, shock run, switch snapshots,
//! localisation study and the weighted stability diagnostic.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use anyhow::{ensure, Context};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use cipstab::mesh::{build_structured_mesh, Mesh, Periodicity, Rect, RegionMask, Vec2};
use cipstab::space::{Field, QuadPoint, Space};
use cipstab::stabilization::{switch_value, StabParams, SwitchField};
use cipstab::time_integration::{run, write_diagnostics_csv, Evaluator, StepState, SwitchMode, TimeStepperConfig, Trajectory};
use cipstab::transport::{BoundaryCondition, ProblemSpec, SemiDiscrete};
use cipstab::weights::{
    region_split_shock, required_constant, stability_margin, stability_sides, stability_terms, triple_norms, weighted_l2, NormSample,
    StabilityTerms, Weight, WeightSpec,
};

use crate::config::{Experiment, ExperimentConfig};
use crate::vtk::write_vtk;

/// Shock position at `t = 0` in the shock experiments.
pub const SHOCK_X0: f64 = 1.0 / 3.0;
/// `C_theta` on the left of the weighted stability inequality.
pub const C_THETA: f64 = 0.01;

type ExactFn = Arc<dyn Fn(Vec2, f64) -> f64 + Send + Sync>;

/// One pass/fail line of a report.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Reported-only checks never affect the exit code.
    pub asserted: bool,
    pub detail: String,
}

impl Check {
    pub fn asserted(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, asserted: true, detail: detail.into() }
    }

    pub fn reported(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, asserted: false, detail: detail.into() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub experiment: Experiment,
    pub checks: Vec<Check>,
    pub data: Value,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().filter(|c| c.asserted).all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Errors per mesh with observed rates `log(e_i / e_{i+1}) / log(h_i / h_{i+1})`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RateTable {
    pub metrics: Vec<String>,
    pub rows: Vec<RateRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub h: f64,
    pub errors: Vec<f64>,
}

impl RateTable {
    pub fn new(metrics: &[&str]) -> Self {
        Self { metrics: metrics.iter().map(|m| m.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, n: usize, h: f64, errors: Vec<f64>) {
        assert_eq!(errors.len(), self.metrics.len());
        self.rows.push(RateRow { n, h, errors });
    }

    fn column(&self, metric: &str) -> usize {
        self.metrics.iter().position(|m| m == metric).unwrap_or_else(|| panic!("no metric {metric}"))
    }

    /// Rates between consecutive rows.
    pub fn rates(&self, metric: &str) -> Vec<f64> {
        let c = self.column(metric);
        self.rows.windows(2).map(|w| (w[0].errors[c] / w[1].errors[c]).ln() / (w[0].h / w[1].h).ln()).collect()
    }

    /// Rate between the two finest meshes.
    pub fn finest_rate(&self, metric: &str) -> f64 {
        self.rates(metric).last().copied().unwrap_or(f64::NAN)
    }

    pub fn is_monotone(&self, metric: &str) -> bool {
        let c = self.column(metric);
        self.rows.windows(2).all(|w| w[1].errors[c] < w[0].errors[c])
    }

    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["n".to_string(), "h".to_string()];
        for m in &self.metrics {
            header.push(m.clone());
            header.push(format!("{m}_rate"));
        }
        w.write_record(&header)?;
        let rates: Vec<Vec<f64>> = self.metrics.iter().map(|m| self.rates(m)).collect();
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![row.n.to_string(), format!("{:e}", row.h)];
            for (c, e) in row.errors.iter().enumerate() {
                rec.push(format!("{e:e}"));
                rec.push(if i == 0 { String::new() } else { format!("{:.6}", rates[c][i - 1]) });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn unit_square_mesh(n: usize, periodicity: Periodicity) -> anyhow::Result<Arc<Mesh>> {
    Ok(Arc::new(build_structured_mesh(n, n, Rect::unit_square(), periodicity)?))
}

/// `sin(2 pi x) sin(2 pi y)` transported by `beta = (1, 0)` on the periodic square.
pub fn smooth_problem(t_final: f64) -> (ProblemSpec, ExactFn) {
    let beta = Vec2::new(1.0, 0.0);
    let u0 = |p: Vec2| (2.0 * PI * p.x).sin() * (2.0 * PI * p.y).sin();
    let exact: ExactFn = Arc::new(move |p, t| u0(p - beta * t));
    (ProblemSpec::homogeneous(beta, BoundaryCondition::Periodic, u0, t_final), exact)
}

fn step(x: f64) -> f64 {
    if x < SHOCK_X0 {
        1.0
    } else {
        0.0
    }
}

/// Step `u0 = 1` for `x < 1/3`, `beta = (1, 0)`, `g = 1` on the left edge.
pub fn shock_problem(t_final: f64) -> (ProblemSpec, ExactFn) {
    let beta = Vec2::new(1.0, 0.0);
    let spec = ProblemSpec::homogeneous(beta, BoundaryCondition::Inflow, |p| step(p.x), t_final).with_inflow(|_, _| 1.0);
    (spec, Arc::new(move |p, t| step(p.x - t)))
}

/// Geometry of the localisation study: a long strip, periodic across its
/// width, with a step whose upstream state is modulated.
pub struct Strip {
    pub length: f64,
    pub width: f64,
    pub shock_x0: f64,
}

pub const STRIP: Strip = Strip { length: 4.0, width: 0.125, shock_x0: 3.5 };

fn strip_u0(p: Vec2) -> f64 {
    if p.x < STRIP.shock_x0 {
        1.0 + 0.25 * (2.0 * PI * p.x).sin()
    } else {
        0.0
    }
}

pub fn strip_problem(t_final: f64) -> (ProblemSpec, ExactFn) {
    let beta = Vec2::new(1.0, 0.0);
    let exact: ExactFn = Arc::new(move |p, t| strip_u0(p - beta * t));
    let g = Arc::clone(&exact);
    let spec = ProblemSpec::homogeneous(beta, BoundaryCondition::Inflow, strip_u0, t_final).with_inflow(move |p, t| g(p, t));
    (spec, exact)
}

pub fn strip_mesh(n: usize) -> anyhow::Result<Arc<Mesh>> {
    let ny = (STRIP.width * n as f64).round() as usize;
    ensure!(ny >= 2 && (ny as f64 - STRIP.width * n as f64).abs() < 1e-9, "strip needs cells per unit a multiple of 16, got {n}");
    let nx = (STRIP.length * n as f64).round() as usize;
    Ok(Arc::new(build_structured_mesh(nx, ny, Rect::new(0.0, STRIP.length, 0.0, STRIP.width), Periodicity { x: false, y: true })?))
}

/// Default weight of the localisation study: plateau well upstream of the shock.
pub fn strip_weight(upstream: bool) -> WeightSpec {
    let x0 = if upstream { 0.5 } else { STRIP.shock_x0 };
    WeightSpec { x0: [x0, 0.5 * STRIP.width], r0: 0.25, k_decay: 1.1, blend_width: None, smoothness: 2, periods: Some([None, Some(STRIP.width)]) }
}

/// `||u_h - u(., t)||_phi`.
pub fn weighted_error(space: &Space, uh: &Field, exact: &ExactFn, weight: &Weight, t: f64, region: Option<&RegionMask>) -> f64 {
    weighted_l2(space, |qp: &QuadPoint| space.evaluate(uh, qp.element, qp.bary).0 - exact(qp.x, t), weight, t, region)
}

/// Switch of a state recomputed at its own time, from a fresh rate.
pub fn switch_at(ev: &Evaluator<'_, '_>, u: &Field, t: f64, lag: &SwitchField) -> anyhow::Result<(Vec<f64>, SwitchField)> {
    let guess = vec![0.0; u.len()];
    let s = ev.rate(&u.coefficients, t, lag, &guess)?;
    Ok((s.rate, s.switch))
}

fn stride_for(t_end: f64, dt_guess: f64, samples: usize) -> usize {
    ((t_end / dt_guess) / samples as f64).floor().max(1.0) as usize
}

/// Runs a problem and collects `NormSample`s roughly `samples` times,
/// always including both ends.
pub fn run_with_samples(
    semi: &SemiDiscrete<'_>,
    config: &TimeStepperConfig,
    mode: SwitchMode,
    samples: usize,
    transform: &dyn Fn(&Field, &Field, f64) -> (Field, Field),
) -> anyhow::Result<(Trajectory, Vec<NormSample>)> {
    let ev = Evaluator::new(semi, mode);
    let dt_guess = cipstab::time_integration::stable_dt(semi.space.mesh(), semi.spec.beta, semi.space.degree(), config.cfl)?;
    let stride = stride_for(config.t_end, dt_guess, samples);
    let mut out = Vec::new();
    let mut failure = None;
    let traj = run(semi, config, mode, |view| {
        let st: &StepState = view.state;
        if view.step % stride == 0 || st.t >= config.t_end {
            let u = Field::new(st.u.clone());
            match switch_at(&ev, &u, st.t, &st.switch) {
                Ok((rate, switch)) => {
                    let (v, dt_v) = transform(&u, &Field::new(rate), st.t);
                    out.push(NormSample { t: st.t, v, dt_v, switch });
                }
                Err(e) => failure = Some(e),
            }
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((traj, out))
}

/// Smooth convergence study. Metrics: L2 error at `T` and the time
/// integral of the stabilisation norm of `u_h - i_h u`.
pub fn run_convergence(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(RateTable, Report)> {
    let k = cfg.degree;
    let time = cfg.time().clone();
    let params = cfg.stab.resolve(0.5);
    let mut table = RateTable::new(&["l2_error", "s_norm_error"]);
    for &n in &cfg.mesh_sizes {
        let started = std::time::Instant::now();
        let mesh = unit_square_mesh(n, Periodicity::BOTH)?;
        let space = Space::new(Arc::clone(&mesh), k)?;
        let (spec, exact) = smooth_problem(time.t_end);
        let beta = spec.beta;
        let semi = SemiDiscrete::new(&space, spec, params)?;
        let ex = Arc::clone(&exact);
        let sp = &space;
        let transform = move |u: &Field, du: &Field, t: f64| {
            let iu = sp.interpolate_nodal(|x| ex(x, t)).expect("finite exact solution");
            let d = 1e-6;
            let idu = sp.interpolate_nodal(|x| (ex(x, t + d) - ex(x, t - d)) / (2.0 * d)).expect("finite exact solution");
            let e = u.coefficients.iter().zip(&iu.coefficients).map(|(a, b)| a - b).collect();
            let de = du.coefficients.iter().zip(&idu.coefficients).map(|(a, b)| a - b).collect();
            (Field::new(e), Field::new(de))
        };
        let (traj, samples) = run_with_samples(&semi, &time, SwitchMode::Live, 24, &transform)?;
        let unit = Weight::unit(beta);
        let l2 = weighted_error(&space, &traj.final_field, &exact, &unit, time.t_end, None);
        let s_norm = triple_norms(&space, &samples, &unit).triple_norm_whs_phi;
        info!("convergence n={n} k={k}: l2={l2:.3e} s={s_norm:.3e} ({:.1}s)", started.elapsed().as_secs_f64());
        write_diagnostics_csv(&out.join(format!("diagnostics_n{n}.csv")), &traj.records)?;
        table.push(n, mesh.global_h, vec![l2, s_norm]);
    }
    table.write_csv(&out.join("rates.csv"))?;
    let rate = table.finest_rate("l2_error");
    let target = k as f64 + 0.5 - 0.1;
    let mut checks = vec![
        Check::asserted("l2_rate", rate >= target, format!("finest L2 rate {rate:.3} (>= {target})")),
        Check::asserted("l2_monotone", table.is_monotone("l2_error"), "errors decrease under refinement"),
    ];
    let s_rate = table.finest_rate("s_norm_error");
    checks.push(Check::reported("s_norm_rate", s_rate >= k as f64 + 0.5 - 0.1, format!("finest S-norm rate {s_rate:.3}")));
    let data = json!({ "rates": table, "l2_rates": table.rates("l2_error"), "s_norm_rates": table.rates("s_norm_error") });
    Ok((table, Report { experiment: Experiment::Convergence, checks, data }))
}

/// Per-run summary of the shock experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ShockRun {
    pub label: String,
    pub n: usize,
    pub overshoot: f64,
    pub undershoot: f64,
    pub upstream_error: f64,
    pub l2_error: f64,
    pub max_active: usize,
}

fn upstream_probe(space: &Space, u: &Field) -> f64 {
    space
        .dof_coords()
        .iter()
        .zip(&u.coefficients)
        .filter(|(x, _)| x.x < 0.2)
        .map(|(_, v)| (v - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Plain CIP and combined stabilisation on the step problem.
pub fn run_shock(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report> {
    let k = cfg.degree;
    let time = cfg.time().clone();
    let params = cfg.stab.resolve(0.5);
    let mut runs = Vec::new();
    let mut checks = Vec::new();
    for &n in &cfg.mesh_sizes {
        let mesh = unit_square_mesh(n, Periodicity::NONE)?;
        let space = Space::new(mesh, k)?;
        let (spec, exact) = shock_problem(time.t_end);
        let beta = spec.beta;
        let semi = SemiDiscrete::new(&space, spec, params)?;
        if n == cfg.mesh_sizes[0] {
            let (lo, hi) = space.sampled_extrema(&semi.initial_field()?);
            checks.push(Check::reported("initial_gibbs", hi > 1.0 || lo < 0.0, format!("t=0 interpolant range [{lo:.4}, {hi:.4}]")));
        }
        for (label, mode) in [("plain_cip", SwitchMode::Frozen(0.0)), ("combined", SwitchMode::Live)] {
            let dir = out.join(format!("{label}_n{n}"));
            std::fs::create_dir_all(&dir)?;
            let traj = run(&semi, &time, mode, |_| Ok(())).with_context(|| format!("{label} run on n={n}"))?;
            let ev = Evaluator::new(&semi, mode);
            for snap in &traj.snapshots {
                let (_, sw) = switch_at(&ev, &snap.field, snap.t, &snap.switch)?;
                let ex = Arc::clone(&exact);
                let exact_field = space.interpolate_nodal(|x| ex(x, snap.t))?;
                write_vtk(&dir.join(format!("fields_t{:.3}.vtk", snap.t)), &space, label, &[("u_h", &snap.field), ("u_exact", &exact_field)], None)?;
                write_vtk(&dir.join(format!("switch_t{:.3}.vtk", snap.t)), &space, label, &[], Some(&sw))?;
            }
            write_diagnostics_csv(&dir.join("diagnostics.csv"), &traj.records)?;
            let u = &traj.final_field;
            let (lo, hi) = space.sampled_extrema(u);
            let run = ShockRun {
                label: label.into(),
                n,
                overshoot: hi - 1.0,
                undershoot: -lo,
                upstream_error: upstream_probe(&space, u),
                l2_error: weighted_error(&space, u, &exact, &Weight::unit(beta), time.t_end, None),
                max_active: traj.records.iter().map(|r| r.n_active_elements).max().unwrap_or(0),
            };
            info!("shock {label} n={n}: overshoot {:.4e} undershoot {:.4e}", run.overshoot, run.undershoot);
            runs.push(run);
        }
    }
    for &n in &cfg.mesh_sizes {
        let get = |l: &str| runs.iter().find(|r| r.n == n && r.label == l).expect("run recorded");
        let (plain, comb) = (get("plain_cip"), get("combined"));
        checks.push(Check::asserted(
            format!("overshoot_reduced_n{n}"),
            comb.overshoot < plain.overshoot,
            format!("combined {:.4e} < plain CIP {:.4e}", comb.overshoot, plain.overshoot),
        ));
    }
    let upstream: Vec<f64> = runs.iter().filter(|r| r.label == "combined").map(|r| r.upstream_error).collect();
    let decreasing = upstream.windows(2).all(|w| w[1] < w[0]);
    let small = upstream.iter().all(|&e| e < 1e-2);
    let detail = format!("max |u_h - 1| for x < 0.2: {upstream:?}");
    checks.push(if upstream.len() >= 2 {
        Check::asserted("upstream_probe", small && decreasing, detail)
    } else {
        Check::reported("upstream_probe", small, detail)
    });
    Ok(Report { experiment: Experiment::Shock, checks, data: json!({ "runs": runs }) })
}

/// Elements whose interior is cut by the vertical line `x = xs`.
pub fn crossing_elements(mesh: &Mesh, xs: f64) -> Vec<usize> {
    (0..mesh.n_elements())
        .filter(|&t| {
            let p = mesh.element_vertices(t);
            let lo = p.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
            let hi = p.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
            lo < xs && xs < hi
        })
        .collect()
}

/// Switch snapshot of the step problem at `t_end` for each exponent in
/// `cfg.alphas`, with saturation, far-field and monotonicity checks.
pub fn run_switch_viz(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report> {
    let k = cfg.degree;
    let time = cfg.time().clone();
    let n = cfg.mesh_sizes[0];
    let mesh = unit_square_mesh(n, Periodicity::NONE)?;
    let space = Space::new(Arc::clone(&mesh), k)?;
    let t = time.t_end;
    let xs = SHOCK_X0 + t;
    let h = mesh.global_h;
    let mut checks = Vec::new();
    let mut data = serde_json::Map::new();
    for &alpha in &cfg.alphas {
        let params = StabParams { alpha, ..cfg.stab.resolve(0.5) };
        let (spec, _) = shock_problem(t);
        let semi = SemiDiscrete::new(&space, spec, params)?;
        let traj = run(&semi, &time, SwitchMode::Live, |_| Ok(()))?;
        let ev = Evaluator::new(&semi, SwitchMode::Live);
        let (_, sw) = switch_at(&ev, &traj.final_field, t, &traj.final_switch)?;
        write_vtk(&out.join(format!("switch_t{t:.3}_alpha{alpha}.vtk")), &space, "switch", &[("u_h", &traj.final_field)], Some(&sw))?;
        let crossing = crossing_elements(&mesh, xs);
        let min_cross = crossing.iter().map(|&e| sw.varpi[e]).fold(1.0, f64::min);
        let u_saturating = crossing.iter().map(|&e| mesh.element_diameter[e] * sw.r_t[e]).fold(f64::INFINITY, f64::min);
        let u_init = semi.initial_field()?;
        let (_, sw0) = switch_at(&ev, &u_init, 0.0, &SwitchField::zeros(mesh.n_elements()))?;
        let mut at_line = crossing_elements(&mesh, SHOCK_X0);
        if at_line.is_empty() {
            at_line = mesh.elements_touching_vertical_line(SHOCK_X0);
        }
        let min_init = at_line.iter().map(|&e| sw0.varpi[e]).fold(1.0, f64::min);
        checks.push(Check::asserted(
            format!("saturated_initial_alpha{alpha}"),
            min_init == 1.0,
            format!("t=0: min varpi over {} elements at x = 1/3 is {min_init}", at_line.len()),
        ));
        let far: Vec<usize> = (0..mesh.n_elements()).filter(|&e| (mesh.centroid(e).x - xs).abs() > 10.0 * h).collect();
        let max_far = far.iter().map(|&e| sw.varpi[e]).fold(0.0, f64::max);
        checks.push(Check::asserted(
            format!("saturated_on_shock_alpha{alpha}"),
            !crossing.is_empty() && min_cross == 1.0,
            format!("t={t}: min varpi over {} crossing elements = {min_cross:.4}; U <= {u_saturating:.4} would saturate", crossing.len()),
        ));
        if alpha >= 4.0 {
            checks.push(Check::asserted(format!("quiet_far_field_alpha{alpha}"), max_far <= 0.01, format!("max varpi beyond 10h = {max_far:.3e}")));
        }
        // Same indicator, both exponents.
        let bases: Vec<f64> = sw.r_t.iter().enumerate().map(|(e, r)| mesh.element_diameter[e] * r / params.u_ref).collect();
        let ordered = bases.iter().filter(|&&b| b <= 1.0).all(|&b| switch_value(b, 4.0) <= switch_value(b, 1.0));
        checks.push(Check::asserted(format!("exponent_monotone_alpha{alpha}"), ordered, "varpi(alpha=4) <= varpi(alpha=1) where h R / U <= 1"));
        data.insert(format!("alpha{alpha}"), json!({ "min_crossing": min_cross, "u_saturating": u_saturating, "min_initial": min_init, "max_far": max_far, "n_crossing": crossing.len(), "max_varpi": sw.max() }));
    }
    Ok(Report { experiment: Experiment::SwitchViz, checks, data: Value::Object(data) })
}

/// Weighted and global errors of the strip problem for one exponent.
#[derive(Clone, Debug, Serialize)]
pub struct LocalisationRun {
    pub alpha: f64,
    pub table: RateTable,
    pub max_phi_rough: Vec<f64>,
    pub max_gradient_ratio: Vec<f64>,
}

/// Checks `phi <= h^(k + d/2)` on the rough region at both ends of the run.
fn check_weight_placement(space: &Space, weight: &Weight, t_end: f64) -> anyhow::Result<f64> {
    let h = space.mesh().global_h;
    let mut worst: f64 = 0.0;
    for t in [0.0, t_end] {
        let split = region_split_shock(space.mesh(), STRIP.shock_x0 + t, 2.0 * h)?;
        worst = worst.max(weight.check_decay(space, &split.rough, t).context("weight reaches into the shock region")?);
    }
    Ok(worst)
}

pub fn run_localisation(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report> {
    let k = cfg.degree;
    let time = cfg.time().clone();
    let t_end = time.t_end;
    let upstream = cfg.weight.clone().unwrap_or_else(|| strip_weight(true));
    let on_shock = WeightSpec { x0: [STRIP.shock_x0, 0.5 * STRIP.width], ..upstream.clone() };
    let u_max = 1.25;
    let mut runs = Vec::new();
    for &alpha in &cfg.alphas {
        let params = StabParams { alpha, ..cfg.stab.resolve(0.5 * u_max) };
        let mut table = RateTable::new(&["weighted", "global", "weighted_on_shock"]);
        let mut max_phi = Vec::new();
        let mut grad = Vec::new();
        for &n in &cfg.mesh_sizes {
            let started = std::time::Instant::now();
            let mesh = strip_mesh(n)?;
            let space = Space::new(Arc::clone(&mesh), k)?;
            let (spec, exact) = strip_problem(t_end);
            let beta = spec.beta;
            let h = mesh.global_h;
            let w_up = upstream.resolve(h, beta)?;
            let w_shock = on_shock.resolve(h, beta)?;
            max_phi.push(check_weight_placement(&space, &w_up, t_end)?);
            grad.push(w_up.max_gradient_ratio(&space, 0.0).max(w_up.max_gradient_ratio(&space, t_end)));
            let semi = SemiDiscrete::new(&space, spec, params)?;
            let traj = run(&semi, &time, SwitchMode::Live, |_| Ok(()))?;
            let u = &traj.final_field;
            let errors = vec![
                weighted_error(&space, u, &exact, &w_up, t_end, None),
                weighted_error(&space, u, &exact, &Weight::unit(beta), t_end, None),
                weighted_error(&space, u, &exact, &w_shock, t_end, None),
            ];
            info!("localisation alpha={alpha} n={n}: {errors:?} ({:.1}s)", started.elapsed().as_secs_f64());
            table.push(n, h, errors);
        }
        table.write_csv(&out.join(format!("rates_alpha{alpha}.csv")))?;
        runs.push(LocalisationRun { alpha, table, max_phi_rough: max_phi, max_gradient_ratio: grad });
    }
    let mut checks = Vec::new();
    for r in &runs {
        let a = r.alpha;
        let weighted = r.table.rates("weighted");
        let global = r.table.rates("global");
        let shock = r.table.rates("weighted_on_shock");
        let min_w = weighted.iter().copied().fold(f64::INFINITY, f64::min);
        let max_g = global.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_s = shock.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target = if a >= 2.0 { k as f64 + 0.5 - 0.1 } else { (k as f64 + 0.5).min(1.5) };
        checks.push(Check::asserted(format!("weighted_rate_alpha{a}"), min_w >= target, format!("weighted rates {weighted:.3?} (>= {target})")));
        checks.push(Check::asserted(format!("global_rate_stalls_alpha{a}"), max_g <= 1.0, format!("global rates {global:.3?} (<= 1.0)")));
        checks.push(Check::asserted(format!("shock_weight_stalls_alpha{a}"), max_s < 2.0, format!("rates with weight on the shock {shock:.3?} (< 2.0)")));
        let max_ratio = r.max_gradient_ratio.iter().copied().fold(0.0, f64::max);
        checks.push(Check::asserted(format!("weight_gradient_bound_alpha{a}"), max_ratio <= 1.5, format!("max sigma |grad phi| / phi = {max_ratio:.4}")));
    }
    let extra: Vec<Value> = cfg
        .alphas
        .iter()
        .filter(|&&a| a < 2.0)
        .map(|&a| json!({ "alpha": a, "extra_term_exponent": (2.0 + a) / (2.0 - a) }))
        .collect();
    Ok(Report { experiment: Experiment::Localisation, checks, data: json!({ "runs": runs, "extra_terms": extra }) })
}

/// Stability-inequality terms along a computed trajectory.
pub fn trajectory_terms(
    space: &Space,
    semi: &SemiDiscrete<'_>,
    time: &TimeStepperConfig,
    weight: &Weight,
    theta: f64,
    samples: usize,
) -> anyhow::Result<Vec<StabilityTerms>> {
    let identity = |u: &Field, du: &Field, _t: f64| (u.clone(), du.clone());
    let (_, samples) = run_with_samples(semi, time, SwitchMode::Live, samples, &identity)?;
    let p = semi.params;
    samples
        .iter()
        .map(|s| Ok(stability_terms(space, &semi.mass, s, weight, theta, p.sigma0, p.sigma1)?))
        .collect()
}

/// Smallest `C` covering `count` random trajectories `v(t) = a + t b`.
pub fn calibrate_stability_constant(
    space: &Space,
    semi: &SemiDiscrete<'_>,
    weight: &Weight,
    theta: f64,
    t_end: f64,
    count: usize,
    seed: u64,
) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ev = Evaluator::new(semi, SwitchMode::Live);
    let n = space.n_dofs();
    let p = semi.params;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut terms = Vec::new();
        for i in 0..=4 {
            let t = t_end * i as f64 / 4.0;
            let v: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a + t * b).collect();
            let switch = ev.switch_for(&v, &b, t)?;
            let sample = NormSample { t, v: Field::new(v), dt_v: Field::new(b.clone()), switch };
            terms.push(stability_terms(space, &semi.mass, &sample, weight, theta, p.sigma0, p.sigma1)?);
        }
        worst = worst.max(required_constant(&terms, C_THETA, weight.spec.k_decay));
    }
    Ok(worst)
}

pub fn stability_weight(mesh: &Mesh) -> WeightSpec {
    let c = mesh.domain.center();
    WeightSpec { x0: [c.x, c.y], r0: 0.15, k_decay: 2.0, blend_width: None, smoothness: 2, periods: Some([Some(mesh.domain.width()), Some(mesh.domain.height())]) }
}

pub fn run_stability_diag(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report> {
    let k = cfg.degree;
    let time = cfg.time().clone();
    let params = cfg.stab.resolve(0.5);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut series = csv::Writer::from_path(out.join("stability_margin.csv"))?;
    series.write_record(["n", "t", "l2_phi_sq", "whs_sq", "bilinear"])?;
    for &n in &cfg.mesh_sizes {
        let mesh = unit_square_mesh(n, Periodicity::BOTH)?;
        let space = Space::new(Arc::clone(&mesh), k)?;
        let (spec, _) = smooth_problem(time.t_end);
        let beta = spec.beta;
        let weight_spec = cfg.weight.clone().unwrap_or_else(|| stability_weight(&mesh));
        let weight = weight_spec.resolve(mesh.global_h, beta)?;
        let semi = SemiDiscrete::new(&space, spec, params)?;
        let c = calibrate_stability_constant(&space, &semi, &weight, cfg.theta, time.t_end, 50, cfg.seed)?;
        let terms = trajectory_terms(&space, &semi, &time, &weight, cfg.theta, 16)?;
        for s in &terms {
            series.write_record(&[n.to_string(), format!("{:e}", s.t), format!("{:e}", s.l2_phi_sq), format!("{:e}", s.whs_sq), format!("{:e}", s.bilinear)])?;
        }
        let margin = stability_margin(&terms, C_THETA, c, weight.spec.k_decay);
        let (lhs, rhs, _) = stability_sides(&terms, C_THETA);
        let needed = required_constant(&terms, C_THETA, weight.spec.k_decay);
        checks.push(Check::asserted(format!("smooth_margin_n{n}"), margin >= 0.0, format!("margin {margin:.4e} with calibrated C = {c:.4e}")));
        if needed > c {
            log::warn!("theta = {} may be too large: smooth run needs C = {needed:.3e} > calibrated {c:.3e}", cfg.theta);
        }
        rows.push(json!({ "n": n, "calibrated_c": c, "required_c": needed, "margin": margin, "lhs": lhs, "rhs_without_c": rhs }));
    }
    series.flush()?;

    // Shock run: reported only.
    let n = cfg.mesh_sizes[0];
    let mesh = unit_square_mesh(n, Periodicity::NONE)?;
    let space = Space::new(Arc::clone(&mesh), k)?;
    let (spec, _) = shock_problem(time.t_end);
    let weight = WeightSpec { periods: None, ..stability_weight(&mesh) }.resolve(mesh.global_h, spec.beta)?;
    let semi = SemiDiscrete::new(&space, spec, params)?;
    let terms = trajectory_terms(&space, &semi, &time, &weight, cfg.theta, 16)?;
    let needed = required_constant(&terms, C_THETA, weight.spec.k_decay);
    checks.push(Check::reported("shock_required_c", needed.is_finite(), format!("shock run needs C = {needed:.4e}")));
    Ok(Report { experiment: Experiment::StabilityDiag, checks, data: json!({ "smooth": rows, "shock_required_c": needed }) })
}

/// Short periodic run checking conservation and stability.
pub fn run_smoke(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report> {
    let n = cfg.mesh_sizes[0];
    let mesh = unit_square_mesh(n, Periodicity::BOTH)?;
    let space = Space::new(mesh, cfg.degree)?;
    let time = cfg.time().clone();
    let (spec, exact) = smooth_problem(time.t_end);
    let beta = spec.beta;
    let semi = SemiDiscrete::new(&space, spec, cfg.stab.resolve(0.5))?;
    let traj = run(&semi, &time, SwitchMode::Live, |_| Ok(()))?;
    write_diagnostics_csv(&out.join("diagnostics.csv"), &traj.records)?;
    write_vtk(&out.join(format!("fields_t{:.3}.vtk", time.t_end)), &space, "smoke", &[("u_h", &traj.final_field)], Some(&traj.final_switch))?;
    let m0 = traj.records[0].mass;
    let drift = traj.records.iter().map(|r| (r.mass - m0).abs()).fold(0.0, f64::max);
    let energy_ok = traj.records.windows(2).all(|w| w[1].energy <= w[0].energy * (1.0 + 1e-12));
    let err = weighted_error(&space, &traj.final_field, &exact, &Weight::unit(beta), time.t_end, None);
    let checks = vec![
        Check::asserted("mass_conserved", drift <= 1e-10, format!("max mass drift {drift:.3e}")),
        Check::asserted("energy_non_increasing", energy_ok, "per-step energy"),
        Check::reported("l2_error", err.is_finite(), format!("{err:.4e}")),
    ];
    Ok(Report { experiment: Experiment::Smoke, checks, data: json!({ "steps": traj.records.len(), "l2_error": err }) })
}

/// Runs the configured experiment and writes its outputs and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Report> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let report = match cfg.experiment {
        Experiment::Smoke => run_smoke(cfg, out)?,
        Experiment::Convergence => run_convergence(cfg, out)?.1,
        Experiment::Shock => run_shock(cfg, out)?,
        Experiment::SwitchViz => run_switch_viz(cfg, out)?,
        Experiment::Localisation => run_localisation(cfg, out)?,
        Experiment::StabilityDiag => run_stability_diag(cfg, out)?,
    };
    report.write(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_table_rates_and_csv() {
        let mut t = RateTable::new(&["e"]);
        t.push(8, 0.1, vec![1e-2]);
        t.push(16, 0.05, vec![2.5e-3]);
        t.push(32, 0.025, vec![6.25e-4]);
        assert_eq!(t.rates("e"), vec![2.0, 2.0]);
        assert!(t.is_monotone("e"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rates.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,h,e,e_rate");
        assert_eq!(lines[1], "8,1e-1,1e-2,");
        assert_eq!(lines[2], "16,5e-2,2.5e-3,2.000000");
    }

    #[test]
    fn non_monotone_sequence_flagged() {
        let mut t = RateTable::new(&["e"]);
        t.push(8, 0.1, vec![1e-2]);
        t.push(16, 0.05, vec![2e-2]);
        assert!(!t.is_monotone("e"));
        assert!(t.finest_rate("e") < 0.0);
    }

    #[test]
    fn crossing_elements_of_a_grid_line_are_empty() {
        let m = unit_square_mesh(6, Periodicity::NONE).unwrap();
        // x = 1/3 is a grid line on a 6 x 6 mesh; only diagonals could cross it, and they don't.
        assert!(crossing_elements(&m, 2.0 / 6.0).is_empty());
        assert_eq!(crossing_elements(&m, 0.4).len(), 12);
    }

    #[test]
    fn strip_weight_is_placed_away_from_the_shock() {
        for n in [16, 32] {
            let mesh = strip_mesh(n).unwrap();
            let space = Space::new(mesh, 2).unwrap();
            let w = strip_weight(true).resolve(space.mesh().global_h, Vec2::new(1.0, 0.0)).unwrap();
            assert!(check_weight_placement(&space, &w, 0.25).is_ok());
            let bad = strip_weight(false).resolve(space.mesh().global_h, Vec2::new(1.0, 0.0)).unwrap();
            assert!(check_weight_placement(&space, &bad, 0.25).is_err());
        }
    }

    #[test]
    fn zero_trajectory_has_zero_sides() {
        let mesh = unit_square_mesh(4, Periodicity::BOTH).unwrap();
        let space = Space::new(Arc::clone(&mesh), 2).unwrap();
        let (spec, _) = smooth_problem(0.1);
        let spec = ProblemSpec { u0: Arc::new(|_| 0.0), ..spec };
        let weight = stability_weight(&mesh).resolve(mesh.global_h, spec.beta).unwrap();
        let semi = SemiDiscrete::new(&space, spec, StabParams::default()).unwrap();
        let time = TimeStepperConfig { t_end: 0.05, ..TimeStepperConfig::default() };
        let terms = trajectory_terms(&space, &semi, &time, &weight, 0.1, 4).unwrap();
        let (lhs, rhs, l2) = stability_sides(&terms, C_THETA);
        assert_eq!((lhs, rhs, l2), (0.0, 0.0, 0.0));
        assert_eq!(stability_margin(&terms, C_THETA, 1.0, 2.0), 0.0);
    }
}
