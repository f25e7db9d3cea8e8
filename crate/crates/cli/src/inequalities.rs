//! Bounded-ratio checks for the inequalities the error analysis relies on.
//! Each study returns the largest observed ratio over random inputs on one
//! mesh; callers compare the values across refinements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cipstab::mesh::{Periodicity, Vec2};
use cipstab::projections::{dg_jump_seminorm_sq, l2_project, oswald_average, DGField, ProjectionSource};
use cipstab::sparse::dot;
use cipstab::space::{Field, MassSolver, QuadPoint, Space};
use cipstab::stabilization::{residual_indicator, switch_field, StabParams, StabilizationOperator, SwitchField};
use cipstab::weights::{averaged_material_derivative, weighted_l2, weighted_material_sq, Weight, WeightSpec};

use crate::experiments::unit_square_mesh;

#[derive(Clone, Debug, Serialize)]
pub struct RatioSample {
    pub n: usize,
    pub h: f64,
    pub max_ratio: f64,
}

/// Relative spread `max |c_i / c_0 - 1|` of a constant across meshes.
pub fn spread(samples: &[RatioSample]) -> f64 {
    let c0 = samples[0].max_ratio;
    samples.iter().map(|s| (s.max_ratio / c0 - 1.0).abs()).fold(0.0, f64::max)
}

fn random_field(space: &Space, rng: &mut ChaCha8Rng) -> Field {
    Field::new((0..space.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random field with amplitudes spread over three decades, so the switch it
/// induces takes values across `[0, 1]`.
fn graded_field(space: &Space, rng: &mut ChaCha8Rng) -> Field {
    Field::new((0..space.n_dofs()).map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(-3.0 * rng.random::<f64>())).collect())
}

fn random_dg(space: &Space, rng: &mut ChaCha8Rng) -> DGField {
    let n = space.n_elements() * space.n_local();
    DGField::new(space, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized to the space")
}

fn periodic_space(n: usize, k: usize) -> Space {
    Space::new(unit_square_mesh(n, Periodicity::BOTH).expect("valid mesh"), k).expect("valid degree")
}

fn switch_of(space: &Space, w: &Field, dt_w: &Field, beta: Vec2, params: &StabParams) -> SwitchField {
    let r = residual_indicator(space, w, dt_w, &Field::zeros(space), beta, params);
    switch_field(r, space.mesh(), params)
}

/// `(s0(u, v), s1(u, v))` through the assembled operator.
fn forms(op: &StabilizationOperator, switch: &SwitchField, u: &Field, v: &Field) -> (f64, f64) {
    let n = u.len();
    let mut s0 = vec![0.0; n];
    op.apply(switch, 1.0, 0.0, &u.coefficients, &mut s0);
    let mut s1 = vec![0.0; n];
    op.apply(switch, 0.0, 1.0, &u.coefficients, &mut s1);
    (dot(&s0, &v.coefficients), dot(&s1, &v.coefficients))
}

/// `|v|_s^2 / (s0(w; v, v) + s1(w; v, v))` with the switch induced by `w`.
pub fn seminorm_control(n: usize, k: usize, count: usize, seed: u64) -> RatioSample {
    let space = periodic_space(n, k);
    let beta = Vec2::new(1.0, 0.5);
    let params = StabParams::default();
    let op = StabilizationOperator::new(&space, beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = SwitchField::zeros(space.n_elements());
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let v = random_field(&space, &mut rng);
        let w = graded_field(&space, &mut rng);
        let dt_w = graded_field(&space, &mut rng);
        let sw = switch_of(&space, &w, &dt_w, beta, &params);
        let (seminorm, _) = forms(&op, &zero, &v, &v);
        let (s0, s1) = forms(&op, &sw, &v, &v);
        worst = worst.max(seminorm / (s0 + s1));
    }
    RatioSample { n, h: space.mesh().global_h, max_ratio: worst }
}

/// `|s_i(w; z, h i_av L v)| / (s_i(w; z, z)^(1/2) ||h^(1/2) L v||)` for `i = 0, 1`,
/// at the maximising `z`.
pub fn residual_coupling(n: usize, k: usize, count: usize, seed: u64) -> [RatioSample; 2] {
    let space = periodic_space(n, k);
    let beta = Vec2::new(1.0, 0.5);
    let params = StabParams::default();
    let op = StabilizationOperator::new(&space, beta);
    let unit = Weight::unit(beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 2];
    for _ in 0..count {
        let v = random_field(&space, &mut rng);
        let dt_v = random_field(&space, &mut rng);
        let w = graded_field(&space, &mut rng);
        let dt_w = graded_field(&space, &mut rng);
        let sw = switch_of(&space, &w, &dt_w, beta, &params);
        let y = averaged_material_derivative(&space, &v, &dt_v, beta);
        // `z = y` attains the supremum over `z` by Cauchy-Schwarz.
        let z = y.clone();
        let lv = weighted_material_sq(&space, &v, &dt_v, &unit, 0.0).sqrt();
        let (zy0, zy1) = forms(&op, &sw, &z, &y);
        let (zz0, zz1) = forms(&op, &sw, &z, &z);
        for (i, (num, den)) in [(zy0, zz0), (zy1, zz1)].into_iter().enumerate() {
            if den > 0.0 {
                worst[i] = worst[i].max(num.abs() / (den.sqrt() * lv));
            }
        }
    }
    let h = space.mesh().global_h;
    [RatioSample { n, h, max_ratio: worst[0] }, RatioSample { n, h, max_ratio: worst[1] }]
}

/// Weight centred in the unit square. No minimum image: its kink on the
/// antipodal lines would dominate the projection defects.
pub fn centred_weight(h: f64, beta: Vec2) -> Weight {
    WeightSpec { x0: [0.5, 0.5], r0: 0.15, k_decay: 1.1, blend_width: None, smoothness: 2, periods: None }
        .resolve(h, beta)
        .expect("valid weight")
}

/// Ratios of the averaging and projection operators on random elementwise data.
#[derive(Clone, Debug, Serialize)]
pub struct OperatorBounds {
    pub n: usize,
    pub h: f64,
    /// `||i_av v||_phi / ||v||_phi`.
    pub oswald_weighted: f64,
    /// `||v - i_av v||^2 / sum_F h_F ||[v]||_F^2`.
    pub oswald_jump: f64,
    /// `||pi_h v||_phi / ||v||_phi`.
    pub projection_weighted: f64,
    /// `||phi^2 v_h - pi_h(phi^2 v_h)||_{1/phi} / ||v_h||_phi`.
    pub super_approximation: f64,
    /// `super_approximation / (h^(1/2) / K)`.
    pub super_approximation_scaled: f64,
}

/// Operator ratios on the non-periodic unit square.
pub fn operator_bounds(n: usize, k: usize, count: usize, seed: u64) -> OperatorBounds {
    let space = Space::new(unit_square_mesh(n, Periodicity::NONE).expect("valid mesh"), k).expect("valid degree");
    let mass = MassSolver::new(&space);
    let h = space.mesh().global_h;
    let beta = Vec2::new(1.0, 0.0);
    let weight = centred_weight(h, beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dg_norm = |v: &DGField| weighted_l2(&space, |qp: &QuadPoint| v.value(&space, qp.element, qp.bary), &weight, 0.0, None);
    let field_norm = |v: &Field| weighted_l2(&space, |qp: &QuadPoint| space.evaluate(v, qp.element, qp.bary).0, &weight, 0.0, None);
    let mut out = OperatorBounds { n, h, oswald_weighted: 0.0, oswald_jump: 0.0, projection_weighted: 0.0, super_approximation: 0.0, super_approximation_scaled: 0.0 };
    for _ in 0..count {
        let v = random_dg(&space, &mut rng);
        let av = oswald_average(&space, &v);
        let base = dg_norm(&v);
        out.oswald_weighted = out.oswald_weighted.max(field_norm(&av) / base);
        let defect = space.integrate(None, |qp| (v.value(&space, qp.element, qp.bary) - space.evaluate(&av, qp.element, qp.bary).0).powi(2));
        out.oswald_jump = out.oswald_jump.max(defect / dg_jump_seminorm_sq(&space, &v));
        let p = l2_project(&space, &mass, &ProjectionSource::Dg(&v)).expect("mass solve converges");
        out.projection_weighted = out.projection_weighted.max(field_norm(&p) / base);

        let vh = random_field(&space, &mut rng);
        let product = |qp: &QuadPoint| weight.phi(qp.x, 0.0).powi(2) * space.evaluate(&vh, qp.element, qp.bary).0;
        let proj = l2_project(&space, &mass, &ProjectionSource::Function(&product)).expect("mass solve converges");
        let lhs = space
            .integrate(None, |qp| {
                let d = product(qp) - space.evaluate(&proj, qp.element, qp.bary).0;
                d * d / weight.phi(qp.x, 0.0).powi(2)
            })
            .sqrt();
        out.super_approximation = out.super_approximation.max(lhs / field_norm(&vh));
    }
    out.super_approximation_scaled = out.super_approximation / (h.sqrt() / weight.spec.k_decay);
    out
}
