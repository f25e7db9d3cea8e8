//! Residual indicator, switch, and the two stabilisation forms:
//! the gradient-jump penalty `s0` (weighted by `1 - varpi`) and the
//! artificial diffusion `s1` (weighted by `varpi`).

use serde::{Deserialize, Serialize};

use crate::basis::LagrangeBasis;
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec2};
use crate::space::{edge_barycentric, Field, Space};
use crate::sparse::{CsrMatrix, TripletBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabParams {
    pub sigma0: f64,
    pub sigma1: f64,
    pub alpha: f64,
    /// Residual normalisation `U`.
    #[serde(rename = "u_ref")]
    pub u_ref: f64,
    pub rho1: u8,
    pub rho2: u8,
}

impl Default for StabParams {
    fn default() -> Self {
        Self { sigma0: 0.01, sigma1: 0.01, alpha: 4.0, u_ref: 0.5, rho1: 0, rho2: 1 }
    }
}

impl StabParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.sigma0.is_finite() && self.sigma0 >= 0.0) {
            return bad(format!("sigma0 must be >= 0, got {}", self.sigma0));
        }
        if !(self.sigma1.is_finite() && self.sigma1 >= 0.0) {
            return bad(format!("sigma1 must be >= 0, got {}", self.sigma1));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.u_ref.is_finite() && self.u_ref > 0.0) {
            return bad(format!("u_ref must be > 0, got {}", self.u_ref));
        }
        if self.rho1 > 1 || self.rho2 > 1 {
            return bad(format!("rho1, rho2 must be 0 or 1, got {}, {}", self.rho1, self.rho2));
        }
        if self.sigma1 > 0.0 && self.rho1 + self.rho2 == 0 {
            return bad("sigma1 > 0 needs rho1 + rho2 >= 1".into());
        }
        Ok(())
    }
}

/// Elementwise switch values and the indicator they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchField {
    pub varpi: Vec<f64>,
    pub r_t: Vec<f64>,
    pub source_time: Option<f64>,
}

impl SwitchField {
    pub fn constant(n_elements: usize, value: f64) -> Self {
        Self { varpi: vec![value; n_elements], r_t: vec![0.0; n_elements], source_time: None }
    }

    pub fn zeros(n_elements: usize) -> Self {
        Self::constant(n_elements, 0.0)
    }

    pub fn max(&self) -> f64 {
        self.varpi.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.varpi.iter().filter(|&&v| v > threshold).count()
    }
}

/// Precomputed sample tables for the sup-norms in `R_T`: cell quadrature
/// points plus local nodes, and facet quadrature points plus edge nodes.
#[derive(Clone, Debug)]
pub struct ResidualSampler {
    n_local: usize,
    cell_values: Vec<f64>,
    cell_dlam: Vec<[f64; 3]>,
    n_cell: usize,
    edge_params: Vec<f64>,
    /// `edge_dlam[e][r]`, point-major, at `s` (r = 0) or `1 - s` (r = 1).
    edge_dlam: Vec<Vec<Vec<[f64; 3]>>>,
}

impl ResidualSampler {
    pub fn new(space: &Space) -> Self {
        let basis = space.basis();
        let n = basis.n_local();
        let mut points: Vec<[f64; 3]> = space.cell_rule().points.clone();
        points.extend((0..n).map(|i| basis.node_barycentric(i)));
        let (cell_values, cell_dlam) = tabulate(basis, &points);

        let k = basis.degree();
        let mut edge_params: Vec<f64> = space.line_rule().points.clone();
        edge_params.extend((0..=k).map(|j| j as f64 / k as f64));
        let edge_dlam = (0..3)
            .map(|e| {
                [false, true]
                    .iter()
                    .map(|&rev| {
                        let pts: Vec<[f64; 3]> = edge_params
                            .iter()
                            .map(|&s| edge_barycentric(e, if rev { 1.0 - s } else { s }))
                            .collect();
                        tabulate(basis, &pts).1
                    })
                    .collect()
            })
            .collect();
        Self { n_local: n, cell_values, cell_dlam, n_cell: points.len(), edge_params, edge_dlam }
    }

    /// Per-element `R_T`.
    #[allow(clippy::too_many_arguments)]
    pub fn indicator(
        &self,
        space: &Space,
        w: &[f64],
        dt_w: &[f64],
        f_h: &[f64],
        beta: Vec2,
        params: &StabParams,
    ) -> Vec<f64> {
        let n = self.n_local;
        let mut lw = [0.0; 10];
        let mut ldt = [0.0; 10];
        let mut lf = [0.0; 10];
        let mut ln = [0.0; 10];
        (0..space.n_elements())
            .map(|t| {
                let geo = space.geometry(t);
                space.gather(w, t, &mut lw[..n]);
                let mut r = 0.0;
                if params.rho2 > 0 {
                    space.gather(dt_w, t, &mut ldt[..n]);
                    space.gather(f_h, t, &mut lf[..n]);
                    let mut bulk: f64 = 0.0;
                    for p in 0..self.n_cell {
                        let phi = &self.cell_values[p * n..(p + 1) * n];
                        let dl = &self.cell_dlam[p * n..(p + 1) * n];
                        let mut d = [0.0; 3];
                        let mut val = 0.0;
                        for i in 0..n {
                            val += (ldt[i] - lf[i]) * phi[i];
                            for m in 0..3 {
                                d[m] += lw[i] * dl[i][m];
                            }
                        }
                        bulk = bulk.max((val + beta.dot(&geo.gradient(d))).abs());
                    }
                    r += params.rho2 as f64 * bulk;
                }
                if params.rho1 > 0 {
                    let mut jump: f64 = 0.0;
                    for side in space.sides(t) {
                        let Some((nb, nb_edge)) = side.neighbor else { continue };
                        space.gather(w, nb, &mut ln[..n]);
                        let own = &self.edge_dlam[side.edge][0];
                        let other = &self.edge_dlam[nb_edge][side.neighbor_reversed as usize];
                        let nb_geo = space.geometry(nb);
                        for p in 0..self.edge_params.len() {
                            let g_own = geo.gradient(contract(&own[p * n..(p + 1) * n], &lw[..n]));
                            let g_nb = nb_geo.gradient(contract(&other[p * n..(p + 1) * n], &ln[..n]));
                            jump = jump.max(((g_own - g_nb).dot(&side.normal)).abs());
                        }
                    }
                    r += params.rho1 as f64 * jump;
                }
                r
            })
            .collect()
    }
}

fn tabulate(basis: &LagrangeBasis, points: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = basis.n_local();
    let mut values = vec![0.0; points.len() * n];
    let mut dlam = vec![[0.0; 3]; points.len() * n];
    for (p, lam) in points.iter().enumerate() {
        basis.values(*lam, &mut values[p * n..(p + 1) * n]);
        basis.barycentric_derivatives(*lam, &mut dlam[p * n..(p + 1) * n]);
    }
    (values, dlam)
}

fn contract(dl: &[[f64; 3]], c: &[f64]) -> [f64; 3] {
    let mut d = [0.0; 3];
    for (g, x) in dl.iter().zip(c) {
        d[0] += g[0] * x;
        d[1] += g[1] * x;
        d[2] += g[2] * x;
    }
    d
}

/// `R_T` on every element; see [`ResidualSampler::indicator`].
pub fn residual_indicator(
    space: &Space,
    w: &Field,
    dt_w: &Field,
    f_h: &Field,
    beta: Vec2,
    params: &StabParams,
) -> Vec<f64> {
    ResidualSampler::new(space).indicator(space, &w.coefficients, &dt_w.coefficients, &f_h.coefficients, beta, params)
}

/// `varpi_T = min(1, h_T R_T / U)^alpha`.
pub fn switch_field(r_t: Vec<f64>, mesh: &Mesh, params: &StabParams) -> SwitchField {
    let varpi = r_t
        .iter()
        .zip(&mesh.element_diameter)
        .map(|(&r, &h)| switch_value(h * r / params.u_ref, params.alpha))
        .collect();
    SwitchField { varpi, r_t, source_time: None }
}

pub fn switch_value(base: f64, alpha: f64) -> f64 {
    base.min(1.0).max(0.0).powf(alpha)
}

/// `s0(varpi; u, v)` by direct quadrature over element boundaries.
pub fn s0_apply(space: &Space, switch: &SwitchField, u: &Field, v: &Field, beta: Vec2) -> f64 {
    let b = beta.norm();
    let rule = space.line_rule();
    let mut total = 0.0;
    for t in 0..space.n_elements() {
        let h = space.geometry(t).h;
        let factor = h * h * (1.0 - switch.varpi[t]) * b;
        if factor == 0.0 {
            continue;
        }
        for side in space.sides(t) {
            let Some((nb, nb_edge)) = side.neighbor else { continue };
            let mut acc = 0.0;
            for (&s, &w) in rule.points.iter().zip(&rule.weights) {
                let own = edge_barycentric(side.edge, s);
                let other = edge_barycentric(nb_edge, if side.neighbor_reversed { 1.0 - s } else { s });
                let ju = (space.evaluate(u, t, own).1 - space.evaluate(u, nb, other).1).dot(&side.normal);
                let jv = (space.evaluate(v, t, own).1 - space.evaluate(v, nb, other).1).dot(&side.normal);
                acc += w * side.length * ju * jv;
            }
            total += factor * acc;
        }
    }
    total
}

/// `s1(varpi; u, v)` by direct quadrature over elements.
pub fn s1_apply(space: &Space, switch: &SwitchField, u: &Field, v: &Field, beta: Vec2) -> f64 {
    let b = beta.norm();
    space.integrate(None, |qp| {
        let t = qp.element;
        let c = space.geometry(t).h * switch.varpi[t] * b;
        if c == 0.0 {
            return 0.0;
        }
        c * space.evaluate(u, t, qp.bary).1.dot(&space.evaluate(v, t, qp.bary).1)
    })
}

#[derive(Clone, Debug)]
struct JumpBlock {
    dofs: Vec<usize>,
    /// `jump[q * 2n + i]`: normal-gradient jump of local function `i` at point `q`.
    jump: Vec<f64>,
    weights: Vec<f64>,
}

/// Matrix realisation of `s0` and `s1` with per-element switch weights
/// applied at application time.
#[derive(Clone, Debug)]
pub struct StabilizationOperator {
    n_dofs: usize,
    n_local: usize,
    element_dofs: Vec<usize>,
    /// `h_T |beta| K_T`, row-major per element.
    stiffness: Vec<f64>,
    jumps: Vec<JumpBlock>,
    /// Jump blocks of element `t`: `jump_offsets[t]..jump_offsets[t + 1]`.
    jump_offsets: Vec<usize>,
}

impl StabilizationOperator {
    pub fn new(space: &Space, beta: Vec2) -> Self {
        let b = beta.norm();
        let n = space.n_local();
        let n_elem = space.n_elements();
        let rule = space.line_rule();
        let nq = rule.len();
        let cell = space.cell_rule();
        let mut stiffness = vec![0.0; n_elem * n * n];
        let mut jumps = Vec::new();
        let mut jump_offsets = vec![0];
        let mut element_dofs = Vec::with_capacity(n_elem * n);
        for t in 0..n_elem {
            let geo = space.geometry(t);
            element_dofs.extend_from_slice(space.element_dofs(t));
            let grads = space.cell_basis_gradients(t);
            let k = &mut stiffness[t * n * n..(t + 1) * n * n];
            for (q, w) in cell.weights.iter().enumerate() {
                let scale = w * 2.0 * geo.area * geo.h * b;
                for i in 0..n {
                    for j in 0..n {
                        k[i * n + j] += scale * grads[q * n + i].dot(&grads[q * n + j]);
                    }
                }
            }
            for side in space.sides(t) {
                let Some((nb, nb_edge)) = side.neighbor else { continue };
                let own = space.edge_tabulation(side.edge, false);
                let other = space.edge_tabulation(nb_edge, side.neighbor_reversed);
                let nb_geo = space.geometry(nb);
                let mut jump = vec![0.0; nq * 2 * n];
                for q in 0..nq {
                    for i in 0..n {
                        jump[q * 2 * n + i] = geo.gradient(own.dlam[q * n + i]).dot(&side.normal);
                        jump[q * 2 * n + n + i] = -nb_geo.gradient(other.dlam[q * n + i]).dot(&side.normal);
                    }
                }
                let mut dofs = space.element_dofs(t).to_vec();
                dofs.extend_from_slice(space.element_dofs(nb));
                let weights = rule.weights.iter().map(|w| w * side.length * geo.h * geo.h * b).collect();
                jumps.push(JumpBlock { dofs, jump, weights });
            }
            jump_offsets.push(jumps.len());
        }
        Self { n_dofs: space.n_dofs(), n_local: n, element_dofs, stiffness, jumps, jump_offsets }
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    /// `out += sum_T c0_T S0_T u + c1_T S1_T u`, where `S0_T`, `S1_T` are the
    /// unswitched element contributions.
    pub fn apply_weighted(&self, c0: &[f64], c1: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.n_local;
        let mut jv = [0.0; 8];
        for t in 0..c0.len() {
            if c1[t] != 0.0 {
                let dofs = &self.element_dofs[t * n..(t + 1) * n];
                let k = &self.stiffness[t * n * n..(t + 1) * n * n];
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += k[i * n + j] * u[dofs[j]];
                    }
                    out[dofs[i]] += c1[t] * acc;
                }
            }
            if c0[t] != 0.0 {
                for block in &self.jumps[self.jump_offsets[t]..self.jump_offsets[t + 1]] {
                    let m = block.dofs.len();
                    let nq = block.weights.len();
                    for q in 0..nq {
                        let row = &block.jump[q * m..(q + 1) * m];
                        let mut acc = 0.0;
                        for (r, &d) in row.iter().zip(&block.dofs) {
                            acc += r * u[d];
                        }
                        jv[q] = acc * block.weights[q] * c0[t];
                    }
                    for (i, &d) in block.dofs.iter().enumerate() {
                        let mut acc = 0.0;
                        for q in 0..nq {
                            acc += block.jump[q * m + i] * jv[q];
                        }
                        out[d] += acc;
                    }
                }
            }
        }
    }

    /// `out += sigma0 S0(varpi) u + sigma1 S1(varpi) u`.
    pub fn apply(&self, switch: &SwitchField, sigma0: f64, sigma1: f64, u: &[f64], out: &mut [f64]) {
        let c0: Vec<f64> = switch.varpi.iter().map(|w| sigma0 * (1.0 - w)).collect();
        let c1: Vec<f64> = switch.varpi.iter().map(|w| sigma1 * w).collect();
        self.apply_weighted(&c0, &c1, u, out);
    }

    /// Sparse `(S0, S1)` for the given switch.
    pub fn assemble(&self, switch: &SwitchField) -> (CsrMatrix, CsrMatrix) {
        let n = self.n_local;
        let mut s0 = TripletBuilder::new(self.n_dofs, self.n_dofs);
        let mut s1 = TripletBuilder::new(self.n_dofs, self.n_dofs);
        for (t, &w) in switch.varpi.iter().enumerate() {
            let dofs = &self.element_dofs[t * n..(t + 1) * n];
            let k: Vec<f64> = self.stiffness[t * n * n..(t + 1) * n * n].iter().map(|v| v * w).collect();
            s1.add_block(dofs, &k);
            for block in &self.jumps[self.jump_offsets[t]..self.jump_offsets[t + 1]] {
                let m = block.dofs.len();
                let mut local = vec![0.0; m * m];
                for (q, wq) in block.weights.iter().enumerate() {
                    let row = &block.jump[q * m..(q + 1) * m];
                    for i in 0..m {
                        for j in 0..m {
                            local[i * m + j] += (1.0 - w) * wq * row[i] * row[j];
                        }
                    }
                }
                s0.add_block(&block.dofs, &local);
            }
        }
        (s0.build(), s1.build())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, Periodicity, Rect};
    use crate::sparse::dot;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space(n: usize, k: usize, per: Periodicity) -> Space {
        Space::new(Arc::new(build_structured_mesh(n, n, Rect::unit_square(), per).unwrap()), k).unwrap()
    }

    fn hat() -> (Space, Field) {
        let s = space(1, 1, Periodicity::NONE);
        (s, Field::new(vec![0.0, 1.0, 0.0, 0.0]))
    }

    fn random_field(s: &Space, rng: &mut ChaCha8Rng) -> Field {
        Field::new((0..s.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn params_validation() {
        assert!(StabParams::default().validate().is_ok());
        assert!(StabParams { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(StabParams { u_ref: 0.0, ..Default::default() }.validate().is_err());
        assert!(StabParams { rho1: 0, rho2: 0, ..Default::default() }.validate().is_err());
        assert!(StabParams { rho1: 0, rho2: 0, sigma1: 0.0, ..Default::default() }.validate().is_ok());
        assert!(StabParams { rho1: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn indicator_two_triangle_jump() {
        let (s, w) = hat();
        let zero = Field::zeros(&s);
        let p = StabParams { rho1: 1, rho2: 0, ..Default::default() };
        let r = residual_indicator(&s, &w, &zero, &zero, Vec2::new(1.0, 0.0), &p);
        assert_relative_eq!(r[0], 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r[1], 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn indicator_bulk_linear() {
        let s = space(4, 2, Periodicity::NONE);
        let w = s.interpolate_nodal(|p| p.x).unwrap();
        let zero = Field::zeros(&s);
        let r = residual_indicator(&s, &w, &zero, &zero, Vec2::new(1.0, 0.0), &StabParams::default());
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn indicator_vanishes_on_exact_polynomial_solution() {
        // w = x^2 - y, beta = (1, 1): beta . grad w = 2x - 1 = f, dt w = 0.
        let s = space(3, 2, Periodicity::NONE);
        let w = s.interpolate_nodal(|p| p.x * p.x - p.y).unwrap();
        let f = s.interpolate_nodal(|p| 2.0 * p.x - 1.0).unwrap();
        let zero = Field::zeros(&s);
        let p = StabParams { rho1: 1, rho2: 1, ..Default::default() };
        let r = residual_indicator(&s, &w, &zero, &f, Vec2::new(1.0, 1.0), &p);
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");
    }

    #[test]
    fn switch_values() {
        let m = build_structured_mesh(2, 2, Rect::unit_square(), Periodicity::NONE).unwrap();
        let h = m.element_diameter[0];
        let p = StabParams { u_ref: 1.0, alpha: 4.0, ..Default::default() };
        let r = vec![0.0, 0.5 / h, 10.0 / h, 1.0 / h, 0.0, 0.0, 0.0, 0.0];
        let sw = switch_field(r, &m, &p);
        assert_eq!(sw.varpi[0], 0.0);
        assert_relative_eq!(sw.varpi[1], 1.0 / 16.0, epsilon = 1e-15);
        assert_eq!(sw.varpi[2], 1.0);
        assert_relative_eq!(sw.varpi[3], 1.0, epsilon = 1e-15);
        assert_eq!(switch_value(3.0, 1.0), 1.0);
    }

    #[test]
    fn two_triangle_form_values() {
        let (s, u) = hat();
        let beta = Vec2::new(1.0, 0.0);
        let s0 = s0_apply(&s, &SwitchField::zeros(2), &u, &u, beta);
        assert_relative_eq!(s0, 8.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(s0_apply(&s, &SwitchField::constant(2, 1.0), &u, &u, beta), 0.0);
        let s1 = s1_apply(&s, &SwitchField::constant(2, 1.0), &u, &u, beta);
        assert_relative_eq!(s1, 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(s1_apply(&s, &SwitchField::zeros(2), &u, &u, beta), 0.0);
    }

    #[test]
    fn forms_vanish_on_global_polynomials() {
        let s = space(3, 3, Periodicity::NONE);
        let poly = s.interpolate_nodal(|p| p.x * p.x * p.y - p.y * p.y * p.y).unwrap();
        let constant = s.interpolate_nodal(|_| 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_field(&s, &mut rng);
        let sw = SwitchField { varpi: (0..s.n_elements()).map(|_| rng.random_range(0.0..1.0)).collect(), r_t: vec![], source_time: None };
        let beta = Vec2::new(0.3, -1.2);
        assert!(s0_apply(&s, &sw, &u, &poly, beta).abs() < 1e-11);
        assert!(s1_apply(&s, &sw, &constant, &u, beta).abs() < 1e-13);
    }

    #[test]
    fn operator_matches_quadrature_loops() {
        for (k, per) in [(1, Periodicity::NONE), (2, Periodicity::BOTH), (3, Periodicity::NONE)] {
            let s = space(3, k, per);
            let beta = Vec2::new(1.0, 0.5);
            let op = StabilizationOperator::new(&s, beta);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let sw = SwitchField { varpi: (0..s.n_elements()).map(|_| rng.random_range(0.0..1.0)).collect(), r_t: vec![], source_time: None };
            let (m0, m1) = op.assemble(&sw);
            assert!(m0.asymmetry() <= 1e-13 * m0.max_abs().max(1.0));
            assert!(m1.asymmetry() <= 1e-13 * m1.max_abs().max(1.0));
            let lin = s.interpolate_nodal(|p| 2.0 * p.x - p.y).unwrap();
            if !per.x {
                assert!(m0.mul_vec(&lin.coefficients).iter().all(|v| v.abs() < 1e-12));
            }
            for _ in 0..5 {
                let u = random_field(&s, &mut rng);
                let v = random_field(&s, &mut rng);
                let a0 = s0_apply(&s, &sw, &u, &v, beta);
                let a1 = s1_apply(&s, &sw, &u, &v, beta);
                assert_relative_eq!(m0.bilinear(&v.coefficients, &u.coefficients), a0, max_relative = 1e-11, epsilon = 1e-13);
                assert_relative_eq!(m1.bilinear(&v.coefficients, &u.coefficients), a1, max_relative = 1e-11, epsilon = 1e-13);
                let mut out = vec![0.0; s.n_dofs()];
                op.apply(&sw, 0.3, 0.7, &u.coefficients, &mut out);
                assert_relative_eq!(dot(&v.coefficients, &out), 0.3 * a0 + 0.7 * a1, max_relative = 1e-11, epsilon = 1e-13);
                assert!(s0_apply(&s, &sw, &u, &u, beta) >= 0.0);
                assert!(s1_apply(&s, &sw, &u, &u, beta) >= 0.0);
            }
        }
    }
}
