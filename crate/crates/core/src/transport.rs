//! Advection and inflow forms and the semi-discrete residual
//! `M du/dt = r(u, t; varpi)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec2;
use crate::space::{edge_barycentric, Field, MassSolver, Space};
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::stabilization::{StabParams, StabilizationOperator, SwitchField};

pub type SpaceTimeFn = Arc<dyn Fn(Vec2, f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Periodic,
    Inflow,
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub beta: Vec2,
    /// Source term; `None` means `f = 0`.
    pub f: Option<SpaceTimeFn>,
    /// Inflow data.
    pub g: SpaceTimeFn,
    pub u0: Arc<dyn Fn(Vec2) -> f64 + Send + Sync>,
    pub bc: BoundaryCondition,
    pub t_final: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("beta", &self.beta)
            .field("has_source", &self.f.is_some())
            .field("bc", &self.bc)
            .field("t_final", &self.t_final)
            .finish()
    }
}

impl ProblemSpec {
    /// Source-free problem with zero inflow data.
    pub fn homogeneous(beta: Vec2, bc: BoundaryCondition, u0: impl Fn(Vec2) -> f64 + Send + Sync + 'static, t_final: f64) -> Self {
        Self { beta, f: None, g: Arc::new(|_, _| 0.0), u0: Arc::new(u0), bc, t_final }
    }

    pub fn with_source(mut self, f: impl Fn(Vec2, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.f = Some(Arc::new(f));
        self
    }

    pub fn with_inflow(mut self, g: impl Fn(Vec2, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.g = Arc::new(g);
        self
    }

    pub fn validate(&self, space: &Space) -> Result<()> {
        if !(self.beta.x.is_finite() && self.beta.y.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be finite, got {:?}", self.beta)));
        }
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return Err(Error::InvalidParameter(format!("t_final must be >= 0, got {}", self.t_final)));
        }
        if self.bc == BoundaryCondition::Periodic && !space.mesh().periodicity.is_fully_periodic() {
            return Err(Error::InvalidMesh("periodic boundary conditions need a mesh periodic on both axes".into()));
        }
        Ok(())
    }
}

/// `A_ij = (beta . grad phi_j, phi_i)`.
pub fn assemble_advection(space: &Space, beta: Vec2) -> CsrMatrix {
    let n = space.n_local();
    let tab = space.cell_tabulation();
    let rule = space.cell_rule();
    let mut builder = TripletBuilder::new(space.n_dofs(), space.n_dofs());
    let mut block = vec![0.0; n * n];
    for t in 0..space.n_elements() {
        block.iter_mut().for_each(|b| *b = 0.0);
        let geo = space.geometry(t);
        for (q, w) in rule.weights.iter().enumerate() {
            let wq = w * 2.0 * geo.area;
            for j in 0..n {
                let adv = beta.dot(&geo.gradient(tab.dlam[q * n + j])) * wq;
                for i in 0..n {
                    block[i * n + j] += adv * tab.values[q * n + i];
                }
            }
        }
        builder.add_block(space.element_dofs(t), &block);
    }
    builder.build()
}

/// Visits quadrature points on inflow boundary sides: `(element, local
/// values at the point, physical point, |beta . n| * weight)`.
fn for_each_inflow_point(space: &Space, beta: Vec2, mut visit: impl FnMut(usize, &[f64], Vec2, f64)) -> bool {
    let n = space.n_local();
    let rule = space.line_rule();
    let mut any = false;
    for t in 0..space.n_elements() {
        for side in space.sides(t) {
            if side.boundary.is_none() {
                continue;
            }
            let bn = beta.dot(&side.normal);
            if bn >= 0.0 {
                continue;
            }
            any = true;
            let tab = space.edge_tabulation(side.edge, false);
            let geo = space.geometry(t);
            for (q, (&s, &w)) in rule.points.iter().zip(&rule.weights).enumerate() {
                let x = geo.point(edge_barycentric(side.edge, s));
                visit(t, &tab.values[q * n..(q + 1) * n], x, -bn * w * side.length);
            }
        }
    }
    any
}

/// `B_in`: `(|beta . n| u, v)` on the inflow boundary.
pub fn assemble_inflow_matrix(space: &Space, beta: Vec2) -> CsrMatrix {
    let n = space.n_local();
    let mut builder = TripletBuilder::new(space.n_dofs(), space.n_dofs());
    let mut block = vec![0.0; n * n];
    for_each_inflow_point(space, beta, |t, phi, _, w| {
        for i in 0..n {
            for j in 0..n {
                block[i * n + j] = w * phi[i] * phi[j];
            }
        }
        builder.add_block(space.element_dofs(t), &block);
    });
    builder.build()
}

/// `b_in`: `(|beta . n| g(., t), phi_i)` on the inflow boundary.
pub fn assemble_inflow_load(space: &Space, beta: Vec2, g: &dyn Fn(Vec2, f64) -> f64, t: f64) -> Vec<f64> {
    let mut b = vec![0.0; space.n_dofs()];
    let any = for_each_inflow_point(space, beta, |el, phi, x, w| {
        let gv = g(x, t);
        for (&d, p) in space.element_dofs(el).iter().zip(phi) {
            b[d] += w * gv * p;
        }
    });
    if !any && g(space.mesh().domain.center(), t) != 0.0 {
        log::warn!("inflow data given but the inflow boundary is empty");
    }
    b
}

pub fn assemble_inflow_terms(space: &Space, beta: Vec2, g: &dyn Fn(Vec2, f64) -> f64, t: f64) -> (CsrMatrix, Vec<f64>) {
    (assemble_inflow_matrix(space, beta), assemble_inflow_load(space, beta, g, t))
}

/// All time-independent operators of the semi-discrete problem.
pub struct SemiDiscrete<'a> {
    pub space: &'a Space,
    pub spec: ProblemSpec,
    pub params: StabParams,
    pub mass: MassSolver,
    /// `A` plus `B_in` for inflow problems.
    pub transport: CsrMatrix,
    pub stabilization: StabilizationOperator,
}

impl<'a> SemiDiscrete<'a> {
    pub fn new(space: &'a Space, spec: ProblemSpec, params: StabParams) -> Result<Self> {
        spec.validate(space)?;
        params.validate()?;
        let mut builder = TripletBuilder::new(space.n_dofs(), space.n_dofs());
        let adv = assemble_advection(space, spec.beta);
        for r in 0..adv.n_rows() {
            for (c, v) in adv.row(r) {
                builder.add(r, c, v);
            }
        }
        if spec.bc == BoundaryCondition::Inflow {
            let b_in = assemble_inflow_matrix(space, spec.beta);
            for r in 0..b_in.n_rows() {
                for (c, v) in b_in.row(r) {
                    builder.add(r, c, v);
                }
            }
        }
        Ok(Self {
            space,
            mass: MassSolver::new(space),
            transport: builder.build(),
            stabilization: StabilizationOperator::new(space, spec.beta),
            spec,
            params,
        })
    }

    /// `b_f(t) + b_in(t)`.
    pub fn load(&self, t: f64) -> Vec<f64> {
        let mut b = match &self.spec.f {
            Some(f) => self.space.assemble_load(|qp| f(qp.x, t)),
            None => vec![0.0; self.space.n_dofs()],
        };
        if self.spec.bc == BoundaryCondition::Inflow {
            let b_in = assemble_inflow_load(self.space, self.spec.beta, self.spec.g.as_ref(), t);
            b.iter_mut().zip(&b_in).for_each(|(a, c)| *a += c);
        }
        b
    }

    /// Nodal interpolant of `f(., t)`.
    pub fn source_interpolant(&self, t: f64) -> Result<Field> {
        match &self.spec.f {
            Some(f) => self.space.interpolate_nodal(|x| f(x, t)),
            None => Ok(Field::zeros(self.space)),
        }
    }

    /// `r = b(t) - (A + B_in + sigma0 S0 + sigma1 S1) u`.
    pub fn spatial_residual_into(&self, u: &[f64], load: &[f64], switch: &SwitchField, out: &mut [f64]) {
        self.transport.mul_vec_into(u, out);
        self.stabilization.apply(switch, self.params.sigma0, self.params.sigma1, u, out);
        for (o, b) in out.iter_mut().zip(load) {
            *o = b - *o;
        }
    }

    pub fn spatial_residual(&self, u: &Field, t: f64, switch: &SwitchField) -> Vec<f64> {
        let mut r = vec![0.0; self.space.n_dofs()];
        self.spatial_residual_into(&u.coefficients, &self.load(t), switch, &mut r);
        r
    }

    pub fn initial_field(&self) -> Result<Field> {
        let u0 = Arc::clone(&self.spec.u0);
        Ok(self.space.interpolate_nodal(move |x| u0(x))?.at_time(0.0))
    }
}

/// Largest entry of the Galerkin orthogonality defect
/// `a(u - u_h, phi_i) - sigma0 s0(u_h; u_h, phi_i) - sigma1 s1(u_h; u_h, phi_i)`,
/// with `a(u, .)` computed from the exact `L u` and `u` (on the inflow
/// boundary) and `a(u_h, .)` from `u_h` and its time derivative `dt_u_h`.
#[allow(clippy::too_many_arguments)]
pub fn galerkin_residual_check(
    semi: &SemiDiscrete<'_>,
    l_u_exact: &dyn Fn(Vec2, f64) -> f64,
    u_exact: &dyn Fn(Vec2, f64) -> f64,
    u_h: &Field,
    dt_u_h: &Field,
    t: f64,
    switch: &SwitchField,
) -> f64 {
    let space = semi.space;
    let mut defect = space.assemble_load(|qp| l_u_exact(qp.x, t));
    if semi.spec.bc == BoundaryCondition::Inflow {
        let b = assemble_inflow_load(space, semi.spec.beta, u_exact, t);
        defect.iter_mut().zip(&b).for_each(|(d, b)| *d += b);
    }
    let mdt = semi.mass.matrix.mul_vec(&dt_u_h.coefficients);
    let mut r = vec![0.0; space.n_dofs()];
    semi.spatial_residual_into(&u_h.coefficients, &vec![0.0; space.n_dofs()], switch, &mut r);
    defect
        .iter()
        .zip(&mdt)
        .zip(&r)
        .map(|((d, m), r)| (d - m + r).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, Periodicity, Rect};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn space(n: usize, k: usize, per: Periodicity) -> Space {
        Space::new(Arc::new(build_structured_mesh(n, n, Rect::unit_square(), per).unwrap()), k).unwrap()
    }

    #[test]
    fn advection_examples() {
        let s = space(3, 2, Periodicity::NONE);
        let a = assemble_advection(&s, Vec2::new(1.0, 0.0));
        let x = s.interpolate_nodal(|p| p.x).unwrap();
        let one = s.interpolate_nodal(|_| 1.0).unwrap();
        assert_relative_eq!(a.bilinear(&one.coefficients, &x.coefficients), 1.0, epsilon = 1e-13);
        assert!(a.mul_vec(&one.coefficients).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn advection_skew_on_periodic_mesh() {
        let s = space(4, 3, Periodicity::BOTH);
        let a = assemble_advection(&s, Vec2::new(0.7, -1.3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u: Vec<f64> = (0..s.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(a.bilinear(&u, &u).abs() < 1e-12);
        }
    }

    #[test]
    fn inflow_examples() {
        let s = space(4, 2, Periodicity::NONE);
        let one = s.interpolate_nodal(|_| 1.0).unwrap();
        let (b, load) = assemble_inflow_terms(&s, Vec2::new(1.0, 1.0), &|_, _| 1.0, 0.0);
        assert_relative_eq!(b.bilinear(&one.coefficients, &one.coefficients), 2.0, epsilon = 1e-13);
        let bu = b.mul_vec(&one.coefficients);
        for (x, y) in bu.iter().zip(&load) {
            assert!((x - y).abs() < 1e-14);
        }
        // beta = (1, 0): only the left edge is inflow.
        let (_, load) = assemble_inflow_terms(&s, Vec2::new(1.0, 0.0), &|_, _| 1.0, 0.0);
        for (d, x) in s.dof_coords().iter().enumerate() {
            if x.x > 1e-12 {
                assert_eq!(load[d], 0.0);
            }
        }
        assert_relative_eq!(load.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn constants_are_steady_for_periodic_problems() {
        let s = space(4, 2, Periodicity::BOTH);
        let spec = ProblemSpec::homogeneous(Vec2::new(1.0, 0.5), BoundaryCondition::Periodic, |_| 3.0, 1.0);
        let semi = SemiDiscrete::new(&s, spec, StabParams::default()).unwrap();
        let u = semi.initial_field().unwrap();
        let sw = SwitchField::constant(s.n_elements(), 0.4);
        assert!(semi.spatial_residual(&u, 0.0, &sw).iter().all(|v| *v == 0.0 || v.abs() < 1e-15));
    }

    #[test]
    fn periodic_spec_rejects_bounded_mesh() {
        let s = space(2, 1, Periodicity::NONE);
        let spec = ProblemSpec::homogeneous(Vec2::new(1.0, 0.0), BoundaryCondition::Periodic, |_| 0.0, 1.0);
        assert!(SemiDiscrete::new(&s, spec, StabParams::default()).is_err());
    }

    #[test]
    fn time_derivative_consistency_rate() {
        // u = sin(2 pi (x - t)): dt u = -2 pi cos(2 pi x) at t = 0.
        let k = 2;
        let mut errs = vec![];
        for n in [8, 16, 32] {
            let s = space(n, k, Periodicity::BOTH);
            let spec = ProblemSpec::homogeneous(Vec2::new(1.0, 0.0), BoundaryCondition::Periodic, |p| (2.0 * PI * p.x).sin(), 1.0);
            let semi = SemiDiscrete::new(&s, spec, StabParams::default()).unwrap();
            let u = semi.initial_field().unwrap();
            let r = semi.spatial_residual(&u, 0.0, &SwitchField::zeros(s.n_elements()));
            let dt = Field::new(semi.mass.solve(&r).unwrap());
            let exact = |p: Vec2| -2.0 * PI * (2.0 * PI * p.x).cos();
            let e = s.integrate(None, |qp| (s.evaluate(&dt, qp.element, qp.bary).0 - exact(qp.x)).powi(2)).sqrt();
            errs.push(e);
        }
        let rate = (errs[1] / errs[2]).log2();
        assert!(rate >= k as f64 - 0.1, "{errs:?}");
    }

    /// Dense direct solve of `(A + B_in + sigma S) u = b` on a small mesh.
    fn steady_solve(semi: &SemiDiscrete<'_>, switch: &SwitchField) -> Field {
        let n = semi.space.n_dofs();
        let mut m = DMatrix::<f64>::zeros(n, n);
        let zero = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            semi.spatial_residual_into(&e, &zero, switch, &mut col);
            for i in 0..n {
                m[(i, j)] = -col[i];
            }
        }
        let b = DVector::from_vec(semi.load(0.0));
        Field::new(m.lu().solve(&b).unwrap().iter().copied().collect())
    }

    #[test]
    fn galerkin_defect_of_steady_solution() {
        let s = space(4, 2, Periodicity::NONE);
        let beta = Vec2::new(1.0, 0.5);
        // u = sin(x) e^y: L u = cos(x) e^y + 0.5 sin(x) e^y.
        let u = |p: Vec2, _t: f64| p.x.sin() * p.y.exp();
        let lu = |p: Vec2, _t: f64| p.x.cos() * p.y.exp() + 0.5 * p.x.sin() * p.y.exp();
        let spec = ProblemSpec::homogeneous(beta, BoundaryCondition::Inflow, |_| 0.0, 1.0)
            .with_source(lu)
            .with_inflow(u);
        let semi = SemiDiscrete::new(&s, spec, StabParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sw = SwitchField { varpi: (0..s.n_elements()).map(|_| rng.random_range(0.0..1.0)).collect(), r_t: vec![], source_time: None };
        let uh = steady_solve(&semi, &sw);
        let zero = Field::zeros(&s);
        let defect = galerkin_residual_check(&semi, &lu, &u, &uh, &zero, 0.0, &sw);
        assert!(defect <= 1e-10, "{defect}");

        // Negative control: a wrong source in the discrete problem.
        let wrong = ProblemSpec::homogeneous(beta, BoundaryCondition::Inflow, |_| 0.0, 1.0)
            .with_source(move |p, t| lu(p, t) + 1.0)
            .with_inflow(u);
        let semi_wrong = SemiDiscrete::new(&s, wrong, StabParams::default()).unwrap();
        let uh_wrong = steady_solve(&semi_wrong, &sw);
        let defect = galerkin_residual_check(&semi, &lu, &u, &uh_wrong, &zero, 0.0, &sw);
        assert!(defect > 1e-3, "{defect}");
    }
}
