//! Transported weight function, weighted norms, region splits, and the
//! weighted stability diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{peel_boundary_layer, Mesh, Rect, RegionMask, Vec2};
use crate::projections::{l2_project, oswald_average, DGField, ProjectionSource};
use crate::space::{edge_barycentric, Field, MassSolver, QuadPoint, Space};
use crate::stabilization::{s0_apply, s1_apply, SwitchField};

/// Radial weight `phi(x, t) = varphi(|x - beta t - x0|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub x0: [f64; 2],
    pub r0: f64,
    /// Decay parameter `K > 1`; `sigma = K sqrt(h)`.
    #[serde(rename = "k_decay")]
    pub k_decay: f64,
    /// Width of the smooth ramp; defaults to `sigma`.
    #[serde(default)]
    pub blend_width: Option<f64>,
    /// Order of the smoothstep ramp (number of vanishing derivatives at its ends).
    #[serde(default = "default_smoothness")]
    pub smoothness: usize,
    /// Measure distances by minimum image on these periods (x, y).
    #[serde(default)]
    pub periods: Option<[Option<f64>; 2]>,
}

fn default_smoothness() -> usize {
    2
}

/// A weight resolved for a mesh size `h`.
#[derive(Clone, Debug)]
pub struct Weight {
    pub spec: WeightSpec,
    pub beta: Vec2,
    pub sigma: f64,
    pub blend: f64,
    /// Coefficients of the smoothstep polynomial `S(x) = sum c_n x^(m+1+n)`.
    step_coeffs: Vec<f64>,
}

/// `phi`, its gradient, its time derivative, and `L phi = dt phi + beta . grad phi`.
#[derive(Clone, Copy, Debug)]
pub struct WeightEval {
    pub phi: f64,
    pub grad: Vec2,
    pub dt: f64,
    pub l_phi: f64,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_decay > 1.0) {
            return Err(Error::InvalidParameter(format!("k_decay must be > 1, got {}", self.k_decay)));
        }
        if !(self.r0 >= 0.0) {
            return Err(Error::InvalidParameter(format!("r0 must be >= 0, got {}", self.r0)));
        }
        if let Some(b) = self.blend_width {
            if !(b > 0.0) {
                return Err(Error::InvalidParameter(format!("blend_width must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Resolves `sigma = K sqrt(h)` for the given mesh size.
    pub fn resolve(&self, h: f64, beta: Vec2) -> Result<Weight> {
        self.validate()?;
        let sigma = self.k_decay * h.sqrt();
        let m = self.smoothness;
        let step_coeffs = (0..=m)
            .map(|n| binomial(m + n, n) * binomial(2 * m + 1, m - n) * if n % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Ok(Weight { spec: self.clone(), beta, sigma, blend: self.blend_width.unwrap_or(sigma), step_coeffs })
    }
}

impl Weight {
    /// Smoothstep `S(x)` on `[0, 1]`.
    pub fn smoothstep(&self, x: f64) -> f64 {
        let m = self.spec.smoothness as i32;
        let x = x.clamp(0.0, 1.0);
        self.step_coeffs.iter().enumerate().map(|(n, c)| c * x.powi(m + 1 + n as i32)).sum()
    }

    /// `int_0^x S`.
    fn smoothstep_integral(&self, x: f64) -> f64 {
        let m = self.spec.smoothness as i32;
        self.step_coeffs
            .iter()
            .enumerate()
            .map(|(n, c)| {
                let p = m + 2 + n as i32;
                c * x.powi(p) / p as f64
            })
            .sum()
    }

    /// Ramp `psi(s)`: `psi(0) = 0`, `psi' = S(s / b)` and `psi(s) = s - b/2` for `s >= b`.
    pub fn psi(&self, s: f64) -> (f64, f64) {
        let b = self.blend;
        if s <= 0.0 {
            (0.0, 0.0)
        } else if s >= b {
            (s - 0.5 * b, 1.0)
        } else {
            (b * self.smoothstep_integral(s / b), self.smoothstep(s / b))
        }
    }

    /// Radial profile `varphi(r)` and `varphi'(r)`.
    pub fn profile(&self, r: f64) -> (f64, f64) {
        let (psi, dpsi) = self.psi(r - self.spec.r0);
        let v = (-psi / self.sigma).exp();
        (v, -dpsi / self.sigma * v)
    }

    fn offset(&self, x: Vec2, t: f64) -> Vec2 {
        let mut d = x - self.beta * t - Vec2::new(self.spec.x0[0], self.spec.x0[1]);
        if let Some(periods) = self.spec.periods {
            for (axis, p) in periods.iter().enumerate() {
                if let Some(p) = p {
                    d[axis] -= p * (d[axis] / p).round();
                }
            }
        }
        d
    }

    pub fn eval(&self, x: Vec2, t: f64) -> WeightEval {
        let d = self.offset(x, t);
        let r = d.norm();
        let (phi, dphi) = self.profile(r);
        if r == 0.0 || dphi == 0.0 {
            return WeightEval { phi, grad: Vec2::zeros(), dt: 0.0, l_phi: 0.0 };
        }
        let grad = d * (dphi / r);
        // dr/dt = -(d . beta) / r.
        let dt = -dphi * d.dot(&self.beta) / r;
        WeightEval { phi, grad, dt, l_phi: dt + self.beta.dot(&grad) }
    }

    pub fn phi(&self, x: Vec2, t: f64) -> f64 {
        self.profile(self.offset(x, t).norm()).0
    }

    /// Uniform weight `phi = 1`.
    pub fn unit(beta: Vec2) -> Self {
        WeightSpec { x0: [0.0, 0.0], r0: f64::INFINITY, k_decay: 2.0, blend_width: Some(1.0), smoothness: 1, periods: None }
            .resolve(1.0, beta)
            .expect("valid unit weight")
    }

    /// Largest `|grad phi| sigma / phi` over the cell quadrature points.
    pub fn max_gradient_ratio(&self, space: &Space, t: f64) -> f64 {
        space
            .quad_points(None)
            .map(|qp| {
                let e = self.eval(qp.x, t);
                if e.phi > 0.0 {
                    e.grad.norm() * self.sigma / e.phi
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Errors if `phi > h^(k + d/2)` at a quadrature point of `region`.
    pub fn check_decay(&self, space: &Space, region: &RegionMask, t: f64) -> Result<f64> {
        let h = space.mesh().global_h;
        let bound = h.powf(space.degree() as f64 + 1.0);
        let max_phi = space.quad_points(Some(region)).map(|qp| self.phi(qp.x, t)).fold(0.0, f64::max);
        if max_phi > bound {
            return Err(Error::WeightDecay { max_phi, bound, h });
        }
        Ok(max_phi)
    }
}

/// `(int phi^2 v^2)^(1/2)` over `region`.
pub fn weighted_l2(space: &Space, v: impl Fn(&QuadPoint) -> f64, weight: &Weight, t: f64, region: Option<&RegionMask>) -> f64 {
    space
        .integrate(region, |qp| {
            let p = weight.phi(qp.x, t);
            let val = v(qp);
            p * p * val * val
        })
        .sqrt()
}

pub fn weighted_l2_field(space: &Space, v: &Field, weight: &Weight, t: f64, region: Option<&RegionMask>) -> f64 {
    weighted_l2(space, |qp| space.evaluate(v, qp.element, qp.bary).0, weight, t, region)
}

/// Element-side facet points: `(t, own bary, neighbour, neighbour bary, x, weight * length)`.
fn for_each_interior_side_point(space: &Space, mut visit: impl FnMut(usize, [f64; 3], usize, [f64; 3], Vec2, f64, Vec2)) {
    let rule = space.line_rule();
    for t in 0..space.n_elements() {
        let geo = space.geometry(t);
        for side in space.sides(t) {
            let Some((nb, nb_edge)) = side.neighbor else { continue };
            for (&s, &w) in rule.points.iter().zip(&rule.weights) {
                let own = edge_barycentric(side.edge, s);
                let other = edge_barycentric(nb_edge, if side.neighbor_reversed { 1.0 - s } else { s });
                visit(t, own, nb, other, geo.point(own), w * side.length, side.normal);
            }
        }
    }
}

/// `|phi v|_s^2 = sum_T h_T^2 int_{dT \ dOmega} |beta| phi^2 [grad v . n]^2`.
pub fn weighted_seminorm_s_sq(space: &Space, v: &Field, weight: &Weight, t: f64) -> f64 {
    let b = weight.beta.norm();
    let mut total = 0.0;
    for_each_interior_side_point(space, |el, own, nb, other, x, w, n| {
        let h = space.geometry(el).h;
        let jump = (space.evaluate(v, el, own).1 - space.evaluate(v, nb, other).1).dot(&n);
        let p = weight.phi(x, t);
        total += h * h * b * w * p * p * jump * jump;
    });
    total
}

/// Same quantity as `s0(0; v, phi^2 v)`, with the gradient of the product
/// `phi^2 v` evaluated from each side.
pub fn s0_with_weighted_test(space: &Space, v: &Field, weight: &Weight, t: f64) -> f64 {
    let b = weight.beta.norm();
    let mut total = 0.0;
    for_each_interior_side_point(space, |el, own, nb, other, x, w, n| {
        let h = space.geometry(el).h;
        let (v_own, g_own) = space.evaluate(v, el, own);
        let (v_nb, g_nb) = space.evaluate(v, nb, other);
        let e = weight.eval(x, t);
        let grad_phi2 = e.grad * (2.0 * e.phi);
        let p2 = e.phi * e.phi;
        let jump_prod = (g_own * p2 + grad_phi2 * v_own - g_nb * p2 - grad_phi2 * v_nb).dot(&n);
        total += h * h * b * w * (g_own - g_nb).dot(&n) * jump_prod;
    });
    total
}

pub fn weighted_seminorm_s(space: &Space, v: &Field, weight: &Weight, t: f64) -> f64 {
    weighted_seminorm_s_sq(space, v, weight, t).sqrt()
}

/// `|| h^(1/2) (dt v + beta . grad v) ||_phi^2`.
pub fn weighted_material_sq(space: &Space, v: &Field, dt_v: &Field, weight: &Weight, t: f64) -> f64 {
    space.integrate(None, |qp| {
        let h = space.geometry(qp.element).h;
        let (_, g) = space.evaluate(v, qp.element, qp.bary);
        let (d, _) = space.evaluate(dt_v, qp.element, qp.bary);
        let p = weight.phi(qp.x, t);
        let l = d + weight.beta.dot(&g);
        h * p * p * l * l
    })
}

/// `|| h^(1/2) |beta|^(1/2) varpi^(1/2) grad v ||_phi^2`.
pub fn weighted_diffusion_sq(space: &Space, v: &Field, switch: &SwitchField, weight: &Weight, t: f64) -> f64 {
    let b = weight.beta.norm();
    space.integrate(None, |qp| {
        let el = qp.element;
        let c = space.geometry(el).h * b * switch.varpi[el];
        if c == 0.0 {
            return 0.0;
        }
        let g = space.evaluate(v, el, qp.bary).1;
        let p = weight.phi(qp.x, t);
        c * p * p * g.norm_squared()
    })
}

/// `|| h^(-1/2) v ||_phi^2`.
pub fn weighted_inverse_h_sq(space: &Space, v: &Field, weight: &Weight, t: f64) -> f64 {
    space.integrate(None, |qp| {
        let p = weight.phi(qp.x, t);
        let val = space.evaluate(v, qp.element, qp.bary).0;
        p * p * val * val / space.geometry(qp.element).h
    })
}

/// `||v||_{R,phi} = (|phi v|_s^2 + ||h^(1/2) L v||_phi^2)^(1/2)`.
pub fn residual_norm(space: &Space, v: &Field, dt_v: &Field, weight: &Weight, t: f64) -> f64 {
    (weighted_seminorm_s_sq(space, v, weight, t) + weighted_material_sq(space, v, dt_v, weight, t)).sqrt()
}

/// State of a discrete trajectory at one time.
#[derive(Clone, Debug)]
pub struct NormSample {
    pub t: f64,
    pub v: Field,
    pub dt_v: Field,
    pub switch: SwitchField,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub t_start: f64,
    pub t_end: f64,
    pub l2_phi: f64,
    pub s_seminorm_phi: f64,
    pub residual_norm_phi: f64,
    pub triple_norm_whs_phi: f64,
    pub triple_norm_wh_phi: f64,
    pub star_norm_phi: f64,
}

/// Trapezoid rule over `(t, value)` pairs.
pub fn trapezoid(samples: &[(f64, f64)]) -> f64 {
    samples.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

/// `||v||_{w,S,phi}^2` at one sample.
pub fn whs_sq(space: &Space, s: &NormSample, weight: &Weight) -> f64 {
    weighted_seminorm_s_sq(space, &s.v, weight, s.t)
        + weighted_material_sq(space, &s.v, &s.dt_v, weight, s.t)
        + weighted_diffusion_sq(space, &s.v, &s.switch, weight, s.t)
}

/// All trajectory norms; time integrals by the trapezoid rule.
pub fn triple_norms(space: &Space, samples: &[NormSample], weight: &Weight) -> NormReport {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return NormReport::default();
    };
    let l2_end = weighted_l2_field(space, &last.v, weight, last.t, None);
    let l2_start = weighted_l2_field(space, &first.v, weight, first.t, None);
    let s_end = weighted_seminorm_s_sq(space, &last.v, weight, last.t);
    let r_end = s_end + weighted_material_sq(space, &last.v, &last.dt_v, weight, last.t);
    let whs: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, whs_sq(space, s, weight))).collect();
    let inv_h: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, weighted_inverse_h_sq(space, &s.v, weight, s.t))).collect();
    let int_whs = trapezoid(&whs);
    let wh_sq = l2_end * l2_end + int_whs;
    NormReport {
        t_start: first.t,
        t_end: last.t,
        l2_phi: l2_end,
        s_seminorm_phi: s_end.sqrt(),
        residual_norm_phi: r_end.sqrt(),
        triple_norm_whs_phi: int_whs.sqrt(),
        triple_norm_wh_phi: wh_sq.sqrt(),
        star_norm_phi: (l2_start * l2_start + wh_sq + trapezoid(&inv_h)).sqrt(),
    }
}

/// `i_av(h (dt v + beta . grad v))`, the material derivative sampled at the
/// nodes of each element, scaled by `h_T`, and averaged.
pub fn averaged_material_derivative(space: &Space, v: &Field, dt_v: &Field, beta: Vec2) -> Field {
    let n = space.n_local();
    let basis = space.basis();
    let mut lv = DGField::zeros(space);
    let mut local_v = vec![0.0; n];
    let mut local_dt = vec![0.0; n];
    let mut dl = vec![[0.0; 3]; n];
    for el in 0..space.n_elements() {
        let geo = space.geometry(el);
        space.gather(&v.coefficients, el, &mut local_v);
        space.gather(&dt_v.coefficients, el, &mut local_dt);
        let block = lv.block_mut(el);
        for i in 0..n {
            basis.barycentric_derivatives(basis.node_barycentric(i), &mut dl);
            let mut d = [0.0; 3];
            for (g, c) in dl.iter().zip(&local_v) {
                for m in 0..3 {
                    d[m] += g[m] * c;
                }
            }
            block[i] = geo.h * (local_dt[i] + beta.dot(&geo.gradient(d)));
        }
    }
    oswald_average(space, &lv)
}

/// `w = pi_h phi^2 (v + theta h i_av(dt v + beta . grad v))`.
pub fn stability_test_function(
    space: &Space,
    mass: &MassSolver,
    v: &Field,
    dt_v: &Field,
    weight: &Weight,
    t: f64,
    theta: f64,
) -> Result<Field> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidParameter(format!("theta must be >= 0, got {theta}")));
    }
    let n = space.n_local();
    let av = averaged_material_derivative(space, v, dt_v, weight.beta);
    let tab = space.cell_tabulation();
    let integrand = |qp: &QuadPoint| {
        let mut local = [0.0; 10];
        let p = weight.phi(qp.x, t);
        space.gather(&v.coefficients, qp.element, &mut local[..n]);
        let vv = tab.value(qp.index, &local[..n]);
        space.gather(&av.coefficients, qp.element, &mut local[..n]);
        p * p * (vv + theta * tab.value(qp.index, &local[..n]))
    };
    l2_project(space, mass, &ProjectionSource::Function(&integrand))
}

/// Terms of the weighted stability inequality at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityTerms {
    pub t: f64,
    pub l2_phi_sq: f64,
    pub whs_sq: f64,
    /// `(L v, w) + sigma0 s0(y; v, w) + sigma1 s1(y; v, w)`.
    pub bilinear: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn stability_terms(
    space: &Space,
    mass: &MassSolver,
    sample: &NormSample,
    weight: &Weight,
    theta: f64,
    sigma0: f64,
    sigma1: f64,
) -> Result<StabilityTerms> {
    let (v, dt_v, t) = (&sample.v, &sample.dt_v, sample.t);
    let w = stability_test_function(space, mass, v, dt_v, weight, t, theta)?;
    let lw = space.integrate(None, |qp| {
        let (_, g) = space.evaluate(v, qp.element, qp.bary);
        let (d, _) = space.evaluate(dt_v, qp.element, qp.bary);
        let (wv, _) = space.evaluate(&w, qp.element, qp.bary);
        (d + weight.beta.dot(&g)) * wv
    });
    let beta = weight.beta;
    let bilinear = lw + sigma0 * s0_apply(space, &sample.switch, v, &w, beta) + sigma1 * s1_apply(space, &sample.switch, v, &w, beta);
    Ok(StabilityTerms {
        t,
        l2_phi_sq: weighted_l2_field(space, v, weight, t, None).powi(2),
        whs_sq: whs_sq(space, sample, weight),
        bilinear,
    })
}

/// Both sides of the weighted stability inequality over a trajectory,
/// without the `C / K^2` term: returns `(lhs, rhs_without_c, int ||v||_phi^2)`.
pub fn stability_sides(terms: &[StabilityTerms], c_theta: f64) -> (f64, f64, f64) {
    let (Some(first), Some(last)) = (terms.first(), terms.last()) else {
        return (0.0, 0.0, 0.0);
    };
    let int = |f: &dyn Fn(&StabilityTerms) -> f64| trapezoid(&terms.iter().map(|s| (s.t, f(s))).collect::<Vec<_>>());
    let lhs = last.l2_phi_sq + c_theta * int(&|s| s.whs_sq);
    let rhs = first.l2_phi_sq + 2.0 * int(&|s| s.bilinear);
    (lhs, rhs, int(&|s| s.l2_phi_sq))
}

/// Margin `rhs - lhs` with the calibrated constant `c`.
pub fn stability_margin(terms: &[StabilityTerms], c_theta: f64, c: f64, k_decay: f64) -> f64 {
    let (lhs, rhs, int_l2) = stability_sides(terms, c_theta);
    rhs + c / (k_decay * k_decay) * int_l2 - lhs
}

/// Smallest `C` making the margin non-negative for this trajectory.
pub fn required_constant(terms: &[StabilityTerms], c_theta: f64, k_decay: f64) -> f64 {
    let (lhs, rhs, int_l2) = stability_sides(terms, c_theta);
    if int_l2 == 0.0 {
        return 0.0;
    }
    ((lhs - rhs) * k_decay * k_decay / int_l2).max(0.0)
}

/// Smooth and rough element sets around a vertical shock line.
#[derive(Clone, Debug)]
pub struct RegionSplit {
    pub smooth: RegionMask,
    pub rough: RegionMask,
    /// `smooth` with its boundary layer removed.
    pub smooth_minus: RegionMask,
    /// Complement of `smooth_minus`.
    pub rough_plus: RegionMask,
}

/// Rough set = elements meeting the strip `|x - shock_x| <= halo`.
pub fn region_split_shock(mesh: &Mesh, shock_x: f64, halo: f64) -> Result<RegionSplit> {
    if !(halo >= 0.0) {
        return Err(Error::InvalidParameter(format!("halo must be >= 0, got {halo}")));
    }
    let tol = 1e-12 * mesh.domain.width();
    let rough = RegionMask::from_fn(mesh, format!("strip |x - {shock_x}| <= {halo}"), |t| {
        let v = mesh.element_vertices(t);
        let lo = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        hi >= shock_x - halo - tol && lo <= shock_x + halo + tol
    });
    let smooth = rough.complement("smooth complement");
    let smooth_minus = peel_boundary_layer(mesh, &smooth)?;
    let rough_plus = smooth_minus.complement("rough with layer");
    Ok(RegionSplit { smooth, rough, smooth_minus, rough_plus })
}

/// Domain helper: the rectangle's periods for minimum-image weights.
pub fn periods_of(domain: &Rect, periodic_x: bool, periodic_y: bool) -> [Option<f64>; 2] {
    [periodic_x.then(|| domain.width()), periodic_y.then(|| domain.height())]
}
