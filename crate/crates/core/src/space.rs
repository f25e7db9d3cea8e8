//! Continuous Lagrange `P_k` space on a structured triangulation.

use std::sync::Arc;

use crate::basis::LagrangeBasis;
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh, RegionMask, Vec2};
use crate::quadrature::{LineRule, QuadratureRule};
use crate::sparse::{pcg, CgSettings, CsrMatrix, TripletBuilder};

#[derive(Clone, Debug)]
pub struct ElementGeometry {
    pub vertices: [Vec2; 3],
    pub area: f64,
    /// Constant gradients of the barycentric coordinates.
    pub grad_lambda: [Vec2; 3],
    pub h: f64,
}

impl ElementGeometry {
    fn new(vertices: [Vec2; 3], h: f64) -> Self {
        let area = 0.5 * (vertices[1] - vertices[0]).perp(&(vertices[2] - vertices[0]));
        let grad = |j: usize, k: usize| {
            let (pj, pk) = (vertices[j], vertices[k]);
            Vec2::new(pj.y - pk.y, pk.x - pj.x) / (2.0 * area)
        };
        Self { vertices, area, grad_lambda: [grad(1, 2), grad(2, 0), grad(0, 1)], h }
    }

    pub fn point(&self, bary: [f64; 3]) -> Vec2 {
        self.vertices[0] * bary[0] + self.vertices[1] * bary[1] + self.vertices[2] * bary[2]
    }

    pub fn gradient(&self, dlam: [f64; 3]) -> Vec2 {
        self.grad_lambda[0] * dlam[0] + self.grad_lambda[1] * dlam[1] + self.grad_lambda[2] * dlam[2]
    }
}

/// Basis values and barycentric derivatives at a fixed list of points,
/// stored point-major: entry `p * n_local + i`.
#[derive(Clone, Debug)]
pub struct Tabulation {
    pub n_points: usize,
    pub n_local: usize,
    pub values: Vec<f64>,
    pub dlam: Vec<[f64; 3]>,
}

impl Tabulation {
    fn new(basis: &LagrangeBasis, points: &[[f64; 3]]) -> Self {
        let n = basis.n_local();
        let mut values = vec![0.0; points.len() * n];
        let mut dlam = vec![[0.0; 3]; points.len() * n];
        for (p, lam) in points.iter().enumerate() {
            basis.values(*lam, &mut values[p * n..(p + 1) * n]);
            basis.barycentric_derivatives(*lam, &mut dlam[p * n..(p + 1) * n]);
        }
        Self { n_points: points.len(), n_local: n, values, dlam }
    }

    pub fn value(&self, p: usize, local: &[f64]) -> f64 {
        let row = &self.values[p * self.n_local..(p + 1) * self.n_local];
        row.iter().zip(local).map(|(a, b)| a * b).sum()
    }

    pub fn dlam(&self, p: usize, local: &[f64]) -> [f64; 3] {
        let row = &self.dlam[p * self.n_local..(p + 1) * self.n_local];
        let mut d = [0.0; 3];
        for (g, c) in row.iter().zip(local) {
            d[0] += g[0] * c;
            d[1] += g[1] * c;
            d[2] += g[2] * c;
        }
        d
    }
}

/// Local edge `edge` of `element`, seen from that element.
#[derive(Clone, Debug)]
pub struct ElementSide {
    pub element: usize,
    pub edge: usize,
    pub facet: usize,
    /// Neighbouring element and its local edge across this side.
    pub neighbor: Option<(usize, usize)>,
    /// Whether the neighbour traverses the edge in the opposite direction.
    pub neighbor_reversed: bool,
    pub boundary: Option<BoundaryTag>,
    /// Unit outward normal of `element`.
    pub normal: Vec2,
    pub length: f64,
}

pub fn edge_barycentric(edge: usize, s: f64) -> [f64; 3] {
    let mut lam = [0.0; 3];
    lam[edge] = 1.0 - s;
    lam[(edge + 1) % 3] = s;
    lam
}

/// A cell quadrature point with its physical weight.
#[derive(Clone, Copy, Debug)]
pub struct QuadPoint {
    pub element: usize,
    pub index: usize,
    pub bary: [f64; 3],
    pub x: Vec2,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Space {
    mesh: Arc<Mesh>,
    basis: LagrangeBasis,
    dof_map: Vec<usize>,
    dof_coords: Vec<Vec2>,
    multiplicity: Vec<usize>,
    geometry: Vec<ElementGeometry>,
    sides: Vec<[ElementSide; 3]>,
    cell_rule: QuadratureRule,
    cell_tab: Tabulation,
    line_rule: LineRule,
    /// `edge_tab[e][r]`: tabulation on edge `e` at `s_q` (`r = 0`) or `1 - s_q` (`r = 1`).
    edge_tab: [[Tabulation; 2]; 3],
}

/// Coefficient vector of a member of the space.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub coefficients: Vec<f64>,
    pub time: Option<f64>,
}

impl Field {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients, time: None }
    }

    pub fn zeros(space: &Space) -> Self {
        Self::new(vec![0.0; space.n_dofs()])
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.time = Some(t);
        self
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn linf(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Space {
    /// Builds the continuous `P_k` space, merging periodic copies.
    pub fn new(mesh: Arc<Mesh>, degree: usize) -> Result<Self> {
        let basis = LagrangeBasis::new(degree)?;
        let k = degree;
        let n_local = basis.n_local();
        let n_elem = mesh.n_elements();

        let mut vertex_dof = vec![usize::MAX; mesh.vertices.len()];
        let mut dof_coords = Vec::new();
        for (v, &m) in mesh.periodic_map.iter().enumerate() {
            if v == m {
                vertex_dof[v] = dof_coords.len();
                dof_coords.push(mesh.vertices[v]);
            }
        }
        let geometry: Vec<ElementGeometry> = (0..n_elem)
            .map(|t| ElementGeometry::new(mesh.element_vertices(t), mesh.element_diameter[t]))
            .collect();

        let facet_dof_start = dof_coords.len();
        for facet in &mesh.facets {
            let g = &geometry[facet.left.element];
            let e = facet.left.edge;
            for j in 1..k {
                dof_coords.push(g.point(edge_barycentric(e, j as f64 / k as f64)));
            }
        }
        let interior_per_element = basis.cell_interior_nodes().len();
        let interior_start = dof_coords.len();
        for (t, g) in geometry.iter().enumerate() {
            for i in basis.cell_interior_nodes() {
                debug_assert_eq!(dof_coords.len(), interior_start + t * interior_per_element + i - basis.cell_interior_nodes().start);
                dof_coords.push(g.point(basis.node_barycentric(i)));
            }
        }
        let n_dofs = dof_coords.len();

        let mut dof_map = vec![usize::MAX; n_elem * n_local];
        for t in 0..n_elem {
            let local = &mut dof_map[t * n_local..(t + 1) * n_local];
            for v in 0..3 {
                local[v] = vertex_dof[mesh.periodic_map[mesh.triangles[t][v]]];
            }
            for e in 0..3 {
                let f = mesh.element_facets[t][e];
                let facet = &mesh.facets[f];
                let is_left = facet.left.element == t && facet.left.edge == e;
                let flip = !is_left && facet.reversed;
                for (j, i) in basis.edge_interior_nodes(e).enumerate() {
                    let jj = if flip { k - 2 - j } else { j };
                    local[i] = facet_dof_start + f * (k - 1) + jj;
                }
            }
            for (j, i) in basis.cell_interior_nodes().enumerate() {
                local[i] = interior_start + t * interior_per_element + j;
            }
        }
        let mut multiplicity = vec![0usize; n_dofs];
        for &d in &dof_map {
            multiplicity[d] += 1;
        }

        let sides = (0..n_elem)
            .map(|t| {
                [0, 1, 2].map(|e| {
                    let f = mesh.element_facets[t][e];
                    let facet = &mesh.facets[f];
                    let p = &geometry[t].vertices;
                    let d = p[(e + 1) % 3] - p[e];
                    let length = d.norm();
                    let neighbor = facet.neighbor_of(t).map(|ee| (ee.element, ee.edge));
                    ElementSide {
                        element: t,
                        edge: e,
                        facet: f,
                        neighbor,
                        neighbor_reversed: facet.reversed,
                        boundary: facet.boundary,
                        normal: Vec2::new(d.y, -d.x) / length,
                        length,
                    }
                })
            })
            .collect();

        let cell_rule = QuadratureRule::triangle(2 * k + 2);
        let cell_tab = Tabulation::new(&basis, &cell_rule.points);
        let line_rule = LineRule::with_degree(2 * k + 1);
        let edge_tab = [0, 1, 2].map(|e| {
            [false, true].map(|rev| {
                let pts: Vec<[f64; 3]> = line_rule
                    .points
                    .iter()
                    .map(|&s| edge_barycentric(e, if rev { 1.0 - s } else { s }))
                    .collect();
                Tabulation::new(&basis, &pts)
            })
        });

        Ok(Self {
            mesh,
            basis,
            dof_map,
            dof_coords,
            multiplicity,
            geometry,
            sides,
            cell_rule,
            cell_tab,
            line_rule,
            edge_tab,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        Arc::clone(&self.mesh)
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn basis(&self) -> &LagrangeBasis {
        &self.basis
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_coords.len()
    }

    pub fn n_local(&self) -> usize {
        self.basis.n_local()
    }

    pub fn n_elements(&self) -> usize {
        self.geometry.len()
    }

    pub fn dof_coords(&self) -> &[Vec2] {
        &self.dof_coords
    }

    /// Number of elements sharing each global DOF.
    pub fn multiplicity(&self) -> &[usize] {
        &self.multiplicity
    }

    pub fn element_dofs(&self, t: usize) -> &[usize] {
        let n = self.n_local();
        &self.dof_map[t * n..(t + 1) * n]
    }

    pub fn geometry(&self, t: usize) -> &ElementGeometry {
        &self.geometry[t]
    }

    pub fn sides(&self, t: usize) -> &[ElementSide; 3] {
        &self.sides[t]
    }

    pub fn cell_rule(&self) -> &QuadratureRule {
        &self.cell_rule
    }

    pub fn cell_tabulation(&self) -> &Tabulation {
        &self.cell_tab
    }

    pub fn line_rule(&self) -> &LineRule {
        &self.line_rule
    }

    /// Tabulation on local edge `edge`, optionally at reversed parameters.
    pub fn edge_tabulation(&self, edge: usize, reversed: bool) -> &Tabulation {
        &self.edge_tab[edge][reversed as usize]
    }

    pub fn check_field(&self, field: &Field) -> Result<()> {
        if field.len() != self.n_dofs() {
            return Err(Error::LengthMismatch { expected: self.n_dofs(), got: field.len() });
        }
        Ok(())
    }

    pub fn gather(&self, coefficients: &[f64], t: usize, out: &mut [f64]) {
        for (o, &d) in out.iter_mut().zip(self.element_dofs(t)) {
            *o = coefficients[d];
        }
    }

    pub fn local(&self, coefficients: &[f64], t: usize) -> Vec<f64> {
        self.element_dofs(t).iter().map(|&d| coefficients[d]).collect()
    }

    /// Nodal interpolation of `g`.
    pub fn interpolate_nodal(&self, g: impl Fn(Vec2) -> f64) -> Result<Field> {
        let coefficients: Vec<f64> = self.dof_coords.iter().map(|&x| g(x)).collect();
        if let Some((dof, &value)) = coefficients.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { dof, value });
        }
        Ok(Field::new(coefficients))
    }

    /// Value and physical gradient of `field` at a barycentric point of `t`.
    pub fn evaluate(&self, field: &Field, t: usize, bary: [f64; 3]) -> (f64, Vec2) {
        self.evaluate_coefficients(&field.coefficients, t, bary)
    }

    pub fn evaluate_coefficients(&self, coefficients: &[f64], t: usize, bary: [f64; 3]) -> (f64, Vec2) {
        let n = self.n_local();
        let mut vals = vec![0.0; n];
        let mut dl = vec![[0.0; 3]; n];
        self.basis.values(bary, &mut vals);
        self.basis.barycentric_derivatives(bary, &mut dl);
        let mut value = 0.0;
        let mut d = [0.0; 3];
        for (i, &dof) in self.element_dofs(t).iter().enumerate() {
            let c = coefficients[dof];
            value += c * vals[i];
            for m in 0..3 {
                d[m] += c * dl[i][m];
            }
        }
        (value, self.geometry[t].gradient(d))
    }

    /// Iterates over cell quadrature points of the selected elements.
    pub fn quad_points(&self, region: Option<&RegionMask>) -> impl Iterator<Item = QuadPoint> + '_ {
        let region = region.map(|r| r.elements.clone());
        (0..self.n_elements())
            .filter(move |&t| region.as_ref().is_none_or(|r| r[t]))
            .flat_map(move |t| {
                let g = &self.geometry[t];
                self.cell_rule.points.iter().zip(&self.cell_rule.weights).enumerate().map(
                    move |(q, (bary, w))| QuadPoint {
                        element: t,
                        index: q,
                        bary: *bary,
                        x: g.point(*bary),
                        weight: w * 2.0 * g.area,
                    },
                )
            })
    }

    /// Quadrature sum of `integrand` over the selected elements.
    pub fn integrate(&self, region: Option<&RegionMask>, integrand: impl Fn(&QuadPoint) -> f64) -> f64 {
        if let Some(r) = region {
            assert_eq!(r.len(), self.n_elements(), "region length mismatch");
        }
        self.quad_points(region).map(|qp| qp.weight * integrand(&qp)).sum()
    }

    /// Values and gradients of a coefficient vector at the cell quadrature
    /// points of element `t`.
    pub fn cell_values(&self, coefficients: &[f64], t: usize, vals: &mut [f64], grads: &mut [Vec2]) {
        let mut local = [0.0; 10];
        let n = self.n_local();
        self.gather(coefficients, t, &mut local[..n]);
        let g = &self.geometry[t];
        for q in 0..self.cell_tab.n_points {
            vals[q] = self.cell_tab.value(q, &local[..n]);
            grads[q] = g.gradient(self.cell_tab.dlam(q, &local[..n]));
        }
    }

    /// Physical-gradient tabulation of all local basis functions at the cell
    /// quadrature points of `t` (point-major).
    pub fn cell_basis_gradients(&self, t: usize) -> Vec<Vec2> {
        let g = &self.geometry[t];
        self.cell_tab.dlam.iter().map(|d| g.gradient(*d)).collect()
    }

    pub fn assemble_mass(&self) -> CsrMatrix {
        let n = self.n_local();
        let mut builder = TripletBuilder::new(self.n_dofs(), self.n_dofs());
        let mut block = vec![0.0; n * n];
        for t in 0..self.n_elements() {
            block.iter_mut().for_each(|b| *b = 0.0);
            let scale = 2.0 * self.geometry[t].area;
            for (q, w) in self.cell_rule.weights.iter().enumerate() {
                let phi = &self.cell_tab.values[q * n..(q + 1) * n];
                for i in 0..n {
                    for j in 0..n {
                        block[i * n + j] += w * scale * phi[i] * phi[j];
                    }
                }
            }
            builder.add_block(self.element_dofs(t), &block);
        }
        builder.build()
    }

    /// Load vector `(g, phi_i)` with `g` sampled at cell quadrature points.
    pub fn assemble_load(&self, g: impl Fn(&QuadPoint) -> f64) -> Vec<f64> {
        let n = self.n_local();
        let mut b = vec![0.0; self.n_dofs()];
        for qp in self.quad_points(None) {
            let gw = g(&qp) * qp.weight;
            let phi = &self.cell_tab.values[qp.index * n..(qp.index + 1) * n];
            for (i, &d) in self.element_dofs(qp.element).iter().enumerate() {
                b[d] += gw * phi[i];
            }
        }
        b
    }

    /// Extremes of `field` sampled at local nodes and cell quadrature points.
    pub fn sampled_extrema(&self, field: &Field) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &c in &field.coefficients {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        let nq = self.cell_tab.n_points;
        let mut vals = vec![0.0; nq];
        let mut grads = vec![Vec2::zeros(); nq];
        for t in 0..self.n_elements() {
            self.cell_values(&field.coefficients, t, &mut vals, &mut grads);
            for &v in &vals {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

/// Mass matrix with its CG solver settings.
#[derive(Clone, Debug)]
pub struct MassSolver {
    pub matrix: CsrMatrix,
    pub settings: CgSettings,
}

impl MassSolver {
    pub fn new(space: &Space) -> Self {
        Self { matrix: space.assemble_mass(), settings: CgSettings::default() }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; rhs.len()];
        self.solve_into(rhs, &mut x)?;
        Ok(x)
    }

    /// Solves with `x` as initial guess.
    pub fn solve_into(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        pcg(&self.matrix, rhs, x, self.settings).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, Periodicity, Rect};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize, per: Periodicity) -> Arc<Mesh> {
        Arc::new(build_structured_mesh(n, n, Rect::unit_square(), per).unwrap())
    }

    #[test]
    fn dof_counts() {
        let m = unit(1, Periodicity::NONE);
        assert_eq!(Space::new(m.clone(), 1).unwrap().n_dofs(), 4);
        assert_eq!(Space::new(m.clone(), 2).unwrap().n_dofs(), 9);
        assert_eq!(Space::new(m.clone(), 3).unwrap().n_dofs(), 16);
        assert!(Space::new(m, 4).is_err());
        let p = unit(2, Periodicity::BOTH);
        assert_eq!(Space::new(p.clone(), 1).unwrap().n_dofs(), 4);
        // vertices 4 + facets 12
        assert_eq!(Space::new(p, 2).unwrap().n_dofs(), 16);
    }

    #[test]
    fn shared_dofs_sit_at_matching_points() {
        for per in [Periodicity::NONE, Periodicity::BOTH] {
            let m = Arc::new(build_structured_mesh(3, 2, Rect::new(0.0, 1.5, 0.0, 1.0), per).unwrap());
            for k in 1..=3 {
                let s = Space::new(m.clone(), k).unwrap();
                let wrap = |p: Vec2| {
                    let mut p = p;
                    if per.x && (p.x - 1.5).abs() < 1e-12 {
                        p.x = 0.0;
                    }
                    if per.y && (p.y - 1.0).abs() < 1e-12 {
                        p.y = 0.0;
                    }
                    p
                };
                for t in 0..s.n_elements() {
                    for (i, &d) in s.element_dofs(t).iter().enumerate() {
                        let local = s.geometry(t).point(s.basis().node_barycentric(i));
                        assert!((wrap(local) - wrap(s.dof_coords()[d])).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_reproduction() {
        let m = Arc::new(build_structured_mesh(3, 4, Rect::new(-1.0, 1.0, 0.0, 2.0), Periodicity::NONE).unwrap());
        for k in 1..=3 {
            let s = Space::new(m.clone(), k).unwrap();
            let one = s.interpolate_nodal(|_| 1.0).unwrap();
            let poly = |p: Vec2| {
                let (x, y) = (p.x, p.y);
                match k {
                    1 => 2.0 * x - y + 0.5,
                    2 => x * x - 3.0 * x * y + y,
                    _ => x * x * x - 2.0 * x * y * y + x * y + 1.0,
                }
            };
            let f = s.interpolate_nodal(poly).unwrap();
            for qp in s.quad_points(None) {
                let (v1, g1) = s.evaluate(&one, qp.element, qp.bary);
                assert!((v1 - 1.0).abs() < 1e-13);
                assert!(g1.norm() < 1e-12);
                let (v, _) = s.evaluate(&f, qp.element, qp.bary);
                assert!((v - poly(qp.x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_linear_and_constant() {
        let m = unit(1, Periodicity::NONE);
        let s = Space::new(m, 1).unwrap();
        let c = s.interpolate_nodal(|_| 2.5).unwrap();
        let (v, g) = s.evaluate(&c, 0, [0.2, 0.3, 0.5]);
        assert_relative_eq!(v, 2.5, epsilon = 1e-14);
        assert!(g.norm() < 1e-14);
        let f = s.interpolate_nodal(|p| p.x - p.y).unwrap();
        let (_, g) = s.evaluate(&f, 0, [1.0 / 3.0; 3]);
        assert_relative_eq!(g.x, 1.0, epsilon = 1e-14);
        assert_relative_eq!(g.y, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_divided_differences() {
        let m = unit(3, Periodicity::NONE);
        let s = Space::new(m, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Field::new((0..s.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let step = 1e-6;
        for t in [0, 5, 11] {
            let g = s.geometry(t);
            let bary = [0.3, 0.3, 0.4];
            let (_, grad) = s.evaluate(&f, t, bary);
            // Barycentric coordinates of a shifted physical point (affine map).
            let shifted = |dx: Vec2| {
                let lam = [0, 1, 2].map(|a| bary[a] + g.grad_lambda[a].dot(&dx));
                s.evaluate(&f, t, lam).0
            };
            let fd = Vec2::new(
                (shifted(Vec2::new(step, 0.0)) - shifted(Vec2::new(-step, 0.0))) / (2.0 * step),
                (shifted(Vec2::new(0.0, step)) - shifted(Vec2::new(0.0, -step))) / (2.0 * step),
            );
            assert!((grad - fd).norm() <= 1e-6 * grad.norm().max(1.0));
        }
    }

    #[test]
    fn integrate_examples() {
        let m = unit(1, Periodicity::NONE);
        let s = Space::new(m.clone(), 1).unwrap();
        // Vertex order (0,0), (1,0), (0,1), (1,1): hat at (1,0).
        let f = Field::new(vec![0.0, 1.0, 0.0, 0.0]);
        let val = s.integrate(None, |qp| s.evaluate(&f, qp.element, qp.bary).0);
        assert_relative_eq!(val, 1.0 / 6.0, epsilon = 1e-14);
        assert_relative_eq!(s.integrate(None, |_| 1.0), 1.0, epsilon = 1e-14);
        let lower = RegionMask::from_fn(&m, "lower", |t| t == 0);
        assert_relative_eq!(s.integrate(Some(&lower), |_| 1.0), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn p1_mass_matches_formula() {
        let m = unit(1, Periodicity::NONE);
        let s = Space::new(m.clone(), 1).unwrap();
        let mass = s.assemble_mass();
        // Oracle: (|T|/12)(1 + delta_ij) summed over elements.
        let mut exact = vec![vec![0.0; 4]; 4];
        for tri in &m.triangles {
            for &a in tri {
                for &b in tri {
                    exact[a][b] += 0.5 / 12.0 * if a == b { 2.0 } else { 1.0 };
                }
            }
        }
        let dense = mass.to_dense();
        for a in 0..4 {
            for b in 0..4 {
                assert_relative_eq!(dense[a][b], exact[a][b], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn mass_row_sums_and_solve() {
        let m = unit(4, Periodicity::BOTH);
        for k in 1..=3 {
            let s = Space::new(m.clone(), k).unwrap();
            let mass = MassSolver::new(&s);
            let ones = vec![1.0; s.n_dofs()];
            let rows = mass.matrix.mul_vec(&ones);
            let basis_integrals = s.assemble_load(|_| 1.0);
            for (r, b) in rows.iter().zip(&basis_integrals) {
                assert_relative_eq!(*r, *b, epsilon = 1e-14);
            }
            assert_relative_eq!(rows.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
            let x = mass.solve(&rows).unwrap();
            assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-12));
            assert!(mass.matrix.asymmetry() < 1e-16);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            for _ in 0..10 {
                let v: Vec<f64> = (0..s.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(mass.matrix.bilinear(&v, &v) > 0.0);
            }
        }
    }

    #[test]
    fn interpolation_rate_p2() {
        let mut errs = Vec::new();
        let mut hs = Vec::new();
        for n in [4, 8, 16, 32] {
            let s = Space::new(unit(n, Periodicity::NONE), 2).unwrap();
            let g = |p: Vec2| (2.0 * std::f64::consts::PI * p.x).sin();
            let f = s.interpolate_nodal(g).unwrap();
            let e2 = s.integrate(None, |qp| (s.evaluate(&f, qp.element, qp.bary).0 - g(qp.x)).powi(2));
            errs.push(e2.sqrt());
            hs.push(s.mesh().global_h);
        }
        let rate = (errs[2] / errs[3]).ln() / (hs[2] / hs[3]).ln();
        assert!((rate - 3.0).abs() < 0.1, "rate {rate}");
    }

    #[test]
    fn interpolation_rejects_non_finite() {
        let s = Space::new(unit(2, Periodicity::NONE), 1).unwrap();
        assert!(matches!(
            s.interpolate_nodal(|p| if p.x > 0.9 { f64::NAN } else { 0.0 }),
            Err(Error::NonFinite { .. })
        ));
    }
}
