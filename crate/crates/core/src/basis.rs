//! Nodal Lagrange basis of degree `k` on a triangle, written in barycentric
//! coordinates on equispaced lattice nodes.
//!
//! Local node order: the three vertices, then the `k - 1` interior nodes of
//! each edge `e` (ordered from local vertex `e` towards `e + 1`), then the
//! interior nodes.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LagrangeBasis {
    degree: usize,
    /// Lattice multi-index `(a0, a1, a2)` with `a0 + a1 + a2 = k`.
    nodes: Vec<[usize; 3]>,
}

impl LagrangeBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if !(1..=3).contains(&degree) {
            return Err(Error::UnsupportedDegree(degree));
        }
        let k = degree;
        let mut nodes = Vec::with_capacity((k + 1) * (k + 2) / 2);
        for v in 0..3 {
            let mut a = [0; 3];
            a[v] = k;
            nodes.push(a);
        }
        for e in 0..3 {
            for j in 1..k {
                let mut a = [0; 3];
                a[e] = k - j;
                a[(e + 1) % 3] = j;
                nodes.push(a);
            }
        }
        for a1 in 1..k {
            for a2 in 1..k {
                if a1 + a2 < k {
                    nodes.push([k - a1 - a2, a1, a2]);
                }
            }
        }
        debug_assert_eq!(nodes.len(), (k + 1) * (k + 2) / 2);
        Ok(Self { degree, nodes })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_local(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_barycentric(&self, i: usize) -> [f64; 3] {
        let k = self.degree as f64;
        self.nodes[i].map(|a| a as f64 / k)
    }

    /// Local indices of the interior nodes of edge `e`, ordered from vertex `e`.
    pub fn edge_interior_nodes(&self, e: usize) -> std::ops::Range<usize> {
        let start = 3 + e * (self.degree - 1);
        start..start + self.degree - 1
    }

    pub fn cell_interior_nodes(&self) -> std::ops::Range<usize> {
        3 + 3 * (self.degree - 1)..self.n_local()
    }

    /// Basis values at barycentric point `lambda`.
    pub fn values(&self, lambda: [f64; 3], out: &mut [f64]) {
        let k = self.degree;
        let p = lambda.map(|l| univariate_table(k, l));
        for (o, a) in out.iter_mut().zip(&self.nodes) {
            *o = p[0].0[a[0]] * p[1].0[a[1]] * p[2].0[a[2]];
        }
    }

    /// Partial derivatives with respect to the three barycentric coordinates
    /// (treated as independent variables).
    pub fn barycentric_derivatives(&self, lambda: [f64; 3], out: &mut [[f64; 3]]) {
        let k = self.degree;
        let p = lambda.map(|l| univariate_table(k, l));
        for (o, a) in out.iter_mut().zip(&self.nodes) {
            let (v0, v1, v2) = (p[0].0[a[0]], p[1].0[a[1]], p[2].0[a[2]]);
            let (d0, d1, d2) = (p[0].1[a[0]], p[1].1[a[1]], p[2].1[a[2]]);
            *o = [d0 * v1 * v2, v0 * d1 * v2, v0 * v1 * d2];
        }
    }
}

/// `P_a(l) = prod_{i<a} (k l - i) / (i + 1)` and its derivative, `a = 0..=k`.
fn univariate_table(k: usize, l: f64) -> ([f64; 4], [f64; 4]) {
    let kl = k as f64 * l;
    let mut val = [0.0; 4];
    let mut der = [0.0; 4];
    val[0] = 1.0;
    for a in 1..=k {
        let i = (a - 1) as f64;
        let factor = (kl - i) / (i + 1.0);
        val[a] = val[a - 1] * factor;
        der[a] = der[a - 1] * factor + val[a - 1] * k as f64 / (i + 1.0);
    }
    (val, der)
}
