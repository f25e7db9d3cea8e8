//! Gauss-Legendre rules on `[0, 1]` and collapsed (Duffy) product rules on
//! the reference triangle.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "a Gauss rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Rule on the unit interval; weights sum to 1.
#[derive(Clone, Debug)]
pub struct LineRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl LineRule {
    /// Smallest Gauss rule integrating polynomials of `degree` exactly.
    pub fn with_degree(degree: usize) -> Self {
        let n = degree / 2 + 1;
        let (x, w) = gauss_legendre(n);
        Self {
            points: x.iter().map(|&x| 0.5 * (x + 1.0)).collect(),
            weights: w.iter().map(|&w| 0.5 * w).collect(),
            degree: 2 * n - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rule on the reference triangle `{x, y >= 0, x + y <= 1}`.
///
/// Points are barycentric `[1 - x - y, x, y]`; weights sum to the reference
/// area 1/2.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub const REFERENCE_AREA: f64 = 0.5;

    /// Conical product rule exact for polynomials up to `degree`.
    pub fn triangle(degree: usize) -> Self {
        // x = a, y = b (1 - a); the Jacobian (1 - a) adds one degree in a.
        let n = (degree + 2).div_ceil(2);
        let (g, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for (ga, wa) in g.iter().zip(&w) {
            let a = 0.5 * (ga + 1.0);
            for (gb, wb) in g.iter().zip(&w) {
                let b = 0.5 * (gb + 1.0);
                let x = a;
                let y = b * (1.0 - a);
                points.push([1.0 - x - y, x, y]);
                weights.push(0.25 * wa * wb * (1.0 - a));
            }
        }
        Self { points, weights, degree: 2 * n - 2 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn gauss_legendre_known_values() {
        let (x, w) = gauss_legendre(2);
        assert_relative_eq!(x[1], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-15);
        let (x, w) = gauss_legendre(3);
        assert_relative_eq!(x[2], (0.6f64).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(w[1], 8.0 / 9.0, epsilon = 1e-15);
        assert!(x[1].abs() < 1e-15);
    }

    #[test]
    fn line_rule_exact_to_degree() {
        for deg in 0..12 {
            let rule = LineRule::with_degree(deg);
            assert!(rule.degree >= deg);
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            for p in 0..=rule.degree {
                let q: f64 = rule.points.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p as i32)).sum();
                assert_relative_eq!(q, 1.0 / (p as f64 + 1.0), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn triangle_rule_exact_on_monomials() {
        for deg in [2, 4, 6, 8] {
            let rule = QuadratureRule::triangle(deg);
            assert!(rule.degree >= deg);
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 0.5, epsilon = 1e-14);
            for a in 0..=deg as u32 {
                for b in 0..=(deg as u32 - a) {
                    let q: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[1].powi(a as i32) * p[2].powi(b as i32))
                        .sum();
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert_relative_eq!(q, exact, epsilon = 1e-14);
                }
            }
        }
    }
}
