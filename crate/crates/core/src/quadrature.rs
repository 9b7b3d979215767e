//! Gauss rules on the reference interval `[0, 1]` and the reference triangle
//! with vertices `(0,0), (1,0), (0,1)`.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 31;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub dim: usize,
    /// Reference coordinates, stride `dim`.
    pub points: Vec<f64>,
    /// Weights summing to the reference measure (1 or 1/2).
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }

    /// Barycentric coordinates of point `q`; the first entry belongs to the origin vertex.
    pub fn barycentric(&self, q: usize) -> [f64; 3] {
        let p = self.point(q);
        match self.dim {
            1 => [1.0 - p[0], p[0], 0.0],
            _ => [1.0 - p[0] - p[1], p[0], p[1]],
        }
    }

    /// Weights rescaled to sum to one, i.e. fractions of the element measure.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|q| self.weights[q] * f(self.point(q))).sum()
    }
}

/// `n`-point Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess for the i-th largest root on [-1, 1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// A rule exact for polynomials of total degree `degree` on the reference simplex of dimension `dim`.
pub fn quadrature_rules(dim: usize, degree: usize) -> Result<QuadratureRule> {
    if degree > MAX_DEGREE {
        return Err(Error::Validation(format!(
            "quadrature degree {degree} above supported maximum {MAX_DEGREE}"
        )));
    }
    match dim {
        1 => {
            let n = degree / 2 + 1;
            let (points, weights) = gauss_legendre(n);
            Ok(QuadratureRule { dim, points, weights })
        }
        2 => {
            // collapsed tensor rule; the Duffy Jacobian (1 - u) adds one degree in u
            let nu = degree.div_ceil(2) + 1;
            let nv = degree / 2 + 1;
            let (xu, wu) = gauss_legendre(nu);
            let (xv, wv) = gauss_legendre(nv);
            let mut points = Vec::with_capacity(2 * nu * nv);
            let mut weights = Vec::with_capacity(nu * nv);
            for (u, a) in xu.iter().zip(&wu) {
                for (v, b) in xv.iter().zip(&wv) {
                    points.push(*u);
                    points.push(v * (1.0 - u));
                    weights.push(a * b * (1.0 - u));
                }
            }
            Ok(QuadratureRule { dim, points, weights })
        }
        _ => Err(Error::Validation(format!("unsupported quadrature dimension {dim}"))),
    }
}
