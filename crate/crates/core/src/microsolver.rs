//! Spherical particle diffusion: r²-weighted P1 matrices, Thomas solves and
//! the scalar surface response used to eliminate interior radial unknowns.

use crate::error::{Error, Result};
use crate::mesh::RadialGrid;
use crate::quadrature::gauss_legendre;

/// Symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    /// `off[i]` couples rows `i` and `i + 1`.
    pub off: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            off: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = self.diag[i] * x[i];
            if i > 0 {
                y[i] += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                y[i] += self.off[i] * x[i + 1];
            }
        }
        y
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Tridiagonal) -> Tridiagonal {
        Tridiagonal {
            diag: self.diag.iter().zip(&other.diag).map(|(a, b)| a + alpha * b).collect(),
            off: self.off.iter().zip(&other.off).map(|(a, b)| a + alpha * b).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = self.diag[i];
            if i + 1 < n {
                a[i][i + 1] = self.off[i];
                a[i + 1][i] = self.off[i];
            }
        }
        a
    }

    /// Thomas algorithm without pivoting, with pivots built from the row sums of the matrix.
    ///
    /// Writing each pivot as `p_i = e_i - off_i` gives `e_i = s_i - off_{i-1} e_{i-1} / p_{i-1}`,
    /// which has no cancellation when the off-diagonal is non-positive; rows with a positive
    /// coupling use the usual update. For `M + tau K` with `K 1 = 0` the row sums stay of
    /// the size of `M` while the entries grow with `tau`, so stiff systems keep full accuracy.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let row_sums = self.row_sums();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let off = |i: usize| if i + 1 < n { self.off[i] } else { 0.0 };
        let (mut excess, mut denom) = (row_sums[0], self.diag[0]);
        for i in 0..n {
            if i > 0 {
                let o = self.off[i - 1];
                if o <= 0.0 {
                    excess = row_sums[i] - o * excess / denom;
                    denom = excess - off(i);
                } else {
                    denom = self.diag[i] - o * o / denom;
                    excess = denom + off(i);
                }
            }
            if !(denom.abs() > 0.0) || !denom.is_finite() {
                return Err(Error::Linear(format!("zero pivot in tridiagonal solve at row {i}")));
            }
            if i + 1 < n {
                c[i] = self.off[i] / denom;
            }
            d[i] = (rhs[i] - if i > 0 { self.off[i - 1] * d[i - 1] } else { 0.0 }) / denom;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }

    /// Row sums with compensated summation, accurate even when the entries nearly cancel.
    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let terms = [
                    self.diag[i],
                    if i > 0 { self.off[i - 1] } else { 0.0 },
                    if i + 1 < n { self.off[i] } else { 0.0 },
                ];
                let (mut sum, mut carry) = (0.0f64, 0.0f64);
                for t in terms {
                    let next = sum + t;
                    carry += if sum.abs() >= t.abs() {
                        (sum - next) + t
                    } else {
                        (t - next) + sum
                    };
                    sum = next;
                }
                sum + carry
            })
            .collect()
    }
}

/// `M_ij = ∫ ψ_i ψ_j r² dr` and `K_ij = k2 ∫ ψ_i' ψ_j' r² dr`, integrated exactly.
pub fn radial_matrices(grid: &RadialGrid, k2: f64) -> (Tridiagonal, Tridiagonal) {
    let n = grid.n_nodes();
    let mut m = Tridiagonal::zeros(n);
    let mut k = Tridiagonal::zeros(n);
    let (xg, wg) = gauss_legendre(3);
    for i in 0..grid.n_intervals() {
        let (a, b) = (grid.nodes[i], grid.nodes[i + 1]);
        let h = b - a;
        let (mut ll, mut lr, mut rr) = (0.0, 0.0, 0.0);
        for (x, w) in xg.iter().zip(&wg) {
            let r = a + h * x;
            let (pl, pr) = (1.0 - x, *x);
            let wr = w * h * r * r;
            ll += wr * pl * pl;
            lr += wr * pl * pr;
            rr += wr * pr * pr;
        }
        m.diag[i] += ll;
        m.diag[i + 1] += rr;
        m.off[i] += lr;
        let s = k2 * (b * b * b - a * a * a) / (3.0 * h * h);
        k.diag[i] += s;
        k.diag[i + 1] += s;
        k.off[i] -= s;
    }
    (m, k)
}

/// Radial system `A C = M C_prev - beta * jbar * e_N` for one electrode,
/// with `A = M + tau K` and `beta = tau R² / F`.
///
/// Shared by every macro element of the electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialOperator {
    pub nodes: Vec<f64>,
    pub k2: f64,
    pub tau: f64,
    pub mass: Tridiagonal,
    pub stiffness: Tridiagonal,
    pub system: Tridiagonal,
    /// Converts an element-averaged reaction rate into the surface flux term.
    pub beta: f64,
    /// `e_N^T A^{-1} e_N`
    pub surface_response: f64,
    /// Row `e_N^T A^{-1} M`.
    pub history_map: Vec<f64>,
}

impl RadialOperator {
    pub fn new(grid: &RadialGrid, k2: f64, tau: f64, faraday: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Validation(format!("time step must be positive, got {tau}")));
        }
        let (mass, stiffness) = radial_matrices(grid, k2);
        let system = mass.axpy(tau, &stiffness);
        let n = grid.n_nodes();
        let mut e_n = vec![0.0; n];
        e_n[n - 1] = 1.0;
        let w = system.solve(&e_n)?;
        let surface_response = w[n - 1];
        // A is symmetric, so e_N^T A^{-1} M = (M A^{-1} e_N)^T
        let history_map = mass.matvec(&w);
        let radius = grid.radius();
        Ok(Self {
            nodes: grid.nodes.clone(),
            k2,
            tau,
            mass,
            stiffness,
            system,
            beta: tau * radius * radius / faraday,
            surface_response,
            history_map,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn radius(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// `(surface_response, history_map)`
    pub fn surface_scalars(&self) -> (f64, &[f64]) {
        (self.surface_response, &self.history_map)
    }

    /// `e_N^T A^{-1} M C_prev`
    pub fn history(&self, c_prev: &[f64]) -> f64 {
        self.history_map.iter().zip(c_prev).map(|(a, b)| a * b).sum()
    }

    /// Surface value implied by an element-averaged reaction rate.
    pub fn surface_value(&self, c_prev: &[f64], jbar: f64) -> f64 {
        self.history(c_prev) - self.surface_response * self.beta * jbar
    }

    /// Solves `A C = M C_prev - beta * jbar * e_N` for the full radial profile.
    pub fn backward_recover(&self, c_prev: &[f64], jbar: f64) -> Result<Vec<f64>> {
        let mut rhs = self.mass.matvec(c_prev);
        let n = rhs.len();
        rhs[n - 1] -= self.beta * jbar;
        self.system.solve(&rhs)
    }

    /// `4π ∫ c r² dr` of the P1 profile.
    pub fn particle_mass(&self, c: &[f64]) -> f64 {
        4.0 * std::f64::consts::PI * self.mass.matvec(c).iter().sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dense_solve;
    use crate::params::SubdomainTag;

    fn grid(nodes: Vec<f64>) -> RadialGrid {
        RadialGrid::new(nodes, SubdomainTag::Negative).unwrap()
    }

    #[test]
    fn single_element_matrices_match_symbolic_integrals() {
        let r: f64 = 2.0;
        let k2 = 0.7;
        let (m, k) = radial_matrices(&grid(vec![0.0, r]), k2);
        let r3 = r.powi(3);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-14 * b.abs().max(1.0);
        assert!(close(m.diag[0], r3 / 30.0));
        assert!(close(m.off[0], r3 / 20.0));
        assert!(close(m.diag[1], r3 / 5.0));
        assert!(close(k.diag[0], k2 * r / 3.0));
        assert!(close(k.off[0], -k2 * r / 3.0));
        assert!(close(k.diag[1], k2 * r / 3.0));
    }

    #[test]
    fn stiffness_kills_constants_and_mass_sums_to_volume() {
        let g = grid(vec![0.0, 0.1, 0.35, 0.6, 0.9, 1.3]);
        let (m, k) = radial_matrices(&g, 3.0);
        let ones = vec![1.0; g.n_nodes()];
        assert!(k.matvec(&ones).iter().all(|v| v.abs() < 1e-14));
        let total: f64 = m.matvec(&ones).iter().sum();
        assert!((total - 1.3f64.powi(3) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn surface_response_without_diffusion_is_inverse_mass_entry() {
        let r = 1.5;
        let op = RadialOperator::new(&grid(vec![0.0, r]), 0.0, 1.0, 1.0).unwrap();
        let m = op.mass.to_dense();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv22 = m[0][0] / det;
        assert!((op.surface_response - inv22).abs() <= 1e-13 * inv22);
    }

    #[test]
    fn history_map_preserves_constants() {
        let g = grid(vec![0.0, 0.2, 0.5, 0.75, 0.875, 1.0]);
        let op = RadialOperator::new(&g, 0.3, 0.05, 1.0).unwrap();
        let c = vec![4.25; g.n_nodes()];
        assert!((op.history(&c) - 4.25).abs() < 1e-13);
        let rec = op.backward_recover(&c, 0.0).unwrap();
        assert!(rec.iter().all(|v| (v - 4.25).abs() < 1e-13));
    }

    #[test]
    fn surface_response_matches_dense_oracle() {
        let g = grid((0..=10).map(|i| i as f64 / 10.0).collect());
        let op = RadialOperator::new(&g, 0.02, 0.1, 1.0).unwrap();
        let mut e = vec![0.0; 11];
        e[10] = 1.0;
        let w = dense_solve(&op.system.to_dense(), &e).unwrap();
        assert!((op.surface_response - w[10]).abs() <= 1e-13 * w[10]);
    }

    #[test]
    fn surface_response_decreases_with_tau() {
        let g = grid(vec![0.0, 0.3, 0.7, 1.0]);
        let mut last = f64::INFINITY;
        for tau in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let s = RadialOperator::new(&g, 0.5, tau, 1.0).unwrap().surface_response;
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn recovery_reproduces_surface_value_and_mass_balance() {
        let g = grid(vec![0.0, 0.25, 0.5, 0.625, 0.75, 0.875, 0.9375, 1.0]);
        let op = RadialOperator::new(&g, 0.4, 0.2, 3.0).unwrap();
        let c_prev: Vec<f64> = (0..g.n_nodes()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let jbar = 0.37;
        let c = op.backward_recover(&c_prev, jbar).unwrap();
        let surf = op.surface_value(&c_prev, jbar);
        assert!((c[g.n_nodes() - 1] - surf).abs() <= 1e-12 * surf.abs());
        let dm = op.particle_mass(&c) - op.particle_mass(&c_prev);
        let expect = -4.0 * std::f64::consts::PI * op.beta * jbar;
        assert!((dm - expect).abs() <= 1e-11 * expect.abs());
    }

    #[test]
    fn particle_mass_of_uniform_profile() {
        let g = grid(vec![0.0, 0.4, 1.0, 2.0]);
        let op = RadialOperator::new(&g, 1.0, 1.0, 1.0).unwrap();
        let got = op.particle_mass(&[3.0; 4]);
        let expect = 4.0 * std::f64::consts::PI * 3.0 * 8.0 / 3.0;
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        assert!(RadialOperator::new(&grid(vec![0.0, 1.0]), 1.0, 0.0, 1.0).is_err());
    }
}
