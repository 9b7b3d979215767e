//! Sparse direct solves through faer, plus a small dense solver for oracles.

use std::collections::BTreeSet;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

/// Runs factorizations single-threaded (bit-reproducible) or on the rayon pool.
pub fn set_sequential_factorization(sequential: bool) {
    faer::set_global_parallelism(if sequential {
        faer::Par::Seq
    } else {
        faer::Par::rayon(0)
    });
}

/// Coordinate-format matrix; duplicate entries are summed on factorization.
#[derive(Debug, Clone, Default)]
pub struct TripletMatrix {
    pub n: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl TripletMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ..Default::default()
        }
    }

    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        Self {
            n,
            rows: Vec::with_capacity(nnz),
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
        }
    }

    #[inline]
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        self.rows.push(r);
        self.cols.push(c);
        self.vals.push(v);
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Structural pattern (explicit zeros included).
    pub fn pattern(&self) -> BTreeSet<(usize, usize)> {
        self.rows.iter().copied().zip(self.cols.iter().copied()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for k in 0..self.nnz() {
            a[self.rows[k]][self.cols[k]] += self.vals[k];
        }
        a
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for k in 0..self.nnz() {
            y[self.rows[k]] += self.vals[k] * x[self.cols[k]];
        }
        y
    }

    /// Replaces row `dof` with the identity row and zeroes column `dof`.
    pub fn pin(&mut self, dof: usize) {
        for k in 0..self.nnz() {
            if self.rows[k] == dof || self.cols[k] == dof {
                self.vals[k] = 0.0;
            }
        }
        self.push(dof, dof, 1.0);
    }

    /// Sparse LU solve of `A x = rhs` on the equilibrated matrix.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (rs, cs) = equilibration(
            self.n,
            (0..self.nnz()).map(|k| (self.rows[k], self.cols[k], self.vals[k])),
        );
        let triplets: Vec<Triplet<usize, usize, f64>> = (0..self.nnz())
            .map(|k| {
                let (r, c) = (self.rows[k], self.cols[k]);
                Triplet::new(r, c, self.vals[k] * rs[r] * cs[c])
            })
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &triplets)
            .map_err(|e| Error::Linear(format!("{e:?}")))?;
        let lu = a.sp_lu().map_err(|e| Error::Linear(format!("{e:?}")))?;
        let b = Col::<f64>::from_fn(self.n, |i| rhs[i] * rs[i]);
        let x = lu.solve(&b);
        let out: Vec<f64> = (0..self.n).map(|i| x[i] * cs[i]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Linear("singular matrix".into()));
        }
        Ok(out)
    }
}

fn power_of_two_inverse(m: f64) -> f64 {
    if m > 0.0 && m.is_finite() {
        (-m.log2().round()).exp2()
    } else {
        1.0
    }
}

/// Power-of-two row scales, then column scales of the row-scaled matrix, so scaling is exact.
fn equilibration(n: usize, entries: impl Iterator<Item = (usize, usize, f64)> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut row_max = vec![0.0f64; n];
    for (r, _, v) in entries.clone() {
        row_max[r] = row_max[r].max(v.abs());
    }
    let rs: Vec<f64> = row_max.into_iter().map(power_of_two_inverse).collect();
    let mut col_max = vec![0.0f64; n];
    for (r, c, v) in entries {
        col_max[c] = col_max[c].max((v * rs[r]).abs());
    }
    (rs, col_max.into_iter().map(power_of_two_inverse).collect())
}

/// Gaussian elimination with partial pivoting on the equilibrated matrix.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let (rs, cs) = equilibration(
        n,
        a.iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &v)| (i, j, v))),
    );
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(&rs)
        .map(|(row, r)| row.iter().zip(&cs).map(|(v, c)| v * r * c).collect())
        .collect();
    let mut x: Vec<f64> = b.iter().zip(&rs).map(|(v, r)| v * r).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        if m[p][k] == 0.0 {
            return Err(Error::Linear(format!("singular dense matrix at column {k}")));
        }
        m.swap(k, p);
        x.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f != 0.0 {
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k][k];
    }
    Ok(x.iter().zip(&cs).map(|(v, c)| v * c).collect())
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_and_dense_agree() {
        let mut a = TripletMatrix::new(4);
        for (r, c, v) in [
            (0, 0, 4.0),
            (0, 1, -1.0),
            (1, 0, -1.0),
            (1, 1, 4.0),
            (1, 2, -1.0),
            (2, 1, -1.0),
            (2, 2, 4.0),
            (2, 3, 2.0),
            (3, 3, 3.0),
            (3, 0, 1.0),
            (3, 0, 0.5),
        ] {
            a.push(r, c, v);
        }
        let b = [1.0, 2.0, 3.0, 4.0];
        let xs = a.solve(&b).unwrap();
        let xd = dense_solve(&a.to_dense(), &b).unwrap();
        for (p, q) in xs.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-14);
        }
        let r = a.matvec(&xs);
        assert!(r.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-13));
    }

    #[test]
    fn pin_makes_singular_system_solvable() {
        // pure Neumann Laplacian on three nodes
        let mut a = TripletMatrix::new(3);
        for (r, c, v) in [
            (0, 0, 1.0),
            (0, 1, -1.0),
            (1, 0, -1.0),
            (1, 1, 2.0),
            (1, 2, -1.0),
            (2, 1, -1.0),
            (2, 2, 1.0),
        ] {
            a.push(r, c, v);
        }
        assert!(dense_solve(&a.to_dense(), &[0.0; 3]).is_err());
        a.pin(0);
        let x = a.solve(&[0.0, 1.0, -1.0]).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((x[2] - x[1] + 1.0).abs() < 1e-14);
    }
}
