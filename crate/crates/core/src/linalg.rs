//! Small symmetric solves via eigendecomposition. Gram matrices here are at
//! most a handful of rows wide, so the factor is kept as dense arrays and
//! applied to right-hand sides directly.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct SymFactor {
    dim: usize,
    eigenvalues: Vec<f64>,
    /// Column-major eigenvectors.
    eigenvectors: Vec<f64>,
}

impl SymFactor {
    /// Factor a symmetric `dim x dim` matrix given in row-major order.
    pub fn new(matrix: &[f64], dim: usize) -> Self {
        debug_assert_eq!(matrix.len(), dim * dim);
        let m = DMatrix::from_row_slice(dim, dim, matrix);
        let eig = SymmetricEigen::new(m);
        Self {
            dim,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors.as_slice().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ratio of smallest to largest absolute eigenvalue (0 for the zero matrix).
    pub fn reciprocal_condition(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for &l in &self.eigenvalues {
            let a = libm::fabs(l);
            lo = lo.min(a);
            hi = hi.max(a);
        }
        if hi == 0.0 || !hi.is_finite() {
            0.0
        } else {
            lo / hi
        }
    }

    pub fn is_invertible(&self, rank_tol: f64) -> bool {
        self.reciprocal_condition() >= rank_tol
    }

    /// `out = M^{-1} rhs`.
    pub fn solve_into(&self, rhs: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut proj = [0.0f64; 16];
        let mut heap;
        let proj: &mut [f64] = if d <= 16 {
            &mut proj[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap[..]
        };
        for k in 0..d {
            let v = &self.eigenvectors[k * d..(k + 1) * d];
            let dot: f64 = v.iter().zip(rhs).map(|(a, b)| a * b).sum();
            proj[k] = dot / self.eigenvalues[k];
        }
        for (r, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|k| self.eigenvectors[k * d + r] * proj[k]).sum();
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.solve_into(rhs, &mut out);
        out
    }

    /// Dense row-major inverse.
    pub fn inverse(&self) -> Vec<f64> {
        let d = self.dim;
        let mut inv = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                inv[r * d + c] = (0..d)
                    .map(|k| self.eigenvectors[k * d + r] * self.eigenvectors[k * d + c] / self.eigenvalues[k])
                    .sum();
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_the_two_by_two_normal_equations() {
        // [[4,2],[2,2]] b = [2,2]  =>  b = (0, 1)
        let f = SymFactor::new(&[4.0, 2.0, 2.0, 2.0], 2);
        let b = f.solve(&[2.0, 2.0]);
        assert!(b[0].abs() < 1e-14);
        assert!((b[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn flags_rank_deficiency() {
        let f = SymFactor::new(&[1.0, 1.0, 1.0, 1.0], 2);
        assert!(!f.is_invertible(1e-10));
        let g = SymFactor::new(&[2.0, 1.0, 1.0, 1.0], 2);
        assert!(g.is_invertible(1e-10));
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let m = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = SymFactor::new(&m, 3).inverse();
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| m[r * 3 + k] * inv[k * 3 + c]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-13);
            }
        }
    }
}
