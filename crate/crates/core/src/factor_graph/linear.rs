//! Block-tridiagonal symmetric systems.
//!
//! A chain of state nodes where factors touch one node or two neighbouring
//! nodes yields normal equations whose only non-zero blocks are on the
//! diagonal and the first off-diagonal. Block sizes may differ per node.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    /// Diagonal blocks `H_kk`.
    pub diag: Vec<DMatrix<f64>>,
    /// Upper blocks `H_k,k+1` (length `diag.len() - 1`).
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(sizes: &[usize]) -> Self {
        let diag = sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        let upper = sizes.windows(2).map(|w| DMatrix::zeros(w[0], w[1])).collect();
        Self { diag, upper }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.diag.iter().map(|d| d.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.diag.iter().map(|d| d.nrows()).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.diag
            .iter()
            .map(|d| {
                let o = acc;
                acc += d.nrows();
                o
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let off = self.offsets();
        let mut m = DMatrix::zeros(n, n);
        for (k, d) in self.diag.iter().enumerate() {
            m.view_mut((off[k], off[k]), d.shape()).copy_from(d);
        }
        for (k, u) in self.upper.iter().enumerate() {
            m.view_mut((off[k], off[k + 1]), u.shape()).copy_from(u);
            m.view_mut((off[k + 1], off[k]), (u.ncols(), u.nrows()))
                .copy_from(&u.transpose());
        }
        m
    }

    /// Adds `λ·diag(H)` to the diagonal.
    pub fn damp(&mut self, lambda: f64) {
        for d in &mut self.diag {
            for i in 0..d.nrows() {
                d[(i, i)] *= 1.0 + lambda;
            }
        }
    }

    pub fn factorize(&self) -> Result<BlockFactorization> {
        let mut schur_chol = Vec::with_capacity(self.diag.len());
        for k in 0..self.diag.len() {
            let mut s = self.diag[k].clone();
            if k > 0 {
                let prev: &nalgebra::Cholesky<f64, nalgebra::Dyn> = &schur_chol[k - 1];
                let b = &self.upper[k - 1];
                s -= b.transpose() * prev.solve(b);
            }
            if s.nrows() == 0 {
                schur_chol.push(DMatrix::<f64>::zeros(0, 0).cholesky().unwrap());
                continue;
            }
            let s = 0.5 * (&s + s.transpose());
            schur_chol.push(s.cholesky().ok_or(Error::SingularSystem)?);
        }
        Ok(BlockFactorization {
            upper: self.upper.clone(),
            schur_chol,
        })
    }
}

/// Block LDLᵀ factorization: Schur complements `S_k = H_kk − H_k-1,kᵀ S_k-1⁻¹ H_k-1,k`.
pub struct BlockFactorization {
    upper: Vec<DMatrix<f64>>,
    schur_chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl BlockFactorization {
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.schur_chol.len();
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut v = rhs[k].clone();
            if k > 0 {
                v -= self.upper[k - 1].transpose() * self.schur_chol[k - 1].solve(&y[k - 1]);
            }
            y.push(v);
        }
        let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        for k in (0..n).rev() {
            let mut v = y[k].clone();
            if k + 1 < n {
                v -= &self.upper[k] * &x[k + 1];
            }
            x[k] = self.schur_chol[k].solve(&v);
        }
        x
    }

    /// Diagonal blocks of `H⁻¹` via the backward recursion
    /// `Σ_kk = S_k⁻¹ + G_k Σ_k+1,k+1 G_kᵀ`, `G_k = S_k⁻¹ H_k,k+1`.
    pub fn inverse_diagonal_blocks(&self) -> Vec<DMatrix<f64>> {
        let n = self.schur_chol.len();
        let mut out: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
        for k in (0..n).rev() {
            let mut sigma = self.schur_chol[k].inverse();
            if k + 1 < n {
                let g = self.schur_chol[k].solve(&self.upper[k]);
                sigma += &g * &out[k + 1] * g.transpose();
            }
            out[k] = 0.5 * (&sigma + sigma.transpose());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(sizes: &[usize], rng: &mut ChaCha8Rng) -> BlockTridiagonal {
        // Build H = JᵀJ + I from a random chain Jacobian so the block pattern is exact.
        let mut h = BlockTridiagonal::zeros(sizes);
        for k in 0..sizes.len() {
            let rows = 6;
            let a = DMatrix::from_fn(rows, sizes[k], |_, _| rng.random_range(-1.0..1.0));
            h.diag[k] += a.transpose() * &a + DMatrix::identity(sizes[k], sizes[k]);
            if k + 1 < sizes.len() {
                let b = DMatrix::from_fn(rows, sizes[k + 1], |_, _| rng.random_range(-1.0..1.0));
                let c = DMatrix::from_fn(rows, sizes[k], |_, _| rng.random_range(-1.0..1.0));
                h.diag[k] += c.transpose() * &c;
                h.diag[k + 1] += b.transpose() * &b;
                h.upper[k] += c.transpose() * &b;
            }
        }
        h
    }

    #[test]
    fn solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sizes = [4, 5, 3, 4, 6, 4];
        let h = random_spd(&sizes, &mut rng);
        let rhs: Vec<DVector<f64>> = sizes
            .iter()
            .map(|&s| DVector::from_fn(s, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let x = h.factorize().unwrap().solve(&rhs);
        let dense = h.to_dense();
        let b = DVector::from_iterator(h.dim(), rhs.iter().flat_map(|v| v.iter().copied()));
        let xd = dense.clone().cholesky().unwrap().solve(&b);
        let xs = DVector::from_iterator(h.dim(), x.iter().flat_map(|v| v.iter().copied()));
        assert!((xs - xd).amax() < 1e-10);
    }

    #[test]
    fn inverse_blocks_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sizes = [3, 4, 4, 5, 3];
        let h = random_spd(&sizes, &mut rng);
        let blocks = h.factorize().unwrap().inverse_diagonal_blocks();
        let inv = h.to_dense().try_inverse().unwrap();
        let off = h.offsets();
        for (k, b) in blocks.iter().enumerate() {
            let d = inv.view((off[k], off[k]), b.shape());
            assert!((b - d).amax() < 1e-10);
        }
    }

    #[test]
    fn singular_detected() {
        let mut h = BlockTridiagonal::zeros(&[2, 2]);
        h.diag[0][(0, 0)] = 1.0;
        h.diag[1] = DMatrix::identity(2, 2);
        assert!(matches!(h.factorize(), Err(Error::SingularSystem)));
    }
}
