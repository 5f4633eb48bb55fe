//! Deterministic singular value decomposition via one-sided Jacobi.
//!
//! One-sided Jacobi orthogonalizes the columns of the working matrix with
//! plane rotations accumulated into `V`; column norms become the singular
//! values. It is slow for large matrices but exact to machine precision,
//! branch-stable, and therefore bit-reproducible — which is what the
//! prompt-queue eviction rule needs. Inputs here are at most a few hundred
//! rows.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Hard cap on Jacobi sweeps; convergence is declared earlier once the
/// off-diagonal mass of the implicit Gram matrix drops below
/// `1e-12 * max(1, ||A||_F^2)`.
pub const MAX_SWEEPS: usize = 60;

const OFF_DIAG_TOL: f64 = 1e-12;

/// Relative threshold under which a singular value is snapped to exactly
/// zero, so rank-deficient inputs yield exact zero rows after truncation.
const RANK_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors as columns, `m×k` with `k = min(m, n)`.
    pub u: Matrix,
    /// Singular values, descending, all `>= 0`.
    pub sigma: Vec<f64>,
    /// Right singular vectors as rows, `k×n`.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self, tol: f64) -> usize {
        self.sigma.iter().filter(|&&s| s > tol).count()
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let k = self.sigma.len();
        let mut scaled = self.vt.clone();
        for (i, &s) in self.sigma.iter().enumerate().take(k) {
            for v in scaled.row_mut(i) {
                *v *= s;
            }
        }
        self.u.matmul(&scaled)
    }
}

/// SVD of a dense matrix. Deterministic: fixed sweep order, fixed sign
/// convention (the largest-magnitude entry of each right singular vector
/// is positive, ties broken by lowest index).
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidInput(format!(
            "svd of degenerate {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    a.check_finite()?;

    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (u, sigma, v) = jacobi_tall(work)?;

    // For A = UΣVᵀ, Aᵀ = VΣUᵀ: swap the factors back.
    let (mut u, mut vt) = if transposed {
        (v, u.transpose())
    } else {
        (u, v.transpose())
    };

    apply_sign_convention(&mut u, &mut vt);
    Ok(SvdResult { u, sigma, vt })
}

/// One-sided Jacobi on an `m×n` matrix with `m >= n`. Returns thin
/// `(U: m×n, sigma desc, V: n×n)`.
fn jacobi_tall(mut w: Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let m = w.rows();
    let n = w.cols();
    let mut v = Matrix::identity(n);
    let total_sq = w.frobenius_sq();
    let off_tol = OFF_DIAG_TOL * total_sq.max(1.0);

    let mut converged = total_sq == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off_sq = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                off_sq += gamma * gamma;
                if gamma == 0.0 {
                    continue;
                }
                // Hestenes rotation zeroing the (p,q) Gram entry.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        converged = off_sq.sqrt() <= off_tol;
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps on a {m}x{n} matrix"
        )));
    }

    // Column norms are the singular values; sort descending, stable in the
    // original column index so equal values keep a fixed order.
    let mut norms: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let s: f64 = (0..m).map(|i| w.get(i, j) * w.get(i, j)).sum();
            (j, s.sqrt())
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let sigma_max = norms.first().map(|x| x.1).unwrap_or(0.0);
    let snap = RANK_TOL * sigma_max * (m.max(n) as f64);

    let mut u = Matrix::zeros(m, n);
    let mut vs = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (slot, &(j, norm)) in norms.iter().enumerate() {
        let norm = if norm <= snap { 0.0 } else { norm };
        sigma.push(norm);
        for i in 0..n {
            vs.set(i, slot, v.get(i, j));
        }
        if norm > 0.0 {
            for i in 0..m {
                u.set(i, slot, w.get(i, j) / norm);
            }
        }
    }
    complete_orthonormal(&mut u, &sigma);
    Ok((u, sigma, vs))
}

/// Fills the U columns belonging to zero singular values with unit vectors
/// orthogonal to every other column (Gram-Schmidt over the standard basis,
/// lowest index first), keeping the factor orthonormal.
fn complete_orthonormal(u: &mut Matrix, sigma: &[f64]) {
    let m = u.rows();
    let k = u.cols();
    for slot in 0..k {
        if sigma[slot] > 0.0 {
            continue;
        }
        let mut filled = false;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for other in 0..k {
                if other == slot {
                    continue;
                }
                if sigma[other] == 0.0 && other > slot {
                    continue; // not yet filled
                }
                let dot: f64 = (0..m).map(|i| cand[i] * u.get(i, other)).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * u.get(i, other);
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, c) in cand.iter().enumerate() {
                    u.set(i, slot, c / norm);
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "failed to complete orthonormal basis");
    }
}

/// Flips each right singular vector so its largest-magnitude entry is
/// positive (ties broken by lowest index); the paired U column flips too,
/// so the product is unchanged.
fn apply_sign_convention(u: &mut Matrix, vt: &mut Matrix) {
    for r in 0..vt.rows() {
        let row = vt.row(r);
        let mut best = 0usize;
        let mut best_abs = row[0].abs();
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = j;
            }
        }
        if vt.get(r, best) < 0.0 {
            for x in vt.row_mut(r) {
                *x = -*x;
            }
            for i in 0..u.rows() {
                let v = u.get(i, r);
                u.set(i, r, -v);
            }
        }
    }
}

/// Keeps the top `k` principal rows: row `i` of the result is
/// `sigma[i] * vt[i]`, so rows are mutually orthogonal with Euclidean
/// norms equal to the retained singular values.
pub fn truncate_rank(s: &SvdResult, k: usize) -> Result<Matrix> {
    if k == 0 || k > s.sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {k} outside 1..={}",
            s.sigma.len()
        )));
    }
    let mut out = Matrix::zeros(k, s.vt.cols());
    for i in 0..k {
        let sv = s.sigma[i];
        for (j, &v) in s.vt.row(i).iter().enumerate() {
            out.set(i, j, sv * v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_recon_err(a: &Matrix, s: &SvdResult) -> f64 {
        let r = s.reconstruct().unwrap();
        a.sub(&r).unwrap().frobenius_norm() / a.frobenius_norm().max(1.0)
    }

    #[test]
    fn diagonal_matrix() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0]);
        assert_eq!(s.vt, Matrix::identity(2));
        assert!(rel_recon_err(&a, &s) < 1e-12);
    }

    #[test]
    fn all_zero_matrix() {
        let a = Matrix::zeros(3, 2);
        let s = svd(&a).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        let r = s.reconstruct().unwrap();
        assert_eq!(r, Matrix::zeros(3, 2));
        // U is still orthonormal thanks to basis completion.
        let gram = s.u.transpose().matmul(&s.u).unwrap();
        assert!(gram.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn wide_matrix_thin_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::randn(3, 7, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.vt.shape(), (3, 7));
        assert!(rel_recon_err(&a, &s) < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 0, f64::INFINITY);
        match svd(&a) {
            Err(crate::error::Error::InvalidInput(_)) => {}
            other => panic!("expected invalid-input error, got {other:?}"),
        }
    }

    #[test]
    fn truncate_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = svd(&a).unwrap();
        let t = truncate_rank(&s, 1).unwrap();
        assert_eq!(t.shape(), (1, 2));
        assert_eq!(t.data(), &[3.0, 0.0]);
        assert!(truncate_rank(&s, 0).is_err());
        assert!(truncate_rank(&s, 3).is_err());
    }

    #[test]
    fn truncate_full_rank_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::randn(6, 4, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        let t = truncate_rank(&s, 4).unwrap();
        assert!((t.frobenius_norm() - a.frobenius_norm()).abs() < 1e-9);
    }

    #[test]
    fn bit_identical_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::randn(12, 8, 1.0, &mut rng);
        let s1 = svd(&a).unwrap();
        let s2 = svd(&a).unwrap();
        assert_eq!(s1.u, s2.u);
        assert_eq!(s1.sigma, s2.sigma);
        assert_eq!(s1.vt, s2.vt);
    }

    #[test]
    fn sign_convention_positive_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Matrix::randn(10, 6, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        for r in 0..s.vt.rows() {
            let row = s.vt.row(r);
            let peak = row
                .iter()
                .cloned()
                .max_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap())
                .unwrap();
            assert!(peak > 0.0, "row {r} peak {peak}");
        }
    }
}
