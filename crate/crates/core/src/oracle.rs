//! Brute-force reference computations for the test suites.
//!
//! These deliberately take a different algorithmic route than the library
//! (two-sided Jacobi eigendecomposition of the Gram matrix instead of
//! one-sided Jacobi on the data) so they can act as independent oracles.
//! Nothing in the library proper calls into this module.

use crate::numkernel::Matrix;

/// Eigenvalues of a symmetric matrix, descending, via classic two-sided
/// cyclic Jacobi rotations. Panics on non-square input; intended for the
/// small Gram matrices used in tests.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert_eq!(a.rows(), a.cols(), "symmetric_eigenvalues needs square");
    let n = a.rows();
    let mut m = a.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    off += m.get(p, q) * m.get(p, q);
                }
            }
        }
        if off.sqrt() <= 1e-14 * m.frobenius_norm().max(1.0) {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

/// Singular values of `a` as square roots of the eigenvalues of the Gram
/// matrix `AᵀA` (negative rounding noise clamped to zero), descending.
pub fn singular_values_via_gram(a: &Matrix) -> Vec<f64> {
    let gram = a.transpose().matmul(a).expect("gram");
    symmetric_eigenvalues(&gram)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect()
}

/// Maximal Frobenius energy of any rank-`k` right-basis projection of
/// `a`: the sum of the top `k` eigenvalues of `AᵀA`.
pub fn best_rank_k_energy(a: &Matrix, k: usize) -> f64 {
    let gram = a.transpose().matmul(a).expect("gram");
    symmetric_eigenvalues(&gram)
        .into_iter()
        .take(k)
        .map(|e| e.max(0.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_eigenvalues() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let e = symmetric_eigenvalues(&m);
        assert!((e[0] - 5.0).abs() < 1e-12);
        assert!((e[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn known_two_by_two() {
        // Eigenvalues of [[2,1],[1,2]] are 3 and 1.
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&m);
        assert!((e[0] - 3.0).abs() < 1e-12);
        assert!((e[1] - 1.0).abs() < 1e-12);
    }
}
