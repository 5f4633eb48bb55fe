//! Rank-one knowledge aggregation.
//!
//! A full `c×d` reweighting matrix over the queue would cost `c·d`
//! trainable parameters; factoring it as the outer product `u ⊗ vᵀ`
//! costs `c + d`. The factored matrix scales queue rows elementwise
//! (Hadamard), and the all-ones initialization is the Hadamard identity,
//! so a fresh aggregator leaves the model output untouched.

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, NodeId, Tape};

#[derive(Debug, Clone)]
pub struct RankOneAggregator {
    /// Row weights, `c×1`, where `c` is the queue row count at bind time.
    pub u: Matrix,
    /// Column weights, `d×1`.
    pub v: Matrix,
    pub trainable: bool,
}

/// All-ones aggregator: the Hadamard multiplicative identity.
pub fn init_aggregator(c: usize, d: usize) -> RankOneAggregator {
    RankOneAggregator {
        u: Matrix::ones(c, 1),
        v: Matrix::ones(d, 1),
        trainable: true,
    }
}

/// Fresh all-ones aggregator sized for the upcoming task's queue. The
/// previous task's aggregator survives only inside that task's snapshot.
pub fn rebind(
    _prev: Option<&RankOneAggregator>,
    c_new: usize,
    d: usize,
) -> RankOneAggregator {
    init_aggregator(c_new, d)
}

impl RankOneAggregator {
    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn trainable_count(&self) -> usize {
        self.u.rows() + self.v.rows()
    }

    /// `out[i][j] = (u[i]·v[j]) · q[i][j]`.
    ///
    /// Must mirror the tape route (outer product first, then Hadamard)
    /// operation for operation so eval and training forwards agree
    /// bitwise.
    pub fn apply(&self, q_rows: &Matrix) -> Result<Matrix> {
        if q_rows.rows() != self.u.rows() || q_rows.cols() != self.v.rows() {
            return Err(Error::ShapeMismatch(format!(
                "aggregator ({}, {}) applied to {}x{} queue",
                self.u.rows(),
                self.v.rows(),
                q_rows.rows(),
                q_rows.cols()
            )));
        }
        let mut out = Matrix::zeros(q_rows.rows(), q_rows.cols());
        for i in 0..q_rows.rows() {
            let ui = self.u.get(i, 0);
            for j in 0..q_rows.cols() {
                let w = ui * self.v.get(j, 0);
                out.set(i, j, w * q_rows.get(i, j));
            }
        }
        Ok(out)
    }

    /// Tape version of [`RankOneAggregator::apply`].
    pub fn apply_on_tape(
        tape: &mut Tape,
        u: NodeId,
        v: NodeId,
        q_rows: NodeId,
    ) -> Result<NodeId> {
        let w = tape.outer(u, v)?;
        tape.hadamard(w, q_rows)
    }

    /// Mean over columns of `|u[i]·v[j]|`: the per-row importance
    /// readout emitted for aggregation heatmaps.
    pub fn row_importance(&self) -> Vec<f64> {
        let d = self.v.rows() as f64;
        (0..self.u.rows())
            .map(|i| {
                let ui = self.u.get(i, 0);
                (0..self.v.rows())
                    .map(|j| (ui * self.v.get(j, 0)).abs())
                    .sum::<f64>()
                    / d
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_aggregator_is_hadamard_identity() {
        let agg = init_aggregator(2, 3);
        let q = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![4.0, 5.0, -6.0]]).unwrap();
        assert_eq!(agg.apply(&q).unwrap(), q);
    }

    #[test]
    fn parameter_count_is_c_plus_d() {
        let agg = init_aggregator(50, 16);
        assert_eq!(agg.trainable_count(), 66);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_aggregator(4, 7);
        let b = init_aggregator(4, 7);
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn hand_computable_scaling() {
        let agg = RankOneAggregator {
            u: Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap(),
            v: Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            trainable: true,
        };
        let q = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = agg.apply(&q).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let agg = init_aggregator(2, 3);
        assert!(agg.apply(&Matrix::zeros(3, 3)).is_err());
        assert!(agg.apply(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn matches_explicit_outer_then_hadamard() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let agg = RankOneAggregator {
            u: Matrix::randn(6, 1, 1.0, &mut rng),
            v: Matrix::randn(4, 1, 1.0, &mut rng),
            trainable: true,
        };
        let q = Matrix::randn(6, 4, 1.0, &mut rng);
        let direct = agg.apply(&q).unwrap();

        let mut w = Matrix::zeros(6, 4);
        for i in 0..6 {
            for j in 0..4 {
                w.set(i, j, agg.u.get(i, 0) * agg.v.get(j, 0));
            }
        }
        let reference = w.hadamard(&q).unwrap();
        assert!(direct.max_abs_diff(&reference) < 1e-15);
    }

    #[test]
    fn tape_route_agrees_with_eval_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let agg = RankOneAggregator {
            u: Matrix::randn(5, 1, 1.0, &mut rng),
            v: Matrix::randn(3, 1, 1.0, &mut rng),
            trainable: true,
        };
        let q = Matrix::randn(5, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let un = tape.constant(agg.u.clone());
        let vn = tape.constant(agg.v.clone());
        let qn = tape.constant(q.clone());
        let out = RankOneAggregator::apply_on_tape(&mut tape, un, vn, qn).unwrap();
        assert_eq!(tape.value(out), &agg.apply(&q).unwrap());
    }

    #[test]
    fn rebind_sizes() {
        let prev = init_aggregator(40, 8);
        let next = rebind(Some(&prev), 50, 8);
        assert_eq!(next.u, Matrix::ones(50, 1));
        assert_eq!(next.v, Matrix::ones(8, 1));
        let fresh = rebind(None, 10, 8);
        assert_eq!(fresh.u, Matrix::ones(10, 1));
    }

    #[test]
    fn row_importance_readout() {
        let agg = RankOneAggregator {
            u: Matrix::from_rows(&[vec![2.0], vec![-1.0]]).unwrap(),
            v: Matrix::from_rows(&[vec![0.5], vec![1.5]]).unwrap(),
            trainable: true,
        };
        let imp = agg.row_importance();
        assert!((imp[0] - 2.0).abs() < 1e-12); // mean(|2·0.5|, |2·1.5|) = 2
        assert!((imp[1] - 1.0).abs() < 1e-12);
    }
}
