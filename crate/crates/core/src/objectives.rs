//! Loss functions: task cross-entropy, the two memory-retention losses
//! (variational JSD bound with a discriminator, and KL distillation), and
//! the combined objective with the memory-factor schedule.
//!
//! The JSD route estimates a mutual-information lower bound between the
//! predictive distribution of the current shared prefix and that of the
//! previous task's frozen configuration. With `softplus = σ`, the
//! minimized quantity is
//! `L_MR = mean σ(-F(z_joint)) + mean σ(F(z_marginal))`
//! and the shifted bound estimate is `2·ln 2 − L_MR`, which approaches
//! zero for independent pairs. The KL route distills the old predictive
//! distribution directly and needs no discriminator; it is the default.
//!
//! Only the shared prefix (and the discriminator, on the JSD route)
//! receives gradients from either MR loss: the old branch enters
//! gradient-detached and the task head enters the new branch as a
//! constant.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{FrozenBackbone, TaskHead};
use crate::error::{Error, Result};
use crate::numkernel::{
    check_probability_rows, row_nll, softplus, stable_softmax, Matrix, NodeId, Tape,
};
use crate::trainer::TaskInferenceSnapshot;

pub const TWO_LN_2: f64 = 2.0 * std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrVariant {
    None,
    Kl,
    Jsd,
}

/// Memory factor: zero while the task index is at most `q_size` (the
/// queue has not overflowed yet), `eta_value` afterwards.
#[derive(Debug, Clone, Copy)]
pub struct EtaSchedule {
    pub q_size: usize,
    pub eta_value: f64,
}

impl EtaSchedule {
    pub fn eta(&self, task_index: usize) -> f64 {
        if task_index <= self.q_size {
            0.0
        } else {
            self.eta_value
        }
    }
}

/// `l_q + eta(task_index) · l_mr`.
pub fn total_loss(l_q: f64, l_mr: f64, schedule: &EtaSchedule, task_index: usize) -> f64 {
    l_q + schedule.eta(task_index) * l_mr
}

/// Mean negative log-likelihood of the labels under row-wise softmax.
pub fn task_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_nll(logits.row(i), y))
        .sum();
    Ok(total / logits.rows() as f64)
}

/// Batch-mean `KL(p_new || p_old)` with `0·log 0 = 0` and the old side
/// clamped at `1e-12`. The old side must be gradient-detached by the
/// caller; this scalar form carries no gradients at all.
pub fn mr_loss_kl(proba_new: &Matrix, proba_old: &Matrix) -> Result<f64> {
    if proba_new.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if proba_new.shape() != proba_old.shape() {
        return Err(Error::ShapeMismatch(format!(
            "new {:?} vs old {:?}",
            proba_new.shape(),
            proba_old.shape()
        )));
    }
    check_probability_rows(proba_new)?;
    check_probability_rows(proba_old)?;
    let mut total = 0.0;
    for i in 0..proba_new.rows() {
        for j in 0..proba_new.cols() {
            let p = proba_new.get(i, j);
            if p > 0.0 {
                let q = proba_old.get(i, j).max(1e-12);
                total += p * (p / q).ln();
            }
        }
    }
    Ok(total / proba_new.rows() as f64)
}

/// MLP discriminator `F_ω`: scores a joint/marginal pair of two K-class
/// probability vectors (input dimension `2K`) with two ReLU hidden
/// layers and a scalar output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl Discriminator {
    pub fn init(k: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = 2 * k;
        let s1 = (2.0 / (input + hidden) as f64).sqrt();
        let s2 = (2.0 / (hidden + hidden) as f64).sqrt();
        let s3 = (2.0 / (hidden + 1) as f64).sqrt();
        Self {
            w1: Matrix::randn(input, hidden, s1, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, hidden, s2, rng),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::randn(hidden, 1, s3, rng),
            b3: Matrix::zeros(1, 1),
        }
    }

    pub fn zeroed(k: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(2 * k, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::zeros(hidden, 1),
            b3: Matrix::zeros(1, 1),
        }
    }

    pub fn param_names() -> [&'static str; 6] {
        ["disc.w1", "disc.b1", "disc.w2", "disc.b2", "disc.w3", "disc.b3"]
    }

    pub fn values(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn values_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Registers the weights as parameters (`trainable`) or constants.
    pub fn nodes_on_tape(&self, tape: &mut Tape, trainable: bool) -> Result<DiscriminatorNodes> {
        let names = Self::param_names();
        let values = self.values();
        let mut ids = Vec::with_capacity(6);
        for i in 0..6 {
            ids.push(if trainable {
                tape.param(names[i], values[i].clone())?
            } else {
                tape.constant(values[i].clone())
            });
        }
        Ok(DiscriminatorNodes {
            w1: ids[0],
            b1: ids[1],
            w2: ids[2],
            b2: ids[3],
            w3: ids[4],
            b3: ids[5],
        })
    }

    /// Scores on the tape: `z` is `B×2K`, result is `B×1`.
    pub fn score_on_tape(
        tape: &mut Tape,
        nodes: &DiscriminatorNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        let h1 = tape.matmul(z, nodes.w1)?;
        let h1 = tape.add_row(h1, nodes.b1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, nodes.w2)?;
        let h2 = tape.add_row(h2, nodes.b2)?;
        let h2 = tape.relu(h2);
        let out = tape.matmul(h2, nodes.w3)?;
        tape.add_row(out, nodes.b3)
    }

    /// Plain evaluation of `F_ω` for the scalar loss path.
    pub fn score(&self, z: &Matrix) -> Result<Matrix> {
        let mut h1 = z.matmul(&self.w1)?;
        for i in 0..h1.rows() {
            for j in 0..h1.cols() {
                let v = (h1.get(i, j) + self.b1.get(0, j)).max(0.0);
                h1.set(i, j, v);
            }
        }
        let mut h2 = h1.matmul(&self.w2)?;
        for i in 0..h2.rows() {
            for j in 0..h2.cols() {
                let v = (h2.get(i, j) + self.b2.get(0, j)).max(0.0);
                h2.set(i, j, v);
            }
        }
        let mut out = h2.matmul(&self.w3)?;
        for i in 0..out.rows() {
            let v = out.get(i, 0) + self.b3.get(0, 0);
            out.set(i, 0, v);
        }
        Ok(out)
    }
}

/// Joint and marginal pairings for one minibatch: joint pairs share the
/// input `x_b`, marginal pairs re-pair the old side through `perm`.
#[derive(Debug, Clone)]
pub struct MrBatch {
    pub p_new: Matrix,
    pub p_old: Matrix,
    pub perm: Vec<usize>,
}

impl MrBatch {
    /// Builds the pairing with a shuffled permutation drawn from `rng`.
    pub fn new(p_new: Matrix, p_old: Matrix, rng: &mut impl Rng) -> Result<Self> {
        if p_new.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if p_new.shape() != p_old.shape() {
            return Err(Error::ShapeMismatch(format!(
                "new {:?} vs old {:?}",
                p_new.shape(),
                p_old.shape()
            )));
        }
        check_probability_rows(&p_new)?;
        check_probability_rows(&p_old)?;
        let mut perm: Vec<usize> = (0..p_new.rows()).collect();
        perm.shuffle(rng);
        Ok(Self { p_new, p_old, perm })
    }

    fn marginal_old(&self) -> Matrix {
        let mut m = Matrix::zeros(self.p_old.rows(), self.p_old.cols());
        for (r, &src) in self.perm.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.p_old.row(src));
        }
        m
    }
}

/// Scalar JSD-based MR loss:
/// `mean softplus(-F(joint)) + mean softplus(F(marginal))`.
pub fn mr_loss_jsd(batch: &MrBatch, disc: &Discriminator) -> Result<f64> {
    let joint = concat_cols_plain(&batch.p_new, &batch.p_old)?;
    let marginal = concat_cols_plain(&batch.p_new, &batch.marginal_old())?;
    let f_joint = disc.score(&joint)?;
    let f_marg = disc.score(&marginal)?;
    let b = batch.p_new.rows() as f64;
    let term_j: f64 = (0..f_joint.rows())
        .map(|i| softplus(-f_joint.get(i, 0)))
        .sum::<f64>()
        / b;
    let term_m: f64 = (0..f_marg.rows())
        .map(|i| softplus(f_marg.get(i, 0)))
        .sum::<f64>()
        / b;
    Ok(term_j + term_m)
}

/// Shifted mutual-information lower bound recovered from the JSD loss.
pub fn jsd_mi_bound(l_mr: f64) -> f64 {
    TWO_LN_2 - l_mr
}

/// Tape version of the JSD MR loss. `p_new` carries gradients back to the
/// shared prefix; `p_old` must be a constant node; the discriminator
/// enters trainable or frozen depending on which side of the alternating
/// update is being taken.
pub fn mr_loss_jsd_on_tape(
    tape: &mut Tape,
    p_new: NodeId,
    p_old: NodeId,
    perm: &[usize],
    disc_nodes: &DiscriminatorNodes,
) -> Result<NodeId> {
    let old_marg = {
        let m = marginal_from_node(tape, p_old, perm);
        tape.constant(m)
    };
    let joint = tape.concat_cols(&[p_new, p_old])?;
    let marginal = tape.concat_cols(&[p_new, old_marg])?;
    let f_joint = Discriminator::score_on_tape(tape, disc_nodes, joint)?;
    let f_marg = Discriminator::score_on_tape(tape, disc_nodes, marginal)?;
    let neg_j = tape.scale(f_joint, -1.0);
    let sp_j = tape.softplus(neg_j);
    let sp_m = tape.softplus(f_marg);
    let mean_j = tape.mean(sp_j);
    let mean_m = tape.mean(sp_m);
    tape.add(mean_j, mean_m)
}

fn marginal_from_node(tape: &Tape, p_old: NodeId, perm: &[usize]) -> Matrix {
    let src = tape.value(p_old);
    let mut m = Matrix::zeros(src.rows(), src.cols());
    for (r, &s) in perm.iter().enumerate() {
        m.row_mut(r).copy_from_slice(src.row(s));
    }
    m
}

fn concat_cols_plain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch("concat row mismatch".into()));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        out.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
        out.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
    }
    Ok(out)
}

/// Frozen old-branch outputs for the MR loss.
///
/// The previous task's configuration (its prefix, aggregated queue, and
/// encoder) is frozen, so the CLS representation of every current-task
/// training input is computed once; per-batch probabilities then go
/// through the *current* task head so old and new live on the same
/// K-class simplex. Everything here is detached: no gradients flow.
#[derive(Debug, Clone)]
pub struct OldReference {
    h_cls: Matrix,
}

impl OldReference {
    /// Runs the previous snapshot on the given inputs. Errors if the
    /// snapshot is missing (first task has no old branch).
    pub fn build(
        snapshot: Option<&TaskInferenceSnapshot>,
        backbone: &FrozenBackbone,
        inputs: &[Vec<usize>],
    ) -> Result<Self> {
        let snapshot = snapshot.ok_or_else(|| {
            Error::State("old reference requires a previous task snapshot".into())
        })?;
        let scaled = snapshot.scaled_queue()?;
        let mut h_cls = Matrix::zeros(inputs.len(), backbone.d_model());
        for (i, tokens) in inputs.iter().enumerate() {
            let h = backbone.forward_h_cls(
                snapshot.prefix.as_ref(),
                scaled.as_ref(),
                tokens,
            )?;
            h_cls.row_mut(i).copy_from_slice(h.row(0));
        }
        Ok(Self { h_cls })
    }

    /// Detached class probabilities for a batch of input indices under
    /// the given head.
    pub fn probs(&self, batch: &[usize], head: &TaskHead) -> Result<Matrix> {
        let mut out = Matrix::zeros(batch.len(), head.k);
        for (r, &idx) in batch.iter().enumerate() {
            if idx >= self.h_cls.rows() {
                return Err(Error::InvalidArgument(format!(
                    "old-reference index {idx} out of {}",
                    self.h_cls.rows()
                )));
            }
            let h = Matrix::from_vec(1, self.h_cls.cols(), self.h_cls.row(idx).to_vec())?;
            let logits = h.matmul(&head.alpha)?;
            let p = stable_softmax(logits.row(0));
            out.row_mut(r).copy_from_slice(&p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_loss_uniform_logits() {
        let logits = Matrix::zeros(3, 4);
        let l = task_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn task_loss_saturated_correct_class() {
        let mut logits = Matrix::zeros(1, 4);
        logits.set(0, 2, 20.0);
        let l = task_loss(&logits, &[2]).unwrap();
        assert!(l < 1e-8, "loss {l}");
    }

    #[test]
    fn task_loss_matches_log_sum_exp_reference() {
        let logits =
            Matrix::from_rows(&[vec![0.3, -1.1, 2.2], vec![1.5, 0.4, -0.7]]).unwrap();
        let labels = [2usize, 0];
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            expected += lse - row[y];
        }
        expected /= 2.0;
        let got = task_loss(&logits, &labels).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn task_loss_label_out_of_range() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            task_loss(&logits, &[5]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kl_zero_for_equal() {
        let p = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
        assert_eq!(mr_loss_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((mr_loss_kl(&p, &q).unwrap() - expected).abs() < 1e-12);

        let p = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!((mr_loss_kl(&p, &q).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_probability_rows() {
        let p = Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            mr_loss_kl(&p, &q),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn jsd_constant_discriminator_gives_two_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Matrix::from_rows(&[vec![0.4, 0.6], vec![0.8, 0.2]]).unwrap();
        let batch = MrBatch::new(p.clone(), p, &mut rng).unwrap();
        let disc = Discriminator::zeroed(2, 8);
        let l = mr_loss_jsd(&batch, &disc).unwrap();
        assert!((l - TWO_LN_2).abs() < 1e-12);
        assert!(jsd_mi_bound(l).abs() < 1e-12);
    }

    #[test]
    fn jsd_tape_matches_scalar_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p_new = random_prob_rows(6, 3, &mut rng);
        let p_old = random_prob_rows(6, 3, &mut rng);
        let disc = Discriminator::init(3, 16, &mut rng);
        let batch = MrBatch::new(p_new.clone(), p_old.clone(), &mut rng).unwrap();
        let scalar = mr_loss_jsd(&batch, &disc).unwrap();

        let mut tape = Tape::new();
        let pn = tape.constant(p_new);
        let po = tape.constant(p_old);
        let dn = disc.nodes_on_tape(&mut tape, false).unwrap();
        let node = mr_loss_jsd_on_tape(&mut tape, pn, po, &batch.perm, &dn).unwrap();
        assert!((tape.scalar(node) - scalar).abs() < 1e-12);
    }

    #[test]
    fn eta_schedule_gates_by_queue_size() {
        let s = EtaSchedule {
            q_size: 5,
            eta_value: 1e-2,
        };
        for i in 1..=5 {
            assert_eq!(s.eta(i), 0.0);
        }
        for i in 6..=20 {
            assert_eq!(s.eta(i), 1e-2);
        }
        assert_eq!(total_loss(1.0, 0.5, &s, 3), 1.0);
        assert!((total_loss(1.0, 0.5, &s, 9) - 1.005).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let empty = Matrix::zeros(0, 2);
        assert!(MrBatch::new(empty.clone(), empty, &mut rng).is_err());
    }

    fn random_prob_rows(rows: usize, k: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, k);
        for i in 0..rows {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = stable_softmax(&z);
            m.row_mut(i).copy_from_slice(&p);
        }
        m
    }
}
