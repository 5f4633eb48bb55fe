//! Soft-prompt representations and the bounded prompt queue.
//!
//! A prompt is an `l×d` matrix of virtual-token embeddings. While a
//! prompt is the trainable newest one it lives behind a two-layer
//! residual MLP reparameterization; once its task finishes it is
//! materialized to a dense matrix and frozen into the queue. The queue
//! holds at most `C = l·q_size` rows and is trimmed by one of three
//! eviction rules when full.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{svd, truncate_rank, Matrix, NodeId, Tape};

/// An `l×d` soft prompt; rows are virtual-token embeddings.
pub type PromptMatrix = Matrix;

/// Trainable prompt behind a per-row residual MLP: materialized row `i`
/// is `raw_i + relu(raw_i·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone)]
pub struct ResidualMlpPrompt {
    pub raw: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ResidualMlpPrompt {
    /// Fresh prompt with `raw` rows sampled from the given embedding
    /// table (prompt tuning convention) and near-zero MLP weights, so the
    /// initial materialization stays close to the sampled rows.
    pub fn init(
        len: usize,
        d: usize,
        hidden: usize,
        embedding: &Matrix,
        rng: &mut impl Rng,
    ) -> Self {
        let mut raw = Matrix::zeros(len, d);
        for i in 0..len {
            let src = rng.random_range(0..embedding.rows());
            raw.row_mut(i).copy_from_slice(embedding.row(src));
        }
        Self {
            raw,
            w1: Matrix::randn(d, hidden, 0.01, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, d, 0.01, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.raw.cols();
        let h = self.w1.cols();
        if self.w1.rows() != d
            || self.b1.shape() != (1, h)
            || self.w2.shape() != (h, d)
            || self.b2.shape() != (1, d)
        {
            return Err(Error::InvalidArgument(format!(
                "residual MLP shapes inconsistent: raw {:?} w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                self.raw.shape(),
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }

    /// Dense prompt matrix; same shape as `raw`.
    pub fn materialize(&self) -> Result<Matrix> {
        self.check_shapes()?;
        let mut hidden = self.raw.matmul(&self.w1)?;
        for i in 0..hidden.rows() {
            for j in 0..hidden.cols() {
                let v = hidden.get(i, j) + self.b1.get(0, j);
                hidden.set(i, j, if v < 0.0 { 0.0 } else { v });
            }
        }
        let mut out = self.raw.add(&hidden.matmul(&self.w2)?)?;
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) + self.b2.get(0, j);
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Same computation recorded on a tape; `ids` are the parameter
    /// leaves for the five groups, so gradients reach all of them.
    pub fn materialize_on_tape(tape: &mut Tape, ids: &MlpPromptNodes) -> Result<NodeId> {
        let pre = tape.matmul(ids.raw, ids.w1)?;
        let pre = tape.add_row(pre, ids.b1)?;
        let act = tape.relu(pre);
        let delta = tape.matmul(act, ids.w2)?;
        let res = tape.add(ids.raw, delta)?;
        tape.add_row(res, ids.b2)
    }

    /// Registers the five parameter groups under `prefix.*` names.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<MlpPromptNodes> {
        Ok(MlpPromptNodes {
            raw: tape.param(&format!("{prefix}.raw"), self.raw.clone())?,
            w1: tape.param(&format!("{prefix}.w1"), self.w1.clone())?,
            b1: tape.param(&format!("{prefix}.b1"), self.b1.clone())?,
            w2: tape.param(&format!("{prefix}.w2"), self.w2.clone())?,
            b2: tape.param(&format!("{prefix}.b2"), self.b2.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpPromptNodes {
    pub raw: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Provenance tag of a queue segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentTag {
    /// Materialized prompt trained for one task.
    TrainedPrompt { task_id: usize },
    /// Principal-row residue left behind by a PCA eviction.
    PcaResidue { generation: usize },
}

impl std::fmt::Display for SegmentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TrainedPrompt { task_id } => write!(f, "trained_prompt:{task_id}"),
            Self::PcaResidue { generation } => write!(f, "pca_residue:{generation}"),
        }
    }
}

impl SegmentTag {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, num) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidData(format!("bad segment tag {s:?}")))?;
        let n: usize = num
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad segment tag {s:?}")))?;
        match kind {
            "trained_prompt" => Ok(Self::TrainedPrompt { task_id: n }),
            "pca_residue" => Ok(Self::PcaResidue { generation: n }),
            _ => Err(Error::InvalidData(format!("bad segment tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub tag: SegmentTag,
    pub rows: Matrix,
}

/// Eviction rule applied when the queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    DqPca,
    Fifo,
    Random { seed: u64 },
}

impl EvictionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DqPca => "dq_pca",
            Self::Fifo => "fifo",
            Self::Random { .. } => "random",
        }
    }
}

/// Ordered prompt segments with bounded total rows.
///
/// Segments appear oldest first. The trainable newest prompt is *not*
/// stored here; it is enqueued (dense) only when its task completes, so
/// everything in the queue is frozen during training.
#[derive(Debug, Clone)]
pub struct PromptQueue {
    segments: Vec<Segment>,
    prompt_len: usize,
    embed_dim: usize,
    /// None for the unbounded prompt-list baseline.
    q_size: Option<usize>,
    pca_generation: usize,
    evictions: u64,
}

impl PromptQueue {
    pub fn bounded(prompt_len: usize, q_size: usize, embed_dim: usize) -> Result<Self> {
        if prompt_len == 0 || q_size == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "prompt_len, q_size and embed_dim must be at least 1".into(),
            ));
        }
        Ok(Self {
            segments: Vec::new(),
            prompt_len,
            embed_dim,
            q_size: Some(q_size),
            pca_generation: 0,
            evictions: 0,
        })
    }

    /// No capacity bound: the progressively growing prompt-list baseline.
    pub fn unbounded(prompt_len: usize, embed_dim: usize) -> Result<Self> {
        if prompt_len == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "prompt_len and embed_dim must be at least 1".into(),
            ));
        }
        Ok(Self {
            segments: Vec::new(),
            prompt_len,
            embed_dim,
            q_size: None,
            pca_generation: 0,
            evictions: 0,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Maximum rows `C = l·q_size`; `None` when unbounded.
    pub fn capacity(&self) -> Option<usize> {
        self.q_size.map(|q| q * self.prompt_len)
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.rows.rows()).sum()
    }

    pub fn is_full(&self) -> bool {
        match self.capacity() {
            Some(c) => self.rows() == c,
            None => false,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn eviction_count(&self) -> u64 {
        self.evictions
    }

    pub(crate) fn restore(
        prompt_len: usize,
        q_size: Option<usize>,
        embed_dim: usize,
        segments: Vec<Segment>,
        pca_generation: usize,
        evictions: u64,
    ) -> Self {
        Self {
            segments,
            prompt_len,
            embed_dim,
            q_size,
            pca_generation,
            evictions,
        }
    }

    pub(crate) fn pca_generation(&self) -> usize {
        self.pca_generation
    }

    /// All rows stacked oldest-first into one `c×d` matrix (`0×d` when
    /// empty).
    pub fn stack(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.segments.iter().map(|s| &s.rows).collect();
        if parts.is_empty() {
            return Matrix::zeros(0, self.embed_dim);
        }
        Matrix::concat_rows(&parts).expect("segments share embed_dim")
    }

    /// Appends a materialized prompt as the newest segment.
    pub fn enqueue(&mut self, prompt: PromptMatrix, task_id: usize) -> Result<()> {
        if prompt.rows() != self.prompt_len {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} rows, queue expects exactly {}",
                prompt.rows(),
                self.prompt_len
            )));
        }
        if prompt.cols() != self.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "prompt dim {} vs queue dim {}",
                prompt.cols(),
                self.embed_dim
            )));
        }
        prompt.check_finite()?;
        if let Some(c) = self.capacity() {
            if self.rows() + self.prompt_len > c {
                return Err(Error::Capacity(format!(
                    "queue holds {} rows of capacity {c}; evict before enqueueing {} more",
                    self.rows(),
                    self.prompt_len
                )));
            }
        }
        self.segments.push(Segment {
            tag: SegmentTag::TrainedPrompt { task_id },
            rows: prompt,
        });
        Ok(())
    }

    /// PCA dequeue: center the stacked rows, decompose, and keep the top
    /// `C−l` principal rows `sigma_i·vt_i` as a single residue segment.
    /// The dropped mean row and the rank-`l` tail are ceded to the shared
    /// prefix prompt.
    pub fn dq_pca(&mut self) -> Result<()> {
        let c = self.require_full("dq_pca")?;
        let keep = c - self.prompt_len;
        self.evictions += 1;
        self.pca_generation += 1;
        if keep == 0 {
            self.segments.clear();
            return Ok(());
        }
        let stacked = self.stack();
        let mean = stacked.mean_row();
        let mut centered = stacked;
        for i in 0..centered.rows() {
            for j in 0..centered.cols() {
                let v = centered.get(i, j) - mean.get(0, j);
                centered.set(i, j, v);
            }
        }
        let decomp = svd(&centered)?;
        let residue = truncate_rank(&decomp, keep)?;
        self.segments = vec![Segment {
            tag: SegmentTag::PcaResidue {
                generation: self.pca_generation,
            },
            rows: residue,
        }];
        Ok(())
    }

    /// Applies the configured eviction rule to a full queue, leaving
    /// `C−l` rows.
    pub fn evict(&mut self, policy: &EvictionPolicy) -> Result<()> {
        match policy {
            EvictionPolicy::DqPca => self.dq_pca(),
            EvictionPolicy::Fifo => {
                self.require_full("fifo eviction")?;
                self.drop_segment(0)
            }
            EvictionPolicy::Random { seed } => {
                self.require_full("random eviction")?;
                // Derive the choice from (seed, eviction count) so each
                // eviction is deterministic and resume-safe without
                // serializing generator state.
                use rand::{Rng, SeedableRng};
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(self.evictions));
                let pick = rng.random_range(0..self.segments.len());
                self.drop_segment(pick)
            }
        }
    }

    fn drop_segment(&mut self, index: usize) -> Result<()> {
        let seg = &self.segments[index];
        if seg.rows.rows() != self.prompt_len {
            return Err(Error::InvalidArgument(format!(
                "segment {index} ({}) has {} rows; fifo/random eviction drops whole {}-row \
                 prompts and cannot run after a PCA residue entered the queue",
                seg.tag,
                seg.rows.rows(),
                self.prompt_len
            )));
        }
        self.segments.remove(index);
        self.evictions += 1;
        Ok(())
    }

    fn require_full(&self, what: &str) -> Result<usize> {
        let c = self.capacity().ok_or_else(|| {
            Error::State(format!("{what} requires a bounded queue"))
        })?;
        if self.rows() != c {
            return Err(Error::State(format!(
                "{what} requires a full queue ({} rows of {c})",
                self.rows()
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompt(value: f64, l: usize, d: usize) -> Matrix {
        Matrix::filled(l, d, value)
    }

    #[test]
    fn enqueue_counts_rows() {
        let mut q = PromptQueue::bounded(10, 5, 4).unwrap();
        q.enqueue(prompt(1.0, 10, 4), 1).unwrap();
        assert_eq!(q.rows(), 10);
        assert_eq!(q.segments().len(), 1);
    }

    #[test]
    fn enqueue_to_capacity_then_error() {
        let mut q = PromptQueue::bounded(2, 3, 4).unwrap();
        for t in 1..=3 {
            q.enqueue(prompt(t as f64, 2, 4), t).unwrap();
        }
        assert_eq!(q.rows(), 6);
        assert!(q.is_full());
        match q.enqueue(prompt(9.0, 2, 4), 4) {
            Err(Error::Capacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_prompt_length_rejected() {
        let mut q = PromptQueue::bounded(3, 2, 4).unwrap();
        assert!(q.enqueue(prompt(1.0, 2, 4), 1).is_err());
    }

    #[test]
    fn fifo_drops_oldest() {
        let mut q = PromptQueue::bounded(2, 3, 2).unwrap();
        for t in 1..=3 {
            q.enqueue(prompt(t as f64, 2, 2), t).unwrap();
        }
        q.evict(&EvictionPolicy::Fifo).unwrap();
        assert_eq!(q.rows(), 4);
        let tags: Vec<String> = q.segments().iter().map(|s| s.tag.to_string()).collect();
        assert_eq!(tags, vec!["trained_prompt:2", "trained_prompt:3"]);
    }

    #[test]
    fn random_eviction_is_deterministic() {
        let build = || {
            let mut q = PromptQueue::bounded(2, 4, 3).unwrap();
            for t in 1..=4 {
                q.enqueue(prompt(t as f64, 2, 3), t).unwrap();
            }
            q
        };
        let policy = EvictionPolicy::Random { seed: 0 };
        let mut a = build();
        let mut b = build();
        a.evict(&policy).unwrap();
        b.evict(&policy).unwrap();
        let tags_a: Vec<String> = a.segments().iter().map(|s| s.tag.to_string()).collect();
        let tags_b: Vec<String> = b.segments().iter().map(|s| s.tag.to_string()).collect();
        assert_eq!(tags_a, tags_b);
        assert_eq!(a.rows(), 6);
    }

    #[test]
    fn evict_requires_full_queue() {
        let mut q = PromptQueue::bounded(2, 3, 2).unwrap();
        q.enqueue(prompt(1.0, 2, 2), 1).unwrap();
        assert!(matches!(q.dq_pca(), Err(Error::State(_))));
        assert!(matches!(q.evict(&EvictionPolicy::Fifo), Err(Error::State(_))));
    }

    #[test]
    fn dq_pca_degenerate_identical_rows() {
        // C=2, l=1: both rows equal, so the centered stack is zero and
        // the single residue row is exactly zero.
        let mut q = PromptQueue::bounded(1, 2, 2).unwrap();
        q.enqueue(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1)
            .unwrap();
        q.enqueue(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), 2)
            .unwrap();
        q.dq_pca().unwrap();
        assert_eq!(q.rows(), 1);
        assert_eq!(q.segments()[0].rows.data(), &[0.0, 0.0]);
        assert!(matches!(
            q.segments()[0].tag,
            SegmentTag::PcaResidue { generation: 1 }
        ));
    }

    #[test]
    fn dq_pca_rank_one_three_rows() {
        // Rows (1,0), (-1,0), (0,0): zero mean, residue keeps (√2, 0) and
        // an exactly zero second row.
        let mut q = PromptQueue::bounded(1, 3, 2).unwrap();
        q.enqueue(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1)
            .unwrap();
        q.enqueue(Matrix::from_rows(&[vec![-1.0, 0.0]]).unwrap(), 2)
            .unwrap();
        q.enqueue(Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(), 3)
            .unwrap();
        q.dq_pca().unwrap();
        let residue = &q.segments()[0].rows;
        assert_eq!(residue.shape(), (2, 2));
        assert!((residue.get(0, 0) - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(residue.get(0, 1), 0.0);
        assert_eq!(residue.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn unbounded_queue_never_full() {
        let mut q = PromptQueue::unbounded(2, 3).unwrap();
        for t in 1..=20 {
            q.enqueue(prompt(t as f64, 2, 3), t).unwrap();
        }
        assert_eq!(q.rows(), 40);
        assert!(!q.is_full());
        assert!(q.capacity().is_none());
    }

    #[test]
    fn materialize_identity_when_mlp_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Matrix::randn(3, 5, 1.0, &mut rng);
        let p = ResidualMlpPrompt {
            raw: raw.clone(),
            w1: Matrix::zeros(5, 7),
            b1: Matrix::zeros(1, 7),
            w2: Matrix::zeros(7, 5),
            b2: Matrix::zeros(1, 5),
        };
        assert_eq!(p.materialize().unwrap(), raw);
    }

    #[test]
    fn materialize_constant_path() {
        // Zero raw rows and b2 = c: every output row is the constant.
        let p = ResidualMlpPrompt {
            raw: Matrix::zeros(4, 3),
            w1: Matrix::zeros(3, 2),
            b1: Matrix::zeros(1, 2),
            w2: Matrix::zeros(2, 3),
            b2: Matrix::filled(1, 3, 0.75),
        };
        let m = p.materialize().unwrap();
        for i in 0..4 {
            assert_eq!(m.row(i), &[0.75, 0.75, 0.75]);
        }
    }

    #[test]
    fn materialize_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ResidualMlpPrompt {
            raw: Matrix::randn(2, 4, 1.0, &mut rng),
            w1: Matrix::randn(4, 8, 0.5, &mut rng),
            b1: Matrix::randn(1, 8, 0.5, &mut rng),
            w2: Matrix::randn(8, 4, 0.5, &mut rng),
            b2: Matrix::randn(1, 4, 0.5, &mut rng),
        };
        let got = p.materialize().unwrap();
        // Independent per-row evaluation.
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = p.raw.get(i, j) + p.b2.get(0, j);
                for h in 0..8 {
                    let mut pre = p.b1.get(0, h);
                    for k in 0..4 {
                        pre += p.raw.get(i, k) * p.w1.get(k, h);
                    }
                    acc += pre.max(0.0) * p.w2.get(h, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn materialize_shape_mismatch_rejected() {
        let p = ResidualMlpPrompt {
            raw: Matrix::zeros(2, 4),
            w1: Matrix::zeros(3, 8),
            b1: Matrix::zeros(1, 8),
            w2: Matrix::zeros(8, 4),
            b2: Matrix::zeros(1, 4),
        };
        assert!(matches!(
            p.materialize(),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn segment_tag_roundtrip() {
        for tag in [
            SegmentTag::TrainedPrompt { task_id: 7 },
            SegmentTag::PcaResidue { generation: 3 },
        ] {
            assert_eq!(SegmentTag::parse(&tag.to_string()).unwrap(), tag);
        }
        assert!(SegmentTag::parse("nonsense").is_err());
    }
}
