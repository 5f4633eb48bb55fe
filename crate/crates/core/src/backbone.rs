//! Small frozen transformer encoder with token embeddings and per-task
//! linear heads.
//!
//! The encoder input is the row concatenation
//! `[prefix prompt; scaled queue; CLS; input token embeddings]`.
//! Prompts are position-agnostic virtual tokens, so learned positional
//! embeddings are added only to the CLS/input block. Classification reads
//! the encoder output at the CLS position through a per-task linear head.
//!
//! The backbone can optionally be warmed up with brief causal next-token
//! training on pretext sequences before it is frozen; with zero warmup
//! steps it is a seeded random frozen encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{adam_step, stable_softmax, AdamState, Matrix, NodeId, Tape};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 64,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ffn_hidden == 0
            || self.max_seq_len == 0
        {
            return Err(Error::InvalidConfig(
                "backbone dimensions must all be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Pretext corpus and step budget for the optional warmup phase.
#[derive(Debug, Clone, Default)]
pub struct Pretext {
    pub sequences: Vec<Vec<usize>>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Pretext {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    emb: Matrix,
    pos: Matrix,
    cls: Matrix,
    layers: Vec<LayerWeights>,
    frozen: bool,
    /// Next-token loss per warmup step (empty without warmup).
    pretext_trace: Vec<f64>,
}

fn init_weights(cfg: &BackboneConfig) -> (Matrix, Matrix, Matrix, Vec<LayerWeights>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let emb = Matrix::randn(cfg.vocab_size, d, 0.02, &mut rng);
    let pos = Matrix::randn(cfg.max_seq_len, d, 0.02, &mut rng);
    let cls = Matrix::randn(1, d, 0.02, &mut rng);
    let attn_std = (1.0 / d as f64).sqrt();
    let ffn_in_std = (2.0 / (d + cfg.ffn_hidden) as f64).sqrt();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: Matrix::randn(d, d, attn_std, &mut rng),
            wk: Matrix::randn(d, d, attn_std, &mut rng),
            wv: Matrix::randn(d, d, attn_std, &mut rng),
            wo: Matrix::randn(d, d, attn_std, &mut rng),
            w1: Matrix::randn(d, cfg.ffn_hidden, ffn_in_std, &mut rng),
            b1: Matrix::zeros(1, cfg.ffn_hidden),
            w2: Matrix::randn(cfg.ffn_hidden, d, ffn_in_std, &mut rng),
            b2: Matrix::zeros(1, d),
        })
        .collect();
    (emb, pos, cls, layers)
}

/// Builds the encoder, optionally warms it up on pretext sequences, and
/// freezes it permanently.
pub fn build_backbone(cfg: &BackboneConfig, pretext: &Pretext) -> Result<FrozenBackbone> {
    cfg.validate()?;
    let (emb, pos, cls, layers) = init_weights(cfg);
    let mut bb = FrozenBackbone {
        cfg: cfg.clone(),
        emb,
        pos,
        cls,
        layers,
        frozen: false,
        pretext_trace: Vec::new(),
    };
    if pretext.steps > 0 && !pretext.sequences.is_empty() {
        warmup(&mut bb, pretext)?;
    }
    bb.frozen = true;
    Ok(bb)
}

/// Causal next-token training over the pretext corpus with a tied output
/// projection (the transposed embedding table). All encoder weights are
/// trainable during warmup only.
fn warmup(bb: &mut FrozenBackbone, pretext: &Pretext) -> Result<()> {
    let batch = pretext.batch_size.max(1);
    for seq in &pretext.sequences {
        if seq.len() < 2 {
            return Err(Error::InvalidData(
                "pretext sequences need at least two tokens".into(),
            ));
        }
        if seq.len() > bb.cfg.max_seq_len {
            return Err(Error::InvalidData(format!(
                "pretext sequence of {} tokens exceeds max_seq_len {}",
                seq.len(),
                bb.cfg.max_seq_len
            )));
        }
    }

    let names = bb.weight_names();
    let mut adam: Vec<AdamState> = bb
        .weight_values()
        .iter()
        .map(|m| AdamState::new(m.rows(), m.cols(), pretext.lr))
        .collect();

    let mut cursor = 0usize;
    for _ in 0..pretext.steps {
        let mut tape = Tape::new();
        let nodes = bb.nodes_on_tape(&mut tape, true)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..batch {
            let seq = &pretext.sequences[cursor % pretext.sequences.len()];
            cursor += 1;
            let n = seq.len();
            let tok = tape.gather_rows(nodes.emb, seq)?;
            let pslice = tape.slice_rows(nodes.pos, 0, n)?;
            let x = tape.add(tok, pslice)?;
            let h = encode_stack(&mut tape, &bb.cfg, &nodes, x, true)?;
            let ctx = tape.slice_rows(h, 0, n - 1)?;
            rows.push(ctx);
            labels.extend_from_slice(&seq[1..]);
        }
        let all = tape.concat_rows(&rows)?;
        let embt = tape.transpose(nodes.emb);
        let logits = tape.matmul(all, embt)?;
        let loss = tape.cross_entropy_mean(logits, &labels)?;
        bb.pretext_trace.push(tape.scalar(loss));
        let grads = tape.backward(loss)?;
        for (i, name) in names.iter().enumerate() {
            let g = grads.expect(name).clone();
            adam_step(&mut adam[i], bb.weight_value_mut(i), &g)?;
        }
    }
    Ok(())
}

/// Tape-node handles for the backbone weights.
pub struct BackboneNodes {
    pub emb: NodeId,
    pub pos: NodeId,
    pub cls: NodeId,
    layers: Vec<LayerNodes>,
}

struct LayerNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn embedding(&self) -> &Matrix {
        &self.emb
    }

    pub fn pretext_trace(&self) -> &[f64] {
        &self.pretext_trace
    }

    /// Total encoder rows a forward pass with these segments consumes.
    pub fn sequence_rows(&self, prefix_rows: usize, queue_rows: usize, input_len: usize) -> usize {
        prefix_rows + queue_rows + 1 + input_len
    }

    fn weight_names(&self) -> Vec<String> {
        let mut names = vec!["bb.emb".to_string(), "bb.pos".to_string(), "bb.cls".to_string()];
        for l in 0..self.layers.len() {
            for w in ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"] {
                names.push(format!("bb.l{l}.{w}"));
            }
        }
        names
    }

    fn weight_values(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.emb, &self.pos, &self.cls];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out
    }

    fn weight_value_mut(&mut self, index: usize) -> &mut Matrix {
        let mut refs: Vec<&mut Matrix> = vec![&mut self.emb, &mut self.pos, &mut self.cls];
        for l in &mut self.layers {
            refs.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1, &mut l.w2,
                &mut l.b2,
            ]);
        }
        refs.swap_remove(index)
    }

    /// Checksum-style fingerprint over all weights; used by tests to
    /// verify frozen-ness bit for bit.
    pub fn weights_clone(&self) -> Vec<Matrix> {
        self.weight_values().into_iter().cloned().collect()
    }

    /// Puts every weight on the tape, as parameters during warmup and as
    /// constants afterwards.
    fn nodes_on_tape(&self, tape: &mut Tape, trainable: bool) -> Result<BackboneNodes> {
        let names = self.weight_names();
        let values = self.weight_values();
        let mut ids = Vec::with_capacity(values.len());
        for (name, value) in names.iter().zip(values) {
            let id = if trainable {
                tape.param(name, value.clone())?
            } else {
                tape.constant(value.clone())
            };
            ids.push(id);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let base = 3 + l * 8;
            layers.push(LayerNodes {
                wq: ids[base],
                wk: ids[base + 1],
                wv: ids[base + 2],
                wo: ids[base + 3],
                w1: ids[base + 4],
                b1: ids[base + 5],
                w2: ids[base + 6],
                b2: ids[base + 7],
            });
        }
        Ok(BackboneNodes {
            emb: ids[0],
            pos: ids[1],
            cls: ids[2],
            layers,
        })
    }

    /// Frozen weights as tape constants.
    pub fn constants_on_tape(&self, tape: &mut Tape) -> Result<BackboneNodes> {
        self.nodes_on_tape(tape, false)
    }

    fn check_capacity(&self, prefix_rows: usize, queue_rows: usize, input_len: usize) -> Result<()> {
        let total = self.sequence_rows(prefix_rows, queue_rows, input_len);
        if total > self.cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {total} rows (prefix {prefix_rows} + queue {queue_rows} + input \
                 {input_len} + 1 readout) exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        Ok(())
    }

    /// Records the classification forward pass on `tape` and returns the
    /// `1×d` encoder output at the CLS position.
    pub fn encode_cls_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &BackboneNodes,
        prefix: Option<NodeId>,
        queue: Option<NodeId>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let prefix_rows = prefix.map_or(0, |p| tape.value(p).rows());
        let queue_rows = queue.map_or(0, |q| tape.value(q).rows());
        self.check_capacity(prefix_rows, queue_rows, tokens.len())?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }

        let tok = tape.gather_rows(nodes.emb, tokens)?;
        let cls_block = tape.concat_rows(&[nodes.cls, tok])?;
        let pslice = tape.slice_rows(nodes.pos, 0, tokens.len() + 1)?;
        let x_in = tape.add(cls_block, pslice)?;

        let mut parts = Vec::new();
        if let Some(p) = prefix {
            parts.push(p);
        }
        if let Some(q) = queue {
            parts.push(q);
        }
        parts.push(x_in);
        let x = tape.concat_rows(&parts)?;
        let h = encode_stack(tape, &self.cfg, nodes, x, false)?;
        tape.slice_rows(h, prefix_rows + queue_rows, 1)
    }

    /// Inference forward: logits of length `K` for one token sequence.
    /// Runs the exact tape computation on a scratch tape, so eval and
    /// training numerics are identical.
    pub fn forward(
        &self,
        prefix: Option<&Matrix>,
        scaled_queue: Option<&Matrix>,
        tokens: &[usize],
        head: &TaskHead,
    ) -> Result<Vec<f64>> {
        let h = self.forward_h_cls(prefix, scaled_queue, tokens)?;
        let logits = h.matmul(&head.alpha)?;
        Ok(logits.row(0).to_vec())
    }

    /// Encoder output at the CLS position (`1×d`), inference path.
    pub fn forward_h_cls(
        &self,
        prefix: Option<&Matrix>,
        scaled_queue: Option<&Matrix>,
        tokens: &[usize],
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = self.constants_on_tape(&mut tape)?;
        let prefix_id = match prefix {
            Some(p) if p.rows() > 0 => Some(tape.constant(p.clone())),
            _ => None,
        };
        let queue_id = match scaled_queue {
            Some(q) if q.rows() > 0 => Some(tape.constant(q.clone())),
            _ => None,
        };
        let h = self.encode_cls_on_tape(&mut tape, &nodes, prefix_id, queue_id, tokens)?;
        Ok(tape.value(h).clone())
    }
}

fn encode_stack(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    nodes: &BackboneNodes,
    mut x: NodeId,
    causal: bool,
) -> Result<NodeId> {
    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &nodes.layers {
        let xn = tape.layer_norm(x, LN_EPS);
        let q = tape.matmul(xn, layer.wq)?;
        let k = tape.matmul(xn, layer.wk)?;
        let v = tape.matmul(xn, layer.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = if causal {
                tape.causal_row_softmax(scaled)?
            } else {
                tape.row_softmax(scaled)
            };
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn = tape.matmul(merged, layer.wo)?;
        x = tape.add(x, attn)?;

        let xn2 = tape.layer_norm(x, LN_EPS);
        let pre = tape.matmul(xn2, layer.w1)?;
        let pre = tape.add_row(pre, layer.b1)?;
        let act = tape.relu(pre);
        let ffn = tape.matmul(act, layer.w2)?;
        let ffn = tape.add_row(ffn, layer.b2)?;
        x = tape.add(x, ffn)?;
    }
    Ok(tape.layer_norm(x, LN_EPS))
}

/// Per-task linear classification head.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub task_id: usize,
    pub k: usize,
    /// `d_model×K`.
    pub alpha: Matrix,
}

impl TaskHead {
    pub fn init(task_id: usize, d_model: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            task_id,
            k,
            alpha: Matrix::randn(d_model, k, 0.02, rng),
        }
    }
}

/// Softmax over logits: positive entries summing to one.
pub fn predict_proba(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "predict_proba on empty logits");
    stable_softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 24,
            max_seq_len: 32,
            seed: 3,
        }
    }

    #[test]
    fn zero_pretext_builds_are_bit_identical() {
        let cfg = tiny_cfg();
        let a = build_backbone(&cfg, &Pretext::none()).unwrap();
        let b = build_backbone(&cfg, &Pretext::none()).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a.weights_clone(), b.weights_clone());
    }

    #[test]
    fn different_seeds_differ() {
        let a = build_backbone(&tiny_cfg(), &Pretext::none()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.seed = 4;
        let b = build_backbone(&cfg, &Pretext::none()).unwrap();
        assert_ne!(a.weights_clone(), b.weights_clone());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 3; // 16 % 3 != 0
        assert!(matches!(
            build_backbone(&cfg, &Pretext::none()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn forward_is_deterministic_and_sized() {
        let bb = build_backbone(&tiny_cfg(), &Pretext::none()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TaskHead::init(0, 16, 2, &mut rng);
        let prefix = Matrix::randn(3, 16, 0.02, &mut rng);
        let queue = Matrix::randn(4, 16, 0.02, &mut rng);
        let tokens = [1usize, 5, 9, 2];
        let a = bb.forward(Some(&prefix), Some(&queue), &tokens, &head).unwrap();
        let b = bb.forward(Some(&prefix), Some(&queue), &tokens, &head).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prompts_reduce_to_plain_classification() {
        let bb = build_backbone(&tiny_cfg(), &Pretext::none()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TaskHead::init(0, 16, 2, &mut rng);
        let tokens = [1usize, 5, 9];
        let with_none = bb.forward(None, None, &tokens, &head).unwrap();
        let empty = Matrix::zeros(0, 16);
        let with_empty = bb.forward(Some(&empty), Some(&empty), &tokens, &head).unwrap();
        assert_eq!(with_none, with_empty);
    }

    #[test]
    fn capacity_error_names_segments() {
        let bb = build_backbone(&tiny_cfg(), &Pretext::none()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TaskHead::init(0, 16, 2, &mut rng);
        let prefix = Matrix::zeros(20, 16);
        let queue = Matrix::zeros(10, 16);
        let tokens = [1usize; 5];
        match bb.forward(Some(&prefix), Some(&queue), &tokens, &head) {
            Err(Error::Capacity(msg)) => {
                assert!(msg.contains("prefix 20"), "{msg}");
                assert!(msg.contains("queue 10"), "{msg}");
                assert!(msg.contains("input 5"), "{msg}");
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn shape_accounting_77_rows() {
        let cfg = BackboneConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            ffn_hidden: 32,
            max_seq_len: 80,
            seed: 1,
        };
        let bb = build_backbone(&cfg, &Pretext::none()).unwrap();
        assert_eq!(bb.sequence_rows(10, 50, 16), 77);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TaskHead::init(0, 32, 2, &mut rng);
        let prefix = Matrix::randn(10, 32, 0.02, &mut rng);
        let queue = Matrix::randn(50, 32, 0.02, &mut rng);
        let tokens: Vec<usize> = (0..16).collect();
        let logits = bb.forward(Some(&prefix), Some(&queue), &tokens, &head).unwrap();
        assert_eq!(logits.len(), 2);
    }

    #[test]
    fn predict_proba_closed_forms() {
        let p = predict_proba(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let p = predict_proba(&[3.0f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);

        let base = predict_proba(&[0.3, -1.2, 2.0]);
        let shifted = predict_proba(&[0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5]);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = base.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(base.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn warmup_decreases_pretext_loss() {
        let cfg = tiny_cfg();
        // Bigram-structured pretext: token t is followed by (t*7+3) mod 20.
        let sequences: Vec<Vec<usize>> = (0..8)
            .map(|s| {
                let mut tok = s % 20;
                let mut seq = Vec::with_capacity(12);
                for _ in 0..12 {
                    seq.push(tok);
                    tok = (tok * 7 + 3) % 20;
                }
                seq
            })
            .collect();
        let pretext = Pretext {
            sequences,
            steps: 60,
            lr: 3e-3,
            batch_size: 4,
        };
        let bb = build_backbone(&cfg, &pretext).unwrap();
        let trace = bb.pretext_trace();
        assert_eq!(trace.len(), 60);
        assert!(
            trace[trace.len() - 1] < trace[0],
            "warmup loss did not decrease: {} -> {}",
            trace[0],
            trace[trace.len() - 1]
        );
        assert!(bb.is_frozen());
    }
}
