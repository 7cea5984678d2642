//! Decoder-only transformer with optional per-layer prefix key/values,
//! from-scratch pretraining, and the backbone checkpoint format.
//!
//! The backbone never owns a graph: each training step binds the weight
//! arrays into a fresh tape (as parameters or constants), runs forward
//! and backward there, and applies updates to the master copy outside.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{encode_dialogue_stream, Corpus, EncodedSample};
use crate::graph::{Graph, NodeId};
use crate::optim::{AdamW, LinearSchedule, Optimizer};
use crate::tensor::Array;
use crate::tokenizer::Vocab;
use crate::{PktError, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PKTB";
const CHECKPOINT_VERSION: u32 = 1;
const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_context: usize,
}

impl BackboneConfig {
    /// Trains in minutes on one core while leaving room for prefix
    /// positions and the parameter-accounting demo.
    pub fn desk_default() -> Self {
        BackboneConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            max_context: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_context", self.max_context),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(PktError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(PktError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn as_u32s(&self) -> [u32; 6] {
        [
            self.vocab_size as u32,
            self.d_model as u32,
            self.n_layers as u32,
            self.n_heads as u32,
            self.d_ffn as u32,
            self.max_context as u32,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array,
    pub ln1_b: Array,
    pub wq: Array,
    pub bq: Array,
    pub wk: Array,
    pub bk: Array,
    pub wv: Array,
    pub bv: Array,
    pub wo: Array,
    pub bo: Array,
    pub ln2_g: Array,
    pub ln2_b: Array,
    pub w_ff1: Array,
    pub b_ff1: Array,
    pub w_ff2: Array,
    pub b_ff2: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub token_emb: Array,
    pub pos_emb: Array,
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: Array,
    pub ln_f_b: Array,
    pub w_out: Array,
    pub b_out: Array,
}

impl BackboneWeights {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Array::zeros(vec![d]),
                ln1_b: Array::zeros(vec![d]),
                wq: Array::zeros(vec![d, d]),
                bq: Array::zeros(vec![d]),
                wk: Array::zeros(vec![d, d]),
                bk: Array::zeros(vec![d]),
                wv: Array::zeros(vec![d, d]),
                bv: Array::zeros(vec![d]),
                wo: Array::zeros(vec![d, d]),
                bo: Array::zeros(vec![d]),
                ln2_g: Array::zeros(vec![d]),
                ln2_b: Array::zeros(vec![d]),
                w_ff1: Array::zeros(vec![d, cfg.d_ffn]),
                b_ff1: Array::zeros(vec![cfg.d_ffn]),
                w_ff2: Array::zeros(vec![cfg.d_ffn, d]),
                b_ff2: Array::zeros(vec![d]),
            })
            .collect();
        BackboneWeights {
            token_emb: Array::zeros(vec![cfg.vocab_size, d]),
            pos_emb: Array::zeros(vec![cfg.max_context, d]),
            layers,
            ln_f_g: Array::zeros(vec![d]),
            ln_f_b: Array::zeros(vec![d]),
            w_out: Array::zeros(vec![d, cfg.vocab_size]),
            b_out: Array::zeros(vec![cfg.vocab_size]),
        }
    }

    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit norm gains.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.token_emb.fill_normal(&mut rng, 0.02);
        w.pos_emb.fill_normal(&mut rng, 0.02);
        for layer in &mut w.layers {
            for gain in [&mut layer.ln1_g, &mut layer.ln2_g] {
                gain.data_mut().fill(1.0);
            }
            for mat in [
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.w_ff1,
                &mut layer.w_ff2,
            ] {
                mat.fill_normal(&mut rng, 0.02);
            }
        }
        w.ln_f_g.data_mut().fill(1.0);
        w.w_out.fill_normal(&mut rng, 0.02);
        w
    }

    /// Serialization order: token_emb, pos_emb, then per layer ln1 g/b,
    /// wq, bq, wk, bk, wv, bv, wo, bo, ln2 g/b, w_ff1, b_ff1, w_ff2,
    /// b_ff2, then ln_f g/b, w_out, b_out.
    pub fn weight_list(&self) -> Vec<&Array> {
        let mut list = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            list.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w_ff1, &l.b_ff1, &l.w_ff2, &l.b_ff2,
            ]);
        }
        list.extend([&self.ln_f_g, &self.ln_f_b, &self.w_out, &self.b_out]);
        list
    }

    pub fn weight_list_mut(&mut self) -> Vec<&mut Array> {
        let mut list: Vec<&mut Array> = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            list.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b,
                &mut l.w_ff1, &mut l.b_ff1, &mut l.w_ff2, &mut l.b_ff2,
            ]);
        }
        list.extend([
            &mut self.ln_f_g,
            &mut self.ln_f_b,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        list
    }

    pub fn param_count(&self) -> usize {
        self.weight_list().iter().map(|a| a.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: BackboneWeights,
    pub vocab: Vocab,
}

impl Backbone {
    /// SHA-256 over the six config words, every weight as little-endian
    /// f64 bytes in serialization order, and the vocabulary JSON.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.config.as_u32s() {
            hasher.update(v.to_le_bytes());
        }
        for w in self.weights.weight_list() {
            for &x in w.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher.update(serde_json::to_vec(self.vocab.words()).expect("vocab serializes"));
        hasher.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in self.config.as_u32s() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.digest());
        for w in self.weights.weight_list() {
            for &x in w.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&serde_json::to_vec(self.vocab.words())?);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Backbone> {
        let buf = std::fs::read(path)?;
        let header = 4 + 4 + 6 * 4 + 32;
        if buf.len() < header {
            return Err(PktError::Data(format!(
                "checkpoint too short: {} bytes",
                buf.len()
            )));
        }
        if &buf[0..4] != CHECKPOINT_MAGIC {
            return Err(PktError::Data("not a backbone checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PktError::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut words = [0u32; 6];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        }
        let config = BackboneConfig {
            vocab_size: words[0] as usize,
            d_model: words[1] as usize,
            n_layers: words[2] as usize,
            n_heads: words[3] as usize,
            d_ffn: words[4] as usize,
            max_context: words[5] as usize,
        };
        config.validate()?;
        let stored_digest = &buf[32..64];
        let mut weights = BackboneWeights::zeros(&config);
        let mut offset = header;
        for arr in weights.weight_list_mut() {
            let need = arr.len() * 8;
            if offset + need > buf.len() {
                return Err(PktError::Data("checkpoint truncated in weight block".into()));
            }
            for (i, chunk) in buf[offset..offset + need].chunks_exact(8).enumerate() {
                arr.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            offset += need;
        }
        let vocab_words: Vec<String> = serde_json::from_slice(&buf[offset..])
            .map_err(|e| PktError::Data(format!("checkpoint vocabulary: {e}")))?;
        let vocab = Vocab::from_words(vocab_words)?;
        if vocab.size() != config.vocab_size {
            return Err(PktError::Data(format!(
                "vocabulary has {} words but config says {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let model = Backbone {
            config,
            weights,
            vocab,
        };
        if model.digest() != *stored_digest {
            return Err(PktError::Data("checkpoint digest mismatch".into()));
        }
        Ok(model)
    }
}

pub struct BoundLayer {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
}

/// Backbone weights registered on a tape, either all-trainable (full
/// fine-tuning) or all-constant (prefix training, inference).
pub struct BoundBackbone {
    pub token_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<BoundLayer>,
    pub ln_f_g: NodeId,
    pub ln_f_b: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl BoundBackbone {
    pub fn bind(g: &mut Graph, w: &BackboneWeights, trainable: bool) -> BoundBackbone {
        let reg = |arr: &Array, g: &mut Graph| {
            if trainable {
                g.param(arr.clone())
            } else {
                g.constant(arr.clone())
            }
        };
        let token_emb = reg(&w.token_emb, g);
        let pos_emb = reg(&w.pos_emb, g);
        let layers = w
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_g: reg(&l.ln1_g, g),
                ln1_b: reg(&l.ln1_b, g),
                wq: reg(&l.wq, g),
                bq: reg(&l.bq, g),
                wk: reg(&l.wk, g),
                bk: reg(&l.bk, g),
                wv: reg(&l.wv, g),
                bv: reg(&l.bv, g),
                wo: reg(&l.wo, g),
                bo: reg(&l.bo, g),
                ln2_g: reg(&l.ln2_g, g),
                ln2_b: reg(&l.ln2_b, g),
                w_ff1: reg(&l.w_ff1, g),
                b_ff1: reg(&l.b_ff1, g),
                w_ff2: reg(&l.w_ff2, g),
                b_ff2: reg(&l.b_ff2, g),
            })
            .collect();
        let ln_f_g = reg(&w.ln_f_g, g);
        let ln_f_b = reg(&w.ln_f_b, g);
        let w_out = reg(&w.w_out, g);
        let b_out = reg(&w.b_out, g);
        BoundBackbone {
            token_emb,
            pos_emb,
            layers,
            ln_f_g,
            ln_f_b,
            w_out,
            b_out,
        }
    }

    /// Node ids in weight serialization order, for gradient collection.
    pub fn node_list(&self) -> Vec<NodeId> {
        let mut list = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            list.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                l.ln2_b, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ]);
        }
        list.extend([self.ln_f_g, self.ln_f_b, self.w_out, self.b_out]);
        list
    }
}

#[derive(Debug)]
pub struct ForwardOut {
    /// [seq_len, vocab_size] pre-softmax scores.
    pub logits: NodeId,
    /// One attention-probability node per layer per head, rows over
    /// prefix positions then preceding tokens.
    pub attn: Vec<NodeId>,
}

/// Causal mask over `l_prefix` prefix columns followed by `t` token
/// columns: every query row sees all prefix positions and tokens up to
/// and including itself.
fn causal_mask(t: usize, l_prefix: usize) -> Array {
    let cols = l_prefix + t;
    let mut data = vec![MASK_OFF; t * cols];
    for row in 0..t {
        for col in 0..l_prefix + row + 1 {
            data[row * cols + col] = 0.0;
        }
    }
    Array::new(vec![t, cols], data).expect("mask dims positive")
}

/// Full forward pass. `prefix` supplies one (key rows, value rows) pair
/// of [L, d_model] nodes per layer; those rows join attention ahead of
/// the token positions at every layer, exactly like extra context the
/// model cannot write to.
pub fn forward_lm(
    g: &mut Graph,
    bb: &BoundBackbone,
    cfg: &BackboneConfig,
    prefix: Option<&[(NodeId, NodeId)]>,
    ids: &[usize],
) -> Result<ForwardOut> {
    let t = ids.len();
    if t == 0 {
        return Err(PktError::Data("forward on empty token sequence".into()));
    }
    let l_prefix = match prefix {
        Some(layers) => {
            if layers.len() != cfg.n_layers {
                return Err(PktError::Shape {
                    op: "forward",
                    detail: format!(
                        "prefix covers {} layers, model has {}",
                        layers.len(),
                        cfg.n_layers
                    ),
                });
            }
            g.value(layers[0].0).rows()
        }
        None => 0,
    };
    if l_prefix + t > cfg.max_context {
        return Err(PktError::Data(format!(
            "sequence of {t} tokens plus {l_prefix} prefix positions exceeds context {}",
            cfg.max_context
        )));
    }
    let d = cfg.d_model;
    let d_head = d / cfg.n_heads;
    let positions: Vec<usize> = (0..t).collect();

    let tok = g.embedding(bb.token_emb, ids)?;
    let pos = g.embedding(bb.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    let mask = g.constant(causal_mask(t, l_prefix));
    let mut attn_nodes = Vec::with_capacity(cfg.n_layers * cfg.n_heads);

    for (li, layer) in bb.layers.iter().enumerate() {
        let normed = g.layer_norm_rows(x, layer.ln1_g, layer.ln1_b)?;
        let q = g.matmul(normed, layer.wq)?;
        let q = g.add_bias(q, layer.bq)?;
        let k = g.matmul(normed, layer.wk)?;
        let k = g.add_bias(k, layer.bk)?;
        let v = g.matmul(normed, layer.wv)?;
        let v = g.add_bias(v, layer.bv)?;
        let (k, v) = match prefix {
            Some(layers) => {
                let (pk, pv) = layers[li];
                (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?)
            }
            None => (k, v),
        };
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt());
            let scores = g.add(scores, mask)?;
            let probs = g.softmax_rows(scores);
            attn_nodes.push(probs);
            head_outs.push(g.matmul(probs, vh)?);
        }
        let mut merged = head_outs[0];
        for &h in &head_outs[1..] {
            merged = g.concat_cols(merged, h)?;
        }
        let proj = g.matmul(merged, layer.wo)?;
        let proj = g.add_bias(proj, layer.bo)?;
        x = g.add(x, proj)?;

        let normed2 = g.layer_norm_rows(x, layer.ln2_g, layer.ln2_b)?;
        let ff = g.matmul(normed2, layer.w_ff1)?;
        let ff = g.add_bias(ff, layer.b_ff1)?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, layer.w_ff2)?;
        let ff = g.add_bias(ff, layer.b_ff2)?;
        x = g.add(x, ff)?;
    }

    let final_norm = g.layer_norm_rows(x, bb.ln_f_g, bb.ln_f_b)?;
    let logits = g.matmul(final_norm, bb.w_out)?;
    let logits = g.add_bias(logits, bb.b_out)?;
    Ok(ForwardOut {
        logits,
        attn: attn_nodes,
    })
}

/// Mean next-token cross-entropy over the target-response positions of an
/// encoded sample; history positions carry zero weight.
pub fn lm_loss(
    g: &mut Graph,
    bb: &BoundBackbone,
    cfg: &BackboneConfig,
    prefix: Option<&[(NodeId, NodeId)]>,
    sample: &EncodedSample,
) -> Result<NodeId> {
    let t = sample.ids.len();
    if sample.target_start == 0 || sample.target_start >= t {
        return Err(PktError::Data(format!(
            "sample has no target positions (target_start {} of {t} tokens)",
            sample.target_start
        )));
    }
    let out = forward_lm(g, bb, cfg, prefix, &sample.ids)?;
    let mut targets = vec![0usize; t];
    let mut weights = vec![0.0; t];
    for i in 0..t - 1 {
        targets[i] = sample.ids[i + 1];
        if i + 1 >= sample.target_start {
            weights[i] = 1.0;
        }
    }
    g.cross_entropy_rows(out.logits, &targets, &weights)
}

/// Next-token cross-entropy over every position of a raw stream, for
/// generic pretraining.
pub fn stream_loss(
    g: &mut Graph,
    bb: &BoundBackbone,
    cfg: &BackboneConfig,
    ids: &[usize],
) -> Result<NodeId> {
    if ids.len() < 2 {
        return Err(PktError::Data("stream needs at least 2 tokens".into()));
    }
    let out = forward_lm(g, bb, cfg, None, ids)?;
    let t = ids.len();
    let mut targets = vec![0usize; t];
    let mut weights = vec![0.0; t];
    for i in 0..t - 1 {
        targets[i] = ids[i + 1];
        weights[i] = 1.0;
    }
    g.cross_entropy_rows(out.logits, &targets, &weights)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        PretrainConfig {
            epochs,
            lr: 1e-3,
            batch_size: 8,
            warmup_steps: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub held_out_loss: f64,
    pub steps: usize,
}

/// Train a fresh backbone on every dialogue in the corpus as plain token
/// streams. Every tenth stream is held out for the final loss estimate.
/// A non-finite training loss aborts with the step index.
pub fn pretrain_backbone(
    corpus: &Corpus,
    cfg: &BackboneConfig,
    pcfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    cfg.validate()?;
    if corpus.personas.is_empty() {
        return Err(PktError::Data("pretraining corpus is empty".into()));
    }
    let mut texts: Vec<&str> = Vec::new();
    for rec in &corpus.personas {
        for sent in &rec.description {
            texts.push(sent);
        }
        for dialogue in &rec.dialogues {
            for turn in dialogue {
                texts.push(&turn.text);
            }
        }
    }
    let vocab = Vocab::build(texts.iter().copied(), cfg.vocab_size)?;
    let cfg = BackboneConfig {
        vocab_size: vocab.size(),
        ..*cfg
    };

    let mut streams: Vec<Vec<usize>> = Vec::new();
    for rec in &corpus.personas {
        for dialogue in &rec.dialogues {
            let ids = encode_dialogue_stream(&vocab, dialogue, cfg.max_context);
            if ids.len() >= 2 {
                streams.push(ids);
            }
        }
    }
    if streams.is_empty() {
        return Err(PktError::Data("no usable dialogue streams in corpus".into()));
    }
    let mut train_streams = Vec::new();
    let mut held_out = Vec::new();
    for (i, s) in streams.into_iter().enumerate() {
        if i % 10 == 9 {
            held_out.push(s);
        } else {
            train_streams.push(s);
        }
    }
    if held_out.is_empty() {
        held_out = train_streams.clone();
    }

    let mut weights = BackboneWeights::init(&cfg, pcfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_batches = train_streams.len().div_ceil(pcfg.batch_size);
    let total_steps = pcfg.epochs * n_batches;
    let schedule = LinearSchedule::new(pcfg.lr, pcfg.warmup_steps, total_steps);
    let mut opt = AdamW::default();
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    let mut step = 0usize;

    for _ in 0..pcfg.epochs {
        let mut order: Vec<usize> = (0..train_streams.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(pcfg.batch_size) {
            let mut g = Graph::new();
            let bound = BoundBackbone::bind(&mut g, &weights, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                losses.push(stream_loss(&mut g, &bound, &cfg, &train_streams[si])?);
            }
            let loss = g.mean_scalars(&losses)?;
            let loss_val = g.value(loss).scalar_value();
            if !loss_val.is_finite() {
                return Err(PktError::Numeric(format!(
                    "pretraining diverged at step {step}: loss {loss_val}"
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Array> = bound.node_list().iter().map(|&id| g.grad(id)).collect();
            let mut params: Vec<Array> = weights.weight_list().into_iter().cloned().collect();
            opt.step(&mut params, &grads, schedule.lr(step))?;
            for (dst, src) in weights.weight_list_mut().into_iter().zip(params) {
                *dst = src;
            }
            epoch_loss += loss_val * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }

    let model = Backbone {
        config: cfg,
        weights,
        vocab,
    };
    let held_out_loss = mean_stream_loss(&model, &held_out)?;
    Ok((
        model,
        PretrainReport {
            epoch_losses,
            held_out_loss,
            steps: step,
        },
    ))
}

/// Mean per-stream cross-entropy without gradient bookkeeping.
pub fn mean_stream_loss(model: &Backbone, streams: &[Vec<usize>]) -> Result<f64> {
    if streams.is_empty() {
        return Err(PktError::Data("no streams to evaluate".into()));
    }
    let mut total = 0.0;
    for ids in streams {
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &model.weights, false);
        let loss = stream_loss(&mut g, &bound, &model.config, ids)?;
        total += g.value(loss).scalar_value();
    }
    Ok(total / streams.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            max_context: 32,
        }
    }

    fn tiny_vocab(n: usize) -> Vocab {
        let text: Vec<String> = (0..n - 4).map(|i| format!("w{i}")).collect();
        let joined = text.join(" ");
        Vocab::build([joined.as_str()], n).unwrap()
    }

    fn random_prefix(g: &mut Graph, cfg: &BackboneConfig, l: usize, seed: u64) -> Vec<(NodeId, NodeId)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.n_layers)
            .map(|_| {
                let mut k = Array::zeros(vec![l, cfg.d_model]);
                let mut v = Array::zeros(vec![l, cfg.d_model]);
                k.fill_normal(&mut rng, 0.5);
                v.fill_normal(&mut rng, 0.5);
                (g.param(k), g.param(v))
            })
            .collect()
    }

    #[test]
    fn config_validates_head_divisibility() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_loss_ln_v() {
        let cfg = tiny_config();
        let weights = BackboneWeights::zeros(&cfg);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let sample = EncodedSample {
            ids: vec![1, 5, 6, 7],
            target_start: 1,
        };
        let loss = lm_loss(&mut g, &bound, &cfg, None, &sample).unwrap();
        let expected = (cfg.vocab_size as f64).ln();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 3);
        let run = || {
            let mut g = Graph::new();
            let bound = BoundBackbone::bind(&mut g, &weights, false);
            let prefix = random_prefix(&mut g, &cfg, 4, 77);
            let out = forward_lm(&mut g, &bound, &cfg, Some(&prefix), &[1, 2, 3]).unwrap();
            g.value(out.logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prefix_changes_output_but_absence_matches_plain() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 3);
        let plain = {
            let mut g = Graph::new();
            let bound = BoundBackbone::bind(&mut g, &weights, false);
            let out = forward_lm(&mut g, &bound, &cfg, None, &[4, 5]).unwrap();
            g.value(out.logits).data().to_vec()
        };
        let plain_again = {
            let mut g = Graph::new();
            let bound = BoundBackbone::bind(&mut g, &weights, false);
            let out = forward_lm(&mut g, &bound, &cfg, None, &[4, 5]).unwrap();
            g.value(out.logits).data().to_vec()
        };
        assert_eq!(plain, plain_again, "no-prefix forward must be bit-stable");
        let with_prefix = {
            let mut g = Graph::new();
            let bound = BoundBackbone::bind(&mut g, &weights, false);
            let prefix = random_prefix(&mut g, &cfg, 2, 9);
            let out = forward_lm(&mut g, &bound, &cfg, Some(&prefix), &[4, 5]).unwrap();
            g.value(out.logits).data().to_vec()
        };
        assert_ne!(plain, with_prefix);
    }

    #[test]
    fn attention_rows_sum_to_one_with_prefix() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 5);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let prefix = random_prefix(&mut g, &cfg, 3, 21);
        let out = forward_lm(&mut g, &bound, &cfg, Some(&prefix), &[1, 2, 3, 4]).unwrap();
        assert_eq!(out.attn.len(), cfg.n_layers * cfg.n_heads);
        for &node in &out.attn {
            let probs = g.value(node);
            for row in 0..probs.rows() {
                let sum: f64 = (0..probs.cols()).map(|c| probs.at(row, c)).sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            }
        }
    }

    #[test]
    fn first_token_attends_to_prefix_positions() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 5);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let prefix = random_prefix(&mut g, &cfg, 3, 2);
        let out = forward_lm(&mut g, &bound, &cfg, Some(&prefix), &[1, 2]).unwrap();
        let probs = g.value(out.attn[0]);
        // row 0 may see 3 prefix columns plus itself; the future column
        // must carry zero probability
        assert!(probs.at(0, 4) < 1e-12);
        let prefix_mass: f64 = (0..3).map(|c| probs.at(0, c)).sum();
        assert!(prefix_mass > 0.0);
    }

    #[test]
    fn gradients_reach_prefix_but_not_frozen_backbone() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 8);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let prefix = random_prefix(&mut g, &cfg, 2, 4);
        let sample = EncodedSample {
            ids: vec![1, 6, 7, 3],
            target_start: 1,
        };
        let loss = lm_loss(&mut g, &bound, &cfg, Some(&prefix), &sample).unwrap();
        g.backward(loss).unwrap();
        for id in bound.node_list() {
            assert!(g.grad(id).data().iter().all(|&v| v == 0.0));
        }
        let prefix_grad_norm: f64 = prefix
            .iter()
            .flat_map(|&(k, v)| {
                let gk = g.grad(k);
                let gv = g.grad(v);
                gk.data().iter().chain(gv.data()).map(|x| x * x).collect::<Vec<_>>()
            })
            .sum();
        assert!(prefix_grad_norm > 0.0);
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // Tiny single-layer model, all weights trainable, loss through
        // the full forward pass including a prefix.
        let cfg = BackboneConfig {
            vocab_size: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 8,
            max_context: 16,
        };
        let weights = BackboneWeights::init(&cfg, 13);
        let flat: Vec<Array> = weights.weight_list().into_iter().cloned().collect();
        let sample = EncodedSample {
            ids: vec![1, 5, 6, 3],
            target_start: 2,
        };
        let err = crate::graph::grad_check(
            |g, ps| {
                let bound = BoundBackbone {
                    token_emb: ps[0],
                    pos_emb: ps[1],
                    layers: vec![BoundLayer {
                        ln1_g: ps[2],
                        ln1_b: ps[3],
                        wq: ps[4],
                        bq: ps[5],
                        wk: ps[6],
                        bk: ps[7],
                        wv: ps[8],
                        bv: ps[9],
                        wo: ps[10],
                        bo: ps[11],
                        ln2_g: ps[12],
                        ln2_b: ps[13],
                        w_ff1: ps[14],
                        b_ff1: ps[15],
                        w_ff2: ps[16],
                        b_ff2: ps[17],
                    }],
                    ln_f_g: ps[18],
                    ln_f_b: ps[19],
                    w_out: ps[20],
                    b_out: ps[21],
                };
                lm_loss(g, &bound, &cfg, None, &sample)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn loss_matches_manual_softmax_on_three_targets() {
        let cfg = tiny_config();
        let weights = BackboneWeights::init(&cfg, 31);
        let sample = EncodedSample {
            ids: vec![1, 9, 2, 10, 11, 3],
            target_start: 3,
        };
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let out = forward_lm(&mut g, &bound, &cfg, None, &sample.ids).unwrap();
        let logits = g.value(out.logits).clone();
        let mut manual = 0.0;
        for pos in sample.target_start..sample.ids.len() {
            let row: Vec<f64> = (0..logits.cols()).map(|c| logits.at(pos - 1, c)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let logp = row[sample.ids[pos]] - max - z.ln();
            manual += -logp;
        }
        manual /= (sample.ids.len() - sample.target_start) as f64;

        let mut g2 = Graph::new();
        let bound2 = BoundBackbone::bind(&mut g2, &weights, false);
        let loss = lm_loss(&mut g2, &bound2, &cfg, None, &sample).unwrap();
        assert!((g2.value(loss).scalar_value() - manual).abs() < 1e-9);
    }

    #[test]
    fn empty_target_rejected() {
        let cfg = tiny_config();
        let weights = BackboneWeights::zeros(&cfg);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let sample = EncodedSample {
            ids: vec![1, 5],
            target_start: 2,
        };
        assert!(lm_loss(&mut g, &bound, &cfg, None, &sample).is_err());
    }

    #[test]
    fn context_overflow_names_lengths() {
        let cfg = tiny_config();
        let weights = BackboneWeights::zeros(&cfg);
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &weights, false);
        let prefix = random_prefix(&mut g, &cfg, 8, 0);
        let ids: Vec<usize> = (0..30).map(|i| i % 8).collect();
        let err = forward_lm(&mut g, &bound, &cfg, Some(&prefix), &ids).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("30") && msg.contains("8") && msg.contains("32"), "got: {msg}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = tiny_config();
        let model = Backbone {
            config: cfg,
            weights: BackboneWeights::init(&cfg, 123),
            vocab: tiny_vocab(cfg.vocab_size),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pktb");
        model.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.digest(), loaded.digest());
    }

    #[test]
    fn corrupted_checkpoint_fails_digest() {
        let cfg = tiny_config();
        let model = Backbone {
            config: cfg,
            weights: BackboneWeights::init(&cfg, 1),
            vocab: tiny_vocab(cfg.vocab_size),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pktb");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let err = Backbone::load(&path).unwrap_err();
        assert!(err.to_string().contains("digest"), "got: {err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pktb");
        std::fs::write(&path, b"NOPEaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        let err = Backbone::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");
    }

    fn fast_spec() -> SyntheticSpec {
        SyntheticSpec {
            personas_regular: 6,
            personas_few_shot: 0,
            regular_dialogues: (6, 6),
            exchanges_per_dialogue: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialization() {
        let corpus = generate_synthetic(&fast_spec()).unwrap();
        let cfg = tiny_config();
        let (model, report) = pretrain_backbone(&corpus, &cfg, &PretrainConfig::new(0, 7)).unwrap();
        assert_eq!(report.steps, 0);
        let fresh = BackboneWeights::init(&model.config, 7);
        assert_eq!(model.weights, fresh);
    }

    #[test]
    fn pretrain_same_seed_bit_identical() {
        let corpus = generate_synthetic(&fast_spec()).unwrap();
        let cfg = tiny_config();
        let pcfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::new(1, 5)
        };
        let (a, _) = pretrain_backbone(&corpus, &cfg, &pcfg).unwrap();
        let (b, _) = pretrain_backbone(&corpus, &cfg, &pcfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn pretrain_beats_uniform_baseline() {
        let corpus = generate_synthetic(&fast_spec()).unwrap();
        let cfg = tiny_config();
        let pcfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::new(3, 2)
        };
        let (model, report) = pretrain_backbone(&corpus, &cfg, &pcfg).unwrap();
        let uniform = (model.config.vocab_size as f64).ln();
        assert!(
            report.held_out_loss < uniform,
            "held-out {} vs uniform {uniform}",
            report.held_out_loss
        );
    }
}
