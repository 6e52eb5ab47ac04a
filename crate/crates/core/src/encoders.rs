//! Transformer encoders for queries, documents, and the reader.
//!
//! One post-norm BERT-style stack serves three roles. Retrieval encoders
//! pool the first-position hidden state through a learned linear projection
//! into an h_dim vector; the reader keeps per-position states and projects
//! masked rows onto the vocabulary. All forwards run on a [`Tape`], so the
//! same code path produces values and gradients.
//!
//! Renderings:
//! - query:  `[CLS] q [SEP]` with the pad tail stripped
//! - doc:    `[CLS] d [SEP]`; pad positions never reach the computation and
//!   can never influence the output
//! - reader: `[CLS] q [SEP] d [SEP]`, so query position `i` is row `1 + i`
//! - reader with the null document: `[CLS] q [SEP] [SEP]`

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Document;
use crate::masking::MaskedQuery;
use crate::tensor::{Gradients, Tape, Tensor, TensorError, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Additive score for masked-out attention keys. Large enough that the
/// weight underflows to exactly zero after the stable softmax shift.
const KEY_MASK: f64 = -1e30;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("{op} requires a {expected} head")]
    WrongHead { op: &'static str, expected: &'static str },
    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeDrift {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub h_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            h_dim: 64,
            ffn_dim: 256,
            max_positions: 128,
            vocab_size: 4096,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::BadConfig(m));
        if self.layers == 0 || self.heads == 0 || self.h_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, h_dim, ffn_dim must all be positive".into());
        }
        if self.h_dim % self.heads != 0 {
            return bad(format!(
                "h_dim {} is not divisible by {} heads",
                self.h_dim, self.heads
            ));
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.max_positions < 4 {
            return bad(format!("max_positions {} is too small", self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.h_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Retrieval,
    Reader,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub attn_gamma: Tensor,
    pub attn_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_gamma: Tensor,
    pub ffn_beta: Tensor,
}

#[derive(Debug, Clone)]
pub enum EncoderHead {
    Retrieval { pool_w: Tensor, pool_b: Tensor },
    Reader { mlm_w: Tensor, mlm_b: Tensor },
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_gamma: Tensor,
    pub emb_beta: Tensor,
    pub layers: Vec<LayerParams>,
    pub head: EncoderHead,
}

const INIT_STD: f64 = 0.02;

fn weight(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng).with_grad()
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

fn ones_param(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n]).unwrap().with_grad()
}

impl EncoderParams {
    /// Fresh parameters: weights Normal(0, 0.02), biases zero, norm gains
    /// one. Field order of the draws is fixed, so one seed pins every value.
    pub fn init(cfg: &EncoderConfig, role: Role, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let h = cfg.h_dim;
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: weight(&[h, h], rng),
                bq: zeros_param(&[h]),
                wk: weight(&[h, h], rng),
                bk: zeros_param(&[h]),
                wv: weight(&[h, h], rng),
                bv: zeros_param(&[h]),
                wo: weight(&[h, h], rng),
                bo: zeros_param(&[h]),
                attn_gamma: ones_param(h),
                attn_beta: zeros_param(&[h]),
                ffn_w1: weight(&[h, cfg.ffn_dim], rng),
                ffn_b1: zeros_param(&[cfg.ffn_dim]),
                ffn_w2: weight(&[cfg.ffn_dim, h], rng),
                ffn_b2: zeros_param(&[h]),
                ffn_gamma: ones_param(h),
                ffn_beta: zeros_param(&[h]),
            })
            .collect();
        let head = match role {
            Role::Retrieval => EncoderHead::Retrieval {
                pool_w: weight(&[h, h], rng),
                pool_b: zeros_param(&[h]),
            },
            Role::Reader => EncoderHead::Reader {
                mlm_w: weight(&[h, cfg.vocab_size], rng),
                mlm_b: zeros_param(&[cfg.vocab_size]),
            },
        };
        Ok(EncoderParams {
            cfg: *cfg,
            tok_emb: weight(&[cfg.vocab_size, h], rng),
            pos_emb: weight(&[cfg.max_positions, h], rng),
            emb_gamma: ones_param(h),
            emb_beta: zeros_param(&[h]),
            layers,
            head,
        })
    }

    pub fn role(&self) -> Role {
        match self.head {
            EncoderHead::Retrieval { .. } => Role::Retrieval,
            EncoderHead::Reader { .. } => Role::Reader,
        }
    }

    /// Canonical (name, tensor) walk. Checkpoints, the optimizer, and
    /// gradient checks all iterate in this one order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("emb_gamma".into(), &self.emb_gamma),
            ("emb_beta".into(), &self.emb_beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("attn_gamma", &l.attn_gamma),
                ("attn_beta", &l.attn_beta),
                ("ffn_w1", &l.ffn_w1),
                ("ffn_b1", &l.ffn_b1),
                ("ffn_w2", &l.ffn_w2),
                ("ffn_b2", &l.ffn_b2),
                ("ffn_gamma", &l.ffn_gamma),
                ("ffn_beta", &l.ffn_beta),
            ] {
                out.push((format!("layer{i}.{field}"), t));
            }
        }
        match &self.head {
            EncoderHead::Retrieval { pool_w, pool_b } => {
                out.push(("pool_w".into(), pool_w));
                out.push(("pool_b".into(), pool_b));
            }
            EncoderHead::Reader { mlm_w, mlm_b } => {
                out.push(("mlm_w".into(), mlm_w));
                out.push(("mlm_b".into(), mlm_b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("emb_gamma".into(), &mut self.emb_gamma),
            ("emb_beta".into(), &mut self.emb_beta),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (field, t) in [
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("attn_gamma", &mut l.attn_gamma),
                ("attn_beta", &mut l.attn_beta),
                ("ffn_w1", &mut l.ffn_w1),
                ("ffn_b1", &mut l.ffn_b1),
                ("ffn_w2", &mut l.ffn_w2),
                ("ffn_b2", &mut l.ffn_b2),
                ("ffn_gamma", &mut l.ffn_gamma),
                ("ffn_beta", &mut l.ffn_beta),
            ] {
                out.push((format!("layer{i}.{field}"), t));
            }
        }
        match &mut self.head {
            EncoderHead::Retrieval { pool_w, pool_b } => {
                out.push(("pool_w".into(), pool_w));
                out.push(("pool_b".into(), pool_b));
            }
            EncoderHead::Reader { mlm_w, mlm_b } => {
                out.push(("mlm_w".into(), mlm_w));
                out.push(("mlm_b".into(), mlm_b));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every tensor onto the tape, in canonical order.
    pub fn register(&self, tape: &mut Tape) -> TapedEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| TapedLayer {
                wq: tape.leaf(&l.wq),
                bq: tape.leaf(&l.bq),
                wk: tape.leaf(&l.wk),
                bk: tape.leaf(&l.bk),
                wv: tape.leaf(&l.wv),
                bv: tape.leaf(&l.bv),
                wo: tape.leaf(&l.wo),
                bo: tape.leaf(&l.bo),
                attn_gamma: tape.leaf(&l.attn_gamma),
                attn_beta: tape.leaf(&l.attn_beta),
                ffn_w1: tape.leaf(&l.ffn_w1),
                ffn_b1: tape.leaf(&l.ffn_b1),
                ffn_w2: tape.leaf(&l.ffn_w2),
                ffn_b2: tape.leaf(&l.ffn_b2),
                ffn_gamma: tape.leaf(&l.ffn_gamma),
                ffn_beta: tape.leaf(&l.ffn_beta),
            })
            .collect();
        // Field-by-field to keep register and absorb visibly aligned.
        let tok_emb = tape.leaf(&self.tok_emb);
        let pos_emb = tape.leaf(&self.pos_emb);
        let emb_gamma = tape.leaf(&self.emb_gamma);
        let emb_beta = tape.leaf(&self.emb_beta);
        let head = match &self.head {
            EncoderHead::Retrieval { pool_w, pool_b } => TapedHead::Retrieval {
                pool_w: tape.leaf(pool_w),
                pool_b: tape.leaf(pool_b),
            },
            EncoderHead::Reader { mlm_w, mlm_b } => TapedHead::Reader {
                mlm_w: tape.leaf(mlm_w),
                mlm_b: tape.leaf(mlm_b),
            },
        };
        TapedEncoder {
            cfg: self.cfg,
            tok_emb,
            pos_emb,
            emb_gamma,
            emb_beta,
            layers,
            head,
        }
    }

    /// Pulls adjoints for every tensor registered by [`EncoderParams::register`]
    /// into the `grad` buffers.
    pub fn absorb(&mut self, taped: &TapedEncoder, grads: &Gradients) -> Result<(), TensorError> {
        self.tok_emb.absorb(grads, taped.tok_emb)?;
        self.pos_emb.absorb(grads, taped.pos_emb)?;
        self.emb_gamma.absorb(grads, taped.emb_gamma)?;
        self.emb_beta.absorb(grads, taped.emb_beta)?;
        for (l, tl) in self.layers.iter_mut().zip(&taped.layers) {
            l.wq.absorb(grads, tl.wq)?;
            l.bq.absorb(grads, tl.bq)?;
            l.wk.absorb(grads, tl.wk)?;
            l.bk.absorb(grads, tl.bk)?;
            l.wv.absorb(grads, tl.wv)?;
            l.bv.absorb(grads, tl.bv)?;
            l.wo.absorb(grads, tl.wo)?;
            l.bo.absorb(grads, tl.bo)?;
            l.attn_gamma.absorb(grads, tl.attn_gamma)?;
            l.attn_beta.absorb(grads, tl.attn_beta)?;
            l.ffn_w1.absorb(grads, tl.ffn_w1)?;
            l.ffn_b1.absorb(grads, tl.ffn_b1)?;
            l.ffn_w2.absorb(grads, tl.ffn_w2)?;
            l.ffn_b2.absorb(grads, tl.ffn_b2)?;
            l.ffn_gamma.absorb(grads, tl.ffn_gamma)?;
            l.ffn_beta.absorb(grads, tl.ffn_beta)?;
        }
        match (&mut self.head, &taped.head) {
            (EncoderHead::Retrieval { pool_w, pool_b }, TapedHead::Retrieval { pool_w: tw, pool_b: tb }) => {
                pool_w.absorb(grads, *tw)?;
                pool_b.absorb(grads, *tb)?;
            }
            (EncoderHead::Reader { mlm_w, mlm_b }, TapedHead::Reader { mlm_w: tw, mlm_b: tb }) => {
                mlm_w.absorb(grads, *tw)?;
                mlm_b.absorb(grads, *tb)?;
            }
            _ => unreachable!("taped head always mirrors the params head"),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), crate::checkpoint::CheckpointError> {
        crate::checkpoint::save_tensors(path, &self.named_tensors())
    }

    /// Loads a checkpoint written by [`EncoderParams::save`] for the same
    /// config and role; any drift in names or shapes is an error.
    pub fn load(&mut self, path: &std::path::Path) -> Result<(), crate::checkpoint::CheckpointError> {
        let mut named = self.named_tensors_mut();
        crate::checkpoint::load_into(path, &mut named)
    }
}

pub struct TapedLayer {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    attn_gamma: TensorId,
    attn_beta: TensorId,
    ffn_w1: TensorId,
    ffn_b1: TensorId,
    ffn_w2: TensorId,
    ffn_b2: TensorId,
    ffn_gamma: TensorId,
    ffn_beta: TensorId,
}

pub enum TapedHead {
    Retrieval { pool_w: TensorId, pool_b: TensorId },
    Reader { mlm_w: TensorId, mlm_b: TensorId },
}

/// Tape-side mirror of [`EncoderParams`], valid for one tape.
pub struct TapedEncoder {
    pub cfg: EncoderConfig,
    tok_emb: TensorId,
    pos_emb: TensorId,
    emb_gamma: TensorId,
    emb_beta: TensorId,
    layers: Vec<TapedLayer>,
    head: TapedHead,
}

/// Inverted-dropout mask multiply; absent rng means eval mode. With rate 0
/// no rng draws happen, so eval and train are bitwise identical there.
fn maybe_dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape_of(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(&shape, mask)?;
    Ok(tape.mul(x, m)?)
}

/// Runs the stack over `token_ids`, returning the `[len, h_dim]` final
/// hidden states. Positions at `valid_len` and beyond are excluded as
/// attention keys; their own rows are computed but influence nothing else,
/// so outputs at rows below `valid_len` are bitwise independent of the tail.
pub fn hidden_rows(
    tape: &mut Tape,
    enc: &TapedEncoder,
    token_ids: &[u32],
    valid_len: usize,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    let cfg = &enc.cfg;
    let len = token_ids.len();
    if len > cfg.max_positions {
        return Err(EncoderError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    assert!(valid_len >= 1 && valid_len <= len, "valid_len out of range");

    let tok = tape.embedding(enc.tok_emb, token_ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(enc.pos_emb, &positions)?;
    let summed = tape.add(tok, pos)?;
    let mut x = tape.layer_norm(summed, enc.emb_gamma, enc.emb_beta, LN_EPS)?;
    x = maybe_dropout(tape, x, cfg.dropout, &mut dropout)?;

    let key_mask = if valid_len < len {
        let mut m = vec![0.0; len];
        for v in m.iter_mut().skip(valid_len) {
            *v = KEY_MASK;
        }
        Some(tape.constant(&[len], m)?)
    } else {
        None
    };

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &enc.layers {
        let q_all = tape.matmul(x, layer.wq)?;
        let q_all = tape.add_row_bias(q_all, layer.bq)?;
        let k_all = tape.matmul(x, layer.wk)?;
        let k_all = tape.add_row_bias(k_all, layer.bk)?;
        let v_all = tape.matmul(x, layer.wv)?;
        let v_all = tape.add_row_bias(v_all, layer.bv)?;

        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q_all, h * dh, dh)?;
            let kh = tape.slice_cols(k_all, h * dh, dh)?;
            let vh = tape.slice_cols(v_all, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = key_mask {
                scores = tape.add_row_bias(scores, mask)?;
            }
            let probs = tape.softmax_rows(scores)?;
            head_ctx.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let attn = tape.matmul(ctx, layer.wo)?;
        let attn = tape.add_row_bias(attn, layer.bo)?;
        let attn = maybe_dropout(tape, attn, cfg.dropout, &mut dropout)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, layer.attn_gamma, layer.attn_beta, LN_EPS)?;

        let ffn = tape.matmul(x, layer.ffn_w1)?;
        let ffn = tape.add_row_bias(ffn, layer.ffn_b1)?;
        let ffn = tape.gelu(ffn);
        let ffn = tape.matmul(ffn, layer.ffn_w2)?;
        let ffn = tape.add_row_bias(ffn, layer.ffn_b2)?;
        let ffn = maybe_dropout(tape, ffn, cfg.dropout, &mut dropout)?;
        let res = tape.add(x, ffn)?;
        x = tape.layer_norm(res, layer.ffn_gamma, layer.ffn_beta, LN_EPS)?;
    }
    Ok(x)
}

fn pooled_cls(
    tape: &mut Tape,
    enc: &TapedEncoder,
    rows: TensorId,
    op: &'static str,
) -> Result<TensorId, EncoderError> {
    let TapedHead::Retrieval { pool_w, pool_b } = enc.head else {
        return Err(EncoderError::WrongHead {
            op,
            expected: "retrieval",
        });
    };
    let cls = tape.gather_rows(rows, &[0])?;
    let pooled = tape.matmul(cls, pool_w)?;
    let pooled = tape.add_row_bias(pooled, pool_b)?;
    let h = enc.cfg.h_dim;
    Ok(tape.reshape(pooled, &[h])?)
}

fn query_real_ids(q: &MaskedQuery) -> &[u32] {
    &q.token_ids[..q.real_len]
}

fn render_query(q: &MaskedQuery) -> Vec<u32> {
    let mut ids = Vec::with_capacity(q.real_len + 2);
    ids.push(crate::corpus::Vocab::CLS);
    ids.extend_from_slice(query_real_ids(q));
    ids.push(crate::corpus::Vocab::SEP);
    ids
}

/// Retrieval vector for a bare token run, rendered `[CLS] tokens [SEP]`
/// and pooled at the first position. Queries, document chunks, and the
/// inverse-cloze sentence/context pairs all funnel through here.
pub fn encode_sequence(
    tape: &mut Tape,
    enc: &TapedEncoder,
    tokens: &[u32],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(crate::corpus::Vocab::CLS);
    ids.extend_from_slice(tokens);
    ids.push(crate::corpus::Vocab::SEP);
    let valid = ids.len();
    let rows = hidden_rows(tape, enc, &ids, valid, dropout)?;
    pooled_cls(tape, enc, rows, "encode_sequence")
}

/// Retrieval vector for a masked query: `[CLS] q [SEP]`, first position
/// pooled through the projection.
pub fn encode_query(
    tape: &mut Tape,
    enc: &TapedEncoder,
    q: &MaskedQuery,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    encode_sequence(tape, enc, query_real_ids(q), dropout)
}

/// Retrieval vector for a document chunk: `[CLS] d [SEP]` over the real
/// tokens. The pad tail is stripped before any computation, which is what
/// makes the output bitwise independent of pad content.
pub fn encode_doc(
    tape: &mut Tape,
    enc: &TapedEncoder,
    doc: &Document,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    let rl = doc.real_len();
    encode_sequence(tape, enc, &doc.token_ids[..rl], dropout)
}

/// Log-probabilities over the vocabulary at each masked query position,
/// shape `[num_masks, vocab]`. Rows follow `q.mask_positions` order.
/// `doc: None` renders the null-document input `[CLS] q [SEP] [SEP]`.
pub fn reader_log_probs(
    tape: &mut Tape,
    enc: &TapedEncoder,
    q: &MaskedQuery,
    doc: Option<&Document>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, EncoderError> {
    let TapedHead::Reader { mlm_w, mlm_b } = enc.head else {
        return Err(EncoderError::WrongHead {
            op: "reader_log_probs",
            expected: "reader",
        });
    };
    let mut ids = render_query(q);
    match doc {
        Some(d) => {
            ids.extend_from_slice(&d.token_ids[..d.real_len()]);
            ids.push(crate::corpus::Vocab::SEP);
        }
        None => ids.push(crate::corpus::Vocab::SEP),
    }
    let valid = ids.len();
    let rows = hidden_rows(tape, enc, &ids, valid, dropout)?;
    // Query position i sits at row 1 + i, after the leading [CLS].
    let mask_rows: Vec<usize> = q.mask_positions.iter().map(|&p| 1 + p).collect();
    let picked = tape.gather_rows(rows, &mask_rows)?;
    let logits = tape.matmul(picked, mlm_w)?;
    let logits = tape.add_row_bias(logits, mlm_b)?;
    Ok(tape.log_softmax_rows(logits)?)
}

/// One-off evaluation-mode query vector on a private tape.
pub fn encode_query_vec(params: &EncoderParams, q: &MaskedQuery) -> Result<Vec<f64>, EncoderError> {
    let mut tape = Tape::new();
    let enc = params.register(&mut tape);
    let v = encode_query(&mut tape, &enc, q, None)?;
    Ok(tape.value(v).to_vec())
}

/// One-off evaluation-mode document vector on a private tape.
pub fn encode_doc_vec(params: &EncoderParams, doc: &Document) -> Result<Vec<f64>, EncoderError> {
    let mut tape = Tape::new();
    let enc = params.register(&mut tape);
    let v = encode_doc(&mut tape, &enc, doc, None)?;
    Ok(tape.value(v).to_vec())
}
