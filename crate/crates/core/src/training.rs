//! Joint training of the retriever and reader.
//!
//! Each masked query marginalizes the reader over a small candidate set:
//! the top-k documents from a periodically rebuilt index snapshot, plus a
//! trainable null document that lets the model retrieve nothing. Candidates
//! are *selected* with stale document vectors but re-encoded fresh inside
//! the step's tape, so the marginal log-likelihood trains both encoders end
//! to end without any retrieval labels.
//!
//! Two losses are reported per step. `loss` is the optimized objective, the
//! mean over queries of the total negative marginal log-likelihood.
//! `nll` divides each query's total by its mask count first, which makes
//! `exp(nll)` a per-token perplexity that is comparable across batches with
//! different mask counts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::Document;
use crate::encoders::{
    encode_doc, encode_query, reader_log_probs, EncoderConfig, EncoderError, EncoderParams, Role,
    TapedEncoder,
};
use crate::index::{FlatIndex, IndexError};
use crate::masking::{
    apply_masks, find_salient_spans, plan_masks, Gazetteer, MaskError, MaskedQuery, Months,
    SalientSpan,
};
use crate::optim::{lr_schedule, AdamW, AdamWConfig, OptimError};
use crate::tensor::{Gradients, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no candidates: retrieval and the null document are both disabled")]
    NoCandidates,
    #[error("query has {masks} mask positions but {targets} targets")]
    BadQuery { masks: usize, targets: usize },
    #[error("candidate doc_id {doc_id} outside corpus of {len} documents")]
    BadCandidate { doc_id: u32, len: usize },
    #[error("{py} reader terms against {pd} posterior terms")]
    CandidateMismatch { py: usize, pd: usize },
    #[error("reader rows hold {rows} values, expected {targets} targets x vocab {vocab}")]
    ReaderShape {
        rows: usize,
        targets: usize,
        vocab: usize,
    },
    #[error("target id {target} outside vocab of {vocab}")]
    TargetOutOfVocab { target: u32, vocab: usize },
    #[error("non-finite {what}")]
    NonFiniteValue { what: &'static str },
    #[error("non-finite gradient in {tensor} at step {step}; update rejected")]
    NonFiniteGradient { step: usize, tensor: String },
    #[error("no document has a salient span to mask")]
    NoMaskableDocuments,
    #[error("corrupt training progress file {0}")]
    CorruptProgress(PathBuf),
}

impl TrainError {
    /// True when the failure is a non-finite number surfacing anywhere in the
    /// pipeline: the loss gate, the gradient gate, or an op-level check that
    /// tripped first. Callers use this to tell numerical blowups apart from
    /// configuration and I/O problems.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteValue { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

// ---------------------------------------------------------------------------
// Deterministic randomness

/// Stream ids keep unrelated random choices on unrelated sequences.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_ICT: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one (seed, stream, step) triple. No generator state carries
/// over between steps, so a run resumed from a checkpoint draws exactly what
/// the uninterrupted run would have drawn.
pub fn stream_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(stream ^ splitmix(step)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Model parameters

/// Everything trainable: a query encoder, an optional separate document
/// encoder (absent means the query encoder embeds documents too), the
/// reader, and the null-document embedding. The null embedding starts at
/// zero, which scores every query identically until training moves it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub query: EncoderParams,
    pub doc: Option<EncoderParams>,
    pub reader: EncoderParams,
    pub null_doc: Tensor,
}

/// Tape-side mirror of [`ModelParams`], valid for one tape.
pub struct TapedModel {
    pub query: TapedEncoder,
    pub doc: Option<TapedEncoder>,
    pub reader: TapedEncoder,
    pub null_doc: TensorId,
}

impl TapedModel {
    pub fn doc_encoder(&self) -> &TapedEncoder {
        self.doc.as_ref().unwrap_or(&self.query)
    }
}

impl ModelParams {
    /// Draw order is fixed (query encoder, separate document encoder when
    /// present, reader), so one seed pins the whole model.
    pub fn init(
        cfg: &EncoderConfig,
        shared_doc_encoder: bool,
        rng: &mut impl Rng,
    ) -> Result<ModelParams, EncoderError> {
        let query = EncoderParams::init(cfg, Role::Retrieval, rng)?;
        let doc = if shared_doc_encoder {
            None
        } else {
            Some(EncoderParams::init(cfg, Role::Retrieval, rng)?)
        };
        let reader = EncoderParams::init(cfg, Role::Reader, rng)?;
        let null_doc = Tensor::zeros(&[cfg.h_dim]).with_grad();
        Ok(ModelParams {
            query,
            doc,
            reader,
            null_doc,
        })
    }

    pub fn doc_params(&self) -> &EncoderParams {
        self.doc.as_ref().unwrap_or(&self.query)
    }

    /// Canonical walk used by checkpoints and the optimizer: query tensors,
    /// then the separate document encoder's if present, then the reader's,
    /// then the null embedding.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.query.named_tensors() {
            out.push((format!("query.{n}"), t));
        }
        if let Some(doc) = &self.doc {
            for (n, t) in doc.named_tensors() {
                out.push((format!("doc.{n}"), t));
            }
        }
        for (n, t) in self.reader.named_tensors() {
            out.push((format!("reader.{n}"), t));
        }
        out.push(("null_doc_embedding".into(), &self.null_doc));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.query.named_tensors_mut() {
            out.push((format!("query.{n}"), t));
        }
        if let Some(doc) = &mut self.doc {
            for (n, t) in doc.named_tensors_mut() {
                out.push((format!("doc.{n}"), t));
            }
        }
        for (n, t) in self.reader.named_tensors_mut() {
            out.push((format!("reader.{n}"), t));
        }
        out.push(("null_doc_embedding".into(), &mut self.null_doc));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> TapedModel {
        TapedModel {
            query: self.query.register(tape),
            doc: self.doc.as_ref().map(|d| d.register(tape)),
            reader: self.reader.register(tape),
            null_doc: tape.leaf(&self.null_doc),
        }
    }

    pub fn absorb(&mut self, taped: &TapedModel, grads: &Gradients) -> Result<(), TensorError> {
        self.query.absorb(&taped.query, grads)?;
        if let (Some(d), Some(td)) = (self.doc.as_mut(), taped.doc.as_ref()) {
            d.absorb(td, grads)?;
        }
        self.reader.absorb(&taped.reader, grads)?;
        self.null_doc.absorb(grads, taped.null_doc)
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::checkpoint::save_tensors(path, &self.named_tensors())
    }

    /// Loads a checkpoint written by [`ModelParams::save`] into a model of
    /// the same architecture; any drift in names or shapes is an error.
    pub fn load(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let mut named = self.named_tensors_mut();
        crate::checkpoint::load_into(path, &mut named)
    }
}

/// Writes just the reader stack, with unprefixed tensor names, so
/// [`EncoderParams::load`] can read it back as a standalone masked-token
/// predictor.
pub fn extract_reader(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    params.reader.save(path)
}

// ---------------------------------------------------------------------------
// Value-level probability arithmetic

fn ensure_finite(what: &'static str, xs: &[f64]) -> Result<(), TrainError> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteValue { what });
    }
    Ok(())
}

fn log_sum_exp_vals(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// log p(y|q) from per-candidate reader terms and the retrieval posterior:
/// logsumexp over candidates of log p(y|d,q) + log p(d|q).
pub fn marginalize(log_py_given_d: &[f64], log_pd: &[f64]) -> Result<f64, TrainError> {
    if log_py_given_d.len() != log_pd.len() {
        return Err(TrainError::CandidateMismatch {
            py: log_py_given_d.len(),
            pd: log_pd.len(),
        });
    }
    if log_py_given_d.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    ensure_finite("reader log-probability", log_py_given_d)?;
    ensure_finite("retrieval log-posterior", log_pd)?;
    let joint: Vec<f64> = log_py_given_d
        .iter()
        .zip(log_pd)
        .map(|(a, b)| a + b)
        .collect();
    Ok(log_sum_exp_vals(&joint))
}

/// Per-candidate leverage u(d) = p(y|d,q)/p(y|q) - 1. Positive means the
/// candidate explains the masked targets better than the current mixture
/// does. The posterior-weighted sum Σ u(d) p(d|q) is identically zero, and
/// the gradient of log p(y|q) with respect to the retrieval score of d is
/// exactly u(d) p(d|q).
pub fn leverage_weights(log_py_given_d: &[f64], log_pd: &[f64]) -> Result<Vec<f64>, TrainError> {
    let log_py = marginalize(log_py_given_d, log_pd)?;
    Ok(log_py_given_d
        .iter()
        .map(|v| (v - log_py).exp() - 1.0)
        .collect())
}

/// Total negative log-likelihood of `targets` under one candidate's reader
/// rows (`targets.len() x vocab`, row-major).
pub fn mlm_nll(log_prob_rows: &[f64], vocab: usize, targets: &[u32]) -> Result<f64, TrainError> {
    if vocab == 0 || log_prob_rows.len() != targets.len() * vocab {
        return Err(TrainError::ReaderShape {
            rows: log_prob_rows.len(),
            targets: targets.len(),
            vocab,
        });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(TrainError::TargetOutOfVocab { target: t, vocab });
        }
        total -= log_prob_rows[r * vocab + t as usize];
    }
    Ok(total)
}

pub fn perplexity(nll: f64) -> f64 {
    nll.exp()
}

// ---------------------------------------------------------------------------
// The per-query graph

/// Tape handles for one query's objective. `log_posterior` follows the
/// candidate order passed in; `log_marginal` is the scalar log p(y|q).
pub struct QueryGraph {
    pub log_marginal: TensorId,
    pub log_posterior: TensorId,
}

/// Builds the marginal likelihood for one query over a fixed candidate
/// list (`None` is the null document). Scores are q·d / sqrt(h_dim), the
/// posterior is their softmax, and each candidate's reader term is the sum
/// of its masked-position log-probabilities.
pub fn query_marginal_graph(
    tape: &mut Tape,
    model: &TapedModel,
    q: &MaskedQuery,
    q_vec: TensorId,
    candidates: &[Option<u32>],
    docs: &[Document],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<QueryGraph, TrainError> {
    if candidates.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    if q.mask_positions.is_empty() || q.mask_positions.len() != q.target_ids.len() {
        return Err(TrainError::BadQuery {
            masks: q.mask_positions.len(),
            targets: q.target_ids.len(),
        });
    }
    let inv_sqrt_h = 1.0 / (model.query.cfg.h_dim as f64).sqrt();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut reader_terms = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let (doc_vec, doc_ref) = match cand {
            Some(id) => {
                let doc = docs.get(*id as usize).ok_or(TrainError::BadCandidate {
                    doc_id: *id,
                    len: docs.len(),
                })?;
                debug_assert_eq!(doc.doc_id, *id, "docs must be in doc_id order");
                let v = encode_doc(tape, model.doc_encoder(), doc, dropout.as_deref_mut())?;
                (v, Some(doc))
            }
            None => (model.null_doc, None),
        };
        let raw = tape.dot(q_vec, doc_vec)?;
        scores.push(tape.scale(raw, inv_sqrt_h));
        let rows = reader_log_probs(tape, &model.reader, q, doc_ref, dropout.as_deref_mut())?;
        let picked = tape.pick_per_row(rows, &q.target_ids)?;
        reader_terms.push(tape.sum_all(picked));
    }
    let c = candidates.len();
    let stacked = tape.stack_scalars(&scores)?;
    let as_row = tape.reshape(stacked, &[1, c])?;
    let log_pd_row = tape.log_softmax_rows(as_row)?;
    let log_posterior = tape.reshape(log_pd_row, &[c])?;
    let read = tape.stack_scalars(&reader_terms)?;
    let joint = tape.add(log_posterior, read)?;
    let log_marginal = tape.log_sum_exp(joint)?;
    Ok(QueryGraph {
        log_marginal,
        log_posterior,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Retrieved candidates per query, not counting the null document.
    pub k: usize,
    /// Steps between document index rebuilds.
    pub reindex_interval: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Off means every query sees only the null document: a no-retrieval
    /// reader baseline with the same parameter count and schedule.
    pub use_retrieval: bool,
    /// Off removes the null candidate, forcing all mass onto retrieved
    /// documents.
    pub use_null: bool,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            reindex_interval: 100,
            warmup_steps: 100,
            total_steps: 2000,
            peak_lr: 1e-3,
            final_lr: 1e-4,
            use_retrieval: true,
            use_null: true,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if self.reindex_interval == 0 {
            return bad("reindex_interval must be at least 1");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps cannot exceed total_steps");
        }
        for (name, v) in [("peak_lr", self.peak_lr), ("final_lr", self.final_lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::BadConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.use_retrieval && self.k == 0 {
            return bad("k must be at least 1 when retrieval is on");
        }
        if !self.use_retrieval && !self.use_null {
            return bad("retrieval and the null document cannot both be disabled");
        }
        Ok(())
    }
}

/// Everything a run needs to continue: parameters, optimizer moments, the
/// current index snapshot, the step counter, and the base seed that all
/// per-step generators derive from.
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamW,
    pub index: FlatIndex,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(
        params: ModelParams,
        cfg: &TrainConfig,
        docs: &[Document],
        seed: u64,
    ) -> Result<TrainState, TrainError> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adamw, &params.named_tensors());
        let index = FlatIndex::build(params.doc_params(), docs, 0)?;
        Ok(TrainState {
            params,
            opt,
            index,
            step: 0,
            seed,
        })
    }

    /// Name of the single checkpoint file written under the state directory.
    pub const FILE: &'static str = "state.ckpt";

    /// Writes everything a resumed run needs into one `state.ckpt`:
    /// parameters, optimizer moments, the index snapshot, and run progress.
    /// The file lands via write-to-temp plus rename, so a crash mid-save
    /// leaves the previous checkpoint intact instead of a torn mix.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let mut owned: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (name, t) in self.params.named_tensors() {
            owned.push((format!("model.{name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        owned.push(("opt.step_count".into(), vec![1], vec![self.opt.t() as f64]));
        for (name, m, v) in self.opt.slot_moments() {
            owned.push((format!("opt.{name}.m"), vec![m.len()], m.to_vec()));
            owned.push((format!("opt.{name}.v"), vec![v.len()], v.to_vec()));
        }
        owned.push((
            "index.rows".into(),
            vec![self.index.len(), self.index.h_dim()],
            self.index.rows().to_vec(),
        ));
        owned.push((
            "index.version".into(),
            vec![1],
            vec![self.index.version() as f64],
        ));
        // u64 fields split into 32-bit halves: f64 carries each half exactly.
        owned.push((
            "run.meta".into(),
            vec![3],
            vec![
                self.step as f64,
                (self.seed >> 32) as f64,
                (self.seed & 0xffff_ffff) as f64,
            ],
        ));

        let final_path = dir.join(Self::FILE);
        let tmp_path = dir.join(format!("{}.tmp", Self::FILE));
        checkpoint::save_entries(
            &tmp_path,
            owned.iter().map(|(n, s, d)| (n.as_str(), &s[..], &d[..])),
        )?;
        fs::rename(&tmp_path, &final_path)?;
        Ok(())
    }

    /// `template` supplies the architecture; every tensor in it is
    /// overwritten from the checkpoint.
    pub fn load(
        dir: &Path,
        template: ModelParams,
        adamw: AdamWConfig,
    ) -> Result<TrainState, TrainError> {
        let path = dir.join(Self::FILE);
        let corrupt = || TrainError::CorruptProgress(path.clone());

        let mut model = Vec::new();
        let mut opt_entries = Vec::new();
        let mut index_rows = None;
        let mut index_version = None;
        let mut run_meta = None;
        for mut entry in checkpoint::load_entries(&path)? {
            if let Some(rest) = entry.name.strip_prefix("model.") {
                entry.name = rest.to_string();
                model.push(entry);
            } else if let Some(rest) = entry.name.strip_prefix("opt.") {
                entry.name = rest.to_string();
                opt_entries.push(entry);
            } else if entry.name == "index.rows" {
                index_rows = Some(entry);
            } else if entry.name == "index.version" {
                index_version = Some(entry);
            } else if entry.name == "run.meta" {
                run_meta = Some(entry);
            } else {
                return Err(corrupt());
            }
        }

        let mut params = template;
        {
            let mut named = params.named_tensors_mut();
            if model.len() != named.len() {
                return Err(corrupt());
            }
            for (entry, (name, tensor)) in model.iter().zip(named.iter_mut()) {
                if &entry.name != name || entry.shape != tensor.shape() {
                    return Err(TrainError::Checkpoint(CheckpointError::Mismatch {
                        index: 0,
                        expected: format!("{} {:?}", name, tensor.shape()),
                        found: format!("{} {:?}", entry.name, entry.shape),
                    }));
                }
                tensor.data_mut().copy_from_slice(&entry.data);
            }
        }

        let mut opt = AdamW::new(adamw, &params.named_tensors());
        opt.restore(&opt_entries)?;

        let rows = index_rows.ok_or_else(corrupt)?;
        let version = index_version.ok_or_else(corrupt)?;
        let &[_, h_dim] = rows.shape.as_slice() else {
            return Err(corrupt());
        };
        let index = FlatIndex::from_rows(h_dim, rows.data, version.data[0] as u64)?;

        let meta = run_meta.ok_or_else(corrupt)?;
        let &[step, seed_hi, seed_lo] = meta.data.as_slice() else {
            return Err(corrupt());
        };
        Ok(TrainState {
            params,
            opt,
            index,
            step: step as usize,
            seed: ((seed_hi as u64) << 32) | seed_lo as u64,
        })
    }
}

/// Per-step record, one CSV row in a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean over the batch of the total negative marginal log-likelihood.
    pub loss: f64,
    /// Mean per-masked-token negative log-likelihood.
    pub nll: f64,
    pub perplexity: f64,
    pub lr: f64,
    /// Mean posterior probability on the null document; exactly 0 with the
    /// null candidate disabled and exactly 1 with retrieval disabled.
    pub null_prob_mass: f64,
    /// Version of the index snapshot this step retrieved from.
    pub index_version: u64,
}

fn select_candidates(
    index: &FlatIndex,
    q_vec: &[f64],
    source: u32,
    cfg: &TrainConfig,
) -> Result<Vec<Option<u32>>, TrainError> {
    let mut cands: Vec<Option<u32>> = Vec::new();
    if cfg.use_retrieval {
        for id in index.top_k(q_vec, cfg.k, Some(source))? {
            cands.push(Some(id));
        }
    }
    if cfg.use_null {
        cands.push(None);
    }
    if cands.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    Ok(cands)
}

/// One optimizer update over a batch of masked queries.
///
/// Every query runs on its own tape: parameters are registered, the query
/// is encoded, candidates come from the index snapshot (always excluding
/// the query's own source chunk), and the candidates are re-encoded fresh
/// so gradients reach both encoders. Gradients accumulate across the batch
/// and are checked for finiteness before the optimizer touches anything;
/// on any error the parameters, moments, step counter, and index are
/// exactly as they were.
pub fn train_step(
    state: &mut TrainState,
    docs: &[Document],
    batch: &[MaskedQuery],
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let step = state.step;
    let lr = lr_schedule(
        step as u64,
        cfg.warmup_steps as u64,
        cfg.total_steps as u64,
        cfg.peak_lr,
        cfg.final_lr,
    );
    let index_version = state.index.version();
    let inv_batch = 1.0 / batch.len() as f64;
    let mut drop_rng = stream_rng(state.seed, STREAM_DROPOUT, step as u64);

    state.params.zero_grads();
    let mut loss_sum = 0.0;
    let mut per_token_sum = 0.0;
    let mut null_mass_sum = 0.0;

    for q in batch {
        let mut tape = Tape::new();
        let model = state.params.register(&mut tape);
        let q_vec = encode_query(&mut tape, &model.query, q, Some(&mut drop_rng))?;
        let cands = select_candidates(&state.index, tape.value(q_vec), q.source_doc_id, cfg)?;
        let graph = query_marginal_graph(
            &mut tape,
            &model,
            q,
            q_vec,
            &cands,
            docs,
            Some(&mut drop_rng),
        )?;
        let contribution = tape.scale(graph.log_marginal, -inv_batch);
        let grads = tape.backward(contribution)?;
        state.params.absorb(&model, &grads)?;

        let nll_q = -tape.value(graph.log_marginal)[0];
        loss_sum += nll_q;
        per_token_sum += nll_q / q.target_ids.len() as f64;
        if cfg.use_null {
            // The null candidate is always appended last.
            let lp = tape.value(graph.log_posterior);
            null_mass_sum += lp[lp.len() - 1].exp();
        }
    }

    for (name, t) in state.params.named_tensors() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                state.params.zero_grads();
                return Err(TrainError::NonFiniteGradient { step, tensor: name });
            }
        }
    }

    {
        let mut named = state.params.named_tensors_mut();
        state.opt.step(&mut named, lr)?;
    }
    state.step += 1;
    // The no-retrieval control never consults the index, so rebuilding it
    // would only burn time; its version column then stays at 0.
    if cfg.use_retrieval && state.step % cfg.reindex_interval == 0 {
        state.index = FlatIndex::build(state.params.doc_params(), docs, state.step as u64)?;
    }

    let nll = per_token_sum * inv_batch;
    Ok(StepMetrics {
        step,
        loss: loss_sum * inv_batch,
        nll,
        perplexity: perplexity(nll),
        lr,
        null_prob_mass: null_mass_sum * inv_batch,
        index_version,
    })
}

// ---------------------------------------------------------------------------
// Batch sampling

/// Salient spans for every document, aligned with `docs`. Computed once up
/// front; spans never change during training.
pub fn corpus_spans(
    docs: &[Document],
    gazetteer: &Gazetteer,
    months: &Months,
) -> Vec<Vec<SalientSpan>> {
    docs.iter()
        .map(|d| find_salient_spans(&d.tokens[..d.real_len()], gazetteer, months))
        .collect()
}

/// Draws `batch_size` masked queries. Documents without a salient span are
/// never sampled; the rest are drawn uniformly with replacement.
pub fn sample_batch(
    docs: &[Document],
    spans: &[Vec<SalientSpan>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskedQuery>, TrainError> {
    debug_assert_eq!(docs.len(), spans.len());
    let maskable: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(TrainError::NoMaskableDocuments);
    }
    (0..batch_size)
        .map(|_| {
            let di = maskable[rng.gen_range(0..maskable.len())];
            let plan = plan_masks(&docs[di], &spans[di], rng)?;
            Ok(apply_masks(&docs[di], &plan))
        })
        .collect()
}
