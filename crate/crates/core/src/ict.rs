//! Inverse-cloze warmup for the retriever.
//!
//! A randomly chosen sentence must be matched back to the rest of its own
//! article among the other contexts in the batch. Training the two
//! retrieval encoders on this before joint training gives the index a
//! head start: without it, early retrieval is uniform noise and the reader
//! learns to ignore the documents.
//!
//! Only retriever tensors are updated here. The reader and the null
//! embedding keep their initial values, so a warmup cannot leak masked-token
//! supervision.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{split_sentences, tokenize, Article, Vocab};
use crate::encoders::encode_sequence;
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor};
use crate::training::{stream_rng, ModelParams, TrainError, STREAM_ICT};

/// One pseudo-query and its positive context: a sentence, and the same
/// article with that sentence removed.
#[derive(Debug, Clone)]
pub struct IctPair {
    pub article_id: String,
    pub query_ids: Vec<u32>,
    pub context_ids: Vec<u32>,
}

/// Enumerates every (sentence, rest-of-article) pair. Articles with fewer
/// than two sentences are skipped: their context would be empty. Token runs
/// are truncated to `max_tokens` so rendered inputs fit the encoder.
pub fn ict_pairs(articles: &[Article], vocab: &Vocab, max_tokens: usize) -> Vec<IctPair> {
    let mut pairs = Vec::new();
    for article in articles {
        let sentences = split_sentences(&article.text);
        if sentences.len() < 2 {
            continue;
        }
        let tokenized: Vec<Vec<u32>> = sentences
            .iter()
            .map(|s| vocab.encode(&tokenize(s)))
            .collect();
        for held_out in 0..tokenized.len() {
            let mut query_ids = tokenized[held_out].clone();
            query_ids.truncate(max_tokens);
            let mut context_ids = Vec::new();
            for (i, t) in tokenized.iter().enumerate() {
                if i != held_out {
                    context_ids.extend_from_slice(t);
                }
            }
            context_ids.truncate(max_tokens);
            if query_ids.is_empty() || context_ids.is_empty() {
                continue;
            }
            pairs.push(IctPair {
                article_id: article.article_id.clone(),
                query_ids,
                context_ids,
            });
        }
    }
    pairs
}

/// The retriever subset of the model: query-encoder tensors plus the
/// separate document encoder's when present. Warmup optimizers slot
/// exactly these, so the reader and null embedding are never decayed.
pub fn retriever_tensors(params: &ModelParams) -> Vec<(String, &Tensor)> {
    params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with("query.") || n.starts_with("doc."))
        .collect()
}

pub fn retriever_tensors_mut(params: &mut ModelParams) -> Vec<(String, &mut Tensor)> {
    params
        .named_tensors_mut()
        .into_iter()
        .filter(|(n, _)| n.starts_with("query.") || n.starts_with("doc."))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IctMetrics {
    pub loss: f64,
    /// Fraction of queries whose own context outscored every other context
    /// in the batch.
    pub recall_at_1: f64,
}

/// One contrastive update. Scores are q_i · c_j / sqrt(h_dim) for every
/// query/context combination in the batch; each row is a softmax over the
/// batch and the matching context is the target.
pub fn ict_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[&IctPair],
    lr: f64,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<IctMetrics, TrainError> {
    let b = batch.len();
    if b < 2 {
        return Err(TrainError::BadConfig(format!(
            "inverse-cloze batch of {b} has no in-batch negatives"
        )));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let query_enc = params.query.register(&mut tape);
    let doc_enc = params.doc.as_ref().map(|d| d.register(&mut tape));
    let context_enc = doc_enc.as_ref().unwrap_or(&query_enc);

    let mut q_vecs = Vec::with_capacity(b);
    let mut c_vecs = Vec::with_capacity(b);
    for pair in batch {
        q_vecs.push(encode_sequence(
            &mut tape,
            &query_enc,
            &pair.query_ids,
            dropout.as_deref_mut(),
        )?);
        c_vecs.push(encode_sequence(
            &mut tape,
            context_enc,
            &pair.context_ids,
            dropout.as_deref_mut(),
        )?);
    }

    let inv_sqrt_h = 1.0 / (params.query.cfg.h_dim as f64).sqrt();
    let mut scores = Vec::with_capacity(b * b);
    for &q in &q_vecs {
        for &c in &c_vecs {
            let raw = tape.dot(q, c)?;
            scores.push(tape.scale(raw, inv_sqrt_h));
        }
    }
    let flat = tape.stack_scalars(&scores)?;
    let grid = tape.reshape(flat, &[b, b])?;
    let log_rows = tape.log_softmax_rows(grid)?;
    let diagonal: Vec<u32> = (0..b as u32).collect();
    let own = tape.pick_per_row(log_rows, &diagonal)?;
    let total = tape.sum_all(own);
    let loss = tape.scale(total, -1.0 / b as f64);

    let grads = tape.backward(loss)?;
    params.query.absorb(&query_enc, &grads)?;
    if let (Some(d), Some(td)) = (params.doc.as_mut(), doc_enc.as_ref()) {
        d.absorb(td, &grads)?;
    }
    for (name, t) in retriever_tensors(params) {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    step: opt.t() as usize,
                    tensor: name,
                });
            }
        }
    }
    {
        let mut named = retriever_tensors_mut(params);
        opt.step(&mut named, lr)?;
    }

    let values = tape.value(log_rows);
    let mut hits = 0;
    for r in 0..b {
        let row = &values[r * b..(r + 1) * b];
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if best == r {
            hits += 1;
        }
    }
    Ok(IctMetrics {
        loss: tape.value(loss)[0],
        recall_at_1: hits as f64 / b as f64,
    })
}

/// Runs `steps` contrastive updates with a fresh optimizer over the
/// retriever tensors. Batches are distinct pairs sampled per step from the
/// (seed, step) stream, so the whole warmup is a pure function of its
/// arguments. Gradients are wiped afterwards so joint training starts
/// clean.
pub fn ict_warmup(
    params: &mut ModelParams,
    pairs: &[IctPair],
    steps: usize,
    batch_size: usize,
    peak_lr: f64,
    adamw: AdamWConfig,
    seed: u64,
) -> Result<Vec<IctMetrics>, TrainError> {
    if pairs.len() < 2 {
        return Err(TrainError::BadConfig(format!(
            "inverse-cloze warmup needs at least 2 pairs, found {}",
            pairs.len()
        )));
    }
    let b = batch_size.min(pairs.len()).max(2);
    let mut opt = AdamW::new(adamw, &retriever_tensors(params));
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = lr_schedule(
            step as u64,
            (steps / 10) as u64,
            steps as u64,
            peak_lr,
            0.0,
        );
        let mut rng = stream_rng(seed, STREAM_ICT, step as u64);
        let chosen = sample(&mut rng, pairs.len(), b);
        let batch: Vec<&IctPair> = chosen.iter().map(|i| &pairs[i]).collect();
        let dropout = params.query.cfg.dropout;
        let metrics = if dropout > 0.0 {
            ict_step(params, &mut opt, &batch, lr, Some(&mut rng))?
        } else {
            ict_step(params, &mut opt, &batch, lr, None)?
        };
        history.push(metrics);
    }
    params.zero_grads();
    Ok(history)
}
