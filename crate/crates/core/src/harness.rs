//! Experiment configs, the pretraining driver, ablation sweeps, and CSV
//! post-processing.
//!
//! A config is a plain-text `key = value` file. Parsing normalizes it into
//! a canonical printed form whose SHA-256 is the run's identity: two
//! configs that differ only in comments, ordering, or number spelling hash
//! identically, and an output directory refuses to mix runs with different
//! hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{chunk_articles, load_corpus, Article, CorpusError, Document, Vocab};
use crate::encoders::EncoderConfig;
use crate::ict::{ict_pairs, ict_warmup, IctMetrics};
use crate::masking::{Gazetteer, MaskError, Months, SalientSpan};
use crate::optim::AdamWConfig;
use crate::training::{
    corpus_spans, sample_batch, stream_rng, train_step, ModelParams, StepMetrics, TrainConfig,
    TrainError, TrainState, STREAM_BATCH, STREAM_INIT,
};

pub const METRICS_HEADER: &str = "step,loss,nll,perplexity,lr,null_prob_mass,index_version";

/// Smoothing factor the comparison plots use.
pub const DEFAULT_SMOOTHING: f64 = 0.99;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure at step {step}: {source}")]
    Numerical { step: usize, source: TrainError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Train(TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code the CLI maps this error to: 2 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical { .. } => 2,
            _ => 1,
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        if e.is_non_finite() {
            HarnessError::Numerical { step: 0, source: e }
        } else {
            HarnessError::Train(e)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything one run needs, resolved to concrete values. Fields map 1:1 to
/// config keys; `months` is the only optional one (absent means the
/// built-in month list).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub gazetteer: PathBuf,
    pub months: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub vocab_size: usize,
    pub chunk_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub h_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,

    pub batch_size: usize,
    pub k: usize,
    pub reindex_interval: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,

    pub retrieval: bool,
    pub null_document: bool,
    pub ict_warmup: bool,
    pub ict_steps: usize,
    pub ict_batch: usize,
    pub ict_peak_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::new(),
            gazetteer: PathBuf::new(),
            months: None,
            out_dir: PathBuf::from("run"),
            seed: 0,
            vocab_size: 512,
            chunk_len: 20,
            layers: 1,
            heads: 2,
            h_dim: 16,
            ffn_dim: 32,
            max_positions: 64,
            dropout: 0.0,
            batch_size: 4,
            k: 4,
            reindex_interval: 50,
            warmup_steps: 100,
            total_steps: 500,
            peak_lr: 1e-3,
            final_lr: 1e-4,
            retrieval: true,
            null_document: true,
            ict_warmup: true,
            ict_steps: 100,
            ict_batch: 8,
            ict_peak_lr: 1e-3,
        }
    }
}

/// Command-line overrides applied after parsing, before hashing: an
/// overridden run is simply a different experiment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub total_steps: Option<usize>,
    pub k: Option<usize>,
    pub no_retrieval: bool,
    pub no_null: bool,
    pub no_ict: bool,
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(HarnessError::Config(format!(
            "{key}: expected on or off, got {v:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| HarnessError::Config(format!("{key}: {e} (got {v:?})")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if raw.insert(key.clone(), value).is_some() {
                return Err(HarnessError::Config(format!("duplicate key {key}")));
            }
        }

        let mut cfg = ExperimentConfig::default();
        for (key, v) in &raw {
            match key.as_str() {
                "corpus" => cfg.corpus = PathBuf::from(v),
                "gazetteer" => cfg.gazetteer = PathBuf::from(v),
                "months" => cfg.months = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "seed" => cfg.seed = parse_num(key, v)?,
                "vocab_size" => cfg.vocab_size = parse_num(key, v)?,
                "chunk_len" => cfg.chunk_len = parse_num(key, v)?,
                "layers" => cfg.layers = parse_num(key, v)?,
                "heads" => cfg.heads = parse_num(key, v)?,
                "h_dim" => cfg.h_dim = parse_num(key, v)?,
                "ffn_dim" => cfg.ffn_dim = parse_num(key, v)?,
                "max_positions" => cfg.max_positions = parse_num(key, v)?,
                "dropout" => cfg.dropout = parse_num(key, v)?,
                "batch_size" => cfg.batch_size = parse_num(key, v)?,
                "k" => cfg.k = parse_num(key, v)?,
                "reindex_interval" => cfg.reindex_interval = parse_num(key, v)?,
                "warmup_steps" => cfg.warmup_steps = parse_num(key, v)?,
                "total_steps" => cfg.total_steps = parse_num(key, v)?,
                "peak_lr" => cfg.peak_lr = parse_num(key, v)?,
                "final_lr" => cfg.final_lr = parse_num(key, v)?,
                "retrieval" => cfg.retrieval = parse_bool(key, v)?,
                "null_document" => cfg.null_document = parse_bool(key, v)?,
                "ict_warmup" => cfg.ict_warmup = parse_bool(key, v)?,
                "ict_steps" => cfg.ict_steps = parse_num(key, v)?,
                "ict_batch" => cfg.ict_batch = parse_num(key, v)?,
                "ict_peak_lr" => cfg.ict_peak_lr = parse_num(key, v)?,
                _ => return Err(HarnessError::Config(format!("unknown key {key}"))),
            }
        }
        if cfg.corpus.as_os_str().is_empty() {
            return Err(HarnessError::Config("corpus path is required".into()));
        }
        if cfg.gazetteer.as_os_str().is_empty() {
            return Err(HarnessError::Config("gazetteer path is required".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        ExperimentConfig::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if let Some(steps) = o.total_steps {
            self.total_steps = steps;
        }
        if let Some(k) = o.k {
            self.k = k;
        }
        if o.no_retrieval {
            self.retrieval = false;
        }
        if o.no_null {
            self.null_document = false;
        }
        if o.no_ict {
            self.ict_warmup = false;
        }
    }

    /// Canonical printed form: every effective key in alphabetical order,
    /// one `key = value` per line. This is what gets hashed, so textual
    /// variations of the same experiment collapse to one identity.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("batch_size", self.batch_size.to_string());
        put("chunk_len", self.chunk_len.to_string());
        put("corpus", self.corpus.display().to_string());
        put("dropout", self.dropout.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("final_lr", self.final_lr.to_string());
        put("gazetteer", self.gazetteer.display().to_string());
        put("h_dim", self.h_dim.to_string());
        put("heads", self.heads.to_string());
        put("ict_batch", self.ict_batch.to_string());
        put("ict_peak_lr", self.ict_peak_lr.to_string());
        put("ict_steps", self.ict_steps.to_string());
        put("ict_warmup", onoff(self.ict_warmup));
        put("k", self.k.to_string());
        put("layers", self.layers.to_string());
        put("max_positions", self.max_positions.to_string());
        if let Some(m) = &self.months {
            put("months", m.display().to_string());
        }
        put("null_document", onoff(self.null_document));
        put("out_dir", self.out_dir.display().to_string());
        put("peak_lr", self.peak_lr.to_string());
        put("reindex_interval", self.reindex_interval.to_string());
        put("retrieval", onoff(self.retrieval));
        put("seed", self.seed.to_string());
        put("total_steps", self.total_steps.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        s
    }

    /// SHA-256 of [`ExperimentConfig::canonical`], lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        hex
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            reindex_interval: self.reindex_interval,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            peak_lr: self.peak_lr,
            final_lr: self.final_lr,
            use_retrieval: self.retrieval,
            use_null: self.null_document,
            adamw: AdamWConfig::default(),
        }
    }

    /// Encoder dimensions with the actual vocabulary size filled in.
    pub fn encoder_config(&self, vocab_len: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            h_dim: self.h_dim,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            vocab_size: vocab_len,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.chunk_len == 0 {
            return bad("chunk_len must be at least 1".into());
        }
        // Reader inputs render [CLS] query [SEP] document [SEP].
        let reader_window = 2 * self.chunk_len + 3;
        if self.max_positions < reader_window {
            return bad(format!(
                "max_positions {} cannot fit a rendered reader input of {} tokens \
                 (2 * chunk_len + 3)",
                self.max_positions, reader_window
            ));
        }
        if self.ict_warmup && self.ict_steps == 0 {
            return bad("ict_warmup is on but ict_steps is 0".into());
        }
        if self.ict_batch < 2 {
            return bad("ict_batch needs at least 2 for in-batch negatives".into());
        }
        self.train_config().validate().map_err(HarnessError::from)
    }
}

fn onoff(v: bool) -> String {
    if v { "on" } else { "off" }.to_string()
}

/// Final numbers of one run, alongside where its metrics landed.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config_hash: String,
    pub final_ema_loss: f64,
    pub final_ema_perplexity: f64,
    pub wall_clock_secs: f64,
    pub metrics_csv: PathBuf,
}

/// Exponential moving average with `ema0 = x0` and
/// `ema_t = alpha * ema_(t-1) + (1 - alpha) * x_t`.
pub fn ema(series: &[f64], alpha: f64) -> Result<Vec<f64>, HarnessError> {
    if series.is_empty() {
        return Err(HarnessError::Config("cannot smooth an empty series".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HarnessError::Config(format!(
            "smoothing factor must lie strictly inside (0, 1), got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut prev = series[0];
    out.push(prev);
    for &x in &series[1..] {
        prev = alpha * prev + (1.0 - alpha) * x;
        out.push(prev);
    }
    Ok(out)
}

fn format_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        m.step, m.loss, m.nll, m.perplexity, m.lr, m.null_prob_mass, m.index_version
    )
}

/// Parses a metrics CSV into (header columns, numeric rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| HarnessError::Config(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        match row {
            Ok(r) if r.len() == header.len() => rows.push(r),
            _ => {
                return Err(HarnessError::Config(format!(
                    "{}: bad row at line {}",
                    path.display(),
                    i + 2
                )))
            }
        }
    }
    Ok((header, rows))
}

/// Reads rows written by an earlier (possibly interrupted) process,
/// keeping only steps below `resume_step`. A malformed final line is a
/// crash artifact and is dropped; malformed earlier lines are an error.
fn read_resumable_rows(path: &Path, resume_step: usize) -> Result<Vec<String>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(HarnessError::Config(format!(
                "{}: not a metrics CSV",
                path.display()
            )))
        }
    }
    let body: Vec<&str> = lines.collect();
    let mut kept = Vec::new();
    for (i, line) in body.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let parsed_step = fields.first().and_then(|f| f.parse::<usize>().ok());
        let well_formed =
            fields.len() == 7 && fields.iter().all(|f| f.parse::<f64>().is_ok());
        match (parsed_step, well_formed) {
            (Some(step), true) => {
                if step == kept.len() && step < resume_step {
                    kept.push(line.to_string());
                } else if step >= resume_step {
                    break;
                } else {
                    return Err(HarnessError::Config(format!(
                        "{}: rows are not consecutive from 0",
                        path.display()
                    )));
                }
            }
            _ if i + 1 == body.len() => break,
            _ => {
                return Err(HarnessError::Config(format!(
                    "{}: bad row at line {}",
                    path.display(),
                    i + 2
                )))
            }
        }
    }
    Ok(kept)
}

struct LoadedCorpus {
    articles: Vec<Article>,
    vocab: Vocab,
    docs: Vec<Document>,
    spans: Vec<Vec<SalientSpan>>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<LoadedCorpus, HarnessError> {
    let articles = load_corpus(&cfg.corpus)?;
    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), cfg.vocab_size)?;
    let docs = chunk_articles(&articles, &vocab, cfg.chunk_len)?;
    let gazetteer = Gazetteer::load(&cfg.gazetteer)?;
    let months = match &cfg.months {
        Some(p) => Months::load(p)?,
        None => Months::default(),
    };
    let spans = corpus_spans(&docs, &gazetteer, &months);
    Ok(LoadedCorpus {
        articles,
        vocab,
        docs,
        spans,
    })
}

/// Refuses to mix runs: `config.txt` in the output directory must match the
/// current canonical config exactly.
fn claim_out_dir(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join("config.txt");
    let canon = cfg.canonical();
    if path.exists() {
        let existing = fs::read_to_string(&path).map_err(io_err(&path))?;
        if existing != canon {
            return Err(HarnessError::Config(format!(
                "{} holds a run with a different config; pick a fresh out_dir",
                cfg.out_dir.display()
            )));
        }
    } else {
        fs::write(&path, canon).map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_ict_csv(path: &Path, history: &[IctMetrics]) -> Result<(), HarnessError> {
    let mut body = String::from("step,loss,recall_at_1\n");
    for (i, m) in history.iter().enumerate() {
        writeln!(body, "{},{},{}", i, m.loss, m.recall_at_1).unwrap();
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Optional inverse-cloze warmup, then joint training to `total_steps`,
/// with metrics appended per step and a checkpoint every
/// `reindex_interval` steps. If the output directory already holds a
/// checkpoint for this config, training resumes from it.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let inputs = load_inputs(cfg)?;
    claim_out_dir(cfg)?;
    inputs
        .vocab
        .save(&cfg.out_dir.join("vocab.txt"))
        .map_err(HarnessError::from)?;

    let tc = cfg.train_config();
    let ecfg = cfg.encoder_config(inputs.vocab.len());
    let ckpt_dir = cfg.out_dir.join("checkpoint");
    let csv_path = cfg.out_dir.join("metrics.csv");

    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT, 0);
    let template = ModelParams::init(&ecfg, false, &mut init_rng).map_err(TrainError::from)?;

    let (mut state, kept_rows) = if ckpt_dir.join(TrainState::FILE).exists() {
        let state = TrainState::load(&ckpt_dir, template, tc.adamw)?;
        let rows = read_resumable_rows(&csv_path, state.step)?;
        (state, rows)
    } else {
        let mut params = template;
        if cfg.retrieval && cfg.ict_warmup {
            let pairs = ict_pairs(&inputs.articles, &inputs.vocab, cfg.chunk_len);
            let history = ict_warmup(
                &mut params,
                &pairs,
                cfg.ict_steps,
                cfg.ict_batch,
                cfg.ict_peak_lr,
                tc.adamw,
                cfg.seed,
            )?;
            write_ict_csv(&cfg.out_dir.join("ict_metrics.csv"), &history)?;
        }
        (TrainState::new(params, &tc, &inputs.docs, cfg.seed)?, Vec::new())
    };

    let mut csv = String::with_capacity((kept_rows.len() + 1) * 64);
    csv.push_str(METRICS_HEADER);
    csv.push('\n');
    for row in &kept_rows {
        csv.push_str(row);
        csv.push('\n');
    }
    let mut file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    file.write_all(csv.as_bytes()).map_err(io_err(&csv_path))?;

    while state.step < tc.total_steps {
        let step = state.step;
        let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH, step as u64);
        let batch = sample_batch(&inputs.docs, &inputs.spans, cfg.batch_size, &mut batch_rng)?;
        let metrics = train_step(&mut state, &inputs.docs, &batch, &tc).map_err(|e| {
            match HarnessError::from(e) {
                HarnessError::Numerical { source, .. } => HarnessError::Numerical { step, source },
                other => other,
            }
        })?;
        let mut line = format_row(&metrics);
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(&csv_path))?;
        if state.step % cfg.reindex_interval == 0 {
            file.flush().map_err(io_err(&csv_path))?;
            state.save(&ckpt_dir)?;
        }
    }
    file.flush().map_err(io_err(&csv_path))?;
    drop(file);
    state.save(&ckpt_dir)?;

    let summary = summarize(cfg, &csv_path, started.elapsed().as_secs_f64())?;
    let mut text = String::new();
    writeln!(text, "config_hash = {}", summary.config_hash).unwrap();
    writeln!(text, "final_ema_loss = {}", summary.final_ema_loss).unwrap();
    writeln!(text, "final_ema_perplexity = {}", summary.final_ema_perplexity).unwrap();
    writeln!(text, "wall_clock_secs = {}", summary.wall_clock_secs).unwrap();
    writeln!(text, "metrics_csv = {}", summary.metrics_csv.display()).unwrap();
    let summary_path = cfg.out_dir.join("summary.txt");
    fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    Ok(summary)
}

fn summarize(
    cfg: &ExperimentConfig,
    csv_path: &Path,
    wall_clock_secs: f64,
) -> Result<RunSummary, HarnessError> {
    let (header, rows) = read_csv(csv_path)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(loss_col), Some(ppl_col)) = (col("loss"), col("perplexity")) else {
        return Err(HarnessError::Config(format!(
            "{}: missing loss/perplexity columns",
            csv_path.display()
        )));
    };
    let losses: Vec<f64> = rows.iter().map(|r| r[loss_col]).collect();
    let ppls: Vec<f64> = rows.iter().map(|r| r[ppl_col]).collect();
    let ema_loss = ema(&losses, DEFAULT_SMOOTHING)?;
    let ema_ppl = ema(&ppls, DEFAULT_SMOOTHING)?;
    Ok(RunSummary {
        config_hash: cfg.hash(),
        final_ema_loss: *ema_loss.last().unwrap(),
        final_ema_perplexity: *ema_ppl.last().unwrap(),
        wall_clock_secs,
        metrics_csv: csv_path.to_path_buf(),
    })
}

/// One comparison axis of the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Null candidate on vs off (off renormalizes over retrieved documents).
    NullDoc,
    /// Inverse-cloze warmup on vs off.
    Ict,
    /// Candidate count k in {4, 8, 16}.
    KSweep,
}

impl AblationAxis {
    fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let named = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut cfg = base.clone();
            f(&mut cfg);
            cfg.out_dir = base.out_dir.join(name);
            (name.to_string(), cfg)
        };
        match self {
            AblationAxis::NullDoc => vec![
                named("null_on", &|c| c.null_document = true),
                named("null_off", &|c| c.null_document = false),
            ],
            AblationAxis::Ict => vec![
                named("ict_on", &|c| c.ict_warmup = true),
                named("ict_off", &|c| c.ict_warmup = false),
            ],
            AblationAxis::KSweep => [4usize, 8, 16]
                .iter()
                .map(|&k| named(&format!("k{k}"), &move |c: &mut ExperimentConfig| c.k = k))
                .collect(),
        }
    }
}

/// Runs every variant of `axis` with the base seed and writes
/// `comparison.csv` under the base output directory: a step column plus one
/// loss column per variant, aligned row for row.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
) -> Result<Vec<(String, RunSummary)>, HarnessError> {
    let variants = axis.variants(base);
    let mut summaries = Vec::with_capacity(variants.len());
    for (name, cfg) in &variants {
        summaries.push((name.clone(), run_pretrain(cfg)?));
    }

    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut steps: Option<Vec<f64>> = None;
    for (name, summary) in &summaries {
        let (header, rows) = read_csv(&summary.metrics_csv)?;
        let step_col = header.iter().position(|h| h == "step");
        let loss_col = header.iter().position(|h| h == "loss");
        let (Some(sc), Some(lc)) = (step_col, loss_col) else {
            return Err(HarnessError::Config(format!(
                "{}: missing step/loss columns",
                summary.metrics_csv.display()
            )));
        };
        let this_steps: Vec<f64> = rows.iter().map(|r| r[sc]).collect();
        match &steps {
            None => steps = Some(this_steps),
            Some(prev) if *prev == this_steps => {}
            Some(_) => {
                return Err(HarnessError::Config(format!(
                    "variant {name} is misaligned with the first variant's steps"
                )))
            }
        }
        columns.push((name.clone(), rows.iter().map(|r| r[lc]).collect()));
    }

    let steps = steps.unwrap_or_default();
    let mut body = String::from("step");
    for (name, _) in &columns {
        write!(body, ",loss_{name}").unwrap();
    }
    body.push('\n');
    for (i, step) in steps.iter().enumerate() {
        write!(body, "{step}").unwrap();
        for (_, col) in &columns {
            write!(body, ",{}", col[i]).unwrap();
        }
        body.push('\n');
    }
    fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    let cmp_path = base.out_dir.join("comparison.csv");
    fs::write(&cmp_path, body).map_err(io_err(&cmp_path))?;
    Ok(summaries)
}

/// Writes a smoothed copy of a metrics CSV. The step column is copied;
/// `lr` and `index_version` are schedule/bookkeeping columns and are copied
/// too; every other column is EMA-smoothed.
pub fn emit_smoothed(input: &Path, output: &Path, alpha: f64) -> Result<(), HarnessError> {
    let (header, rows) = read_csv(input)?;
    if rows.is_empty() {
        return Err(HarnessError::Config(format!(
            "{}: no rows to smooth",
            input.display()
        )));
    }
    let mut columns: Vec<Vec<f64>> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect();
    for (name, col) in header.iter().zip(columns.iter_mut()) {
        if name == "step" || name == "lr" || name == "index_version" {
            continue;
        }
        *col = ema(col, alpha)?;
    }
    let mut body = header.join(",");
    body.push('\n');
    for i in 0..rows.len() {
        for (c, col) in columns.iter().enumerate() {
            if c > 0 {
                body.push(',');
            }
            write!(body, "{}", col[i]).unwrap();
        }
        body.push('\n');
    }
    fs::write(output, body).map_err(io_err(output))
}
