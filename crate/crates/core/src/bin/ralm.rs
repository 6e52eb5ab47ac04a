//! Command-line front end for corpus generation, pretraining, ablations,
//! and metrics post-processing. Exit codes: 0 on success, 1 for config or
//! input problems, 2 for numerical failures mid-run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ralm::corpus::Vocab;
use ralm::harness::{
    emit_smoothed, run_ablation, run_pretrain, AblationAxis, ExperimentConfig, HarnessError,
    Overrides, DEFAULT_SMOOTHING,
};
use ralm::ict::{ict_pairs, ict_warmup};
use ralm::optim::AdamWConfig;
use ralm::synth::{generate_synthetic_corpus, SynthError};
use ralm::training::{extract_reader, stream_rng, ModelParams, TrainError, TrainState, STREAM_INIT};

#[derive(Parser)]
#[command(
    name = "ralm",
    version,
    about = "Retrieval-augmented masked language modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config file (plain `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override total training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the retrieved candidate count.
    #[arg(long)]
    k: Option<usize>,
    /// Disable retrieval; the candidate set degenerates to the null
    /// document and training becomes plain masked-language modeling.
    #[arg(long)]
    no_retrieval: bool,
    /// Drop the null candidate, renormalizing over retrieved documents.
    #[arg(long)]
    no_null: bool,
    /// Skip the inverse-cloze warmup.
    #[arg(long)]
    no_ict: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            total_steps: self.steps,
            k: self.k,
            no_retrieval: self.no_retrieval,
            no_null: self.no_null,
            no_ict: self.no_ict,
        });
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    /// Null candidate on vs off.
    NullDoc,
    /// Inverse-cloze warmup on vs off.
    Ict,
    /// k in {4, 8, 16}.
    KSweep,
}

#[derive(Subcommand)]
enum Command {
    /// Joint retriever+reader training with periodic checkpoints; resumes
    /// from the output directory's last checkpoint when present.
    Pretrain(RunArgs),
    /// Run every variant of one comparison axis with a shared seed and
    /// write an aligned comparison CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Inverse-cloze retriever warmup only; writes the warmed model and
    /// its warmup metrics without starting joint training.
    IctWarmup(RunArgs),
    /// Copy the reader out of the checkpoint under the config's output
    /// directory, writing reader.ckpt beside it.
    ExtractReader(RunArgs),
    /// Generate the planted-knowledge corpus, gazetteer, and month list.
    GenCorpus {
        /// Number of fact pairs (an equal number of fillers is added).
        #[arg(long, default_value_t = 64)]
        facts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for corpus.jsonl, gazetteer.txt, and months.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an EMA-smoothed copy of a metrics CSV.
    Smooth {
        /// Input CSV with a leading step column.
        csv: PathBuf,
        /// Smoothing factor in (0, 1).
        #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
        alpha: f64,
        /// Output path; defaults to the input with a .smoothed.csv suffix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Harness(HarnessError),
    Synth(SynthError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(e) => e.exit_code() as u8,
            CliError::Synth(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Harness(e) => e.fmt(f),
            CliError::Synth(e) => e.fmt(f),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Harness(e.into())
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(args) => {
            let cfg = args.config()?;
            let summary = run_pretrain(&cfg)?;
            println!("config_hash {}", summary.config_hash);
            println!("final_ema_loss {}", summary.final_ema_loss);
            println!("final_ema_perplexity {}", summary.final_ema_perplexity);
            println!("wall_clock_secs {}", summary.wall_clock_secs);
            println!("metrics {}", summary.metrics_csv.display());
        }
        Command::Ablate { run: args, axis } => {
            let cfg = args.config()?;
            let axis = match axis {
                AxisArg::NullDoc => AblationAxis::NullDoc,
                AxisArg::Ict => AblationAxis::Ict,
                AxisArg::KSweep => AblationAxis::KSweep,
            };
            let summaries = run_ablation(&cfg, axis)?;
            for (name, s) in &summaries {
                println!(
                    "{name} final_ema_loss {} final_ema_perplexity {}",
                    s.final_ema_loss, s.final_ema_perplexity
                );
            }
            let find = |n: &str| summaries.iter().find(|(name, _)| name == n);
            if let (Some((_, k8)), Some((_, k16))) = (find("k8"), find("k16")) {
                println!(
                    "k8_vs_k16_final_ema_loss_gap {}",
                    (k8.final_ema_loss - k16.final_ema_loss).abs()
                );
            }
            println!("comparison {}", cfg.out_dir.join("comparison.csv").display());
        }
        Command::IctWarmup(args) => {
            let cfg = args.config()?;
            cfg.validate()?;
            let articles = ralm::corpus::load_corpus(&cfg.corpus).map_err(HarnessError::from)?;
            let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), cfg.vocab_size)
                .map_err(HarnessError::from)?;
            let pairs = ict_pairs(&articles, &vocab, cfg.chunk_len);
            let ecfg = cfg.encoder_config(vocab.len());
            let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0);
            let mut params =
                ModelParams::init(&ecfg, false, &mut rng).map_err(TrainError::from)?;
            let history = ict_warmup(
                &mut params,
                &pairs,
                cfg.ict_steps,
                cfg.ict_batch,
                cfg.ict_peak_lr,
                AdamWConfig::default(),
                cfg.seed,
            )?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|source| HarnessError::Io {
                path: cfg.out_dir.clone(),
                source,
            })?;
            let csv = cfg.out_dir.join("ict_metrics.csv");
            let mut body = String::from("step,loss,recall_at_1\n");
            for (i, m) in history.iter().enumerate() {
                body.push_str(&format!("{},{},{}\n", i, m.loss, m.recall_at_1));
            }
            std::fs::write(&csv, body).map_err(|source| HarnessError::Io {
                path: csv.clone(),
                source,
            })?;
            let ckpt = cfg.out_dir.join("warmed.ckpt");
            params.save(&ckpt).map_err(TrainError::from)?;
            let last = history.last();
            println!(
                "final_loss {} final_recall_at_1 {}",
                last.map_or(f64::NAN, |m| m.loss),
                last.map_or(f64::NAN, |m| m.recall_at_1)
            );
            println!("metrics {}", csv.display());
            println!("model {}", ckpt.display());
        }
        Command::ExtractReader(args) => {
            let cfg = args.config()?;
            let vocab = Vocab::load(&cfg.out_dir.join("vocab.txt")).map_err(HarnessError::from)?;
            let ecfg = cfg.encoder_config(vocab.len());
            let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0);
            let template =
                ModelParams::init(&ecfg, false, &mut rng).map_err(TrainError::from)?;
            let state = TrainState::load(
                &cfg.out_dir.join("checkpoint"),
                template,
                AdamWConfig::default(),
            )?;
            let dest = cfg.out_dir.join("reader.ckpt");
            extract_reader(&state.params, &dest).map_err(TrainError::from)?;
            println!("reader {}", dest.display());
        }
        Command::GenCorpus { facts, seed, out } => {
            let files = generate_synthetic_corpus(facts, seed, &out).map_err(CliError::Synth)?;
            println!("corpus {}", files.corpus.display());
            println!("gazetteer {}", files.gazetteer.display());
            println!("months {}", files.months.display());
        }
        Command::Smooth { csv, alpha, out } => {
            let out = out.unwrap_or_else(|| {
                let stem = csv
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "metrics".into());
                csv.with_file_name(format!("{stem}.smoothed.csv"))
            });
            emit_smoothed(&csv, &out, alpha)?;
            println!("smoothed {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are config errors (exit 1), not clap's default 2,
            // which this tool reserves for numerical failures.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
