//! End-to-end joint training of retriever and reader on a generated corpus:
//! salient span masking, top-k retrieval with a trainable null document,
//! marginalized reader loss, periodic index rebuilds, and checkpoints.
//!
//!     cargo run -p ralm --example pretrain_toy

use ralm::harness::{read_csv, run_pretrain, ExperimentConfig};
use ralm::synth::generate_synthetic_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("ralm-pretrain-toy");
    let _ = std::fs::remove_dir_all(&root);
    let files = generate_synthetic_corpus(8, 1, &root.join("data"))?;

    let mut cfg = ExperimentConfig::default();
    cfg.corpus = files.corpus.clone();
    cfg.gazetteer = files.gazetteer.clone();
    cfg.months = Some(files.months.clone());
    cfg.out_dir = root.join("run");
    cfg.seed = 11;
    cfg.chunk_len = 10;
    cfg.max_positions = 23;
    cfg.h_dim = 8;
    cfg.ffn_dim = 12;
    cfg.vocab_size = 256;
    cfg.batch_size = 2;
    cfg.k = 2;
    cfg.reindex_interval = 10;
    cfg.warmup_steps = 5;
    cfg.total_steps = 40;
    cfg.ict_steps = 10;
    cfg.ict_batch = 4;

    let summary = run_pretrain(&cfg)?;
    println!("config hash          {}", summary.config_hash);
    println!("final EMA loss       {:.4}", summary.final_ema_loss);
    println!("final EMA perplexity {:.4}", summary.final_ema_perplexity);
    println!("wall clock           {:.2}s", summary.wall_clock_secs);

    let (header, rows) = read_csv(&summary.metrics_csv)?;
    println!("\n{} steps logged to {}", rows.len(), summary.metrics_csv.display());
    println!("{}", header.join("  "));
    for row in rows.iter().step_by(10).chain(rows.last()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}", cells.join("  "));
    }

    let run_dir = summary.metrics_csv.parent().unwrap();
    println!("\nartifacts in {}:", run_dir.display());
    for entry in std::fs::read_dir(run_dir)? {
        println!("  {}", entry?.file_name().to_string_lossy());
    }
    Ok(())
}
