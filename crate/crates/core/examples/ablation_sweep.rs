//! Runs one ablation axis end to end: the same config with the trainable
//! null document on and off, landing aligned metrics in a comparison CSV.
//!
//!     cargo run -p ralm --example ablation_sweep

use ralm::harness::{read_csv, run_ablation, AblationAxis, ExperimentConfig};
use ralm::synth::generate_synthetic_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("ralm-ablation-sweep");
    let _ = std::fs::remove_dir_all(&root);
    let files = generate_synthetic_corpus(8, 1, &root.join("data"))?;

    let mut cfg = ExperimentConfig::default();
    cfg.corpus = files.corpus.clone();
    cfg.gazetteer = files.gazetteer.clone();
    cfg.months = Some(files.months.clone());
    cfg.out_dir = root.join("sweep");
    cfg.seed = 11;
    cfg.chunk_len = 10;
    cfg.max_positions = 23;
    cfg.h_dim = 8;
    cfg.ffn_dim = 12;
    cfg.vocab_size = 256;
    cfg.batch_size = 2;
    cfg.k = 2;
    cfg.reindex_interval = 5;
    cfg.warmup_steps = 3;
    cfg.total_steps = 15;
    cfg.ict_steps = 5;
    cfg.ict_batch = 4;

    let summaries = run_ablation(&cfg, AblationAxis::NullDoc)?;
    for (name, s) in &summaries {
        println!(
            "{name:9} final EMA loss {:.4}  perplexity {:.4}",
            s.final_ema_loss, s.final_ema_perplexity
        );
    }

    let comparison = cfg.out_dir.join("comparison.csv");
    let (header, rows) = read_csv(&comparison)?;
    println!("\n{} ({} rows)", comparison.display(), rows.len());
    println!("{}", header.join("  "));
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}", cells.join("  "));
    }

    // Both variants log every step, so the columns stay step-aligned.
    assert_eq!(rows.len(), cfg.total_steps);
    Ok(())
}
