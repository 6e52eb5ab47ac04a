//! End-to-end harness runs on a small generated corpus: artifact layout,
//! determinism, resume behavior, and the ablation sweep.

use std::fs;
use std::path::Path;

use ralm::harness::{
    emit_smoothed, read_csv, run_ablation, run_pretrain, AblationAxis, ExperimentConfig,
    METRICS_HEADER,
};
use ralm::synth::generate_synthetic_corpus;

/// A corpus plus a config small enough for second-scale runs.
fn quick_setup(root: &Path, total_steps: usize) -> ExperimentConfig {
    let data = root.join("data");
    let files = generate_synthetic_corpus(8, 1, &data).unwrap();
    let mut cfg = ExperimentConfig::parse(&format!(
        "corpus = {}\ngazetteer = {}\nmonths = {}\n",
        files.corpus.display(),
        files.gazetteer.display(),
        files.months.display()
    ))
    .unwrap();
    cfg.out_dir = root.join("run");
    cfg.seed = 11;
    cfg.chunk_len = 10;
    cfg.max_positions = 23;
    cfg.h_dim = 8;
    cfg.ffn_dim = 12;
    cfg.vocab_size = 256;
    cfg.batch_size = 2;
    cfg.k = 2;
    cfg.reindex_interval = 3;
    cfg.warmup_steps = 2;
    cfg.total_steps = total_steps;
    cfg.ict_steps = 4;
    cfg.ict_batch = 4;
    cfg
}

#[test]
fn pretrain_writes_every_artifact_and_a_complete_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path(), 5);
    let summary = run_pretrain(&cfg).unwrap();

    assert_eq!(summary.config_hash, cfg.hash());
    assert!(summary.final_ema_loss.is_finite());
    assert!(summary.final_ema_perplexity.is_finite());
    for artifact in [
        "metrics.csv",
        "ict_metrics.csv",
        "vocab.txt",
        "config.txt",
        "summary.txt",
        "checkpoint/state.ckpt",
    ] {
        assert!(cfg.out_dir.join(artifact).exists(), "{artifact} missing");
    }

    let (header, rows) = read_csv(&summary.metrics_csv).unwrap();
    assert_eq!(header.join(","), METRICS_HEADER);
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i as f64);
        assert!(row.iter().all(|v| v.is_finite()));
    }
    // Index snapshots rotate on the reindex cadence.
    let versions: Vec<f64> = rows.iter().map(|r| r[6]).collect();
    assert_eq!(versions, [0.0, 0.0, 0.0, 3.0, 3.0]);
}

#[test]
fn identical_config_and_seed_reproduce_the_csv_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = quick_setup(dir.path(), 4);
    a.out_dir = dir.path().join("a");
    let mut b = a.clone();
    b.out_dir = dir.path().join("b");

    run_pretrain(&a).unwrap();
    run_pretrain(&b).unwrap();
    let bytes_a = fs::read(a.out_dir.join("metrics.csv")).unwrap();
    let bytes_b = fs::read(b.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    let ict_a = fs::read(a.out_dir.join("ict_metrics.csv")).unwrap();
    let ict_b = fs::read(b.out_dir.join("ict_metrics.csv")).unwrap();
    assert_eq!(ict_a, ict_b);
}

#[test]
fn rerun_resumes_idempotently_and_drops_crash_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path(), 5);
    run_pretrain(&cfg).unwrap();
    let csv_path = cfg.out_dir.join("metrics.csv");
    let original = fs::read_to_string(&csv_path).unwrap();

    // Simulate a crash that wrote past the final checkpoint: one complete
    // bogus row and one torn line.
    let mut tampered = original.clone();
    tampered.push_str("5,9.0,9.0,9.0,0.001,0.5,3\n");
    tampered.push_str("6,1.2");
    fs::write(&csv_path, &tampered).unwrap();

    let summary = run_pretrain(&cfg).unwrap();
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), original);
    assert!(summary.final_ema_loss.is_finite());
}

#[test]
fn out_dir_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path(), 3);
    run_pretrain(&cfg).unwrap();
    let mut other = cfg.clone();
    other.seed = 99;
    let err = run_pretrain(&other).unwrap_err();
    assert!(err.to_string().contains("different config"), "{err}");
}

#[test]
fn ablation_axes_emit_aligned_comparisons() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = quick_setup(dir.path(), 3);
    base.out_dir = dir.path().join("sweep");
    base.ict_steps = 2;

    let summaries = run_ablation(&base, AblationAxis::NullDoc).unwrap();
    let names: Vec<&str> = summaries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["null_on", "null_off"]);

    let (header, rows) = read_csv(&base.out_dir.join("comparison.csv")).unwrap();
    assert_eq!(header, ["step", "loss_null_on", "loss_null_off"]);
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i as f64);
    }

    // The off arm must hold the null candidate's mass at exactly zero.
    let (_, off_rows) = read_csv(&base.out_dir.join("null_off/metrics.csv")).unwrap();
    assert!(off_rows.iter().all(|r| r[5] == 0.0));
    let (_, on_rows) = read_csv(&base.out_dir.join("null_on/metrics.csv")).unwrap();
    assert!(on_rows.iter().all(|r| r[5] > 0.0));
}

#[test]
fn smoothing_respects_bookkeeping_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path(), 5);
    let summary = run_pretrain(&cfg).unwrap();
    let out = cfg.out_dir.join("metrics_smoothed.csv");
    emit_smoothed(&summary.metrics_csv, &out, 0.5).unwrap();

    let (raw_header, raw) = read_csv(&summary.metrics_csv).unwrap();
    let (header, smooth) = read_csv(&out).unwrap();
    assert_eq!(raw_header, header);
    assert_eq!(raw.len(), smooth.len());
    for (r, s) in raw.iter().zip(&smooth) {
        assert_eq!(r[0], s[0], "step copied");
        assert_eq!(r[4], s[4], "lr copied");
        assert_eq!(r[6], s[6], "index_version copied");
    }
    // First smoothed row equals the raw row; later loss values are blends.
    assert_eq!(raw[0], smooth[0]);
    let expect = 0.5 * smooth[0][1] + 0.5 * raw[1][1];
    assert!((smooth[1][1] - expect).abs() < 1e-15);
}
