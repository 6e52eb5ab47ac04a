//! Black-box tests of the command-line interface: exit codes, artifact
//! contracts, and crash recovery of a killed training process.

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ralm"))
}

fn write_config(dir: &Path, name: &str, total_steps: usize, out_dir: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(
        &path,
        format!(
            "corpus = data/corpus.jsonl\n\
             gazetteer = data/gazetteer.txt\n\
             months = data/months.txt\n\
             out_dir = {out_dir}\n\
             seed = 5\n\
             chunk_len = 10\n\
             max_positions = 23\n\
             h_dim = 8\n\
             ffn_dim = 12\n\
             batch_size = 2\n\
             k = 2\n\
             reindex_interval = 10\n\
             warmup_steps = 2\n\
             total_steps = {total_steps}\n\
             ict_steps = 4\n\
             ict_batch = 4\n"
        ),
    )
    .unwrap();
    path
}

fn gen_corpus(dir: &Path) {
    let status = bin()
        .current_dir(dir)
        .args(["gen-corpus", "--facts", "8", "--seed", "1", "--out", "data"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    write_config(dir.path(), "exp.cfg", 3, "run");

    // Success.
    let ok = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "exp.cfg"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    // Unknown flag: a usage problem is a config error.
    let usage = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "exp.cfg", "--bogus"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(usage.code(), Some(1));

    // Unreadable input.
    let missing = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "no-such-file.cfg"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(1));

    // Malformed config body.
    fs::write(dir.path().join("bad.cfg"), "shrug = on\n").unwrap();
    let unknown_key = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "bad.cfg"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(unknown_key.code(), Some(1));
}

#[test]
fn numerical_failure_aborts_with_exit_2_and_names_the_step() {
    use ralm::corpus::{chunk_articles, load_corpus, Vocab};
    use ralm::harness::ExperimentConfig;
    use ralm::training::{stream_rng, ModelParams, TrainState, STREAM_INIT};

    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let cfg_path = write_config(dir.path(), "exp.cfg", 6, "run");

    // Build the exact initial state the run would use, poison one weight
    // with NaN, and leave it as the resume checkpoint.
    let cfg = {
        let mut c = ExperimentConfig::load(&cfg_path).unwrap();
        c.corpus = dir.path().join("data/corpus.jsonl");
        c.gazetteer = dir.path().join("data/gazetteer.txt");
        c
    };
    let articles = load_corpus(&cfg.corpus).unwrap();
    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), cfg.vocab_size).unwrap();
    let docs = chunk_articles(&articles, &vocab, cfg.chunk_len).unwrap();
    let ecfg = cfg.encoder_config(vocab.len());
    let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0);
    let mut params = ModelParams::init(&ecfg, false, &mut rng).unwrap();
    params.query.named_tensors_mut()[2].1.data_mut()[0] = f64::NAN;
    let state = TrainState::new(params, &cfg.train_config(), &docs, cfg.seed).unwrap();
    let run_dir = dir.path().join("run");
    state.save(&run_dir.join("checkpoint")).unwrap();
    let on_disk = ExperimentConfig::load(&cfg_path).unwrap();
    fs::write(run_dir.join("config.txt"), on_disk.canonical()).unwrap();

    let out = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "exp.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("step 0"), "{stderr}");
}

#[test]
fn killed_training_process_resumes_to_the_reference_csv() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    write_config(dir.path(), "ref.cfg", 300, "ref");
    write_config(dir.path(), "res.cfg", 300, "res");

    let reference = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "ref.cfg"])
        .output()
        .unwrap();
    assert_eq!(reference.status.code(), Some(0), "{reference:?}");

    // Start the same run elsewhere and kill it partway through. Whether the
    // kill lands before the first checkpoint, mid-run, or after completion,
    // rerunning must converge on the identical metrics file.
    let mut child = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "res.cfg"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));
    let _ = child.kill();
    let _ = child.wait();

    let rerun = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "res.cfg"])
        .output()
        .unwrap();
    assert_eq!(rerun.status.code(), Some(0), "{rerun:?}");

    let a = fs::read(dir.path().join("ref/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("res/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn extract_reader_needs_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    write_config(dir.path(), "exp.cfg", 3, "run");

    let premature = bin()
        .current_dir(dir.path())
        .args(["extract-reader", "--config", "exp.cfg"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(premature.code(), Some(1));

    let train = bin()
        .current_dir(dir.path())
        .args(["pretrain", "--config", "exp.cfg"])
        .status()
        .unwrap();
    assert!(train.success());
    let extract = bin()
        .current_dir(dir.path())
        .args(["extract-reader", "--config", "exp.cfg"])
        .status()
        .unwrap();
    assert_eq!(extract.code(), Some(0));
    assert!(dir.path().join("run/reader.ckpt").exists());
}
