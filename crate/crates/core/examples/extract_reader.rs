//! After training, the reader is the deliverable: a masked language model
//! that consumed retrieved context during training. This extracts it from
//! a full training checkpoint into a standalone file and reloads it.
//!
//!     cargo run -p ralm --example extract_reader

use ralm::harness::{run_pretrain, ExperimentConfig};
use ralm::synth::generate_synthetic_corpus;
use ralm::training::{extract_reader, stream_rng, ModelParams, TrainState, STREAM_INIT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("ralm-extract-reader");
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
    cfg.reindex_interval = 5;
    cfg.warmup_steps = 2;
    cfg.total_steps = 10;
    cfg.ict_steps = 4;
    cfg.ict_batch = 4;
    run_pretrain(&cfg)?;

    // Reload the full checkpoint the way a resumed run would.
    let vocab = ralm::corpus::Vocab::load(&cfg.out_dir.join("vocab.txt"))?;
    let ecfg = cfg.encoder_config(vocab.len());
    let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0);
    let template = ModelParams::init(&ecfg, false, &mut rng)?;
    let state = TrainState::load(
        &cfg.out_dir.join("checkpoint"),
        template,
        cfg.train_config().adamw,
    )?;
    println!("checkpoint holds step {} of {}", state.step, cfg.total_steps);

    let reader_path = cfg.out_dir.join("reader.ckpt");
    extract_reader(&state.params, &reader_path)?;
    println!("reader written to {}", reader_path.display());

    // The standalone file restores the reader bit for bit.
    let mut fresh = ModelParams::init(&ecfg, false, &mut stream_rng(99, STREAM_INIT, 0))?;
    fresh.reader.load(&reader_path)?;
    for ((name, a), (_, b)) in state.params.reader.named_tensors().iter().zip(fresh.reader.named_tensors()) {
        assert_eq!(a.data(), b.data(), "{name} drifted through the file");
    }
    println!("reloaded reader matches the trained one exactly");
    Ok(())
}
