//! The joint training step without the experiment harness: sample masked
//! queries, retrieve top-k candidates plus the null document, marginalize
//! the reader loss over them, and update everything with AdamW.
//!
//!     cargo run -p ralm --example train_step_loop

use ralm::corpus::{chunk_articles, Vocab};
use ralm::encoders::EncoderConfig;
use ralm::masking::{Gazetteer, Months};
use ralm::synth::synthetic_articles;
use ralm::training::{
    corpus_spans, sample_batch, stream_rng, train_step, ModelParams, TrainConfig, TrainState,
    STREAM_BATCH, STREAM_INIT,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let built = synthetic_articles(8, 1)?;
    let vocab = Vocab::build(built.articles.iter().map(|a| a.text.as_str()), 256)?;
    let docs = chunk_articles(&built.articles, &vocab, 10)?;
    let gazetteer = Gazetteer::new(built.entities.iter());
    let months = Months::default();
    let spans = corpus_spans(&docs, &gazetteer, &months);

    let ecfg = EncoderConfig {
        layers: 1,
        heads: 2,
        h_dim: 8,
        ffn_dim: 12,
        max_positions: 23,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let mut cfg = TrainConfig::default();
    cfg.k = 2;
    cfg.warmup_steps = 2;
    cfg.total_steps = 12;
    cfg.reindex_interval = 4;
    let batch_size = 2;

    let seed = 11;
    let mut rng = stream_rng(seed, STREAM_INIT, 0);
    let params = ModelParams::init(&ecfg, false, &mut rng)?;
    let mut state = TrainState::new(params, &cfg, &docs, seed)?;

    println!("step  loss     ppl      null_mass  index_v");
    for _ in 0..cfg.total_steps {
        let mut batch_rng = stream_rng(seed, STREAM_BATCH, state.step as u64);
        let batch = sample_batch(&docs, &spans, batch_size, &mut batch_rng)?;
        let m = train_step(&mut state, &docs, &batch, &cfg)?;
        println!(
            "{:4}  {:.4}  {:.4}  {:.5}    {}",
            m.step, m.loss, m.perplexity, m.null_prob_mass, m.index_version
        );
    }

    // The null document soaks up posterior mass only when it competes with
    // retrieved candidates; with retrieval off it is the only candidate.
    let mut control = cfg.clone();
    control.use_retrieval = false;
    let params = ModelParams::init(&ecfg, false, &mut stream_rng(seed, STREAM_INIT, 0))?;
    let mut state = TrainState::new(params, &control, &docs, seed)?;
    let mut batch_rng = stream_rng(seed, STREAM_BATCH, 0);
    let batch = sample_batch(&docs, &spans, batch_size, &mut batch_rng)?;
    let m = train_step(&mut state, &docs, &batch, &control)?;
    assert_eq!(m.null_prob_mass, 1.0);
    println!("\nwith retrieval disabled the null document carries all mass: {}", m.null_prob_mass);
    Ok(())
}
