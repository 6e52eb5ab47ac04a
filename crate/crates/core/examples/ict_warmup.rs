//! Inverse-cloze warmup: before joint training, teach the retriever to
//! match a held-out sentence to the rest of its article with an in-batch
//! contrastive loss. Only retriever tensors move; the reader stays frozen.
//!
//!     cargo run -p ralm --example ict_warmup

use ralm::corpus::Vocab;
use ralm::ict::{ict_pairs, ict_warmup};
use ralm::optim::AdamWConfig;
use ralm::synth::synthetic_articles;
use ralm::training::{stream_rng, ModelParams, STREAM_INIT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let built = synthetic_articles(8, 3)?;
    let vocab = Vocab::build(built.articles.iter().map(|a| a.text.as_str()), 512)?;
    let pairs = ict_pairs(&built.articles, &vocab, 48);
    println!("{} (sentence, remaining article) pairs", pairs.len());

    let ecfg = ralm::encoders::EncoderConfig {
        layers: 1,
        heads: 2,
        h_dim: 16,
        ffn_dim: 32,
        max_positions: 56,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let mut rng = stream_rng(9, STREAM_INIT, 0);
    let mut params = ModelParams::init(&ecfg, false, &mut rng)?;
    let reader_before: Vec<f64> = params.reader.named_tensors()[0].1.data().to_vec();

    let history = ict_warmup(
        &mut params,
        &pairs,
        60,
        8,
        5e-3,
        AdamWConfig::default(),
        9,
    )?;

    println!("\nstep   loss     recall@1");
    for (i, m) in history.iter().enumerate() {
        if i % 10 == 0 || i + 1 == history.len() {
            println!("{i:4}   {:.4}   {:.2}", m.loss, m.recall_at_1);
        }
    }
    let first = &history[0];
    let last = history.last().unwrap();
    assert!(last.loss < first.loss, "warmup should reduce the loss");

    let reader_after: Vec<f64> = params.reader.named_tensors()[0].1.data().to_vec();
    assert_eq!(reader_before, reader_after);
    println!("\nreader tensors are untouched; only the retriever moved");
    Ok(())
}
