//! Exact inner-product retrieval over a flat index: embed every document
//! with the retrieval encoder, search by scaled dot product, exclude the
//! query's own document, and round-trip the index through a file.
//!
//!     cargo run -p ralm --example topk_search

use rand::SeedableRng as _;
use ralm::corpus::{chunk_articles, Vocab};
use ralm::encoders::{encode_doc_vec, EncoderConfig, EncoderParams, Role};
use ralm::index::FlatIndex;
use ralm::synth::synthetic_articles;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let built = synthetic_articles(8, 3)?;
    let vocab = Vocab::build(built.articles.iter().map(|a| a.text.as_str()), 512)?;
    let docs = chunk_articles(&built.articles, &vocab, 20)?;

    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        h_dim: 16,
        ffn_dim: 32,
        max_positions: 24,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let params = EncoderParams::init(&cfg, Role::Retrieval, &mut rng)?;

    let index = FlatIndex::build(&params, &docs, 1)?;
    println!("indexed {} documents at h_dim {}", index.len(), index.h_dim());

    // Probe with a document's own embedding. Inner product is not a metric:
    // a longer document vector pointing the same way can outscore the exact
    // self-match, so the probe is merely expected among the top hits.
    let probe = &docs[0];
    let q = encode_doc_vec(&params, probe)?;
    let hits = index.top_k(&q, 5, None)?;
    println!("\ntop 5 for doc {} ({}):", probe.doc_id, probe.article_id);
    for &id in &hits {
        let d = &docs[id as usize];
        println!(
            "  doc {:3}  score {:+.4}  [{}]",
            id,
            index.similarity(&q, id)?,
            d.article_id
        );
    }

    // During training a query never retrieves the document it was masked
    // from; exclusion removes exactly one id and keeps the order otherwise.
    let rest = index.top_k(&q, 5, Some(hits[0]))?;
    assert!(!rest.contains(&hits[0]));
    println!("with doc {} excluded the best match is doc {}", hits[0], rest[0]);

    let path = std::env::temp_dir().join("ralm-topk.idx");
    index.save(&path)?;
    let reloaded = FlatIndex::load(&path)?;
    assert_eq!(reloaded.top_k(&q, 5, None)?, hits);
    println!("\nindex round-trips through {}", path.display());
    Ok(())
}
