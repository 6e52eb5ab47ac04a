//! Tokenization, vocabulary building, and fixed-length chunking: the path
//! from raw article text to the integer documents everything else consumes.
//!
//!     cargo run -p ralm --example tokenize_and_chunk

use ralm::corpus::{chunk_articles, tokenize, Vocab};
use ralm::synth::synthetic_articles;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let built = synthetic_articles(8, 3)?;
    let articles = &built.articles;

    let sample = &articles[0];
    let tokens = tokenize(&sample.text);
    println!("[{}] first tokens: {:?}", sample.article_id, &tokens[..10]);

    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), 512)?;
    println!(
        "vocab: {} entries (ids 0..5 are reserved: [pad] [mask] [cls] [sep] [unk])",
        vocab.len()
    );

    let docs = chunk_articles(articles, &vocab, 10)?;
    println!(
        "{} articles -> {} documents of at most 10 tokens",
        articles.len(),
        docs.len()
    );

    let doc = &docs[0];
    println!("\ndoc {} from [{}]:", doc.doc_id, doc.article_id);
    println!("  tokens {:?}", doc.tokens);
    println!("  ids    {:?}", doc.token_ids);

    // Ids round-trip back to the exact token strings.
    let back: Vec<&str> = doc.token_ids.iter().map(|&id| vocab.token(id)).collect();
    assert_eq!(back, doc.tokens.iter().map(String::as_str).collect::<Vec<_>>());
    println!("  round-trip through the vocab is lossless");
    Ok(())
}
