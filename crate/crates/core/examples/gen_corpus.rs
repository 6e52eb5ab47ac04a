//! Generates the synthetic evaluation corpus and shows what lands on disk:
//! a JSONL article file, the entity gazetteer, and the month list.
//!
//! Every fact is an (entity, year) pair planted in two different articles,
//! so a model can only recover a masked year cheaply by retrieving the
//! partner article. Run with:
//!
//!     cargo run -p ralm --example gen_corpus

use ralm::corpus::load_corpus;
use ralm::synth::generate_synthetic_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("ralm-gen-corpus");
    let files = generate_synthetic_corpus(12, 7, &out)?;

    println!("corpus    {}", files.corpus.display());
    println!("gazetteer {}", files.gazetteer.display());
    println!("months    {}", files.months.display());

    let articles = load_corpus(&files.corpus)?;
    println!("\n{} articles (12 fact pairs + 12 fillers)", articles.len());
    for a in articles.iter().take(3) {
        println!("\n[{}]\n{}", a.article_id, a.text);
    }

    let gaz = std::fs::read_to_string(&files.gazetteer)?;
    let entities: Vec<&str> = gaz.lines().collect();
    println!(
        "\n{} gazetteer entities, e.g. {:?}",
        entities.len(),
        &entities[..4.min(entities.len())]
    );
    Ok(())
}
