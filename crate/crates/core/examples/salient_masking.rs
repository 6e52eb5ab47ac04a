//! Salient span masking: find entity and date spans in a document, then
//! build a masking plan that hides whole salient spans first and tops up
//! with random single tokens.
//!
//!     cargo run -p ralm --example salient_masking

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralm::corpus::{chunk_articles, Article, Vocab};
use ralm::masking::{
    apply_masks, find_salient_spans, plan_masks, random_budget, salient_budget, Gazetteer, Months,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = "Kvitfjell ble grunnlagt i 1852 av en kjopmann fra Bergen . \
                Byen fikk bystatus 17 mai 1905 og jernbanen kom fem ar senere . \
                Markedet holdes fortsatt hver torsdag pa torget ved kirken . \
                Turister besoker gjerne det gamle fyret nord for havna om sommeren .";
    let article = Article {
        article_id: "demo".into(),
        text: text.into(),
    };

    let gazetteer = Gazetteer::new(["Kvitfjell", "Bergen"]);
    let months = Months::new(["januar", "mai", "desember"]);

    let vocab = Vocab::build([text], 256)?;
    let docs = chunk_articles(std::slice::from_ref(&article), &vocab, 64)?;
    let doc = &docs[0];

    let spans = find_salient_spans(&doc.tokens, &gazetteer, &months);
    println!("salient spans in {} tokens:", doc.real_len());
    for s in &spans {
        println!("  {:?} at {}..{} {:?}", s.kind, s.start, s.start + s.len, &doc.tokens[s.start..s.start + s.len]);
    }
    println!(
        "budgets for {} tokens: {} salient (15%), {} random (3.75%)",
        doc.real_len(),
        salient_budget(doc.real_len()),
        random_budget(doc.real_len())
    );

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let plan = plan_masks(doc, &spans, &mut rng)?;
    let query = apply_masks(doc, &plan);
    println!(
        "\nplan: {} salient + {} random masked tokens",
        plan.salient_token_count(),
        plan.random_token_count()
    );

    let rendered: Vec<String> = doc
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if query.mask_positions.contains(&i) {
                format!("[{t}]")
            } else {
                t.clone()
            }
        })
        .collect();
    println!("masked positions bracketed:\n{}", rendered.join(" "));

    // The query hides exactly the planned positions and remembers the
    // original ids as prediction targets.
    assert_eq!(query.mask_positions.len(), query.target_ids.len());
    Ok(())
}
