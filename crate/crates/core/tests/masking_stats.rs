use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralm::corpus::{chunk_articles, Article, Vocab};
use ralm::masking::{
    apply_masks, find_salient_spans, plan_masks, random_budget, salient_budget, Gazetteer,
    MaskError, Months,
};

/// One chunk-sized document with years sprinkled at fixed intervals so every
/// document has salient material.
fn make_doc(n_tokens: usize, year_every: usize) -> (Vec<ralm::corpus::Document>, Vocab) {
    let words = ["fjell", "dal", "elv", "skog", "vind", "regn", "sol", "jord"];
    let mut text = String::new();
    for i in 0..n_tokens {
        if year_every > 0 && i % year_every == year_every - 1 {
            text.push_str(&format!("{} ", 1200 + (i * 7) % 800));
        } else {
            text.push_str(words[i % words.len()]);
            text.push(' ');
        }
    }
    let articles = vec![Article {
        article_id: "a".into(),
        text,
    }];
    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), 4096).unwrap();
    let docs = chunk_articles(&articles, &vocab, n_tokens).unwrap();
    (docs, vocab)
}

#[test]
fn plans_respect_budgets_and_never_overlap() {
    let gaz = Gazetteer::default();
    let months = Months::default();
    let (docs, _) = make_doc(124, 6);
    let doc = &docs[0];
    let spans = find_salient_spans(&doc.tokens, &gaz, &months);
    assert!(!spans.is_empty());
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_masks(doc, &spans, &mut rng).unwrap();
        let rl = doc.real_len();
        assert!(plan.salient_token_count() <= salient_budget(rl));
        assert!(plan.random_token_count() <= random_budget(rl));
        assert!(!plan.salient.is_empty());
        let positions = plan.positions();
        for w in positions.windows(2) {
            assert!(w[0] < w[1], "duplicate or unsorted positions");
        }
        assert!(positions.iter().all(|&p| p < rl));
    }
}

#[test]
fn first_drawn_span_is_truncated_when_over_budget() {
    // One giant entity covering most of a short document: the salient budget
    // is smaller than the span, so the mandatory first pick must shrink.
    let text = "alfa bravo charlie delta echo foxtrot golf hotel india juliett";
    let gaz = Gazetteer::new(["alfa bravo charlie delta echo foxtrot golf"]);
    let months = Months::default();
    let articles = vec![Article {
        article_id: "a".into(),
        text: text.into(),
    }];
    let vocab = Vocab::build([text], 64).unwrap();
    let docs = chunk_articles(&articles, &vocab, 16).unwrap();
    let spans = find_salient_spans(&docs[0].tokens, &gaz, &months);
    assert_eq!(spans.len(), 1);
    assert_eq!(spans[0].len, 7);
    let budget = salient_budget(docs[0].real_len()); // ceil(0.15*10) = 2
    assert_eq!(budget, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = plan_masks(&docs[0], &spans, &mut rng).unwrap();
    assert_eq!(plan.salient_token_count(), budget);
    assert_eq!(plan.salient.len(), 1);
}

#[test]
fn documents_without_salient_spans_are_rejected() {
    let (docs, _) = make_doc(40, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = plan_masks(&docs[0], &[], &mut rng).unwrap_err();
    assert!(matches!(err, MaskError::SampleRejected { doc_id: 0 }), "{err}");
}

#[test]
fn apply_masks_aligns_targets_and_preserves_pads() {
    let gaz = Gazetteer::default();
    let months = Months::default();
    // Real length 30 inside a chunk of 48: the pad tail must stay put.
    let words = ["nord", "sør", "øst", "vest", "1723", "1899"];
    let text: String = (0..30).map(|i| format!("{} ", words[i % 6])).collect();
    let articles = vec![Article {
        article_id: "a".into(),
        text,
    }];
    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), 64).unwrap();
    let docs = chunk_articles(&articles, &vocab, 48).unwrap();
    let doc = &docs[0];
    let spans = find_salient_spans(&doc.tokens, &gaz, &months);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plan = plan_masks(doc, &spans, &mut rng).unwrap();
    let q = apply_masks(doc, &plan);

    assert_eq!(q.token_ids.len(), doc.token_ids.len());
    assert_eq!(q.real_len, 30);
    assert_eq!(q.mask_positions.len(), q.target_ids.len());
    assert!(!q.mask_positions.is_empty());
    for (i, &p) in q.mask_positions.iter().enumerate() {
        assert_eq!(q.token_ids[p], Vocab::MASK);
        assert_eq!(q.target_ids[i], doc.token_ids[p]);
        assert!(p < q.real_len);
    }
    for p in 0..doc.token_ids.len() {
        if !q.mask_positions.contains(&p) {
            assert_eq!(q.token_ids[p], doc.token_ids[p]);
        }
    }
    assert!(q.token_ids[30..].iter().all(|&id| id == Vocab::PAD));
}

#[test]
fn plans_are_deterministic_per_seed() {
    let gaz = Gazetteer::default();
    let months = Months::default();
    let (docs, _) = make_doc(100, 5);
    let spans = find_salient_spans(&docs[0].tokens, &gaz, &months);
    let plan_a = plan_masks(&docs[0], &spans, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let plan_b = plan_masks(&docs[0], &spans, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(plan_a.salient, plan_b.salient);
    assert_eq!(plan_a.random, plan_b.random);
    let plan_c = plan_masks(&docs[0], &spans, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    assert!(plan_a.salient != plan_c.salient || plan_a.random != plan_c.random);
}

/// Monte-Carlo smoke test of the realized rates on year-dense documents;
/// the full-scale statistical check lives in the acceptance suite.
#[test]
fn realized_rates_track_budgets() {
    let gaz = Gazetteer::default();
    let months = Months::default();
    let (docs, _) = make_doc(124, 6);
    let doc = &docs[0];
    let spans = find_salient_spans(&doc.tokens, &gaz, &months);
    let rl = doc.real_len() as f64;
    let mut salient_sum = 0.0;
    let mut random_sum = 0.0;
    let n = 500;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_masks(doc, &spans, &mut rng).unwrap();
        salient_sum += plan.salient_token_count() as f64 / rl;
        random_sum += plan.random_token_count() as f64 / rl;
    }
    let salient_mean = salient_sum / n as f64;
    let random_mean = random_sum / n as f64;
    assert!((0.14..=0.16).contains(&salient_mean), "salient {salient_mean}");
    assert!((0.0325..=0.0425).contains(&random_mean), "random {random_mean}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    // Plan invariants across random document shapes and seeds.
    #[test]
    fn plan_invariants_hold(n_tokens in 8usize..160, year_every in 3usize..10, seed in 0u64..1000) {
        let gaz = Gazetteer::default();
        let months = Months::default();
        let (docs, _) = make_doc(n_tokens, year_every);
        let doc = &docs[0];
        let spans = find_salient_spans(&doc.tokens, &gaz, &months);
        prop_assume!(!spans.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_masks(doc, &spans, &mut rng).unwrap();
        let rl = doc.real_len();
        prop_assert!(plan.salient_token_count() >= 1);
        prop_assert!(plan.salient_token_count() <= salient_budget(rl));
        prop_assert!(plan.random_token_count() <= random_budget(rl));
        let positions = plan.positions();
        let unique: std::collections::HashSet<_> = positions.iter().collect();
        prop_assert_eq!(unique.len(), positions.len());
        prop_assert!(positions.iter().all(|&p| p < rl));
    }
}
