use proptest::prelude::*;
use ralm::corpus::{
    chunk_articles, load_corpus, save_corpus, tokenize, Article, CorpusError, Vocab,
};

fn article(id: &str, text: &str) -> Article {
    Article {
        article_id: id.to_string(),
        text: text.to_string(),
    }
}

#[test]
fn corpus_jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let articles = vec![
        article("a-0", "Bergen ligger ved fjorden."),
        article("b-0", "Vinteren i 1888 var kald, ca. -20."),
    ];
    save_corpus(&path, &articles).unwrap();
    let loaded = load_corpus(&path).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].article_id, "a-0");
    assert_eq!(loaded[1].text, articles[1].text);
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    std::fs::write(
        &path,
        "{\"article_id\":\"a\",\"text\":\"ok\"}\nnot json at all\n",
    )
    .unwrap();
    let err = load_corpus(&path).unwrap_err();
    assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
}

#[test]
fn duplicate_article_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let articles = vec![article("same", "en"), article("same", "to")];
    save_corpus(&path, &articles).unwrap();
    let err = load_corpus(&path).unwrap_err();
    assert!(matches!(err, CorpusError::DuplicateArticleId { .. }), "{err}");
}

#[test]
fn vocab_file_round_trips_and_validates_reserved_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = Vocab::build(["fjell og fjord og hav"], 32).unwrap();
    v.save(&path).unwrap();
    let loaded = Vocab::load(&path).unwrap();
    assert_eq!(loaded.len(), v.len());
    for t in ["fjell", "og", "fjord", "hav", "ukjent"] {
        assert_eq!(loaded.id(t), v.id(t));
    }

    // Corrupt the reserved region and expect a rejection.
    let mut text = std::fs::read_to_string(&path).unwrap();
    text = text.replacen("[mask]", "[wrong]", 1);
    std::fs::write(&path, text).unwrap();
    let err = Vocab::load(&path).unwrap_err();
    assert!(matches!(err, CorpusError::BadVocabFile { .. }), "{err}");
}

#[test]
fn chunking_pads_tail_and_numbers_docs_globally() {
    let articles = vec![
        article("long", "en to tre fire fem seks syv"),
        article("short", "bare tre ord"),
    ];
    let vocab = Vocab::build(articles.iter().map(|a| a.text.as_str()), 64).unwrap();
    let docs = chunk_articles(&articles, &vocab, 3).unwrap();
    assert_eq!(docs.len(), 4); // 7 tokens -> 3 chunks, 3 tokens -> 1 chunk
    assert_eq!(
        docs.iter().map(|d| d.doc_id).collect::<Vec<_>>(),
        [0, 1, 2, 3]
    );
    assert_eq!(docs[2].article_id, "long");
    assert_eq!(docs[2].real_len(), 1);
    assert_eq!(docs[2].token_ids.len(), 3);
    assert_eq!(&docs[2].token_ids[1..], [Vocab::PAD, Vocab::PAD]);
    assert_eq!(docs[3].article_id, "short");
    // Real prefix must encode exactly the surface tokens.
    for doc in &docs {
        for (i, t) in doc.tokens.iter().enumerate() {
            assert_eq!(doc.token_ids[i], vocab.id(t));
        }
        assert!(doc.token_ids[doc.real_len()..]
            .iter()
            .all(|&id| id == Vocab::PAD));
    }
}

#[test]
fn chunking_rejects_articles_with_no_tokens() {
    let articles = vec![article("empty", "   ")];
    let vocab = Vocab::build(["noe"], 16).unwrap();
    let err = chunk_articles(&articles, &vocab, 4).unwrap_err();
    assert!(matches!(err, CorpusError::EmptyArticle { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    // Tokenization is a fixed point on its own space-joined output.
    #[test]
    fn tokenize_is_idempotent(text in "[a-zA-Z0-9 .,!?:;()æøåÆØÅ-]{0,80}") {
        let once = tokenize(&text);
        let rejoined = once.join(" ");
        let twice = tokenize(&rejoined);
        prop_assert_eq!(once, twice);
    }

    // No token mixes character classes or contains whitespace.
    #[test]
    fn tokens_are_single_class(text in "\\PC{0,60}") {
        for token in tokenize(&text) {
            prop_assert!(!token.chars().any(char::is_whitespace));
            let classes: std::collections::HashSet<u8> = token
                .chars()
                .map(|c| {
                    if c.is_alphabetic() { 0 }
                    else if c.is_ascii_digit() { 1 }
                    else { 2 }
                })
                .collect();
            prop_assert!(classes.len() <= 1, "token {:?} mixes classes", token);
        }
    }
}
