//! Synthetic corpus with a planted retrieval signal.
//!
//! Each fact pair shares one invented place name and one year that appear
//! nowhere else. Masking the year in one article of a pair leaves it
//! recoverable only from the other, so a retriever that finds the partner
//! chunk gives the reader information no amount of local context can.
//! Filler articles carry dates and years from a disjoint range and no
//! entities; they pad the index with plausible distractors.
//!
//! Every article is exactly [`ARTICLE_TOKEN_LEN`] tokens: two sentences of
//! [`SENTENCE_TOKEN_LEN`]. Chunked at sentence length, chunks and sentences
//! coincide, so inverse-cloze pairs drawn from an article are exactly its
//! two chunks and the warmup trains both retrieval encoders on the same
//! text the index and the masked queries are made of. Fact sentences carry
//! 7 single-token salient spans (6 entity mentions plus the planted year)
//! against a per-chunk salient budget of 6: one pair-identifying token
//! always survives masking. Single-token spans also make the greedy fill
//! exact at any budget, pinning the corpus-wide masking rates.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{save_corpus, Article, CorpusError};

/// Token count of every generated article, sentence terminators included.
pub const ARTICLE_TOKEN_LEN: usize = 80;

/// Token count of each of an article's two sentences. Chunking at this
/// length yields one chunk per sentence.
pub const SENTENCE_TOKEN_LEN: usize = 40;

const MIN_FACTS: usize = 8;

const NAME_PREFIXES: [&str; 16] = [
    "varg", "sol", "kvit", "eik", "mold", "bratt", "nord", "lyse", "gran", "havn", "stein",
    "bjorn", "ulve", "elg", "hjort", "rein",
];

const NAME_SUFFIXES: [&str; 14] = [
    "nes", "vik", "stad", "heim", "berg", "lund", "dal", "foss", "vang", "mo", "tun", "sund",
    "bakk", "voll",
];

const MONTH_NAMES: [&str; 12] = [
    "januar",
    "februar",
    "mars",
    "april",
    "mai",
    "juni",
    "juli",
    "august",
    "september",
    "oktober",
    "november",
    "desember",
];

/// Padding vocabulary: no digits, no month names, no name-pool compounds.
const PAD_WORDS: [&str; 32] = [
    "og", "ved", "elva", "langs", "den", "gamle", "veien", "mellom", "fjella", "ligger", "mange",
    "sma", "garder", "som", "driver", "med", "sau", "skog", "handel", "fisk", "torget", "byen",
    "bygda", "folk", "kysten", "vinteren", "sommeren", "havna", "bater", "kirkebakken", "sentrum",
    "dalen",
];

/// Years used by fillers and incidental dates, disjoint from the planted
/// range so no filler can leak a planted fact.
const FILLER_YEARS: [u32; 16] = [
    1014, 1039, 1066, 1093, 1121, 1148, 1177, 1204, 1231, 1259, 1286, 1313, 1341, 1368, 1395,
    1422,
];

const DAY_NUMBERS: [u32; 6] = [3, 7, 11, 17, 21, 26];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {MIN_FACTS} fact pairs, got {got}")]
    TooFewFacts { got: usize },
    #[error("name pool supports at most {max} fact pairs, got {got}")]
    TooManyFacts { got: usize, max: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The in-memory form of a generated corpus: articles plus the planted
/// entity names the gazetteer must list.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    pub entities: Vec<String>,
}

/// Paths written by [`generate_synthetic_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub corpus: PathBuf,
    pub gazetteer: PathBuf,
    pub months: PathBuf,
}

/// The year planted for pair `i`. Distinct per pair and disjoint from
/// [`FILLER_YEARS`].
fn planted_year(i: usize) -> u32 {
    1500 + 2 * i as u32
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Appends `core`, pads with filler words to `len - 1` tokens, then closes
/// with a sentence terminator, so the sentence is exactly `len` tokens.
fn sentence(out: &mut Vec<String>, core: &[&str], len: usize, rng: &mut ChaCha8Rng) {
    debug_assert!(core.len() + 1 <= len, "core alone exceeds sentence budget");
    out.extend(core.iter().map(|w| w.to_string()));
    for _ in core.len()..len - 1 {
        out.push(pick(rng, &PAD_WORDS).to_string());
    }
    out.push(".".to_string());
}

/// One article of a fact pair: two sentences of [`SENTENCE_TOKEN_LEN`]
/// tokens, each carrying 8 entity mentions plus the planted year, all as
/// single-token salient spans. Both articles of a pair use the same
/// sentence skeletons and differ only in their padding draws, so the
/// entity and year are the only tokens that tie a chunk to its pair:
/// nothing else in the corpus separates one pair from another. Chunked at
/// sentence length, every chunk holds 9 salient singles against a salient
/// budget of 6, so three pair-identifying tokens survive masking, and each
/// of the pair's other three chunks spells out every masked salient token.
fn fact_article(entity: &str, year: u32, rng: &mut ChaCha8Rng) -> String {
    let e = entity;
    let y = year.to_string();

    let mut tokens = Vec::with_capacity(ARTICLE_TOKEN_LEN);
    sentence(
        &mut tokens,
        &[
            e, "ble", "grunnlagt", "i", &y, "ved", e, "og", "jernbanen", "kom", "til", e, "da",
            "handelen", "vokste", "og", e, "fikk", "bystatus", "mens", e, "holdt", "marked",
            "ved", e, "sa", e, "vokste", "rundt", e,
        ],
        SENTENCE_TOKEN_LEN,
        rng,
    );
    sentence(
        &mut tokens,
        &[
            "byen", e, "har", "et", "museum", "om", e, "som", "viser", "aret", &y, "og", "folk",
            "besoker", e, "nar", e, "holder", "marked", "for", e, "ligger", "ved", "elva", "og",
            e, "har", "skole", "mens", e, "har", "posthus", "ved", e,
        ],
        SENTENCE_TOKEN_LEN,
        rng,
    );
    debug_assert_eq!(tokens.len(), ARTICLE_TOKEN_LEN);
    tokens.join(" ")
}

/// A filler article: no entities, no planted years. Each sentence carries
/// one three-token date plus three filler years, mass 6, exactly the
/// salient budget of a sentence-length chunk; the whole article's mass of
/// 12 likewise equals the budget at 80 tokens, so greedy fills stay exact.
fn filler_article(rng: &mut ChaCha8Rng) -> String {
    let mut year = || FILLER_YEARS[rng.gen_range(0..FILLER_YEARS.len())].to_string();
    let (dy1, dy2) = (year(), year());
    let (y1, y2, y3, y4, y5, y6) = (year(), year(), year(), year(), year(), year());
    let d1 = DAY_NUMBERS[rng.gen_range(0..DAY_NUMBERS.len())].to_string();
    let d2 = DAY_NUMBERS[rng.gen_range(0..DAY_NUMBERS.len())].to_string();
    let m1 = pick(rng, &MONTH_NAMES);
    let m2 = pick(rng, &MONTH_NAMES);

    let mut tokens = Vec::with_capacity(ARTICLE_TOKEN_LEN);
    sentence(
        &mut tokens,
        &[
            "byen", "holdt", "marked", "den", &d1, m1, &dy1, "og", "havna", "apnet", "i", &y1,
            "mens", "fisket", "tok", "seg", "opp", "i", &y2, "og", "handelen", "vokste",
            "etter", &y3,
        ],
        SENTENCE_TOKEN_LEN,
        rng,
    );
    sentence(
        &mut tokens,
        &[
            "skolen", "sto", "ferdig", "den", &d2, m2, &dy2, "og", "kirken", "ble", "malt",
            "i", &y4, "for", "veien", "kom", "i", &y5, "sa", "bygda", "vokste", "fra", &y6,
        ],
        SENTENCE_TOKEN_LEN,
        rng,
    );
    debug_assert_eq!(tokens.len(), ARTICLE_TOKEN_LEN);
    tokens.join(" ")
}

/// Builds `num_facts` fact pairs plus `num_facts` fillers in memory. Same
/// seed, same corpus, byte for byte.
pub fn synthetic_articles(num_facts: usize, seed: u64) -> Result<SyntheticCorpus, SynthError> {
    if num_facts < MIN_FACTS {
        return Err(SynthError::TooFewFacts { got: num_facts });
    }
    let max = NAME_PREFIXES.len() * NAME_SUFFIXES.len();
    if num_facts > max {
        return Err(SynthError::TooManyFacts {
            got: num_facts,
            max,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<String> = NAME_PREFIXES
        .iter()
        .flat_map(|p| NAME_SUFFIXES.iter().map(move |s| format!("{p}{s}")))
        .collect();
    let chosen = rand::seq::index::sample(&mut rng, combos.len(), num_facts);
    let mut entities: Vec<String> = chosen.iter().map(|i| std::mem::take(&mut combos[i])).collect();
    entities.sort();

    let mut articles = Vec::with_capacity(2 * num_facts + num_facts);
    for (i, entity) in entities.iter().enumerate() {
        let year = planted_year(i);
        articles.push(Article {
            article_id: format!("fact-{i:03}-a"),
            text: fact_article(entity, year, &mut rng),
        });
        articles.push(Article {
            article_id: format!("fact-{i:03}-b"),
            text: fact_article(entity, year, &mut rng),
        });
    }
    for i in 0..num_facts {
        articles.push(Article {
            article_id: format!("filler-{i:03}"),
            text: filler_article(&mut rng),
        });
    }

    Ok(SyntheticCorpus { articles, entities })
}

fn write_lines(path: &Path, lines: &[impl AsRef<str>]) -> Result<(), SynthError> {
    let mut body = String::new();
    for l in lines {
        body.push_str(l.as_ref());
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates the corpus and writes `corpus.jsonl`, `gazetteer.txt`, and
/// `months.txt` under `out_dir`.
pub fn generate_synthetic_corpus(
    num_facts: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusFiles, SynthError> {
    let built = synthetic_articles(num_facts, seed)?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let files = CorpusFiles {
        corpus: out_dir.join("corpus.jsonl"),
        gazetteer: out_dir.join("gazetteer.txt"),
        months: out_dir.join("months.txt"),
    };
    save_corpus(&files.corpus, &built.articles)?;
    write_lines(&files.gazetteer, &built.entities)?;
    write_lines(&files.months, &MONTH_NAMES)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn fact_count_bounds_are_enforced() {
        assert!(matches!(
            synthetic_articles(7, 0),
            Err(SynthError::TooFewFacts { got: 7 })
        ));
        assert!(matches!(
            synthetic_articles(225, 0),
            Err(SynthError::TooManyFacts { got: 225, max: 224 })
        ));
    }

    #[test]
    fn shape_is_fixed_and_deterministic() {
        let a = synthetic_articles(8, 42).unwrap();
        let b = synthetic_articles(8, 42).unwrap();
        assert_eq!(a.articles.len(), 24);
        assert_eq!(a.entities.len(), 8);
        for (x, y) in a.articles.iter().zip(&b.articles) {
            assert_eq!(x.article_id, y.article_id);
            assert_eq!(x.text, y.text);
        }
        for art in &a.articles {
            assert_eq!(
                tokenize(&art.text).len(),
                ARTICLE_TOKEN_LEN,
                "{}",
                art.article_id
            );
        }
        let c = synthetic_articles(8, 43).unwrap();
        assert!(a.articles.iter().zip(&c.articles).any(|(x, y)| x.text != y.text));
    }

    #[test]
    fn planted_tokens_stay_inside_their_pair() {
        let built = synthetic_articles(12, 7).unwrap();
        for (i, entity) in built.entities.iter().enumerate() {
            let year = planted_year(i).to_string();
            let holders: Vec<&str> = built
                .articles
                .iter()
                .filter(|a| tokenize(&a.text).contains(entity))
                .map(|a| a.article_id.as_str())
                .collect();
            assert_eq!(
                holders,
                [
                    format!("fact-{i:03}-a").as_str(),
                    format!("fact-{i:03}-b").as_str()
                ],
                "entity {entity}"
            );
            let year_holders: Vec<&str> = built
                .articles
                .iter()
                .filter(|a| tokenize(&a.text).contains(&year))
                .map(|a| a.article_id.as_str())
                .collect();
            assert_eq!(year_holders, holders, "year {year}");
        }
    }
}
