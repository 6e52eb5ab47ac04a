//! Corpus loading, tokenization, vocabulary, and chunking.
//!
//! Articles arrive as JSONL (`article_id`, `text`). Tokenization lowercases
//! and splits letter runs, digit runs, and punctuation runs into separate
//! tokens, so `"17. mai 1814."` becomes `17 . mai 1814 .`; rejoining with
//! single spaces and tokenizing again is a fixed point. The vocabulary pins
//! five reserved ids and orders the rest by descending frequency with a
//! lexicographic tie-break, which makes it a pure function of the corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed article record: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate article id {id:?}")]
    DuplicateArticleId { id: String },
    #[error("article {id:?} has no tokens")]
    EmptyArticle { id: String },
    #[error("vocabulary cap {max} too small; five reserved tokens plus at least one corpus token are required")]
    VocabTooSmall { max: usize },
    #[error("vocabulary file {path} is corrupt: {reason}")]
    BadVocabFile { path: PathBuf, reason: String },
    #[error("chunk length must be at least 1")]
    BadChunkLen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub text: String,
}

pub fn load_corpus(path: &Path) -> Result<Vec<Article>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut articles = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let article: Article =
            serde_json::from_str(line).map_err(|source| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        if seen.insert(article.article_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateArticleId {
                id: article.article_id,
            });
        }
        articles.push(article);
    }
    Ok(articles)
}

pub fn save_corpus(path: &Path, articles: &[Article]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for article in articles {
        let line = serde_json::to_string(article).expect("article serialization is infallible");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum CharClass {
    Letter,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_ascii_digit() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Lowercases and splits into letter runs, digit runs, and punctuation runs.
/// Whitespace only separates; it never appears in a token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_class = CharClass::Other;
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        // Classify after lowercasing: expansions like 'İ' -> "i\u{307}" must
        // land in the class of what actually ends up in the token.
        for lc in c.to_lowercase() {
            let class = class_of(lc);
            if !current.is_empty() && class != current_class {
                tokens.push(std::mem::take(&mut current));
            }
            current_class = class;
            current.push(lc);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Splits text on sentence-final `.`, `!`, or `?` followed by whitespace or
/// end of input. Terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().map_or(true, |n| n.is_whitespace());
            if boundary {
                let s = current.trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                current.clear();
            }
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

pub const PAD_TOKEN: &str = "[pad]";
pub const MASK_TOKEN: &str = "[mask]";
pub const CLS_TOKEN: &str = "[cls]";
pub const SEP_TOKEN: &str = "[sep]";
pub const UNK_TOKEN: &str = "[unk]";

/// Token-to-id mapping with five pinned reserved ids. Ordinary ids follow in
/// descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const MASK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const UNK: u32 = 4;

    /// Tokenizes every text and keeps the `max_size - 5` most frequent
    /// tokens after the reserved entries.
    pub fn build<I, S>(texts: I, max_size: usize) -> Result<Vocab, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 6 {
            return Err(CorpusError::VocabTooSmall { max: max_size });
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for token in tokenize(text.as_ref()) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size - 5);

        let mut tokens: Vec<String> = [PAD_TOKEN, MASK_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Maps unknown tokens to [`Vocab::UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Vocab::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Text format: a count line, then one token per line in id order.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        writeln!(out, "{}", self.tokens.len()).unwrap();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| CorpusError::BadVocabFile {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = raw.lines();
        let count: usize = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad count line: {e}")))?;
        let tokens: Vec<String> = lines.map(|l| l.to_string()).collect();
        if tokens.len() != count {
            return Err(bad(format!(
                "count line says {count} tokens, found {}",
                tokens.len()
            )));
        }
        let expected = [PAD_TOKEN, MASK_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN];
        for (i, want) in expected.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(bad(format!("reserved token {i} is not {want:?}")));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// One fixed-length retrieval unit. `tokens` holds only the real tokens;
/// `token_ids` is padded to the configured chunk length with [`Vocab::PAD`].
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: u32,
    pub article_id: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
}

impl Document {
    pub fn real_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Splits each article's token stream into consecutive chunks of at most
/// `chunk_len` tokens. `doc_id` is the ordinal over the whole corpus, so the
/// result is aligned with index rows.
pub fn chunk_articles(
    articles: &[Article],
    vocab: &Vocab,
    chunk_len: usize,
) -> Result<Vec<Document>, CorpusError> {
    if chunk_len == 0 {
        return Err(CorpusError::BadChunkLen);
    }
    let mut docs = Vec::new();
    for article in articles {
        let tokens = tokenize(&article.text);
        if tokens.is_empty() {
            return Err(CorpusError::EmptyArticle {
                id: article.article_id.clone(),
            });
        }
        for chunk in tokens.chunks(chunk_len) {
            let mut token_ids = vocab.encode(chunk);
            token_ids.resize(chunk_len, Vocab::PAD);
            docs.push(Document {
                doc_id: docs.len() as u32,
                article_id: article.article_id.clone(),
                tokens: chunk.to_vec(),
                token_ids,
            });
        }
    }
    Ok(docs)
}
