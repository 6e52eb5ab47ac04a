//! Salient span detection and masking plans.
//!
//! Salient spans are gazetteer entity mentions and dates; they are what the
//! retriever must learn to resolve, so they get the bulk of the masking
//! budget (15% of real tokens). A smaller random-span budget (3.75%) keeps
//! ordinary language modeling alive. Budgets are exact integer ceilings and
//! every span carries its own tokens, so a plan never overlaps itself and
//! never reaches into the pad tail.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

use crate::corpus::{tokenize, Document, Vocab};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {doc_id} has no salient spans; draw another document")]
    SampleRejected { doc_id: u32 },
}

/// ceil(0.15 * real_len) in exact integer arithmetic.
pub fn salient_budget(real_len: usize) -> usize {
    (15 * real_len + 99) / 100
}

/// ceil(0.0375 * real_len) in exact integer arithmetic.
pub fn random_budget(real_len: usize) -> usize {
    (375 * real_len + 9999) / 10000
}

/// Random span lengths are geometric with mean 3, hard-capped here.
pub const MAX_RANDOM_SPAN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Entity,
    Date,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalientSpan {
    pub start: usize,
    pub len: usize,
    pub kind: SpanKind,
}

/// Entity surface forms, tokenized and grouped by first token for scanning.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    by_first: HashMap<String, Vec<Vec<String>>>,
    len: usize,
}

impl Gazetteer {
    pub fn new<I, S>(entries: I) -> Gazetteer
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut gaz = Gazetteer::default();
        for entry in entries {
            let tokens = tokenize(entry.as_ref());
            if tokens.is_empty() {
                continue;
            }
            let bucket = gaz.by_first.entry(tokens[0].clone()).or_default();
            if !bucket.contains(&tokens) {
                bucket.push(tokens);
                gaz.len += 1;
            }
        }
        gaz
    }

    /// One surface form per line; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Gazetteer, MaskError> {
        let raw = fs::read_to_string(path).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Gazetteer::new(raw.lines().filter(|l| !l.trim().is_empty())))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn matches_at<'a>(&'a self, tokens: &'a [String], i: usize) -> impl Iterator<Item = usize> + 'a {
        let candidates = self.by_first.get(&tokens[i]);
        let rest = &tokens[i..];
        candidates
            .into_iter()
            .flatten()
            .filter(move |entry| rest.len() >= entry.len() && rest[..entry.len()] == entry[..])
            .map(|entry| entry.len())
    }
}

/// Month names recognized by date detection.
#[derive(Debug, Clone)]
pub struct Months {
    set: HashSet<String>,
}

impl Default for Months {
    fn default() -> Self {
        Months::new([
            "januar", "februar", "mars", "april", "mai", "juni", "juli", "august", "september",
            "oktober", "november", "desember",
        ])
    }
}

impl Months {
    pub fn new<I, S>(names: I) -> Months
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Months {
            set: names
                .into_iter()
                .flat_map(|n| tokenize(n.as_ref()))
                .collect(),
        }
    }

    /// One month name per line.
    pub fn load(path: &Path) -> Result<Months, MaskError> {
        let raw = fs::read_to_string(path).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Months::new(raw.lines().filter(|l| !l.trim().is_empty())))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.set.contains(token)
    }
}

fn year_value(token: &str) -> Option<u32> {
    if token.len() != 4 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: u32 = token.parse().ok()?;
    (1000..=2099).contains(&v).then_some(v)
}

fn day_value(token: &str) -> Option<u32> {
    if token.is_empty() || token.len() > 2 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: u32 = token.parse().ok()?;
    (1..=31).contains(&v).then_some(v)
}

/// Finds entity mentions and dates in a token sequence. Dates are standalone
/// years in 1000..=2099 and day-month pairs with an optional trailing year.
/// Overlaps are resolved longest span first, then leftmost, and entities win
/// over dates of equal length; the result is disjoint and sorted by start.
pub fn find_salient_spans(
    tokens: &[String],
    gazetteer: &Gazetteer,
    months: &Months,
) -> Vec<SalientSpan> {
    let mut candidates = Vec::new();
    for i in 0..tokens.len() {
        for len in gazetteer.matches_at(tokens, i) {
            candidates.push(SalientSpan {
                start: i,
                len,
                kind: SpanKind::Entity,
            });
        }
        if year_value(&tokens[i]).is_some() {
            candidates.push(SalientSpan {
                start: i,
                len: 1,
                kind: SpanKind::Date,
            });
        }
        if day_value(&tokens[i]).is_some()
            && i + 1 < tokens.len()
            && months.contains(&tokens[i + 1])
        {
            let with_year = i + 2 < tokens.len() && year_value(&tokens[i + 2]).is_some();
            candidates.push(SalientSpan {
                start: i,
                len: if with_year { 3 } else { 2 },
                kind: SpanKind::Date,
            });
        }
    }

    candidates.sort_by(|a, b| {
        b.len
            .cmp(&a.len)
            .then_with(|| a.start.cmp(&b.start))
            .then_with(|| {
                let rank = |k: SpanKind| match k {
                    SpanKind::Entity => 0,
                    SpanKind::Date => 1,
                };
                rank(a.kind).cmp(&rank(b.kind))
            })
    });

    let mut occupied = vec![false; tokens.len()];
    let mut kept = Vec::new();
    for span in candidates {
        let range = span.start..span.start + span.len;
        if range.clone().any(|p| occupied[p]) {
            continue;
        }
        for p in range {
            occupied[p] = true;
        }
        kept.push(span);
    }
    kept.sort_by_key(|s| s.start);
    kept
}

/// A contiguous run of masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
pub struct MaskingPlan {
    pub salient: Vec<Span>,
    pub random: Vec<Span>,
}

impl MaskingPlan {
    pub fn salient_token_count(&self) -> usize {
        self.salient.iter().map(|s| s.len).sum()
    }

    pub fn random_token_count(&self) -> usize {
        self.random.iter().map(|s| s.len).sum()
    }

    /// All masked positions, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self
            .salient
            .iter()
            .chain(&self.random)
            .flat_map(Span::positions)
            .collect();
        p.sort_unstable();
        p
    }
}

/// Draws a masking plan for one document. Salient spans are visited in a
/// shuffled order; the first drawn span is always kept (truncated to the
/// budget if it alone exceeds it), later ones only if they fit whole. Random
/// spans then fill their own budget on unoccupied positions.
///
/// A document without salient spans is rejected so the caller can redraw.
pub fn plan_masks(
    doc: &Document,
    spans: &[SalientSpan],
    rng: &mut impl Rng,
) -> Result<MaskingPlan, MaskError> {
    if spans.is_empty() {
        return Err(MaskError::SampleRejected { doc_id: doc.doc_id });
    }
    let rl = doc.real_len();
    debug_assert!(spans.iter().all(|s| s.start + s.len <= rl));

    let budget_s = salient_budget(rl);
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.shuffle(rng);

    let mut occupied = vec![false; rl];
    let mut salient = Vec::new();
    let mut used = 0;
    for (drawn, &si) in order.iter().enumerate() {
        let span = spans[si];
        let take = if drawn == 0 {
            span.len.min(budget_s)
        } else if used + span.len <= budget_s {
            span.len
        } else {
            continue;
        };
        let kept = Span {
            start: span.start,
            len: take,
        };
        for p in kept.positions() {
            occupied[p] = true;
        }
        used += take;
        salient.push(kept);
    }

    let budget_r = random_budget(rl);
    let geometric = Geometric::new(1.0 / 3.0).expect("valid geometric parameter");
    let mut random = Vec::new();
    let mut remaining = budget_r;
    let mut attempts = 0;
    let max_attempts = 20 + 8 * budget_r;
    while remaining > 0 && attempts < max_attempts {
        attempts += 1;
        let raw = 1 + geometric.sample(rng) as usize;
        let len = raw.min(MAX_RANDOM_SPAN).min(remaining);
        let start = rng.gen_range(0..rl);
        if start + len > rl {
            continue;
        }
        let span = Span { start, len };
        if span.positions().any(|p| occupied[p]) {
            continue;
        }
        for p in span.positions() {
            occupied[p] = true;
        }
        remaining -= len;
        random.push(span);
    }

    Ok(MaskingPlan { salient, random })
}

/// A chunk with its plan applied: mask ids substituted in place, original
/// ids kept as aligned targets.
#[derive(Debug, Clone)]
pub struct MaskedQuery {
    pub source_doc_id: u32,
    pub token_ids: Vec<u32>,
    pub real_len: usize,
    /// Ascending positions into `token_ids`.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`, same order.
    pub target_ids: Vec<u32>,
}

pub fn apply_masks(doc: &Document, plan: &MaskingPlan) -> MaskedQuery {
    let mut token_ids = doc.token_ids.clone();
    let mask_positions = plan.positions();
    let mut target_ids = Vec::with_capacity(mask_positions.len());
    for &p in &mask_positions {
        target_ids.push(doc.token_ids[p]);
        token_ids[p] = Vocab::MASK;
    }
    MaskedQuery {
        source_doc_id: doc.doc_id,
        token_ids,
        real_len: doc.real_len(),
        mask_positions,
        target_ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text)
    }

    #[test]
    fn detects_entities_years_and_day_month_forms() {
        let gaz = Gazetteer::new(["Bergen", "Akershus Festning"]);
        let months = Months::default();
        let tokens = toks("bergen ble nevnt 12 mai 1340 ved akershus festning i 1299");
        let spans = find_salient_spans(&tokens, &gaz, &months);
        let as_tuples: Vec<(usize, usize, SpanKind)> =
            spans.iter().map(|s| (s.start, s.len, s.kind)).collect();
        assert_eq!(
            as_tuples,
            [
                (0, 1, SpanKind::Entity),
                (3, 3, SpanKind::Date),
                (7, 2, SpanKind::Entity),
                (10, 1, SpanKind::Date),
            ]
        );
    }

    #[test]
    fn year_range_is_enforced() {
        let gaz = Gazetteer::default();
        let months = Months::default();
        for (text, hits) in [
            ("0999", 0),
            ("1000", 1),
            ("2099", 1),
            ("2100", 0),
            ("123", 0),
            ("12345", 0),
        ] {
            let spans = find_salient_spans(&toks(text), &gaz, &months);
            assert_eq!(spans.len(), hits, "{text}");
        }
    }

    #[test]
    fn day_month_without_year_is_two_tokens() {
        let gaz = Gazetteer::default();
        let months = Months::default();
        let spans = find_salient_spans(&toks("17 mai feires"), &gaz, &months);
        assert_eq!(spans, [SalientSpan { start: 0, len: 2, kind: SpanKind::Date }]);
        // 32 is not a day
        assert!(find_salient_spans(&toks("32 mai"), &gaz, &months).is_empty());
    }

    #[test]
    fn longer_spans_win_overlaps_and_entities_beat_equal_dates() {
        let months = Months::default();
        // "1814" is both a gazetteer entry and a year: entity wins the tie.
        let gaz = Gazetteer::new(["1814"]);
        let spans = find_salient_spans(&toks("i 1814 skjedde det"), &gaz, &months);
        assert_eq!(spans[0].kind, SpanKind::Entity);

        // A longer entity swallows the embedded year.
        let gaz = Gazetteer::new(["grunnloven av 1814", "1814"]);
        let spans = find_salient_spans(&toks("grunnloven av 1814"), &gaz, &months);
        assert_eq!(spans, [SalientSpan { start: 0, len: 3, kind: SpanKind::Entity }]);
    }

    #[test]
    fn detection_result_is_disjoint_and_sorted() {
        let gaz = Gazetteer::new(["mai dagen", "dagen lang"]);
        let months = Months::default();
        let tokens = toks("17 mai dagen lang 1905");
        let spans = find_salient_spans(&tokens, &gaz, &months);
        let mut seen = vec![false; tokens.len()];
        let mut last_start = 0;
        for s in &spans {
            assert!(s.start >= last_start);
            last_start = s.start;
            for p in s.start..s.start + s.len {
                assert!(!seen[p], "overlap at {p}");
                seen[p] = true;
            }
        }
    }

    #[test]
    fn budgets_are_exact_rational_ceilings() {
        // k = ceil(n*rl/d) iff k*d >= n*rl and (k-1)*d < n*rl.
        for rl in 1..=512usize {
            let s = salient_budget(rl);
            assert!(s * 100 >= 15 * rl && (s - 1) * 100 < 15 * rl, "salient at {rl}");
            let r = random_budget(rl);
            assert!(r * 10000 >= 375 * rl && (r - 1) * 10000 < 375 * rl, "random at {rl}");
        }
    }
}
