//! Constraint extraction from word alignments, filtered by parse spans.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ConstraintPair;
use crate::rng::seeded;
use crate::span::Span;

/// Word alignment links `(source index, target index)`, 0-based.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    links: BTreeSet<(usize, usize)>,
}

impl Alignment {
    pub fn new(links: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Alignment {
            links: links.into_iter().collect(),
        }
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains(&(i, j))
    }

    pub fn check_bounds(&self, src_len: usize, tgt_len: usize) -> Result<()> {
        match self.links.iter().find(|&&(i, j)| i >= src_len || j >= tgt_len) {
            Some(&(i, j)) => Err(Error::Input(format!(
                "alignment link {i}-{j} outside a {src_len}x{tgt_len} sentence pair"
            ))),
            None => Ok(()),
        }
    }
}

impl FromStr for Alignment {
    type Err = Error;

    /// Parses Pharaoh format: whitespace-separated `i-j` pairs.
    fn from_str(s: &str) -> Result<Self> {
        let mut links = BTreeSet::new();
        for item in s.split_whitespace() {
            let bad = || Error::Input(format!("malformed alignment link {item:?}"));
            let (i, j) = item.split_once('-').ok_or_else(bad)?;
            links.insert((i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?));
        }
        Ok(Alignment { links })
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (i, j)) in self.links.iter().enumerate() {
            if n > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}-{j}")?;
        }
        Ok(())
    }
}

/// Source and target span of an extracted phrase pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhrasePair {
    pub source: Span,
    pub target: Span,
}

impl PhrasePair {
    pub fn new(source: Span, target: Span) -> Self {
        PhrasePair { source, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    pub max_phrase_len: usize,
    pub min_phrase_len: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            max_phrase_len: 4,
            min_phrase_len: 1,
        }
    }
}

/// Every span pair whose rectangle holds at least one link, has no link
/// leaving it on either side, and whose tokens are all aligned. Both spans
/// are at most `max_phrase_len` long.
pub fn extract_consistent_phrases(
    alignment: &Alignment,
    src_len: usize,
    tgt_len: usize,
    max_phrase_len: usize,
) -> BTreeSet<PhrasePair> {
    let mut by_src: Vec<Vec<usize>> = vec![Vec::new(); src_len];
    let mut by_tgt: Vec<Vec<usize>> = vec![Vec::new(); tgt_len];
    for (i, j) in alignment.links() {
        if i < src_len && j < tgt_len {
            by_src[i].push(j);
            by_tgt[j].push(i);
        }
    }
    let mut out = BTreeSet::new();
    for a in 0..src_len {
        let (mut lo, mut hi) = (usize::MAX, 0);
        for b in a + 1..=(a + max_phrase_len).min(src_len) {
            // Every source token must be aligned, so a gap ends all spans
            // starting at `a`.
            let links = &by_src[b - 1];
            if links.is_empty() {
                break;
            }
            for &j in links {
                lo = lo.min(j);
                hi = hi.max(j + 1);
            }
            if hi - lo > max_phrase_len {
                break;
            }
            let closed = (lo..hi).all(|j| !by_tgt[j].is_empty() && by_tgt[j].iter().all(|&i| a <= i && i < b));
            if closed {
                out.insert(PhrasePair::new(Span::new(a, b), Span::new(lo, hi)));
            }
        }
    }
    out
}

/// Keeps candidates whose source span is a source parse span and whose
/// target span is a target parse span.
pub fn filter_by_parse_spans(
    candidates: &BTreeSet<PhrasePair>,
    src_spans: &BTreeSet<Span>,
    tgt_spans: &BTreeSet<Span>,
) -> BTreeSet<PhrasePair> {
    candidates
        .iter()
        .filter(|p| src_spans.contains(&p.source) && tgt_spans.contains(&p.target))
        .copied()
        .collect()
}

/// Greedy overlap resolution: longer source spans first, then leftmost;
/// a pair overlapping an already kept pair on either side is dropped.
/// The result is ordered by source position.
pub fn resolve_overlaps(pairs: impl IntoIterator<Item = PhrasePair>) -> Vec<PhrasePair> {
    let mut ordered: Vec<PhrasePair> = pairs.into_iter().collect();
    ordered.sort_by_key(|p| {
        (
            std::cmp::Reverse(p.source.len()),
            p.source.start,
            p.target.start,
            p.target.end,
        )
    });
    let mut kept: Vec<PhrasePair> = Vec::new();
    for p in ordered {
        if kept
            .iter()
            .all(|k| !k.source.overlaps(&p.source) && !k.target.overlaps(&p.target))
        {
            kept.push(p);
        }
    }
    kept.sort();
    kept
}

/// Annotations of one sentence pair the pipeline reads.
#[derive(Clone, Copy, Debug)]
pub struct Annotated<'a> {
    pub src_len: usize,
    pub tgt_len: usize,
    pub alignment: Option<&'a Alignment>,
    pub src_spans: Option<&'a [Span]>,
    pub tgt_spans: Option<&'a [Span]>,
}

/// Full pipeline producing non-overlapping phrase pairs. Missing
/// annotations give an empty result.
pub fn extract_phrase_pairs(sentence: Annotated<'_>, opts: ExtractOptions) -> Vec<PhrasePair> {
    let (Some(alignment), Some(src_spans), Some(tgt_spans)) =
        (sentence.alignment, sentence.src_spans, sentence.tgt_spans)
    else {
        return Vec::new();
    };
    let candidates = extract_consistent_phrases(alignment, sentence.src_len, sentence.tgt_len, opts.max_phrase_len);
    let src: BTreeSet<Span> = src_spans.iter().copied().collect();
    let tgt: BTreeSet<Span> = tgt_spans.iter().copied().collect();
    let kept = filter_by_parse_spans(&candidates, &src, &tgt)
        .into_iter()
        .filter(|p| p.source.len() >= opts.min_phrase_len);
    resolve_overlaps(kept)
}

/// [`extract_phrase_pairs`] materialized as token-level constraints.
pub fn extract_constraints(
    src: &[usize],
    tgt: &[usize],
    alignment: Option<&Alignment>,
    src_spans: Option<&[Span]>,
    tgt_spans: Option<&[Span]>,
    opts: ExtractOptions,
    origin: usize,
) -> Vec<ConstraintPair> {
    let sentence = Annotated {
        src_len: src.len(),
        tgt_len: tgt.len(),
        alignment,
        src_spans,
        tgt_spans,
    };
    extract_phrase_pairs(sentence, opts)
        .into_iter()
        .map(|p| {
            ConstraintPair::new(
                src[p.source.range()].to_vec(),
                tgt[p.target.range()].to_vec(),
                origin,
                p.source,
            )
        })
        .collect()
}

/// Indices of a seeded uniform sample of `round(ratio · count)` items
/// without replacement, in increasing order.
pub fn sample_indices(count: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("constraint ratio {ratio} outside [0, 1]")));
    }
    let take = (ratio * count as f64).round() as usize;
    let mut rng = seeded(seed);
    let mut picked = index::sample(&mut rng, count, take.min(count)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded subset of `items`, keeping their original order.
pub fn sample_constraints<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<Vec<T>> {
    Ok(sample_indices(items.len(), ratio, seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}
