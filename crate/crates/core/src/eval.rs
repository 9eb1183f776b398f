//! Corpus BLEU, constraint satisfaction and corpus statistics.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuOptions {
    /// For orders above one with no matches, use `1 / (total + 1)` instead
    /// of zero.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions { smooth: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 over token sequences with a single reference each.
pub fn bleu_corpus<T, H, R>(hypotheses: &[H], references: &[R], opts: BleuOptions) -> Result<BleuReport>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hypotheses.is_empty() {
        return Err(Error::Evaluation("no hypotheses to score".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Evaluation(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if opts.smooth && n > 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            0.0
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrReport {
    pub satisfied: usize,
    pub total: usize,
    /// `satisfied / total`, or 1 when there are no constraints.
    pub rate: f64,
}

pub fn contains_phrase<T: PartialEq>(hypothesis: &[T], phrase: &[T]) -> bool {
    !phrase.is_empty() && hypothesis.windows(phrase.len()).any(|w| w == phrase)
}

/// Fraction of constraints that occur contiguously in their sentence's
/// hypothesis.
pub fn constraint_satisfaction<T, H, C>(hypotheses: &[H], constraints: &[Vec<C>]) -> Result<CsrReport>
where
    T: PartialEq,
    H: AsRef<[T]>,
    C: AsRef<[T]>,
{
    if hypotheses.len() != constraints.len() {
        return Err(Error::Evaluation(format!(
            "{} hypotheses but {} constraint lists",
            hypotheses.len(),
            constraints.len()
        )));
    }
    let mut satisfied = 0;
    let mut total = 0;
    for (h, cs) in hypotheses.iter().zip(constraints) {
        for c in cs {
            total += 1;
            if contains_phrase(h.as_ref(), c.as_ref()) {
                satisfied += 1;
            }
        }
    }
    let rate = if total == 0 {
        1.0
    } else {
        satisfied as f64 / total as f64
    };
    Ok(CsrReport { satisfied, total, rate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_phrases: usize,
    pub n_words_in_phrases: usize,
    pub n_subwords_in_phrases: usize,
    /// Subwords in phrases divided by all sentences, phrase-less ones
    /// included.
    pub avg_constraints_per_sentence: f64,
}

/// Counts phrases per sentence. `subwords` maps a word to its number of
/// subword units; without it every word counts as one.
pub fn corpus_stats<S, P, W>(sentences: &[S], subwords: Option<&dyn Fn(&str) -> usize>) -> CorpusStats
where
    S: AsRef<[P]>,
    P: AsRef<[W]>,
    W: AsRef<str>,
{
    let mut stats = CorpusStats {
        n_sentences: sentences.len(),
        n_phrases: 0,
        n_words_in_phrases: 0,
        n_subwords_in_phrases: 0,
        avg_constraints_per_sentence: 0.0,
    };
    for phrases in sentences {
        for phrase in phrases.as_ref() {
            stats.n_phrases += 1;
            for w in phrase.as_ref() {
                stats.n_words_in_phrases += 1;
                stats.n_subwords_in_phrases += subwords.map_or(1, |f| f(w.as_ref()));
            }
        }
    }
    stats.avg_constraints_per_sentence = average(stats.n_subwords_in_phrases, stats.n_sentences);
    stats
}

pub fn average(count: usize, sentences: usize) -> f64 {
    if sentences == 0 {
        0.0
    } else {
        count as f64 / sentences as f64
    }
}

/// Plain-text table with right-aligned numeric columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Table {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (c, w) in width.iter().enumerate() {
                let cell = cells.get(c).map(String::as_str).unwrap_or("");
                if c == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        if !self.title.is_empty() {
            writeln!(f, "{}", self.title)?;
        }
        writeln!(f, "{}", line(&self.header))?;
        let total: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        writeln!(f, "{}", "-".repeat(total))?;
        for row in &self.rows {
            writeln!(f, "{}", line(row))?;
        }
        Ok(())
    }
}
