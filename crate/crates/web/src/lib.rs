//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export takes plain strings and returns a JSON document, either the
//! result or `{"error": "..."}`, so the page needs no glue beyond
//! `JSON.parse`.

use std::collections::BTreeSet;

use lcmt_core::eval::{bleu_corpus, constraint_satisfaction, BleuOptions, BleuReport};
use lcmt_core::extract::{extract_consistent_phrases, filter_by_parse_spans, resolve_overlaps, Alignment};
use lcmt_core::memory::{attention_loss, memory_attention, AttentionLabels, ConstraintMemory};
use lcmt_core::tensor::Tensor;
use lcmt_core::Span;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct PhraseView {
    pub source: [usize; 2],
    pub target: [usize; 2],
    pub source_text: String,
    pub target_text: String,
}

#[derive(Debug, Serialize)]
pub struct Extraction {
    pub links: Vec<(usize, usize)>,
    /// Every consistent pair within the length limit.
    pub candidates: Vec<PhraseView>,
    /// Candidates surviving the parse filter and overlap resolution.
    pub selected: Vec<PhraseView>,
}

#[derive(Debug, Serialize)]
pub struct Attention {
    /// One row per query, one column per slot; the last column is the none slot.
    pub probs: Vec<Vec<f64>>,
    pub loss: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Bleu {
    #[serde(flatten)]
    pub report: BleuReport,
    pub csr: Option<f64>,
}

fn respond<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// Parses `0-1 1-3` as half-open spans. Blank input means no parse filter.
fn parse_spans(text: &str, len: usize) -> Result<Option<BTreeSet<Span>>, String> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    let mut out = BTreeSet::new();
    for item in text.split_whitespace() {
        let bad = || format!("span {item:?} is not start-end");
        let (a, b) = item.split_once('-').ok_or_else(bad)?;
        let span = Span::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        if span.is_empty() || !span.is_valid_for(len) {
            return Err(format!("span {item} does not fit a sentence of {len} words"));
        }
        out.insert(span);
    }
    Ok(Some(out))
}

pub fn extract(
    src: &str,
    tgt: &str,
    alignment: &str,
    src_spans: &str,
    tgt_spans: &str,
    max_phrase_len: usize,
) -> Result<Extraction, String> {
    let src: Vec<&str> = src.split_whitespace().collect();
    let tgt: Vec<&str> = tgt.split_whitespace().collect();
    let al: Alignment = alignment.parse().map_err(|e: lcmt_core::Error| e.to_string())?;
    al.check_bounds(src.len(), tgt.len()).map_err(|e| e.to_string())?;
    let view = |p: &lcmt_core::extract::PhrasePair| PhraseView {
        source: p.source.into(),
        target: p.target.into(),
        source_text: src[p.source.range()].join(" "),
        target_text: tgt[p.target.range()].join(" "),
    };
    let candidates = extract_consistent_phrases(&al, src.len(), tgt.len(), max_phrase_len.max(1));
    let kept = match (parse_spans(src_spans, src.len())?, parse_spans(tgt_spans, tgt.len())?) {
        (Some(s), Some(t)) => filter_by_parse_spans(&candidates, &s, &t),
        (Some(s), None) => candidates.iter().filter(|p| s.contains(&p.source)).copied().collect(),
        (None, Some(t)) => candidates.iter().filter(|p| t.contains(&p.target)).copied().collect(),
        (None, None) => candidates.clone(),
    };
    Ok(Extraction {
        links: al.links().collect(),
        candidates: candidates.iter().map(view).collect(),
        selected: resolve_overlaps(kept).iter().map(view).collect(),
    })
}

/// Rows of whitespace-separated numbers, all the same width.
fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("{what}: {t:?} is not a number")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(format!("{what}: nothing given"));
    }
    let width = rows[0].len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(format!("{what}: every row needs the same number of values"));
    }
    Ok(rows)
}

pub fn attend(keys: &str, queries: &str, labels: &str) -> Result<Attention, String> {
    let keys = parse_rows(keys, "keys")?;
    let queries = parse_rows(queries, "queries")?;
    let (l, d) = (keys.len(), keys[0].len());
    if queries[0].len() != d {
        return Err(format!(
            "queries have {} values per row, keys have {d}",
            queries[0].len()
        ));
    }
    let memory = ConstraintMemory {
        keys: Tensor::from_fn(&[d, l], |i| keys[i % l][i / l]),
        values: Tensor::zeros(&[d, l]),
        slot_origins: (0..l).map(|j| (j + 1 < l).then_some(0)).collect(),
    };
    let q = Tensor::from_fn(&[queries.len(), d], |i| queries[i / d][i % d]);
    let (_, probs) = memory_attention(&q, &memory).map_err(|e| e.to_string())?;
    let loss = if labels.trim().is_empty() {
        None
    } else {
        let labels: Vec<usize> = labels
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("label {t:?} is not a slot number")))
            .collect::<Result<_, _>>()?;
        if labels.len() != queries.len() {
            return Err(format!("{} labels for {} queries", labels.len(), queries.len()));
        }
        let labels = AttentionLabels::new(labels, l).map_err(|e| e.to_string())?;
        Some(attention_loss(&probs, &labels).map_err(|e| e.to_string())?)
    };
    Ok(Attention {
        probs: (0..queries.len()).map(|r| probs.row(r).to_vec()).collect(),
        loss,
    })
}

/// Constraints are `;`-separated phrases per line, aligned with the
/// hypothesis lines.
pub fn score(hyps: &str, refs: &str, constraints: &str) -> Result<Bleu, String> {
    let split = |text: &str| -> Vec<Vec<String>> {
        text.lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    let (h, r) = (split(hyps.trim_end()), split(refs.trim_end()));
    let report = bleu_corpus(&h, &r, BleuOptions::default()).map_err(|e| e.to_string())?;
    let csr = if constraints.trim().is_empty() {
        None
    } else {
        let mut per_line: Vec<Vec<Vec<String>>> = constraints
            .trim_end()
            .lines()
            .map(|l| {
                l.split(';')
                    .map(|p| p.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                    .filter(|p| !p.is_empty())
                    .collect()
            })
            .collect();
        per_line.resize(h.len(), Vec::new());
        Some(constraint_satisfaction(&h, &per_line).map_err(|e| e.to_string())?.rate)
    };
    Ok(Bleu { report, csr })
}

#[wasm_bindgen]
pub fn extract_phrase_pairs(
    src: &str,
    tgt: &str,
    alignment: &str,
    src_spans: &str,
    tgt_spans: &str,
    max_phrase_len: usize,
) -> String {
    respond(extract(src, tgt, alignment, src_spans, tgt_spans, max_phrase_len))
}

#[wasm_bindgen]
pub fn memory_attention_probs(keys: &str, queries: &str, labels: &str) -> String {
    respond(attend(keys, queries, labels))
}

#[wasm_bindgen]
pub fn bleu_score(hyps: &str, refs: &str, constraints: &str) -> String {
    respond(score(hyps, refs, constraints))
}
