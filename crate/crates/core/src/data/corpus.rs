//! JSONL corpus records: one sentence pair per line with optional
//! alignment, parse spans and constraints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::extract::Alignment;
use crate::memory::ConstraintPair;
use crate::span::Span;

/// A constraint as stored in a corpus file, either by position or by
/// surface tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstraintSpec {
    Spans {
        src_span: Span,
        tgt_span: Span,
    },
    Tokens {
        src_tokens: Vec<String>,
        tgt_tokens: Vec<String>,
    },
}

/// Surface-level constraint with its source position when known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenConstraint {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub src_span: Option<Span>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_alignment",
        deserialize_with = "de_alignment"
    )]
    pub alignment: Option<Alignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_spans: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_spans: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Vec<ConstraintSpec>>,
    /// Fields this crate does not know, kept for round trips.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawAlignment {
    Pharaoh(String),
    Pairs(Vec<[usize; 2]>),
}

fn ser_alignment<S: Serializer>(a: &Option<Alignment>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match a {
        Some(a) => s.serialize_str(&a.to_string()),
        None => s.serialize_none(),
    }
}

fn de_alignment<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Alignment>, D::Error> {
    match Option::<RawAlignment>::deserialize(d)? {
        None => Ok(None),
        Some(RawAlignment::Pharaoh(s)) => s.parse().map(Some).map_err(serde::de::Error::custom),
        Some(RawAlignment::Pairs(p)) => Ok(Some(Alignment::new(p.into_iter().map(|[i, j]| (i, j))))),
    }
}

impl CorpusRecord {
    pub fn new(id: impl Into<String>, src: Vec<String>, tgt: Vec<String>) -> Self {
        CorpusRecord {
            id: id.into(),
            src,
            tgt,
            alignment: None,
            src_spans: None,
            tgt_spans: None,
            constraints: None,
            extra: Map::new(),
        }
    }

    /// Checks links, spans and positional constraints against the sentence
    /// lengths.
    pub fn validate(&self) -> Result<()> {
        let (s, t) = (self.src.len(), self.tgt.len());
        if let Some(a) = &self.alignment {
            a.check_bounds(s, t)?;
        }
        let check = |spans: &Option<Vec<Span>>, len: usize, side: &str| -> Result<()> {
            for sp in spans.iter().flatten() {
                if !sp.is_valid_for(len) {
                    return Err(Error::Input(format!("{side} span {sp} invalid for length {len}")));
                }
            }
            Ok(())
        };
        check(&self.src_spans, s, "source")?;
        check(&self.tgt_spans, t, "target")?;
        for c in self.constraints.iter().flatten() {
            match c {
                ConstraintSpec::Spans { src_span, tgt_span } => {
                    if !src_span.is_valid_for(s) || !tgt_span.is_valid_for(t) {
                        return Err(Error::Input(format!("constraint {src_span}->{tgt_span} out of bounds")));
                    }
                }
                ConstraintSpec::Tokens { src_tokens, tgt_tokens } => {
                    if src_tokens.is_empty() || tgt_tokens.is_empty() {
                        return Err(Error::Input("constraint with empty phrase".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Constraints as surface tokens. Token-only constraints are located at
    /// their first occurrence in the source not already claimed.
    pub fn token_constraints(&self) -> Vec<TokenConstraint> {
        let specs = self.constraints.as_deref().unwrap_or(&[]);
        let mut claimed: Vec<Span> = specs
            .iter()
            .filter_map(|c| match c {
                ConstraintSpec::Spans { src_span, .. } => Some(*src_span),
                ConstraintSpec::Tokens { .. } => None,
            })
            .collect();
        specs
            .iter()
            .map(|c| match c {
                ConstraintSpec::Spans { src_span, tgt_span } => TokenConstraint {
                    src: self.src[src_span.range()].to_vec(),
                    tgt: self.tgt[tgt_span.range()].to_vec(),
                    src_span: Some(*src_span),
                },
                ConstraintSpec::Tokens { src_tokens, tgt_tokens } => {
                    let n = src_tokens.len();
                    let found = (0..=self.src.len().saturating_sub(n))
                        .map(|a| Span::new(a, a + n))
                        .find(|sp| {
                            sp.end <= self.src.len()
                                && self.src[sp.range()] == src_tokens[..]
                                && !claimed.iter().any(|c| c.overlaps(sp))
                        });
                    if let Some(sp) = found {
                        claimed.push(sp);
                    }
                    TokenConstraint {
                        src: src_tokens.clone(),
                        tgt: tgt_tokens.clone(),
                        src_span: found,
                    }
                }
            })
            .collect()
    }
}

impl TokenConstraint {
    /// Index form for the memory. Without a known source position the span
    /// only records the phrase length, which is enough for decoding but not
    /// for attention labels.
    pub fn to_pair(&self, src_vocab: &Vocab, tgt_vocab: &Vocab, origin: usize) -> ConstraintPair {
        let span = self.src_span.unwrap_or(Span::new(0, self.src.len()));
        ConstraintPair::new(src_vocab.encode(&self.src), tgt_vocab.encode(&self.tgt), origin, span)
    }
}

/// Parses JSONL from a reader. `origin` names the source in errors.
pub fn parse_corpus<R: Read>(reader: R, origin: &Path) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            detail,
        };
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    parse_corpus(File::open(path)?, path)
}

pub fn write_records<W: Write>(records: &[CorpusRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_corpus(records: &[CorpusRecord], path: impl AsRef<Path>) -> Result<()> {
    write_records(records, BufWriter::new(File::create(path)?))
}

/// Vocabularies over all source and target tokens, constraints included.
pub fn build_vocabs(records: &[CorpusRecord]) -> (Vocab, Vocab) {
    let mut src: Vec<&str> = Vec::new();
    let mut tgt: Vec<&str> = Vec::new();
    for r in records {
        src.extend(r.src.iter().map(String::as_str));
        tgt.extend(r.tgt.iter().map(String::as_str));
        for c in r.constraints.iter().flatten() {
            if let ConstraintSpec::Tokens { src_tokens, tgt_tokens } = c {
                src.extend(src_tokens.iter().map(String::as_str));
                tgt.extend(tgt_tokens.iter().map(String::as_str));
            }
        }
    }
    (Vocab::build(src), Vocab::build(tgt))
}

/// Splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}
