use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{beam_search, dba_decode, ModelScorer, SearchConfig};
use crate::data::corpus::{CorpusRecord, TokenConstraint};
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::eval::contains_phrase;
use crate::extract::sample_indices;
use crate::model::Model;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Plain beam search.
    Base,
    /// Hard constraints through dynamic beam allocation.
    Dba,
    /// Beam search over a memory-augmented encoding.
    Lcnmt,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Base, DecodeMode::Dba, DecodeMode::Lcnmt];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Base => "base",
            DecodeMode::Dba => "dba",
            DecodeMode::Lcnmt => "lcnmt",
        }
    }

    /// Whether the mode needs a model trained with the memory sublayer.
    pub fn needs_memory(self) -> bool {
        self == DecodeMode::Lcnmt
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecodeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decode mode {s:?} (expected base, dba or lcnmt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub beam: usize,
    pub alpha: f64,
    /// Fraction of the corpus's constraints handed to the decoder.
    pub ratio: f64,
    /// Seed of the constraint sample.
    pub seed: u64,
    /// Output budget beyond the source length.
    pub extra_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            mode: DecodeMode::Base,
            beam: 12,
            alpha: 0.6,
            ratio: 1.0,
            seed: 0,
            extra_len: 10,
        }
    }
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub id: String,
    pub mode: DecodeMode,
    pub tokens: Vec<String>,
    pub detok_text: String,
    /// Summed log-probability of the output, EOS included when emitted.
    pub score: f64,
    pub constraints_given: usize,
    pub constraints_satisfied: usize,
    pub forward_calls: usize,
    /// Target sides of the constraints given to the decoder.
    #[serde(default)]
    pub constraints: Vec<Vec<String>>,
    /// Constrained search could not meet every constraint.
    #[serde(default)]
    pub unsatisfied: bool,
}

/// Samples `round(ratio · total)` of the corpus's constraints, uniformly
/// over all sentences, and regroups them per sentence in original order.
pub fn sample_corpus_constraints(records: &[CorpusRecord], ratio: f64, seed: u64) -> Result<Vec<Vec<TokenConstraint>>> {
    let all: Vec<Vec<TokenConstraint>> = records.iter().map(CorpusRecord::token_constraints).collect();
    let flat: Vec<(usize, usize)> = all
        .iter()
        .enumerate()
        .flat_map(|(s, cs)| (0..cs.len()).map(move |c| (s, c)))
        .collect();
    let mut out = vec![Vec::new(); records.len()];
    for i in sample_indices(flat.len(), ratio, seed)? {
        let (s, c) = flat[i];
        out[s].push(all[s][c].clone());
    }
    Ok(out)
}

/// Decodes every record, in parallel over sentences. Output order follows
/// `records`, and each sentence is decoded independently, so results do
/// not depend on the thread count.
pub fn decode_corpus<T: Element>(
    model: &Model<T>,
    records: &[CorpusRecord],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    opts: &DecodeOptions,
) -> Result<Vec<DecodeResult>> {
    if opts.mode.needs_memory() != model.config.has_memory() {
        return Err(Error::Config(if model.config.has_memory() {
            format!("{} mode needs a model without the memory sublayer", opts.mode)
        } else {
            format!("{} mode needs a model trained with the memory sublayer", opts.mode)
        }));
    }
    // Base mode also samples, so its outputs can be scored against the
    // same constraints.
    let constraints = sample_corpus_constraints(records, opts.ratio, opts.seed)?;
    records
        .par_iter()
        .zip(constraints.par_iter())
        .map(|(r, cs)| decode_one(model, r, cs, src_vocab, tgt_vocab, opts))
        .collect()
}

fn decode_one<T: Element>(
    model: &Model<T>,
    record: &CorpusRecord,
    constraints: &[TokenConstraint],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    let src = src_vocab.encode(&record.src);
    let cfg = SearchConfig {
        beam: opts.beam,
        max_len: (src.len() + opts.extra_len).min(model.config.max_len),
        alpha: opts.alpha,
        ..SearchConfig::default()
    };
    let targets: Vec<Vec<usize>> = constraints.iter().map(|c| tgt_vocab.encode(&c.tgt)).collect();
    let out = match opts.mode {
        DecodeMode::Base => beam_search(&ModelScorer::new(model, &model.encode(&src)?), &cfg)?,
        DecodeMode::Dba => dba_decode(&ModelScorer::new(model, &model.encode(&src)?), &cfg, &targets)?,
        DecodeMode::Lcnmt => {
            let pairs: Vec<_> = constraints.iter().map(|c| c.to_pair(src_vocab, tgt_vocab, 0)).collect();
            let memory = model.build_memory(&pairs)?;
            let enc = model.encode_with_memory(&src, &memory)?;
            beam_search(&ModelScorer::new(model, &enc), &cfg)?
        }
    };
    let best = out.best();
    let content = best.content();
    let tokens = tgt_vocab.decode(content);
    let satisfied = targets.iter().filter(|t| contains_phrase(content, t)).count();
    Ok(DecodeResult {
        id: record.id.clone(),
        mode: opts.mode,
        detok_text: tokens.join(" "),
        tokens,
        score: best.score,
        constraints_given: constraints.len(),
        constraints_satisfied: satisfied,
        forward_calls: out.forward_calls(),
        constraints: constraints.iter().map(|c| c.tgt.clone()).collect(),
        unsatisfied: out.unsatisfied,
    })
}
