//! Greedy, beam and constrained beam search.

mod corpus;
mod search;

pub use corpus::{decode_corpus, sample_corpus_constraints, DecodeMode, DecodeOptions, DecodeResult};

pub use search::{beam_search, dba_decode, greedy, Hypothesis, SearchConfig, SearchOutput};

use crate::data::vocab::BOS;
use crate::error::Result;
use crate::model::{EncoderOutput, Model};
use crate::tensor::Element;

/// Next-token distributions for a batch of generated prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// One log-probability row per prefix. Prefixes hold generated tokens
    /// only (no BOS).
    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with a model's decoder over a fixed encoding.
pub struct ModelScorer<'a, T: Element> {
    pub model: &'a Model<T>,
    pub enc: &'a EncoderOutput<T>,
}

impl<'a, T: Element> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, enc: &'a EncoderOutput<T>) -> Self {
        ModelScorer { model, enc }
    }
}

impl<T: Element> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let with_bos: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = with_bos.iter().map(Vec::as_slice).collect();
        self.model.next_log_probs(self.enc, &refs)
    }
}
