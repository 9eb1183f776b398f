use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer normalization sits relative to each residual sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// `x + f(ln(x))`, with a final layer norm after the last block.
    #[default]
    Pre,
    /// `ln(x + f(x))`.
    Post,
}

/// Shape and loss weighting of an encoder-decoder model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub norm: Norm,
    /// 1-based encoder block holding the memory sublayer; `None` builds a
    /// plain transformer.
    pub memory_block: Option<usize>,
    /// Heads used by the memory attention. 1 is the reference path.
    pub memory_heads: usize,
    pub lambda_att: f64,
    /// Longest source sentence and longest generated target (EOS included).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 0,
            tgt_vocab: 0,
            d_model: 64,
            n_blocks: 6,
            n_heads: 4,
            ffn_width: 128,
            norm: Norm::Pre,
            memory_block: Some(2),
            memory_heads: 1,
            lambda_att: 1.0,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        if self.d_model == 0 || self.n_blocks == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return fail("d_model, n_blocks, ffn_width and max_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if let Some(b) = self.memory_block {
            if b == 0 || b > self.n_blocks {
                return fail(format!("memory_block {b} outside 1..={}", self.n_blocks));
            }
            if self.memory_heads == 0 || !self.d_model.is_multiple_of(self.memory_heads) {
                return fail(format!(
                    "d_model {} not divisible by memory_heads {}",
                    self.d_model, self.memory_heads
                ));
            }
        }
        if !(self.lambda_att >= 0.0 && self.lambda_att.is_finite()) {
            return fail(format!(
                "lambda_att must be finite and nonnegative, got {}",
                self.lambda_att
            ));
        }
        Ok(())
    }

    pub fn has_memory(&self) -> bool {
        self.memory_block.is_some()
    }
}
