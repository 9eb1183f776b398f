//! Transformer encoder-decoder with an optional constraint memory sublayer.

mod config;
mod fit;
mod forward;
pub mod params;
mod train;

pub use config::{ModelConfig, Norm};
pub use fit::{examples_from_records, fit, Example, FitOptions};
pub use forward::{Forward, Layout, LN_EPS};
pub use params::init_params;
pub use train::{joint_loss, Adam, AdamConfig, Batch, LossVars, StepLosses};

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::memory::{ConstraintMemory, ConstraintPair, MemoryTables, MemoryVars};
use crate::tensor::{kernels, Element, ParamStore, Tape, Tensor};

/// Encoder states for one sentence.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Element = f32> {
    /// `m × d_model`
    pub hidden: Tensor<T>,
    /// `m × l` slot probabilities when memory was consulted.
    pub memory_probs: Option<Tensor<T>>,
}

impl<T: Element> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params })
    }

    /// Wraps existing parameters, checking that the names match `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = init_params::<T>(&config, 0);
        let missing: Vec<&str> = expected
            .names()
            .iter()
            .filter(|n| params.id(n).is_none())
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = params
            .names()
            .iter()
            .filter(|n| expected.id(n).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Config(format!(
                "parameters do not match the configuration; missing [{}], extra [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for (_, name, t) in expected.iter() {
            let got = params.by_name(name).expect("checked above");
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn forward(&self) -> Forward<'_, T> {
        Forward::new(&self.config, &self.params)
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub fn memory_tables(&self) -> Result<MemoryTables<'_, T>> {
        Ok(MemoryTables {
            source_embed: self.tensor(params::SRC_EMBED)?,
            target_embed: self.tensor(params::TGT_EMBED)?,
            key_none: self.tensor(params::KEY_NONE)?,
            value_none: self.tensor(params::VALUE_NONE)?,
        })
    }

    pub fn build_memory(&self, pairs: &[ConstraintPair]) -> Result<ConstraintMemory<T>> {
        crate::memory::build_memory(pairs, self.memory_tables()?)
    }

    fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.len() > self.config.max_len {
            return Err(Error::Length {
                len: src.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = src.iter().find(|&&t| t >= self.config.src_vocab) {
            return Err(Error::Index {
                what: "source vocabulary",
                index: bad,
                bound: self.config.src_vocab,
            });
        }
        Ok(())
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderOutput<T>> {
        self.check_source(src)?;
        let mut tape = Tape::inference();
        let (h, _) = self
            .forward()
            .encode(&mut tape, src, &Layout::new(&[src.len()]), None)?;
        Ok(EncoderOutput {
            hidden: tape.to_tensor(h),
            memory_probs: None,
        })
    }

    pub fn encode_with_memory(&self, src: &[usize], memory: &ConstraintMemory<T>) -> Result<EncoderOutput<T>> {
        self.check_source(src)?;
        if !self.config.has_memory() {
            return Err(Error::Config("model has no memory sublayer".into()));
        }
        if memory.width() != self.config.d_model || memory.slots() == 0 {
            return Err(Error::dim(
                "encode_with_memory",
                format!("memory {:?} for d_model {}", memory.keys.shape(), self.config.d_model),
            ));
        }
        let mut tape = Tape::inference();
        let mem = MemoryVars {
            keys: tape.leaf(&memory.keys)?,
            values: tape.leaf(&memory.values)?,
            slots: memory.slots(),
        };
        let (h, p) = self
            .forward()
            .encode(&mut tape, src, &Layout::new(&[src.len()]), Some(&mem))?;
        Ok(EncoderOutput {
            hidden: tape.to_tensor(h),
            memory_probs: p.map(|p| tape.to_tensor(p)),
        })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Input("decoder prefix must start with BOS".into()));
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::Length {
                len: prefix.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.tgt_vocab) {
            return Err(Error::Index {
                what: "target vocabulary",
                index: bad,
                bound: self.config.tgt_vocab,
            });
        }
        Ok(())
    }

    /// Logits at every position of each prefix (rows concatenated), or only
    /// at the last position when `last_only`.
    fn run_decoder(&self, enc: &EncoderOutput<T>, prefixes: &[&[usize]], last_only: bool) -> Result<Tensor<T>> {
        for p in prefixes {
            self.check_prefix(p)?;
        }
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let layout = Layout::new(&lens);
        let inputs: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let m = enc.len();
        let sources = vec![(0, m); prefixes.len()];
        let mut tape = Tape::inference();
        let f = self.forward();
        let h = tape.leaf(&enc.hidden)?;
        let mut x = f.decode(&mut tape, h, &sources, &inputs, &layout)?;
        if last_only {
            let rows: Vec<usize> = layout.offsets.iter().zip(&lens).map(|(&o, &l)| o + l - 1).collect();
            x = tape.gather(x, &rows)?;
        }
        let z = f.logits(&mut tape, x)?;
        Ok(tape.to_tensor(z))
    }

    /// Next-token logits after `prefix` (which starts with BOS).
    pub fn decode_step(&self, enc: &EncoderOutput<T>, prefix: &[usize]) -> Result<Vec<T>> {
        Ok(self.run_decoder(enc, &[prefix], true)?.data().to_vec())
    }

    /// Logits at every prefix position, `len × v_t`.
    pub fn decoder_logits(&self, enc: &EncoderOutput<T>, prefix: &[usize]) -> Result<Tensor<T>> {
        self.run_decoder(enc, &[prefix], false)
    }

    /// Next-token log-probabilities for several prefixes at once.
    pub fn next_log_probs(&self, enc: &EncoderOutput<T>, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.run_decoder(enc, prefixes, true)?;
        let v = self.config.tgt_vocab;
        Ok(z.data()
            .chunks_exact(v)
            .map(|row| kernels::log_softmax(row).iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    /// `Σᵢ log P(yᵢ | y<ᵢ, enc)` for a target ending in EOS.
    pub fn sequence_logprob(&self, enc: &EncoderOutput<T>, target: &[usize]) -> Result<f64> {
        if target.last() != Some(&EOS) {
            return Err(Error::Input("target must end with EOS".into()));
        }
        let mut prefix = Vec::with_capacity(target.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let z = self.run_decoder(enc, &[&prefix], false)?;
        let v = self.config.tgt_vocab;
        let mut total = 0.0;
        for (row, &y) in z.data().chunks_exact(v).zip(target) {
            if y >= v {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: y,
                    bound: v,
                });
            }
            total += kernels::log_softmax(row)[y].as_f64();
        }
        Ok(total)
    }
}
