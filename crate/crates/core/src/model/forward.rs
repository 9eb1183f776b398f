//! Forward computation recorded on a tape. Sentences of a batch are laid
//! out back to back; attention segments keep them from seeing each other.

use super::params::{self, positional_encoding};
use super::{ModelConfig, Norm};
use crate::error::{Error, Result};
use crate::memory::{record_memory, record_memory_attention, ConstraintPair, MemoryTableVars, MemoryVars};
use crate::tensor::{Element, ParamStore, Segment, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Row offsets of variable-length sequences concatenated into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl Layout {
    pub fn new(lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in lens {
            offsets.push(at);
            at += l;
        }
        Layout {
            lens: lens.to_vec(),
            offsets,
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn span(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.lens[i])
    }

    pub fn self_segments(&self) -> Vec<Segment> {
        self.offsets
            .iter()
            .zip(&self.lens)
            .filter(|(_, &l)| l > 0)
            .map(|(&o, &l)| Segment {
                q_start: o,
                q_len: l,
                k_start: o,
                k_len: l,
            })
            .collect()
    }
}

/// Forward pass over a parameter store.
pub struct Forward<'a, T: Element> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>) -> Self {
        Forward { cfg, store }
    }

    pub fn param(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        tape.param(self.store, id)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(tape, &format!("{prefix}.g"))?;
        let b = self.param(tape, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        xq: Var,
        xkv: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let wq = self.param(tape, &format!("{prefix}.wq"))?;
        let wk = self.param(tape, &format!("{prefix}.wk"))?;
        let wv = self.param(tape, &format!("{prefix}.wv"))?;
        let wo = self.param(tape, &format!("{prefix}.wo"))?;
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let a = tape.attention(q, k, v, self.cfg.n_heads, segments, causal)?;
        tape.matmul(a, wo)
    }

    fn ffn(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.param(tape, &format!("{prefix}.w1"))?;
        let b1 = self.param(tape, &format!("{prefix}.b1"))?;
        let w2 = self.param(tape, &format!("{prefix}.w2"))?;
        let b2 = self.param(tape, &format!("{prefix}.b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    /// Residual sublayer `f` wrapped by the layer norm `ln`.
    fn sublayer(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ln: &str,
        f: impl FnOnce(&Self, &mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        match self.cfg.norm {
            Norm::Pre => {
                let h = self.layer_norm(tape, x, ln)?;
                let y = f(self, tape, h)?;
                tape.add(x, y)
            }
            Norm::Post => {
                let y = f(self, tape, x)?;
                let r = tape.add(x, y)?;
                self.layer_norm(tape, r, ln)
            }
        }
    }

    /// Adds the memory context to the residual stream. Without a memory the
    /// pre-norm sublayer is skipped entirely and the post-norm one only
    /// normalizes.
    fn memory_sublayer(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        memory: Option<&MemoryVars>,
        probs: &mut Option<Var>,
    ) -> Result<Var> {
        let attend = |tape: &mut Tape<T>, h: Var, mem: &MemoryVars| -> Result<(Var, Var)> {
            let wm = self.param(tape, params::MEM_QUERY)?;
            let q = tape.matmul(h, wm)?;
            record_memory_attention(tape, q, mem, self.cfg.memory_heads)
        };
        match (self.cfg.norm, memory) {
            (Norm::Pre, None) => Ok(x),
            (Norm::Pre, Some(mem)) => {
                let h = self.layer_norm(tape, x, "mem.ln")?;
                let (ctx, p) = attend(tape, h, mem)?;
                *probs = Some(p);
                tape.add(x, ctx)
            }
            (Norm::Post, None) => self.layer_norm(tape, x, "mem.ln"),
            (Norm::Post, Some(mem)) => {
                let (ctx, p) = attend(tape, x, mem)?;
                *probs = Some(p);
                let r = tape.add(x, ctx)?;
                self.layer_norm(tape, r, "mem.ln")
            }
        }
    }

    /// Embedding lookup plus positions restarting at every sequence.
    fn embed(&self, tape: &mut Tape<T>, table: &str, tokens: &[usize], layout: &Layout) -> Result<Var> {
        let d = self.cfg.d_model;
        let longest = layout.lens.iter().copied().max().unwrap_or(0);
        let pe = positional_encoding(longest, d);
        let mut pos = Vec::with_capacity(tokens.len() * d);
        for &l in &layout.lens {
            pos.extend(pe[..l * d].iter().map(|&v| T::lit(v)));
        }
        let table = self.param(tape, table)?;
        let x = tape.gather(table, tokens)?;
        let pos = tape.constant(tokens.len(), d, pos)?;
        tape.add(x, pos)
    }

    pub fn memory_tables(&self, tape: &mut Tape<T>) -> Result<MemoryTableVars> {
        Ok(MemoryTableVars {
            source_embed: self.param(tape, params::SRC_EMBED)?,
            target_embed: self.param(tape, params::TGT_EMBED)?,
            key_none: self.param(tape, params::KEY_NONE)?,
            value_none: self.param(tape, params::VALUE_NONE)?,
        })
    }

    /// Memory built from the model's own embedding tables.
    pub fn memory(&self, tape: &mut Tape<T>, pairs: &[ConstraintPair]) -> Result<MemoryVars> {
        if !self.cfg.has_memory() {
            return Err(Error::Config("model has no memory sublayer".into()));
        }
        let tables = self.memory_tables(tape)?;
        record_memory(tape, tables, pairs)
    }

    /// Encoder over concatenated source sentences. With a memory sublayer
    /// configured, the chosen block attends to `memory` when given and only
    /// normalizes otherwise. Returns the hidden states and, when memory was
    /// consulted, its slot probabilities.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        layout: &Layout,
        memory: Option<&MemoryVars>,
    ) -> Result<(Var, Option<Var>)> {
        for &l in &layout.lens {
            if l > self.cfg.max_len {
                return Err(Error::Length {
                    len: l,
                    max_len: self.cfg.max_len,
                });
            }
        }
        if memory.is_some() && !self.cfg.has_memory() {
            return Err(Error::Config(
                "memory given to a model without a memory sublayer".into(),
            ));
        }
        let segments = layout.self_segments();
        let mut x = self.embed(tape, params::SRC_EMBED, tokens, layout)?;
        let mut probs = None;
        for b in 1..=self.cfg.n_blocks {
            x = self.sublayer(tape, x, &format!("enc{b}.ln1"), |f, tape, h| {
                f.attention(tape, &format!("enc{b}.self"), h, h, &segments, false)
            })?;
            if self.cfg.memory_block == Some(b) {
                x = self.memory_sublayer(tape, x, memory, &mut probs)?;
            }
            x = self.sublayer(tape, x, &format!("enc{b}.ln2"), |f, tape, h| {
                f.ffn(tape, h, &format!("enc{b}.ffn"))
            })?;
        }
        if self.cfg.norm == Norm::Pre {
            x = self.layer_norm(tape, x, params::ENC_LN)?;
        }
        Ok((x, probs))
    }

    /// Decoder hidden states for concatenated teacher-forced inputs. Item `i`
    /// cross-attends to encoder rows `sources[i] = (start, len)`.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        enc: Var,
        sources: &[(usize, usize)],
        inputs: &[usize],
        layout: &Layout,
    ) -> Result<Var> {
        if sources.len() != layout.lens.len() {
            return Err(Error::dim(
                "decode",
                format!("{} source spans for {} targets", sources.len(), layout.lens.len()),
            ));
        }
        for &l in &layout.lens {
            if l > self.cfg.max_len {
                return Err(Error::Length {
                    len: l,
                    max_len: self.cfg.max_len,
                });
            }
        }
        let self_segs = layout.self_segments();
        let cross_segs: Vec<Segment> = layout
            .offsets
            .iter()
            .zip(&layout.lens)
            .zip(sources)
            .filter(|((_, &l), _)| l > 0)
            .map(|((&o, &l), &(ks, kl))| Segment {
                q_start: o,
                q_len: l,
                k_start: ks,
                k_len: kl,
            })
            .collect();
        let mut x = self.embed(tape, params::TGT_EMBED, inputs, layout)?;
        for b in 1..=self.cfg.n_blocks {
            x = self.sublayer(tape, x, &format!("dec{b}.ln1"), |f, tape, h| {
                f.attention(tape, &format!("dec{b}.self"), h, h, &self_segs, true)
            })?;
            x = self.sublayer(tape, x, &format!("dec{b}.ln2"), |f, tape, h| {
                f.attention(tape, &format!("dec{b}.cross"), h, enc, &cross_segs, false)
            })?;
            x = self.sublayer(tape, x, &format!("dec{b}.ln3"), |f, tape, h| {
                f.ffn(tape, h, &format!("dec{b}.ffn"))
            })?;
        }
        if self.cfg.norm == Norm::Pre {
            x = self.layer_norm(tape, x, params::DEC_LN)?;
        }
        Ok(x)
    }

    pub fn logits(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let w = self.param(tape, params::OUT_W)?;
        let b = self.param(tape, params::OUT_B)?;
        let z = tape.matmul(hidden, w)?;
        tape.add_row(z, b)
    }
}
