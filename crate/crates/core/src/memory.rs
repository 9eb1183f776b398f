//! External constraint memory.
//!
//! Each constraint pair becomes one memory slot: its key is the mean of the
//! source-side embeddings of the source phrase, its value the mean of the
//! target-side embeddings of the target phrase. A learned "none" slot is
//! always appended last, so a memory over `l - 1` constraints has `l`
//! slots. Encoder states query the memory with scaled dot-product
//! attention, and an auxiliary loss supervises which slot each source token
//! should attend to.

use crate::error::{Error, Result};
use crate::span::Span;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Probability floor inside the attention loss logarithm.
pub const ATT_LOG_EPS: f64 = 1e-9;

/// A source phrase that should be translated as the given target phrase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintPair {
    pub source_phrase: Vec<usize>,
    pub target_phrase: Vec<usize>,
    /// Sentence index within the batch.
    pub origin: usize,
    pub source_span: Span,
}

impl ConstraintPair {
    pub fn new(source_phrase: Vec<usize>, target_phrase: Vec<usize>, origin: usize, source_span: Span) -> Self {
        ConstraintPair {
            source_phrase,
            target_phrase,
            origin,
            source_span,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_phrase.is_empty() || self.target_phrase.is_empty() {
            return Err(Error::Constraint("constraint phrases must be nonempty".into()));
        }
        if self.source_span.len() != self.source_phrase.len() {
            return Err(Error::Constraint(format!(
                "source span {} does not match phrase length {}",
                self.source_span,
                self.source_phrase.len()
            )));
        }
        Ok(())
    }
}

/// Embedding tables the memory is built from.
#[derive(Clone, Copy, Debug)]
pub struct MemoryTables<'a, T: Element> {
    pub source_embed: &'a Tensor<T>,
    pub target_embed: &'a Tensor<T>,
    pub key_none: &'a Tensor<T>,
    pub value_none: &'a Tensor<T>,
}

/// Keys and values as `d_k × l` matrices whose last column is the none slot.
#[derive(Clone, Debug)]
pub struct ConstraintMemory<T: Element = f32> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    /// Origin sentence of each slot; `None` for the none slot.
    pub slot_origins: Vec<Option<usize>>,
}

impl<T: Element> ConstraintMemory<T> {
    pub fn slots(&self) -> usize {
        self.slot_origins.len()
    }

    pub fn width(&self) -> usize {
        self.keys.shape()[0]
    }

    /// Slot index (0-based) of the none slot.
    pub fn none_slot(&self) -> usize {
        self.slots() - 1
    }

    pub fn key(&self, slot: usize) -> Vec<T> {
        column(&self.keys, slot)
    }

    pub fn value(&self, slot: usize) -> Vec<T> {
        column(&self.values, slot)
    }
}

fn column<T: Element>(m: &Tensor<T>, col: usize) -> Vec<T> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows).map(|r| m.data()[r * cols + col]).collect()
}

/// Memory recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    /// `d_k × l`
    pub keys: Var,
    /// `d_k × l`
    pub values: Var,
    pub slots: usize,
}

/// Tape variables of the tables feeding [`record_memory`].
#[derive(Clone, Copy, Debug)]
pub struct MemoryTableVars {
    pub source_embed: Var,
    pub target_embed: Var,
    pub key_none: Var,
    pub value_none: Var,
}

fn phrase_mean<T: Element>(tape: &mut Tape<T>, table: Var, phrase: &[usize]) -> Result<Var> {
    if phrase.is_empty() {
        return Err(Error::Constraint("empty constraint phrase".into()));
    }
    let rows = tape.gather(table, phrase)?;
    tape.mean_axis(rows, 0)
}

/// Records memory construction so gradients reach the embedding tables.
pub fn record_memory<T: Element>(
    tape: &mut Tape<T>,
    tables: MemoryTableVars,
    pairs: &[ConstraintPair],
) -> Result<MemoryVars> {
    let mut keys = Vec::with_capacity(pairs.len() + 1);
    let mut values = Vec::with_capacity(pairs.len() + 1);
    for pair in pairs {
        keys.push(phrase_mean(tape, tables.source_embed, &pair.source_phrase)?);
        values.push(phrase_mean(tape, tables.target_embed, &pair.target_phrase)?);
    }
    keys.push(tables.key_none);
    values.push(tables.value_none);
    let k_rows = tape.concat(&keys, 0)?;
    let v_rows = tape.concat(&values, 0)?;
    Ok(MemoryVars {
        keys: tape.transpose(k_rows)?,
        values: tape.transpose(v_rows)?,
        slots: pairs.len() + 1,
    })
}

/// Scaled dot-product attention from `queries` (`m × d_k`) into the memory.
/// Returns the context (`m × d_k`) and the slot probabilities (`m × l`).
///
/// With `heads > 1` the width is split into equal column blocks, each head
/// attends separately, contexts are concatenated and the returned
/// probabilities are the head average.
pub fn record_memory_attention<T: Element>(
    tape: &mut Tape<T>,
    queries: Var,
    memory: &MemoryVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let (_, d) = tape.dims(queries);
    let (dk, l) = tape.dims(memory.keys);
    if d != dk {
        return Err(Error::dim(
            "memory_attention",
            format!("query width {d}, key width {dk}"),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(
            "memory_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    if heads == 1 {
        return single_head(tape, queries, memory.keys, memory.values, d);
    }
    let dh = d / heads;
    let kt = tape.transpose(memory.keys)?;
    let vt = tape.transpose(memory.values)?;
    let mut contexts = Vec::with_capacity(heads);
    let mut prob_sum: Option<Var> = None;
    for h in 0..heads {
        let q = tape.slice_cols(queries, h * dh, dh)?;
        let k_rows = tape.slice_cols(kt, h * dh, dh)?;
        let v_rows = tape.slice_cols(vt, h * dh, dh)?;
        let k = tape.transpose(k_rows)?;
        let v = tape.transpose(v_rows)?;
        let (ctx, probs) = single_head(tape, q, k, v, dh)?;
        contexts.push(ctx);
        prob_sum = Some(match prob_sum {
            None => probs,
            Some(acc) => tape.add(acc, probs)?,
        });
    }
    let ctx = tape.concat(&contexts, 1)?;
    let probs = tape.scale(prob_sum.expect("heads >= 1"), T::one() / T::lit(heads as f64))?;
    debug_assert_eq!(tape.dims(probs).1, l);
    Ok((ctx, probs))
}

fn single_head<T: Element>(tape: &mut Tape<T>, q: Var, keys: Var, values: Var, d: usize) -> Result<(Var, Var)> {
    let scores = tape.matmul(q, keys)?;
    let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt())?;
    let probs = tape.softmax_rows(scores)?;
    let vt = tape.transpose(values)?;
    let ctx = tape.matmul(probs, vt)?;
    Ok((ctx, probs))
}

/// Builds the memory for `pairs` in the given order, none slot last.
pub fn build_memory<T: Element>(pairs: &[ConstraintPair], tables: MemoryTables<'_, T>) -> Result<ConstraintMemory<T>> {
    for p in pairs {
        if p.source_phrase.is_empty() || p.target_phrase.is_empty() {
            return Err(Error::Constraint("empty constraint phrase".into()));
        }
    }
    let mut tape = Tape::new();
    let vars = MemoryTableVars {
        source_embed: tape.leaf(&detached(tables.source_embed))?,
        target_embed: tape.leaf(&detached(tables.target_embed))?,
        key_none: tape.leaf(&detached(tables.key_none))?,
        value_none: tape.leaf(&detached(tables.value_none))?,
    };
    let mem = record_memory(&mut tape, vars, pairs)?;
    let mut slot_origins: Vec<Option<usize>> = pairs.iter().map(|p| Some(p.origin)).collect();
    slot_origins.push(None);
    Ok(ConstraintMemory {
        keys: tape.to_tensor(mem.keys),
        values: tape.to_tensor(mem.values),
        slot_origins,
    })
}

fn detached<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.clone().with_requires_grad(false)
}

/// Single-head memory attention on concrete tensors.
pub fn memory_attention<T: Element>(
    queries: &Tensor<T>,
    memory: &ConstraintMemory<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let q = tape.leaf(&detached(queries))?;
    let mem = MemoryVars {
        keys: tape.leaf(&detached(&memory.keys))?,
        values: tape.leaf(&detached(&memory.values))?,
        slots: memory.slots(),
    };
    let (ctx, probs) = record_memory_attention(&mut tape, q, &mem, 1)?;
    Ok((tape.to_tensor(ctx), tape.to_tensor(probs)))
}

/// Per-token memory slot supervision, 1-based: label `l` is the none slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLabels {
    labels: Vec<usize>,
    slots: usize,
}

impl AttentionLabels {
    pub fn new(labels: Vec<usize>, slots: usize) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Constraint("memory has no slots".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&s| s == 0 || s > slots) {
            return Err(Error::Index {
                what: "attention label",
                index: bad,
                bound: slots,
            });
        }
        Ok(AttentionLabels { labels, slots })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn zero_based(&self) -> Vec<usize> {
        self.labels.iter().map(|s| s - 1).collect()
    }
}

/// Labels every source token of the batch with the slot of the constraint
/// covering it, or with the none slot. `pairs` is the memory slot order and
/// `sentence_lens` the source lengths; labels follow the concatenated
/// batch order.
pub fn make_attention_labels(sentence_lens: &[usize], pairs: &[ConstraintPair]) -> Result<AttentionLabels> {
    let slots = pairs.len() + 1;
    let mut offsets = Vec::with_capacity(sentence_lens.len());
    let mut total = 0;
    for &len in sentence_lens {
        offsets.push(total);
        total += len;
    }
    let mut labels = vec![slots; total];
    for (slot, pair) in pairs.iter().enumerate() {
        let Some(&len) = sentence_lens.get(pair.origin) else {
            return Err(Error::Constraint(format!(
                "constraint origin {} outside batch of {}",
                pair.origin,
                sentence_lens.len()
            )));
        };
        if !pair.source_span.is_valid_for(len) {
            return Err(Error::Constraint(format!(
                "span {} outside sentence {} of length {len}",
                pair.source_span, pair.origin
            )));
        }
        for i in pair.source_span.range() {
            let label = &mut labels[offsets[pair.origin] + i];
            if *label != slots {
                return Err(Error::Constraint(format!(
                    "overlapping constraints at token {i} of sentence {}",
                    pair.origin
                )));
            }
            *label = slot + 1;
        }
    }
    AttentionLabels::new(labels, slots)
}

/// Mean over tokens of `-ln p[j, s_j]`, with the probability clamped at
/// [`ATT_LOG_EPS`].
pub fn record_attention_loss<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &AttentionLabels,
    denom: usize,
) -> Result<Var> {
    let (n, l) = tape.dims(probs);
    if n != labels.len() || l != labels.slots() {
        return Err(Error::dim(
            "attention_loss",
            format!("probs {n}x{l} vs {} labels over {} slots", labels.len(), labels.slots()),
        ));
    }
    let scale = if denom == 0 {
        T::zero()
    } else {
        T::one() / T::lit(denom as f64)
    };
    tape.neg_log_pick(probs, &labels.zero_based(), T::lit(ATT_LOG_EPS), scale)
}

pub fn attention_loss<T: Element>(probs: &Tensor<T>, labels: &AttentionLabels) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(&detached(probs))?;
    let loss = record_attention_loss(&mut tape, p, labels, labels.len())?;
    Ok(tape.scalar(loss).as_f64())
}
