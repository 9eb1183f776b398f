use serde::{Deserialize, Serialize};

use super::{Forward, Layout, Model};
use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::memory::{make_attention_labels, record_attention_loss, ConstraintPair};
use crate::tensor::{kernels, Element, ParamStore, Tape, Var};

/// Teacher-forced training batch. Constraint `origin` indexes `sources`;
/// constraint order is the memory slot order.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub sources: Vec<Vec<usize>>,
    /// Each target ends with EOS.
    pub targets: Vec<Vec<usize>>,
    pub constraints: Vec<ConstraintPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.sources.len() != self.targets.len() {
            return Err(Error::Input(format!(
                "{} sources but {} targets",
                self.sources.len(),
                self.targets.len()
            )));
        }
        if self.sources.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if self.targets.iter().any(|t| t.last() != Some(&EOS)) {
            return Err(Error::Input("every target must end with EOS".into()));
        }
        Ok(())
    }

    fn decoder_inputs(&self) -> (Vec<usize>, Vec<usize>, Layout) {
        let mut inputs = Vec::new();
        let mut gold = Vec::new();
        let mut lens = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            inputs.push(BOS);
            inputs.extend_from_slice(&t[..t.len() - 1]);
            gold.extend_from_slice(t);
            lens.push(t.len());
        }
        (inputs, gold, Layout::new(&lens))
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub main: Var,
    pub att: Option<Var>,
}

/// Records `main + lambda_att · att`. The main loss is the mean token cross
/// entropy over all targets; the attention loss averages over all source
/// tokens of the batch, which share one memory.
pub fn joint_loss<T: Element>(tape: &mut Tape<T>, f: &Forward<'_, T>, batch: &Batch) -> Result<LossVars> {
    batch.check()?;
    let src_lens: Vec<usize> = batch.sources.iter().map(Vec::len).collect();
    let src_layout = Layout::new(&src_lens);
    let src: Vec<usize> = batch.sources.iter().flatten().copied().collect();
    let (memory, labels) = if f.cfg.has_memory() {
        let labels = make_attention_labels(&src_lens, &batch.constraints)?;
        (Some(f.memory(tape, &batch.constraints)?), Some(labels))
    } else {
        (None, None)
    };
    let (enc, probs) = f.encode(tape, &src, &src_layout, memory.as_ref())?;
    let (inputs, gold, tgt_layout) = batch.decoder_inputs();
    let sources: Vec<(usize, usize)> = (0..batch.len()).map(|i| src_layout.span(i)).collect();
    let h = f.decode(tape, enc, &sources, &inputs, &tgt_layout)?;
    let z = f.logits(tape, h)?;
    let main = tape.cross_entropy(z, &gold, T::one() / T::lit(gold.len() as f64))?;
    let att = match (probs, labels) {
        (Some(p), Some(labels)) => Some(record_attention_loss(tape, p, &labels, src.len())?),
        _ => None,
    };
    let total = match att {
        Some(a) if f.cfg.lambda_att > 0.0 => {
            let w = tape.scale(a, T::lit(f.cfg.lambda_att))?;
            tape.add(main, w)?
        }
        _ => main,
    };
    Ok(LossVars { total, main, att })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// When set, the rate decays linearly after warmup to reach zero at
    /// this step; otherwise it stays constant.
    pub decay_until: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
            decay_until: None,
            clip: 1.0,
        }
    }
}

/// Adam with linear warmup and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let c = &self.config;
        let warm = if c.warmup == 0 {
            1.0
        } else {
            (step as f64 / c.warmup as f64).min(1.0)
        };
        let decay = match c.decay_until {
            Some(end) if step > c.warmup && end > c.warmup => {
                (end.saturating_sub(step) as f64 / (end - c.warmup) as f64).clamp(0.0, 1.0)
            }
            _ => 1.0,
        };
        c.lr * warm * decay
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> f64 {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
            self.v = self.m.clone();
        }
        let sq: f64 = store
            .iter()
            .filter_map(|(_, _, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum();
        let norm = sq.sqrt();
        let c = self.config.clone();
        let clip = if c.clip > 0.0 && norm > c.clip {
            c.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let lr = self.learning_rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let clip = T::lit(clip);
        for ((t, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let data = t.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            t.zero_grad();
        }
        norm
    }
}

/// Loss values and optimizer diagnostics of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub main_loss: f64,
    pub att_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Element> Model<T> {
    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut Adam<T>) -> Result<StepLosses> {
        let step = opt.steps_taken() + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Training {
                step,
                detail: format!("non-finite value in {op} ({} sentences in batch)", batch.len()),
            },
            other => other,
        };
        self.params.zero_grad();
        let mut tape = Tape::new();
        let f = Forward::new(&self.config, &self.params);
        let loss = joint_loss(&mut tape, &f, batch).map_err(diverged)?;
        let main = tape.scalar(loss.main).as_f64();
        let att = loss.att.map(|a| tape.scalar(a).as_f64()).unwrap_or(0.0);
        let total = tape.scalar(loss.total).as_f64();
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss is {total} (main {main}, attention {att})"),
            });
        }
        tape.backward_into(loss.total, &mut self.params).map_err(diverged)?;
        let grad_norm = opt.update(&mut self.params);
        if !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("gradient norm is {grad_norm} (main {main}, attention {att})"),
            });
        }
        Ok(StepLosses {
            step,
            main_loss: main,
            att_loss: att,
            total_loss: total,
            grad_norm,
            lr: opt.learning_rate(step),
        })
    }

    /// Summed target negative log-likelihood of each sentence in `batch`.
    pub fn sentence_losses(&self, batch: &Batch) -> Result<Vec<f64>> {
        batch.check()?;
        let f = self.forward();
        let mut tape = Tape::inference();
        let src_lens: Vec<usize> = batch.sources.iter().map(Vec::len).collect();
        let src_layout = Layout::new(&src_lens);
        let src: Vec<usize> = batch.sources.iter().flatten().copied().collect();
        let memory = if self.config.has_memory() {
            Some(f.memory(&mut tape, &batch.constraints)?)
        } else {
            None
        };
        let (enc, _) = f.encode(&mut tape, &src, &src_layout, memory.as_ref())?;
        let (inputs, gold, tgt_layout) = batch.decoder_inputs();
        let sources: Vec<(usize, usize)> = (0..batch.len()).map(|i| src_layout.span(i)).collect();
        let h = f.decode(&mut tape, enc, &sources, &inputs, &tgt_layout)?;
        let z = f.logits(&mut tape, h)?;
        let v = self.config.tgt_vocab;
        let rows: Vec<f64> = tape
            .value(z)
            .chunks_exact(v)
            .zip(&gold)
            .map(|(row, &y)| -kernels::log_softmax(row)[y].as_f64())
            .collect();
        Ok(tgt_layout
            .offsets
            .iter()
            .zip(&tgt_layout.lens)
            .map(|(&o, &l)| rows[o..o + l].iter().sum())
            .collect())
    }
}
