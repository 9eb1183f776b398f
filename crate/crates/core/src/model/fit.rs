//! Corpus-level training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::train::{Adam, AdamConfig, Batch, StepLosses};
use super::Model;
use crate::data::corpus::CorpusRecord;
use crate::data::vocab::{Vocab, EOS};
use crate::error::{Error, Result};
use crate::memory::ConstraintPair;
use crate::rng::derive;
use crate::tensor::Element;

/// One indexed training pair. Constraint origins are reassigned per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    /// Ends with EOS.
    pub tgt: Vec<usize>,
    pub constraints: Vec<ConstraintPair>,
}

/// Indexes records. Constraints whose source position is unknown cannot be
/// supervised and are skipped; the count of skipped ones is returned.
pub fn examples_from_records(records: &[CorpusRecord], src: &Vocab, tgt: &Vocab) -> (Vec<Example>, usize) {
    let mut skipped = 0;
    let examples = records
        .iter()
        .map(|r| {
            let mut t = tgt.encode(&r.tgt);
            t.push(EOS);
            let constraints = r
                .token_constraints()
                .into_iter()
                .filter(|c| {
                    let ok = c.src_span.is_some();
                    skipped += usize::from(!ok);
                    ok
                })
                .map(|c| c.to_pair(src, tgt, 0))
                .collect();
            Example {
                src: src.encode(&r.src),
                tgt: t,
                constraints,
            }
        })
        .collect();
    (examples, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of withholding each constraint from a training batch.
    pub constraint_dropout: f64,
    pub adam: AdamConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 2000,
            batch_size: 16,
            seed: 0,
            constraint_dropout: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.constraint_dropout) {
            return Err(Error::Config(format!(
                "constraint_dropout {} outside [0, 1]",
                self.constraint_dropout
            )));
        }
        Ok(())
    }
}

/// Trains for `opts.steps` updates over reshuffled passes of `examples`,
/// calling `on_step` after each update.
pub fn fit<T: Element>(
    model: &mut Model<T>,
    examples: &[Example],
    opts: &FitOptions,
    mut on_step: impl FnMut(&StepLosses),
) -> Result<Vec<StepLosses>> {
    opts.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let mut order_rng = derive(opts.seed, 0x5348_5546);
    let mut drop_rng = derive(opts.seed, 0x4452_4f50);
    let mut opt = Adam::new(opts.adam.clone());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut batch = Batch::default();
        while batch.len() < opts.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let origin = batch.len();
            if model.config.has_memory() {
                for c in &ex.constraints {
                    if opts.constraint_dropout > 0.0 && drop_rng.random_bool(opts.constraint_dropout) {
                        continue;
                    }
                    let mut c = c.clone();
                    c.origin = origin;
                    batch.constraints.push(c);
                }
            }
            batch.sources.push(ex.src.clone());
            batch.targets.push(ex.tgt.clone());
        }
        let losses = model.train_step(&batch, &mut opt)?;
        on_step(&losses);
        log.push(losses);
    }
    Ok(log)
}
