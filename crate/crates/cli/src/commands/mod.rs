mod decode;
mod eval;
mod extract;
mod sweep;
mod synth;
mod train;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use lcmt_core::data::{build_vocabs, CorpusRecord, Vocab};
use lcmt_core::decode::DecodeResult;
use lcmt_core::model::{examples_from_records, fit, Model, ModelConfig, StepLosses};

pub use decode::decode;
pub use eval::{eval, EvalEntry, EvalReport};
pub use extract::extract;
pub use sweep::{sweep_blocks, SweepReport, SweepRow};
pub use synth::synth;
pub use train::{train, TrainSummary};

use crate::config::TrainConfig;
use crate::error::{CliError, Result};
use crate::Outcome;

pub const SRC_VOCAB: &str = "src_vocab.json";
pub const TGT_VOCAB: &str = "tgt_vocab.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const RESULTS: &str = "results.jsonl";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<DecodeResult>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| lcmt_core::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Mean of the last `window` values of `f` over the log.
pub fn tail_mean(log: &[StepLosses], window: usize, f: impl Fn(&StepLosses) -> f64) -> f64 {
    let n = window.max(1).min(log.len());
    if n == 0 {
        return f64::NAN;
    }
    log[log.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

pub struct Trained {
    pub model: Model,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub log: Vec<StepLosses>,
}

/// Rejects bad model shapes before any data is read.
fn precheck(model: &ModelConfig) -> Result<()> {
    let mut probe = model.clone();
    probe.src_vocab = probe.src_vocab.max(1);
    probe.tgt_vocab = probe.tgt_vocab.max(1);
    probe.validate()?;
    Ok(())
}

/// Builds vocabularies from `records` and trains a fresh model whose init
/// and batch order both follow `train.seed`.
pub fn train_on(
    records: &[CorpusRecord],
    model: &ModelConfig,
    train: &TrainConfig,
    out: &mut Outcome,
) -> Result<Trained> {
    if records.is_empty() {
        return Err(lcmt_core::Error::Input("training corpus is empty".into()).into());
    }
    let (src_vocab, tgt_vocab) = build_vocabs(records);
    let mut cfg = model.clone();
    cfg.src_vocab = src_vocab.len();
    cfg.tgt_vocab = tgt_vocab.len();
    let longest = records
        .iter()
        .map(|r| r.src.len().max(r.tgt.len() + 1))
        .max()
        .unwrap_or(0);
    if longest > cfg.max_len {
        return Err(lcmt_core::Error::Config(format!(
            "training data needs max_len {longest}, model allows {}",
            cfg.max_len
        ))
        .into());
    }
    let (examples, skipped) = examples_from_records(records, &src_vocab, &tgt_vocab);
    if cfg.has_memory() {
        if skipped > 0 {
            out.warn(format!(
                "{skipped} constraints without a located source span are not used in training"
            ));
        }
        if examples.iter().all(|e| e.constraints.is_empty()) {
            out.warn("training data has no constraints; the memory only learns its none slot");
        }
    }
    let mut model = Model::new(cfg, train.seed)?;
    let every = (train.steps / 10).max(1);
    let log = fit(&mut model, &examples, &train.fit_options(), |l| {
        if l.step % every == 0 {
            log::info!(
                "step {} main {:.4} att {:.4} lr {:.2e}",
                l.step,
                l.main_loss,
                l.att_loss,
                l.lr
            );
        }
    })?;
    Ok(Trained {
        model,
        src_vocab,
        tgt_vocab,
        log,
    })
}
