use lcmt_core::data::{read_corpus, save_checkpoint, CheckpointMeta};
use serde::{Deserialize, Serialize};

use super::{jsonl, precheck, tail_mean, train_on, CHECKPOINT, LOSS_LOG, REPORT_JSON, SRC_VOCAB, TGT_VOCAB};
use crate::config::{RunConfig, TrainMode};
use crate::error::Result;
use crate::output::RunDir;
use crate::{Outcome, TrainArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub steps: usize,
    /// Averages over the last `loss_window` steps.
    pub final_main_loss: f64,
    pub final_att_loss: f64,
    pub parameters: usize,
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let mut out = Outcome::default();
    if let Some(mode) = args.mode {
        cfg.train.mode = mode;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = args.n_blocks {
        cfg.model.n_blocks = n;
    }
    match cfg.train.mode {
        TrainMode::Base => {
            if args.memory_block.is_some() || args.lambda_att.is_some() {
                out.warn("base mode ignores --memory-block and --lambda-att");
            }
            cfg.model.memory_block = None;
        }
        TrainMode::Lcnmt => {
            if let Some(b) = args.memory_block {
                cfg.model.memory_block = Some(b);
            }
            if let Some(l) = args.lambda_att {
                cfg.model.lambda_att = l;
            }
            if cfg.model.memory_block.is_none() {
                return Err(lcmt_core::Error::Config("lcnmt mode needs model.memory_block".into()).into());
            }
        }
    }
    precheck(&cfg.model)?;
    cfg.train.fit_options().validate()?;

    let records = read_corpus(&args.data)?;
    let trained = train_on(&records, &cfg.model, &cfg.train, &mut out)?;
    let model = &trained.model;
    let summary = TrainSummary {
        mode: cfg.train.mode,
        steps: cfg.train.steps,
        final_main_loss: tail_mean(&trained.log, cfg.train.loss_window, |l| l.main_loss),
        final_att_loss: tail_mean(&trained.log, cfg.train.loss_window, |l| l.att_loss),
        parameters: model.params.iter().map(|(_, _, t)| t.numel()).sum(),
    };

    let mut run = RunDir::create(&args.out, "train")?;
    run.input("data", &args.data)?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        src_vocab_hash: trained.src_vocab.hash(),
        tgt_vocab_hash: trained.tgt_vocab.hash(),
        step: cfg.train.steps,
        seed: cfg.train.seed,
    };
    save_checkpoint(run.path(CHECKPOINT), &model.params, &meta)?;
    run.track(CHECKPOINT);
    run.write_json(SRC_VOCAB, &trained.src_vocab)?;
    run.write_json(TGT_VOCAB, &trained.tgt_vocab)?;
    run.write(LOSS_LOG, jsonl(&trained.log)?)?;
    run.write_json(REPORT_JSON, &summary)?;
    // The resolved config carries the model shape actually trained.
    cfg.model = model.config.clone();
    run.finish(&cfg)?;
    out.stdout = format!(
        "trained {} model ({} parameters) for {} steps: main loss {:.4}, attention loss {:.4}\n",
        summary.mode, summary.parameters, summary.steps, summary.final_main_loss, summary.final_att_loss
    );
    Ok(out)
}
