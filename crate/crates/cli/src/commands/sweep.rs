use lcmt_core::data::{homograph_accuracy, read_corpus};
use lcmt_core::decode::{decode_corpus, DecodeMode, DecodeOptions};
use lcmt_core::eval::{bleu_corpus, constraint_satisfaction, BleuOptions, Table};
use serde::{Deserialize, Serialize};

use super::synth::HOMOGRAPHS;
use super::{jsonl, precheck, tail_mean, train_on, LOSS_LOG, REPORT_JSON, REPORT_TXT, RESULTS};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::RunDir;
use crate::{Outcome, SweepArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: usize,
    pub final_main_loss: f64,
    pub final_att_loss: f64,
    pub bleu: f64,
    pub csr: f64,
    pub homograph_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub memory: bool,
    pub ratio: f64,
    /// Largest BLEU difference between rows attributable to run-to-run
    /// noise. Every row trains from the same seed on the same batches and
    /// decoding is deterministic, so this is zero.
    pub noise_bound: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn table(&self) -> Table {
        let title = if self.memory {
            format!("BLEU by memory block (constraint ratio {:.0}%)", self.ratio * 100.0)
        } else {
            "BLEU by block, memory disabled".to_string()
        };
        let mut t = Table::new(
            title,
            &["block", "main loss", "att loss", "BLEU", "CSR", "homograph acc"],
        );
        for r in &self.rows {
            t.push(vec![
                format!("Block {}", r.block),
                format!("{:.4}", r.final_main_loss),
                format!("{:.4}", r.final_att_loss),
                format!("{:.2}", r.bleu),
                format!("{:.4}", r.csr),
                r.homograph_accuracy.map_or_else(|| "-".into(), |a| format!("{a:.4}")),
            ]);
        }
        t
    }
}

/// Trains one model per memory block position on `data/train.jsonl` and
/// scores it on `data/test.jsonl`.
pub fn sweep_blocks(args: &SweepArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(b) = &args.blocks {
        cfg.sweep.blocks = b.0.clone();
    }
    if let Some(n) = args.n_blocks {
        cfg.model.n_blocks = n;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = args.ratio {
        cfg.sweep.ratio = r;
    }
    cfg.sweep.no_memory |= args.no_memory;
    let memory = !cfg.sweep.no_memory;
    if cfg.sweep.blocks.is_empty() {
        return Err(lcmt_core::Error::Config("no blocks to sweep".into()).into());
    }
    for &b in &cfg.sweep.blocks {
        let mut m = cfg.model.clone();
        m.memory_block = Some(b);
        precheck(&m)?;
    }
    cfg.train.fit_options().validate()?;

    let train = read_corpus(args.data.join("train.jsonl"))?;
    let test = read_corpus(args.data.join("test.jsonl"))?;
    let homographs_path = args.data.join(HOMOGRAPHS);
    let homographs: Option<Vec<lcmt_core::data::Homograph>> = if homographs_path.exists() {
        let text = std::fs::read_to_string(&homographs_path).map_err(CliError::io(&homographs_path))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let refs: Vec<Vec<String>> = test.iter().map(|r| r.tgt.clone()).collect();
    let decode_opts = DecodeOptions {
        mode: if memory { DecodeMode::Lcnmt } else { DecodeMode::Base },
        ratio: cfg.sweep.ratio,
        ..cfg.decode.clone()
    };

    let mut out = Outcome::default();
    let mut run = RunDir::create(&args.out, "sweep-blocks")?;
    run.input("train", &args.data.join("train.jsonl"))?;
    run.input("test", &args.data.join("test.jsonl"))?;
    let mut rows = Vec::with_capacity(cfg.sweep.blocks.len());
    for &block in &cfg.sweep.blocks {
        log::info!("block {block}: training");
        let mut model_cfg = cfg.model.clone();
        model_cfg.memory_block = memory.then_some(block);
        let trained = train_on(&train, &model_cfg, &cfg.train, &mut out)?;
        let results = decode_corpus(
            &trained.model,
            &test,
            &trained.src_vocab,
            &trained.tgt_vocab,
            &decode_opts,
        )?;
        let hyps: Vec<Vec<String>> = results.iter().map(|r| r.tokens.clone()).collect();
        let given: Vec<Vec<Vec<String>>> = results.iter().map(|r| r.constraints.clone()).collect();
        let row = SweepRow {
            block,
            final_main_loss: tail_mean(&trained.log, cfg.train.loss_window, |l| l.main_loss),
            final_att_loss: tail_mean(&trained.log, cfg.train.loss_window, |l| l.att_loss),
            bleu: bleu_corpus(&hyps, &refs, BleuOptions::default())?.bleu,
            csr: constraint_satisfaction(&hyps, &given)?.rate,
            homograph_accuracy: homographs.as_ref().and_then(|t| homograph_accuracy(&hyps, &refs, t)),
        };
        log::info!(
            "block {block}: main loss {:.4}, BLEU {:.2}",
            row.final_main_loss,
            row.bleu
        );
        run.write(&format!("block{block}/{RESULTS}"), jsonl(&results)?)?;
        run.write(&format!("block{block}/{LOSS_LOG}"), jsonl(&trained.log)?)?;
        rows.push(row);
    }
    let report = SweepReport {
        memory,
        ratio: cfg.sweep.ratio,
        noise_bound: 0.0,
        rows,
    };
    let table = report.table().to_string();
    run.write_json(REPORT_JSON, &report)?;
    run.write(REPORT_TXT, &table)?;
    run.finish(&cfg)?;
    out.stdout = table;
    Ok(out)
}
