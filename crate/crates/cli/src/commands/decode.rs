use lcmt_core::data::{load_model, read_corpus};
use lcmt_core::decode::decode_corpus;
use lcmt_core::eval::constraint_satisfaction;

use super::{jsonl, read_vocab, RESULTS, SRC_VOCAB, TGT_VOCAB};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::RunDir;
use crate::{DecodeArgs, Outcome};

pub fn decode(args: &DecodeArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let d = &mut cfg.decode;
    if let Some(m) = args.mode {
        d.mode = m;
    }
    if let Some(b) = args.beam {
        d.beam = b;
    }
    if let Some(a) = args.alpha {
        d.alpha = a;
    }
    if let Some(r) = args.ratio {
        d.ratio = r;
    }
    if let Some(s) = args.seed {
        d.seed = s;
    }
    if d.beam == 0 {
        return Err(lcmt_core::Error::Config("beam must be positive".into()).into());
    }

    let (model, meta) = load_model::<f32>(&args.ckpt, None)?;
    if cfg.decode.mode.needs_memory() != model.config.has_memory() {
        return Err(lcmt_core::Error::Config(format!(
            "{} mode cannot decode with {} (memory block: {:?})",
            cfg.decode.mode,
            args.ckpt.display(),
            model.config.memory_block
        ))
        .into());
    }
    let dir = args.ckpt.parent().unwrap_or(std::path::Path::new("."));
    let src_vocab = read_vocab(&dir.join(SRC_VOCAB))?;
    let tgt_vocab = read_vocab(&dir.join(TGT_VOCAB))?;
    if src_vocab.hash() != meta.src_vocab_hash || tgt_vocab.hash() != meta.tgt_vocab_hash {
        return Err(CliError::Core(lcmt_core::Error::Format(format!(
            "vocabularies in {} do not match the checkpoint",
            dir.display()
        ))));
    }
    let records = read_corpus(&args.data)?;
    let results = decode_corpus(&model, &records, &src_vocab, &tgt_vocab, &cfg.decode)?;

    let hyps: Vec<&[String]> = results.iter().map(|r| r.tokens.as_slice()).collect();
    let given: Vec<Vec<Vec<String>>> = results.iter().map(|r| r.constraints.clone()).collect();
    let csr = constraint_satisfaction(&hyps, &given)?;
    let mut out = Outcome::default();
    let failed = results.iter().filter(|r| r.unsatisfied).count();
    if failed > 0 {
        out.warn(format!(
            "{failed} sentences could not meet every constraint within the length budget"
        ));
    }

    let mut run = RunDir::create(&args.out, "decode")?;
    run.input("checkpoint", &args.ckpt)?;
    run.input("data", &args.data)?;
    run.write(RESULTS, jsonl(&results)?)?;
    cfg.model = model.config.clone();
    run.finish(&cfg)?;
    out.stdout = format!(
        "decoded {} sentences with {} at ratio {}: {} of {} constraints met ({:.4})\n",
        results.len(),
        cfg.decode.mode,
        cfg.decode.ratio,
        csr.satisfied,
        csr.total,
        csr.rate
    );
    Ok(out)
}
