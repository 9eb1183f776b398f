use lcmt_core::data::corpus::write_records;
use lcmt_core::data::{read_corpus, ConstraintSpec};
use lcmt_core::eval::{corpus_stats, CorpusStats, Table};
use lcmt_core::extract::{extract_phrase_pairs, Annotated};

use super::{REPORT_JSON, REPORT_TXT};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::RunDir;
use crate::{ExtractArgs, Outcome};

pub fn stats_table(name: &str, stats: &CorpusStats) -> Table {
    let mut t = Table::new(
        format!("Constraint statistics for {name}"),
        &["corpus", "sentences", "phrases", "words", "subwords", "avg/sentence"],
    );
    t.push(vec![
        name.to_string(),
        stats.n_sentences.to_string(),
        stats.n_phrases.to_string(),
        stats.n_words_in_phrases.to_string(),
        stats.n_subwords_in_phrases.to_string(),
        format!("{:.2}", stats.avg_constraints_per_sentence),
    ]);
    t
}

/// Replaces each record's constraints with the extracted phrase pairs and
/// reports target-side statistics.
pub fn extract(args: &ExtractArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(n) = args.max_phrase_len {
        cfg.extract.max_phrase_len = n;
    }
    if let Some(n) = args.min_phrase_len {
        cfg.extract.min_phrase_len = n;
    }
    let opts = cfg.extract;
    if opts.min_phrase_len == 0 || opts.min_phrase_len > opts.max_phrase_len {
        return Err(lcmt_core::Error::Config(format!(
            "phrase length range {}..={} is empty",
            opts.min_phrase_len, opts.max_phrase_len
        ))
        .into());
    }
    let file_name = args
        .input
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("--in {} is not a file", args.input.display())))?
        .to_string_lossy()
        .into_owned();
    let target = args.out.join(&file_name);
    if target.exists() && target.canonicalize().ok() == args.input.canonicalize().ok() {
        return Err(CliError::Usage(format!(
            "--out {} would overwrite the input corpus",
            args.out.display()
        )));
    }

    let mut records = read_corpus(&args.input)?;
    let mut out = Outcome::default();
    let mut phrases: Vec<Vec<Vec<String>>> = Vec::with_capacity(records.len());
    let (mut unaligned, mut unparsed) = (0, 0);
    for r in &mut records {
        unaligned += usize::from(r.alignment.is_none());
        unparsed += usize::from(r.alignment.is_some() && (r.src_spans.is_none() || r.tgt_spans.is_none()));
        let pairs = extract_phrase_pairs(
            Annotated {
                src_len: r.src.len(),
                tgt_len: r.tgt.len(),
                alignment: r.alignment.as_ref(),
                src_spans: r.src_spans.as_deref(),
                tgt_spans: r.tgt_spans.as_deref(),
            },
            opts,
        );
        phrases.push(pairs.iter().map(|p| r.tgt[p.target.range()].to_vec()).collect());
        r.constraints = Some(
            pairs
                .iter()
                .map(|p| ConstraintSpec::Spans {
                    src_span: p.source,
                    tgt_span: p.target,
                })
                .collect(),
        );
    }
    if unaligned > 0 {
        out.warn(format!(
            "{unaligned} of {} records have no alignment; their constraints are empty",
            records.len()
        ));
    }
    if unparsed > 0 {
        out.warn(format!(
            "{unparsed} of {} records lack source or target parse spans; their constraints are empty",
            records.len()
        ));
    }

    let stats = corpus_stats(&phrases, None);
    let table = stats_table(&file_name, &stats);
    let mut run = RunDir::create(&args.out, "extract")?;
    run.input("corpus", &args.input)?;
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    run.write(&file_name, buf)?;
    run.write_json(REPORT_JSON, &stats)?;
    run.write(REPORT_TXT, table.to_string())?;
    run.finish(&cfg)?;
    out.stdout = table.to_string();
    Ok(out)
}
