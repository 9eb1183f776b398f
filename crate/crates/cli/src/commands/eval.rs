use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use lcmt_core::data::{homograph_accuracy, read_corpus, Homograph};
use lcmt_core::decode::{DecodeMode, DecodeResult};
use lcmt_core::eval::{bleu_corpus, constraint_satisfaction, BleuOptions, BleuReport, CsrReport, Table};
use serde::{Deserialize, Serialize};

use super::{read_results, REPORT_JSON, REPORT_TXT};
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::{CliError, Result};
use crate::output::RunDir;
use crate::{EvalArgs, Outcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub hyp: PathBuf,
    pub mode: DecodeMode,
    /// Constraint ratio from the decode run's resolved config, when found.
    pub ratio: Option<f64>,
    pub bleu: BleuReport,
    pub csr: CsrReport,
    pub homograph_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `given` scores each sentence's decoder constraints; `corpus` scores
    /// all constraints of the `--constraints` corpus.
    pub constraint_source: String,
    pub entries: Vec<EvalEntry>,
}

fn decode_ratio(hyp: &Path) -> Option<f64> {
    let sidecar = hyp.parent()?.join(RESOLVED_CONFIG);
    let text = std::fs::read_to_string(sidecar).ok()?;
    RunConfig::parse(&text).ok().map(|c| c.decode.ratio)
}

fn ratio_label(r: Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |r| format!("{:.0}%", r * 100.0))
}

/// One table per metric: a row per ratio, a column per decoding method.
pub fn method_tables(entries: &[EvalEntry]) -> Vec<Table> {
    let modes: Vec<DecodeMode> = DecodeMode::ALL
        .into_iter()
        .filter(|m| entries.iter().any(|e| e.mode == *m))
        .collect();
    let mut ratios: Vec<Option<f64>> = Vec::new();
    for e in entries {
        if !ratios.contains(&e.ratio) {
            ratios.push(e.ratio);
        }
    }
    ratios.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (a, b) => a.is_none().cmp(&b.is_none()),
    });
    let mut header = vec!["ratio"];
    header.extend(modes.iter().map(|m| m.as_str()));
    type Cell = fn(&EvalEntry) -> String;
    let metrics: [(&str, Cell); 3] = [
        ("BLEU", |e| format!("{:.2}", e.bleu.bleu)),
        ("Constraint satisfaction rate", |e| format!("{:.4}", e.csr.rate)),
        ("Homograph accuracy", |e| {
            e.homograph_accuracy
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
        }),
    ];
    let mut tables = Vec::new();
    for (title, cell) in metrics {
        if title.starts_with("Homograph") && entries.iter().all(|e| e.homograph_accuracy.is_none()) {
            continue;
        }
        let mut t = Table::new(title, &header);
        for r in &ratios {
            let mut row = vec![ratio_label(*r)];
            for m in &modes {
                let e = entries.iter().find(|e| e.mode == *m && e.ratio == *r);
                row.push(e.map_or_else(|| "-".to_string(), cell));
            }
            t.push(row);
        }
        tables.push(t);
    }
    tables
}

fn read_homographs(path: &Path) -> Result<Vec<Homograph>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn eval(args: &EvalArgs) -> Result<Outcome> {
    let references = read_corpus(&args.reference)?;
    let index: HashMap<&str, usize> = references.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let gold: Option<HashMap<String, Vec<Vec<String>>>> = match &args.constraints {
        Some(p) => Some(
            read_corpus(p)?
                .iter()
                .map(|r| (r.id.clone(), r.token_constraints().into_iter().map(|c| c.tgt).collect()))
                .collect(),
        ),
        None => None,
    };
    let table = args.homographs.as_deref().map(read_homographs).transpose()?;

    let mut entries = Vec::with_capacity(args.hyp.len());
    let mut seen: BTreeMap<(String, String), &Path> = BTreeMap::new();
    for path in &args.hyp {
        let results: Vec<DecodeResult> = read_results(path)?;
        let Some(first) = results.first() else {
            return Err(lcmt_core::Error::Evaluation(format!("{} has no results", path.display())).into());
        };
        let mode = first.mode;
        if results.len() != references.len() {
            return Err(lcmt_core::Error::Evaluation(format!(
                "{} has {} results for {} references",
                path.display(),
                results.len(),
                references.len()
            ))
            .into());
        }
        let mut hyps = Vec::with_capacity(results.len());
        let mut refs = Vec::with_capacity(results.len());
        let mut constraints = Vec::with_capacity(results.len());
        for r in &results {
            if r.mode != mode {
                return Err(lcmt_core::Error::Evaluation(format!("{} mixes decoding modes", path.display())).into());
            }
            let i = *index.get(r.id.as_str()).ok_or_else(|| {
                lcmt_core::Error::Evaluation(format!("{}: id {} is not in the references", path.display(), r.id))
            })?;
            hyps.push(r.tokens.clone());
            refs.push(references[i].tgt.clone());
            constraints.push(match &gold {
                Some(g) => g.get(&r.id).cloned().unwrap_or_default(),
                None => r.constraints.clone(),
            });
        }
        let ratio = decode_ratio(path);
        let key = (mode.to_string(), ratio_label(ratio));
        if let Some(prev) = seen.insert(key, path) {
            return Err(CliError::Usage(format!(
                "{} and {} are both {mode} results at ratio {}",
                prev.display(),
                path.display(),
                ratio_label(ratio)
            )));
        }
        entries.push(EvalEntry {
            hyp: path.clone(),
            mode,
            ratio,
            bleu: bleu_corpus(&hyps, &refs, BleuOptions::default())?,
            csr: constraint_satisfaction(&hyps, &constraints)?,
            homograph_accuracy: table.as_ref().and_then(|t| homograph_accuracy(&hyps, &refs, t)),
        });
    }

    let report = EvalReport {
        constraint_source: if gold.is_some() { "corpus" } else { "given" }.to_string(),
        entries,
    };
    let text: String = method_tables(&report.entries)
        .iter()
        .map(|t| format!("{t}\n"))
        .collect();
    let mut run = RunDir::create(&args.out, "eval")?;
    run.input("references", &args.reference)?;
    for h in &args.hyp {
        run.input("hypotheses", h)?;
    }
    if let Some(c) = &args.constraints {
        run.input("constraints", c)?;
    }
    run.write_json(REPORT_JSON, &report)?;
    run.write(REPORT_TXT, &text)?;
    run.finish(&RunConfig::default())?;
    Ok(Outcome {
        stdout: text,
        warnings: Vec::new(),
    })
}
