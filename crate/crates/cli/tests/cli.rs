use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use lcmt_cli::commands::{read_results, EvalReport, SweepReport, TrainSummary};
use lcmt_cli::config::parse_blocks;
use lcmt_cli::{main_with, resolve_threads, run, Cli, Outcome, RunConfig, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use lcmt_core::data::{read_corpus, write_corpus, ConstraintSpec, CorpusRecord};
use lcmt_core::eval::{bleu_corpus, corpus_stats, BleuOptions, CorpusStats};
use lcmt_core::extract::Alignment;
use lcmt_core::Span;
use proptest::prelude::*;

const TINY: &str = r#"
[model]
d_model = 16
n_blocks = 2
n_heads = 2
ffn_width = 32
max_len = 24

[train]
steps = 40
batch_size = 8
"#;

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn cmd(args: &[&str]) -> lcmt_cli::Result<Outcome> {
    let cli = Cli::try_parse_from(std::iter::once("lcmt").chain(args.iter().copied())).expect("arguments parse");
    run(&cli)
}

fn code(args: &[&str]) -> u8 {
    main_with(std::iter::once("lcmt").chain(args.iter().copied()))
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Synthetic data plus a tiny-model config under `root`.
fn setup(root: &Path, sentences: usize) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let n = sentences.to_string();
    cmd(&["synth", "--out", &s(&data), "--sentences", &n, "--seed", "4"]).unwrap();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    (data, config)
}

#[test]
fn synth_empty_corpus_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    assert_eq!(code(&["synth", "--out", &s(&out), "--sentences", "0"]), EXIT_OK);
    for split in ["train", "dev", "test"] {
        assert!(read_corpus(out.join(format!("{split}.jsonl"))).unwrap().is_empty());
    }
    assert!(out.join("resolved_config.toml").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        cmd(&["synth", "--out", &s(out), "--sentences", "200", "--seed", "9"]).unwrap();
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    assert_eq!(fa, fb);
    let c = dir.path().join("c");
    cmd(&["synth", "--out", &s(&c), "--sentences", "200", "--seed", "10"]).unwrap();
    assert_ne!(fa[Path::new("train.jsonl")], files(&c)[Path::new("train.jsonl")]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["synth", "--sentences", "5"]), EXIT_USAGE);
    assert_eq!(code(&["frobnicate"]), EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nd_modle = 3\n").unwrap();
    let out = s(&dir.path().join("o"));
    assert_eq!(code(&["synth", "--out", &out, "--config", &s(&bad)]), EXIT_USAGE);
    assert_eq!(code(&["synth", "--out", &out, "--homographs", "60"]), EXIT_USAGE);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nope.jsonl"));
    let out = s(&dir.path().join("o"));
    assert_eq!(code(&["extract", "--in", &missing, "--out", &out]), EXIT_RUNTIME);
}

#[test]
fn thread_resolution() {
    assert_eq!(resolve_threads(Some(3), Some("7")).unwrap(), Some(3));
    assert_eq!(resolve_threads(None, Some(" 7 ")).unwrap(), Some(7));
    assert_eq!(resolve_threads(None, None).unwrap(), None);
    assert_eq!(resolve_threads(None, Some("many")).unwrap_err().exit_code(), EXIT_USAGE);
    assert_eq!(resolve_threads(Some(0), None).unwrap_err().exit_code(), EXIT_USAGE);
}

#[test]
fn resolved_config_round_trips() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    let partial = RunConfig::parse("[train]\nsteps = 7\n").unwrap();
    assert_eq!(partial.train.steps, 7);
    assert_eq!(partial.model, RunConfig::default().model);
}

fn sinian_record() -> CorpusRecord {
    let mut r = CorpusRecord::new(
        "sinian",
        vec!["wo".into(), "sinian".into(), "ni".into()],
        vec!["I".into(), "missed".into(), "you".into()],
    );
    r.alignment = Some("0-0 1-1 2-2".parse::<Alignment>().unwrap());
    r.src_spans = Some(vec![Span::new(0, 1), Span::new(1, 3), Span::new(0, 3)]);
    r.tgt_spans = Some(vec![Span::new(0, 1), Span::new(1, 3)]);
    r
}

#[test]
fn extract_emits_the_sinian_pair_and_its_stats() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("fig.jsonl");
    write_corpus(&[sinian_record()], &input).unwrap();
    let out = dir.path().join("x");
    let res = cmd(&["extract", "--in", &s(&input), "--out", &s(&out)]).unwrap();
    assert!(res.warnings.is_empty(), "{:?}", res.warnings);

    let got = read_corpus(out.join("fig.jsonl")).unwrap();
    let constraints = got[0].constraints.clone().unwrap();
    assert!(constraints.contains(&ConstraintSpec::Spans {
        src_span: Span::new(1, 3),
        tgt_span: Span::new(1, 3)
    }));
    let tc = got[0].token_constraints();
    assert!(tc
        .iter()
        .any(|c| c.src == ["sinian", "ni"] && c.tgt == ["missed", "you"]));

    // The stats block is corpus_stats over the extracted target phrases.
    let stats: CorpusStats = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let phrases: Vec<Vec<Vec<String>>> = vec![tc.iter().map(|c| c.tgt.clone()).collect()];
    assert_eq!(stats, corpus_stats(&phrases, None));
    assert!(res.stdout.contains("avg/sentence"));
}

#[test]
fn extract_without_alignments_warns_and_empties_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = sinian_record();
    r.alignment = None;
    r.constraints = Some(vec![ConstraintSpec::Spans {
        src_span: Span::new(0, 1),
        tgt_span: Span::new(0, 1),
    }]);
    let input = dir.path().join("plain.jsonl");
    write_corpus(&[r.clone(), r], &input).unwrap();
    let out = dir.path().join("x");
    let res = cmd(&["extract", "--in", &s(&input), "--out", &s(&out)]).unwrap();
    assert_eq!(res.warnings.len(), 1);
    assert!(res.warnings[0].contains("2 of 2 records have no alignment"));
    for rec in read_corpus(out.join("plain.jsonl")).unwrap() {
        assert_eq!(rec.constraints, Some(vec![]));
    }
}

#[test]
fn extract_refuses_to_overwrite_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("c.jsonl");
    write_corpus(&[sinian_record()], &input).unwrap();
    let err = cmd(&["extract", "--in", &s(&input), "--out", &s(dir.path())]).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_USAGE);
}

#[test]
fn train_flags_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), 40);
    let train = s(&data.join("train.jsonl"));
    let out = dir.path().join("base");
    let res = cmd(&[
        "train",
        "--config",
        &s(&config),
        "--data",
        &train,
        "--out",
        &s(&out),
        "--mode",
        "base",
        "--memory-block",
        "1",
        "--steps",
        "3",
    ])
    .unwrap();
    assert_eq!(res.warnings, ["base mode ignores --memory-block and --lambda-att"]);
    let resolved = RunConfig::parse(&fs::read_to_string(out.join("resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.train.steps, 3);
    assert!(resolved.model.src_vocab > 4);

    let bad = s(&dir.path().join("bad"));
    let args = [
        "train",
        "--config",
        &s(&config),
        "--data",
        &train,
        "--out",
        &bad,
        "--memory-block",
        "3",
    ];
    assert_eq!(code(&args), EXIT_USAGE);
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn overfit_loss_log_decreases_when_smoothed() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, (a, b)) in [
        ("s4 s5 s6", "t4 t5 t6"),
        ("s7 s8", "t7 t8"),
        ("s6 s4 s9 s5", "t6 t4 t9 t5"),
    ]
    .iter()
    .enumerate()
    {
        let tok = |x: &str| x.split(' ').map(String::from).collect::<Vec<_>>();
        records.push(CorpusRecord::new(format!("r{i}"), tok(a), tok(b)));
    }
    let data = dir.path().join("tiny.jsonl");
    write_corpus(&records, &data).unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("m");
    cmd(&[
        "train",
        "--config",
        &s(&config),
        "--data",
        &s(&data),
        "--out",
        &s(&out),
        "--mode",
        "base",
        "--steps",
        "200",
    ])
    .unwrap();
    let losses: Vec<f64> = fs::read_to_string(out.join("loss_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["main_loss"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 200);
    let means: Vec<f64> = losses
        .chunks(40)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(summary.final_main_loss < 0.2, "{summary:?}");
}

#[test]
fn decode_is_reproducible_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), 60);
    let model = dir.path().join("lcnmt");
    let train = s(&data.join("train.jsonl"));
    cmd(&["train", "--config", &s(&config), "--data", &train, "--out", &s(&model)]).unwrap();
    let ckpt = s(&model.join("model.ckpt"));
    let test = s(&data.join("test.jsonl"));
    let mut outs = Vec::new();
    for (i, threads) in ["1", "2", "1"].iter().enumerate() {
        let out = dir.path().join(format!("d{i}"));
        cmd(&[
            "decode",
            "--threads",
            threads,
            "--ckpt",
            &ckpt,
            "--data",
            &test,
            "--mode",
            "lcnmt",
            "--ratio",
            "0.5",
            "--seed",
            "3",
            "--out",
            &s(&out),
        ])
        .unwrap();
        outs.push(files(&out));
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);

    let results = read_results(&dir.path().join("d0/results.jsonl")).unwrap();
    assert_eq!(results.len(), 6);
    let given: usize = results.iter().map(|r| r.constraints_given).sum();
    assert_eq!(given, 3);

    let mismatch = [
        "decode", "--ckpt", &ckpt, "--data", &test, "--mode", "dba", "--out", "unused",
    ];
    assert_eq!(code(&mismatch), EXIT_USAGE);
}

fn fake_results(dir: &Path, mode: &str, ratio: f64, hyps: &[&str]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.decode.ratio = ratio;
    fs::write(dir.join("resolved_config.toml"), cfg.to_toml()).unwrap();
    let lines: String = hyps
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let tokens: Vec<&str> = h.split_whitespace().collect();
            format!(
                "{}\n",
                serde_json::json!({
                    "id": format!("r{i}"), "mode": mode, "tokens": tokens, "detok_text": h, "score": 0.0,
                    "constraints_given": 1, "constraints_satisfied": 0, "forward_calls": 1,
                    "constraints": [["t1b"]],
                })
            )
        })
        .collect();
    let path = dir.join("results.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

#[test]
fn eval_reports_methods_by_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let refs = ["t4 t1b t5 t6", "t7 t8 t9"];
    let records: Vec<CorpusRecord> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let t: Vec<String> = r.split(' ').map(String::from).collect();
            CorpusRecord::new(format!("r{i}"), t.clone(), t)
        })
        .collect();
    let reference = dir.path().join("ref.jsonl");
    write_corpus(&records, &reference).unwrap();
    let perfect = fake_results(&dir.path().join("l7"), "lcnmt", 0.7, &refs);
    let half = fake_results(&dir.path().join("l3"), "lcnmt", 0.3, &["t4 t1a t5 t6", "t7 t8 t9"]);
    let dba = fake_results(&dir.path().join("d3"), "dba", 0.3, &["t4 t1b t5", "t7 t8 t9"]);
    let out = dir.path().join("ev");
    let res = cmd(&[
        "eval",
        "--hyp",
        &s(&perfect),
        &s(&half),
        &s(&dba),
        "--ref",
        &s(&reference),
        "--out",
        &s(&out),
    ])
    .unwrap();

    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.entries.len(), 3);
    assert!((report.entries[0].bleu.bleu - 100.0).abs() < 1e-9);
    let hyps: Vec<Vec<&str>> = ["t4 t1a t5 t6", "t7 t8 t9"]
        .iter()
        .map(|h| h.split(' ').collect())
        .collect();
    let refs_tok: Vec<Vec<&str>> = refs.iter().map(|h| h.split(' ').collect()).collect();
    let want = bleu_corpus(&hyps, &refs_tok, BleuOptions::default()).unwrap();
    assert!((report.entries[1].bleu.bleu - want.bleu).abs() < 1e-9);
    assert_eq!(report.entries[2].csr.satisfied, 1);

    let expected = format!(
        "BLEU\n\
         ratio    dba   lcnmt\n\
         --------------------\n\
         30%    {:>5.2}  {:>6.2}\n\
         70%        -  100.00\n",
        report.entries[2].bleu.bleu, want.bleu
    );
    assert!(res.stdout.starts_with(&expected), "{}", res.stdout);
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), res.stdout);

    let dup = cmd(&[
        "eval",
        "--hyp",
        &s(&half),
        &s(&half),
        "--ref",
        &s(&reference),
        "--out",
        &s(&out),
    ])
    .unwrap_err();
    assert_eq!(dup.exit_code(), EXIT_USAGE);
}

#[test]
fn sweep_emits_one_row_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), 60);
    let out = dir.path().join("sweep");
    let res = cmd(&[
        "sweep-blocks",
        "--config",
        &s(&config),
        "--data",
        &s(&data),
        "--blocks",
        "1..2",
        "--steps",
        "20",
        "--out",
        &s(&out),
    ])
    .unwrap();
    let report: SweepReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.memory);
    assert_eq!(report.rows.iter().map(|r| r.block).collect::<Vec<_>>(), [1, 2]);
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let keys: Vec<&str> = value["rows"][0]
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    assert_eq!(
        keys,
        [
            "bleu",
            "block",
            "csr",
            "final_att_loss",
            "final_main_loss",
            "homograph_accuracy"
        ]
    );
    let lines: Vec<&str> = res.stdout.lines().collect();
    assert_eq!(lines[0], "BLEU by memory block (constraint ratio 100%)");
    assert!(lines[1].starts_with("block") && lines[1].ends_with("homograph acc"));
    assert!(lines[3].starts_with("Block 1") && lines[4].starts_with("Block 2"));
    assert!(out.join("block2/results.jsonl").exists());

    let bad = [
        "sweep-blocks",
        "--config",
        &s(&config),
        "--data",
        &s(&data),
        "--blocks",
        "1..3",
        "--out",
        "unused",
    ];
    assert_eq!(code(&bad), EXIT_USAGE);
}

#[test]
fn sweep_without_memory_matches_a_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), 60);
    let out = dir.path().join("sweep");
    let c = s(&config);
    cmd(&[
        "sweep-blocks",
        "--config",
        &c,
        "--data",
        &s(&data),
        "--blocks",
        "1,2",
        "--steps",
        "20",
        "--no-memory",
        "--out",
        &s(&out),
    ])
    .unwrap();
    let report: SweepReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(!report.memory);

    // Oracle: the same seed through train, decode and eval separately.
    let model = dir.path().join("base");
    let train = s(&data.join("train.jsonl"));
    let test = s(&data.join("test.jsonl"));
    cmd(&[
        "train",
        "--config",
        &c,
        "--data",
        &train,
        "--out",
        &s(&model),
        "--mode",
        "base",
        "--steps",
        "20",
    ])
    .unwrap();
    let dec = dir.path().join("dec");
    let ckpt = s(&model.join("model.ckpt"));
    cmd(&[
        "decode",
        "--ckpt",
        &ckpt,
        "--data",
        &test,
        "--mode",
        "base",
        "--out",
        &s(&dec),
    ])
    .unwrap();
    let ev = dir.path().join("ev");
    cmd(&[
        "eval",
        "--hyp",
        &s(&dec.join("results.jsonl")),
        "--ref",
        &test,
        "--out",
        &s(&ev),
    ])
    .unwrap();
    let base: EvalReport = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();

    for row in &report.rows {
        assert!(
            (row.bleu - base.entries[0].bleu.bleu).abs() <= report.noise_bound,
            "{row:?}"
        );
        assert_eq!(row.final_main_loss, report.rows[0].final_main_loss);
    }
}

proptest! {
    #[test]
    fn block_ranges_parse(a in 1usize..10, len in 0usize..10) {
        let b = a + len;
        prop_assert_eq!(parse_blocks(&format!("{a}..{b}")).unwrap(), (a..=b).collect::<Vec<_>>());
        let list: Vec<String> = (a..=b).rev().map(|x| x.to_string()).collect();
        prop_assert_eq!(parse_blocks(&list.join(",")).unwrap(), (a..=b).rev().collect::<Vec<_>>());
        if len > 0 {
            let reversed = format!("{b}..{a}");
            prop_assert!(parse_blocks(&reversed).is_err());
        }
    }
}
