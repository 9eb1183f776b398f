use lcmt_core::data::corpus::write_records;
use lcmt_core::data::generate_homograph_corpus;

use crate::config::RunConfig;
use crate::error::Result;
use crate::output::RunDir;
use crate::{Outcome, SynthArgs};

pub const HOMOGRAPHS: &str = "homographs.json";

pub fn synth(args: &SynthArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(n) = args.sentences {
        s.train = n;
        s.dev = n / 25;
        s.test = n / 10;
    }
    let overrides = [
        (args.dev, &mut s.dev),
        (args.test, &mut s.test),
        (args.homographs, &mut s.homographs),
        (args.vocab, &mut s.src_words),
        (args.min_len, &mut s.min_len),
        (args.max_len, &mut s.max_len),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let corpus = generate_homograph_corpus(&cfg.synth)?;

    let mut run = RunDir::create(&args.out, "synth")?;
    for (name, records) in [
        ("train.jsonl", &corpus.train),
        ("dev.jsonl", &corpus.dev),
        ("test.jsonl", &corpus.test),
    ] {
        let mut buf = Vec::new();
        write_records(records, &mut buf)?;
        run.write(name, buf)?;
    }
    run.write_json(HOMOGRAPHS, &corpus.homographs)?;
    run.finish(&cfg)?;
    Ok(Outcome {
        stdout: format!(
            "wrote {} train, {} dev and {} test sentences to {}\n",
            corpus.train.len(),
            corpus.dev.len(),
            corpus.test.len(),
            args.out.display()
        ),
        warnings: Vec::new(),
    })
}
