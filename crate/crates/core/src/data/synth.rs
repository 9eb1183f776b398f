//! Synthetic homograph translation task.
//!
//! Every source word `s<i>` translates to a fixed `t<i>`, except the
//! homographs, whose translation is `t<i>a` or `t<i>b` by a fair coin per
//! sentence. Nothing in the source predicts the coin, so only a constraint
//! can resolve it.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{ConstraintSpec, CorpusRecord};
use crate::error::{Error, Result};
use crate::extract::Alignment;
use crate::rng::{derive, SplitMix64};
use crate::span::Span;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Content words on the source side, reserved symbols excluded.
    pub src_words: usize,
    pub homographs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Homograph occurrences per sentence, capped by `homographs`.
    pub homographs_per_sentence: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            train: 5000,
            dev: 200,
            test: 500,
            src_words: 56,
            homographs: 4,
            min_len: 6,
            max_len: 10,
            homographs_per_sentence: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.src_words <= self.homographs {
            return Err(Error::Config(format!(
                "source vocabulary of {} words leaves no ordinary words beside {} homographs",
                self.src_words, self.homographs
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.homographs > 0 && self.homographs_per_sentence.min(self.homographs) > self.min_len {
            return Err(Error::Config("more homographs per sentence than tokens".into()));
        }
        Ok(())
    }
}

/// A source word with two equally likely translations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Homograph {
    pub source: String,
    pub variants: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub homographs: Vec<Homograph>,
}

pub fn source_word(i: usize) -> String {
    format!("s{i}")
}

pub fn homograph_table(homographs: usize) -> Vec<Homograph> {
    (0..homographs)
        .map(|i| Homograph {
            source: source_word(i),
            variants: [format!("t{i}a"), format!("t{i}b")],
        })
        .collect()
}

fn sentence(cfg: &SynthConfig, rng: &mut SplitMix64, id: String) -> CorpusRecord {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let ordinary: Vec<usize> = (cfg.homographs..cfg.src_words).collect();
    let mut words: Vec<usize> = (0..len).map(|_| *ordinary.choose(rng).expect("nonempty")).collect();
    let mut homograph_at = Vec::new();
    if cfg.homographs > 0 {
        let k = cfg.homographs_per_sentence.min(cfg.homographs).min(len);
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        let mut which: Vec<usize> = (0..cfg.homographs).collect();
        which.shuffle(rng);
        for (&p, &h) in positions[..k].iter().zip(&which[..k]) {
            words[p] = h;
            homograph_at.push(p);
        }
        homograph_at.sort_unstable();
    }
    let src: Vec<String> = words.iter().map(|&w| source_word(w)).collect();
    let tgt: Vec<String> = words
        .iter()
        .map(|&w| {
            if w < cfg.homographs {
                let variant = if rng.random_bool(0.5) { 'a' } else { 'b' };
                format!("t{w}{variant}")
            } else {
                format!("t{w}")
            }
        })
        .collect();

    // Parse spans: every homograph unigram plus a few random bigrams.
    let mut spans: BTreeSet<Span> = homograph_at.iter().map(|&p| Span::new(p, p + 1)).collect();
    if len >= 2 {
        for _ in 0..len / 3 {
            let a = rng.random_range(0..len - 1);
            spans.insert(Span::new(a, a + 2));
        }
    }
    let spans: Vec<Span> = spans.into_iter().collect();
    let constraints = homograph_at
        .iter()
        .map(|&p| ConstraintSpec::Spans {
            src_span: Span::new(p, p + 1),
            tgt_span: Span::new(p, p + 1),
        })
        .collect();

    let mut rec = CorpusRecord::new(id, src, tgt);
    rec.alignment = Some(Alignment::new((0..len).map(|i| (i, i))));
    rec.src_spans = Some(spans.clone());
    rec.tgt_spans = Some(spans);
    rec.constraints = Some(constraints);
    rec
}

/// Deterministic train/dev/test corpora for `cfg.seed`. Each split draws
/// from its own stream, so changing one split's size leaves the others
/// unchanged.
pub fn generate_homograph_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let split = |name: &str, stream: u64, n: usize| {
        let mut rng = derive(cfg.seed, stream);
        (0..n)
            .map(|i| sentence(cfg, &mut rng, format!("{name}-{i:06}")))
            .collect::<Vec<_>>()
    };
    Ok(SynthCorpus {
        train: split("train", 1, cfg.train),
        dev: split("dev", 2, cfg.dev),
        test: split("test", 3, cfg.test),
        homographs: homograph_table(cfg.homographs),
    })
}

/// Homograph accuracy: over reference tokens that are homograph variants,
/// the fraction whose hypothesis contains that variant and not its sibling.
/// Returns `None` when the references contain no homographs.
pub fn homograph_accuracy<H, R, S>(hypotheses: &[H], references: &[R], table: &[Homograph]) -> Option<f64>
where
    H: AsRef<[S]>,
    R: AsRef<[S]>,
    S: AsRef<str>,
{
    let sibling: HashMap<&str, &str> = table
        .iter()
        .flat_map(|h| [(&*h.variants[0], &*h.variants[1]), (&*h.variants[1], &*h.variants[0])])
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let has = |w: &str| h.as_ref().iter().any(|t| t.as_ref() == w);
        for tok in r.as_ref() {
            if let Some(other) = sibling.get(tok.as_ref()) {
                total += 1;
                if has(tok.as_ref()) && !has(other) {
                    hits += 1;
                }
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
