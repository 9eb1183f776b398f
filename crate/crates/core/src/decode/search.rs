use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::StepScorer;
use crate::data::vocab::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam: usize,
    /// Most tokens generated, EOS included.
    pub max_len: usize,
    /// Length-penalty exponent: hypotheses rank by `score / len^alpha`.
    pub alpha: f64,
    pub eos: usize,
    /// Tokens that are never generated.
    pub banned: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 12,
            max_len: 64,
            alpha: 0.6,
            eos: EOS,
            banned: vec![PAD, BOS, UNK],
        }
    }
}

impl SearchConfig {
    fn check(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
    /// Cut off at `max_len` without producing EOS.
    pub forced: bool,
    /// Constraint tokens currently matched.
    pub satisfied: usize,
    pub constraints_met: bool,
}

impl Hypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        normalized(self.score, self.tokens.len(), alpha)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Result of one search with instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutput {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Prefixes scored at each step.
    pub calls_per_step: Vec<usize>,
    /// Set when no returned hypothesis satisfies every constraint.
    pub unsatisfied: bool,
}

impl SearchOutput {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }

    pub fn forward_calls(&self) -> usize {
        self.calls_per_step.iter().sum()
    }
}

fn better(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn rank(hyps: &mut [Hypothesis], alpha: f64) {
    hyps.sort_by(|a, b| {
        b.constraints_met
            .cmp(&a.constraints_met)
            .then_with(|| better(a.normalized(alpha), &a.tokens, b.normalized(alpha), &b.tokens))
    });
}

fn argmax(lp: &[f64], cfg: &SearchConfig) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (v, &x) in lp.iter().enumerate() {
        if cfg.banned.contains(&v) {
            continue;
        }
        if best.is_none_or(|b| x > lp[b]) {
            best = Some(v);
        }
    }
    best.ok_or_else(|| Error::Config("every token is banned".into()))
}

/// Argmax chain; ties go to the lower token index.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, cfg: &SearchConfig) -> Result<SearchOutput> {
    cfg.check()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut calls = Vec::new();
    let mut finished = false;
    while tokens.len() < cfg.max_len {
        let lp = scorer.next_log_probs(&[&tokens])?;
        calls.push(1);
        let v = argmax(&lp[0], cfg)?;
        score += lp[0][v];
        tokens.push(v);
        if v == cfg.eos {
            finished = true;
            break;
        }
    }
    Ok(SearchOutput {
        hypotheses: vec![Hypothesis {
            tokens,
            score,
            forced: !finished,
            finished,
            satisfied: 0,
            constraints_met: true,
        }],
        calls_per_step: calls,
        unsatisfied: false,
    })
}

/// Standard beam search over all `(hypothesis, token)` extensions. An EOS
/// extension ranked within the top `k` finishes a hypothesis; the next beam
/// is the best `k` non-EOS extensions.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &SearchConfig) -> Result<SearchOutput> {
    cfg.check()?;
    let k = cfg.beam;
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut calls = Vec::new();
    for step in 0..cfg.max_len {
        let prefixes: Vec<&[usize]> = active.iter().map(|(t, _)| t.as_slice()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        calls.push(prefixes.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, lp) in lps.iter().enumerate() {
            for (v, &x) in lp.iter().enumerate() {
                if !cfg.banned.contains(&v) {
                    cands.push((active[i].1 + x, i, v));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| active[a.1].0.cmp(&active[b.1].0))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(k);
        for (r, &(score, i, v)) in cands.iter().enumerate() {
            if r >= k && next.len() == k {
                break;
            }
            let mut tokens = active[i].0.clone();
            tokens.push(v);
            if v == cfg.eos {
                if r < k {
                    finished.push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                        forced: false,
                        satisfied: 0,
                        constraints_met: true,
                    });
                }
            } else if next.len() < k {
                next.push((tokens, score));
            }
        }
        active = next;
        if step + 1 == cfg.max_len {
            for (tokens, score) in active.drain(..) {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    finished: false,
                    forced: true,
                    satisfied: 0,
                    constraints_met: true,
                });
            }
        }
        let best_active = active.iter().map(|(t, s)| normalized(*s, t.len(), cfg.alpha));
        if active.is_empty() || done(&finished, best_active, k, cfg.alpha) {
            break;
        }
    }
    rank(&mut finished, cfg.alpha);
    finished.truncate(k);
    if finished.is_empty() {
        return Err(Error::Config("search produced no hypotheses".into()));
    }
    Ok(SearchOutput {
        hypotheses: finished,
        calls_per_step: calls,
        unsatisfied: false,
    })
}

/// Progress through a set of target-side constraints.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Progress {
    met: Vec<bool>,
    /// Constraint being matched and tokens matched so far.
    current: Option<(usize, usize)>,
}

impl Progress {
    fn new(n: usize) -> Self {
        Progress {
            met: vec![false; n],
            current: None,
        }
    }

    fn satisfied(&self, constraints: &[Vec<usize>]) -> usize {
        let done: usize = constraints
            .iter()
            .zip(&self.met)
            .filter(|(_, &m)| m)
            .map(|(c, _)| c.len())
            .sum();
        done + self.current.map_or(0, |(_, p)| p)
    }

    fn all_met(&self) -> bool {
        self.current.is_none() && self.met.iter().all(|&m| m)
    }

    /// Tokens that advance some constraint from this state.
    fn forced(&self, constraints: &[Vec<usize>]) -> Vec<usize> {
        match self.current {
            Some((c, p)) => vec![constraints[c][p]],
            None => constraints
                .iter()
                .zip(&self.met)
                .filter(|(_, &m)| !m)
                .map(|(c, _)| c[0])
                .collect(),
        }
    }

    fn advance(&self, token: usize, constraints: &[Vec<usize>]) -> Progress {
        let mut next = self.clone();
        if let Some((c, p)) = self.current {
            if constraints[c][p] == token {
                if p + 1 == constraints[c].len() {
                    next.met[c] = true;
                    next.current = None;
                } else {
                    next.current = Some((c, p + 1));
                }
                return next;
            }
            // A mismatch abandons the partial match.
            next.current = None;
        }
        let start = constraints
            .iter()
            .enumerate()
            .find(|(i, c)| !next.met[*i] && c[0] == token)
            .map(|(i, _)| i);
        if let Some(i) = start {
            if constraints[i].len() == 1 {
                next.met[i] = true;
            } else {
                next.current = Some((i, 1));
            }
        }
        next
    }
}

struct Item {
    tokens: Vec<usize>,
    score: f64,
    progress: Progress,
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
    progress: Progress,
    satisfied: usize,
}

/// Dynamic beam allocation: candidates are grouped into banks by the
/// number of constraint tokens they satisfy, and the beam is split evenly
/// across banks with leftover slots going to the most advanced banks.
/// Hypotheses meeting every constraint rank first in the output.
pub fn dba_decode<S: StepScorer + ?Sized>(
    scorer: &S,
    cfg: &SearchConfig,
    constraints: &[Vec<usize>],
) -> Result<SearchOutput> {
    cfg.check()?;
    let vocab = scorer.vocab_size();
    for c in constraints {
        if c.is_empty() {
            return Err(Error::Constraint("empty target constraint".into()));
        }
        if let Some(&t) = c.iter().find(|&&t| t >= vocab || t == cfg.eos) {
            return Err(Error::Constraint(format!("constraint token {t} cannot be generated")));
        }
    }
    let k = cfg.beam;
    let total: usize = constraints.iter().map(Vec::len).sum();
    let mut active = vec![Item {
        tokens: Vec::new(),
        score: 0.0,
        progress: Progress::new(constraints.len()),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut calls = Vec::new();

    for step in 0..cfg.max_len {
        let prefixes: Vec<&[usize]> = active.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        calls.push(prefixes.len());

        let mut cands: Vec<Candidate> = Vec::new();
        for (i, (item, lp)) in active.iter().zip(&lps).enumerate() {
            let eos_ok = item.progress.all_met();
            let mut order: Vec<usize> = (0..lp.len())
                .filter(|v| !cfg.banned.contains(v) && (*v != cfg.eos || eos_ok))
                .collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            order.truncate(k + 1);
            for t in item.progress.forced(constraints) {
                if !order.contains(&t) {
                    order.push(t);
                }
            }
            for t in order {
                let progress = item.progress.advance(t, constraints);
                cands.push(Candidate {
                    parent: i,
                    token: t,
                    score: item.score + lp[t],
                    satisfied: progress.satisfied(constraints),
                    progress,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| active[a.parent].tokens.cmp(&active[b.parent].tokens))
                .then(a.token.cmp(&b.token))
        });

        let mut banks: Vec<Vec<Candidate>> = (0..=total).map(|_| Vec::new()).collect();
        for (r, c) in cands.into_iter().enumerate() {
            if c.token == cfg.eos {
                if r < k {
                    let mut tokens = active[c.parent].tokens.clone();
                    tokens.push(c.token);
                    finished.push(Hypothesis {
                        tokens,
                        score: c.score,
                        finished: true,
                        forced: false,
                        satisfied: c.satisfied,
                        constraints_met: c.progress.all_met(),
                    });
                }
                continue;
            }
            banks[c.satisfied].push(c);
        }
        let chosen = allocate(banks, k);
        let next: Vec<Item> = chosen
            .into_iter()
            .map(|c| {
                let mut tokens = active[c.parent].tokens.clone();
                tokens.push(c.token);
                Item {
                    tokens,
                    score: c.score,
                    progress: c.progress,
                }
            })
            .collect();
        active = next;

        if step + 1 == cfg.max_len {
            for item in active.drain(..) {
                finished.push(Hypothesis {
                    satisfied: item.progress.satisfied(constraints),
                    constraints_met: item.progress.all_met(),
                    tokens: item.tokens,
                    score: item.score,
                    finished: false,
                    forced: true,
                });
            }
        }
        let best_active = active.iter().map(|h| normalized(h.score, h.tokens.len(), cfg.alpha));
        if active.is_empty() || done(&finished, best_active, k, cfg.alpha) {
            break;
        }
    }

    rank(&mut finished, cfg.alpha);
    finished.truncate(k);
    if finished.is_empty() {
        return Err(Error::Config("search produced no hypotheses".into()));
    }
    let unsatisfied = !finished[0].constraints_met;
    Ok(SearchOutput {
        hypotheses: finished,
        calls_per_step: calls,
        unsatisfied,
    })
}

/// True once `k` finished hypotheses exist and no active one ranks above
/// the worst of the best `k`.
fn done(finished: &[Hypothesis], mut active: impl Iterator<Item = f64>, k: usize, alpha: f64) -> bool {
    if finished.len() < k {
        return false;
    }
    let mut scores: Vec<f64> = finished
        .iter()
        .filter(|h| h.constraints_met)
        .map(|h| h.normalized(alpha))
        .collect();
    if scores.len() < k {
        return false;
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let worst = scores[k - 1];
    active.all(|s| s <= worst)
}

/// Splits `k` slots across banks: `k / banks` each, the remainder to the
/// most advanced nonempty banks, then unused slots to the most advanced
/// banks that still have candidates. Each bank is already best first.
fn allocate(banks: Vec<Vec<Candidate>>, k: usize) -> Vec<Candidate> {
    let n = banks.len();
    let base = k / n;
    let mut quota = vec![base; n];
    let mut rest = k - base * n;
    for b in (0..n).rev() {
        if rest == 0 {
            break;
        }
        if !banks[b].is_empty() {
            quota[b] += 1;
            rest -= 1;
        }
    }
    let mut taken: Vec<usize> = banks.iter().zip(&quota).map(|(bank, &q)| q.min(bank.len())).collect();
    let mut spare = k - taken.iter().sum::<usize>();
    for b in (0..n).rev() {
        if spare == 0 {
            break;
        }
        let extra = (banks[b].len() - taken[b]).min(spare);
        taken[b] += extra;
        spare -= extra;
    }
    let mut chosen: Vec<Candidate> = banks
        .into_iter()
        .zip(taken)
        .flat_map(|(bank, t)| bank.into_iter().take(t))
        .collect();
    chosen.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.parent.cmp(&b.parent))
            .then(a.token.cmp(&b.token))
    });
    chosen
}
