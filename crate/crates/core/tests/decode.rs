use lcmt_core::decode::{beam_search, dba_decode, greedy, SearchConfig, StepScorer};
use lcmt_core::rng::seeded;
use lcmt_core::Result;
use rand::Rng;
use rand_distr::StandardNormal;

const EOS: usize = 2;

/// Deterministic pseudo-model: each prefix gets its own seeded logits.
struct RandomScorer {
    vocab: usize,
    seed: u64,
    temperature: f64,
}

impl RandomScorer {
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &t in prefix {
            h = h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1);
        }
        let mut rng = seeded(h);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * self.temperature)
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
        logits.iter().map(|x| x - lse).collect()
    }
}

impl StepScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.log_probs(p)).collect())
    }
}

/// Always emits the next token of a fixed sequence with probability one.
struct Scripted(Vec<usize>, usize);

impl StepScorer for Scripted {
    fn vocab_size(&self) -> usize {
        self.1
    }

    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let next = self.0.get(p.len()).copied().unwrap_or(EOS);
                (0..self.1).map(|v| if v == next { 0.0 } else { -1e9 }).collect()
            })
            .collect())
    }
}

fn cfg(beam: usize, max_len: usize, alpha: f64) -> SearchConfig {
    SearchConfig {
        beam,
        max_len,
        alpha,
        eos: EOS,
        banned: vec![],
    }
}

fn seq_score(s: &RandomScorer, tokens: &[usize]) -> f64 {
    (0..tokens.len()).map(|i| s.log_probs(&tokens[..i])[tokens[i]]).sum()
}

/// Every complete output: EOS-terminated sequences up to `max_len` and
/// EOS-free sequences of exactly `max_len`.
fn all_outputs(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for v in 0..vocab {
                let mut s = p.clone();
                s.push(v);
                if v == EOS || len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

fn contains(hay: &[usize], needle: &[usize]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Whether the constraints fit as pairwise disjoint windows of `seq`.
fn disjoint_fit(seq: &[usize], constraints: &[Vec<usize>], used: &mut Vec<bool>) -> bool {
    let Some((first, rest)) = constraints.split_first() else {
        return true;
    };
    for start in 0..seq.len() {
        let end = start + first.len();
        if end > seq.len() || seq[start..end] != first[..] || used[start..end].iter().any(|&u| u) {
            continue;
        }
        used[start..end].iter_mut().for_each(|u| *u = true);
        let ok = disjoint_fit(seq, rest, used);
        used[start..end].iter_mut().for_each(|u| *u = false);
        if ok {
            return true;
        }
    }
    false
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..100 {
        let s = RandomScorer {
            vocab: 6,
            seed,
            temperature: 2.0,
        };
        let c = cfg(1, 7, 0.6);
        let g = greedy(&s, &c).unwrap();
        let b = beam_search(&s, &c).unwrap();
        assert_eq!(b.best().tokens, g.best().tokens, "seed {seed}");
        assert_eq!(b.best().score.to_bits(), g.best().score.to_bits());
    }
}

#[test]
fn one_hot_model_yields_its_sequence() {
    let s = Scripted(vec![4, 7, 5], 9);
    let out = beam_search(&s, &cfg(12, 10, 0.6)).unwrap();
    assert_eq!(out.best().tokens, vec![4, 7, 5, EOS]);
    assert!(out.best().finished && !out.best().forced);
    assert!(out.best().score.abs() < 1e-12);
}

#[test]
fn max_len_force_finishes() {
    let s = Scripted(vec![4, 7, 5, 6, 8], 9);
    let out = beam_search(&s, &cfg(3, 3, 0.6)).unwrap();
    assert_eq!(out.best().tokens, vec![4, 7, 5]);
    assert!(out.best().forced && !out.best().finished);
    let g = greedy(&s, &cfg(1, 3, 0.6)).unwrap();
    assert!(g.best().forced);
}

#[test]
fn banned_tokens_never_appear() {
    let s = RandomScorer {
        vocab: 8,
        seed: 5,
        temperature: 3.0,
    };
    let mut c = cfg(4, 6, 0.6);
    c.banned = vec![0, 1, 3];
    for h in beam_search(&s, &c).unwrap().hypotheses {
        assert!(h.tokens.iter().all(|t| ![0, 1, 3].contains(t)));
    }
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..50 {
        let s = RandomScorer {
            vocab: 3,
            seed,
            temperature: 1.5,
        };
        let c = cfg(12, 3, 0.6);
        let best = all_outputs(3, 3)
            .into_iter()
            .map(|t| {
                let n = seq_score(&s, &t) / (t.len() as f64).powf(0.6);
                (n, t)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .unwrap();
        let got = beam_search(&s, &c).unwrap();
        assert_eq!(got.best().tokens, best.1, "seed {seed}");
    }
}

#[test]
fn wider_beam_never_scores_lower_on_tiny_instances() {
    for seed in 0..50 {
        let s = RandomScorer {
            vocab: 3,
            seed,
            temperature: 1.5,
        };
        let one = beam_search(&s, &cfg(1, 3, 0.0)).unwrap();
        let wide = beam_search(&s, &cfg(12, 3, 0.0)).unwrap();
        assert!(wide.best().score >= one.best().score - 1e-12);
    }
}

#[test]
fn dba_without_constraints_is_beam_search() {
    for seed in 0..60 {
        let s = RandomScorer {
            vocab: 7,
            seed,
            temperature: 2.0,
        };
        for k in [1usize, 2, 5, 12] {
            let c = cfg(k, 6, 0.6);
            let a = beam_search(&s, &c).unwrap();
            let b = dba_decode(&s, &c, &[]).unwrap();
            assert_eq!(a.hypotheses, b.hypotheses, "seed {seed} k {k}");
            assert_eq!(a.calls_per_step, b.calls_per_step);
        }
    }
}

#[test]
fn single_token_constraint_is_placed() {
    for seed in 0..50 {
        let s = RandomScorer {
            vocab: 3,
            seed,
            temperature: 2.0,
        };
        let target = (seed % 2) as usize;
        let c = cfg(4, 4, 0.6);
        let out = dba_decode(&s, &c, &[vec![target]]).unwrap();
        assert!(out.best().tokens.contains(&target), "seed {seed}");
        assert!(out.best().constraints_met && !out.unsatisfied);
        // No satisfying output scores above the constrained optimum.
        let optimum = all_outputs(3, 4)
            .into_iter()
            .filter(|t| t.contains(&target))
            .map(|t| seq_score(&s, &t) / (t.len() as f64).powf(0.6))
            .fold(f64::MIN, f64::max);
        assert!(out.best().normalized(0.6) <= optimum + 1e-12);
    }
}

#[test]
fn dba_satisfies_feasible_constraints() {
    let mut rng = seeded(2024);
    let mut feasible_cases = 0;
    for case in 0..200 {
        let vocab = rng.random_range(3..=4usize);
        let max_len = rng.random_range(2..=5usize);
        let beam = rng.random_range(1..=6usize);
        let n = rng.random_range(1..=2usize);
        let content: Vec<usize> = (0..vocab).filter(|&v| v != EOS).collect();
        let constraints: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..=2usize);
                (0..len).map(|_| content[rng.random_range(0..content.len())]).collect()
            })
            .collect();
        let s = RandomScorer {
            vocab,
            seed: case,
            temperature: 2.0,
        };
        let feasible = all_outputs(vocab, max_len).iter().any(|seq| {
            let body: &[usize] = if seq.last() == Some(&EOS) {
                &seq[..seq.len() - 1]
            } else {
                seq
            };
            disjoint_fit(body, &constraints, &mut vec![false; body.len()])
        });
        let out = dba_decode(&s, &cfg(beam, max_len, 0.6), &constraints).unwrap();
        if feasible {
            feasible_cases += 1;
            let best = out.best();
            for c in &constraints {
                assert!(contains(&best.tokens, c), "case {case}: {:?} lacks {c:?}", best.tokens);
            }
            assert!(!out.unsatisfied);
        } else {
            assert!(out.unsatisfied, "case {case}");
        }
    }
    assert!(feasible_cases > 100);
}

#[test]
fn multi_token_constraints_are_contiguous() {
    let s = RandomScorer {
        vocab: 12,
        seed: 77,
        temperature: 2.0,
    };
    let constraints = vec![vec![5, 9, 4], vec![7]];
    let out = dba_decode(&s, &cfg(12, 10, 0.6), &constraints).unwrap();
    for c in &constraints {
        assert!(contains(&out.best().tokens, c));
    }
    assert_eq!(out.best().satisfied, 4);
}

#[test]
fn forward_calls_per_step_ignore_constraint_count() {
    let s = RandomScorer {
        vocab: 64,
        seed: 9,
        temperature: 1.0,
    };
    let c = cfg(12, 14, 0.6);
    let pool = [10usize, 20, 30, 40, 50, 11, 21, 31];
    for n in [0usize, 1, 2, 4, 8] {
        let constraints: Vec<Vec<usize>> = pool[..n].iter().map(|&t| vec![t]).collect();
        let out = dba_decode(&s, &c, &constraints).unwrap();
        assert_eq!(out.calls_per_step[0], 1);
        assert!(
            out.calls_per_step[1..].iter().all(|&k| k == 12),
            "C={n}: {:?}",
            out.calls_per_step
        );
        if n > 0 {
            assert!(out.best().constraints_met);
        }
    }
}

#[test]
fn invalid_constraints_are_rejected() {
    let s = RandomScorer {
        vocab: 5,
        seed: 1,
        temperature: 1.0,
    };
    assert!(dba_decode(&s, &cfg(2, 4, 0.6), &[vec![]]).is_err());
    assert!(dba_decode(&s, &cfg(2, 4, 0.6), &[vec![9]]).is_err());
    assert!(dba_decode(&s, &cfg(2, 4, 0.6), &[vec![EOS]]).is_err());
    assert!(beam_search(&s, &cfg(0, 4, 0.6)).is_err());
}
