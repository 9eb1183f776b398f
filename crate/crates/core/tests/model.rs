use lcmt_core::data::vocab::{BOS, EOS};
use lcmt_core::memory::{ConstraintMemory, ConstraintPair};
use lcmt_core::model::params::positional_encoding;
use lcmt_core::model::{joint_loss, Adam, AdamConfig, Batch, Forward, Model, ModelConfig, Norm};
use lcmt_core::tensor::{grad_check, kernels, Tape, Tensor};
use lcmt_core::{Error, Span};

fn tiny(blocks: usize, memory: Option<usize>) -> ModelConfig {
    ModelConfig {
        src_vocab: 9,
        tgt_vocab: 10,
        d_model: 4,
        n_blocks: blocks,
        n_heads: 2,
        ffn_width: 6,
        norm: Norm::Pre,
        memory_block: memory,
        memory_heads: 1,
        lambda_att: 1.0,
        max_len: 12,
    }
}

fn small(memory: Option<usize>) -> ModelConfig {
    ModelConfig {
        src_vocab: 20,
        tgt_vocab: 22,
        d_model: 32,
        n_blocks: 2,
        n_heads: 4,
        ffn_width: 64,
        norm: Norm::Pre,
        memory_block: memory,
        memory_heads: 1,
        lambda_att: 1.0,
        max_len: 16,
    }
}

fn set(model: &mut Model<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let t = model.params.by_name_mut(name).unwrap();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

// Plain-loop re-implementation of the encoder used as an oracle.
mod oracle {
    use super::*;

    pub type Mat = Vec<Vec<f64>>;

    fn p<'a>(m: &'a Model<f64>, name: &str) -> &'a Tensor<f64> {
        m.params.by_name(name).unwrap()
    }

    fn mm(x: &Mat, w: &Tensor<f64>) -> Mat {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                    .collect()
            })
            .collect()
    }

    fn layer_norm(x: &Mat, g: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                    .collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn self_attention(m: &Model<f64>, prefix: &str, x: &Mat) -> Mat {
        let heads = m.config.n_heads;
        let d = m.config.d_model;
        let dh = d / heads;
        let q = mm(x, p(m, &format!("{prefix}.wq")));
        let k = mm(x, p(m, &format!("{prefix}.wk")));
        let v = mm(x, p(m, &format!("{prefix}.wv")));
        let mut out = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..x.len() {
                    let w = (scores[j] - mx).exp() / z;
                    for c in 0..dh {
                        out[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        mm(&out, p(m, &format!("{prefix}.wo")))
    }

    pub fn encode(m: &Model<f64>, src: &[usize]) -> Mat {
        let d = m.config.d_model;
        let pe = positional_encoding(src.len(), d);
        let emb = p(m, "src_embed");
        let mut x: Mat = src
            .iter()
            .enumerate()
            .map(|(i, &t)| (0..d).map(|c| emb.data()[t * d + c] + pe[i * d + c]).collect())
            .collect();
        let pre = m.config.norm == Norm::Pre;
        let ln = |x: &Mat, name: String| layer_norm(x, p(m, &format!("{name}.g")), p(m, &format!("{name}.b")));
        for b in 1..=m.config.n_blocks {
            let h = if pre { ln(&x, format!("enc{b}.ln1")) } else { x.clone() };
            let a = self_attention(m, &format!("enc{b}.self"), &h);
            x = add(&x, &a);
            if !pre {
                x = ln(&x, format!("enc{b}.ln1"));
            }
            let h = if pre { ln(&x, format!("enc{b}.ln2")) } else { x.clone() };
            let w1 = p(m, &format!("enc{b}.ffn.w1"));
            let b1 = p(m, &format!("enc{b}.ffn.b1"));
            let mut h = mm(&h, w1);
            for row in &mut h {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v + b1.data()[j]).max(0.0);
                }
            }
            let mut f = mm(&h, p(m, &format!("enc{b}.ffn.w2")));
            let b2 = p(m, &format!("enc{b}.ffn.b2"));
            for row in &mut f {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b2.data()[j];
                }
            }
            x = add(&x, &f);
            if !pre {
                x = ln(&x, format!("enc{b}.ln2"));
            }
        }
        if pre {
            x = ln(&x, "enc.ln".into());
        }
        x
    }
}

fn perturb_norms(model: &mut Model<f64>, seed: u64) {
    // Non-trivial layer-norm parameters so the oracle exercises them.
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.contains(".ln") || n.contains(".b"))
        .cloned()
        .collect();
    for (k, name) in names.iter().enumerate() {
        set(model, name, |i| {
            let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
            base + 0.1 * (((i as u64 + 3) * (k as u64 + seed + 1)) % 7) as f64 - 0.3
        });
    }
}

#[test]
fn config_validation() {
    assert!(tiny(2, Some(2)).validate().is_ok());
    assert!(matches!(tiny(2, Some(3)).validate(), Err(Error::Config(_))));
    assert!(matches!(tiny(2, Some(0)).validate(), Err(Error::Config(_))));
    let mut c = tiny(2, None);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(2, None);
    c.lambda_att = -0.1;
    assert!(c.validate().is_err());
    assert!(Model::<f32>::new(tiny(2, Some(5)), 0).is_err());
}

#[test]
fn memory_params_only_with_memory_block() {
    let base = Model::<f32>::new(tiny(2, None), 0).unwrap();
    let aug = Model::<f32>::new(tiny(2, Some(1)), 0).unwrap();
    assert!(base.params.by_name("mem.k_none").is_none());
    assert_eq!(aug.params.len(), base.params.len() + 5);
    let err = Model::from_params(tiny(2, None), aug.params.clone()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("mem.k_none") && msg.contains("extra"), "{msg}");
}

#[test]
fn encode_shape_and_determinism() {
    let m = Model::<f32>::new(small(Some(2)), 3).unwrap();
    let one = m.encode(&[5]).unwrap();
    assert_eq!(one.hidden.shape(), &[1, 32]);
    let a = m.encode(&[5, 6, 7, 8]).unwrap();
    let b = m.encode(&[5, 6, 7, 8]).unwrap();
    assert!(a.hidden.bitwise_eq(&b.hidden));
    assert!(a.memory_probs.is_none());
}

#[test]
fn encode_rejects_bad_input() {
    let m = Model::<f32>::new(small(None), 3).unwrap();
    assert!(matches!(
        m.encode(&[1; 17]),
        Err(Error::Length { len: 17, max_len: 16 })
    ));
    assert!(matches!(m.encode(&[4, 20]), Err(Error::Index { index: 20, .. })));
}

#[test]
fn encode_matches_straight_line_oracle() {
    for norm in [Norm::Pre, Norm::Post] {
        let mut m = Model::<f64>::new(ModelConfig { norm, ..tiny(2, None) }, 11).unwrap();
        perturb_norms(&mut m, 2);
        let src = [4, 7];
        let got = m.encode(&src).unwrap();
        let want = oracle::encode(&m, &src);
        for (i, row) in want.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((got.hidden.at(i, c) - v).abs() < 1e-12, "{norm:?} row {i} col {c}");
            }
        }
    }
}

#[test]
fn zero_value_memory_is_transparent() {
    let mut m = Model::<f32>::new(small(Some(2)), 5).unwrap();
    let d = m.config.d_model;
    m.params.by_name_mut("mem.v_none").unwrap().data_mut().fill(0.0);
    let mem = m.build_memory(&[]).unwrap();
    let src = [4, 9, 13, 2];
    let plain = m.encode(&src).unwrap();
    let with = m.encode_with_memory(&src, &mem).unwrap();
    assert!(plain.hidden.bitwise_eq(&with.hidden));
    let probs = with.memory_probs.unwrap();
    assert_eq!(probs.shape(), &[4, 1]);
    assert!(probs.data().iter().all(|&p| p == 1.0));
    assert_eq!(mem.width(), d);
}

#[test]
fn memory_probs_have_one_column_per_slot() {
    let m = Model::<f32>::new(small(Some(1)), 6).unwrap();
    let pairs = [
        ConstraintPair::new(vec![5], vec![7], 0, Span::new(0, 1)),
        ConstraintPair::new(vec![6, 8], vec![9], 0, Span::new(1, 3)),
    ];
    let mem = m.build_memory(&pairs).unwrap();
    let out = m.encode_with_memory(&[5, 6, 8, 10, 11], &mem).unwrap();
    let probs = out.memory_probs.unwrap();
    assert_eq!(probs.shape(), &[5, 3]);
    for r in 0..5 {
        let s: f32 = probs.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn aligned_large_key_saturates_attention() {
    let cfg = ModelConfig {
        n_blocks: 1,
        ..small(Some(1))
    };
    let d = cfg.d_model;
    let mut m = Model::<f64>::new(cfg, 8).unwrap();
    set(&mut m, "mem.wq", |i| if i / d == i % d { 1.0 } else { 0.0 });
    set(&mut m, "enc1.ffn.w2", |_| 0.0);
    set(&mut m, "mem.k_none", |_| 0.0);
    let src = [4, 9, 13];
    // With the feed-forward path silenced the encoder output is a
    // renormalized copy of the query, so it fixes the query direction.
    let probe = m.encode(&src).unwrap();
    for j in 0..src.len() {
        let key: Vec<f64> = probe.hidden.row(j).iter().map(|v| 10.0 * v).collect();
        let mut keys = vec![0.0; d * 2];
        for c in 0..d {
            keys[c * 2] = key[c];
        }
        let mem = ConstraintMemory {
            keys: Tensor::new(&[d, 2], keys).unwrap(),
            values: Tensor::new(&[d, 2], vec![0.5; d * 2]).unwrap(),
            slot_origins: vec![Some(0), None],
        };
        let out = m.encode_with_memory(&src, &mem).unwrap();
        let p = out.memory_probs.unwrap();
        assert!(p.at(j, 0) > 0.99, "token {j}: {}", p.at(j, 0));
    }
}

#[test]
fn decode_step_shape_and_causality() {
    let m = Model::<f32>::new(small(None), 9).unwrap();
    let enc = m.encode(&[4, 5, 6]).unwrap();
    assert_eq!(m.decode_step(&enc, &[BOS]).unwrap().len(), 22);
    let long = [BOS, 7, 8, 9, 10, 11];
    let full = m.decoder_logits(&enc, &long).unwrap();
    for i in 1..=3 {
        let short = m.decoder_logits(&enc, &long[..i]).unwrap();
        for r in 0..i {
            assert_eq!(short.row(r), full.row(r), "prefix {i} row {r}");
        }
    }
    assert!(matches!(m.decode_step(&enc, &[7]), Err(Error::Input(_))));
    assert!(matches!(m.decode_step(&enc, &[BOS, 99]), Err(Error::Index { .. })));
}

#[test]
fn batched_next_log_probs_match_single_calls() {
    let m = Model::<f32>::new(small(None), 9).unwrap();
    let enc = m.encode(&[4, 5, 6]).unwrap();
    let a = [BOS, 7];
    let b = [BOS, 8, 9, 10];
    let both = m.next_log_probs(&enc, &[&a, &b]).unwrap();
    let single = m.next_log_probs(&enc, &[&b]).unwrap();
    for (x, y) in both[1].iter().zip(&single[0]) {
        assert!((x - y).abs() < 1e-6);
    }
    let z: f64 = both[0].iter().map(|v| v.exp()).sum();
    assert!((z - 1.0).abs() < 1e-5);
}

#[test]
fn sequence_logprob_identities() {
    let m = Model::<f64>::new(small(None), 12).unwrap();
    let src = vec![4, 5, 6, 7];
    let enc = m.encode(&src).unwrap();

    let eos_only = m.sequence_logprob(&enc, &[EOS]).unwrap();
    let first = kernels::log_softmax(&m.decode_step(&enc, &[BOS]).unwrap());
    assert!((eos_only - first[EOS]).abs() < 1e-12);

    let target = vec![9, 12, 15, EOS];
    let lp = m.sequence_logprob(&enc, &target).unwrap();
    let mut brute = 0.0;
    let mut prefix = vec![BOS];
    for &y in &target {
        let logits = m.decode_step(&enc, &prefix).unwrap();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        brute += ((logits[y] - mx).exp() / z).ln();
        prefix.push(y);
    }
    assert!((lp - brute).abs() < 1e-10);

    let batch = Batch {
        sources: vec![src],
        targets: vec![target.clone()],
        constraints: vec![],
    };
    let mut tape = Tape::new();
    let loss = joint_loss(&mut tape, &m.forward(), &batch).unwrap();
    let ce = tape.scalar(loss.main);
    assert!((lp + target.len() as f64 * ce).abs() < 1e-10);
    assert!(m.sequence_logprob(&enc, &[9]).is_err());
}

fn micro_batch() -> Batch {
    Batch {
        sources: vec![vec![4, 5, 6], vec![7, 8]],
        targets: vec![vec![5, 6, 7, EOS], vec![8, EOS]],
        constraints: vec![
            ConstraintPair::new(vec![5, 6], vec![6, 7], 0, Span::new(1, 3)),
            ConstraintPair::new(vec![7], vec![8], 1, Span::new(0, 1)),
        ],
    }
}

#[test]
fn joint_loss_gradient_check() {
    let mut m = Model::<f64>::new(tiny(2, Some(2)), 21).unwrap();
    perturb_norms(&mut m, 5);
    let cfg = m.config.clone();
    let batch = micro_batch();
    let report = grad_check(&mut m.params, 1e-5, |tape, ps| {
        let f = Forward::new(&cfg, ps);
        Ok(joint_loss(tape, &f, &batch)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn zero_lambda_ignores_labels() {
    let mut cfg = small(Some(2));
    cfg.lambda_att = 0.0;
    let base = Model::<f32>::new(cfg.clone(), 4).unwrap();
    let a_batch = Batch {
        sources: vec![vec![4, 5, 6, 7]],
        targets: vec![vec![8, 9, 10, 11, EOS]],
        constraints: vec![ConstraintPair::new(vec![5], vec![9], 0, Span::new(1, 2))],
    };
    let mut b_batch = a_batch.clone();
    b_batch.constraints[0].source_span = Span::new(3, 4);

    let run = |model: &Model<f32>, batch: &Batch| {
        let mut m = model.clone();
        let mut opt = Adam::new(AdamConfig::default());
        m.train_step(batch, &mut opt).unwrap();
        m
    };
    let a = run(&base, &a_batch);
    let b = run(&base, &b_batch);
    assert!(a.params.bitwise_eq(&b.params));

    let mut weighted = base.clone();
    weighted.config.lambda_att = 1.0;
    let a = run(&weighted, &a_batch);
    let b = run(&weighted, &b_batch);
    assert!(!a.params.bitwise_eq(&b.params));
}

#[test]
fn repeated_pair_is_memorized() {
    let mut m = Model::<f32>::new(small(None), 31).unwrap();
    let src = vec![4, 9, 13, 6, 11];
    let tgt = vec![15, 5, 8, 19, 12, EOS];
    let batch = Batch {
        sources: vec![src.clone()],
        targets: vec![tgt.clone()],
        constraints: vec![],
    };
    let mut opt = Adam::new(AdamConfig::default());
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = m.train_step(&batch, &mut opt).unwrap().main_loss;
    }
    assert!(last < 0.01, "main loss {last}");

    let enc = m.encode(&src).unwrap();
    let mut prefix = vec![BOS];
    while prefix.len() <= tgt.len() {
        let logits = m.decode_step(&enc, &prefix).unwrap();
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap();
        prefix.push(best);
        if best == EOS {
            break;
        }
    }
    assert_eq!(&prefix[1..], tgt.as_slice());
}

#[test]
fn permuting_batch_permutes_sentence_losses() {
    let m = Model::<f64>::new(small(Some(2)), 17).unwrap();
    let batch = Batch {
        sources: vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 12]],
        targets: vec![vec![5, 6, EOS], vec![8, 9, 10, EOS], vec![11, EOS]],
        constraints: vec![
            ConstraintPair::new(vec![5], vec![6], 0, Span::new(1, 2)),
            ConstraintPair::new(vec![7, 8], vec![8, 9], 1, Span::new(0, 2)),
            ConstraintPair::new(vec![11], vec![11], 2, Span::new(2, 3)),
        ],
    };
    let perm = [2usize, 0, 1];
    let mut permuted = Batch::default();
    for &i in &perm {
        permuted.sources.push(batch.sources[i].clone());
        permuted.targets.push(batch.targets[i].clone());
    }
    for (new, &old) in perm.iter().enumerate() {
        for c in batch.constraints.iter().filter(|c| c.origin == old) {
            let mut c = c.clone();
            c.origin = new;
            permuted.constraints.push(c);
        }
    }
    let a = m.sentence_losses(&batch).unwrap();
    let b = m.sentence_losses(&permuted).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!((b[new] - a[old]).abs() < 1e-10, "{} vs {}", b[new], a[old]);
    }
}

#[test]
fn training_is_deterministic() {
    let batch = micro_batch();
    let run = || {
        let mut m = Model::<f32>::new(tiny(2, Some(1)), 40).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            m.train_step(&batch, &mut opt).unwrap();
        }
        m
    };
    assert!(run().params.bitwise_eq(&run().params));
}

#[test]
fn non_finite_parameters_raise_training_error() {
    let mut m = Model::<f32>::new(tiny(2, Some(1)), 41).unwrap();
    m.params.by_name_mut("src_embed").unwrap().data_mut()[4 * 4] = f32::NAN;
    let mut opt = Adam::new(AdamConfig::default());
    let err = m.train_step(&micro_batch(), &mut opt).unwrap_err();
    assert!(matches!(err, Error::Training { step: 1, .. }), "{err}");
}
