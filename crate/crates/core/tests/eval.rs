use lcmt_core::eval::{average, bleu_corpus, constraint_satisfaction, corpus_stats, BleuOptions, Table};
use proptest::prelude::*;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Textbook single-sentence BLEU-4, written independently of the library.
fn oracle_bleu(hyp: &[&str], reference: &[&str]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let grams = |s: &[&str]| -> Vec<String> { s.windows(n).map(|w| w.join(" ")).collect() };
        let h = grams(hyp);
        let mut r = grams(reference);
        let mut m = 0;
        for g in &h {
            if let Some(pos) = r.iter().position(|x| x == g) {
                r.remove(pos);
                m += 1;
            }
        }
        let p = if m == 0 {
            1.0 / (h.len() as f64 + 1.0)
        } else {
            m as f64 / h.len() as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * (log_sum / 4.0).exp()
}

#[test]
fn identical_corpus_scores_100() {
    let refs = vec![words("a b c d e"), words("f g h i")];
    let r = bleu_corpus(&refs, &refs, BleuOptions::default()).unwrap();
    assert!((r.bleu - 100.0).abs() < 1e-9);
    assert_eq!(r.brevity_penalty, 1.0);
}

#[test]
fn zero_overlap_without_smoothing_is_zero() {
    let h = vec![words("a b c d")];
    let r = vec![words("a x b y")];
    let out = bleu_corpus(&h, &r, BleuOptions { smooth: false }).unwrap();
    assert_eq!(out.bleu, 0.0);
    let smoothed = bleu_corpus(&h, &r, BleuOptions::default()).unwrap();
    assert!(smoothed.bleu > 0.0);
}

#[test]
fn cat_sat_on_mat() {
    let h = words("the cat sat on mat");
    let r = words("the cat sat on the mat");
    let got = bleu_corpus(
        std::slice::from_ref(&h),
        std::slice::from_ref(&r),
        BleuOptions::default(),
    )
    .unwrap();
    let hand = 100.0 * (-0.2f64).exp() * 0.25f64.powf(0.25);
    assert!((got.bleu - oracle_bleu(&h, &r)).abs() < 0.01);
    assert!((got.bleu - hand).abs() < 0.01);
    assert!((got.bleu - 57.893).abs() < 0.01);
    assert_eq!(got.matches, [5, 3, 2, 1]);
    assert_eq!(got.totals, [5, 4, 3, 2]);
}

#[test]
fn bleu_input_errors() {
    let empty: Vec<Vec<&str>> = vec![];
    assert!(bleu_corpus(&empty, &empty, BleuOptions::default()).is_err());
    assert!(bleu_corpus(&[words("a")], &[words("a"), words("b")], BleuOptions::default()).is_err());
}

#[test]
fn csr_examples() {
    let hyps = vec![vec![1, 2, 3, 4], vec![5, 6]];
    let all = vec![vec![vec![2, 3]], vec![vec![6]]];
    assert_eq!(constraint_satisfaction(&hyps, &all).unwrap().rate, 1.0);
    let none = vec![vec![vec![3, 2]], vec![vec![7]]];
    assert_eq!(constraint_satisfaction(&hyps, &none).unwrap().rate, 0.0);
    let two_of_three = vec![vec![vec![1], vec![4, 5]], vec![vec![5, 6]]];
    let r = constraint_satisfaction(&hyps, &two_of_three).unwrap();
    assert!((r.rate - 0.6667).abs() < 1e-4);
    assert_eq!((r.satisfied, r.total), (2, 3));
}

fn fixture(n_sentences: usize, subwords: usize) -> Vec<Vec<Vec<String>>> {
    // Spread `subwords` one-word phrases over the first sentences, at most
    // ten per sentence; the rest have none.
    let mut out = vec![Vec::new(); n_sentences];
    for i in 0..subwords {
        out[i / 10].push(vec![format!("w{i}")]);
    }
    out
}

#[test]
fn published_corpus_averages() {
    let a = corpus_stats(&fixture(2001, 14606), None);
    assert_eq!(a.n_subwords_in_phrases, 14606);
    assert_eq!(format!("{:.2}", a.avg_constraints_per_sentence), "7.30");
    let b = corpus_stats(&fixture(3003, 20890), None);
    assert_eq!(format!("{:.2}", b.avg_constraints_per_sentence), "6.96");
    assert_eq!(format!("{:.2}", average(14606, 2001)), "7.30");
    assert_eq!(format!("{:.2}", average(20890, 3003)), "6.96");
}

#[test]
fn stats_without_phrases_are_zero() {
    let s = corpus_stats(&fixture(5, 0), None);
    assert_eq!((s.n_phrases, s.n_words_in_phrases, s.n_subwords_in_phrases), (0, 0, 0));
    assert_eq!(s.avg_constraints_per_sentence, 0.0);
}

#[test]
fn subword_hook_counts_pieces() {
    let corpus = vec![vec![vec!["unbelievable".to_string(), "cat".to_string()]], vec![]];
    let split = |w: &str| w.len().div_ceil(4);
    let s = corpus_stats(&corpus, Some(&split));
    assert_eq!(s.n_words_in_phrases, 2);
    assert_eq!(s.n_subwords_in_phrases, 3 + 1);
    assert_eq!(s.avg_constraints_per_sentence, 2.0);
}

#[test]
fn table_layout() {
    let mut t = Table::new("BLEU", &["ratio", "base", "lcnmt"]);
    t.push(vec!["0.3".into(), "41.20".into(), "55.01".into()]);
    t.push(vec!["0.5".into(), "41.20".into(), "100.00".into()]);
    let want = "BLEU\nratio   base   lcnmt\n--------------------\n0.3    41.20   55.01\n0.5    41.20  100.00\n";
    assert_eq!(t.to_string(), want);
}

fn corpus_strategy() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    proptest::collection::vec(
        (
            proptest::collection::vec(0u8..5, 1..8),
            proptest::collection::vec(0u8..5, 1..8),
        ),
        1..6,
    )
}

proptest! {
    #[test]
    fn bleu_ignores_sentence_order(pairs in corpus_strategy(), rot in 0usize..6) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (h2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        let a = bleu_corpus(&h, &r, BleuOptions::default()).unwrap();
        let b = bleu_corpus(&h2, &r2, BleuOptions::default()).unwrap();
        prop_assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
        prop_assert!((0.0..=100.0).contains(&a.bleu));
    }

    #[test]
    fn bleu_is_100_only_for_exact_match(pairs in corpus_strategy()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = bleu_corpus(&h, &r, BleuOptions::default()).unwrap();
        prop_assert_eq!((b.bleu - 100.0).abs() < 1e-9, h == r);
    }

    #[test]
    fn csr_never_drops_when_adding_a_satisfied_constraint(
        hyp in proptest::collection::vec(0u8..4, 1..8),
        cs in proptest::collection::vec(proptest::collection::vec(0u8..4, 1..3), 0..4),
        start in 0usize..8,
    ) {
        let before = constraint_satisfaction(std::slice::from_ref(&hyp), std::slice::from_ref(&cs)).unwrap();
        let s = start % hyp.len();
        let mut more = cs;
        more.push(hyp[s..].to_vec());
        let after = constraint_satisfaction(&[hyp], &[more]).unwrap();
        prop_assert!(after.rate >= before.rate || before.total == 0);
    }
}
