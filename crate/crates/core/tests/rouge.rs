use hiermds::rouge::{lcs_len, rouge_l, rouge_n, score_text, tokenize};
use proptest::prelude::*;

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + brute_lcs(ra, rb)
            } else {
                brute_lcs(ra, b).max(brute_lcs(a, rb))
            }
        }
        _ => 0,
    }
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..4, 0..=12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dp_lcs_matches_recursion(a in seq(), b in seq()) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn f1_is_symmetric(a in seq(), b in seq()) {
        for n in 1..=2 {
            let x = rouge_n(&a, &b, n);
            let y = rouge_n(&b, &a, n);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert!((x.f1 - y.f1).abs() < 1e-15);
        }
        let x = rouge_l(&a, &b);
        let y = rouge_l(&b, &a);
        prop_assert_eq!(x.precision, y.recall);
        prop_assert!((x.f1 - y.f1).abs() < 1e-15);
    }

    #[test]
    fn matching_token_never_lowers_recall(a in seq(), b in seq(), i in 0usize..12) {
        prop_assume!(!b.is_empty());
        let tok = b[i % b.len()];
        let mut longer = a.clone();
        longer.push(tok);
        prop_assert!(rouge_n(&longer, &b, 1).recall >= rouge_n(&a, &b, 1).recall);
        prop_assert!(rouge_l(&longer, &b).recall >= rouge_l(&a, &b).recall);
    }

    #[test]
    fn scores_are_bounded(a in seq(), b in seq()) {
        for e in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
            for v in [e.precision, e.recall, e.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let pr = e.precision + e.recall;
            let expect = if pr == 0.0 { 0.0 } else { 2.0 * e.precision * e.recall / pr };
            prop_assert!((e.f1 - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn identical_and_disjoint() {
    let s = score_text("k1 v2 k3 v4", "k1 v2 k3 v4");
    assert_eq!((s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1), (1.0, 1.0, 1.0));
    let s = score_text("a b", "c d");
    assert_eq!((s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1), (0.0, 0.0, 0.0));
    assert_eq!(tokenize("  A\tb\nC "), vec!["a", "b", "c"]);
}
