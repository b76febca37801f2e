use hiermds::data::{make_batch, BatchConfig, MultiDocExample, PAD_DOC};
use hiermds::mask::{causal_mask, full_mask, hierarchical_mask};
use hiermds::vocab::SOD;
use proptest::prelude::*;

/// `(doc_index, sod_mask, pad_mask)` for documents of the given lengths
/// (SOD included) followed by `pad` PAD slots.
fn layout(lens: &[usize], pad: usize) -> (Vec<usize>, Vec<bool>, Vec<bool>) {
    let mut doc = Vec::new();
    let mut sod = Vec::new();
    for (n, &len) in lens.iter().enumerate() {
        for i in 0..len {
            doc.push(n);
            sod.push(i == 0);
        }
    }
    let k = doc.len();
    doc.extend(std::iter::repeat_n(PAD_DOC, pad));
    sod.extend(std::iter::repeat_n(false, pad));
    let mut pads = vec![false; k];
    pads.extend(std::iter::repeat_n(true, pad));
    (doc, sod, pads)
}

fn layouts() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..=6)
        .prop_flat_map(|n| (proptest::collection::vec(1usize..=10, n), 0usize..6))
        .prop_filter("at most 64 positions", |(lens, pad)| lens.iter().sum::<usize>() + pad <= 64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hierarchical_mask_matches_rule_oracle((lens, pad) in layouts()) {
        let (doc, sod, pads) = layout(&lens, pad);
        let m = hierarchical_mask(&doc, &sod, &pads).unwrap();
        let k = doc.len();
        for q in 0..k {
            for key in 0..k {
                let expect = if pads[key] {
                    false
                } else if pads[q] {
                    true
                } else if sod[q] {
                    doc[key] == doc[q] || sod[key]
                } else {
                    doc[key] == doc[q]
                };
                prop_assert_eq!(m.allowed(q, key), expect, "q={} k={}", q, key);
            }
        }
    }

    #[test]
    fn hierarchical_mask_properties((lens, pad) in layouts()) {
        let (doc, sod, pads) = layout(&lens, pad);
        let m = hierarchical_mask(&doc, &sod, &pads).unwrap();
        let k = doc.len();
        for q in 0..k {
            if !pads[q] {
                prop_assert!(m.allowed(q, q));
                prop_assert!(m.row_count(q) >= 1);
            }
            for key in 0..k {
                if pads[key] {
                    prop_assert!(!m.allowed(q, key));
                }
                if !sod[q] && !sod[key] && !pads[q] && !pads[key] {
                    prop_assert_eq!(m.allowed(q, key), m.allowed(key, q));
                }
            }
        }
        // one document spanning everything
        let merged: Vec<usize> = doc.iter().map(|&d| if d == PAD_DOC { d } else { 0 }).collect();
        let mut one_sod = vec![false; k];
        one_sod[0] = true;
        prop_assert_eq!(hierarchical_mask(&merged, &one_sod, &pads).unwrap(), full_mask(&pads));
    }

    #[test]
    fn batch_layout_invariants(
        docs in proptest::collection::vec(proptest::collection::vec(4usize..30, 0..8), 1..5),
        src_trunc in 4usize..40,
        restart in any::<bool>(),
    ) {
        prop_assume!(docs.iter().any(|d| !d.is_empty()));
        let ex = MultiDocExample { documents: docs.clone(), summary: vec![5, 6] };
        let cfg = BatchConfig { use_sod: true, pos_restart: restart, src_trunc, tgt_trunc: 8 };
        let b = make_batch(&[ex], &cfg).unwrap();
        let s = &b.source;
        prop_assert!(s.src_len <= src_trunc);
        let n_docs = s.doc_index.iter().filter(|&&d| d != PAD_DOC).max().map_or(0, |d| d + 1);
        prop_assert_eq!(s.sod_mask.iter().filter(|&&x| x).count(), n_docs);
        let mut first = 0;
        for p in 0..s.src_len {
            if s.sod_mask[p] {
                first = p;
                prop_assert_eq!(s.input_ids[p], SOD);
            }
            let expect = if restart { p - first } else { p };
            prop_assert_eq!(s.position_ids[p], expect);
        }
        if src_trunc >= 2 * docs.iter().filter(|d| !d.is_empty()).count() {
            // room for every document to keep one ordinary token
            prop_assert_eq!(n_docs, docs.iter().filter(|d| !d.is_empty()).count());
        }
    }
}

#[test]
fn causal_rows_grow_by_one() {
    let m = causal_mask(5);
    for q in 0..5 {
        assert_eq!(m.row_count(q), q + 1);
    }
    assert!(causal_mask(1).allowed(0, 0));
}

#[test]
fn hand_enumerated_two_documents() {
    let (doc, sod, pads) = layout(&[3, 2], 0);
    let m = hierarchical_mask(&doc, &sod, &pads).unwrap();
    let rows: Vec<Vec<usize>> = (0..5).map(|q| (0..5).filter(|&k| m.allowed(q, k)).collect()).collect();
    assert_eq!(
        rows,
        vec![vec![0, 1, 2, 3], vec![0, 1, 2], vec![0, 1, 2], vec![0, 3, 4], vec![3, 4]]
    );
}
