mod common;

use proptest::prelude::*;

use mrlrac::io::{decode_embeddings, encode_embeddings, format_pairs, parse_pairs};
use mrlrac::metrics::{auroc, pairwise_prf};
use mrlrac::rac::rac;
use mrlrac::{EmbeddingMatrix, LabeledPair, SimilarityLabel};

use common::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    // coarse values make exact ties between clusters likely
    prop::collection::vec(prop::collection::vec((-4i32..=4).prop_map(|x| x as f64 / 4.0), d), n)
        .prop_filter("zero rows have no direction", |rs| rs.iter().all(|r| r.iter().any(|&x| x != 0.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rac_matches_brute_force(rs in (1usize..24).prop_flat_map(|n| rows(n, 4)), lambda in -0.2f64..0.9) {
        let m = EmbeddingMatrix::from_rows(&rs).unwrap();
        let all: Vec<usize> = (0..rs.len()).collect();
        let got = rac(&m, &all, 4, lambda).unwrap();
        prop_assert_eq!(canon(&got), canon(&brute_force_rac(&rs, 4, lambda)));
    }

    #[test]
    fn auroc_matches_pair_count(
        data in prop::collection::vec((0u8..5, any::<bool>()), 2..60)
            .prop_filter("two classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
    ) {
        let scores: Vec<f64> = data.iter().map(|x| x.0 as f64).collect();
        let labels: Vec<bool> = data.iter().map(|x| x.1).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), brute_force_auroc(&scores, &labels));
    }

    #[test]
    fn prf_matches_enumeration(
        (pred, gold) in (1usize..14).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..n, n)))
    ) {
        let got = pairwise_prf(&blocks(&pred), &blocks(&gold)).unwrap();
        prop_assert_eq!((got.precision, got.recall, got.f1), enumerate_prf(&pred, &gold));
    }

    #[test]
    fn embeddings_round_trip(
        (d, data) in (1usize..4, 1usize..5).prop_flat_map(|(q, n)| {
            (Just(4 * q), prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 4 * q * n))
        })
    ) {
        let n = data.len() / d;
        let ids: Vec<String> = (0..n).map(|i| format!("doc-{i}")).collect();
        let m = EmbeddingMatrix::new(d, data.iter().map(|&x| x as f64).collect(), ids.clone()).unwrap();
        let bytes = encode_embeddings(&m);
        let back = decode_embeddings(&bytes, Some(ids), "mem").unwrap();
        let bits: Vec<u32> = back.data().iter().map(|&x| (x as f32).to_bits()).collect();
        prop_assert_eq!(bits, data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(encode_embeddings(&back), bytes);
    }

    #[test]
    fn pairs_round_trip(raw in prop::collection::vec(("[a-z]{1,6}", "[A-Z0-9 \"\\\\é]{1,6}", 0u8..4), 1..10)) {
        let pairs: Vec<LabeledPair> = raw
            .iter()
            .filter(|(a, b, _)| a != b)
            .map(|(a, b, l)| LabeledPair::labeled(a.clone(), b.clone(), SimilarityLabel::from_ordinal(*l).unwrap()).unwrap())
            .collect();
        let text = format_pairs(&pairs);
        prop_assert_eq!(parse_pairs(&text, "mem").unwrap(), pairs);
    }
}
