use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::sample::subsequence;

use mime::ehr::{
    flatten_visit, is_complex_visit, parse_cohort, serialize_cohort, split_folds, CodeVocab,
    DxObject, Visit, DEFAULT_RATIOS,
};
use mime::metrics::{pr_auc, roc_auc, top_k};
use mime::mime::{count_params, encode_visit, MimeParams};
use mime::numerics::{seeded_rng, softmax};
use mime::synth::{generate, GenConfig};
use mime::trainer::match_param_count;

const N_DX: usize = 10;
const N_TX: usize = 6;

fn visit() -> impl Strategy<Value = Visit> {
    subsequence((0..N_DX).collect::<Vec<_>>(), 1..=5).prop_flat_map(|dx| {
        let n = dx.len();
        proptest::collection::vec(subsequence((0..N_TX).collect::<Vec<_>>(), 0..=3), n).prop_map(
            move |tx| {
                Visit::new(
                    dx.iter()
                        .zip(tx)
                        .map(|(&d, t)| DxObject::new(d, t))
                        .collect(),
                )
            },
        )
    })
}

/// A visit together with a shuffled copy (objects and treatment lists).
fn visit_and_shuffle() -> impl Strategy<Value = (Visit, Visit)> {
    visit().prop_flat_map(|v| {
        let objects = Just(v.objects.clone()).prop_shuffle();
        (Just(v), objects).prop_flat_map(|(v, objects)| {
            let tx: Vec<_> = objects
                .iter()
                .map(|o| Just(o.tx.clone()).prop_shuffle())
                .collect();
            (Just(v), Just(objects), tx).prop_map(|(v, objects, tx)| {
                let shuffled = objects
                    .into_iter()
                    .zip(tx)
                    .map(|(o, t)| DxObject::new(o.dx, t))
                    .collect();
                (v, Visit::new(shuffled))
            })
        })
    })
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    proptest::collection::vec((-20i32..20, any::<bool>()), 2..60).prop_map(|pairs| {
        let mut s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let mut l: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        // one of each class keeps both metrics defined
        l[0] = true;
        l[1] = false;
        s[0] = s[0].max(-19.0);
        (s, l)
    })
}

proptest! {
    #[test]
    fn softmax_is_permutation_equivariant(
        (x, perm) in proptest::collection::vec(-30.0f64..30.0, 1..20)
            .prop_flat_map(|x| { let n = x.len(); (Just(x), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) })
    ) {
        let p = softmax(&x);
        let permuted: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let q = softmax(&permuted);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((q[j] - p[i]).abs() <= 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn flattening_ignores_order((v, shuffled) in visit_and_shuffle()) {
        let vocab = CodeVocab::synthetic(N_DX, N_TX).unwrap();
        prop_assert_eq!(flatten_visit(&v, &vocab), flatten_visit(&shuffled, &vocab));
    }

    #[test]
    fn mime_encoding_ignores_order((v, shuffled) in visit_and_shuffle(), seed in 0u64..1000) {
        let params = MimeParams::init(5, N_DX, N_TX, &mut seeded_rng(seed));
        prop_assert_eq!(encode_visit(&v, &params).v, encode_visit(&shuffled, &params).v);
    }

    #[test]
    fn complexity_matches_pairwise_definition(v in visit()) {
        let sets: Vec<BTreeSet<usize>> =
            v.objects.iter().map(|o| o.tx.iter().copied().collect()).collect();
        let mut brute = false;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                brute |= sets[i] != sets[j];
            }
        }
        prop_assert_eq!(is_complex_visit(&v), brute);
    }

    #[test]
    fn aucs_are_invariant_under_monotone_maps((s, l) in labelled_scores()) {
        let t: Vec<f64> = s.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect();
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
        prop_assert_eq!(pr_auc(&s, &l).unwrap(), pr_auc(&t, &l).unwrap());
    }

    #[test]
    fn reversing_scores_mirrors_roc((s, l) in labelled_scores()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        let ap = pr_auc(&s, &l).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_ranking(
        s in proptest::collection::vec(-5i32..5, 1..40), k in 1usize..50
    ) {
        let s: Vec<f64> = s.into_iter().map(f64::from).collect();
        let all = top_k(&s, s.len());
        let kk = top_k(&s, k);
        prop_assert_eq!(&all[..k.min(s.len())], &kk[..]);
        for w in all.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn matched_size_brackets_the_budget(b in 4usize..200, a in 1usize..400, t in 1usize..400) {
        // z = 1 needs 3(|A|+|B|) + 5, within the budget from b = 4 on
        let budget = b * (a + t) + b;
        let z = match_param_count(budget, a, t).unwrap();
        prop_assert!(count_params(z, a, t) <= budget);
        prop_assert!(count_params(z + 1, a, t) > budget);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_partition_the_cohort(seed in 0u64..10_000, n in 10usize..120) {
        let cfg = GenConfig { seed, n_patients: n, n_dx: 8, n_tx: 4, mean_visits: 2.0, ..GenConfig::default() };
        let (cohort, _) = generate(&cfg).unwrap();
        for f in split_folds(&cohort, seed, 3, DEFAULT_RATIOS).unwrap() {
            let mut all: Vec<usize> = f.train.iter().chain(&f.validation).chain(&f.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cohort_files_round_trip(seed in 0u64..10_000) {
        let cfg = GenConfig { seed, n_patients: 15, n_dx: 6, n_tx: 5, mean_tx_per_dx: 1.0, ..GenConfig::default() };
        let (cohort, _) = generate(&cfg).unwrap();
        let mut bytes = Vec::new();
        serialize_cohort(&cohort, &mut bytes).unwrap();
        let back = parse_cohort(&bytes[..]).unwrap();
        prop_assert_eq!(back.vocab, cohort.vocab);
        prop_assert_eq!(back.patients, cohort.patients);
    }
}
