mod common;

use proptest::prelude::*;
use skipscope_core::infotheory::{bound_report, entropy_stats, quantize_trace, DiscreteJoint, Dissimilarity};
use skipscope_core::{HiddenTrace, Modality};

#[test]
fn bounds_hold_on_1000_random_joints() {
    let mut applicable = (0, 0);
    for seed in 0..1000 {
        let (joint, t) = common::random_joint(seed);
        let r = bound_report(&joint, t).unwrap();
        if r.applicable_fano {
            applicable.0 += 1;
            assert!(r.h_cond <= r.fano_upper + 1e-9, "seed {seed}: {r:?}");
        }
        if r.applicable_mi {
            applicable.1 += 1;
            assert!(r.i_exact >= r.mi_lower - 1e-9, "seed {seed}: {r:?}");
        }
    }
    assert!(applicable.0 > 500 && applicable.1 > 100, "{applicable:?}");
}

proptest! {
    #![proptest_config(common::cases(256))]

    #[test]
    fn entropy_identities(seed in any::<u64>()) {
        let (joint, _) = common::random_joint(seed);
        let s = entropy_stats(&joint);
        prop_assert!(s.mi >= -1e-12);
        prop_assert!(s.h_x_given_y <= s.h_x + 1e-12);
        prop_assert!((s.h_xy - (s.h_y + s.h_x_given_y)).abs() < 1e-9);
        prop_assert!((s.h_xy - (s.h_x + s.h_y_given_x)).abs() < 1e-9);
    }

    #[test]
    fn relabeling_is_invisible(seed in any::<u64>(), shift in 1usize..5) {
        let (joint, t) = common::random_joint(seed);
        let d = joint.dissimilarity.clone().unwrap();
        let n = d.size();
        // Reverse-and-shift permutation; the metric is carried along with it.
        let perm = |a: usize| (n - 1 - a + shift) % n;
        let mut inv = vec![0; n];
        for a in 0..n {
            inv[perm(a)] = a;
        }
        let moved = Dissimilarity::from_fn(n, |a, b| d.get(inv[a], inv[b]));
        // Keep the pmf aligned with the relabeled supports, which must stay sorted.
        let relabel = |s: &[usize]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by_key(|&i| perm(s[i]));
            (idx.iter().map(|&i| perm(s[i])).collect::<Vec<_>>(), idx)
        };
        let (sx, ix) = relabel(&joint.support_x);
        let (sy, iy) = relabel(&joint.support_y);
        let pmf: Vec<f64> = ix.iter().flat_map(|&a| iy.iter().map(move |&b| (a, b))).map(|(a, b)| joint.p(a, b)).collect();
        let other = DiscreteJoint::new(sx, sy, pmf, Some(moved)).unwrap();
        let (s1, s2) = (entropy_stats(&joint), entropy_stats(&other));
        prop_assert!((s1.h_x_given_y - s2.h_x_given_y).abs() < 1e-12);
        prop_assert!((s1.mi - s2.mi).abs() < 1e-12);
        let (r1, r2) = (bound_report(&joint, t).unwrap(), bound_report(&other, t).unwrap());
        prop_assert!((r1.fano_upper - r2.fano_upper).abs() < 1e-12);
        prop_assert!((r1.mi_lower - r2.mi_lower).abs() < 1e-12);
        prop_assert_eq!(r1.applicable_fano, r2.applicable_fano);
        prop_assert_eq!(r1.applicable_mi, r2.applicable_mi, "{:?} {:?}", r1, r2);
    }

    #[test]
    fn quantization_separates_distinct_vectors(seed in any::<u64>(), distinct in 2usize..6, tokens in 2usize..10) {
        let mut r = common::rng(seed);
        use rand::Rng;
        let dim = 4;
        let pool: Vec<Vec<f32>> = (0..distinct)
            .map(|i| (0..dim).map(|d| if d == i % dim { 1.0 + (i / dim) as f32 } else { 0.1 * i as f32 }).collect())
            .collect();
        let picks: Vec<usize> = (0..2 * tokens).map(|_| r.random_range(0..distinct)).collect();
        let states: Vec<f32> = picks.iter().flat_map(|&i| pool[i].clone()).collect();
        let trace = HiddenTrace {
            layer_count: 2,
            token_count: tokens,
            dim,
            states,
            modality_mask: vec![Modality::Text; tokens],
            sample_id: String::new(),
            answer_token_index: None,
        };
        let q = quantize_trace(&trace, 1, Modality::Text, 8, seed).unwrap();
        // Any two tokens share a code iff they share a vector.
        let codes: Vec<usize> = q.pairs.iter().map(|p| p.0).chain(q.pairs.iter().map(|p| p.1)).collect();
        for a in 0..codes.len() {
            for b in 0..codes.len() {
                prop_assert_eq!(codes[a] == codes[b], picks[a] == picks[b]);
            }
        }
    }
}
