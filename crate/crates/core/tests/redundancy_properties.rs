mod common;

use proptest::prelude::*;
use skipscope_core::redundancy::{layer_metrics, redundancy_profile};
use skipscope_core::Modality;

proptest! {
    #![proptest_config(common::cases(128))]

    #[test]
    fn scale_invariance(seed in any::<u64>(), c in 0.01f32..100.0, t in 0.01f64..1.9) {
        let (h, _) = common::random_trace(seed, 3, 6, 4);
        let mut scaled = h.clone();
        // One scale per (layer, token) vector.
        for (i, chunk) in scaled.states.chunks_mut(4).enumerate() {
            let k = if i % 2 == 0 { c } else { 1.0 / c };
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let (a, b) = (redundancy_profile(&[h], t).unwrap(), redundancy_profile(&[scaled], t).unwrap());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!((x.mean_cos_dist - y.mean_cos_dist).abs() < 1e-5);
            prop_assert_eq!(x.n_tokens, y.n_tokens);
        }
    }

    #[test]
    fn proximal_fraction_is_monotone_and_bounds_the_mean(seed in any::<u64>(), t1 in 0.01f64..1.9, dt in 0.0f64..0.09) {
        let (h, _) = common::random_trace(seed, 3, 7, 3);
        let t2 = t1 + dt;
        for layer in 1..3 {
            for m in Modality::ALL {
                if h.count_of(m) == 0 {
                    continue;
                }
                let a = layer_metrics(&h, layer, m, t1).unwrap();
                let b = layer_metrics(&h, layer, m, t2).unwrap();
                prop_assert!(a.proximal_frac <= b.proximal_frac);
                prop_assert!(a.mean_cos_dist < t1 * a.proximal_frac + 2.0 * (1.0 - a.proximal_frac) + 1e-9);
            }
        }
    }

    #[test]
    fn token_order_within_modality_is_irrelevant(seed in any::<u64>(), rot in 1usize..5) {
        let (h, _) = common::random_trace(seed, 3, 8, 3);
        let mut permuted = h.clone();
        for m in Modality::ALL {
            let idx = h.tokens_of(m);
            for (k, &dst) in idx.iter().enumerate() {
                let src = idx[(k + rot) % idx.len()];
                for l in 0..h.layer_count {
                    let (s, d) = ((l * h.token_count + src) * h.dim, (l * h.token_count + dst) * h.dim);
                    permuted.states[d..d + h.dim].copy_from_slice(&h.states[s..s + h.dim]);
                }
            }
        }
        let (a, b) = (redundancy_profile(&[h], 0.3).unwrap(), redundancy_profile(&[permuted], 0.3).unwrap());
        prop_assert_eq!(a, b);
    }
}
