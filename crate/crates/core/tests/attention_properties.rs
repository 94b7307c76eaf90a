mod common;

use proptest::prelude::*;
use skipscope_core::attention::{text_attention_sum, var_profile};
use skipscope_core::Modality;

proptest! {
    #![proptest_config(common::cases(128))]

    #[test]
    fn var_and_text_mass_sum_to_head_count(seed in any::<u64>()) {
        let (_, a) = common::random_trace(seed, 4, 7, 2);
        let a = a.unwrap();
        prop_assume!(a.vision_key_mask.contains(&Modality::Vision));
        let q = a.query_token_ids[0];
        let var = var_profile(&a, q).unwrap();
        let text = text_attention_sum(&a, q).unwrap();
        for (e, t) in var.entries.iter().zip(text) {
            prop_assert!((e.var_raw + t - a.head_count as f64).abs() < 1e-5);
            prop_assert!((e.var_normalized * a.head_count as f64 - e.var_raw).abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_key_permutation_keeps_var(seed in any::<u64>(), rot in 1usize..7) {
        let (_, a) = common::random_trace(seed, 3, 7, 2);
        let a = a.unwrap();
        prop_assume!(a.vision_key_mask.contains(&Modality::Vision));
        let k = a.key_count;
        let mut p = a.clone();
        for key in 0..k {
            p.vision_key_mask[(key + rot) % k] = a.vision_key_mask[key];
        }
        for (src, dst) in a.rows.chunks(k).zip(p.rows.chunks_mut(k)) {
            for key in 0..k {
                dst[(key + rot) % k] = src[key];
            }
        }
        let q = a.query_token_ids[0];
        let (x, y) = (var_profile(&a, q).unwrap(), var_profile(&p, q).unwrap());
        for (e, f) in x.entries.iter().zip(&y.entries) {
            prop_assert!((e.var_raw - f.var_raw).abs() < 1e-6);
        }
    }
}
