//! Seeded generators shared by the property and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use skipscope_core::infotheory::{DiscreteJoint, Dissimilarity};
use skipscope_core::{AttentionTrace, HiddenTrace, Modality};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    w.into_iter().map(|v| v / s).collect()
}

/// Mask with at least one text token.
pub fn mask(rng: &mut ChaCha8Rng, tokens: usize) -> Vec<Modality> {
    let mut m: Vec<Modality> =
        (0..tokens).map(|_| if rng.random_bool(0.5) { Modality::Vision } else { Modality::Text }).collect();
    let i = rng.random_range(0..tokens);
    m[i] = Modality::Text;
    m
}

/// Valid hidden trace with nonzero states; attention is included when
/// `layers >= 2`.
pub fn random_trace(seed: u64, layers: usize, tokens: usize, dim: usize) -> (HiddenTrace, Option<AttentionTrace>) {
    let mut r = rng(seed);
    let states: Vec<f32> = (0..layers * tokens * dim)
        .map(|_| {
            let z: f64 = r.sample(StandardNormal);
            (z as f32) + 0.01
        })
        .collect();
    let modality_mask = mask(&mut r, tokens);
    let text: Vec<usize> = (0..tokens).filter(|&i| modality_mask[i] == Modality::Text).collect();
    let answer = if r.random_bool(0.5) { Some(text[r.random_range(0..text.len())]) } else { None };
    let hidden = HiddenTrace {
        layer_count: layers,
        token_count: tokens,
        dim,
        states,
        modality_mask: modality_mask.clone(),
        sample_id: format!("sample-{seed}"),
        answer_token_index: answer,
    };
    if layers < 2 {
        return (hidden, None);
    }
    let heads = r.random_range(1..=3);
    let queries: Vec<usize> = (0..tokens).filter(|_| r.random_bool(0.5)).collect();
    let queries = if queries.is_empty() { vec![tokens - 1] } else { queries };
    let mut rows = Vec::new();
    for _ in 0..queries.len() * (layers - 1) * heads {
        rows.extend(simplex(&mut r, tokens).into_iter().map(|p| p as f32));
    }
    // Renormalize in f32 so stored rows meet the tolerance exactly.
    for row in rows.chunks_mut(tokens) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let attention = AttentionTrace {
        layer_count: layers - 1,
        head_count: heads,
        key_count: tokens,
        query_token_ids: queries,
        rows,
        vision_key_mask: modality_mask,
    };
    (hidden, Some(attention))
}

/// Random joint over labels `0..size` with a cosine metric between random
/// unit vectors.
pub fn random_joint(seed: u64) -> (DiscreteJoint, f64) {
    let mut r = rng(seed);
    let size = r.random_range(2..=7);
    let dim = r.random_range(1..=4);
    let points: Vec<Vec<f64>> = (0..size)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let d = Dissimilarity::from_fn(size, |a, b| {
        let c: f64 = points[a].iter().zip(&points[b]).map(|(x, y)| x * y).sum();
        (1.0 - c).clamp(0.0, 2.0)
    });
    let labels: Vec<usize> = (0..size).collect();
    let nx = r.random_range(1..=size);
    let ny = r.random_range(1..=size);
    let pick = |r: &mut ChaCha8Rng, k: usize| {
        let mut l = labels.clone();
        for i in 0..k {
            let j = r.random_range(i..l.len());
            l.swap(i, j);
        }
        let mut s = l[..k].to_vec();
        s.sort_unstable();
        s
    };
    let sx = pick(&mut r, nx);
    let sy = pick(&mut r, ny);
    let pmf = simplex(&mut r, nx * ny);
    let t = r.random_range(0.01..1.5);
    (DiscreteJoint::new(sx, sy, pmf, Some(d)).expect("valid joint"), t)
}

/// Case budget without on-disk failure persistence; the generators are seeded.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { failure_persistence: None, ..proptest::test_runner::Config::with_cases(n) }
}
