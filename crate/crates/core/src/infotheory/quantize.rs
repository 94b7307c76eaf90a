//! Shared-codebook discretization of two adjacent layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Dissimilarity;
use crate::error::{Error, Result};
use crate::trace::{HiddenTrace, Modality};

pub const CLUSTER_ITERATIONS: usize = 25;

/// Per-token labels for layers `layer - 1` and `layer` under one codebook.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantization {
    /// `(label at layer - 1, label at layer)` per token, in sequence order.
    pub pairs: Vec<(usize, usize)>,
    /// Cosine distance between unit centroids, over codes `0..k_used`.
    pub dissimilarity: Dissimilarity,
    pub k_requested: usize,
    pub k_used: usize,
    pub warning: Option<String>,
}

fn unit(v: &[f32], what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector(what()));
    }
    Ok(v.iter().map(|&x| f64::from(x) / n).collect())
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = cos_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Seeded first center, then farthest-point selection. Every chosen center
/// is at positive distance from the previous ones while `k <= distinct`.
fn farthest_point_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut gap: Vec<f64> = points.iter().map(|p| cos_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let (far, _) =
            gap.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &g)| if g > acc.1 { (i, g) } else { acc });
        let c = points[far].clone();
        for (g, p) in gap.iter_mut().zip(points) {
            *g = g.min(cos_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn renormalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Spherical k-means over the unit-normalized states of `modality` at
/// `layer - 1` and `layer`.
pub fn quantize_trace(
    trace: &HiddenTrace,
    layer: usize,
    modality: Modality,
    k: usize,
    seed: u64,
) -> Result<Quantization> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("codebook size {k} must be >= 2")));
    }
    if layer == 0 || layer >= trace.layer_count {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside [1, {}]",
            trace.layer_count.saturating_sub(1)
        )));
    }
    let tokens = trace.tokens_of(modality);
    if tokens.is_empty() {
        return Err(Error::EmptyModality(modality.to_string()));
    }
    let mut points = Vec::with_capacity(2 * tokens.len());
    for l in [layer - 1, layer] {
        for &i in &tokens {
            points.push(unit(trace.state(l, i), || format!("sample {:?}, layer {l}, token {i}", trace.sample_id))?);
        }
    }

    let distinct = distinct_count(&points);
    let k_used = k.min(distinct);
    let warning =
        (k_used < k).then(|| format!("only {distinct} distinct vectors; codebook size reduced from {k} to {k_used}"));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = farthest_point_init(&points, k_used, &mut rng);
    let dim = trace.dim;
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..CLUSTER_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k_used];
        for (p, &a) in points.iter().zip(&assign) {
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        // A center with no members, or whose members cancel, stays put.
        for (c, mut s) in sums.into_iter().enumerate() {
            if renormalize(&mut s) {
                centers[c] = s;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let n = tokens.len();
    let pairs = (0..n).map(|i| (assign[i], assign[n + i])).collect();
    let dissimilarity = Dissimilarity::from_fn(k_used, |a, b| cos_dist(&centers[a], &centers[b]));
    Ok(Quantization { pairs, dissimilarity, k_requested: k, k_used, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from(layers: &[Vec<[f32; 3]>], mask: Vec<Modality>) -> HiddenTrace {
        let states = layers.iter().flatten().flatten().copied().collect();
        HiddenTrace {
            layer_count: layers.len(),
            token_count: layers[0].len(),
            dim: 3,
            states,
            modality_mask: mask,
            sample_id: "q".into(),
            answer_token_index: None,
        }
    }

    #[test]
    fn two_values_are_partitioned_exactly() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 2.0, 0.0];
        let layers = vec![vec![a, b, a, b], vec![b, b, a, a]];
        let tr = trace_from(&layers, vec![Modality::Vision; 4]);
        let q = quantize_trace(&tr, 1, Modality::Vision, 2, 0).unwrap();
        assert_eq!(q.k_used, 2);
        let code_a = q.pairs[0].0;
        let code_b = q.pairs[1].0;
        assert_ne!(code_a, code_b);
        assert_eq!(q.pairs, vec![(code_a, code_b), (code_b, code_b), (code_a, code_a), (code_b, code_a)]);
        assert!((q.dissimilarity.get(code_a, code_b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_use_one_code() {
        let a = [0.3, -0.2, 0.9];
        let layers = vec![vec![a; 5], vec![a; 5]];
        let tr = trace_from(&layers, vec![Modality::Text; 5]);
        let q = quantize_trace(&tr, 1, Modality::Text, 4, 9).unwrap();
        assert_eq!(q.k_used, 1);
        assert!(q.warning.is_some());
        assert!(q.pairs.iter().all(|&p| p == (0, 0)));
        assert_eq!(q.dissimilarity.get(0, 0), 0.0);
    }

    #[test]
    fn seeded_runs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers: Vec<Vec<[f32; 3]>> = (0..3)
            .map(|_| (0..40).map(|_| [rng.random(), rng.random::<f32>() - 0.5, rng.random()]).collect())
            .collect();
        let tr = trace_from(&layers, vec![Modality::Vision; 40]);
        let a = quantize_trace(&tr, 2, Modality::Vision, 8, 3).unwrap();
        let b = quantize_trace(&tr, 2, Modality::Vision, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k_used, 8);
    }

    #[test]
    fn rejects_bad_arguments() {
        let layers = vec![vec![[1.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]];
        let tr = trace_from(&layers, vec![Modality::Text]);
        assert!(matches!(quantize_trace(&tr, 1, Modality::Text, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(quantize_trace(&tr, 2, Modality::Text, 2, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(quantize_trace(&tr, 1, Modality::Vision, 2, 0), Err(Error::EmptyModality(_))));
    }
}
