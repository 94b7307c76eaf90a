//! Geometric and proximal redundancy between adjacent layers.
//!
//! For layer `l >= 1` and a modality `m` with tokens `i`:
//!
//! ```text
//! D_l(m) = mean_i  rho(h[l][i], h[l-1][i])
//! p_l(m) = mean_i  1{ rho(h[l][i], h[l-1][i]) < t }
//! ```
//!
//! with `rho` the cosine distance. Multi-trace profiles pool all tokens of
//! all traces into one population per (layer, modality).

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::{HiddenTrace, Modality};

pub const DEFAULT_PROXIMITY_THRESHOLD: f64 = 0.05;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - <x,y> / (|x| |y|)`, clamped to `[0, 2]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("vector lengths {} and {}", x.len(), y.len())));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || !nx.is_finite() {
        return Err(Error::DegenerateVector("first argument".into()));
    }
    if ny == 0.0 || !ny.is_finite() {
        return Err(Error::DegenerateVector("second argument".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nx * ny)).clamp(0.0, 2.0))
}

/// Cosine distance of two stored `f32` states, upcast to `f64`.
fn state_distance(x: &[f32], y: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut xx = 0.0f64;
    let mut yy = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return None;
    }
    Some((1.0 - dot / (xx.sqrt() * yy.sqrt())).clamp(0.0, 2.0))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 2.0) {
        return Err(Error::InvalidArgument(format!("threshold t = {t} must lie in (0, 2)")));
    }
    Ok(())
}

/// Per-token distances `rho(h[layer][i], h[layer-1][i])` for the tokens of `modality`.
pub fn token_distances(trace: &HiddenTrace, layer: usize, modality: Modality) -> Result<Vec<f64>> {
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
    tokens
        .into_iter()
        .map(|i| {
            state_distance(trace.state(layer, i), trace.state(layer - 1, i)).ok_or_else(|| {
                let bad = if trace.state(layer, i).iter().all(|&v| v == 0.0) { layer } else { layer - 1 };
                Error::DegenerateVector(format!("sample {:?}, layer {bad}, token {i}", trace.sample_id))
            })
        })
        .collect()
}

/// Mean cosine distance and proximal fraction for one (layer, modality).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub mean_cos_dist: f64,
    pub proximal_frac: f64,
    pub n_tokens: usize,
}

fn summarize(mut distances: Vec<f64>, t: f64) -> LayerMetrics {
    // Sorting first makes the floating-point sum independent of token order.
    distances.sort_by(f64::total_cmp);
    let n = distances.len();
    let sum: f64 = distances.iter().sum();
    let close = distances.iter().filter(|&&d| d < t).count();
    LayerMetrics { mean_cos_dist: sum / n as f64, proximal_frac: close as f64 / n as f64, n_tokens: n }
}

pub fn layer_metrics(trace: &HiddenTrace, layer: usize, modality: Modality, t: f64) -> Result<LayerMetrics> {
    check_threshold(t)?;
    Ok(summarize(token_distances(trace, layer, modality)?, t))
}

/// Spread of per-sample means, reported next to the pooled metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleSpread {
    pub samples: usize,
    pub mean_cos_dist_mean: f64,
    pub mean_cos_dist_ci95: f64,
    pub proximal_frac_mean: f64,
    pub proximal_frac_ci95: f64,
}

fn mean_and_ci95(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub layer: usize,
    pub modality: Modality,
    pub mean_cos_dist: f64,
    pub proximal_frac: f64,
    pub t: f64,
    pub n_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<SampleSpread>,
}

/// Per-layer, per-modality redundancy metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RedundancyProfile {
    pub t: f64,
    /// Entries ordered by (layer, modality).
    pub entries: Vec<ProfileEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
}

impl RedundancyProfile {
    pub fn entry(&self, layer: usize, modality: Modality) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.modality == modality)
    }

    /// Sorted layers that have an entry for `modality`.
    pub fn layers_for(&self, modality: Modality) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.iter().filter(|e| e.modality == modality).map(|e| e.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

/// Token-pooled profile over one or more traces sharing `layer_count` and `dim`.
///
/// Modalities without any token in any trace are omitted. The result does
/// not depend on the order of `traces`.
pub fn redundancy_profile(traces: &[HiddenTrace], t: f64) -> Result<RedundancyProfile> {
    check_threshold(t)?;
    let first = traces.first().ok_or_else(|| Error::EmptyInput("no traces".into()))?;
    for tr in traces {
        if tr.layer_count != first.layer_count || tr.dim != first.dim {
            return Err(Error::ShapeMismatch(format!(
                "trace {:?} has {} layers x dim {}, expected {} x {}",
                tr.sample_id, tr.layer_count, tr.dim, first.layer_count, first.dim
            )));
        }
    }
    let modalities: Vec<Modality> =
        Modality::ALL.into_iter().filter(|&m| traces.iter().any(|tr| tr.count_of(m) > 0)).collect();
    let cells: Vec<(usize, Modality)> =
        (1..first.layer_count).flat_map(|l| modalities.iter().map(move |&m| (l, m))).collect();

    let entries = cells
        .par_iter()
        .map(|&(layer, modality)| {
            let mut pooled = Vec::new();
            let mut sample_d = Vec::new();
            let mut sample_p = Vec::new();
            for tr in traces.iter().filter(|tr| tr.count_of(modality) > 0) {
                let d = token_distances(tr, layer, modality)?;
                let m = summarize(d.clone(), t);
                sample_d.push(m.mean_cos_dist);
                sample_p.push(m.proximal_frac);
                pooled.extend(d);
            }
            let m = summarize(pooled, t);
            let per_sample = (traces.len() > 1).then(|| {
                let samples = sample_d.len();
                let (dm, dci) = mean_and_ci95(sample_d);
                let (pm, pci) = mean_and_ci95(sample_p);
                SampleSpread {
                    samples,
                    mean_cos_dist_mean: dm,
                    mean_cos_dist_ci95: dci,
                    proximal_frac_mean: pm,
                    proximal_frac_ci95: pci,
                }
            });
            Ok(ProfileEntry {
                layer,
                modality,
                mean_cos_dist: m.mean_cos_dist,
                proximal_frac: m.proximal_frac,
                t,
                n_tokens: m.n_tokens,
                per_sample,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RedundancyProfile { t, entries, sample_count: (traces.len() > 1).then_some(traces.len()) })
}

pub const PROFILE_CSV_COLUMNS: [&str; 6] = ["layer", "modality", "mean_cos_dist", "proximal_frac", "t", "n_tokens"];

/// Writes the profile CSV: one row per (layer, modality).
pub fn write_profile_csv<W: Write>(profile: &RedundancyProfile, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(PROFILE_CSV_COLUMNS).map_err(io)?;
    for e in &profile.entries {
        w.write_record([
            e.layer.to_string(),
            e.modality.to_string(),
            e.mean_cos_dist.to_string(),
            e.proximal_frac.to_string(),
            e.t.to_string(),
            e.n_tokens.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer(prev: Vec<Vec<f32>>, cur: Vec<Vec<f32>>, mask: Vec<Modality>) -> HiddenTrace {
        let dim = prev[0].len();
        let token_count = prev.len();
        let states = prev.into_iter().chain(cur).flatten().collect();
        HiddenTrace {
            layer_count: 2,
            token_count,
            dim,
            states,
            modality_mask: mask,
            sample_id: "t".into(),
            answer_token_index: None,
        }
    }

    #[test]
    fn cosine_distance_extremes() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_rejects_zero_norm() {
        let err = cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert_eq!(err.code(), "DEGENERATE_VECTOR");
    }

    #[test]
    fn identical_layers_are_fully_redundant() {
        let v = vec![vec![0.3f32, -1.2, 2.0], vec![1.0, 1.0, 1.0]];
        let tr = two_layer(v.clone(), v, vec![Modality::Text, Modality::Vision]);
        let m = layer_metrics(&tr, 1, Modality::Vision, 0.05).unwrap();
        assert_eq!((m.mean_cos_dist, m.proximal_frac), (0.0, 1.0));
    }

    #[test]
    fn orthogonal_layers() {
        let tr = two_layer(
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![Modality::Text, Modality::Text],
        );
        let m = layer_metrics(&tr, 1, Modality::Text, 0.05).unwrap();
        assert!((m.mean_cos_dist - 1.0).abs() < 1e-12);
        assert_eq!(m.proximal_frac, 0.0);
    }

    #[test]
    fn hand_constructed_distances() {
        // Unit vectors at angle acos(1 - d) realize cosine distance d.
        let rot = |d: f64| {
            let c = 1.0 - d;
            vec![c as f32, (1.0 - c * c).sqrt() as f32]
        };
        let tr = two_layer(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![rot(0.04), rot(0.06), vec![0.0, 1.0]],
            vec![Modality::Vision, Modality::Vision, Modality::Text],
        );
        // Direct evaluation of the defining formula on the stored f32 values.
        let direct = |a: &[f32], b: &[f32]| {
            let dot = f64::from(a[0]) * f64::from(b[0]) + f64::from(a[1]) * f64::from(b[1]);
            let na = (f64::from(a[0]).powi(2) + f64::from(a[1]).powi(2)).sqrt();
            let nb = (f64::from(b[0]).powi(2) + f64::from(b[1]).powi(2)).sqrt();
            1.0 - dot / (na * nb)
        };
        let d0 = direct(tr.state(1, 0), tr.state(0, 0));
        let d1 = direct(tr.state(1, 1), tr.state(0, 1));
        assert!((d0 - 0.04).abs() < 1e-6 && (d1 - 0.06).abs() < 1e-6);

        let m = layer_metrics(&tr, 1, Modality::Vision, 0.05).unwrap();
        assert!((m.mean_cos_dist - 0.05).abs() < 1e-6);
        assert!((m.mean_cos_dist - (d0 + d1) / 2.0).abs() < 1e-12);
        assert_eq!(m.proximal_frac, 0.5);
        assert_eq!(m.n_tokens, 2);
    }

    #[test]
    fn empty_modality_and_zero_state_errors() {
        let tr = two_layer(vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]], vec![Modality::Text]);
        assert_eq!(layer_metrics(&tr, 1, Modality::Vision, 0.05).unwrap_err().code(), "EMPTY_MODALITY");
        let err = layer_metrics(&tr, 1, Modality::Text, 0.05).unwrap_err();
        assert_eq!(err.code(), "DEGENERATE_VECTOR");
        assert!(err.to_string().contains("layer 1, token 0"));
    }

    #[test]
    fn layer_zero_is_out_of_range() {
        let tr = two_layer(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![Modality::Text]);
        assert_eq!(layer_metrics(&tr, 0, Modality::Text, 0.05).unwrap_err().code(), "INVALID_ARGUMENT");
        assert_eq!(layer_metrics(&tr, 2, Modality::Text, 0.05).unwrap_err().code(), "INVALID_ARGUMENT");
    }

    #[test]
    fn single_trace_profile_matches_layer_metrics() {
        let tr = two_layer(
            vec![vec![1.0, 0.2], vec![0.5, 1.0]],
            vec![vec![0.9, 0.3], vec![-0.5, 1.0]],
            vec![Modality::Text, Modality::Vision],
        );
        let p = redundancy_profile(std::slice::from_ref(&tr), 0.05).unwrap();
        for m in Modality::ALL {
            let e = p.entry(1, m).unwrap();
            let direct = layer_metrics(&tr, 1, m, 0.05).unwrap();
            assert_eq!(e.mean_cos_dist, direct.mean_cos_dist);
            assert_eq!(e.proximal_frac, direct.proximal_frac);
        }
        assert!(p.sample_count.is_none());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = two_layer(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![Modality::Text]);
        let mut b = a.clone();
        b.dim = 1;
        b.states = vec![1.0, 1.0];
        assert_eq!(redundancy_profile(&[a, b], 0.05).unwrap_err().code(), "SHAPE_MISMATCH");
    }
}
