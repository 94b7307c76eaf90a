//! Ball-counting bounds on `H(X|Y)` and `I(X;Y)` for a joint with a
//! dissimilarity on its shared support, and the functional-gap bound.
//!
//! With `E = 1{rho(Y, X) > t}` and `P_t = P[E = 1]`:
//!
//! ```text
//! H(X|Y) <= H2(P_t) + P_t log((|X| - N_min) / N_max) + log N_max
//! I(X;Y) >= (1 - P_t) log(1 / p_max) - P_t log(1 - p_min) - H2(P_t)
//! ```
//!
//! where `N_max`, `N_min` are the largest and smallest closed-ball sizes
//! `|{x' : rho(x, x') <= t}|` over the shared support and
//! `p(a) = P[rho(Y, a) <= t]` ranges over the support of `X`.

use std::io::Write;

use serde::Serialize;

use super::{binary_entropy, entropy_stats, joint_from_pairs, quantize_trace, DiscreteJoint, Dissimilarity};
use crate::error::{Error, Result};
use crate::trace::{HiddenTrace, Modality};

fn metric(joint: &DiscreteJoint, t: f64) -> Result<&Dissimilarity> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold t = {t} must be finite and >= 0")));
    }
    joint.dissimilarity.as_ref().ok_or(Error::MissingMetric)
}

/// `P[rho(Y, X) > t]` under the joint.
fn tail_mass(joint: &DiscreteJoint, d: &Dissimilarity, t: f64) -> f64 {
    let mut p = 0.0;
    for (xi, &x) in joint.support_x.iter().enumerate() {
        for (yi, &y) in joint.support_y.iter().enumerate() {
            if d.get(y, x) > t {
                p += joint.p(xi, yi);
            }
        }
    }
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanoBound {
    pub p_t: f64,
    pub h2_pt: f64,
    pub n_t_max: usize,
    pub n_t_min: usize,
    pub support_size: usize,
    /// Upper bound on `H(X|Y)` in bits.
    pub fano_upper: f64,
    /// False when every ball covers the whole support; the middle term is then 0.
    pub applicable: bool,
}

pub fn fano_upper_bound(joint: &DiscreteJoint, t: f64) -> Result<FanoBound> {
    let d = metric(joint, t)?;
    let support = joint.shared_support();
    let ball_sizes: Vec<usize> =
        support.iter().map(|&a| support.iter().filter(|&&b| d.get(a, b) <= t).count()).collect();
    let n_t_max = *ball_sizes.iter().max().expect("nonempty support");
    let n_t_min = *ball_sizes.iter().min().expect("nonempty support");
    let p_t = tail_mass(joint, d, t);
    let h2_pt = binary_entropy(p_t);
    let outside = support.len() - n_t_min;
    let applicable = outside > 0;
    let middle = if applicable && p_t > 0.0 { p_t * (outside as f64 / n_t_max as f64).log2() } else { 0.0 };
    Ok(FanoBound {
        p_t,
        h2_pt,
        n_t_max,
        n_t_min,
        support_size: support.len(),
        fano_upper: h2_pt + middle + (n_t_max as f64).log2(),
        applicable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiLowerBound {
    pub p_t: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Lower bound on `I(X;Y)` in bits. When not applicable and the formula
    /// diverges, the trivial bound 0 is reported instead.
    pub mi_lower: f64,
    pub applicable: bool,
}

/// Ball masses this close to 0 or 1 are treated as exactly 0 or 1, and
/// `p_min + p_max` must clear 1 by this margin.
const BALL_MASS_SNAP: f64 = 1e-12;

pub fn mi_lower_bound(joint: &DiscreteJoint, t: f64) -> Result<MiLowerBound> {
    let d = metric(joint, t)?;
    let py = joint.marginal_y();
    let ball_mass: Vec<f64> = joint
        .support_x
        .iter()
        .map(|&a| {
            let m = joint.support_y.iter().zip(&py).filter(|(&y, _)| d.get(y, a) <= t).map(|(_, &p)| p).sum::<f64>();
            // Snap rounding residue so applicability does not depend on
            // summation order.
            if m < BALL_MASS_SNAP {
                0.0
            } else if m > 1.0 - BALL_MASS_SNAP {
                1.0
            } else {
                m
            }
        })
        .collect();
    let p_min = ball_mass.iter().copied().fold(f64::INFINITY, f64::min);
    let p_max = ball_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p_t = tail_mass(joint, d, t);
    let applicable = (0.0..1.0).contains(&p_min) && p_max > 0.0 && p_max <= 1.0 && p_min + p_max < 1.0 - BALL_MASS_SNAP;
    let near = if p_t < 1.0 { (1.0 - p_t) * -p_max.log2() } else { 0.0 };
    let far = if p_t > 0.0 { -p_t * (1.0 - p_min).log2() } else { 0.0 };
    let mut mi_lower = near + far - binary_entropy(p_t);
    if !mi_lower.is_finite() {
        mi_lower = 0.0;
    }
    Ok(MiLowerBound { p_t, p_min, p_max, mi_lower, applicable })
}

/// Both bounds next to the exact quantities they bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub t: f64,
    pub p_t: f64,
    pub h2_pt: f64,
    pub n_t_max: usize,
    pub n_t_min: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub fano_upper: f64,
    pub mi_lower: f64,
    pub applicable_fano: bool,
    pub applicable_mi: bool,
    pub h_cond: f64,
    pub i_exact: f64,
}

impl BoundReport {
    /// True when every applicable bound holds within `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        (!self.applicable_fano || self.h_cond <= self.fano_upper + tol)
            && (!self.applicable_mi || self.i_exact >= self.mi_lower - tol)
    }
}

pub fn bound_report(joint: &DiscreteJoint, t: f64) -> Result<BoundReport> {
    let fano = fano_upper_bound(joint, t)?;
    let mi = mi_lower_bound(joint, t)?;
    let stats = entropy_stats(joint);
    Ok(BoundReport {
        t,
        p_t: fano.p_t,
        h2_pt: fano.h2_pt,
        n_t_max: fano.n_t_max,
        n_t_min: fano.n_t_min,
        p_min: mi.p_min,
        p_max: mi.p_max,
        fano_upper: fano.fano_upper,
        mi_lower: mi.mi_lower,
        applicable_fano: fano.applicable,
        applicable_mi: mi.applicable,
        h_cond: stats.h_x_given_y,
        i_exact: stats.mi,
    })
}

/// `2 B^2 H` with `H` given in bits and converted to nats.
pub fn functional_gap_bound(norm_bound: f64, h_cond_bits: f64) -> Result<f64> {
    if !(norm_bound >= 0.0) || !(h_cond_bits >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "functional gap bound needs nonnegative inputs, got B = {norm_bound}, H = {h_cond_bits}"
        )));
    }
    let h_nats = h_cond_bits * std::f64::consts::LN_2;
    Ok(2.0 * norm_bound * norm_bound * h_nats)
}

/// Bound report for one (layer, modality) of a quantized trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBoundRow {
    pub layer: usize,
    pub modality: Modality,
    /// Codebook size actually used.
    pub k: usize,
    pub report: BoundReport,
    pub warning: Option<String>,
}

/// Quantizes layers `layer - 1` and `layer` with a shared codebook and
/// bounds `H(X_layer | X_{layer-1})`.
pub fn layer_bounds(
    trace: &HiddenTrace,
    layer: usize,
    modality: Modality,
    k: usize,
    t: f64,
    seed: u64,
) -> Result<LayerBoundRow> {
    let q = quantize_trace(trace, layer, modality, k, seed)?;
    let pairs: Vec<(usize, usize)> = q.pairs.iter().map(|&(prev, cur)| (cur, prev)).collect();
    let joint = joint_from_pairs(&pairs, Some(q.dissimilarity))?;
    Ok(LayerBoundRow { layer, modality, k: q.k_used, report: bound_report(&joint, t)?, warning: q.warning })
}

pub const BOUNDS_CSV_COLUMNS: [&str; 11] = [
    "layer",
    "modality",
    "k",
    "t",
    "P_t",
    "H_cond_bits",
    "I_bits",
    "fano_upper_bits",
    "mi_lower_bits",
    "applicable_fano",
    "applicable_mi",
];

pub fn write_bounds_csv<W: Write>(rows: &[LayerBoundRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(BOUNDS_CSV_COLUMNS).map_err(io)?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            row.layer.to_string(),
            row.modality.to_string(),
            row.k.to_string(),
            r.t.to_string(),
            r.p_t.to_string(),
            r.h_cond.to_string(),
            r.i_exact.to_string(),
            r.fano_upper.to_string(),
            r.mi_lower.to_string(),
            r.applicable_fano.to_string(),
            r.applicable_mi.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_independent(n: usize) -> DiscreteJoint {
        let labels: Vec<usize> = (0..n).collect();
        let p = 1.0 / (n * n) as f64;
        DiscreteJoint::new(labels.clone(), labels, vec![p; n * n], Some(Dissimilarity::discrete(n))).unwrap()
    }

    fn copy(n: usize) -> DiscreteJoint {
        let labels: Vec<usize> = (0..n).collect();
        let mut pmf = vec![0.0; n * n];
        for i in 0..n {
            pmf[i * n + i] = 1.0 / n as f64;
        }
        DiscreteJoint::new(labels.clone(), labels, pmf, Some(Dissimilarity::discrete(n))).unwrap()
    }

    #[test]
    fn fano_equality_on_independent_uniform() {
        let f = fano_upper_bound(&uniform_independent(4), 0.0).unwrap();
        assert!((f.p_t - 0.75).abs() < 1e-12);
        assert_eq!((f.n_t_max, f.n_t_min), (1, 1));
        // H2(3/4) + (3/4) log2 3, evaluated independently.
        let closed = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2()) + 0.75 * 3f64.log2();
        assert!((closed - 2.0).abs() < 1e-12);
        assert!((f.fano_upper - 2.0).abs() < 1e-9);
        assert!(f.applicable);
    }

    #[test]
    fn fano_is_zero_when_copy() {
        for n in [2, 3, 5] {
            let f = fano_upper_bound(&copy(n), 0.0).unwrap();
            assert_eq!(f.p_t, 0.0);
            assert!(f.fano_upper.abs() < 1e-12);
        }
    }

    #[test]
    fn mi_equality_on_independent_uniform() {
        let m = mi_lower_bound(&uniform_independent(4), 0.0).unwrap();
        assert!((m.p_min - 0.25).abs() < 1e-12 && (m.p_max - 0.25).abs() < 1e-12);
        assert!(m.applicable);
        assert!(m.mi_lower.abs() < 1e-9, "{}", m.mi_lower);
    }

    #[test]
    fn mi_is_exact_on_binary_copy() {
        let m = mi_lower_bound(&copy(2), 0.0).unwrap();
        assert_eq!((m.p_min, m.p_max, m.p_t), (0.5, 0.5, 0.0));
        assert!((m.mi_lower - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_balls_gate_both_bounds() {
        let r = bound_report(&uniform_independent(3), 1.0).unwrap();
        assert!(!r.applicable_mi);
        assert!(!r.applicable_fano);
        assert_eq!(r.p_t, 0.0);
        assert!((r.fano_upper - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn missing_metric() {
        let j = DiscreteJoint::new(vec![0], vec![0], vec![1.0], None).unwrap();
        assert!(matches!(fano_upper_bound(&j, 0.1), Err(Error::MissingMetric)));
        assert!(matches!(mi_lower_bound(&j, 0.1), Err(Error::MissingMetric)));
    }

    #[test]
    fn functional_gap_examples() {
        assert_eq!(functional_gap_bound(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(functional_gap_bound(0.0, 5.0).unwrap(), 0.0);
        let v = functional_gap_bound(2.0, 1.0).unwrap();
        assert!((v - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 5.5452).abs() < 1e-4);
        assert!(matches!(functional_gap_bound(-1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(functional_gap_bound(1.0, -0.1), Err(Error::InvalidArgument(_))));
    }
}
