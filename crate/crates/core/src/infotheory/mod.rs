//! Exact Shannon quantities on finite joints, plus discretization of traces
//! and the layer-redundancy information bounds.

mod bounds;
mod quantize;

pub use bounds::{
    bound_report, fano_upper_bound, functional_gap_bound, layer_bounds, mi_lower_bound, write_bounds_csv, BoundReport,
    FanoBound, LayerBoundRow, MiLowerBound, BOUNDS_CSV_COLUMNS,
};
pub use quantize::{quantize_trace, Quantization, CLUSTER_ITERATIONS};

use serde::Serialize;

use crate::error::{Error, Result};

pub const PMF_TOLERANCE: f64 = 1e-9;

/// `x * log2(x)` with `0 log 0 = 0`.
pub(crate) fn xlog2x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    -(xlog2x(p) + xlog2x(1.0 - p))
}

/// Shannon entropy of a pmf in bits.
pub fn entropy_bits(pmf: &[f64]) -> f64 {
    -pmf.iter().map(|&p| xlog2x(p)).sum::<f64>()
}

/// Symmetric dissimilarity over label ids `0..size`, zero on the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dissimilarity {
    size: usize,
    values: Vec<f64>,
}

impl Dissimilarity {
    /// Builds from a row-major `size x size` matrix, rejecting asymmetric or
    /// non-zero-diagonal input.
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "dissimilarity has {} values, expected {}",
                values.len(),
                size * size
            )));
        }
        for a in 0..size {
            if values[a * size + a] != 0.0 {
                return Err(Error::InvalidArgument(format!("dissimilarity({a},{a}) != 0")));
            }
            for b in 0..a {
                let (ab, ba) = (values[a * size + b], values[b * size + a]);
                if ab != ba || !ab.is_finite() {
                    return Err(Error::InvalidArgument(format!("dissimilarity not symmetric/finite at ({a},{b})")));
                }
            }
        }
        Ok(Self { size, values })
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; size * size];
        for a in 0..size {
            for b in 0..a {
                let v = f(a, b);
                values[a * size + b] = v;
                values[b * size + a] = v;
            }
        }
        Self { size, values }
    }

    /// The discrete metric: 0 on equal labels, 1 otherwise.
    pub fn discrete(size: usize) -> Self {
        Self::from_fn(size, |_, _| 1.0)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.size + b]
    }
}

/// Finite joint distribution of `(X, Y)` over label ids.
///
/// In the layer setting `X` is the current layer `X_l` and `Y` the previous
/// layer `X_{l-1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteJoint {
    pub support_x: Vec<usize>,
    pub support_y: Vec<usize>,
    /// Row-major `[x][y]` over `support_x x support_y`.
    pub pmf: Vec<f64>,
    pub dissimilarity: Option<Dissimilarity>,
    /// Optional real vectors realizing each label id.
    pub support_points: Option<Vec<Vec<f64>>>,
}

impl DiscreteJoint {
    pub fn new(
        support_x: Vec<usize>,
        support_y: Vec<usize>,
        pmf: Vec<f64>,
        dissimilarity: Option<Dissimilarity>,
    ) -> Result<Self> {
        if pmf.len() != support_x.len() * support_y.len() || pmf.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "pmf has {} cells for a {}x{} support",
                pmf.len(),
                support_x.len(),
                support_y.len()
            )));
        }
        if let Some(bad) = pmf.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("pmf entry {bad} is not a probability")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PMF_TOLERANCE {
            return Err(Error::InvalidArgument(format!("pmf sums to {total}")));
        }
        if let Some(d) = &dissimilarity {
            if let Some(&l) = support_x.iter().chain(&support_y).find(|&&l| l >= d.size()) {
                return Err(Error::ShapeMismatch(format!("label {l} outside dissimilarity domain")));
            }
        }
        Ok(Self { support_x, support_y, pmf, dissimilarity, support_points: None })
    }

    pub fn p(&self, xi: usize, yi: usize) -> f64 {
        self.pmf[xi * self.support_y.len() + yi]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        let ny = self.support_y.len();
        self.pmf.chunks(ny).map(|row| row.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let ny = self.support_y.len();
        let mut m = vec![0.0; ny];
        for row in self.pmf.chunks(ny) {
            for (acc, p) in m.iter_mut().zip(row) {
                *acc += p;
            }
        }
        m
    }

    /// Sorted union of both supports.
    pub fn shared_support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.support_x.iter().chain(&self.support_y).copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Empirical joint of `(x, y)` label pairs; supports are the observed labels.
pub fn joint_from_pairs(pairs: &[(usize, usize)], dissimilarity: Option<Dissimilarity>) -> Result<DiscreteJoint> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no label pairs".into()));
    }
    let mut xs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut counts = vec![0usize; xs.len() * ys.len()];
    for &(x, y) in pairs {
        let xi = xs.binary_search(&x).expect("observed label");
        let yi = ys.binary_search(&y).expect("observed label");
        counts[xi * ys.len() + yi] += 1;
    }
    let n = pairs.len() as f64;
    let pmf = counts.into_iter().map(|c| c as f64 / n).collect();
    DiscreteJoint::new(xs, ys, pmf, dissimilarity)
}

/// Entropies and mutual information of a joint, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyStats {
    pub h_x: f64,
    pub h_y: f64,
    pub h_xy: f64,
    pub h_x_given_y: f64,
    pub h_y_given_x: f64,
    pub mi: f64,
}

pub fn entropy_stats(joint: &DiscreteJoint) -> EntropyStats {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let h_x = entropy_bits(&px);
    let h_y = entropy_bits(&py);
    let h_xy = entropy_bits(&joint.pmf);
    // Termwise nonnegative forms: p(x,y) <= p(y) and p(x,y) <= p(x).
    let mut h_x_given_y = 0.0;
    let mut h_y_given_x = 0.0;
    for (xi, &pxv) in px.iter().enumerate() {
        for (yi, &pyv) in py.iter().enumerate() {
            let p = joint.p(xi, yi);
            if p > 0.0 {
                h_x_given_y += p * (pyv / p).log2();
                h_y_given_x += p * (pxv / p).log2();
            }
        }
    }
    EntropyStats { h_x, h_y, h_xy, h_x_given_y, h_y_given_x, mi: h_x - h_x_given_y }
}
