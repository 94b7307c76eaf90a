use serde::Serialize;

use super::instance::{sq_dist, OracleInstance};
use crate::error::{Error, Result};
use crate::infotheory::entropy_stats;
use crate::redundancy::cosine_distance;

/// Slack allowed on the inequality side of every check.
pub const CHECK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckReport {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl CheckReport {
    fn upper(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, pass: lhs <= rhs + CHECK_TOLERANCE }
    }

    fn equal(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, pass: (lhs - rhs).abs() <= CHECK_TOLERANCE }
    }
}

fn lipschitz_premise(inst: &OracleInstance) -> Result<()> {
    if inst.points_current.is_empty() {
        return Err(Error::InvalidArgument("instance has no unit-vector realization".into()));
    }
    inst.validate()?;
    let d = inst.mean_distance()?;
    if !(d < inst.epsilon / 2.0) {
        return Err(Error::PremiseFailed(format!("E[rho] = {d} is not below epsilon / 2 = {}", inst.epsilon / 2.0)));
    }
    Ok(())
}

/// `E|f(X) - g(Y)|^2` over the joint.
fn expected_gap(inst: &OracleInstance, f: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let ny = inst.ny();
    let mut acc = 0.0;
    for (x, fx) in f.iter().enumerate() {
        for (y, gy) in g.iter().enumerate().take(ny) {
            let p = inst.joint.p(x, y);
            if p > 0.0 {
                acc += p * sq_dist(fx, gy);
            }
        }
    }
    acc
}

/// Gap of the optimal predictors against `2 (alpha^2 + beta^2) epsilon`.
pub fn check_thm1(inst: &OracleInstance) -> Result<CheckReport> {
    lipschitz_premise(inst)?;
    let lhs = expected_gap(inst, &inst.optimal_current(), &inst.optimal_previous());
    let rhs = 2.0 * (inst.alpha.powi(2) + inst.beta.powi(2)) * inst.epsilon;
    Ok(CheckReport::upper(lhs, rhs))
}

/// Gap of the estimators against
/// `3 eta_cur + 3 eta_prev + 6 (alpha^2 + beta^2) epsilon`.
pub fn check_thm2(inst: &OracleInstance) -> Result<CheckReport> {
    lipschitz_premise(inst)?;
    if inst.estimator_current.len() != inst.nx() || inst.estimator_previous.len() != inst.ny() {
        return Err(Error::InvalidArgument("estimator tables missing".into()));
    }
    let lhs = expected_gap(inst, &inst.estimator_current, &inst.estimator_previous);
    let rhs = 3.0 * inst.eta_current
        + 3.0 * inst.eta_previous
        + 6.0 * (inst.alpha.powi(2) + inst.beta.powi(2)) * inst.epsilon;
    Ok(CheckReport::upper(lhs, rhs))
}

/// Gap of the optimal predictors against `2 B^2 H(X | Y)` in nats, for a
/// `Y -> X -> Z` chain.
pub fn check_thm5(inst: &OracleInstance) -> Result<CheckReport> {
    inst.validate()?;
    let (nx, ny) = (inst.nx(), inst.ny());
    for x in 0..nx {
        let reference = (0..ny).find(|&y| inst.joint.p(x, y) > 0.0);
        if let Some(r) = reference {
            for y in 0..ny {
                if inst.joint.p(x, y) > 0.0 && inst.z_law[x * ny + y] != inst.z_law[x * ny + r] {
                    return Err(Error::PremiseFailed(format!("law of Z given x = {x} depends on y = {y}")));
                }
            }
        }
    }
    let lhs = expected_gap(inst, &inst.optimal_current(), &inst.optimal_previous());
    let h_nats = entropy_stats(&inst.joint).h_x_given_y * std::f64::consts::LN_2;
    let rhs = 2.0 * inst.norm_bound.powi(2) * h_nats;
    Ok(CheckReport::upper(lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailReport {
    pub premise_holds: bool,
    pub conclusion_holds: bool,
    pub p_gt_t: f64,
    pub mean: f64,
    pub pass: bool,
}

/// A small tail `P[rho > t] < (eps - t) / (1 - t)` forces `E[rho] < eps`.
///
/// `law` lists `(value, probability)` atoms of `rho` on `[0, 1]`.
pub fn check_prop1(law: &[(f64, f64)], t: f64, epsilon: f64) -> Result<TailReport> {
    if !(t > 0.0 && t < 1.0) || !(epsilon > t && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < t < epsilon <= 1, got t = {t}, epsilon = {epsilon}")));
    }
    if let Some(&(v, _)) = law.iter().find(|(v, _)| !(0.0..=1.0).contains(v)) {
        return Err(Error::DomainViolation(format!("rho value {v} outside [0, 1]")));
    }
    let mass: f64 = law.iter().map(|a| a.1).sum();
    if law.iter().any(|a| !(a.1 >= 0.0)) || (mass - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("law has mass {mass}")));
    }
    let p_gt_t: f64 = law.iter().filter(|(v, _)| *v > t).map(|(_, p)| p).sum();
    let mean: f64 = law.iter().map(|(v, p)| v * p).sum();
    let premise_holds = p_gt_t < (epsilon - t) / (1.0 - t);
    let conclusion_holds = mean < epsilon;
    Ok(TailReport {
        premise_holds,
        conclusion_holds,
        p_gt_t,
        mean,
        pass: !premise_holds || mean < epsilon + CHECK_TOLERANCE,
    })
}

/// `|x - y|^2` against `2 rho(x, y)` for unit vectors.
pub fn lemma_unit_distance(x: &[f64], y: &[f64]) -> Result<CheckReport> {
    Ok(CheckReport::equal(sq_dist(x, y), 2.0 * cosine_distance(x, y)?))
}

/// `|a + b + c|^2` against `3 (|a|^2 + |b|^2 + |c|^2)`.
pub fn lemma_three_vector(a: &[f64], b: &[f64], c: &[f64]) -> CheckReport {
    let sum: Vec<f64> = a.iter().zip(b).zip(c).map(|((x, y), z)| x + y + z).collect();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    CheckReport::upper(sq(&sum), 3.0 * (sq(a) + sq(b) + sq(c)))
}

/// A `Y -> X -> Z` chain given by `P(y)`, `P(x | y)` and `P(z | x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovChain {
    pub p_y: Vec<f64>,
    /// `[y][x]`
    pub x_given_y: Vec<Vec<f64>>,
    /// `[x][z]`
    pub z_given_x: Vec<Vec<f64>>,
}

/// `E_{X,Y}[D(P_{Z|X} || P_{Z|Y})]` against `I(Z; X | Y)`, both in bits.
///
/// The left side is summed from the two conditional laws; the right side is
/// assembled from entropies of the full joint.
// x, y and z each index several tables at once.
#[allow(clippy::needless_range_loop)]
pub fn lemma_kl_conditional_mi(chain: &MarkovChain) -> CheckReport {
    let (ny, nx, nz) = (chain.p_y.len(), chain.z_given_x.len(), chain.z_given_x[0].len());
    let z_given_y: Vec<Vec<f64>> = (0..ny)
        .map(|y| (0..nz).map(|z| (0..nx).map(|x| chain.x_given_y[y][x] * chain.z_given_x[x][z]).sum()).collect())
        .collect();
    let mut expected_kl = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            let pxy = chain.p_y[y] * chain.x_given_y[y][x];
            if pxy <= 0.0 {
                continue;
            }
            for z in 0..nz {
                let p = chain.z_given_x[x][z];
                if p > 0.0 {
                    expected_kl += pxy * p * (p / z_given_y[y][z]).log2();
                }
            }
        }
    }

    let h = |v: &[f64]| -v.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>();
    let mut p_xyz = Vec::with_capacity(nx * ny * nz);
    let mut p_xy = Vec::with_capacity(nx * ny);
    let mut p_yz = vec![0.0; ny * nz];
    for y in 0..ny {
        for x in 0..nx {
            let pxy = chain.p_y[y] * chain.x_given_y[y][x];
            p_xy.push(pxy);
            for z in 0..nz {
                let p = pxy * chain.z_given_x[x][z];
                p_xyz.push(p);
                p_yz[y * nz + z] += p;
            }
        }
    }
    // I(Z; X | Y) = H(X,Y) + H(Y,Z) - H(Y) - H(X,Y,Z)
    let cond_mi = h(&p_xy) + h(&p_yz) - h(&chain.p_y) - h(&p_xyz);
    CheckReport::equal(expected_kl, cond_mi)
}
