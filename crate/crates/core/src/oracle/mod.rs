//! Exhaustive checks of the functional-gap theorems, the tail-to-mean
//! proposition and the supporting lemmas on small, exactly solvable
//! instances.
//!
//! Every quantity is computed by enumeration over finite supports, so a
//! reported violation is a property of the instance, not of an estimator.

mod checks;
mod instance;

pub use checks::{
    check_prop1, check_thm1, check_thm2, check_thm5, lemma_kl_conditional_mi, lemma_three_vector, lemma_unit_distance,
    CheckReport, MarkovChain, TailReport, CHECK_TOLERANCE,
};
pub use instance::{random_instance, Atoms, InstanceKind, InstanceSizes, OracleInstance};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Thm1,
    Thm2,
    Thm5,
    Prop1,
    LemmaUnitDistance,
    LemmaThreeVector,
    LemmaKl,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Thm1,
        Check::Thm2,
        Check::Thm5,
        Check::Prop1,
        Check::LemmaUnitDistance,
        Check::LemmaThreeVector,
        Check::LemmaKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Thm1 => "thm1",
            Check::Thm2 => "thm2",
            Check::Thm5 => "thm5",
            Check::Prop1 => "prop1",
            Check::LemmaUnitDistance => "lemma-unit-distance",
            Check::LemmaThreeVector => "lemma-three-vector",
            Check::LemmaKl => "lemma-kl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Equality checks report `-|lhs - rhs|` as slack.
    fn is_equality(self) -> bool {
        matches!(self, Check::LemmaUnitDistance | Check::LemmaKl)
    }
}

/// Per-instance seed; instances of one suite are independent streams.
pub fn instance_seed(suite_seed: u64, index: usize) -> u64 {
    suite_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn random_sizes(rng: &mut ChaCha8Rng) -> InstanceSizes {
    InstanceSizes {
        support_x: rng.random_range(2..=5),
        support_y: rng.random_range(2..=5),
        dim: rng.random_range(1..=4),
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

enum Outcome {
    Pass(f64),
    Fail(f64, Value),
    PremiseFailed,
}

fn judge(check: Check, report: CheckReport, fixture: impl FnOnce() -> Value) -> Outcome {
    let slack = if check.is_equality() { -(report.lhs - report.rhs).abs() } else { report.rhs - report.lhs };
    if report.pass {
        Outcome::Pass(slack)
    } else {
        Outcome::Fail(slack, fixture())
    }
}

fn theorem_outcome(check: Check, seed: u64, result: Result<CheckReport>, inst: &OracleInstance) -> Result<Outcome> {
    match result {
        Ok(r) => Ok(judge(check, r, || json!({ "check": check, "seed": seed, "report": r, "instance": inst }))),
        Err(Error::PremiseFailed(_)) => Ok(Outcome::PremiseFailed),
        Err(e) => Err(e),
    }
}

fn run_one(check: Check, seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match check {
        Check::Thm1 | Check::Thm2 | Check::Thm5 => {
            let sizes = random_sizes(&mut rng);
            let kind = if check == Check::Thm5 { InstanceKind::Markov } else { InstanceKind::Lipschitz };
            let inst = random_instance(seed, sizes, kind)?;
            let result = match check {
                Check::Thm1 => check_thm1(&inst),
                Check::Thm2 => check_thm2(&inst),
                _ => check_thm5(&inst),
            };
            theorem_outcome(check, seed, result, &inst)
        }
        Check::Prop1 => {
            let t: f64 = rng.random_range(0.01..0.9);
            let epsilon = rng.random_range(t..1.0f64).max(t + 1e-6);
            let k = rng.random_range(1..=6);
            let probs = simplex(&mut rng, k);
            let tail = rng.random_range(0.0..0.5);
            let law: Vec<(f64, f64)> = probs
                .into_iter()
                .map(|p| {
                    let v = if rng.random_bool(tail) { rng.random_range(t..=1.0) } else { rng.random_range(0.0..=t) };
                    (v, p)
                })
                .collect();
            let r = check_prop1(&law, t, epsilon)?;
            let slack = epsilon - r.mean;
            Ok(if !r.premise_holds {
                Outcome::PremiseFailed
            } else if r.pass {
                Outcome::Pass(slack)
            } else {
                Outcome::Fail(
                    slack,
                    json!({ "check": check, "seed": seed, "law": law, "t": t, "epsilon": epsilon, "report": r }),
                )
            })
        }
        Check::LemmaUnitDistance => {
            let dim = rng.random_range(1..=16);
            let (x, y) = (unit(&mut rng, dim), unit(&mut rng, dim));
            let r = lemma_unit_distance(&x, &y)?;
            Ok(judge(check, r, || json!({ "check": check, "seed": seed, "x": x, "y": y, "report": r })))
        }
        Check::LemmaThreeVector => {
            let dim = rng.random_range(1..=16);
            let scale = rng.random_range(0.01..10.0);
            let mut v = || (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
            let (a, b, c) = (v(), v(), v());
            let r = lemma_three_vector(&a, &b, &c);
            Ok(judge(check, r, || json!({ "check": check, "seed": seed, "a": a, "b": b, "c": c, "report": r })))
        }
        Check::LemmaKl => {
            let (ny, nx, nz) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=5));
            let chain = MarkovChain {
                p_y: simplex(&mut rng, ny),
                x_given_y: (0..ny).map(|_| simplex(&mut rng, nx)).collect(),
                z_given_x: (0..nx).map(|_| simplex(&mut rng, nz)).collect(),
            };
            let r = lemma_kl_conditional_mi(&chain);
            Ok(judge(check, r, || json!({ "check": check, "seed": seed, "chain": chain, "report": r })))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub theorem: &'static str,
    pub instances: usize,
    pub passes: usize,
    pub premise_failures: usize,
    pub failures: usize,
    /// Smallest `rhs - lhs` over substantive instances (`-|lhs - rhs|` for
    /// equalities); absent when every instance failed its premise.
    pub worst_slack: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub summary: SuiteSummary,
    /// Reproduction data for each failing instance, in instance order.
    pub failing: Vec<Value>,
}

/// Runs `instances` seeded checks; the result is independent of scheduling.
pub fn run_suite(check: Check, instances: usize, seed: u64) -> Result<SuiteRun> {
    let outcomes =
        (0..instances).into_par_iter().map(|i| run_one(check, instance_seed(seed, i))).collect::<Result<Vec<_>>>()?;
    let mut summary = SuiteSummary {
        theorem: check.name(),
        instances,
        passes: 0,
        premise_failures: 0,
        failures: 0,
        worst_slack: None,
    };
    let mut failing = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Pass(s) => {
                summary.passes += 1;
                summary_min(&mut summary.worst_slack, s);
            }
            Outcome::Fail(s, fixture) => {
                summary_min(&mut summary.worst_slack, s);
                failing.push(fixture);
            }
            Outcome::PremiseFailed => summary.premise_failures += 1,
        }
    }
    summary.failures = failing.len();
    Ok(SuiteRun { summary, failing })
}

fn summary_min(slot: &mut Option<f64>, v: f64) {
    *slot = Some(slot.map_or(v, |w| w.min(v)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_are_deterministic_and_clean() {
        for check in Check::ALL {
            let a = run_suite(check, 40, 7).unwrap();
            let b = run_suite(check, 40, 7).unwrap();
            assert_eq!(a.summary, b.summary);
            assert_eq!(a.summary.failures, 0, "{:?}", a.failing);
            assert_eq!(a.summary.passes + a.summary.premise_failures, 40);
        }
    }

    #[test]
    fn names_roundtrip() {
        for c in Check::ALL {
            assert_eq!(Check::parse(c.name()), Some(c));
        }
        assert_eq!(Check::parse("thm9"), None);
    }
}
