use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::infotheory::DiscreteJoint;
use crate::redundancy::cosine_distance;

/// Conditional law of `Z` given one `(x, y)` cell: `(probability, value)` atoms.
pub type Atoms = Vec<(f64, Vec<f64>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    /// Unit-vector supports with a Lipschitz conditional mean.
    Lipschitz,
    /// `Z` depends on the current layer only.
    Markov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstanceSizes {
    pub support_x: usize,
    pub support_y: usize,
    pub dim: usize,
}

/// A finite `(X_l, X_{l-1}, Z)` law with everything the functional-gap
/// theorems quantify over.
///
/// `X` is the current layer (joint rows), `Y` the previous one (columns).
/// Per-cell tables are row-major `[x][y]` over the full support grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleInstance {
    pub seed: u64,
    pub kind: InstanceKind,
    pub joint: DiscreteJoint,
    /// Unit vectors realizing the `X` labels; empty for Markov instances.
    pub points_current: Vec<Vec<f64>>,
    /// Unit vectors realizing the `Y` labels; empty for Markov instances.
    pub points_previous: Vec<Vec<f64>>,
    /// `h(x, y) = E[Z | x, y]` per cell.
    pub h: Vec<Vec<f64>>,
    /// Lipschitz constant of `h` in its first argument.
    pub alpha: f64,
    /// Lipschitz constant of `h` in its second argument.
    pub beta: f64,
    pub z_law: Vec<Atoms>,
    /// Bound on `|Z|` over every atom.
    pub norm_bound: f64,
    /// Estimate of `E[Z | X = x]` per `x`.
    pub estimator_current: Vec<Vec<f64>>,
    /// Estimate of `E[Z | Y = y]` per `y`.
    pub estimator_previous: Vec<Vec<f64>>,
    pub eta_current: f64,
    pub eta_previous: f64,
    pub epsilon: f64,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_of(atoms: &Atoms) -> Vec<f64> {
    let dim = atoms[0].1.len();
    let mut m = vec![0.0; dim];
    for (p, v) in atoms {
        for (acc, x) in m.iter_mut().zip(v) {
            *acc += p * x;
        }
    }
    m
}

impl OracleInstance {
    pub fn nx(&self) -> usize {
        self.joint.support_x.len()
    }

    pub fn ny(&self) -> usize {
        self.joint.support_y.len()
    }

    /// `E[Z | X = x]` for every `x` with positive mass; zero vector otherwise.
    pub fn optimal_current(&self) -> Vec<Vec<f64>> {
        let (nx, ny) = (self.nx(), self.ny());
        let px = self.joint.marginal_x();
        (0..nx)
            .map(|x| {
                let mut m = vec![0.0; self.h[0].len()];
                if px[x] > 0.0 {
                    for y in 0..ny {
                        let w = self.joint.p(x, y) / px[x];
                        for (acc, v) in m.iter_mut().zip(&self.h[x * ny + y]) {
                            *acc += w * v;
                        }
                    }
                }
                m
            })
            .collect()
    }

    /// `E[Z | Y = y]` for every `y` with positive mass; zero vector otherwise.
    pub fn optimal_previous(&self) -> Vec<Vec<f64>> {
        let (nx, ny) = (self.nx(), self.ny());
        let py = self.joint.marginal_y();
        (0..ny)
            .map(|y| {
                let mut m = vec![0.0; self.h[0].len()];
                if py[y] > 0.0 {
                    for x in 0..nx {
                        let w = self.joint.p(x, y) / py[y];
                        for (acc, v) in m.iter_mut().zip(&self.h[x * ny + y]) {
                            *acc += w * v;
                        }
                    }
                }
                m
            })
            .collect()
    }

    /// `E[rho(X, Y)]` over the unit-vector realizations.
    pub fn mean_distance(&self) -> Result<f64> {
        let ny = self.ny();
        let mut acc = 0.0;
        for (x, px) in self.points_current.iter().enumerate() {
            for (y, py) in self.points_previous.iter().enumerate() {
                let p = self.joint.p(x, y);
                if p > 0.0 {
                    acc += p * cosine_distance(px, py)?;
                }
            }
        }
        debug_assert_eq!(self.h.len(), self.nx() * ny);
        Ok(acc)
    }

    /// Largest ratios `|h(x,y) - h(x',y)| / |x - x'|` and
    /// `|h(x,y) - h(x,y')| / |y - y'|` over the support grid.
    pub fn measured_lipschitz(&self) -> (f64, f64) {
        let (nx, ny) = (self.nx(), self.ny());
        let ratio = |a: &[f64], b: &[f64], pa: &[f64], pb: &[f64]| {
            let num = sq_dist(a, b).sqrt();
            let den = sq_dist(pa, pb).sqrt();
            if num == 0.0 {
                0.0
            } else if den == 0.0 {
                f64::INFINITY
            } else {
                num / den
            }
        };
        let mut alpha = 0.0f64;
        for y in 0..ny {
            for x in 0..nx {
                for x2 in 0..x {
                    alpha = alpha.max(ratio(
                        &self.h[x * ny + y],
                        &self.h[x2 * ny + y],
                        &self.points_current[x],
                        &self.points_current[x2],
                    ));
                }
            }
        }
        let mut beta = 0.0f64;
        for x in 0..nx {
            for y in 0..ny {
                for y2 in 0..y {
                    beta = beta.max(ratio(
                        &self.h[x * ny + y],
                        &self.h[x * ny + y2],
                        &self.points_previous[y],
                        &self.points_previous[y2],
                    ));
                }
            }
        }
        (alpha, beta)
    }

    /// Exact `E|f_hat(X) - f*(X)|^2` for the current and previous estimators.
    pub fn measured_eta(&self) -> (f64, f64) {
        let px = self.joint.marginal_x();
        let py = self.joint.marginal_y();
        let fx = self.optimal_current();
        let fy = self.optimal_previous();
        let eta = |p: &[f64], est: &[Vec<f64>], opt: &[Vec<f64>]| {
            p.iter().zip(est).zip(opt).map(|((w, e), o)| w * sq_dist(e, o)).sum::<f64>()
        };
        (eta(&px, &self.estimator_current, &fx), eta(&py, &self.estimator_previous, &fy))
    }

    /// Checks unit norms, `Z`-law means, the norm bound, the declared
    /// Lipschitz constants and the declared estimator errors.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (nx, ny) = (self.nx(), self.ny());
        if self.h.len() != nx * ny || self.z_law.len() != nx * ny {
            return bad("per-cell tables do not match the joint".into());
        }
        for (cell, (atoms, h)) in self.z_law.iter().zip(&self.h).enumerate() {
            let mass: f64 = atoms.iter().map(|a| a.0).sum();
            if atoms.is_empty() || (mass - 1.0).abs() > 1e-9 {
                return bad(format!("Z law of cell {cell} has mass {mass}"));
            }
            if sq_dist(&mean_of(atoms), h).sqrt() > 1e-9 {
                return bad(format!("Z law of cell {cell} does not have mean h"));
            }
            if atoms.iter().any(|(_, v)| norm(v) > self.norm_bound + 1e-12) {
                return bad(format!("Z atom in cell {cell} exceeds the norm bound"));
            }
        }
        if self.kind == InstanceKind::Lipschitz {
            if self.points_current.len() != nx || self.points_previous.len() != ny {
                return bad("point realizations do not match the joint".into());
            }
            for p in self.points_current.iter().chain(&self.points_previous) {
                if (norm(p) - 1.0).abs() > 1e-9 {
                    return bad(format!("support point has norm {}", norm(p)));
                }
            }
            let (a, b) = self.measured_lipschitz();
            if a > self.alpha || b > self.beta {
                return bad(format!(
                    "declared Lipschitz constants ({}, {}) below measured ({a}, {b})",
                    self.alpha, self.beta
                ));
            }
            let (ex, ey) = self.measured_eta();
            if (ex - self.eta_current).abs() > 1e-9 || (ey - self.eta_previous).abs() > 1e-9 {
                return bad("declared estimator errors differ from measured".into());
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_joint(rng: &mut ChaCha8Rng, nx: usize, ny: usize, closeness: impl Fn(usize, usize) -> f64) -> DiscreteJoint {
    let sharpness = rng.random_range(1.0..8.0);
    let sparse = rng.random_bool(0.3);
    let mut w: Vec<f64> = (0..nx * ny)
        .map(|c| {
            let u: f64 = rng.random();
            let keep = !sparse || rng.random_bool(0.6);
            if keep {
                u.powf(sharpness) * closeness(c / ny, c % ny)
            } else {
                0.0
            }
        })
        .collect();
    if w.iter().all(|&v| v <= 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    let pmf = w.into_iter().map(|v| v / s).collect();
    DiscreteJoint::new((0..nx).collect(), (0..ny).collect(), pmf, None).expect("normalized weights")
}

/// Draws one instance; identical `(seed, sizes, kind)` give identical instances.
pub fn random_instance(seed: u64, sizes: InstanceSizes, kind: InstanceKind) -> Result<OracleInstance> {
    if sizes.support_x < 2 || sizes.support_y < 2 || sizes.dim < 1 {
        return Err(Error::InvalidArgument(format!("instance sizes {sizes:?} below minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        InstanceKind::Lipschitz => lipschitz_instance(seed, sizes, &mut rng),
        InstanceKind::Markov => Ok(markov_instance(seed, sizes, &mut rng)),
    }
}

const OUTPUT_DIM: usize = 2;

fn lipschitz_instance(seed: u64, sizes: InstanceSizes, rng: &mut ChaCha8Rng) -> Result<OracleInstance> {
    let InstanceSizes { support_x: nx, support_y: ny, dim } = sizes;
    let points_previous: Vec<Vec<f64>> = (0..ny).map(|_| unit_vector(rng, dim)).collect();
    let spread = rng.random_range(0.0..0.6);
    let points_current: Vec<Vec<f64>> = (0..nx)
        .map(|_| {
            let anchor = &points_previous[rng.random_range(0..ny)];
            let mut v: Vec<f64> = anchor.iter().zip(gaussian(rng, dim, spread)).map(|(a, n)| a + n).collect();
            if norm(&v) < 1e-6 {
                v = anchor.clone();
            }
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let kappa = rng.random_range(0.0..30.0);
    let joint = random_joint(rng, nx, ny, |x, y| {
        (-kappa * cosine_distance(&points_current[x], &points_previous[y]).unwrap_or(2.0)).exp()
    });

    // h(x, y) = tanh(A x + C y + c), a function of the realizing points.
    let gain = rng.random_range(0.0..3.0);
    let a: Vec<Vec<f64>> = (0..OUTPUT_DIM).map(|_| gaussian(rng, dim, gain)).collect();
    let c: Vec<Vec<f64>> = (0..OUTPUT_DIM).map(|_| gaussian(rng, dim, gain)).collect();
    let bias = gaussian(rng, OUTPUT_DIM, 0.5);
    let dot = |w: &[f64], p: &[f64]| w.iter().zip(p).map(|(x, y)| x * y).sum::<f64>();
    let mut h = Vec::with_capacity(nx * ny);
    for px in &points_current {
        for py in &points_previous {
            h.push((0..OUTPUT_DIM).map(|k| (dot(&a[k], px) + dot(&c[k], py) + bias[k]).tanh()).collect::<Vec<_>>());
        }
    }

    let jitter = rng.random_range(0.0..0.5);
    let z_law: Vec<Atoms> = h
        .iter()
        .map(|m| {
            let u = gaussian(rng, OUTPUT_DIM, jitter);
            let plus: Vec<f64> = m.iter().zip(&u).map(|(a, b)| a + b).collect();
            let minus: Vec<f64> = m.iter().zip(&u).map(|(a, b)| a - b).collect();
            vec![(0.5, plus), (0.5, minus)]
        })
        .collect();
    let norm_bound = z_law.iter().flatten().map(|(_, v)| norm(v)).fold(0.0, f64::max);

    let mut inst = OracleInstance {
        seed,
        kind: InstanceKind::Lipschitz,
        joint,
        points_current,
        points_previous,
        h,
        alpha: 0.0,
        beta: 0.0,
        z_law,
        norm_bound,
        estimator_current: Vec::new(),
        estimator_previous: Vec::new(),
        eta_current: 0.0,
        eta_previous: 0.0,
        epsilon: 0.0,
    };
    let (alpha, beta) = inst.measured_lipschitz();
    inst.alpha = alpha;
    inst.beta = beta;

    let radius = rng.random_range(0.0..0.5);
    inst.estimator_current = inst.optimal_current().into_iter().map(|f| perturb(rng, f, radius)).collect();
    inst.estimator_previous = inst.optimal_previous().into_iter().map(|f| perturb(rng, f, radius)).collect();
    let (ex, ey) = inst.measured_eta();
    inst.eta_current = ex;
    inst.eta_previous = ey;

    let d = inst.mean_distance()?;
    inst.epsilon = if d > 0.0 { 2.0 * d * rng.random_range(1.0..3.0) } else { rng.random_range(1e-6..1e-2) };
    Ok(inst)
}

fn perturb(rng: &mut ChaCha8Rng, f: Vec<f64>, radius: f64) -> Vec<f64> {
    let scale = radius * rng.random::<f64>();
    f.into_iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect()
}

fn markov_instance(seed: u64, sizes: InstanceSizes, rng: &mut ChaCha8Rng) -> OracleInstance {
    let InstanceSizes { support_x: nx, support_y: ny, dim } = sizes;
    let joint = random_joint(rng, nx, ny, |_, _| 1.0);
    let scale = rng.random_range(0.1..3.0);
    let laws: Vec<Atoms> = (0..nx)
        .map(|_| {
            let k = rng.random_range(1..=4);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|p| (p / s, gaussian(rng, dim, scale))).collect()
        })
        .collect();
    OracleInstance::from_markov(seed, joint, &laws)
}

impl OracleInstance {
    /// Instance whose `Z` law in cell `(x, y)` is `laws[x]` for every `y`.
    pub fn from_markov(seed: u64, joint: DiscreteJoint, laws: &[Atoms]) -> Self {
        let ny = joint.support_y.len();
        let z_law: Vec<Atoms> = laws.iter().flat_map(|l| std::iter::repeat_n(l.clone(), ny)).collect();
        let h = z_law.iter().map(mean_of).collect();
        let norm_bound = z_law.iter().flatten().map(|(_, v)| norm(v)).fold(0.0, f64::max);
        Self {
            seed,
            kind: InstanceKind::Markov,
            joint,
            points_current: Vec::new(),
            points_previous: Vec::new(),
            h,
            alpha: 0.0,
            beta: 0.0,
            z_law,
            norm_bound,
            estimator_current: Vec::new(),
            estimator_previous: Vec::new(),
            eta_current: 0.0,
            eta_previous: 0.0,
            epsilon: 0.0,
        }
    }

    /// Instance with deterministic `Z = h(x, y)` on unit-vector supports;
    /// Lipschitz constants are measured, estimators are exact and `epsilon`
    /// is given.
    pub fn from_lipschitz(
        joint: DiscreteJoint,
        points_current: Vec<Vec<f64>>,
        points_previous: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        epsilon: f64,
    ) -> Self {
        let z_law: Vec<Atoms> = h.iter().map(|v| vec![(1.0, v.clone())]).collect();
        let norm_bound = h.iter().map(|v| norm(v)).fold(0.0, f64::max);
        let mut inst = Self {
            seed: 0,
            kind: InstanceKind::Lipschitz,
            joint,
            points_current,
            points_previous,
            h,
            alpha: 0.0,
            beta: 0.0,
            z_law,
            norm_bound,
            estimator_current: Vec::new(),
            estimator_previous: Vec::new(),
            eta_current: 0.0,
            eta_previous: 0.0,
            epsilon,
        };
        let (a, b) = inst.measured_lipschitz();
        inst.alpha = a;
        inst.beta = b;
        inst.estimator_current = inst.optimal_current();
        inst.estimator_previous = inst.optimal_previous();
        inst
    }
}
