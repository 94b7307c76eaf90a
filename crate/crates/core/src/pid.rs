//! Three-variable partial information decomposition with the BROJA unique
//! information.
//!
//! `Uni(X : Y \ Z)` is the minimum of `I_Q(X; Y | Z)` over joints `Q` that
//! share the `(X, Y)` and `(X, Z)` marginals of `P`. Fixing those marginals
//! splits the feasible set into one transportation polytope per value of
//! `X`: rows indexed by `y`, columns by `z`, row sums `P(x, y)` and column
//! sums `P(x, z)`. Cells with `P(x, y) = 0` or `P(x, z) = 0` are forced to
//! zero and dropped.
//!
//! The program is convex. It is solved by projected gradient descent with
//! Armijo backtracking, where each projection is computed by Dykstra's
//! alternating projections between the affine marginal constraints and the
//! nonnegative orthant. Restart 0 starts at the product point
//! `P(x,y) P(x,z) / P(x)`; the others start at seeded random feasible points.
//!
//! The functional redundancy `Uni(Z : X_l \ X_{l-1})` of a layer is
//! `broja_unique` applied to the triple `(Z, X_l, X_{l-1})`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::PMF_TOLERANCE;

pub const MAX_SUPPORT: usize = 16;
pub const RESTARTS: usize = 20;
pub const MAX_ITERATIONS: usize = 100_000;
/// Plateau test: stop once the objective fell by less than this many bits
/// over the last [`PLATEAU_WINDOW`] iterations.
pub const PLATEAU_TOLERANCE: f64 = 1e-9;
pub const PLATEAU_WINDOW: usize = 50;
/// Largest tolerated spread of restart optima, in bits.
pub const STALL_GAP: f64 = 1e-3;

const RESTART_SEED: u64 = 0x0b10_a5ee_d000_0000;
const GRADIENT_FLOOR: f64 = 1e-15;
const ARMIJO: f64 = 1e-4;
const PROJECTION_TOLERANCE: f64 = 1e-14;
const PROJECTION_SWEEPS: usize = 20_000;

/// Joint pmf of `(X, Y, Z)`, row-major `[x][y][z]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripleJoint {
    shape: [usize; 3],
    pmf: Vec<f64>,
}

#[derive(Deserialize)]
struct NestedPmf {
    pmf: Vec<Vec<Vec<f64>>>,
}

impl TripleJoint {
    pub fn new(shape: [usize; 3], pmf: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0 || s > MAX_SUPPORT) {
            return Err(Error::InvalidArgument(format!("support sizes {shape:?} must lie in [1, {MAX_SUPPORT}]")));
        }
        if pmf.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("{} cells for shape {shape:?}", pmf.len())));
        }
        if let Some(bad) = pmf.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("pmf entry {bad} is not a probability")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PMF_TOLERANCE {
            return Err(Error::InvalidArgument(format!("pmf sums to {total}")));
        }
        Ok(Self { shape, pmf })
    }

    /// Builds `pmf[x][y][z] = f(x, y, z)`.
    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut pmf = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    pmf.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, pmf)
    }

    /// Parses `{"pmf": [[[p_xyz, ...], ...], ...]}` indexed `[x][y][z]`.
    pub fn from_json(text: &str) -> Result<Self> {
        let nested: NestedPmf =
            serde_json::from_str(text).map_err(|e| Error::FormatRejected(format!("pmf json: {e}")))?;
        let nx = nested.pmf.len();
        let ny = nested.pmf.first().map_or(0, Vec::len);
        let nz = nested.pmf.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(nx * ny * nz);
        for (x, plane) in nested.pmf.iter().enumerate() {
            if plane.len() != ny {
                return Err(Error::FormatRejected(format!("pmf[{x}] has {} rows, expected {ny}", plane.len())));
            }
            for (y, row) in plane.iter().enumerate() {
                if row.len() != nz {
                    return Err(Error::FormatRejected(format!(
                        "pmf[{x}][{y}] has {} entries, expected {nz}",
                        row.len()
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        Self::new([nx, ny, nz], flat)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn p(&self, x: usize, y: usize, z: usize) -> f64 {
        self.pmf[(x * self.shape[1] + y) * self.shape[2] + z]
    }

    /// The joint of `(X, Z, Y)`: roles of the two sources swapped.
    pub fn swap_sources(&self) -> Self {
        let [nx, ny, nz] = self.shape;
        let mut pmf = Vec::with_capacity(self.pmf.len());
        for x in 0..nx {
            for z in 0..nz {
                for y in 0..ny {
                    pmf.push(self.p(x, y, z));
                }
            }
        }
        Self { shape: [nx, nz, ny], pmf }
    }

    fn marginal_xy(&self) -> Vec<f64> {
        self.pmf.chunks(self.shape[2]).map(|r| r.iter().sum()).collect()
    }

    fn marginal_xz(&self) -> Vec<f64> {
        let [nx, ny, nz] = self.shape;
        let mut m = vec![0.0; nx * nz];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    m[x * nz + z] += self.p(x, y, z);
                }
            }
        }
        m
    }

    /// `I(X; Y)` in bits.
    pub fn mi_xy(&self) -> f64 {
        let [nx, ny, _] = self.shape;
        mi_2d(&self.marginal_xy(), nx, ny)
    }

    /// `I(X; Z)` in bits.
    pub fn mi_xz(&self) -> f64 {
        let [nx, _, nz] = self.shape;
        mi_2d(&self.marginal_xz(), nx, nz)
    }

    /// `I(X; (Y, Z))` in bits.
    pub fn mi_x_yz(&self) -> f64 {
        let [nx, ny, nz] = self.shape;
        mi_2d(&self.pmf, nx, ny * nz)
    }
}

fn mi_2d(pmf: &[f64], na: usize, nb: usize) -> f64 {
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    for a in 0..na {
        for b in 0..nb {
            pa[a] += pmf[a * nb + b];
            pb[b] += pmf[a * nb + b];
        }
    }
    let mut acc = 0.0;
    for a in 0..na {
        for b in 0..nb {
            let p = pmf[a * nb + b];
            if p > 0.0 {
                acc += p * (p / (pa[a] * pb[b])).log2();
            }
        }
    }
    acc.max(0.0)
}

/// One transportation polytope: free cells `ys x zs` for a fixed `x`.
#[derive(Debug, Clone)]
struct Block {
    x: usize,
    ys: Vec<usize>,
    zs: Vec<usize>,
    rows: Vec<f64>,
    cols: Vec<f64>,
    offset: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.ys.len() * self.zs.len()
    }

    /// Euclidean projection onto `{M : M 1 = rows, 1^T M = cols}`.
    fn project_affine(&self, m: &mut [f64]) {
        let (nr, nc) = (self.ys.len(), self.zs.len());
        let mut dr = vec![0.0; nr];
        let mut dc = vec![0.0; nc];
        for i in 0..nr {
            for j in 0..nc {
                dr[i] += m[i * nc + j];
                dc[j] += m[i * nc + j];
            }
        }
        let mut ds = 0.0;
        for (d, r) in dr.iter_mut().zip(&self.rows) {
            *d -= r;
            ds += *d;
        }
        for (d, c) in dc.iter_mut().zip(&self.cols) {
            *d -= c;
        }
        let shift = ds / (nr * nc) as f64;
        for i in 0..nr {
            for j in 0..nc {
                m[i * nc + j] += shift - dr[i] / nc as f64 - dc[j] / nr as f64;
            }
        }
    }

    fn affine_residual(&self, m: &[f64]) -> f64 {
        let (nr, nc) = (self.ys.len(), self.zs.len());
        let mut worst = 0.0f64;
        for i in 0..nr {
            let s: f64 = m[i * nc..(i + 1) * nc].iter().sum();
            worst = worst.max((s - self.rows[i]).abs());
        }
        for j in 0..nc {
            let s: f64 = (0..nr).map(|i| m[i * nc + j]).sum();
            worst = worst.max((s - self.cols[j]).abs());
        }
        worst
    }

    /// Dykstra's alternating projections onto the affine set and the orthant.
    fn project(&self, m: &mut [f64]) {
        if self.ys.len() == 1 || self.zs.len() == 1 {
            // A single row or column is pinned by the other marginal.
            let nc = self.zs.len();
            for (k, v) in m.iter_mut().enumerate() {
                *v = if self.ys.len() == 1 { self.cols[k] } else { self.rows[k / nc] };
            }
            return;
        }
        let n = m.len();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut y = vec![0.0; n];
        for _ in 0..PROJECTION_SWEEPS {
            for k in 0..n {
                y[k] = m[k] + p[k];
            }
            self.project_affine(&mut y);
            let mut moved = 0.0f64;
            for k in 0..n {
                p[k] += m[k] - y[k];
                let next = (y[k] + q[k]).max(0.0);
                q[k] += y[k] - next;
                moved = moved.max((next - m[k]).abs());
                m[k] = next;
            }
            if moved < PROJECTION_TOLERANCE && self.affine_residual(m) < PROJECTION_TOLERANCE {
                break;
            }
        }
    }
}

/// The feasible set `Delta_P` with a flat parameter vector over free cells.
#[derive(Debug, Clone)]
struct Polytope {
    shape: [usize; 3],
    blocks: Vec<Block>,
    /// `P(x, z)`, fixed across the polytope.
    p_xz: Vec<f64>,
    dim: usize,
}

impl Polytope {
    fn new(joint: &TripleJoint) -> Self {
        let [nx, ny, nz] = joint.shape;
        let p_xy = joint.marginal_xy();
        let p_xz = joint.marginal_xz();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for x in 0..nx {
            let ys: Vec<usize> = (0..ny).filter(|&y| p_xy[x * ny + y] > 0.0).collect();
            let zs: Vec<usize> = (0..nz).filter(|&z| p_xz[x * nz + z] > 0.0).collect();
            if ys.is_empty() || zs.is_empty() {
                continue;
            }
            let rows = ys.iter().map(|&y| p_xy[x * ny + y]).collect();
            let cols = zs.iter().map(|&z| p_xz[x * nz + z]).collect();
            let b = Block { x, ys, zs, rows, cols, offset };
            offset += b.len();
            blocks.push(b);
        }
        Self { shape: joint.shape, blocks, p_xz, dim: offset }
    }

    fn project(&self, v: &mut [f64]) {
        for b in &self.blocks {
            b.project(&mut v[b.offset..b.offset + b.len()]);
        }
    }

    fn product_point(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for b in &self.blocks {
            let total: f64 = b.rows.iter().sum();
            let nc = b.zs.len();
            for (i, r) in b.rows.iter().enumerate() {
                for (j, c) in b.cols.iter().enumerate() {
                    v[b.offset + i * nc + j] = r * c / total;
                }
            }
        }
        v
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for b in &self.blocks {
            let total: f64 = b.rows.iter().sum();
            let cells = &mut v[b.offset..b.offset + b.len()];
            for c in cells.iter_mut() {
                *c = rng.random::<f64>();
            }
            let s: f64 = cells.iter().sum();
            cells.iter_mut().for_each(|c| *c *= total / s);
            b.project(cells);
        }
        v
    }

    /// `(q(z), q(y, z))` of a parameter vector.
    fn source_marginals(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nz = self.shape[2];
        let mut qz = vec![0.0; nz];
        let mut qyz = vec![0.0; self.shape[1] * nz];
        for b in &self.blocks {
            let nc = b.zs.len();
            for (i, &y) in b.ys.iter().enumerate() {
                for (j, &z) in b.zs.iter().enumerate() {
                    let q = v[b.offset + i * nc + j];
                    qz[z] += q;
                    qyz[y * nz + z] += q;
                }
            }
        }
        (qz, qyz)
    }

    /// `I_Q(X; Y | Z)` in bits.
    fn objective(&self, v: &[f64]) -> f64 {
        let nz = self.shape[2];
        let (qz, qyz) = self.source_marginals(v);
        let mut acc = 0.0;
        for b in &self.blocks {
            let nc = b.zs.len();
            for (i, &y) in b.ys.iter().enumerate() {
                for (j, &z) in b.zs.iter().enumerate() {
                    let q = v[b.offset + i * nc + j];
                    if q > 0.0 {
                        acc += q * (q * qz[z] / (self.p_xz[b.x * nz + z] * qyz[y * nz + z])).log2();
                    }
                }
            }
        }
        acc
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let nz = self.shape[2];
        let (qz, qyz) = self.source_marginals(v);
        let mut g = vec![0.0; self.dim];
        for b in &self.blocks {
            let nc = b.zs.len();
            for (i, &y) in b.ys.iter().enumerate() {
                for (j, &z) in b.zs.iter().enumerate() {
                    let k = b.offset + i * nc + j;
                    let q = v[k].max(GRADIENT_FLOOR);
                    let qy = qyz[y * nz + z].max(GRADIENT_FLOOR);
                    g[k] = (q * qz[z] / (self.p_xz[b.x * nz + z] * qy)).log2();
                }
            }
        }
        g
    }

    fn expand(&self, v: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = self.shape;
        let mut q = vec![0.0; nx * ny * nz];
        for b in &self.blocks {
            let nc = b.zs.len();
            for (i, &y) in b.ys.iter().enumerate() {
                for (j, &z) in b.zs.iter().enumerate() {
                    q[(b.x * ny + y) * nz + z] = v[b.offset + i * nc + j];
                }
            }
        }
        q
    }
}

#[derive(Debug, Clone)]
struct Descent {
    point: Vec<f64>,
    objective: f64,
    /// Objective after each accepted step, starting with the initial point.
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn descend(poly: &Polytope, mut point: Vec<f64>) -> Descent {
    let mut f = poly.objective(&point);
    let mut history = vec![f];
    let mut step = 1.0;
    let mut candidate = vec![0.0; point.len()];
    for _ in 0..MAX_ITERATIONS {
        let g = poly.gradient(&point);
        let mut accepted = false;
        for _ in 0..60 {
            for ((c, p), gk) in candidate.iter_mut().zip(&point).zip(&g) {
                *c = p - step * gk;
            }
            poly.project(&mut candidate);
            let slope: f64 = candidate.iter().zip(&point).zip(&g).map(|((c, p), gk)| gk * (c - p)).sum();
            let fc = poly.objective(&candidate);
            if fc <= f && fc <= f + ARMIJO * slope {
                accepted = fc < f || slope < 0.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut point, &mut candidate);
        f = poly.objective(&point);
        history.push(f);
        step = (step * 2.0).min(1e3);
        let n = history.len();
        if n > PLATEAU_WINDOW && history[n - 1 - PLATEAU_WINDOW] - f < PLATEAU_TOLERANCE {
            break;
        }
    }
    Descent { point, objective: f, history }
}

/// Result of the unique-information program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniqueInformation {
    /// `Uni(X : Y \ Z)` in bits.
    pub value: f64,
    /// Spread of restart optima in bits.
    pub solver_gap: f64,
    /// Minimizing joint, row-major `[x][y][z]`.
    pub q_star: Vec<f64>,
}

fn solve(joint: &TripleJoint) -> Vec<Descent> {
    let poly = Polytope::new(joint);
    (0..RESTARTS)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                poly.product_point()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED + r as u64);
                poly.random_point(&mut rng)
            };
            descend(&poly, start)
        })
        .collect()
}

pub fn broja_unique(joint: &TripleJoint) -> Result<UniqueInformation> {
    let runs = solve(joint);
    // Ties resolve to the lowest restart index, independent of scheduling.
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one restart");
    let worst = runs.iter().map(|d| d.objective).fold(f64::NEG_INFINITY, f64::max);
    let solver_gap = worst - runs[best].objective;
    if solver_gap > STALL_GAP {
        let finals: Vec<String> = runs.iter().map(|d| format!("{:.6}", d.objective)).collect();
        return Err(Error::SolverStalled(format!(
            "restart optima spread {solver_gap:.3e} bits > {STALL_GAP:e}: [{}]",
            finals.join(", ")
        )));
    }
    let poly = Polytope::new(joint);
    Ok(UniqueInformation { value: runs[best].objective.max(0.0), solver_gap, q_star: poly.expand(&runs[best].point) })
}

/// The four decomposition components of `I(X; Y, Z)` in bits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PidResult {
    pub uni_xy: f64,
    pub uni_xz: f64,
    pub red: f64,
    pub syn: f64,
    pub i_xy: f64,
    pub i_xz: f64,
    pub i_x_yz: f64,
    /// Largest restart spread of the two unique-information solves.
    pub solver_gap: f64,
    /// Minimizer of the `Uni(X : Y \ Z)` program.
    pub q_star: Vec<f64>,
}

pub fn pid_decompose(joint: &TripleJoint) -> Result<PidResult> {
    let uxy = broja_unique(joint)?;
    let uxz = broja_unique(&joint.swap_sources())?;
    let i_xy = joint.mi_xy();
    let i_xz = joint.mi_xz();
    let i_x_yz = joint.mi_x_yz();
    let red = i_xy - uxy.value;
    Ok(PidResult {
        uni_xy: uxy.value,
        uni_xz: uxz.value,
        red,
        syn: i_x_yz - uxy.value - uxz.value - red,
        i_xy,
        i_xz,
        i_x_yz,
        solver_gap: uxy.solver_gap.max(uxz.solver_gap),
        q_star: uxy.q_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor() -> TripleJoint {
        TripleJoint::from_fn([2, 2, 2], |x, y, z| if x == y ^ z { 0.25 } else { 0.0 }).unwrap()
    }

    fn copy() -> TripleJoint {
        TripleJoint::from_fn([2, 2, 2], |x, y, z| if x == y && y == z { 0.5 } else { 0.0 }).unwrap()
    }

    /// `I(X; Y | Z)` in bits, evaluated from the defining sum.
    fn cond_mi(q: &[f64; 8]) -> f64 {
        let at = |x: usize, y: usize, z: usize| q[x * 4 + y * 2 + z];
        let mut acc = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    let p = at(x, y, z);
                    if p <= 0.0 {
                        continue;
                    }
                    let pz: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| at(a, b, z)).sum();
                    let pxz: f64 = (0..2).map(|b| at(x, b, z)).sum();
                    let pyz: f64 = (0..2).map(|a| at(a, y, z)).sum();
                    acc += p * (p * pz / (pxz * pyz)).log2();
                }
            }
        }
        acc
    }

    /// Exhaustive search over the two free coordinates of a 2x2x2 polytope.
    fn grid_unique(joint: &TripleJoint) -> f64 {
        let axis = |x: usize| -> (f64, f64, f64, f64, Vec<f64>) {
            let r0 = joint.p(x, 0, 0) + joint.p(x, 0, 1);
            let c0 = joint.p(x, 0, 0) + joint.p(x, 1, 0);
            let s: f64 = (0..2).flat_map(|y| (0..2).map(move |z| (y, z))).map(|(y, z)| joint.p(x, y, z)).sum();
            let lo = (r0 + c0 - s).max(0.0);
            let hi = r0.min(c0);
            let mut pts: Vec<f64> = (0..).map(|i| lo + i as f64 * 1e-3).take_while(|&a| a < hi).collect();
            pts.push(hi);
            (r0, c0, s, lo, pts)
        };
        let (r0a, c0a, sa, _, pa) = axis(0);
        let (r0b, c0b, sb, _, pb) = axis(1);
        let mut best = f64::INFINITY;
        for &a in &pa {
            for &b in &pb {
                let q = [a, r0a - a, c0a - a, sa - r0a - c0a + a, b, r0b - b, c0b - b, sb - r0b - c0b + b];
                best = best.min(cond_mi(&q.map(|v: f64| v.max(0.0))));
            }
        }
        best
    }

    #[test]
    fn xor_is_pure_synergy() {
        let r = pid_decompose(&xor()).unwrap();
        assert!((r.syn - 1.0).abs() < 1e-3, "{r:?}");
        for v in [r.uni_xy, r.uni_xz, r.red] {
            assert!(v.abs() < 1e-3, "{r:?}");
        }
        assert!((grid_unique(&xor()) - r.uni_xy).abs() < 2e-3);
    }

    #[test]
    fn copy_is_pure_redundancy() {
        let r = pid_decompose(&copy()).unwrap();
        assert!((r.red - 1.0).abs() < 1e-3, "{r:?}");
        for v in [r.uni_xy, r.uni_xz, r.syn] {
            assert!(v.abs() < 1e-3, "{r:?}");
        }
        assert!((grid_unique(&copy()) - r.uni_xy).abs() < 2e-3);
    }

    #[test]
    fn copied_source_with_independent_other_is_unique() {
        let j = TripleJoint::from_fn([2, 2, 2], |x, y, _| if x == y { 0.25 } else { 0.0 }).unwrap();
        let u = broja_unique(&j).unwrap();
        assert!((u.value - 1.0).abs() < 1e-3, "{u:?}");
    }

    #[test]
    fn independent_variables_decompose_to_zero() {
        let j = TripleJoint::from_fn([2, 3, 2], |_, _, _| 1.0 / 12.0).unwrap();
        let r = pid_decompose(&j).unwrap();
        for v in [r.uni_xy, r.uni_xz, r.red, r.syn] {
            assert!(v.abs() < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn q_star_keeps_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..3 * 3 * 2).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let j = TripleJoint::new([3, 3, 2], raw.iter().map(|v| v / s).collect()).unwrap();
        let u = broja_unique(&j).unwrap();
        let q = TripleJoint { shape: j.shape, pmf: u.q_star.clone() };
        for (a, b) in q.marginal_xy().iter().zip(j.marginal_xy()) {
            assert!((a - b).abs() < 1e-7);
        }
        for (a, b) in q.marginal_xz().iter().zip(j.marginal_xz()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(u.q_star.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn descent_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let j = TripleJoint::new([4, 3, 3], raw.iter().map(|v| v / s).collect()).unwrap();
        for run in solve(&j) {
            assert!(run.history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn random_cubes_match_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..6 {
            let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let j = TripleJoint::new([2, 2, 2], raw.iter().map(|v| v / s).collect()).unwrap();
            let solved = broja_unique(&j).unwrap().value;
            let grid = grid_unique(&j);
            assert!((solved - grid).abs() < 2e-3, "{solved} vs {grid}");
            assert!(solved <= grid + 1e-9);
        }
    }

    #[test]
    fn json_roundtrip_and_rejection() {
        let j = TripleJoint::from_json(r#"{"pmf": [[[0.25, 0.0], [0.0, 0.25]], [[0.0, 0.25], [0.25, 0.0]]]}"#).unwrap();
        assert_eq!(j.shape(), [2, 2, 2]);
        assert_eq!(j.p(1, 0, 1), 0.25);
        assert!(matches!(TripleJoint::from_json(r#"{"pmf": [[[1.0]], [[0.0, 0.0]]]}"#), Err(Error::FormatRejected(_))));
        assert!(TripleJoint::from_json("{}").is_err());
        assert!(TripleJoint::new([17, 1, 1], vec![1.0 / 17.0; 17]).is_err());
    }
}
