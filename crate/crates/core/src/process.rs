//! The jump process on the boundary: closed-form kernel, semigroup, exit rates,
//! and the cascade simulator at cylinder resolution.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::path_rng;
use crate::error::{domain, Error, ErrorKind, Result};
use crate::matrix::RootMode;
use crate::measure::{ExitMeasure, SimpleFn};
use crate::tree::{meet_level, path_string, NodeId};

const MODULE: &str = "boundary_process";

/// Events allowed in one simulated path before giving up.
pub const MAX_EVENTS: usize = 20_000_000;

fn zero_mass(path: &[u32]) -> Error {
    Error::new(ErrorKind::ZeroMass, MODULE, format!("null cylinder {}", path_string(path)))
        .with_context(serde_json::json!({"path": path_string(path)}))
}

fn decay(t: f64, g: f64) -> f64 {
    if g.is_infinite() {
        1.0
    } else {
        (-t / g).exp()
    }
}

/// Transition kernel of the boundary process built from `μ` and `G`.
/// Reflected mode is the same formula with `G_0 = ∞`.
#[derive(Debug, Clone)]
pub struct BoundaryKernel {
    mu: Arc<ExitMeasure>,
}

impl BoundaryKernel {
    pub fn new(mu: Arc<ExitMeasure>) -> Self {
        BoundaryKernel { mu }
    }

    pub fn mode(&self) -> RootMode {
        self.mu.mode()
    }

    pub fn measure(&self) -> &ExitMeasure {
        &self.mu
    }

    /// `G_n` along `ray` (`∞` at `n = 0` when reflected).
    pub fn g(&self, ray: &[u32], n: usize) -> Result<f64> {
        if n == 0 && self.mode() == RootMode::Reflected {
            return Ok(f64::INFINITY);
        }
        Ok(self.mu.g(ray, n)?.mid())
    }

    /// `G_0 .. G_upto` along `ray`.
    pub fn ladder(&self, ray: &[u32], upto: usize) -> Result<Vec<f64>> {
        (0..=upto).map(|n| self.g(ray, n)).collect()
    }

    fn mass(&self, path: &[u32]) -> Result<f64> {
        let m = self.mu.mass_mid(path)?;
        if m <= 0.0 {
            return Err(zero_mass(path));
        }
        Ok(m)
    }

    /// Terms `(e^{-t/G_n} - e^{-t/G_{n+1}}) / μ(Cⁿ(ξ))` for `n = 0..=m`.
    fn terms(&self, t: f64, xi: &[u32], m: usize) -> Result<Vec<f64>> {
        let g = self.ladder(xi, m + 1)?;
        (0..=m)
            .map(|n| Ok((decay(t, g[n]) - decay(t, g[n + 1])) / self.mass(&xi[..n])?))
            .collect()
    }

    fn meet(xi: &[u32], eta: &[u32]) -> Result<usize> {
        let m = meet_level(xi, eta);
        if m >= xi.len().min(eta.len()) {
            return Err(domain(MODULE, format!(
                "rays {} and {} are not resolved past their meet",
                path_string(xi),
                path_string(eta)
            )));
        }
        Ok(m)
    }

    /// `p(t, ξ, η)`.
    pub fn p(&self, t: f64, xi: &[u32], eta: &[u32]) -> Result<f64> {
        if !(t > 0.0) {
            return Err(domain(MODULE, "kernel needs t > 0"));
        }
        let m = Self::meet(xi, eta)?;
        Ok(self.terms(t, xi, m)?.iter().sum())
    }

    /// `∫₀^∞ p dt` by the telescoping sum `Σ (G_n - G_{n+1}) / μ(Cⁿ)`.
    pub fn green(&self, xi: &[u32], eta: &[u32]) -> Result<f64> {
        if self.mode() == RootMode::Reflected {
            return Err(domain(MODULE, "the reflected process is conservative; its Green kernel is infinite"));
        }
        let m = Self::meet(xi, eta)?;
        let g = self.ladder(xi, m + 1)?;
        let mut s = 0.0;
        for n in 0..=m {
            s += (g[n] - g[n + 1]) / self.mass(&xi[..n])?;
        }
        Ok(s)
    }

    /// `|∫p dt - U_ξη|` with `U_ξη = w_{|ξ∧η|}`.
    pub fn green_residual(&self, xi: &[u32], eta: &[u32]) -> Result<f64> {
        let m = Self::meet(xi, eta)?;
        Ok((self.green(xi, eta)? - self.mu.weights().w(m as i64)).abs())
    }

    /// `∫₀^∞ p dt` by composite Simpson in `log t`.
    pub fn green_quadrature(&self, xi: &[u32], eta: &[u32]) -> Result<f64> {
        if self.mode() == RootMode::Reflected {
            return Err(domain(MODULE, "the reflected process is conservative; its Green kernel is infinite"));
        }
        let m = Self::meet(xi, eta)?;
        let g = self.ladder(xi, m + 1)?;
        let inv: Vec<f64> = (0..=m).map(|n| self.mass(&xi[..n]).map(|x| 1.0 / x)).collect::<Result<_>>()?;
        let f = |u: f64| {
            let t = u.exp();
            (0..=m).map(|n| (decay(t, g[n]) - decay(t, g[n + 1])) * inv[n]).sum::<f64>() * t
        };
        let (a, b) = (g[m + 1].ln() - 30.0, g[0].ln() + 6.0);
        let steps = 40_000;
        let h = (b - a) / steps as f64;
        let mut s = f(a) + f(b);
        for k in 1..steps {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        Ok(s * h / 3.0)
    }

    /// `∫_C p(t, ξ, ·) dμ` for a cylinder `C`.
    pub fn cylinder_prob(&self, t: f64, xi: &[u32], cyl: &[u32]) -> Result<f64> {
        let l = cyl.len();
        let m = meet_level(xi, cyl);
        if m < l {
            if m >= xi.len() {
                return Err(domain(MODULE, "ray not resolved past the cylinder"));
            }
            let mc = self.mu.mass_mid(cyl)?;
            return Ok(mc * self.terms(t, xi, m)?.iter().sum::<f64>());
        }
        // ξ ∈ C: μ(C) p_{l-1} + e^{-t/G_l}
        let inside = if l == 0 { 0.0 } else { self.terms(t, xi, l - 1)?.iter().sum::<f64>() };
        Ok(self.mass(cyl)? * inside + decay(t, self.g(xi, l)?))
    }

    /// `∫ p(t, ξ, ·) dμ` summed atom by atom at `level`.
    pub fn total_mass_by_atoms(&self, t: f64, xi: &[u32], level: usize) -> Result<f64> {
        let mut s = 0.0;
        for a in self.mu.atoms(level)? {
            if self.mu.mass_mid(&a)? > 0.0 {
                s += self.cylinder_prob(t, xi, &a)?;
            }
        }
        Ok(s)
    }

    /// `e^{-t/G_0}` (1 when reflected).
    pub fn total_mass(&self, t: f64) -> Result<f64> {
        Ok(decay(t, self.g(&[], 0)?))
    }

    /// Conditional expectations `E_n f` on the atoms of `f`, `n = 0..=L`.
    fn conditional(&self, f: &SimpleFn) -> Result<(Vec<Vec<u32>>, Vec<f64>, Vec<Vec<f64>>)> {
        let atoms: Vec<Vec<u32>> = self.mu.atoms(f.level)?;
        let mass: Vec<f64> = atoms.iter().map(|a| self.mu.mass_mid(a)).collect::<Result<_>>()?;
        let mut e = vec![vec![0.0; f.level + 1]; atoms.len()];
        for n in 0..=f.level {
            let mut num: HashMap<&[u32], (f64, f64)> = HashMap::new();
            for (a, &m) in atoms.iter().zip(&mass) {
                let slot = num.entry(&a[..n]).or_insert((0.0, 0.0));
                slot.0 += f.at(a) * m;
                slot.1 += m;
            }
            for (k, a) in atoms.iter().enumerate() {
                let (s, m) = num[&a[..n]];
                e[k][n] = if m > 0.0 { s / m } else { 0.0 };
            }
        }
        Ok((atoms, mass, e))
    }

    /// `P_t f = Σ_n e^{-t/G_n} (E_n f - E_{n-1} f)`.
    pub fn semigroup(&self, t: f64, f: &SimpleFn) -> Result<SimpleFn> {
        let (atoms, mass, e) = self.conditional(f)?;
        let mut values = BTreeMap::new();
        for (k, a) in atoms.iter().enumerate() {
            if mass[k] <= 0.0 {
                continue;
            }
            let g = self.ladder(a, f.level)?;
            let mut v = 0.0;
            for n in 0..=f.level {
                let prev = if n == 0 { 0.0 } else { e[k][n - 1] };
                v += decay(t, g[n]) * (e[k][n] - prev);
            }
            values.insert(a.clone(), v);
        }
        Ok(SimpleFn { level: f.level, values })
    }

    /// `∫ p(t, ·, η) f(η) μ(dη)` on the atoms of `f`.
    pub fn semigroup_by_kernel(&self, t: f64, f: &SimpleFn) -> Result<SimpleFn> {
        let atoms = self.mu.atoms(f.level)?;
        let mass: Vec<f64> = atoms.iter().map(|a| self.mu.mass_mid(a)).collect::<Result<_>>()?;
        let mut values = BTreeMap::new();
        for (k, a) in atoms.iter().enumerate() {
            if mass[k] <= 0.0 {
                continue;
            }
            let mut v = 0.0;
            for (j, b) in atoms.iter().enumerate() {
                if mass[j] <= 0.0 || f.at(b) == 0.0 {
                    continue;
                }
                v += f.at(b) * self.cylinder_prob(t, a, b)?;
            }
            values.insert(a.clone(), v);
        }
        Ok(SimpleFn { level: f.level, values })
    }

    /// Rate of the exponential exit time from `Cⁿ(ray)`.
    pub fn exit_rate(&self, n: usize, ray: &[u32]) -> Result<f64> {
        if ray.len() < n {
            return Err(domain(MODULE, format!("ray {} shorter than level {n}", path_string(ray))));
        }
        let g = self.ladder(ray, n)?;
        let mut s = if g[0].is_infinite() { 0.0 } else { 1.0 / g[0] };
        for k in 1..=n {
            s += (1.0 / self.mass(&ray[..k])? - 1.0 / self.mass(&ray[..k - 1])?) / g[k];
        }
        Ok(self.mass(&ray[..n])? * s)
    }

    /// Kernel of the process restricted to the subtree of `ξ(1)` against its
    /// expression through `p`; both sides are returned.
    pub fn subtree_kernel_identity(&self, t: f64, xi: &[u32], eta: &[u32]) -> Result<(f64, f64)> {
        let m = Self::meet(xi, eta)?;
        if m == 0 {
            return Err(domain(MODULE, "rays must share their first step"));
        }
        let g = self.ladder(xi, m + 1)?;
        let sub = self.mass(&xi[..1])?;
        let mut bar = 0.0;
        for n in 0..m {
            bar += (decay(t, g[n + 1]) - decay(t, g[n + 2])) / (self.mass(&xi[..n + 1])? / sub);
        }
        let rhs = sub * (self.p(t, xi, eta)? - (decay(t, g[0]) - decay(t, g[1])));
        Ok((bar, rhs))
    }
}

/// `(Θ₁, Θ₀, B)` built from `Γ₀ ~ exp[λ₀]`, a fresh `Γ₀' ~ exp[λ₀]` and `Z₁ ~ exp[λ₁ - λ₀]`.
pub fn exp_split_from<R: Rng>(gamma0: f64, lambda0: f64, lambda1: f64, rng: &mut R) -> Result<(f64, f64, bool)> {
    if !(0.0 < lambda0 && lambda0 < lambda1) {
        return Err(domain(MODULE, format!("need 0 < λ0 < λ1, got {lambda0} and {lambda1}")));
    }
    let gamma0p: f64 = Exp1.sample(rng);
    let z1: f64 = Exp1.sample(rng);
    let (gamma0p, z1) = (gamma0p / lambda0, z1 / (lambda1 - lambda0));
    Ok(if z1 >= gamma0 { (gamma0, gamma0p, false) } else { (z1, gamma0 - z1, true) })
}

/// Draws `Γ₀ ~ exp[λ₀]` and splits it; returns `Γ₀` and the split.
pub fn exp_split<R: Rng>(lambda0: f64, lambda1: f64, rng: &mut R) -> Result<(f64, (f64, f64, bool))> {
    if !(0.0 < lambda0 && lambda0 < lambda1) {
        return Err(domain(MODULE, format!("need 0 < λ0 < λ1, got {lambda0} and {lambda1}")));
    }
    let g: f64 = Exp1.sample(rng);
    let g = g / lambda0;
    Ok((g, exp_split_from(g, lambda0, lambda1, rng)?))
}

/// `Γ₀ = Θ₁ + B Θ₀`.
pub fn exp_merge(theta1: f64, theta0: f64, b: bool) -> f64 {
    if b {
        theta1 + theta0
    } else {
        theta1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStatus {
    Killed,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub start: f64,
    pub ray: Vec<u32>,
}

/// Piecewise-constant path at cylinder resolution. Restarts landing in the
/// current cylinder do not open a new segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryPath {
    pub segments: Vec<Segment>,
    /// Killing time, or the horizon.
    pub end: f64,
    pub status: PathStatus,
    /// Times at which the whole process restarted from `μ` (level-0 renewals).
    pub renewals: Vec<f64>,
    /// Number of level-`N` lifetimes drawn.
    pub events: usize,
    pub seed: u64,
    pub index: u64,
}

impl BoundaryPath {
    /// Cylinder occupied at time `t`, `None` once killed or past the horizon.
    pub fn at(&self, t: f64) -> Option<&[u32]> {
        if t >= self.end || t < 0.0 {
            return None;
        }
        let k = self.segments.partition_point(|s| s.start <= t);
        Some(&self.segments[k - 1].ray)
    }

    /// First time the level-`n` prefix changes or the path dies; `None` if neither happens before the horizon.
    pub fn exit_time(&self, n: usize) -> Option<f64> {
        let first = &self.segments[0].ray[..n];
        for s in &self.segments[1..] {
            if s.ray[..n] != *first {
                return Some(s.start);
            }
        }
        match self.status {
            PathStatus::Killed => Some(self.end),
            PathStatus::Horizon => None,
        }
    }

    /// Smallest positive holding time between recorded jumps.
    pub fn min_holding(&self) -> Option<f64> {
        self.segments.windows(2).map(|w| w[1].start - w[0].start).reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    Ray(Vec<u32>),
    /// Initial point drawn from `μ`.
    Mu,
}

/// Cascade sampler at a fixed resolution.
#[derive(Debug, Clone)]
pub struct Cascade {
    kernel: BoundaryKernel,
    pub resolution: usize,
    /// Cumulative child masses per realized node (by node id).
    cum: Vec<Vec<f64>>,
    /// `G_0..G_N` per atom node id.
    ladders: HashMap<usize, Vec<f64>>,
}

impl Cascade {
    pub fn new(kernel: BoundaryKernel, resolution: usize) -> Result<Self> {
        let mu = kernel.measure();
        if resolution > mu.resolution {
            return Err(Error::new(
                ErrorKind::Unrealized,
                MODULE,
                format!("resolution {resolution} beyond the measure resolution {}", mu.resolution),
            ));
        }
        let tree = mu.tree();
        let mut cum = vec![Vec::new(); tree.len()];
        let mut ladders = HashMap::new();
        for id in tree.ids() {
            let l = tree.level(id);
            if l < resolution {
                let mut acc = 0.0;
                for &c in tree.children(id) {
                    acc += mu.mass_mid(tree.path(c))?;
                    cum[id.0].push(acc);
                }
            } else if l == resolution && mu.mass_mid(tree.path(id))? > 0.0 {
                ladders.insert(id.0, kernel.ladder(tree.path(id), resolution)?);
            }
        }
        Ok(Cascade { kernel, resolution, cum, ladders })
    }

    pub fn kernel(&self) -> &BoundaryKernel {
        &self.kernel
    }

    /// Atom below `node` drawn from `μ(· | C(node))`.
    fn descend<R: Rng>(&self, mut node: NodeId, rng: &mut R) -> NodeId {
        let tree = self.kernel.measure().tree();
        while tree.level(node) < self.resolution {
            let cum = &self.cum[node.0];
            let total = *cum.last().expect("interior node");
            let u = rng.random::<f64>() * total;
            let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            // skip null children that share the cumulative value
            let k = (k..cum.len()).find(|&j| cum[j] > if j == 0 { 0.0 } else { cum[j - 1] }).unwrap_or(k);
            node = tree.children(node)[k];
        }
        node
    }

    fn start_atom<R: Rng>(&self, start: &Start, rng: &mut R) -> Result<NodeId> {
        let tree = self.kernel.measure().tree();
        match start {
            Start::Mu => Ok(self.descend(tree.root(), rng)),
            Start::Ray(ray) => {
                let shape = &self.kernel.measure().model().shape;
                let full = crate::tree::BoundaryRay::new(ray.clone()).extended(shape, self.resolution)?;
                let p = &full.prefix()[..self.resolution];
                let id = tree.node_at(p).ok_or_else(|| domain(MODULE, format!("ray {} not realized", path_string(p))))?;
                if !self.ladders.contains_key(&id.0) {
                    return Err(zero_mass(p));
                }
                Ok(id)
            }
        }
    }

    /// One path, exact in law at the cascade resolution.
    pub fn simulate(&self, start: &Start, horizon: f64, seed: u64, index: u64) -> Result<BoundaryPath> {
        let mut rng = path_rng(seed, index);
        let tree = self.kernel.measure().tree();
        let n = self.resolution;
        let mut cur = self.start_atom(start, &mut rng)?;
        let mut t = 0.0;
        let mut segments = vec![Segment { start: 0.0, ray: tree.path(cur).to_vec() }];
        let mut renewals = Vec::new();
        let mut events = 0;
        loop {
            let g = &self.ladders[&cur.0];
            let hold: f64 = Exp1.sample(&mut rng);
            t += hold * g[n];
            events += 1;
            if t >= horizon {
                return Ok(BoundaryPath { segments, end: horizon, status: PathStatus::Horizon, renewals, events, seed, index });
            }
            if events > MAX_EVENTS {
                return Err(Error::new(ErrorKind::Numeric, MODULE, "event cap reached before the horizon"));
            }
            // Bernoulli ladder B_N, ..., B_1 with P{B_k = 1} = 1 - G_k / G_{k-1}
            let mut restart = None;
            for k in (1..=n).rev() {
                let q = if g[k - 1].is_infinite() { 1.0 } else { 1.0 - g[k] / g[k - 1] };
                if rng.random::<f64>() < q {
                    restart = Some(k - 1);
                    break;
                }
            }
            let Some(level) = restart else {
                return Ok(BoundaryPath { segments, end: t, status: PathStatus::Killed, renewals, events, seed, index });
            };
            if level == 0 {
                renewals.push(t);
            }
            let mut anc = cur;
            while tree.level(anc) > level {
                anc = tree.parent(anc).expect("non-root");
            }
            let next = self.descend(anc, &mut rng);
            if next != cur {
                segments.push(Segment { start: t, ray: tree.path(next).to_vec() });
                cur = next;
            }
        }
    }

    pub fn simulate_many(&self, start: &Start, horizon: f64, seed: u64, paths: usize) -> Result<Vec<BoundaryPath>> {
        (0..paths as u64).into_par_iter().map(|i| self.simulate(start, horizon, seed, i)).collect()
    }
}

/// Absorbed-mode simulation from `ξ`.
pub fn simulate_boundary(c: &Cascade, xi: &[u32], horizon: f64, seed: u64, index: u64) -> Result<BoundaryPath> {
    if c.kernel.mode() != RootMode::Absorbed {
        return Err(domain(MODULE, "simulate_boundary needs the absorbed kernel"));
    }
    c.simulate(&Start::Ray(xi.to_vec()), horizon, seed, index)
}

/// Conservative simulation: renewals from `μ` at `exp[1/G_1]` gaps between level-1 cascades.
pub fn simulate_boundary_reflected(c: &Cascade, xi: &[u32], horizon: f64, seed: u64, index: u64) -> Result<BoundaryPath> {
    if c.kernel.mode() != RootMode::Reflected {
        return Err(domain(MODULE, "simulate_boundary_reflected needs the reflected kernel"));
    }
    if !horizon.is_finite() {
        return Err(domain(MODULE, "the reflected process never dies; give a finite horizon"));
    }
    c.simulate(&Start::Ray(xi.to_vec()), horizon, seed, index)
}

/// Per-cylinder occupation at time `t` among `paths`.
pub fn occupation(paths: &[BoundaryPath], t: f64, level: usize) -> BTreeMap<Vec<u32>, usize> {
    let mut out = BTreeMap::new();
    for p in paths {
        if let Some(r) = p.at(t) {
            *out.entry(r[..level].to_vec()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::measure_for;
    use crate::stats::{binomial_z, ks_critical, ks_statistic, mean_sd};
    use crate::tree::TreeSpec;
    use crate::weights::WeightSequence;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn homog(p: usize, mode: RootMode, res: usize) -> BoundaryKernel {
        let (shape, _) = TreeSpec::homogeneous(p).shape().unwrap();
        let mu = measure_for(Arc::new(shape), WeightSequence::linear(), mode, res).unwrap();
        BoundaryKernel::new(Arc::new(mu))
    }

    #[test]
    fn homogeneous_kernel_values() {
        let k = homog(2, RootMode::Absorbed, 5);
        for t in [0.1, 0.7, 3.0] {
            let a = k.p(t, &[0, 0], &[1, 0]).unwrap();
            let want = (-0.6 * t).exp() - (-1.5 * t).exp();
            assert!((a - want).abs() < 1e-12);
            let b = k.p(t, &[0, 0], &[0, 1]).unwrap();
            let want = want + 3.0 * ((-1.5 * t).exp() - (-3.0 * t).exp());
            assert!((b - want).abs() < 1e-12);
            assert_eq!(k.p(t, &[0, 0], &[0, 1]).unwrap(), k.p(t, &[0, 1], &[0, 0]).unwrap());
        }
        assert!(k.p(1e-9, &[0, 0], &[0, 1]).unwrap() < 1e-7);
        assert_eq!(k.p(0.0, &[0], &[1]).unwrap_err().kind, ErrorKind::Domain);
        assert_eq!(k.p(1.0, &[0], &[0]).unwrap_err().kind, ErrorKind::Domain);
    }

    #[test]
    fn green_identity_two_routes() {
        let k = homog(2, RootMode::Absorbed, 5);
        assert!((k.green(&[0, 0], &[1, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((k.green(&[0, 0], &[0, 1]).unwrap() - 2.0).abs() < 1e-12);
        for (x, y) in [(vec![0, 0, 1], vec![0, 0, 0]), (vec![2, 1, 0, 1], vec![2, 1, 0, 0]), (vec![1], vec![2])] {
            assert!(k.green_residual(&x, &y).unwrap() < 1e-10);
            let q = k.green_quadrature(&x, &y).unwrap();
            assert!((q - k.green(&x, &y).unwrap()).abs() < 1e-8, "{q}");
        }
        let r = homog(2, RootMode::Reflected, 3);
        assert_eq!(r.green(&[0], &[1]).unwrap_err().kind, ErrorKind::Domain);
    }

    #[test]
    fn total_mass_and_semigroup() {
        for mode in [RootMode::Absorbed, RootMode::Reflected] {
            let k = homog(2, mode, 4);
            let one = SimpleFn::constant(1.0).refine(k.measure(), 3).unwrap();
            for t in [0.0f64, 0.3, 2.0] {
                let want = if mode == RootMode::Absorbed { (-0.6 * t).exp() } else { 1.0 };
                assert!((k.total_mass(t).unwrap() - want).abs() < 1e-14);
                let pt = k.semigroup(t, &one).unwrap();
                assert!(pt.values.values().all(|v| (v - want).abs() < 1e-12));
                if t > 0.0 {
                    assert!((k.total_mass_by_atoms(t, &[1, 0, 1, 1], 3).unwrap() - want).abs() < 1e-12);
                }
            }
            let f = SimpleFn::indicator(&[0, 1]).refine(k.measure(), 3).unwrap();
            assert!(k.semigroup(0.0, &f).unwrap().max_abs_diff(&f, k.measure()).unwrap() < 1e-14);
            let a = k.semigroup(0.4, &f).unwrap();
            let b = k.semigroup_by_kernel(0.4, &f).unwrap();
            assert!(a.max_abs_diff(&b, k.measure()).unwrap() < 1e-10);
            let ab = k.semigroup(0.25, &k.semigroup(0.15, &f).unwrap()).unwrap();
            assert!(a.max_abs_diff(&ab, k.measure()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn exit_rates() {
        let k = homog(2, RootMode::Absorbed, 4);
        assert!((k.exit_rate(0, &[]).unwrap() - 0.6).abs() < 1e-14);
        let b1 = k.exit_rate(1, &[0]).unwrap();
        assert!((b1 - 1.2).abs() < 1e-12);
        assert!(0.6 < b1 && b1 < 1.5);
        let r = homog(2, RootMode::Reflected, 4);
        assert_eq!(r.exit_rate(0, &[]).unwrap(), 0.0);
        assert!((r.exit_rate(1, &[0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subtree_identity() {
        let k = homog(3, RootMode::Absorbed, 4);
        for t in [0.2, 1.0, 5.0] {
            let (l, r) = k.subtree_kernel_identity(t, &[1, 0, 2], &[1, 0, 1]).unwrap();
            assert!((l - r).abs() < 1e-10 * r.abs().max(1.0));
        }
    }

    #[test]
    fn split_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut ones = 0;
        let mut merged = Vec::with_capacity(n);
        for _ in 0..n {
            let (g, (t1, t0, b)) = exp_split(1.0, 2.0, &mut rng).unwrap();
            let back = exp_merge(t1, t0, b);
            assert!((back - g).abs() <= f64::EPSILON * g);
            ones += b as usize;
            merged.push(back);
        }
        assert!(binomial_z(ones, n, 0.5).abs() < 4.0);
        let (m, _) = mean_sd(&merged);
        assert!((m - 1.0).abs() < 0.01);
        let (_, (_, _, b)) = exp_split(1.0, 1e9, &mut rng).unwrap();
        assert!(b);
        assert_eq!(exp_split(2.0, 1.0, &mut rng).unwrap_err().kind, ErrorKind::Domain);
    }

    #[test]
    fn lifetime_and_exit_from_first_cylinder() {
        let k = homog(2, RootMode::Absorbed, 4);
        let c = Cascade::new(k, 3).unwrap();
        let paths = c.simulate_many(&Start::Ray(vec![0, 0, 0]), f64::INFINITY, 7, 20_000).unwrap();
        let life: Vec<f64> = paths.iter().map(|p| p.end).collect();
        let (m, _) = mean_sd(&life);
        let sd = (5.0 / 3.0) / (life.len() as f64).sqrt();
        assert!((m - 5.0 / 3.0).abs() < 4.0 * sd, "{m}");
        let exits: Vec<f64> = paths.iter().map(|p| p.exit_time(1).unwrap()).collect();
        let d = ks_statistic(&exits, |x| 1.0 - (-1.2 * x).exp());
        assert!(d < ks_critical(exits.len(), 0.01), "{d}");
    }

    #[test]
    fn replay_is_bitwise() {
        let c = Cascade::new(homog(3, RootMode::Absorbed, 3), 3).unwrap();
        let a = c.simulate(&Start::Mu, 10.0, 99, 5).unwrap();
        let b = c.simulate(&Start::Mu, 10.0, 99, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflected_paths_live_and_renew() {
        let c = Cascade::new(homog(2, RootMode::Reflected, 3), 3).unwrap();
        let horizon = 4.0;
        let paths: Vec<BoundaryPath> = (0..20_000)
            .map(|i| simulate_boundary_reflected(&c, &[1, 1, 1], horizon, 5, i).unwrap())
            .collect();
        assert!(paths.iter().all(|p| p.status == PathStatus::Horizon));
        let counts: Vec<f64> = paths.iter().map(|p| p.renewals.len() as f64).collect();
        let (m, _) = mean_sd(&counts);
        let want = horizon * 1.5;
        let sd = (want / counts.len() as f64).sqrt();
        assert!((m - want).abs() < 4.0 * sd, "{m}");
        assert!(simulate_boundary(&c, &[0], 1.0, 1, 1).is_err());
    }

    #[test]
    fn occupation_matches_kernel() {
        let k = homog(2, RootMode::Absorbed, 4);
        let c = Cascade::new(k.clone(), 3).unwrap();
        let xi = [0u32, 1, 0];
        let n = 20_000;
        let paths = c.simulate_many(&Start::Ray(xi.to_vec()), 1.0, 21, n).unwrap();
        let occ = occupation(&paths, 0.5, 1);
        for a in 0..3u32 {
            let p = k.cylinder_prob(0.5, &xi, &[a]).unwrap();
            let hits = occ.get(&vec![a]).copied().unwrap_or(0);
            assert!(binomial_z(hits, n, p).abs() < 4.0, "{a} {hits} {p}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kernel_is_ultrametric(a in prop::collection::vec(0u32..2, 4), b in prop::collection::vec(0u32..2, 4),
                                 c in prop::collection::vec(0u32..2, 4), r in (0u32..3, 0u32..3, 0u32..3), t in 0.01f64..10.0) {
            let k = homog(2, RootMode::Absorbed, 5);
            let mut x = vec![r.0]; x.extend(a); x.push(0);
            let mut y = vec![r.1]; y.extend(b); y.push(1);
            let mut z = vec![r.2]; z.extend(c);
            z.push(0);
            if x == y || y == z || x == z { return Ok(()); }
            let pxy = k.p(t, &x, &y).unwrap();
            let pxz = k.p(t, &x, &z).unwrap();
            let pzy = k.p(t, &z, &y).unwrap();
            prop_assert!(pxy >= pxz.min(pzy) * (1.0 - 1e-12));
            prop_assert!(pxy >= 0.0);
        }
    }
}
