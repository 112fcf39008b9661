//! Exit measure on cylinders, the G-process, the operator `W`, its inverse on
//! simple functions, and the Dirichlet form.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use crate::bracket::Bracket;
use crate::chain::{classify_transience, ChainModel, Transience};
use crate::error::{domain, Error, ErrorKind, Result};
use crate::matrix::RootMode;
use crate::tree::{meet_level, path_string, BoundaryRay, RootedTree, ShapeNode};
use crate::walk::Walk;
use crate::weights::WeightSequence;

const MODULE: &str = "boundary_measure";

/// How far past `n` the G-series may look for a uniform subtree.
const TAIL_SEARCH: usize = 256;

/// `μ(∂∞(i))` for every node up to `resolution`, with enclosures.
#[derive(Debug, Clone)]
pub struct ExitMeasure {
    model: ChainModel,
    walk: Walk,
    tree: RootedTree,
    mass: Vec<Bracket>,
    pub resolution: usize,
    /// `P_r{X_ζ ∈ ∂∞}`.
    pub escape: Bracket,
    /// Truncation depth of the accepted solve.
    pub depth: usize,
    pub converged: bool,
}

pub fn exit_measure(model: &ChainModel, resolution: usize, schedule: &[usize], tol: f64) -> Result<ExitMeasure> {
    let class = classify_transience(model, schedule, tol)?;
    if class.verdict == Transience::Recurrent {
        return Err(Error::new(ErrorKind::Recurrent, MODULE, "exit measure undefined: the chain is recurrent"));
    }
    let mut tree = RootedTree::from_shape(model.shape.clone(), resolution);
    tree.extend_to(resolution);
    let mut last = None;
    for &m in schedule {
        let walk = model.walk(m.max(resolution + 1))?;
        let escape = walk.escape_root();
        if !(escape.lo > 0.0) {
            continue;
        }
        let mut mass = Vec::with_capacity(tree.len());
        for i in tree.ids() {
            mass.push(walk.mass(tree.path(i))?);
        }
        let width = mass.iter().map(|b| b.width()).fold(0.0, f64::max);
        let mu = ExitMeasure {
            model: model.clone(),
            walk,
            tree: tree.clone(),
            mass,
            resolution,
            escape,
            depth: m,
            converged: width <= tol,
        };
        if mu.converged {
            return Ok(mu);
        }
        last = Some(mu);
    }
    last.ok_or_else(|| {
        Error::new(ErrorKind::Recurrent, MODULE, "exit measure undefined: escape probability not certified positive")
    })
}

impl ExitMeasure {
    pub fn mode(&self) -> RootMode {
        self.model.mode
    }

    pub fn model(&self) -> &ChainModel {
        &self.model
    }

    pub fn walk(&self) -> &Walk {
        &self.walk
    }

    pub fn tree(&self) -> &RootedTree {
        &self.tree
    }

    pub fn weights(&self) -> &WeightSequence {
        &self.model.w
    }

    /// Mass of any cylinder; deeper than the resolution it is solved on demand.
    pub fn mass(&self, path: &[u32]) -> Result<Bracket> {
        if path.len() <= self.resolution {
            if let Some(i) = self.tree.node_at(path) {
                return Ok(self.mass[i.0]);
            }
        }
        self.walk.mass(path)
    }

    pub fn mass_mid(&self, path: &[u32]) -> Result<f64> {
        Ok(self.mass(path)?.mid())
    }

    /// Node paths of the level-`n` atoms.
    pub fn atoms(&self, n: usize) -> Result<Vec<Vec<u32>>> {
        if n > self.resolution {
            return Err(Error::new(
                ErrorKind::Unrealized,
                MODULE,
                format!("level {n} beyond measure resolution {}", self.resolution),
            ));
        }
        Ok(self.tree.level_nodes(n).iter().map(|&i| self.tree.path(i).to_vec()).collect())
    }

    pub fn max_width(&self) -> f64 {
        self.mass.iter().map(|b| b.width()).fold(0.0, f64::max)
    }

    /// `max_i |μ(i) - Σ_{S_i} μ(j)|` over nodes above the resolution.
    pub fn additivity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in self.tree.ids() {
            if self.tree.level(i) >= self.resolution {
                continue;
            }
            let s: f64 = self.tree.children(i).iter().map(|c| self.mass[c.0].mid()).sum();
            worst = worst.max((self.mass[i.0].mid() - s).abs());
        }
        worst
    }

    /// `{node-path: [mass, error]}`
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        for i in self.tree.ids() {
            let b = self.mass[i.0];
            m.insert(path_string(self.tree.path(i)), json!([b.mid(), 0.5 * b.width()]));
        }
        json!({
            "mode": self.model.mode,
            "resolution": self.resolution,
            "depth": self.depth,
            "converged": self.converged,
            "escape_probability": [self.escape.mid(), 0.5 * self.escape.width()],
            "masses": m,
        })
    }

    /// Maximal cylinders whose mass is certified to be zero.
    pub fn inaccessible_components(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        for i in self.tree.ids() {
            if self.mass[i.0].hi == 0.0 {
                let parent_positive = self.tree.parent(i).map_or(true, |p| self.mass[p.0].hi > 0.0);
                if parent_positive {
                    out.push(self.tree.path(i).to_vec());
                }
            }
        }
        out
    }

    /// `G_n` along the ray (see [`g_process`]).
    pub fn g(&self, ray: &[u32], n: usize) -> Result<Bracket> {
        g_series(self, ray, n)
    }

    /// `G_n` midpoint, zero on null cylinders (used inside products with the mass).
    fn g_or_zero(&self, ray: &[u32], n: usize) -> Result<f64> {
        match g_series(self, ray, n) {
            Ok(b) => Ok(b.mid()),
            Err(e) if e.kind == ErrorKind::ZeroMass => Ok(0.0),
            Err(e) => Err(e),
        }
    }
}

/// `G_n(η) = Σ_{k≥n} Δ_k μ(C^k(η))`. The remainder is summed in closed form once
/// the ray enters a uniform subtree.
pub fn g_process(mu: &ExitMeasure, ray: &BoundaryRay, n: usize) -> Result<Bracket> {
    g_series(mu, ray.prefix(), n)
}

fn g_series(mu: &ExitMeasure, ray: &[u32], n: usize) -> Result<Bracket> {
    let shape = mu.model.shape.clone();
    let base = BoundaryRay::new(ray.to_vec()).extended(&shape, n)?;
    let at_n = mu.mass(base.at(n)?)?;
    if at_n.hi == 0.0 {
        return Err(Error::new(ErrorKind::ZeroMass, MODULE, format!("G undefined on the null cylinder {}", path_string(base.at(n)?))));
    }
    let long = base.extended(&shape, n + TAIL_SEARCH)?;
    let shapes = shape.shapes_along(long.prefix())?;
    let w = &mu.model.w;
    let mut acc = Bracket::point(0.0);
    for k in n..=n + TAIL_SEARCH {
        let m = mu.mass(long.at(k)?)?;
        if let ShapeNode::Uniform(_) = shape.node(shapes[k]) {
            let t = mu.walk.uniform_series(shapes[k], k).unwrap();
            if t.hi.is_infinite() {
                return Err(Error::new(ErrorKind::UncertifiedTail, MODULE, "divergent G tail"));
            }
            return Ok(acc.add(m.scale(w.delta(k)).mul(t)));
        }
        acc = acc.add(m.scale(w.delta(k)));
    }
    Err(Error::new(
        ErrorKind::UncertifiedTail,
        MODULE,
        format!("no closed-form tail within {TAIL_SEARCH} levels of {n}"),
    )
    .with_context(json!({"partial_sum": [acc.lo, acc.hi]})))
}

/// Function on the boundary that is constant on the level-`level` atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimpleFn {
    pub level: usize,
    /// Values keyed by atom path; missing atoms are zero.
    pub values: BTreeMap<Vec<u32>, f64>,
}

impl SimpleFn {
    pub fn constant(c: f64) -> Self {
        SimpleFn {
            level: 0,
            values: BTreeMap::from([(Vec::new(), c)]),
        }
    }

    pub fn indicator(path: &[u32]) -> Self {
        SimpleFn {
            level: path.len(),
            values: BTreeMap::from([(path.to_vec(), 1.0)]),
        }
    }

    pub fn zero(level: usize) -> Self {
        SimpleFn {
            level,
            values: BTreeMap::new(),
        }
    }

    /// Value on the atom containing `path` (`path` at least `level` long).
    pub fn at(&self, path: &[u32]) -> f64 {
        self.values.get(&path[..self.level.min(path.len())]).copied().unwrap_or(0.0)
    }

    /// Same function written on the finer level `level`.
    pub fn refine(&self, mu: &ExitMeasure, level: usize) -> Result<SimpleFn> {
        if level < self.level {
            return Err(domain(MODULE, "cannot coarsen a simple function"));
        }
        let mut values = BTreeMap::new();
        for a in mu.atoms(level)? {
            let v = self.at(&a);
            if v != 0.0 {
                values.insert(a, v);
            }
        }
        Ok(SimpleFn { level, values })
    }

    pub fn max_abs_diff(&self, other: &SimpleFn, mu: &ExitMeasure) -> Result<f64> {
        let level = self.level.max(other.level);
        Ok(mu
            .atoms(level)?
            .iter()
            .map(|a| (self.at(a) - other.at(a)).abs())
            .fold(0.0, f64::max))
    }
}

/// `Σ_{b ⊂ C(x), |b| = level} f(b) μ(b)` for every node `x` of level `<= level`.
fn subtree_integrals(mu: &ExitMeasure, f: &SimpleFn) -> Result<BTreeMap<Vec<u32>, f64>> {
    let mut sums = BTreeMap::new();
    for a in mu.atoms(f.level)? {
        let v = f.at(&a) * mu.mass_mid(&a)?;
        for k in 0..=a.len() {
            *sums.entry(a[..k].to_vec()).or_insert(0.0) += v;
        }
    }
    Ok(sums)
}

/// `𝔼_μ(f | ℱ_n)` on the atom `a` (|a| >= n).
fn cond_exp(mu: &ExitMeasure, sums: &BTreeMap<Vec<u32>, f64>, f: &SimpleFn, a: &[u32], n: usize) -> Result<f64> {
    if n >= f.level {
        return Ok(f.at(a));
    }
    let node = &a[..n];
    let m = mu.mass_mid(node)?;
    if !(m > 0.0) {
        return Err(Error::new(ErrorKind::ZeroMass, MODULE, format!("zero-mass atom {}", path_string(node))));
    }
    Ok(sums.get(node).copied().unwrap_or(0.0) / m)
}

/// `𝔼_μ(U_{i·} | ℱ_k)` on the ray.
pub fn conditional_u(mu: &ExitMeasure, i: &[u32], ray: &BoundaryRay, k: usize) -> Result<Bracket> {
    if i.len().max(k) > mu.resolution {
        return Err(Error::new(ErrorKind::Unrealized, MODULE, "insufficient measure resolution"));
    }
    let ray = ray.extended(&mu.model.shape, k)?;
    let rk = ray.at(k)?;
    let w = &mu.model.w;
    let inside = i.len() >= k && &i[..k] == rk;
    if !inside {
        return Ok(Bracket::point(w.w(meet_level(i, rk) as i64)));
    }
    // group the level-|i| atoms of C^k by their meet level with i
    let norm = mu.mass(rk)?;
    if !(norm.lo > 0.0) {
        return Err(Error::new(ErrorKind::ZeroMass, MODULE, format!("zero-mass atom {}", path_string(rk))));
    }
    let mut v = 0.0;
    let mut err = 0.0;
    for l in k..=i.len() {
        let here = mu.mass(&i[..l])?;
        let below = if l < i.len() { mu.mass(&i[..l + 1])? } else { Bracket::point(0.0) };
        v += w.w(l as i64) * (here.mid() - below.mid());
        err += w.w(l as i64) * 0.5 * (here.width() + below.width());
    }
    let val = v / norm.mid();
    let err = err / norm.lo + val.abs() * norm.width() / norm.lo;
    Ok(Bracket::new(val - err, val + err))
}

/// `Wf = Σ_{k<m} Δ_k μ(C^k) 𝔼(f|ℱ_k) + G_m f` on the level-`m` atoms.
pub fn apply_w(mu: &ExitMeasure, f: &SimpleFn) -> Result<SimpleFn> {
    let w = &mu.model.w;
    let sums = subtree_integrals(mu, f)?;
    let mut values = BTreeMap::new();
    for a in mu.atoms(f.level)? {
        let mut v = 0.0;
        for k in 0..f.level {
            v += w.delta(k) * sums.get(&a[..k]).copied().unwrap_or(0.0);
        }
        let fa = f.at(&a);
        if fa != 0.0 {
            v += mu.g_or_zero(&a, f.level)? * fa;
        }
        values.insert(a, v);
    }
    Ok(SimpleFn { level: f.level, values })
}

/// `Wf = Σ_n G_n (𝔼(f|ℱ_n) - 𝔼(f|ℱ_{n-1}))`, the martingale-difference form.
pub fn apply_w_martingale(mu: &ExitMeasure, f: &SimpleFn) -> Result<SimpleFn> {
    let sums = subtree_integrals(mu, f)?;
    let mut values = BTreeMap::new();
    for a in mu.atoms(f.level)? {
        let mut v = 0.0;
        let mut prev = 0.0;
        for n in 0..=f.level {
            let e = cond_exp(mu, &sums, f, &a, n)?;
            v += mu.g(&a, n)?.mid() * (e - prev);
            prev = e;
        }
        values.insert(a, v);
    }
    Ok(SimpleFn { level: f.level, values })
}

/// `W⁻¹φ = Σ_{k≤n} G_k⁻¹ (𝔼(φ|ℱ_k) - 𝔼(φ|ℱ_{k-1}))`; with `conservative` the
/// `k = 0` term `G_0⁻¹ 𝔼_μ φ` is dropped.
pub fn apply_w_inverse_simple(mu: &ExitMeasure, phi: &SimpleFn, conservative: bool) -> Result<SimpleFn> {
    let sums = subtree_integrals(mu, phi)?;
    let mut values = BTreeMap::new();
    for a in mu.atoms(phi.level)? {
        let mut v = 0.0;
        let mut prev = 0.0;
        for k in 0..=phi.level {
            let e = cond_exp(mu, &sums, phi, &a, k)?;
            if !(conservative && k == 0) {
                v += (e - prev) / mu.g(&a, k)?.mid();
            }
            prev = e;
        }
        values.insert(a, v);
    }
    Ok(SimpleFn { level: phi.level, values })
}

/// `W⁻¹(ξ, η) = -Σ_{k=0}^{|ξ∧η|} Δ_k / (G_k G_{k+1})` for `ξ ≠ η`.
pub fn w_inverse_kernel(mu: &ExitMeasure, xi: &BoundaryRay, eta: &BoundaryRay) -> Result<f64> {
    let l = meet_level(xi.prefix(), eta.prefix());
    if l == xi.resolution().min(eta.resolution()) {
        return Err(domain(MODULE, "rays not separated at the given resolution"));
    }
    let w = &mu.model.w;
    let mut s = 0.0;
    for k in 0..=l {
        s -= w.delta(k) / (mu.g(eta.prefix(), k)?.mid() * mu.g(eta.prefix(), k + 1)?.mid());
    }
    Ok(s)
}

/// Jump kernel of the Dirichlet form, `Σ_{n≤|ξ∧η|} (1/G_{n+1} - 1/G_n)/μ(C^n)`.
pub fn dirichlet_h(mu: &ExitMeasure, xi: &[u32], eta: &[u32]) -> Result<f64> {
    let l = meet_level(xi, eta);
    if l == xi.len().min(eta.len()) {
        return Err(domain(MODULE, "H is defined off the diagonal only"));
    }
    let mut s = 0.0;
    for n in 0..=l {
        let m = mu.mass_mid(&eta[..n])?;
        s += (1.0 / mu.g(eta, n + 1)?.mid() - 1.0 / mu.g(eta, n)?.mid()) / m;
    }
    Ok(s)
}

/// `𝐄(f, g) = ∫ g W⁻¹f dμ`; reflected mode uses the conservative inverse.
pub fn dirichlet_form(mu: &ExitMeasure, f: &SimpleFn, g: &SimpleFn) -> Result<f64> {
    let level = f.level.max(g.level);
    let wf = apply_w_inverse_simple(mu, &f.refine(mu, level)?, mu.mode() == RootMode::Reflected)?;
    let mut s = 0.0;
    for a in mu.atoms(level)? {
        s += g.at(&a) * wf.at(&a) * mu.mass_mid(&a)?;
    }
    Ok(s)
}

/// Same form through the jump kernel `H` plus the killing term (absorbed mode).
pub fn dirichlet_form_beurling_deny(mu: &ExitMeasure, f: &SimpleFn, g: &SimpleFn) -> Result<f64> {
    let level = f.level.max(g.level);
    let atoms = mu.atoms(level)?;
    let masses: Vec<f64> = atoms.iter().map(|a| mu.mass_mid(a)).collect::<Result<_>>()?;
    let mut s = 0.0;
    for (x, a) in atoms.iter().enumerate() {
        for (y, b) in atoms.iter().enumerate() {
            if x == y || masses[x] == 0.0 || masses[y] == 0.0 {
                continue;
            }
            let df = f.at(a) - f.at(b);
            let dg = g.at(a) - g.at(b);
            if df == 0.0 || dg == 0.0 {
                continue;
            }
            s += 0.5 * df * dg * dirichlet_h(mu, a, b)? * masses[x] * masses[y];
        }
    }
    if mu.mode() == RootMode::Absorbed {
        let g0 = mu.g(&[], 0)?.mid();
        let kill: f64 = atoms.iter().zip(&masses).map(|(a, m)| f.at(a) * g.at(a) * m).sum();
        s += kill / g0;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Regular,
    Irregular,
    Undetermined,
}

#[derive(Debug, Clone, Serialize)]
pub struct RayReport {
    pub verdict: Regularity,
    /// `μ(C^n(ray)) > 0` certified for every tested `n`.
    pub accessible: bool,
    /// `(n, ḡ(ray(n)) bracket)`
    pub absorb: Vec<(usize, Bracket)>,
    pub masses: Vec<(usize, Bracket)>,
    /// Threshold a lower bound must keep to call the ray irregular.
    pub epsilon: f64,
}

/// Regular rays have `ḡ(ray(n)) → 0`; irregular ones keep it bounded away from 0.
pub fn ray_regularity(model: &ChainModel, ray: &BoundaryRay, depth: usize, tol: f64) -> Result<RayReport> {
    let model = model.with_mode(RootMode::Absorbed);
    let walk = model.walk(depth + 16)?;
    let ray = ray.extended(&model.shape, depth)?;
    let mut absorb = Vec::new();
    let mut masses = Vec::new();
    let mut accessible = true;
    for n in 0..=depth {
        let p = ray.at(n)?;
        absorb.push((n, walk.absorb(p)?));
        let m = walk.mass(p)?;
        accessible &= m.lo > 0.0;
        masses.push((n, m));
    }
    let epsilon = tol.sqrt().max(10.0 * tol);
    let last = absorb.last().unwrap().1;
    let tail_decreasing = absorb
        .windows(2)
        .rev()
        .take(4)
        .all(|w| w[1].1.hi <= w[0].1.hi);
    let verdict = if last.hi <= tol && tail_decreasing {
        Regularity::Regular
    } else if absorb.iter().all(|(_, b)| b.lo >= epsilon) {
        Regularity::Irregular
    } else {
        Regularity::Undetermined
    };
    Ok(RayReport {
        verdict,
        accessible,
        absorb,
        masses,
        epsilon,
    })
}

/// Convenience: the measure of a model with default tolerances.
pub fn measure_for(shape: Arc<crate::tree::Shape>, w: WeightSequence, mode: RootMode, resolution: usize) -> Result<ExitMeasure> {
    let model = ChainModel::new(shape, w, mode);
    exit_measure(&model, resolution, &crate::chain::default_schedule(), crate::chain::DEFAULT_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{Counts, Rule, Shape, TreeSpec};
    use proptest::prelude::*;

    fn homog(p: usize, mode: RootMode, res: usize) -> ExitMeasure {
        let (shape, _) = TreeSpec::homogeneous(p).shape().unwrap();
        measure_for(Arc::new(shape), WeightSequence::linear(), mode, res).unwrap()
    }

    fn asym(mode: RootMode, res: usize) -> ExitMeasure {
        let rule = Rule::Split(vec![Rule::Uniform(Counts::constant(2)), Rule::Uniform(Counts::constant(3))]);
        measure_for(Arc::new(Shape::from_rule(&rule)), WeightSequence::linear(), mode, res).unwrap()
    }

    #[test]
    fn homogeneous_masses_and_g() {
        for p in [2usize, 3] {
            for mode in [RootMode::Absorbed, RootMode::Reflected] {
                let mu = homog(p, mode, 4);
                assert!(mu.converged);
                for k in 1..=4 {
                    let want = 1.0 / ((p + 1) as f64 * (p as f64).powi(k as i32 - 1));
                    for a in mu.atoms(k).unwrap() {
                        assert!((mu.mass_mid(&a).unwrap() - want).abs() < 1e-12);
                    }
                }
                let ray = BoundaryRay::new(vec![1, 0, 1]);
                let pf = p as f64;
                for k in 1..6 {
                    let want = 1.0 / ((pf * pf - 1.0) * pf.powi(k as i32 - 2));
                    assert!((g_process(&mu, &ray, k).unwrap().mid() - want).abs() < 1e-12);
                }
            }
        }
        let a = homog(2, RootMode::Absorbed, 3);
        let r = homog(2, RootMode::Reflected, 3);
        let ray = BoundaryRay::new(vec![0]);
        let g0a = g_process(&a, &ray, 0).unwrap().mid();
        assert!((g0a - 5.0 / 3.0).abs() < 1e-12);
        assert!((g0a - 1.0 / a.escape.mid()).abs() < 1e-12);
        let vrr = r.walk().green_diag(&[]).unwrap().mid();
        assert!((g_process(&r, &ray, 0).unwrap().mid() - (vrr + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn g_is_predictable_and_decreasing() {
        let mu = asym(RootMode::Absorbed, 4);
        let g0 = g_process(&mu, &BoundaryRay::new(vec![]), 0).unwrap().mid();
        for a in mu.atoms(3).unwrap() {
            let mut prev = f64::INFINITY;
            let mut acc = 0.0;
            for n in 0..6 {
                let g = mu.g(&a, n).unwrap().mid();
                assert!(g < prev);
                // G_n = G_0 - Σ_{k<n} Δ_k μ(C^k)
                assert!((g - (g0 - acc)).abs() < 1e-12, "{a:?} {n}");
                let ext = BoundaryRay::new(a.clone()).extended(&mu.model().shape, n).unwrap();
                acc += mu.weights().delta(n) * mu.mass_mid(ext.at(n).unwrap()).unwrap();
                prev = g;
            }
        }
    }

    #[test]
    fn asymmetric_modes_agree() {
        let a = asym(RootMode::Absorbed, 3);
        let r = asym(RootMode::Reflected, 3);
        for x in a.atoms(3).unwrap() {
            assert!((a.mass_mid(&x).unwrap() - r.mass_mid(&x).unwrap()).abs() < 1e-12);
        }
        assert!(a.additivity_residual() < 1e-14);
        let s: f64 = a.atoms(1).unwrap().iter().map(|x| a.mass_mid(x).unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn conditional_u_examples() {
        let mu = homog(2, RootMode::Absorbed, 3);
        let ray = BoundaryRay::new(vec![1, 0]);
        assert!((conditional_u(&mu, &[1], &ray, 0).unwrap().mid() - 4.0 / 3.0).abs() < 1e-12);
        assert!((conditional_u(&mu, &[1], &ray, 1).unwrap().mid() - 2.0).abs() < 1e-12);
        for k in 0..3 {
            assert_eq!(conditional_u(&mu, &[], &ray, k).unwrap().mid(), 1.0);
        }
    }

    /// Brute force over all level-|i| nodes of the cylinder.
    fn conditional_u_oracle(mu: &ExitMeasure, i: &[u32], ray: &[u32], k: usize) -> f64 {
        let w = mu.weights();
        if !(i.len() >= k && i[..k] == ray[..k]) {
            return w.w(meet_level(i, &ray[..k]) as i64);
        }
        let mut num = 0.0;
        for j in mu.atoms(i.len()).unwrap() {
            if j[..k] == ray[..k] {
                num += w.w(meet_level(i, &j) as i64) * mu.mass_mid(&j).unwrap();
            }
        }
        num / mu.mass_mid(&ray[..k]).unwrap()
    }

    #[test]
    fn conditional_u_matches_brute_force() {
        let mu = asym(RootMode::Absorbed, 4);
        for i in mu.atoms(3).unwrap().iter().step_by(3) {
            for ray in mu.atoms(4).unwrap().iter().step_by(5) {
                for k in 0..=4 {
                    let fast = conditional_u(&mu, i, &BoundaryRay::new(ray.clone()), k).unwrap();
                    let slow = conditional_u_oracle(&mu, i, ray, k);
                    assert!((fast.mid() - slow).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn w_examples() {
        let mu = homog(2, RootMode::Absorbed, 4);
        let one = apply_w(&mu, &SimpleFn::constant(1.0)).unwrap();
        assert!((one.at(&[]) - 5.0 / 3.0).abs() < 1e-12);
        let f = SimpleFn::indicator(&[2]);
        let wf = apply_w(&mu, &f).unwrap();
        let total: f64 = mu.atoms(1).unwrap().iter().map(|a| wf.at(a) * mu.mass_mid(a).unwrap()).sum();
        assert!((total - 5.0 / 3.0 / 3.0).abs() < 1e-12);
        let z = apply_w(&mu, &SimpleFn::zero(2)).unwrap();
        assert!(z.values.values().all(|&v| v == 0.0));
        let inv = apply_w_inverse_simple(&mu, &SimpleFn::constant(1.0), false).unwrap();
        assert!((inv.at(&[]) - 0.6).abs() < 1e-12);
        let k = w_inverse_kernel(&mu, &BoundaryRay::new(vec![0, 1]), &BoundaryRay::new(vec![2, 0])).unwrap();
        assert!((k + 0.9).abs() < 1e-12);
        let c2 = SimpleFn::indicator(&[1, 0]);
        let back = apply_w(&mu, &apply_w_inverse_simple(&mu, &c2, false).unwrap()).unwrap();
        assert!(back.max_abs_diff(&c2, &mu).unwrap() < 1e-10);
    }

    #[test]
    fn dirichlet_examples() {
        let mu = homog(2, RootMode::Absorbed, 3);
        let c = SimpleFn::indicator(&[0]);
        let e = dirichlet_form(&mu, &c, &SimpleFn::constant(1.0)).unwrap();
        assert!((e - 0.2).abs() < 1e-12);
        let f = SimpleFn::indicator(&[0, 1]);
        let g = SimpleFn::indicator(&[2]);
        let direct = dirichlet_form(&mu, &f, &g).unwrap();
        let mut cross = 0.0;
        for a in mu.atoms(2).unwrap() {
            for b in mu.atoms(2).unwrap() {
                if f.at(&a) != 0.0 && g.at(&b) != 0.0 {
                    cross -= f.at(&a) * g.at(&b) * dirichlet_h(&mu, &a, &b).unwrap() * mu.mass_mid(&a).unwrap() * mu.mass_mid(&b).unwrap();
                }
            }
        }
        assert!((direct - cross).abs() < 1e-10);
        assert!((direct - dirichlet_form_beurling_deny(&mu, &f, &g).unwrap()).abs() < 1e-10);
        let r = homog(2, RootMode::Reflected, 3);
        assert!(dirichlet_form(&r, &SimpleFn::constant(1.0), &SimpleFn::constant(1.0)).unwrap().abs() < 1e-14);
    }

    #[test]
    fn homogeneous_rays_are_regular() {
        let (shape, _) = TreeSpec::homogeneous(2).shape().unwrap();
        let model = ChainModel::new(Arc::new(shape), WeightSequence::linear(), RootMode::Absorbed);
        for ray in [vec![0], vec![2, 1, 0, 1]] {
            let rep = ray_regularity(&model, &BoundaryRay::new(ray), 40, 1e-8).unwrap();
            assert_eq!(rep.verdict, Regularity::Regular);
            assert!(rep.accessible);
            for (n, b) in &rep.absorb[1..] {
                let want = 0.2 * 0.5f64.powi(*n as i32 - 1);
                assert!(b.contains(want, 1e-15));
            }
        }
    }

    #[test]
    fn recurrent_has_no_measure() {
        let shape = Shape::from_rule(&Rule::Uniform(Counts::constant(1)));
        let e = measure_for(Arc::new(shape), WeightSequence::linear(), RootMode::Absorbed, 2).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Recurrent);
    }

    #[test]
    fn inaccessible_subtree_and_potential_shift() {
        // binary subtree next to a recurrent single ray
        let rule = Rule::Split(vec![Rule::Uniform(Counts::constant(2)), Rule::Uniform(Counts::constant(1))]);
        let mu = measure_for(Arc::new(Shape::from_rule(&rule)), WeightSequence::linear(), RootMode::Absorbed, 3).unwrap();
        assert_eq!(mu.inaccessible_components(), vec![vec![1u32]]);
        let walk = mu.walk();
        let nodes: Vec<Vec<u32>> = (0..4).map(|k| { let mut p = vec![1u32]; p.extend(std::iter::repeat(0).take(k)); p }).collect();
        let w = mu.weights();
        let c = w.w(1) - walk.potential(&nodes[0], &nodes[0]).unwrap().mid();
        for i in &nodes {
            for j in &nodes {
                let v = walk.potential(i, j).unwrap();
                let u = w.w(meet_level(i, j) as i64);
                assert!(((u - v.mid()) - c).abs() <= v.width() + 1e-10);
            }
        }
    }

    #[test]
    fn martingale_identity_exact() {
        let mu = asym(RootMode::Absorbed, 4);
        for level in 0..=4 {
            let atoms = mu.atoms(level).unwrap();
            let mut f = SimpleFn::zero(level);
            for (k, a) in atoms.iter().enumerate() {
                f.values.insert(a.clone(), ((k * 7919) % 13) as f64 - 6.0);
            }
            let a = apply_w(&mu, &f).unwrap();
            let b = apply_w_martingale(&mu, &f).unwrap();
            assert!(a.max_abs_diff(&b, &mu).unwrap() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn potential_split(i in proptest::collection::vec(0u32..2, 0..4), j in proptest::collection::vec(0u32..2, 0..4)) {
            // U_ij - V_ij = Σ_{k≤|j|} Δ_k P_i{X_ζ ∈ ∂∞(j(k))}
            let rule = Rule::Split(vec![Rule::Uniform(Counts::constant(2)), Rule::Uniform(Counts::constant(3))]);
            let model = ChainModel::new(Arc::new(Shape::from_rule(&rule)), WeightSequence::linear(), RootMode::Absorbed);
            let walk = model.walk(24).unwrap();
            let w = &model.w;
            let v = walk.potential(&i, &j).unwrap();
            let mut s = Bracket::point(0.0);
            for k in 0..=j.len() {
                s = s.add(walk.exit_prob(&i, &j[..k]).unwrap().scale(w.delta(k)));
            }
            let u = w.w(meet_level(&i, &j) as i64);
            prop_assert!((u - v.mid() - s.mid()).abs() <= v.width() + s.width() + 1e-12);
        }

        #[test]
        fn round_trip_and_kernel(seed in 0usize..1000) {
            let mu = asym(RootMode::Absorbed, 3);
            let atoms = mu.atoms(3).unwrap();
            let mut phi = SimpleFn::zero(3);
            for (k, a) in atoms.iter().enumerate() {
                phi.values.insert(a.clone(), (((k + 1) * (seed + 3)) % 11) as f64);
            }
            let back = apply_w(&mu, &apply_w_inverse_simple(&mu, &phi, false).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&phi, &mu).unwrap() < 1e-10);
            let x = &atoms[seed % atoms.len()];
            let y = &atoms[(seed / 7 + 1) % atoms.len()];
            if x != y {
                let k = w_inverse_kernel(&mu, &BoundaryRay::new(x.clone()), &BoundaryRay::new(y.clone())).unwrap();
                let k2 = w_inverse_kernel(&mu, &BoundaryRay::new(y.clone()), &BoundaryRay::new(x.clone())).unwrap();
                prop_assert!(k < 0.0 && (k - k2).abs() < 1e-12);
                let h = dirichlet_h(&mu, x, y).unwrap();
                prop_assert!(h >= 0.0 && (h - dirichlet_h(&mu, y, x).unwrap()).abs() < 1e-12);
            }
        }
    }
}
