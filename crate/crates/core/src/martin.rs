//! Martin kernels, harmonic functions written as U-integrals, and the level
//! measures of increasing harmonic functions.

use std::sync::Arc;

use serde::Serialize;

use crate::bracket::Bracket;
use crate::chain::{classify_transience, ChainModel, Classification, Transience};
use crate::error::{domain, Error, ErrorKind, Result};
use crate::matrix::RootMode;
use crate::measure::{apply_w_inverse_simple, conditional_u, ExitMeasure, SimpleFn};
use crate::tree::{meet_level, path_string, BoundaryRay, RootedTree, Shape};
use crate::walk::Walk;
use crate::weights::WeightSequence;

const MODULE: &str = "martin_harmonic";

/// Denominator below which the irregular-point formula is flagged.
pub const IRREGULAR_FLOOR: f64 = 1e-6;

/// Levels summed by the irregular-point series before giving up.
const IRREGULAR_LEVELS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    Absorbed,
    Reflected,
    AbsorbedIrregular,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelValue {
    pub value: f64,
    /// Half-width of the enclosure when one is available.
    pub error: f64,
    /// `absorbed`, `reflected`, `absorbed-irregular` or `recurrent`.
    pub tag: &'static str,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// `i ∧ ξ` as a node path.
fn meet_node(shape: &Shape, i: &[u32], ray: &BoundaryRay) -> Result<Vec<u32>> {
    let ray = ray.extended(shape, i.len())?;
    let l = meet_level(i, ray.prefix());
    Ok(i[..l].to_vec())
}

/// `κ(i, ξ) = P_i{T_{i∧ξ} < ∞} / P_r{T_{i∧ξ} < ∞}`. Valid in either root mode.
pub fn martin_ratio(walk: &Walk, i: &[u32], ray: &BoundaryRay) -> Result<Bracket> {
    let m = meet_node(walk.shape(), i, ray)?;
    let num = walk.hit(i, &m)?;
    let den = walk.hit(&[], &m)?;
    if !(den.lo > 0.0) {
        return Err(Error::new(ErrorKind::ZeroMass, MODULE, "meet node not reachable from the root"));
    }
    Ok(num.div(den))
}

/// Series route: `Σ_k G_k⁻¹ (𝔼(U_i·|ℱ_k) - 𝔼(U_i·|ℱ_{k-1}))(ξ)` up to `k = |i∧ξ|+1`,
/// divided by the escape probability (absorbed), or started at `k = 1` with
/// leading term 1 (reflected).
pub fn martin_series(mu: &ExitMeasure, i: &[u32], ray: &BoundaryRay) -> Result<f64> {
    let shape = mu.model().shape.clone();
    let l = meet_node(&shape, i, ray)?.len();
    let ray = ray.extended(&shape, l + 1)?;
    let mut prev = 0.0;
    let mut s = 0.0;
    for k in 0..=l + 1 {
        let e = conditional_u(mu, i, &ray, k)?.mid();
        let g = mu.g(ray.prefix(), k)?.mid();
        if !(mu.mode() == RootMode::Reflected && k == 0) {
            s += (e - prev) / g;
        }
        prev = e;
    }
    Ok(match mu.mode() {
        RootMode::Absorbed => s / mu.escape.mid(),
        RootMode::Reflected => 1.0 + s,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IrregularKernel {
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Levels summed term by term.
    pub levels: usize,
    /// Geometric extrapolation added for the remaining levels (numerator, denominator).
    pub tail: (f64, f64),
    /// The extrapolated tail is below `1e-12` of the result.
    pub converged: bool,
    /// Set when the denominator is under the floor or the tail is extrapolated
    /// rather than summed in closed form.
    pub flagged: bool,
}

/// `(U_iξ - ∫U_ηξ P_i{X_ζ∈dη}) / (w_0 - ∫U_ηξ P_r{X_ζ∈dη})`, each integral summed
/// as `Σ_k Δ_k P{X_ζ ∈ C^k(ξ)}`. Terms are summed while representable; the rest is
/// extrapolated from the observed term ratio.
pub fn martin_irregular(walk: &Walk, i: &[u32], ray: &BoundaryRay) -> Result<IrregularKernel> {
    if walk.mode() != RootMode::Absorbed {
        return Err(domain(MODULE, "irregular-point kernel is defined for the absorbed chain"));
    }
    let shape = walk.shape().clone();
    let w = walk.weights();
    let limit = IRREGULAR_LEVELS.min(walk.depth().saturating_sub(2));
    let ray = ray.extended(&shape, limit)?;
    let l = meet_level(i, ray.prefix());
    let mut num = w.w(l as i64);
    let mut den = w.w(0);
    let mut levels = 0;
    let mut prev: Option<(f64, f64)> = None;
    let mut ratios: Vec<(f64, f64)> = Vec::new();
    for k in 0..=limit {
        let c = ray.at(k)?;
        let pi = walk.exit_prob(i, c)?.mid();
        let pr = walk.exit_prob(&[], c)?.mid();
        let ti = w.delta(k) * pi;
        let tr = w.delta(k) * pr;
        let representable = ti.is_finite() && tr.is_finite() && pr > 1e-280 && (pi > 1e-280 || k <= l);
        if !representable {
            break;
        }
        num -= ti;
        den -= tr;
        levels = k + 1;
        if let Some((a, b)) = prev {
            ratios.push((ti / a, tr / b));
        }
        prev = Some((ti, tr));
        if ti == 0.0 && tr == 0.0 && k > l {
            break;
        }
    }
    // tail ≈ t·ρ/(1-ρ) once the last three ratios agree
    let mut tail = (0.0, 0.0);
    let mut converged = matches!(prev, Some((a, b)) if a == 0.0 && b == 0.0);
    if let (Some((ti, tr)), true) = (prev, ratios.len() >= 3) {
        let last = &ratios[ratios.len() - 3..];
        let steady = |f: fn(&(f64, f64)) -> f64| {
            let r = f(&last[2]);
            r.is_finite() && r >= 0.0 && r < 1.0 && last.iter().all(|x| (f(x) - r).abs() <= 1e-3 * r.max(1e-300))
        };
        let ri = ratios.last().unwrap().0;
        let rr = ratios.last().unwrap().1;
        let oki = ti == 0.0 || steady(|x| x.0);
        let okr = tr == 0.0 || steady(|x| x.1);
        if oki && okr {
            let ext = |t: f64, r: f64| if t == 0.0 { 0.0 } else { t * r / (1.0 - r) };
            tail = (ext(ti, ri), ext(tr, rr));
            num -= tail.0;
            den -= tail.1;
            converged = tail.0.abs() <= 1e-12 * num.abs().max(1e-300) && tail.1.abs() <= 1e-12 * den.abs().max(1e-300);
        }
    }
    let flagged = !converged || tail != (0.0, 0.0) || !(den.abs() >= IRREGULAR_FLOOR);
    Ok(IrregularKernel {
        value: num / den,
        numerator: num,
        denominator: den,
        levels,
        tail,
        converged,
        flagged,
    })
}

/// Shared state for repeated kernel evaluations on one model.
pub struct MartinContext {
    pub model: ChainModel,
    pub class: Classification,
    walk: Walk,
    mu: Option<ExitMeasure>,
}

impl MartinContext {
    pub fn new(model: &ChainModel, resolution: usize, schedule: &[usize], tol: f64) -> Result<Self> {
        let class = classify_transience(model, schedule, tol)?;
        let (walk, mu) = if class.verdict == Transience::Recurrent {
            (model.walk(*schedule.last().unwrap_or(&64))?, None)
        } else {
            let mu = crate::measure::exit_measure(model, resolution, schedule, tol)?;
            (mu.walk().clone(), Some(mu))
        };
        Ok(MartinContext {
            model: model.clone(),
            class,
            walk,
            mu,
        })
    }

    pub fn measure(&self) -> Option<&ExitMeasure> {
        self.mu.as_ref()
    }

    /// Kernel by the cheap ratio route (irregular mode uses its own formula).
    pub fn kernel(&self, i: &[u32], ray: &BoundaryRay, mode: KernelMode) -> Result<KernelValue> {
        if self.class.verdict == Transience::Recurrent {
            let ray = ray.extended(&self.model.shape, i.len())?;
            let w = &self.model.w;
            return Ok(KernelValue {
                value: w.w(meet_level(i, ray.prefix()) as i64) / w.w(0),
                error: 0.0,
                tag: "recurrent",
                flagged: false,
                note: Some("recurrent chain: U/w_0".into()),
            });
        }
        let want = match mode {
            KernelMode::Reflected => RootMode::Reflected,
            _ => RootMode::Absorbed,
        };
        if want != self.model.mode {
            return Err(domain(MODULE, "kernel mode does not match the model's root mode"));
        }
        match mode {
            KernelMode::Absorbed | KernelMode::Reflected => {
                let b = martin_ratio(&self.walk, i, ray)?;
                Ok(KernelValue {
                    value: b.mid(),
                    error: 0.5 * b.width(),
                    tag: if mode == KernelMode::Absorbed { "absorbed" } else { "reflected" },
                    flagged: false,
                    note: None,
                })
            }
            KernelMode::AbsorbedIrregular => {
                let k = martin_irregular(&self.walk, i, ray)?;
                Ok(KernelValue {
                    value: k.value,
                    error: f64::NAN,
                    tag: "absorbed-irregular",
                    flagged: k.flagged,
                    note: Some(format!("denominator {:e}, {} levels, converged {}", k.denominator, k.levels, k.converged)),
                })
            }
        }
    }

    /// Verification route through the G-process.
    pub fn kernel_series(&self, i: &[u32], ray: &BoundaryRay) -> Result<f64> {
        let mu = self
            .mu
            .as_ref()
            .ok_or_else(|| Error::new(ErrorKind::Recurrent, MODULE, "no exit measure for a recurrent chain"))?;
        martin_series(mu, i, ray)
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// `∫U W⁻¹φ dμ` for a simple φ.
    FromSimple { phi: SimpleFn },
    /// `∫U f dμ` for a simple density f.
    FromDensity { density: SimpleFn },
    /// `U_{·ξ}`.
    Column { ray: Vec<u32> },
    User,
}

type Eval = Arc<dyn Fn(&[u32]) -> Result<f64> + Send + Sync>;

/// A function on nodes claimed to be Q-harmonic; the claim is checked.
#[derive(Clone)]
pub struct HarmonicFn {
    eval: Eval,
    pub provenance: Provenance,
    pub mode: RootMode,
    shape: Arc<Shape>,
    w: WeightSequence,
}

impl std::fmt::Debug for HarmonicFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HarmonicFn").field("provenance", &self.provenance).field("mode", &self.mode).finish()
    }
}

impl HarmonicFn {
    pub fn user<F>(shape: Arc<Shape>, w: WeightSequence, mode: RootMode, f: F) -> Self
    where
        F: Fn(&[u32]) -> Result<f64> + Send + Sync + 'static,
    {
        HarmonicFn {
            eval: Arc::new(f),
            provenance: Provenance::User,
            mode,
            shape,
            w,
        }
    }

    /// `i ↦ U_{iξ}`.
    pub fn column(shape: Arc<Shape>, w: WeightSequence, ray: &BoundaryRay) -> Self {
        let sh = shape.clone();
        let ww = w.clone();
        let r = ray.clone();
        HarmonicFn {
            eval: Arc::new(move |i: &[u32]| {
                let ext = r.extended(&sh, i.len())?;
                Ok(ww.w(meet_level(i, ext.prefix()) as i64))
            }),
            provenance: Provenance::Column { ray: ray.prefix().to_vec() },
            mode: RootMode::Absorbed,
            shape,
            w,
        }
    }

    pub fn eval(&self, i: &[u32]) -> Result<f64> {
        (self.eval)(i)
    }

    /// `(Qh)(i)`; `h(∂_r) = 0`.
    pub fn residual(&self, i: &[u32]) -> Result<f64> {
        let l = i.len();
        let s = self.shape.shape_at(i)?;
        let k = self.shape.child_count(s, l);
        let hi = self.eval(i)?;
        let mut q = 0.0;
        if l > 0 {
            let up = 1.0 / self.w.delta(l);
            q += up * (self.eval(&i[..l - 1])? - hi);
        } else if self.mode == RootMode::Absorbed {
            q -= hi / self.w.delta(0);
        }
        if k > 0 {
            let down = 1.0 / self.w.delta(l + 1);
            let mut c = i.to_vec();
            c.push(0);
            for x in 0..k {
                c[l] = x as u32;
                q += down * (self.eval(&c)? - hi);
            }
        }
        Ok(q)
    }

    /// `max |Qh|` over all nodes of level `<= level`.
    pub fn max_residual(&self, level: usize) -> Result<f64> {
        let tree = window(&self.shape, level + 1);
        let mut worst = 0.0f64;
        for n in 0..=level {
            for &x in tree.level_nodes(n) {
                worst = worst.max(self.residual(tree.path(x))?.abs());
            }
        }
        Ok(worst)
    }

    /// Values on every realized node up to `level`.
    pub fn table(&self, level: usize) -> Result<Vec<(Vec<u32>, f64)>> {
        let tree = window(&self.shape, level);
        tree.ids().map(|x| Ok((tree.path(x).to_vec(), self.eval(tree.path(x))?))).collect()
    }
}

fn window(shape: &Arc<Shape>, depth: usize) -> RootedTree {
    let mut t = RootedTree::from_shape(shape.clone(), depth);
    t.extend_to(depth);
    t
}

/// `∫_{∂∞(a)} U_{iξ} μ(dξ)`.
fn cylinder_integral(mu: &ExitMeasure, i: &[u32], a: &[u32]) -> Result<f64> {
    let w = mu.weights();
    let inside = i.len() >= a.len() && &i[..a.len()] == a;
    if !inside {
        return Ok(w.w(meet_level(i, a) as i64) * mu.mass_mid(a)?);
    }
    let mut s = 0.0;
    for k in a.len()..=i.len() {
        let here = mu.mass_mid(&i[..k])?;
        let below = if k < i.len() { mu.mass_mid(&i[..k + 1])? } else { 0.0 };
        s += w.w(k as i64) * (here - below);
    }
    Ok(s)
}

/// `h(i) = ∫ U_{iξ} f(ξ) μ(dξ)` for a simple density `f`.
pub fn harmonic_from_density(mu: &ExitMeasure, f: &SimpleFn) -> Result<HarmonicFn> {
    if mu.mode() != RootMode::Absorbed {
        return Err(domain(MODULE, "U-integrals are harmonic for the absorbed chain only"));
    }
    let coeffs: Vec<(Vec<u32>, f64)> = f.values.iter().filter(|(_, &c)| c != 0.0).map(|(a, &c)| (a.clone(), c)).collect();
    let m = Arc::new(mu.clone());
    let mm = m.clone();
    let cs = coeffs.clone();
    Ok(HarmonicFn {
        eval: Arc::new(move |i: &[u32]| {
            let mut h = 0.0;
            for (a, c) in &cs {
                h += c * cylinder_integral(&mm, i, a)?;
            }
            Ok(h)
        }),
        provenance: Provenance::FromDensity { density: f.clone() },
        mode: RootMode::Absorbed,
        shape: m.model().shape.clone(),
        w: m.weights().clone(),
    })
}

/// Bounded harmonic function with boundary values φ: `∫ U (W⁻¹φ) dμ`.
pub fn harmonic_from_simple(mu: &ExitMeasure, phi: &SimpleFn) -> Result<HarmonicFn> {
    for (a, &v) in &phi.values {
        if v != 0.0 && !(mu.mass(a)?.hi > 0.0) {
            return Err(Error::new(ErrorKind::ZeroMass, MODULE, format!("φ is supported on the null atom {}", path_string(a))));
        }
    }
    let density = apply_w_inverse_simple(mu, phi, false)?;
    let mut h = harmonic_from_density(mu, &density)?;
    h.provenance = Provenance::FromSimple { phi: phi.clone() };
    Ok(h)
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelMeasure {
    /// `alpha[n]` lists `(j, α⁽ⁿ⁾(j))` over the level-n nodes.
    pub alpha: Vec<Vec<(Vec<u32>, f64)>>,
    /// `max_k |α⁽ⁿ⁾(k) - Σ_{S_k} α⁽ⁿ⁺¹⁾|` for each `n < max_level`.
    pub consistency: Vec<f64>,
    /// `s_n = Δ_n⁻¹ Σ |h(j) - h(j⁻)|`.
    pub variation: Vec<f64>,
    pub total_mass: f64,
    pub harmonic_residual: f64,
}

/// Finite-level signed measures `α⁽ⁿ⁾(j) = (h(j) - h(j⁻))/Δ_n`.
pub fn harmonic_limit_measure(h: &HarmonicFn, max_level: usize) -> Result<LevelMeasure> {
    let res = h.max_residual(max_level)?;
    let scale = h.eval(&[])?.abs().max(1.0);
    if res > 1e-10 * scale {
        return Err(Error::new(ErrorKind::Hypothesis, MODULE, format!("function is not harmonic: residual {res:e}")));
    }
    let tree = window(&h.shape, max_level);
    let mut alpha = Vec::new();
    let mut variation = Vec::new();
    for n in 0..=max_level {
        let d = h.w.delta(n);
        let mut row = Vec::new();
        let mut s = 0.0;
        for &x in tree.level_nodes(n) {
            let p = tree.path(x);
            let up = if n == 0 { 0.0 } else { h.eval(&p[..n - 1])? };
            let a = (h.eval(p)? - up) / d;
            s += a.abs();
            row.push((p.to_vec(), a));
        }
        alpha.push(row);
        variation.push(s);
    }
    let mut consistency = Vec::new();
    for n in 0..max_level {
        let mut worst = 0.0f64;
        for (j, a) in &alpha[n] {
            let s: f64 = alpha[n + 1].iter().filter(|(c, _)| c.starts_with(j)).map(|(_, v)| v).sum();
            worst = worst.max((a - s).abs());
        }
        consistency.push(worst);
    }
    let total_mass = alpha[0][0].1;
    Ok(LevelMeasure {
        alpha,
        consistency,
        variation,
        total_mass,
        harmonic_residual: res,
    })
}

/// `U_ij - V_ij - (∫U_ηj P_i{X_ζ∈dη} - V_ir)` in reflected mode.
pub fn reflected_identity_residual(walk: &Walk, i: &[u32], j: &[u32]) -> Result<f64> {
    if walk.mode() != RootMode::Reflected {
        return Err(domain(MODULE, "identity holds for the reflected chain"));
    }
    let w = walk.weights();
    let u = w.w(meet_level(i, j) as i64);
    let v = walk.potential(i, j)?.mid();
    let mut integral = 0.0;
    for k in 0..=j.len() {
        integral += w.delta(k) * walk.exit_prob(i, &j[..k])?.mid();
    }
    Ok(u - v - (integral - walk.potential(i, &[])?.mid()))
}

/// Right side of `U_ij - V_ij = ∫(U_ηj + U_iξ - U_ηξ) P_i{X_ζ∈dη}` for a regular ray.
/// The part beyond `|i∧ξ|` is `κ(i,ξ) G_{|i∧ξ|+1}(ξ)`.
pub fn reflected_integral(mu: &ExitMeasure, i: &[u32], j: &[u32], ray: &BoundaryRay) -> Result<f64> {
    if mu.mode() != RootMode::Reflected {
        return Err(domain(MODULE, "identity holds for the reflected chain"));
    }
    let walk = mu.walk();
    let w = mu.weights();
    let shape = mu.model().shape.clone();
    let mut s = 0.0;
    for k in 0..=j.len() {
        s += w.delta(k) * walk.exit_prob(i, &j[..k])?.mid();
    }
    let l = meet_node(&shape, i, ray)?.len();
    let ray = ray.extended(&shape, l + 1)?;
    s += w.w(l as i64);
    for k in 0..=l {
        s -= w.delta(k) * walk.exit_prob(i, ray.at(k)?)?.mid();
    }
    let kappa = martin_ratio(walk, i, &ray)?.mid();
    s -= kappa * mu.g(ray.prefix(), l + 1)?.mid();
    Ok(s)
}
