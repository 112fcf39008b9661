//! Escape and hitting probabilities of the nearest-neighbour chain on infinite trees.
//!
//! Two local quantities drive everything:
//!
//! * `q(x) = P_x{T_{x⁻} < ∞}`, a function of the subtree below `x` only:
//!   `q(x) = 1 / (1 + (Δ_l/Δ_{l+1}) Σ_{c ∈ S_x} (1 - q(c)))`, `l = |x|`;
//!   equivalently `q = R/(R + Δ_l)` with `R` the resistance from `x` to infinity.
//! * `d(y) = P_{y⁻}{T_y < ∞}`, computed top-down along a path:
//!   `d(y) = 1 / (1 + Σ_{c ≠ y}(1 - q(c)) + (Δ_{l+1}/Δ_l)(1 - d(y⁻)))`.
//!
//! `q` only depends on the node type `(ShapeId, level)`, so it is tabulated per
//! type down to a truncation level `m`. Below that, uniform subtrees are still
//! exact (their resistance is a one-dimensional series with a certified tail)
//! and every other type gets the enclosure `R ∈ [0, R_Rayleigh]`, where the
//! upper value cuts every self-repeating branch. All formulas are monotone in
//! each input, so brackets propagate endpoint by endpoint.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::bracket::Bracket;
use crate::error::{domain, Error, ErrorKind, Result};
use crate::matrix::RootMode;
use crate::tree::{meet_level, Counts, Shape, ShapeId, ShapeNode};
use crate::weights::WeightSequence;

const MODULE: &str = "chain_sim";

/// Iteration cap for the one-dimensional series of a uniform subtree.
const SERIES_CAP: usize = 2_000_000;

#[derive(Debug, Clone)]
pub struct Walk {
    shape: Arc<Shape>,
    w: WeightSequence,
    mode: RootMode,
    depth: usize,
    table: HashMap<(ShapeId, usize), Bracket>,
}

impl Walk {
    /// Tabulate `q` for every node type of level `1..=depth`.
    pub fn new(shape: Arc<Shape>, w: &WeightSequence, mode: RootMode, depth: usize) -> Result<Walk> {
        if shape.is_finite() {
            let fd = shape.finite_depth().unwrap_or(0);
            if !w.covers(fd) {
                return Err(domain(MODULE, format!("weights undefined at level {fd}")));
            }
        } else if w.ratio_form().is_none() {
            return Err(domain(MODULE, "infinite tree needs a weight tail rule"));
        }
        let mut walk = Walk {
            shape,
            w: w.clone(),
            mode,
            depth: depth.max(1),
            table: HashMap::new(),
        };
        let mut levels: Vec<BTreeSet<ShapeId>> = vec![BTreeSet::from([walk.shape.root()])];
        for l in 0..walk.depth {
            let mut next = BTreeSet::new();
            for &s in &levels[l] {
                for (c, _) in walk.groups(s, l) {
                    next.insert(c);
                }
            }
            if next.is_empty() {
                break;
            }
            levels.push(next);
        }
        for l in (1..levels.len()).rev() {
            for &s in &levels[l] {
                let q = if l >= walk.depth {
                    walk.q_beyond(s, l)
                } else if let Some(b) = walk.uniform_q(s, l) {
                    b
                } else {
                    walk.q_from_children(s, l)
                };
                walk.table.insert((s, l), q);
            }
        }
        Ok(walk)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn mode(&self) -> RootMode {
        self.mode
    }

    pub fn shape(&self) -> &Arc<Shape> {
        &self.shape
    }

    pub fn weights(&self) -> &WeightSequence {
        &self.w
    }

    /// Children of a type grouped by child type, with multiplicities.
    pub fn groups(&self, s: ShapeId, l: usize) -> Vec<(ShapeId, f64)> {
        match self.shape.node(s) {
            ShapeNode::Uniform(c) => {
                let n = c.at_f64(l);
                if n == 0.0 {
                    vec![]
                } else {
                    vec![(s, n)]
                }
            }
            ShapeNode::Split(v) | ShapeNode::Repeat(v) => v.iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    /// `q` for a node of type `(s, l)`, `l >= 1`.
    pub fn q_type(&self, s: ShapeId, l: usize) -> Bracket {
        if let Some(&b) = self.table.get(&(s, l)) {
            return b;
        }
        if let Some(b) = self.uniform_q(s, l) {
            return b;
        }
        if l >= self.depth {
            self.q_beyond(s, l)
        } else {
            self.q_from_children(s, l)
        }
    }

    /// Bounds on `Σ_{c ∈ S_x}(1 - q(c))` for `x` of type `(s, l)`.
    fn escape_sum(&self, s: ShapeId, l: usize) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (c, k) in self.groups(s, l) {
            let q = self.q_type(c, l + 1);
            lo += k * (1.0 - q.hi);
            hi += k * (1.0 - q.lo);
        }
        (lo, hi)
    }

    fn q_from_children(&self, s: ShapeId, l: usize) -> Bracket {
        let (lo, hi) = self.escape_sum(s, l);
        if hi == 0.0 {
            return Bracket::point(1.0);
        }
        let inv = 1.0 / self.w.ratio(l);
        Bracket::new(1.0 / (1.0 + inv * hi), 1.0 / (1.0 + inv * lo))
    }

    /// Enclosure below the truncation level.
    fn q_beyond(&self, s: ShapeId, l: usize) -> Bracket {
        if let Some(b) = self.uniform_q(s, l) {
            return b;
        }
        let r = self.rayleigh(s, l, s);
        let hi = if r.is_infinite() { 1.0 } else { r / (1.0 + r) };
        Bracket::new(0.0, hi)
    }

    /// Upper bound on `R_x / Δ_l` with every self-repeating branch cut.
    fn rayleigh(&self, s: ShapeId, l: usize, origin: ShapeId) -> f64 {
        if let Some(t) = self.uniform_series(s, l) {
            return t.hi - 1.0;
        }
        let mut conductance = 0.0;
        // a node repeating itself r times contains a regular r-ary subtree
        let repeats = match self.shape.node(s) {
            ShapeNode::Repeat(kids) => kids.iter().filter(|&&c| c == s).count(),
            _ => 0,
        };
        if repeats > 0 {
            let t = self.series_for(&Counts::constant(repeats), l + 1);
            if t.hi.is_finite() {
                conductance += repeats as f64 / t.hi;
            }
        }
        for (c, k) in self.groups(s, l) {
            if c == s || c == origin {
                continue;
            }
            let r = self.rayleigh(c, l + 1, origin);
            if r.is_finite() {
                conductance += k / (1.0 + r);
            }
        }
        if conductance == 0.0 {
            f64::INFINITY
        } else {
            self.w.ratio(l) / conductance
        }
    }

    fn uniform_q(&self, s: ShapeId, l: usize) -> Option<Bracket> {
        let t = self.uniform_series(s, l)?;
        let lo = if t.lo.is_infinite() { 1.0 } else { 1.0 - 1.0 / t.lo };
        let hi = if t.hi.is_infinite() { 1.0 } else { 1.0 - 1.0 / t.hi };
        Some(Bracket::new(lo, hi))
    }

    /// `T(l) = Σ_{j≥0} Π_{i<j} θ_{l+i}`, `θ_n = (Δ_{n+1}/Δ_n) / count(n)`, for a
    /// uniform type. `R_x/Δ_l = T(l) - 1` and `Σ_{k≥l} Δ_k μ(C^k) = Δ_l μ(C^l) T(l)`
    /// along any ray of the subtree. `None` for non-uniform types.
    pub fn uniform_series(&self, s: ShapeId, l: usize) -> Option<Bracket> {
        let counts = self.shape.counts(s)?;
        Some(self.series_for(counts, l))
    }

    fn series_for(&self, counts: &Counts, l: usize) -> Bracket {
        let (ws, _, bw) = self.w.ratio_form().unwrap_or((usize::MAX, 1.0, 1.0));
        let (cs, _, bc) = counts.geometric_form();
        let start = ws.max(cs).max(l);
        let beta = bw / bc;
        let mut sum = 0.0;
        let mut term = 1.0;
        let mut n = l;
        for _ in 0..SERIES_CAP {
            sum += term;
            let theta = self.w.ratio(n) / counts.at_f64(n);
            if n >= start {
                if beta <= 1.0 && theta < 1.0 {
                    let tail = term * theta / (1.0 - theta);
                    if tail <= 1e-17 * sum || term == 0.0 {
                        return Bracket::new(sum, sum + tail);
                    }
                } else if beta >= 1.0 && theta >= 1.0 {
                    return Bracket::point(f64::INFINITY);
                }
            }
            term *= theta;
            n += 1;
        }
        let theta = self.w.ratio(n) / counts.at_f64(n);
        let tail = if beta <= 1.0 && theta < 1.0 {
            term * theta / (1.0 - theta)
        } else {
            f64::INFINITY
        };
        Bracket::new(sum, sum + tail)
    }

    /// Shapes of the nodes along `path`, checked.
    pub fn shapes(&self, path: &[u32]) -> Result<Vec<ShapeId>> {
        self.shape.shapes_along(path)
    }

    /// `q` of each node on the path; entry `k` belongs to the level-`k` node (`k >= 1`).
    pub fn q_path(&self, path: &[u32]) -> Result<Vec<Bracket>> {
        let sh = self.shapes(path)?;
        let mut out = vec![Bracket::point(f64::NAN)];
        for (k, &s) in sh.iter().enumerate().skip(1) {
            out.push(self.q_type(s, k));
        }
        Ok(out)
    }

    /// `d` of each node on the path; entry `k` is `P_{x(k-1)}{T_{x(k)} < ∞}`.
    pub fn d_path(&self, path: &[u32]) -> Result<Vec<Bracket>> {
        let sh = self.shapes(path)?;
        let mut out = vec![match self.mode {
            RootMode::Absorbed => Bracket::point(0.0),
            RootMode::Reflected => Bracket::point(1.0),
        }];
        for k in 1..sh.len() {
            let (parent, l) = (sh[k - 1], k - 1);
            let qy = self.q_type(sh[k], k);
            let (lo, hi) = self.escape_sum(parent, l);
            // siblings only: remove y's own contribution endpoint-wise
            let sib_lo = (lo - (1.0 - qy.hi)).max(0.0);
            let sib_hi = (hi - (1.0 - qy.lo)).max(0.0);
            let rho = self.w.ratio(l);
            let dp = out[k - 1];
            let up_lo = if l == 0 && self.mode == RootMode::Reflected { 0.0 } else { rho * (1.0 - dp.hi) };
            let up_hi = if l == 0 && self.mode == RootMode::Reflected { 0.0 } else { rho * (1.0 - dp.lo) };
            out.push(Bracket::new(1.0 / (1.0 + sib_hi + up_hi), 1.0 / (1.0 + sib_lo + up_lo)));
        }
        Ok(out)
    }

    /// `ḡ(r) = P_r{T_{∂_r} < ∞}`; zero in reflected mode.
    pub fn absorb_root(&self) -> Bracket {
        if self.mode == RootMode::Reflected {
            return Bracket::point(0.0);
        }
        let root = self.shape.root();
        let (lo, hi) = self.escape_sum(root, 0);
        if hi == 0.0 {
            return Bracket::point(1.0);
        }
        let inv = 1.0 / self.w.ratio(0);
        Bracket::new(1.0 / (1.0 + inv * hi), 1.0 / (1.0 + inv * lo))
    }

    /// `P_r{X_ζ ∈ ∂∞}`.
    pub fn escape_root(&self) -> Bracket {
        match self.mode {
            RootMode::Absorbed => self.absorb_root().complement(),
            RootMode::Reflected => {
                let (lo, hi) = self.escape_sum(self.shape.root(), 0);
                Bracket::new(if lo > 0.0 { 1.0 } else { 0.0 }, if hi > 0.0 { 1.0 } else { 0.0 })
            }
        }
    }

    /// `P_x{T_{x(level)} < ∞}` for the ancestor at `level` of the node at `path`.
    pub fn up(&self, path: &[u32], level: usize) -> Result<Bracket> {
        if level > path.len() {
            return Err(domain(MODULE, "target level below the start node"));
        }
        let q = self.q_path(path)?;
        let mut b = Bracket::point(1.0);
        for qk in &q[level + 1..] {
            b = b.mul(*qk);
        }
        Ok(b)
    }

    /// `P_{x(level)}{T_x < ∞}` for the node `x` at `path`.
    pub fn down(&self, path: &[u32], level: usize) -> Result<Bracket> {
        let d = self.d_path(path)?;
        let mut b = Bracket::point(1.0);
        for dk in &d[level + 1..] {
            b = b.mul(*dk);
        }
        Ok(b)
    }

    /// `P_i{T_j < ∞}`.
    pub fn hit(&self, i: &[u32], j: &[u32]) -> Result<Bracket> {
        let m = meet_level(i, j);
        Ok(self.up(i, m)?.mul(self.down(j, m)?))
    }

    /// `ḡ(x) = P_x{T_{∂_r} < ∞}`.
    pub fn absorb(&self, path: &[u32]) -> Result<Bracket> {
        Ok(self.up(path, 0)?.mul(self.absorb_root()))
    }

    /// `e(j) = P_j{X_ζ ∈ ∂∞(j)} = (1-q)/(1-q d)`.
    pub fn escape_into(&self, path: &[u32]) -> Result<Bracket> {
        if path.is_empty() {
            return Ok(self.escape_root());
        }
        let q = *self.q_path(path)?.last().unwrap();
        let d = *self.d_path(path)?.last().unwrap();
        Ok(escape_formula(q, d))
    }

    /// `P_r{X_ζ ∈ ∂∞(j)}`.
    pub fn exit_from_root(&self, path: &[u32]) -> Result<Bracket> {
        if path.is_empty() {
            return Ok(self.escape_root());
        }
        let q = *self.q_path(path)?.last().unwrap();
        let d = self.d_path(path)?;
        let mut reach = Bracket::point(1.0);
        for dk in &d[1..] {
            reach = reach.mul(*dk);
        }
        Ok(reach.mul(escape_formula(q, *d.last().unwrap())))
    }

    /// Exit measure of a cylinder, normalized by the escape probability in absorbed mode.
    pub fn mass(&self, path: &[u32]) -> Result<Bracket> {
        let num = self.exit_from_root(path)?;
        match self.mode {
            RootMode::Reflected => Ok(num.clamp01()),
            RootMode::Absorbed => {
                let den = self.escape_root();
                if !(den.lo > 0.0) {
                    return Err(Error::new(ErrorKind::Recurrent, MODULE, "exit measure undefined: escape probability not certified positive"));
                }
                Ok(num.div(den).clamp01())
            }
        }
    }

    /// `P_i{X_ζ ∈ ∂∞(a)}` from any start node.
    pub fn exit_prob(&self, i: &[u32], a: &[u32]) -> Result<Bracket> {
        let inside = i.len() >= a.len() && &i[..a.len()] == a;
        if !inside {
            return Ok(self.hit(i, a)?.mul(self.escape_into(a)?));
        }
        if a.is_empty() {
            return Ok(match self.mode {
                RootMode::Absorbed => self.absorb(i)?.complement(),
                RootMode::Reflected => self.escape_root(),
            });
        }
        // leave through a⁻ or not; from a⁻ come back with d(a) and exit with e(a)
        let p = self.up(i, a.len() - 1)?;
        let d = *self.d_path(a)?.last().unwrap();
        let x = d.mul(self.escape_into(a)?);
        Ok(Bracket::new(1.0 - p.hi * (1.0 - x.lo), 1.0 - p.lo * (1.0 - x.hi)).clamp01())
    }

    /// `V_jj`, expected total time at `j`.
    pub fn green_diag(&self, j: &[u32]) -> Result<Bracket> {
        let sh = self.shapes(j)?;
        let l = j.len();
        let s = sh[l];
        let (elo, ehi) = self.escape_sum(s, l);
        let b = if ehi == 0.0 { 0.0 } else { 1.0 / self.w.delta(l + 1) };
        let (alo, ahi) = if l == 0 {
            match self.mode {
                RootMode::Absorbed => {
                    let a = 1.0 / self.w.delta(0);
                    (a, a)
                }
                RootMode::Reflected => (0.0, 0.0),
            }
        } else {
            let a = 1.0 / self.w.delta(l);
            let d = *self.d_path(j)?.last().unwrap();
            (a * (1.0 - d.hi), a * (1.0 - d.lo))
        };
        let lo_den = ahi + b * ehi;
        let hi_den = alo + b * elo;
        Ok(Bracket::new(1.0 / lo_den, if hi_den > 0.0 { 1.0 / hi_den } else { f64::INFINITY }))
    }

    /// `V_ij = P_i{T_j < ∞} V_jj`.
    pub fn potential(&self, i: &[u32], j: &[u32]) -> Result<Bracket> {
        Ok(self.hit(i, j)?.mul(self.green_diag(j)?))
    }
}

fn escape_formula(q: Bracket, d: Bracket) -> Bracket {
    let f = |q: f64, d: f64| if q >= 1.0 { 0.0 } else { (1.0 - q) / (1.0 - q * d) };
    Bracket::new(f(q.hi, d.lo), f(q.lo, d.hi)).clamp01()
}
