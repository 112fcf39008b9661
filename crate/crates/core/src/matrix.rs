//! Tree matrices `U_ij = w_{|i∧j|}`, their generators, and exact finite potentials.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, ErrorKind, Result};
use crate::tree::{meet_level, BoundaryRay, NodeId, RootedTree};
use crate::weights::WeightSequence;

const MODULE: &str = "tree_matrix";

/// Behaviour of the chain at the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootMode {
    /// Extra rate `1/w_0` from the root to the cemetery `∂_r`.
    Absorbed,
    /// No killing; the root only jumps to its children.
    Reflected,
}

/// A node path or a boundary ray.
#[derive(Debug, Clone, Copy)]
pub enum Point<'a> {
    Node(&'a [u32]),
    Ray(&'a BoundaryRay),
}

/// Entry accessor for `U`, extended to boundary rays.
#[derive(Debug, Clone, Copy)]
pub struct TreeMatrixView<'a> {
    pub w: &'a WeightSequence,
}

impl<'a> TreeMatrixView<'a> {
    pub fn new(w: &'a WeightSequence) -> Self {
        TreeMatrixView { w }
    }

    pub fn u_entry(&self, x: Point, y: Point) -> Result<f64> {
        let (px, rx) = match x {
            Point::Node(p) => (p, false),
            Point::Ray(r) => (r.prefix(), true),
        };
        let (py, ry) = match y {
            Point::Node(p) => (p, false),
            Point::Ray(r) => (r.prefix(), true),
        };
        let l = meet_level(px, py);
        // a ray that agrees with the other point on its whole known prefix is unresolved
        let unresolved_x = rx && l == px.len();
        let unresolved_y = ry && l == py.len();
        if rx && ry && unresolved_x && unresolved_y {
            return self.w.limit().ok_or_else(|| {
                Error::new(
                    ErrorKind::Domain,
                    MODULE,
                    "diagonal-at-infinity undefined: identical ray prefixes with unbounded w",
                )
            });
        }
        if (unresolved_x && py.len() > l) || (unresolved_y && px.len() > l) {
            return Err(Error::new(
                ErrorKind::Unrealized,
                MODULE,
                "ray resolution too small to locate the meet",
            ));
        }
        let v = self.w.w(l as i64);
        if v.is_nan() {
            return Err(domain(MODULE, format!("weights undefined at level {l}")));
        }
        Ok(v)
    }

    pub fn nodes(&self, tree: &RootedTree, i: NodeId, j: NodeId) -> f64 {
        self.w.w(meet_level(tree.path(i), tree.path(j)) as i64)
    }
}

/// Generator of the nearest-neighbour chain, stored per node.
#[derive(Debug, Clone)]
pub struct SparseGenerator {
    pub mode: RootMode,
    /// `Q_ii`
    diag: Vec<f64>,
    /// Rate from a node to its parent (for the root: to `∂_r`, zero when reflected).
    up: Vec<f64>,
}

fn check_depth(tree: &RootedTree, w: &WeightSequence, extra: usize) -> Result<()> {
    let need = tree.depth() + extra;
    if !w.covers(need) {
        return Err(domain(MODULE, format!("weights undefined at level {need}")));
    }
    for n in 0..=need {
        let d = w.delta(n);
        if !(d > 0.0) {
            return Err(domain(MODULE, format!("non-increasing weights at level {n}")));
        }
    }
    Ok(())
}

pub fn build_generator(tree: &RootedTree, w: &WeightSequence, mode: RootMode) -> Result<SparseGenerator> {
    let extra = usize::from(!tree.is_finite());
    check_depth(tree, w, extra)?;
    let mut diag = Vec::with_capacity(tree.len());
    let mut up = Vec::with_capacity(tree.len());
    for i in tree.ids() {
        let l = tree.level(i);
        let u = match (l, mode) {
            (0, RootMode::Reflected) => 0.0,
            _ => 1.0 / w.delta(l),
        };
        let k = tree.child_count(i);
        let down = if k == 0 { 0.0 } else { k as f64 / w.delta(l + 1) };
        up.push(u);
        diag.push(-(u + down));
    }
    Ok(SparseGenerator { mode, diag, up })
}

impl SparseGenerator {
    pub fn diag(&self, i: NodeId) -> f64 {
        self.diag[i.0]
    }

    /// Rate on the edge between `i` and its parent (to `∂_r` for the root).
    pub fn up_rate(&self, i: NodeId) -> f64 {
        self.up[i.0]
    }

    /// `Q_ij` for realized nodes.
    pub fn q(&self, tree: &RootedTree, i: NodeId, j: NodeId) -> f64 {
        if i == j {
            self.diag[i.0]
        } else if tree.parent(i) == Some(j) {
            self.up[i.0]
        } else if tree.parent(j) == Some(i) {
            self.up[j.0]
        } else {
            0.0
        }
    }

    /// Row sum over tree neighbours; needs the row realized.
    pub fn row_sum(&self, tree: &RootedTree, i: NodeId) -> Result<f64> {
        if !tree.row_complete(i) {
            return Err(Error::new(ErrorKind::Unrealized, MODULE, "row extends past the realized depth"));
        }
        let mut s = self.diag[i.0] + tree.children(i).iter().map(|c| self.up[c.0]).sum::<f64>();
        if tree.parent(i).is_some() {
            s += self.up[i.0];
        }
        Ok(s)
    }

    /// `(neighbour, rate)` pairs of row `i`, diagonal first.
    pub fn row(&self, tree: &RootedTree, i: NodeId) -> Vec<(NodeId, f64)> {
        let mut r = vec![(i, self.diag[i.0])];
        if let Some(p) = tree.parent(i) {
            r.push((p, self.up[i.0]));
        }
        for &c in tree.children(i) {
            r.push((c, self.up[c.0]));
        }
        r
    }
}

/// Max over `node_set²` of `|((-Q)U - I)_ij|`, row by row against the closed form of `U`.
pub fn inverse_residual(tree: &RootedTree, w: &WeightSequence, mode: RootMode, node_set: &[NodeId]) -> Result<f64> {
    let q = build_generator(tree, w, mode)?;
    let mut worst = 0.0f64;
    for &i in node_set {
        if !tree.row_complete(i) {
            return Err(domain(
                MODULE,
                format!("node set not neighbour-closed at {}", tree.label(i)),
            ));
        }
        let row = q.row(tree, i);
        for &j in node_set {
            let pj = tree.path(j);
            let mut s = 0.0;
            for &(k, rate) in &row {
                s -= rate * w.w(meet_level(tree.path(k), pj) as i64);
            }
            if i == j {
                s -= 1.0;
            }
            worst = worst.max(s.abs());
        }
    }
    Ok(worst)
}

/// Symmetric system supported on a forest: `A_ii = diag`, `A_{i,parent(i)} = off`.
/// Nodes must be listed so that parents come before children.
#[derive(Debug, Clone)]
pub struct TreeSystem {
    parent: Vec<Option<usize>>,
    off: Vec<f64>,
    /// Diagonal after eliminating each subtree.
    pivot: Vec<f64>,
}

impl TreeSystem {
    pub fn new(parent: Vec<Option<usize>>, diag: Vec<f64>, off: Vec<f64>) -> Result<TreeSystem> {
        let n = parent.len();
        let mut pivot = diag;
        for c in (0..n).rev() {
            let d = pivot[c];
            if !(d.abs() > 0.0) || !d.is_finite() {
                return Err(Error::new(ErrorKind::Numeric, MODULE, "singular tree system"));
            }
            if let Some(p) = parent[c] {
                debug_assert!(p < c);
                pivot[p] -= off[c] * off[c] / d;
            }
        }
        Ok(TreeSystem { parent, off, pivot })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Leaf-to-root elimination, then root-to-leaf substitution.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut b = rhs.to_vec();
        for c in (0..n).rev() {
            if let Some(p) = self.parent[c] {
                b[p] -= self.off[c] * b[c] / self.pivot[c];
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut r = b[i];
            if let Some(p) = self.parent[i] {
                r -= self.off[i] * x[p];
            }
            x[i] = r / self.pivot[i];
        }
        x
    }
}

/// `V⁽ⁿ⁾` on `Iⁿ`, rows and columns in `nodes` order.
#[derive(Debug, Clone)]
pub struct Potential {
    pub nodes: Vec<NodeId>,
    pub v: DMatrix<f64>,
}

/// `-Q` restricted to `Iⁿ` (absorbed mode), as a tree system.
fn killed_system(tree: &RootedTree, w: &WeightSequence, n: usize) -> Result<(Vec<NodeId>, TreeSystem)> {
    let deeper = tree.level_nodes(n).iter().any(|&i| tree.child_count(i) > 0);
    if tree.depth() < n && !tree.is_finite() {
        return Err(Error::new(ErrorKind::Unrealized, MODULE, format!("level {n} not realized")));
    }
    let need = if deeper { n + 1 } else { n.min(tree.depth()) };
    if !w.covers(need) {
        return Err(domain(MODULE, format!("weights undefined at level {need}")));
    }
    let q = build_generator_window(tree, w, n)?;
    let nodes = tree.window(n);
    let mut index = vec![usize::MAX; tree.len()];
    for (k, &i) in nodes.iter().enumerate() {
        index[i.0] = k;
    }
    let parent = nodes.iter().map(|&i| tree.parent(i).map(|p| index[p.0])).collect();
    let diag = nodes.iter().map(|&i| -q.diag(i)).collect();
    let off = nodes.iter().map(|&i| -q.up_rate(i)).collect();
    Ok((nodes, TreeSystem::new(parent, diag, off)?))
}

fn build_generator_window(tree: &RootedTree, w: &WeightSequence, n: usize) -> Result<SparseGenerator> {
    for k in 0..=n.min(tree.depth()) + 1 {
        if w.covers(k) && !(w.delta(k) > 0.0) {
            return Err(domain(MODULE, format!("non-increasing weights at level {k}")));
        }
    }
    let mut diag = Vec::with_capacity(tree.len());
    let mut up = Vec::with_capacity(tree.len());
    for i in tree.ids() {
        let l = tree.level(i);
        if l > n {
            diag.push(f64::NAN);
            up.push(f64::NAN);
            continue;
        }
        let u = 1.0 / w.delta(l);
        let k = tree.child_count(i);
        let down = if k == 0 { 0.0 } else { k as f64 / w.delta(l + 1) };
        up.push(u);
        diag.push(-(u + down));
    }
    Ok(SparseGenerator {
        mode: RootMode::Absorbed,
        diag,
        up,
    })
}

/// `V⁽ⁿ⁾ = -(Q_{IⁿIⁿ})⁻¹` by tree elimination, one column per node.
pub fn finite_potential(tree: &RootedTree, w: &WeightSequence, n: usize) -> Result<Potential> {
    let (nodes, sys) = killed_system(tree, w, n)?;
    let m = nodes.len();
    let mut v = DMatrix::zeros(m, m);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e[j] = 1.0;
        let col = sys.solve(&e);
        e[j] = 0.0;
        v.set_column(j, &DVector::from_vec(col));
    }
    Ok(Potential { nodes, v })
}

/// Dense `U` on a node list.
pub fn u_block(tree: &RootedTree, w: &WeightSequence, rows: &[NodeId], cols: &[NodeId]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        w.w(meet_level(tree.path(rows[a]), tree.path(cols[b])) as i64)
    })
}

/// Dense `Q` on a node list (test oracle and small exports).
pub fn q_block(tree: &RootedTree, q: &SparseGenerator, nodes: &[NodeId]) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), nodes.len(), |a, b| q.q(tree, nodes[a], nodes[b]))
}

/// Numerical rank: singular values above `tol · max(1, σ_max)`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max).max(1.0);
    sv.iter().filter(|&&s| s > tol * top).count()
}

fn spd_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => m
            .try_inverse()
            .ok_or_else(|| Error::new(ErrorKind::Numeric, MODULE, "singular U block")),
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub potential: Potential,
    /// `U_{IⁿIⁿ} - V⁽ⁿ⁾`
    pub h: DMatrix<f64>,
    pub rank: usize,
    /// `B̃ⁿ`: level-`n` nodes with children.
    pub boundary: Vec<NodeId>,
}

pub fn harmonic_decomposition(tree: &RootedTree, w: &WeightSequence, n: usize, rank_tol: f64) -> Result<Decomposition> {
    let potential = finite_potential(tree, w, n)?;
    let u = u_block(tree, w, &potential.nodes, &potential.nodes);
    let h = u - &potential.v;
    let rank = numerical_rank(&h, rank_tol);
    let boundary = tree
        .level_nodes(n)
        .iter()
        .copied()
        .filter(|&i| tree.child_count(i) > 0)
        .collect();
    Ok(Decomposition {
        potential,
        h,
        rank,
        boundary,
    })
}

/// Hitting matrices of `B̃ⁿ` and `Bⁿ⁺¹` from `Iⁿ`.
#[derive(Debug, Clone)]
pub struct Hitting {
    pub rows: Vec<NodeId>,
    /// `B̃ⁿ`
    pub mid: Vec<NodeId>,
    /// `Bⁿ⁺¹`
    pub next: Vec<NodeId>,
    pub w: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// incidence `M_{k,c} = 1` when `c ∈ S_k`
    pub m: DMatrix<f64>,
}

pub fn hitting_matrices(tree: &RootedTree, w: &WeightSequence, n: usize) -> Result<Hitting> {
    let rows = tree.window(n);
    let mid: Vec<NodeId> = tree
        .level_nodes(n)
        .iter()
        .copied()
        .filter(|&i| tree.child_count(i) > 0)
        .collect();
    if mid.is_empty() {
        return Err(domain(MODULE, format!("no level-{n} node has children")));
    }
    let next: Vec<NodeId> = mid.iter().flat_map(|&k| tree.children(k).iter().copied()).collect();
    if next.iter().count() != mid.iter().map(|&k| tree.child_count(k)).sum::<usize>() {
        return Err(Error::new(ErrorKind::Unrealized, MODULE, format!("level {} not realized", n + 1)));
    }
    if !w.covers(n + 1) {
        return Err(domain(MODULE, format!("weights undefined at level {}", n + 1)));
    }
    let wm = u_block(tree, w, &rows, &mid) * spd_inverse(u_block(tree, w, &mid, &mid))?;
    let em = u_block(tree, w, &rows, &next) * spd_inverse(u_block(tree, w, &next, &next))?;
    let m = DMatrix::from_fn(mid.len(), next.len(), |a, b| {
        if tree.parent(next[b]) == Some(mid[a]) {
            1.0
        } else {
            0.0
        }
    });
    let d = &em * m.transpose();
    Ok(Hitting {
        rows,
        mid,
        next,
        w: wm,
        e: em,
        d,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, TreeSpec};
    use crate::weights::Tail;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn f1() -> (RootedTree, WeightSequence) {
        let spec = TreeSpec::from_json(
            r#"{"kind":"finite","root":"r","children":{"":["a","b"],"0":["a1","a2"]}}"#,
        )
        .unwrap();
        (build_tree(&spec, 0).unwrap(), WeightSequence::explicit(&[1.0, 2.0, 4.0]).unwrap())
    }

    fn random_case(seed: u64, max_nodes: usize) -> (RootedTree, WeightSequence) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=max_nodes);
        let mut counts = vec![0usize; n];
        let mut paths: Vec<Vec<u32>> = vec![vec![]];
        for _ in 1..n {
            let p = rng.random_range(0..paths.len());
            let mut c = paths[p].clone();
            c.push(counts[p] as u32);
            counts[p] += 1;
            paths.push(c);
        }
        let list: Vec<(&[u32], usize)> = paths
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|(p, &c)| (p.as_slice(), c))
            .collect();
        let t = build_tree(&TreeSpec::finite(&list), 0).unwrap();
        let mut ws = vec![rng.random_range(0.2..2.0)];
        for _ in 0..t.depth() {
            let last = *ws.last().unwrap();
            ws.push(last + rng.random_range(0.05..2.0));
        }
        (t, WeightSequence::explicit(&ws).unwrap())
    }

    fn name(t: &RootedTree, s: &str) -> NodeId {
        t.find_label(s).unwrap()
    }

    #[test]
    fn f1_generator_entries() {
        let (t, w) = f1();
        let q = build_generator(&t, &w, RootMode::Absorbed).unwrap();
        let (r, a, b, a1) = (name(&t, "r"), name(&t, "a"), name(&t, "b"), name(&t, "a1"));
        assert_eq!(q.diag(r), -3.0);
        assert_eq!(q.q(&t, r, a), 1.0);
        assert_eq!(q.q(&t, r, b), 1.0);
        assert_eq!(q.diag(a), -2.0);
        assert_eq!(q.q(&t, a, a1), 0.5);
        assert_eq!(q.diag(a1), -0.5);
        assert_eq!(q.diag(b), -1.0);
        assert_eq!(q.row_sum(&t, a1).unwrap(), 0.0);
        assert_eq!(q.row_sum(&t, r).unwrap(), -1.0);
        let view = TreeMatrixView::new(&w);
        assert_eq!(view.u_entry(Point::Node(t.path(a1)), Point::Node(t.path(name(&t, "a2")))).unwrap(), 2.0);
        assert_eq!(view.u_entry(Point::Node(t.path(a1)), Point::Node(t.path(b))).unwrap(), 1.0);
    }

    #[test]
    fn homogeneous_reflected_rates() {
        let t = build_tree(&TreeSpec::homogeneous(2), 3).unwrap();
        let w = WeightSequence::linear();
        let q = build_generator(&t, &w, RootMode::Reflected).unwrap();
        assert_eq!(q.diag(t.root()), -3.0);
        let i = t.level_nodes(2)[3];
        assert_eq!(q.diag(i), -3.0);
        assert_eq!(q.q(&t, i, t.children(i)[0]), 1.0);
        assert_eq!(q.row_sum(&t, t.root()).unwrap(), 0.0);
    }

    #[test]
    fn ray_entries() {
        let w = WeightSequence::new(vec![1.0], Some(Tail::Bounded { limit: 2.0, c: 1.0, rho: 0.5 })).unwrap();
        let view = TreeMatrixView::new(&w);
        let x = BoundaryRay::new(vec![0, 1, 1]);
        assert_eq!(view.u_entry(Point::Ray(&x), Point::Ray(&x)).unwrap(), 2.0);
        let y = BoundaryRay::new(vec![0, 2, 1]);
        assert_eq!(view.u_entry(Point::Ray(&x), Point::Ray(&y)).unwrap(), 1.5);
        let lin = WeightSequence::linear();
        let e = TreeMatrixView::new(&lin).u_entry(Point::Ray(&x), Point::Ray(&x)).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Domain);
        assert!(e.message.contains("diagonal-at-infinity"));
    }

    #[test]
    fn f1_residual_and_detector() {
        let (t, w) = f1();
        let all: Vec<NodeId> = t.ids().collect();
        assert!(inverse_residual(&t, &w, RootMode::Absorbed, &all).unwrap() <= 1e-12);
        let bad = w.perturbed(1, 0.1);
        // generator from perturbed weights against the original U
        let q = build_generator(&t, &bad, RootMode::Absorbed).unwrap();
        let mut worst = 0.0f64;
        for &i in &all {
            for &j in &all {
                let mut s: f64 = q.row(&t, i).iter().map(|&(k, r)| -r * w.w(meet_level(t.path(k), t.path(j)) as i64)).sum();
                if i == j {
                    s -= 1.0;
                }
                worst = worst.max(s.abs());
            }
        }
        assert!(worst > 0.01);
    }

    #[test]
    fn homogeneous_window_residual() {
        let t = build_tree(&TreeSpec::homogeneous(2), 4).unwrap();
        let w = WeightSequence::linear();
        let win = t.window(3);
        assert!(inverse_residual(&t, &w, RootMode::Absorbed, &win).unwrap() <= 1e-12);
        let e = inverse_residual(&t, &w, RootMode::Absorbed, &t.window(4)).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Domain);
    }

    #[test]
    fn f1_potentials() {
        let (t, w) = f1();
        let v1 = finite_potential(&t, &w, 1).unwrap();
        let labels: Vec<String> = v1.nodes.iter().map(|&i| t.label(i)).collect();
        assert_eq!(labels, vec!["r", "a", "b"]);
        let expect = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 5.0]) / 3.0;
        assert!((&v1.v - &expect).amax() < 1e-15);
        let v2 = finite_potential(&t, &w, 2).unwrap();
        let u = u_block(&t, &w, &v2.nodes, &v2.nodes);
        assert!((&v2.v - &u).amax() < 1e-14);
        for a in 0..3 {
            for b in 0..3 {
                assert!(v1.v[(a, b)] <= v2.v[(a, b)] + 1e-15);
            }
        }
    }

    #[test]
    fn f1_decomposition_and_hitting() {
        let (t, w) = f1();
        let d = harmonic_decomposition(&t, &w, 1, 1e-8).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]) / 3.0;
        assert!((&d.h - &expect).amax() < 1e-14);
        assert_eq!(d.rank, 1);
        assert_eq!(d.boundary, vec![name(&t, "a")]);
        let q = build_generator(&t, &w, RootMode::Absorbed).unwrap();
        let qb = q_block(&t, &q, &d.potential.nodes);
        // row r of Q against H column r
        assert!((qb.row(0) * d.h.column(0))[0].abs() < 1e-15);

        let hm = hitting_matrices(&t, &w, 1).unwrap();
        for (x, y) in hm.w.column(0).iter().zip([0.5, 1.0, 0.5]) {
            assert!((x - y).abs() < 1e-15);
        }
        let da: Vec<f64> = hm.d.column(0).iter().copied().collect();
        for (x, y) in da.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        let h2 = &hm.d * u_block(&t, &w, &hm.mid, &hm.rows);
        assert!((&h2 - &d.h).amax() < 1e-14);
        // rows at B̃ⁿ are unit vectors
        assert!((hm.w[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_depth_h_vanishes() {
        let (t, w) = f1();
        let d = harmonic_decomposition(&t, &w, 2, 1e-8).unwrap();
        assert!(d.h.amax() < 1e-14);
        assert_eq!(d.rank, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn elimination_matches_dense_inverse(seed in 0u64..10_000) {
            let (t, w) = random_case(seed, 60);
            let all: Vec<NodeId> = t.ids().collect();
            prop_assert!(inverse_residual(&t, &w, RootMode::Absorbed, &all).unwrap() <= 1e-10);
            let n = seed as usize % (t.depth() + 1);
            let v = finite_potential(&t, &w, n).unwrap();
            let q = build_generator(&t, &w, RootMode::Absorbed).unwrap();
            let dense = (-q_block(&t, &q, &v.nodes)).try_inverse().unwrap();
            prop_assert!((&dense - &v.v).amax() <= 1e-10 * dense.amax().max(1.0));
            prop_assert!((&v.v - v.v.transpose()).amax() <= 1e-12 * v.v.amax());
            let u = u_block(&t, &w, &v.nodes, &v.nodes);
            prop_assert!(v.v.iter().zip(u.iter()).all(|(a, b)| *a <= b + 1e-10 && *a > 0.0));
            if n + 1 <= t.depth() {
                let v2 = finite_potential(&t, &w, n + 1).unwrap();
                for a in 0..v.nodes.len() {
                    for b in 0..v.nodes.len() {
                        prop_assert!(v.v[(a, b)] <= v2.v[(a, b)] + 1e-10);
                    }
                }
            }
        }

        #[test]
        fn decomposition_structure(seed in 0u64..10_000) {
            let (t, w) = random_case(seed, 40);
            let n = seed as usize % (t.depth() + 1);
            let d = harmonic_decomposition(&t, &w, n, 1e-8).unwrap();
            prop_assert_eq!(d.rank, d.boundary.len());
            prop_assert!((&d.h - d.h.transpose()).amax() <= 1e-10);
            if !d.boundary.is_empty() {
                let hm = hitting_matrices(&t, &w, n).unwrap();
                let h2 = &hm.d * u_block(&t, &w, &hm.mid, &hm.rows);
                prop_assert!((&h2 - &d.h).amax() <= 1e-10);
                let e1 = &hm.e * DVector::from_element(hm.next.len(), 1.0);
                let d1 = &hm.d * DVector::from_element(hm.mid.len(), 1.0);
                prop_assert!((e1 - d1).amax() <= 1e-12);
            }
        }
    }
}
