//! Ultrametric matrices: validation, minimal tree extension, induced generator,
//! harmonic extension, and the boundary of word families.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bracket::Bracket;
use crate::error::{domain, schema, Error, ErrorKind, Result};
use crate::matrix::{build_generator, RootMode, TreeSystem};
use crate::tree::{path_string, Counts, NodeId, RootedTree, Rule, Shape, TreeKind, TreeSpec};
use crate::walk::Walk;
use crate::weights::{WeightSequence, WeightSpec};

const MODULE: &str = "ultrametric";

/// Largest cylinder count enumerated by `u_boundary`.
pub const CYLINDER_CAP: usize = 4096;
/// Deepest level probed by `u_boundary`.
pub const DEPTH_CAP: usize = 400;

fn hypothesis(msg: impl Into<String>) -> Error {
    Error::new(ErrorKind::Hypothesis, MODULE, msg)
}

/// Finite symmetric matrix over an explicit index set.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrametricMatrix {
    pub labels: Vec<String>,
    pub u: DMatrix<f64>,
}

impl UltrametricMatrix {
    /// Square matrix with positive finite entries. Symmetry is checked by `verify_ultrametric`.
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != u.ncols() || u.nrows() == 0 {
            return Err(schema(MODULE, format!("matrix must be square and non-empty, got {}x{}", u.nrows(), u.ncols())));
        }
        if u.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(schema(MODULE, "entries must be positive and finite"));
        }
        let labels = (1..=u.nrows()).map(|k| k.to_string()).collect();
        Ok(UltrametricMatrix { labels, u })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(schema(MODULE, "ragged matrix rows"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Dense CSV, one row per line, no header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| schema(MODULE, format!("csv: {e}")))?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| schema(MODULE, format!("csv entry {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `U_ij < min(U_ik, U_kj)`, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// Exhaustive triple scan; the first violation in `(i, j, k)` order.
pub fn verify_ultrametric(m: &UltrametricMatrix) -> Result<Option<Violation>> {
    let u = &m.u;
    let n = m.len();
    for i in 0..n {
        for j in 0..i {
            if u[(i, j)] != u[(j, i)] {
                return Err(domain(MODULE, format!("asymmetric input at ({}, {})", j + 1, i + 1))
                    .with_context(json!({"i": j + 1, "j": i + 1})));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if u[(i, j)] < u[(i, k)].min(u[(k, j)]) {
                    return Ok(Some(Violation { i, j, k }));
                }
            }
        }
    }
    Ok(None)
}

/// Single-linkage check: merging clusters in decreasing order of `U`, every
/// cross pair must sit exactly at the merge value, and rows are dominated by
/// the diagonal. Equivalent to the triple scan for symmetric input.
pub fn is_ultrametric_fast(m: &UltrametricMatrix) -> bool {
    let u = &m.u;
    let n = m.len();
    for i in 0..n {
        for j in 0..n {
            if u[(i, j)] != u[(j, i)] || u[(i, j)] > u[(i, i)] {
                return false;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| u[(b.0, b.1)].total_cmp(&u[(a.0, a.1)]));
    let mut uf = UnionFind::new(n);
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (i, j) in pairs {
        let (a, b) = (uf.find(i), uf.find(j));
        if a == b {
            continue;
        }
        let v = u[(i, j)];
        for &x in &members[a] {
            for &y in &members[b] {
                if u[(x, y)] != v {
                    return false;
                }
            }
        }
        let r = uf.union(a, b);
        let moved = std::mem::take(&mut members[if r == a { b } else { a }]);
        members[r].extend(moved);
    }
    true
}

#[derive(Debug, Clone)]
struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns the surviving root.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum H4Status {
    Certified,
    Refuted,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum H2Status {
    /// Finite window: finitely many values.
    Window,
    /// Declared family with value set `{w_n}`.
    Certified,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub h1: bool,
    /// First pair `i ≠ j` (0-based) with `U_ii = U_ij = U_jj`.
    pub h1_pair: Option<(usize, usize)>,
    pub h2: H2Status,
    pub values: Vec<f64>,
    pub min_gap: f64,
    pub h3: bool,
    /// Number of classes of `J(w)` for each value, ascending.
    pub class_counts: Vec<usize>,
    pub h4: H4Status,
    /// Bound on the probability of escaping from an added node without meeting `I ∪ ∂_r`.
    pub h4_escape: Bracket,
    pub note: String,
}

impl HypothesisReport {
    pub fn passes(&self) -> bool {
        self.h1 && self.h3 && self.h4 == H4Status::Certified
    }
}

fn sorted_values(u: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = u.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn min_gap(v: &[f64]) -> f64 {
    v.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
}

/// Classes of `J(w)` under `U_ij ≥ w`, for every value `w` (ascending index).
/// `out[l][i]` is the class representative of `i` at `values[l]`, if `i ∈ J(values[l])`.
fn classes(u: &DMatrix<f64>, values: &[f64]) -> Vec<Vec<Option<usize>>> {
    let n = u.nrows();
    let level = |x: f64| values.binary_search_by(|v| v.total_cmp(&x)).expect("value present");
    let mut diag_at: Vec<Vec<usize>> = vec![Vec::new(); values.len()];
    for i in 0..n {
        diag_at[level(u[(i, i)])].push(i);
    }
    let mut pairs_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); values.len()];
    for i in 0..n {
        for j in i + 1..n {
            pairs_at[level(u[(i, j)])].push((i, j));
        }
    }
    let mut uf = UnionFind::new(n);
    let mut active = vec![false; n];
    let mut out = vec![Vec::new(); values.len()];
    for l in (0..values.len()).rev() {
        for &i in &diag_at[l] {
            active[i] = true;
        }
        for &(i, j) in &pairs_at[l] {
            uf.union(i, j);
        }
        out[l] = (0..n).map(|i| if active[i] { Some(uf.find(i)) } else { None }).collect();
    }
    out
}

/// H1..H4 on a finite matrix. Assumes `verify_ultrametric` passed.
pub fn check_hypotheses(m: &UltrametricMatrix) -> HypothesisReport {
    let u = &m.u;
    let n = m.len();
    let mut h1_pair = None;
    'outer: for i in 0..n {
        for j in i + 1..n {
            if u[(i, i)] == u[(i, j)] && u[(j, j)] == u[(i, j)] {
                h1_pair = Some((i, j));
                break 'outer;
            }
        }
    }
    let values = sorted_values(u);
    let cls = classes(u, &values);
    let class_counts = cls
        .iter()
        .map(|row| row.iter().flatten().collect::<BTreeSet<_>>().len())
        .collect();
    HypothesisReport {
        h1: h1_pair.is_none(),
        h1_pair,
        h2: H2Status::Window,
        min_gap: min_gap(&values),
        values,
        h3: true,
        class_counts,
        h4: H4Status::Certified,
        h4_escape: Bracket::point(0.0),
        note: "finite index set".into(),
    }
}

/// Node `(E, w)` of the extension.
#[derive(Debug, Clone, Serialize)]
pub struct ExtNode {
    /// Class members, ascending, 0-based.
    pub class: Vec<usize>,
    /// Position of `w` in the sorted value set; also the tree level.
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// `Some(i)` when this node is the image of `i ∈ I`.
    pub index: Option<usize>,
    pub path: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TreeExtension {
    pub values: Vec<f64>,
    pub nodes: Vec<ExtNode>,
    /// `I` index to node.
    pub embedding: Vec<usize>,
    pub labels: Vec<String>,
    weights: WeightSequence,
    tree: RootedTree,
    ids: Vec<NodeId>,
}

/// Minimal tree extension from union-find classes per value.
pub fn minimal_tree_extension(m: &UltrametricMatrix) -> Result<TreeExtension> {
    if let Some(v) = verify_ultrametric(m)? {
        return Err(hypothesis(format!(
            "not ultrametric: U[{},{}] < min(U[{},{}], U[{},{}])",
            v.i + 1, v.j + 1, v.i + 1, v.k + 1, v.k + 1, v.j + 1
        )));
    }
    let rep = check_hypotheses(m);
    if let Some((i, j)) = rep.h1_pair {
        return Err(hypothesis(format!("H1 fails: indices {} and {} are equivalent", i + 1, j + 1))
            .with_context(json!({"i": i + 1, "j": j + 1})));
    }
    let u = &m.u;
    let n = m.len();
    let values = rep.values;
    let cls = classes(u, &values);

    let mut nodes: Vec<ExtNode> = Vec::new();
    // (level, representative) -> node
    let mut at: HashMap<(usize, usize), usize> = HashMap::new();
    for (l, row) in cls.iter().enumerate() {
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, r) in row.iter().enumerate() {
            if let Some(r) = r {
                groups.entry(*r).or_default().push(i);
            }
        }
        let mut list: Vec<(Option<usize>, usize, Vec<usize>)> = groups
            .into_iter()
            .map(|(r, members)| {
                let parent = if l == 0 { None } else { Some(at[&(l - 1, cls[l - 1][members[0]].expect("nested"))]) };
                (parent, r, members)
            })
            .collect();
        list.sort_by_key(|(p, _, mem)| (*p, mem[0]));
        if l == 0 && list.len() != 1 {
            return Err(hypothesis("smallest value does not join all indices"));
        }
        for (parent, r, class) in list {
            let id = nodes.len();
            let mut path = Vec::new();
            if let Some(p) = parent {
                path = nodes[p].path.clone();
                path.push(nodes[p].children.len() as u32);
                nodes[p].children.push(id);
            }
            nodes.push(ExtNode { class, level: l, parent, children: Vec::new(), index: None, path });
            at.insert((l, r), id);
        }
    }
    let mut embedding = Vec::with_capacity(n);
    for i in 0..n {
        let l = values.binary_search_by(|v| v.total_cmp(&u[(i, i)])).expect("value present");
        let id = at[&(l, cls[l][i].expect("active on its diagonal"))];
        if nodes[id].index.is_some() {
            return Err(hypothesis("embedding not injective"));
        }
        nodes[id].index = Some(i);
        embedding.push(id);
    }

    fn rule(nodes: &[ExtNode], k: usize) -> Rule {
        Rule::Split(nodes[k].children.iter().map(|&c| rule(nodes, c)).collect())
    }
    let shape = Shape::from_rule(&rule(&nodes, 0));
    let depth = nodes.iter().map(|x| x.level).max().unwrap_or(0);
    let tree = RootedTree::from_shape(Arc::new(shape), depth);
    let ids = nodes
        .iter()
        .map(|x| tree.node_at(&x.path).ok_or_else(|| domain(MODULE, "extension tree lost a node")))
        .collect::<Result<Vec<_>>>()?;
    let weights = WeightSequence::explicit(&values)?;
    Ok(TreeExtension { values, nodes, embedding, labels: m.labels.clone(), weights, tree, ids })
}

impl TreeExtension {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn added(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&k| self.nodes[k].index.is_none())
    }

    pub fn weights(&self) -> &WeightSequence {
        &self.weights
    }

    pub fn tree(&self) -> &RootedTree {
        &self.tree
    }

    pub fn meet(&self, mut a: usize, mut b: usize) -> usize {
        while self.nodes[a].level > self.nodes[b].level {
            a = self.nodes[a].parent.expect("non-root");
        }
        while self.nodes[b].level > self.nodes[a].level {
            b = self.nodes[b].parent.expect("non-root");
        }
        while a != b {
            a = self.nodes[a].parent.expect("non-root");
            b = self.nodes[b].parent.expect("non-root");
        }
        a
    }

    /// `Ũ` between two extension nodes.
    pub fn u_tilde(&self, a: usize, b: usize) -> f64 {
        self.values[self.nodes[self.meet(a, b)].level]
    }

    pub fn u_tilde_matrix(&self) -> UltrametricMatrix {
        let n = self.len();
        UltrametricMatrix {
            labels: (0..n).map(|k| self.node_label(k)).collect(),
            u: DMatrix::from_fn(n, n, |a, b| self.u_tilde(a, b)),
        }
    }

    /// `Ũ` restricted to the embedded index set.
    pub fn restriction(&self) -> DMatrix<f64> {
        let n = self.embedding.len();
        DMatrix::from_fn(n, n, |i, j| self.u_tilde(self.embedding[i], self.embedding[j]))
    }

    fn neighbours(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes[k].parent.into_iter().chain(self.nodes[k].children.iter().copied())
    }

    /// Search from the image of `i` through added nodes, stopping at other `I`-nodes.
    fn basin_search(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let start = self.embedding[i];
        let mut seen = vec![false; self.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut basin = vec![start];
        let mut nbrs = Vec::new();
        while let Some(x) = queue.pop_front() {
            for y in self.neighbours(x) {
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                basin.push(y);
                match self.nodes[y].index {
                    Some(j) => nbrs.push(j),
                    None => queue.push_back(y),
                }
            }
        }
        basin.sort_unstable();
        nbrs.sort_unstable();
        (basin, nbrs)
    }

    /// `𝒱(i)`: indices `j ≠ i` whose geodesic to `i` has no interior `I`-node.
    pub fn u_neighbors(&self, i: usize) -> Vec<usize> {
        self.basin_search(i).1
    }

    /// `ℬ(i)`: nodes `x` with `geod(i, x) ∩ I ⊆ {i, x}`.
    pub fn attraction_basin(&self, i: usize) -> Vec<usize> {
        self.basin_search(i).0
    }

    /// Node ids on the geodesic between two nodes.
    pub fn geodesic(&self, a: usize, b: usize) -> Vec<usize> {
        let m = self.meet(a, b);
        let mut left = vec![a];
        let mut x = a;
        while x != m {
            x = self.nodes[x].parent.expect("non-root");
            left.push(x);
        }
        let mut right = Vec::new();
        let mut y = b;
        while y != m {
            right.push(y);
            y = self.nodes[y].parent.expect("non-root");
        }
        left.extend(right.into_iter().rev());
        left
    }

    /// For every value, whether the finiteness criterion for basins holds with
    /// `I^w = ⋃ {𝒱*(j) : U_jj ≤ w}` (values below the smallest diagonal reuse that set).
    pub fn basin_criterion(&self) -> Vec<(f64, bool)> {
        let n = self.embedding.len();
        let diag: Vec<f64> = (0..n).map(|i| self.values[self.nodes[self.embedding[i]].level]).collect();
        let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let star: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = self.u_neighbors(i);
                v.push(i);
                v
            })
            .collect();
        self.values
            .iter()
            .map(|&w| {
                let cut = w.max(dmin);
                let mut iw = vec![false; n];
                for j in 0..n {
                    if diag[j] <= cut {
                        for &k in &star[j] {
                            iw[k] = true;
                        }
                    }
                }
                let ok = (0..n).filter(|&i| !iw[i]).all(|i| {
                    (0..n)
                        .filter(|&j| iw[j])
                        .map(|j| self.u_tilde(self.embedding[i], self.embedding[j]))
                        .zip((0..n).filter(|&j| iw[j]))
                        .filter(|&(uij, j)| uij == diag[j])
                        .map(|(uij, _)| uij)
                        .fold(f64::NEG_INFINITY, f64::max)
                        > w
                });
                (w, ok)
            })
            .collect()
    }

    pub fn node_label(&self, k: usize) -> String {
        let x = &self.nodes[k];
        let members: Vec<&str> = x.class.iter().map(|&i| self.labels[i].as_str()).collect();
        format!("({{{}}}, {})", members.join(","), self.values[x.level])
    }

    /// Tree spec plus the embedding table.
    pub fn to_json(&self) -> Value {
        let mut children = HashMap::new();
        for x in &self.nodes {
            if !x.children.is_empty() {
                children.insert(path_string(&x.path), crate::tree::ChildList::Count(x.children.len()));
            }
        }
        let spec = TreeSpec {
            kind: TreeKind::Finite,
            children,
            root: None,
            rule: None,
            p: None,
            weights: Some(self.weights.to_spec()),
        };
        let nodes: Vec<Value> = (0..self.len())
            .map(|k| {
                let x = &self.nodes[k];
                json!({
                    "path": path_string(&x.path),
                    "value": self.values[x.level],
                    "class": x.class.iter().map(|&i| self.labels[i].clone()).collect::<Vec<_>>(),
                    "tag": if x.index.is_some() { "in_i" } else { "added" },
                })
            })
            .collect();
        let embedding: Vec<Value> = self
            .embedding
            .iter()
            .enumerate()
            .map(|(i, &k)| json!({"index": self.labels[i], "path": path_string(&self.nodes[k].path)}))
            .collect();
        json!({"tree": spec, "values": self.values, "nodes": nodes, "embedding": embedding})
    }
}

/// Generator induced on `I` together with its certificate.
#[derive(Debug, Clone)]
pub struct UltraGenerator {
    /// Row `i`: `(j, Q_ij)` for `j ∈ 𝒱*(i)`, ascending.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Per extension node: `(j, P_x(X̃_τ = j))` for added nodes, empty for `I`-nodes.
    pub hitting: Vec<Vec<(usize, f64)>>,
    pub certificate: GeneratorCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorCertificate {
    /// `max |Q_ij - Q_ji|` before symmetrization.
    pub asymmetry: f64,
    pub max_row_sum: f64,
    /// `max |((-Q)U - I)_ij|`.
    pub inverse_residual: f64,
    /// Rows whose support differs from `𝒱*(i)`.
    pub support_mismatch: Vec<usize>,
    /// Rows with strictly negative sum.
    pub deficient_rows: Vec<usize>,
    pub certified: bool,
}

impl UltraGenerator {
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.rows.len();
        let mut q = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                q[(i, j)] = v;
            }
        }
        q
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }
}

/// Generator on `I` from the extension: `Q_ij = Q̃_ij + Σ_k̃ Q̃_ik̃ P_k̃(X̃_τ = j)`.
pub fn ultrametric_generator(m: &UltrametricMatrix, ext: &TreeExtension) -> Result<UltraGenerator> {
    let qt = build_generator(&ext.tree, &ext.weights, RootMode::Absorbed)?;
    let q = |a: usize, b: usize| qt.q(&ext.tree, ext.ids[a], ext.ids[b]);
    let nn = ext.len();
    let n = ext.embedding.len();

    // components of added nodes; nodes are stored parents-first
    let mut comp = vec![usize::MAX; nn];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for k in ext.added() {
        let c = match ext.nodes[k].parent {
            Some(p) if ext.nodes[p].index.is_none() => comp[p],
            _ => {
                comps.push(Vec::new());
                comps.len() - 1
            }
        };
        comp[k] = c;
        comps[c].push(k);
    }
    let mut hitting: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nn];
    for members in &comps {
        let local: HashMap<usize, usize> = members.iter().enumerate().map(|(a, &k)| (k, a)).collect();
        let parent: Vec<Option<usize>> = members
            .iter()
            .map(|&k| ext.nodes[k].parent.and_then(|p| local.get(&p).copied()))
            .collect();
        let diag: Vec<f64> = members.iter().map(|&k| -q(k, k)).collect();
        let off: Vec<f64> = members
            .iter()
            .map(|&k| ext.nodes[k].parent.map_or(0.0, |p| -q(k, p)))
            .collect();
        let sys = TreeSystem::new(parent, diag, off)?;
        let mut exits: BTreeSet<(usize, usize)> = BTreeSet::new(); // (I index, member)
        for &k in members {
            for b in ext.neighbours(k) {
                if let Some(j) = ext.nodes[b].index {
                    exits.insert((j, k));
                }
            }
        }
        let targets: BTreeSet<usize> = exits.iter().map(|e| e.0).collect();
        for j in targets {
            let mut rhs = vec![0.0; members.len()];
            for &(jj, k) in exits.iter().filter(|e| e.0 == j) {
                rhs[local[&k]] += q(k, ext.embedding[jj]);
            }
            let h = sys.solve(&rhs);
            for (a, &k) in members.iter().enumerate() {
                hitting[k].push((j, h[a]));
            }
        }
    }

    let mut dense = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let x = ext.embedding[i];
        dense[(i, i)] += q(x, x);
        for y in ext.neighbours(x) {
            let r = q(x, y);
            match ext.nodes[y].index {
                Some(j) => dense[(i, j)] += r,
                None => {
                    for &(j, p) in &hitting[y] {
                        dense[(i, j)] += r * p;
                    }
                }
            }
        }
    }
    let asymmetry = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (dense[(i, j)] - dense[(j, i)]).abs())
        .fold(0.0, f64::max);
    let sym = (&dense + dense.transpose()) * 0.5;
    let u = &m.u;
    let resid = (-&sym * u - DMatrix::<f64>::identity(n, n)).abs().max();
    let mut rows = Vec::with_capacity(n);
    let mut support_mismatch = Vec::new();
    let mut deficient_rows = Vec::new();
    let mut max_row_sum = f64::NEG_INFINITY;
    for i in 0..n {
        let row: Vec<(usize, f64)> = (0..n).filter(|&j| sym[(i, j)] != 0.0).map(|j| (j, sym[(i, j)])).collect();
        let mut star = ext.u_neighbors(i);
        star.push(i);
        star.sort_unstable();
        if row.iter().map(|e| e.0).collect::<Vec<_>>() != star {
            support_mismatch.push(i);
        }
        let s: f64 = row.iter().map(|e| e.1).sum();
        max_row_sum = max_row_sum.max(s);
        let mag: f64 = row.iter().map(|e| e.1.abs()).sum();
        if s < -1e-12 * mag {
            deficient_rows.push(i);
        }
        rows.push(row);
    }
    let qscale = sym.abs().max().max(1.0);
    let certified = asymmetry <= 1e-12 * qscale
        && max_row_sum <= 1e-12 * qscale
        && resid <= 1e-10
        && support_mismatch.is_empty();
    Ok(UltraGenerator {
        rows,
        hitting,
        certificate: GeneratorCertificate {
            asymmetry,
            max_row_sum,
            inverse_residual: resid,
            support_mismatch,
            deficient_rows,
            certified,
        },
    })
}

/// `h̃(x) = Σ_j P_x(X̃_τ = j) h(j)` on added nodes, `h` on `I`; no harmonicity check.
pub fn extend_values(ext: &TreeExtension, gen: &UltraGenerator, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != ext.embedding.len() {
        return Err(domain(MODULE, format!("h has {} values, I has {}", h.len(), ext.embedding.len())));
    }
    Ok((0..ext.len())
        .map(|k| match ext.nodes[k].index {
            Some(i) => h[i],
            None => gen.hitting[k].iter().map(|&(j, p)| p * h[j]).sum(),
        })
        .collect())
}

/// `max |Q̃h̃|` over added nodes (with `h̃(∂_r) = 0`).
pub fn extension_residual(ext: &TreeExtension, ht: &[f64]) -> Result<f64> {
    let qt = build_generator(&ext.tree, &ext.weights, RootMode::Absorbed)?;
    let mut worst = 0.0f64;
    for k in ext.added() {
        let mut s = qt.q(&ext.tree, ext.ids[k], ext.ids[k]) * ht[k];
        for y in ext.neighbours(k) {
            s += qt.q(&ext.tree, ext.ids[k], ext.ids[y]) * ht[y];
        }
        worst = worst.max(s.abs());
    }
    Ok(worst)
}

/// Harmonic extension; refuses `h` with `max |Qh| > tol · max(1, max |h|)`.
pub fn extend_harmonic(ext: &TreeExtension, gen: &UltraGenerator, h: &[f64], tol: f64) -> Result<Vec<f64>> {
    if h.len() != gen.rows.len() {
        return Err(domain(MODULE, "h length does not match I"));
    }
    let qh = gen
        .rows
        .iter()
        .map(|row| row.iter().map(|&(j, v)| v * h[j]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let scale = h.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if qh > tol * scale {
        return Err(Error::new(ErrorKind::Domain, MODULE, format!("h is not Q-harmonic: max |Qh| = {qh:e}"))
            .with_context(json!({"residual": qh})));
    }
    extend_values(ext, gen, h)
}

/// Words `B* t` with `t ∈ T`, valued by `U_ij = w(N(i, j))` (common prefix length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordFamily {
    pub alphabet: u32,
    /// Letters allowed before the last one.
    pub body: Vec<u32>,
    /// Letters allowed in last position.
    pub suffix: Vec<u32>,
    pub weights: WeightSpec,
}

impl WordFamily {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: WordFamily = serde_json::from_str(text).map_err(|e| schema(MODULE, format!("word family: {e}")))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.suffix.is_empty() {
            return Err(schema(MODULE, "word family needs at least one suffix letter"));
        }
        if self.body.iter().chain(&self.suffix).any(|&a| a >= self.alphabet) {
            return Err(schema(MODULE, "letter outside the alphabet"));
        }
        WeightSequence::from_spec(&self.weights)?;
        Ok(())
    }

    pub fn weight_sequence(&self) -> Result<WeightSequence> {
        WeightSequence::from_spec(&self.weights)
    }

    fn letters(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.body.iter().chain(&self.suffix).copied().collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    fn in_body(&self, a: u32) -> bool {
        self.body.contains(&a)
    }

    pub fn is_member(&self, word: &[u32]) -> bool {
        match word.split_last() {
            Some((t, rest)) => self.suffix.contains(t) && rest.iter().all(|&a| self.in_body(a)),
            None => false,
        }
    }

    /// Members of length at most `max_len`, shortest first, then lexicographic.
    pub fn members(&self, max_len: usize) -> Vec<Vec<u32>> {
        let mut body = self.body.clone();
        body.sort_unstable();
        let mut suffix = self.suffix.clone();
        suffix.sort_unstable();
        let mut out = Vec::new();
        let mut prefixes: Vec<Vec<u32>> = vec![Vec::new()];
        for _ in 1..=max_len {
            for p in &prefixes {
                for &t in &suffix {
                    let mut w = p.clone();
                    w.push(t);
                    out.push(w);
                }
            }
            prefixes = prefixes
                .iter()
                .flat_map(|p| body.iter().map(move |&a| [p.as_slice(), &[a]].concat()))
                .collect();
        }
        out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        out
    }

    /// Dense window over members of length `≤ max_len`.
    pub fn window(&self, max_len: usize) -> Result<(Vec<Vec<u32>>, UltrametricMatrix)> {
        let w = self.weight_sequence()?;
        let words = self.members(max_len);
        if words.is_empty() {
            return Err(domain(MODULE, "empty window"));
        }
        let n = words.len();
        let u = DMatrix::from_fn(n, n, |i, j| {
            let a = &words[i];
            let b = &words[j];
            let common = a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count();
            w.w(common as i64)
        });
        let mut m = UltrametricMatrix::new(u)?;
        m.labels = words.iter().map(|x| word_string(x)).collect();
        Ok((words, m))
    }

    /// Prefix tree of the family as a rule graph; child `k` carries letter `letters[k]`.
    pub fn extension_shape(&self) -> (Shape, Vec<u32>) {
        let letters = self.letters();
        let rule = if letters.iter().all(|&a| self.in_body(a)) {
            Rule::Uniform(Counts::constant(letters.len()))
        } else {
            Rule::Repeat(
                letters
                    .iter()
                    .map(|&a| if self.in_body(a) { None } else { Some(Rule::Split(Vec::new())) })
                    .collect(),
            )
        };
        (Shape::from_rule(&rule), letters)
    }

    /// Uniform lower bound on the chance that a jump from an added node stops in `I ∪ ∂_r`:
    /// `|T| / (sup_l Δ_{l+1}/Δ_l + k)`, or `None` when the gap ratio is unbounded.
    pub fn stop_rate_bound(&self) -> Result<Option<f64>> {
        let w = self.weight_sequence()?;
        let k = self.letters().len() as f64;
        let Some((start, a, b)) = w.ratio_form() else {
            return Ok(None);
        };
        if b > 1.0 {
            return Ok(None);
        }
        let mut sup = a * b.powi(start as i32);
        for l in 0..start {
            sup = sup.max(w.ratio(l));
        }
        Ok(Some(self.suffix.len() as f64 / (sup + k)))
    }

    /// H1 and H3 hold for every family; H2 is certified through `w`; H4 through `stop_rate_bound`.
    pub fn check_hypotheses(&self, window_len: usize) -> Result<HypothesisReport> {
        let w = self.weight_sequence()?;
        let values: Vec<f64> = (0..=window_len).map(|n| w.w(n as i64)).collect();
        let nb = self.body.len();
        let class_counts = (0..=window_len).map(|n| nb.pow(n as u32).max(1)).collect();
        let (h4, escape, note) = match self.stop_rate_bound()? {
            Some(kappa) if kappa > 0.0 => (
                H4Status::Certified,
                Bracket::point(0.0),
                format!("every jump from an added node stops in I or at the root cemetery with probability >= {kappa}"),
            ),
            _ => (H4Status::Undetermined, Bracket::new(0.0, 1.0), "gap ratio unbounded".into()),
        };
        Ok(HypothesisReport {
            h1: true,
            h1_pair: None,
            h2: H2Status::Certified,
            min_gap: min_gap(&values),
            values,
            h3: true,
            class_counts,
            h4,
            h4_escape: escape,
            note,
        })
    }
}

fn word_string(w: &[u32]) -> String {
    w.iter().map(|a| a.to_string()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CylinderReport {
    pub word: String,
    pub mass: f64,
    /// Rays through the cylinder meet `I` at every tested depth.
    pub compatible: bool,
    /// Deepest tested level carrying an `I`-node on a ray through the cylinder.
    pub last_i_level: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UBoundary {
    pub resolution: usize,
    pub depth: usize,
    pub transient: bool,
    pub escape: Bracket,
    pub cylinders: Vec<CylinderReport>,
    /// `(D, μ̃{ξ(m) ∉ I for resolution ≤ m ≤ D})`.
    pub i_free_mass: Vec<(usize, f64)>,
    pub empty: bool,
    pub h4: H4Status,
    /// Lower estimate of `μ̃(∂ᵁ∞)` at the deepest tested level.
    pub u_mass: f64,
    /// Whether the H4 status and the `μ̃(∂ᵁ∞) = 1` side agree.
    pub lemma_consistent: bool,
    pub note: String,
}

/// Boundary of a word family at resolution `n`, probed down to `depth`.
pub fn u_boundary(family: &WordFamily, resolution: usize, depth: usize, tol: f64) -> Result<UBoundary> {
    family.validate()?;
    if depth > DEPTH_CAP || depth <= resolution {
        return Err(Error::new(
            ErrorKind::Unrealized,
            MODULE,
            format!("need resolution < depth <= {DEPTH_CAP}, got {resolution} and {depth}"),
        ));
    }
    let nb = family.body.len();
    let count = (nb as f64).powi(resolution as i32);
    if count > CYLINDER_CAP as f64 {
        return Err(Error::new(
            ErrorKind::Unrealized,
            MODULE,
            format!("{count} cylinders at resolution {resolution} exceed the cap {CYLINDER_CAP}"),
        ));
    }
    let w = family.weight_sequence()?;
    let (shape, letters) = family.extension_shape();
    let walk = Walk::new(Arc::new(shape), &w, RootMode::Absorbed, depth + 16)?;
    let escape = walk.escape_root();
    let transient = escape.lo > 0.0;
    if escape.hi <= 0.0 {
        return Err(Error::new(ErrorKind::Recurrent, MODULE, "extension chain is recurrent"));
    }
    let index_of = |a: u32| letters.iter().position(|&x| x == a).expect("letter") as u32;
    let mut body = family.body.clone();
    body.sort_unstable();
    let free: Vec<u32> = body.iter().copied().filter(|a| !family.suffix.contains(a)).collect();
    let interior_member: Vec<u32> = body.iter().copied().filter(|a| family.suffix.contains(a)).collect();

    // rays only pass through body prefixes; a body prefix is in I iff its last letter is a suffix letter
    let mut words: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..resolution {
        words = words.iter().flat_map(|p| body.iter().map(move |&a| [p.as_slice(), &[a]].concat())).collect();
    }
    let mut cylinders = Vec::with_capacity(words.len());
    for word in &words {
        let path: Vec<u32> = word.iter().map(|&a| index_of(a)).collect();
        let mass = walk.mass(&path)?.mid();
        let mut last = None;
        for m in 1..=resolution {
            if family.is_member(&word[..m]) {
                last = Some(m);
            }
        }
        // below the cylinder, level m carries an I-node on a ray iff some body letter is a suffix letter
        for m in resolution + 1..=depth {
            if !interior_member.is_empty() {
                last = Some(m);
            }
        }
        cylinders.push(CylinderReport { word: word_string(word), mass, compatible: last == Some(depth), last_i_level: last });
    }

    // all body cylinders at one level carry equal mass, so the I-free part is a count times one mass
    let mut i_free_mass = Vec::new();
    let first = resolution.max(1);
    let rep_letter = index_of(body[0]);
    for d in first..=depth {
        let m_d = walk.mass(&vec![rep_letter; d])?.mid();
        let c = (nb as f64).powi(first as i32 - 1) * (free.len() as f64).powi((d - first + 1) as i32);
        i_free_mass.push((d, (c * m_d).min(1.0)));
    }
    let empty = cylinders.iter().all(|c| !c.compatible);
    let h4 = family.check_hypotheses(resolution)?.h4;
    let last_free = i_free_mass.last().map_or(1.0, |e| e.1);
    let u_mass = if empty { 0.0 } else { 1.0 - last_free };
    let lemma_consistent = (h4 == H4Status::Certified) == (u_mass >= 1.0 - tol);
    let note = if lemma_consistent {
        String::new()
    } else {
        format!("H4 is {h4:?} but the estimated mass of the I-compatible boundary is {u_mass}")
    };
    Ok(UBoundary {
        resolution,
        depth,
        transient,
        escape,
        cylinders,
        i_free_mass,
        empty,
        h4,
        u_mass,
        lemma_consistent,
        note,
    })
}

/// Random finite ultrametric matrix: a random dendrogram with random increasing
/// level values, restricted to a random node subset.
pub fn random_dendrogram<R: Rng>(rng: &mut R, max_indices: usize) -> UltrametricMatrix {
    let depth = rng.random_range(1..=6usize);
    let mut level_w = vec![rng.random_range(0.5..2.0)];
    for _ in 0..depth {
        let last = *level_w.last().expect("non-empty");
        level_w.push(last + rng.random_range(0.1..2.0));
    }
    // (parent, level)
    let mut nodes: Vec<(Option<usize>, usize)> = vec![(None, 0)];
    let mut frontier = vec![0];
    for l in 1..=depth {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..rng.random_range(1..=3usize) {
                if nodes.len() >= 3 * max_indices {
                    break;
                }
                nodes.push((Some(p), l));
                next.push(nodes.len() - 1);
            }
        }
        frontier = next;
    }
    let mut chosen: Vec<usize> = (0..nodes.len()).filter(|_| rng.random_bool(0.5)).collect();
    while chosen.len() < 2 {
        chosen.push(rng.random_range(0..nodes.len()));
        chosen.sort_unstable();
        chosen.dedup();
    }
    chosen.truncate(max_indices);
    let meet_level = |mut a: usize, mut b: usize| {
        while nodes[a].1 > nodes[b].1 {
            a = nodes[a].0.expect("non-root");
        }
        while nodes[b].1 > nodes[a].1 {
            b = nodes[b].0.expect("non-root");
        }
        while a != b {
            a = nodes[a].0.expect("non-root");
            b = nodes[b].0.expect("non-root");
        }
        nodes[a].1
    };
    let n = chosen.len();
    let u = DMatrix::from_fn(n, n, |i, j| level_w[meet_level(chosen[i], chosen[j])]);
    UltrametricMatrix::new(u).expect("positive entries")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f4() -> UltrametricMatrix {
        UltrametricMatrix::from_rows(&[vec![1., 1., 1.], vec![1., 2., 1.], vec![1., 1., 3.]]).unwrap()
    }

    fn example(body: &[u32]) -> WordFamily {
        WordFamily {
            alphabet: 3,
            body: body.to_vec(),
            suffix: vec![1],
            weights: WeightSequence::linear().to_spec(),
        }
    }

    #[test]
    fn triple_scan() {
        assert_eq!(verify_ultrametric(&f4()).unwrap(), None);
        let bad = UltrametricMatrix::from_rows(&[vec![1., 0.3, 0.5], vec![0.3, 1., 0.4], vec![0.5, 0.4, 1.]]).unwrap();
        let v = verify_ultrametric(&bad).unwrap().unwrap();
        // U_12 = .3 < min(U_13, U_32) = .4
        assert_eq!((v.i, v.j, v.k), (0, 1, 2));
        assert!(!is_ultrametric_fast(&bad));
        assert!(is_ultrametric_fast(&f4()));
        let two = UltrametricMatrix::from_rows(&[vec![2., 0.7], vec![0.7, 5.]]).unwrap();
        assert_eq!(verify_ultrametric(&two).unwrap(), None);
        let asym = UltrametricMatrix::from_rows(&[vec![2., 0.7], vec![0.6, 5.]]).unwrap();
        assert_eq!(verify_ultrametric(&asym).unwrap_err().kind, ErrorKind::Domain);
    }

    #[test]
    fn hypotheses() {
        let r = check_hypotheses(&UltrametricMatrix::from_rows(&[vec![1., 1.], vec![1., 1.]]).unwrap());
        assert!(!r.h1);
        assert_eq!(r.h1_pair, Some((0, 1)));
        let r = check_hypotheses(&f4());
        assert!(r.passes());
        assert_eq!(r.values, vec![1., 2., 3.]);
        assert_eq!(r.class_counts, vec![1, 2, 1]);
        let err = minimal_tree_extension(&UltrametricMatrix::from_rows(&[vec![1., 1.], vec![1., 1.]]).unwrap());
        assert_eq!(err.unwrap_err().kind, ErrorKind::Hypothesis);
    }

    #[test]
    fn f4_extension() {
        let m = f4();
        let ext = minimal_tree_extension(&m).unwrap();
        assert_eq!(ext.len(), 4);
        let classes: Vec<(Vec<usize>, usize, Option<usize>)> =
            ext.nodes.iter().map(|x| (x.class.clone(), x.level, x.index)).collect();
        assert_eq!(
            classes,
            vec![
                (vec![0, 1, 2], 0, Some(0)),
                (vec![1], 1, Some(1)),
                (vec![2], 1, None),
                (vec![2], 2, Some(2)),
            ]
        );
        assert_eq!(ext.restriction(), m.u);
        assert_eq!(ext.u_neighbors(0), vec![1, 2]);
        assert_eq!(ext.u_neighbors(1), vec![0]);
        assert_eq!(ext.u_neighbors(2), vec![0]);
        assert!(ext.attraction_basin(2).contains(&2));
        assert_eq!(verify_ultrametric(&ext.u_tilde_matrix()).unwrap(), None);
    }

    #[test]
    fn f4_generator() {
        let m = f4();
        let ext = minimal_tree_extension(&m).unwrap();
        let g = ultrametric_generator(&m, &ext).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[-2.5, 1.0, 0.5, 1.0, -1.0, 0.0, 0.5, 0.0, -0.5]);
        assert!((g.dense() - &want).abs().max() < 1e-14);
        assert_eq!(g.get(1, 2), 0.0);
        assert_eq!(g.hitting[2], vec![(0, 0.5), (2, 0.5)]);
        let c = &g.certificate;
        assert!(c.certified, "{c:?}");
        assert_eq!(c.asymmetry, 0.0);
        assert_eq!(c.deficient_rows, vec![0]);
        // dense oracle
        let inv = m.u.clone().try_inverse().unwrap();
        assert!((g.dense() + inv).abs().max() < 1e-12);
        assert!(ext.basin_criterion().iter().all(|e| e.1));
    }

    #[test]
    fn f4_extension_of_functions() {
        let m = f4();
        let ext = minimal_tree_extension(&m).unwrap();
        let g = ultrametric_generator(&m, &ext).unwrap();
        let (x1, x3) = (0.3, -1.7);
        let ht = extend_values(&ext, &g, &[x1, 5.0, x3]).unwrap();
        assert_eq!(ht[2], (x1 + x3) / 2.0);
        assert_eq!(extension_residual(&ext, &ht).unwrap(), 0.0);
        let zero = extend_harmonic(&ext, &g, &[0.0; 3], 1e-12).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert_eq!(extend_harmonic(&ext, &g, &[1.0; 3], 1e-12).unwrap_err().kind, ErrorKind::Domain);
    }

    #[test]
    fn chain_of_two() {
        let m = UltrametricMatrix::from_rows(&[vec![1., 1.], vec![1., 2.]]).unwrap();
        let ext = minimal_tree_extension(&m).unwrap();
        assert_eq!(ext.added().count(), 0);
        assert_eq!(ext.len(), 2);
        let g = ultrametric_generator(&m, &ext).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -1.0]);
        assert!((g.dense() - want).abs().max() < 1e-15);
    }

    #[test]
    fn star_center_sees_all_leaves() {
        // centre at the root, leaves one level down, no added nodes
        let n = 5;
        let u = DMatrix::from_fn(n, n, |i, j| if i == j && i > 0 { 2.0 } else { 1.0 });
        let m = UltrametricMatrix::new(u).unwrap();
        let ext = minimal_tree_extension(&m).unwrap();
        assert_eq!(ext.u_neighbors(0), vec![1, 2, 3, 4]);
        assert_eq!(ext.u_neighbors(3), vec![0]);
    }

    #[test]
    fn word_window_extension_is_the_prefix_tree() {
        for body in [vec![0, 1, 2], vec![0, 2]] {
            let fam = example(&body);
            let (words, m) = fam.window(4).unwrap();
            assert!(is_ultrametric_fast(&m));
            let ext = minimal_tree_extension(&m).unwrap();
            // nodes are the proper prefixes of window members plus the members
            let mut prefixes: BTreeSet<Vec<u32>> = BTreeSet::new();
            for w in &words {
                for k in 0..=w.len() {
                    prefixes.insert(w[..k].to_vec());
                }
            }
            assert_eq!(ext.len(), prefixes.len());
            assert_eq!(ext.restriction(), m.u);
            let g = ultrametric_generator(&m, &ext).unwrap();
            assert!(g.certificate.certified, "{:?}", g.certificate);
        }
    }

    #[test]
    fn full_body_family_has_a_boundary() {
        let fam = example(&[0, 1, 2]);
        let b = u_boundary(&fam, 2, 40, 1e-6).unwrap();
        assert!(b.transient);
        assert_eq!(b.h4, H4Status::Certified);
        assert!(!b.empty);
        assert!(b.cylinders.iter().all(|c| c.compatible));
        assert_eq!(b.cylinders.len(), 9);
        let f: Vec<f64> = b.i_free_mass.iter().map(|e| e.1).collect();
        assert!(f.windows(2).all(|p| p[1] < p[0]));
        // mass is uniform: (2/3)^(D - n + 1)
        for &(d, v) in &b.i_free_mass {
            let want = (2.0f64 / 3.0).powi((d - 2 + 1) as i32);
            assert!((v - want).abs() < 1e-9 * want.max(1e-300) + 1e-15, "{d} {v} {want}");
        }
        assert!(b.u_mass > 1.0 - 1e-6);
        assert!(b.lemma_consistent);
    }

    #[test]
    fn gapped_body_family_has_empty_boundary() {
        let fam = example(&[0, 2]);
        let b = u_boundary(&fam, 2, 30, 1e-6).unwrap();
        assert!(b.transient);
        assert!(b.empty);
        assert_eq!(b.u_mass, 0.0);
        assert!(b.i_free_mass.iter().all(|e| (e.1 - 1.0).abs() < 1e-9));
        // every jump from an added node enters I with chance >= 1/4, yet no ray meets I
        assert_eq!(b.h4, H4Status::Certified);
        assert!(!b.lemma_consistent);
    }

    #[test]
    fn boundary_refuses_finite_and_deep_requests() {
        let fam = example(&[0, 1, 2]);
        assert_eq!(u_boundary(&fam, 9, 20, 1e-6).unwrap_err().kind, ErrorKind::Unrealized);
        assert_eq!(u_boundary(&fam, 3, 3, 1e-6).unwrap_err().kind, ErrorKind::Unrealized);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_dendrograms(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_dendrogram(&mut rng, 60);
            prop_assert!(verify_ultrametric(&m).unwrap().is_none());
            prop_assert!(is_ultrametric_fast(&m));
            let ext = minimal_tree_extension(&m).unwrap();
            prop_assert_eq!(ext.restriction(), m.u.clone());
            prop_assert!(is_ultrametric_fast(&ext.u_tilde_matrix()));
            // every node is an ancestor of some embedded index
            for (k, x) in ext.nodes.iter().enumerate() {
                let i = x.class[0];
                prop_assert!(ext.geodesic(0, ext.embedding[i]).contains(&k));
            }
            let g = ultrametric_generator(&m, &ext).unwrap();
            prop_assert!(g.certificate.certified, "{:?}", g.certificate);
            let inv = m.u.clone().try_inverse().unwrap();
            let scale = inv.abs().max().max(1.0);
            prop_assert!((g.dense() + inv).abs().max() <= 1e-10 * scale);
            prop_assert!(ext.basin_criterion().iter().all(|e| e.1));
        }
    }
}
