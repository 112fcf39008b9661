//! Rooted, locally finite trees: finite ones and lazily generated infinite ones.
//!
//! An infinite tree is described by a small rule graph (a `Shape`). A node's
//! subtree is determined by its rule and its level, so `(ShapeId, level)` is the
//! "type" of a node. Everything that has to look arbitrarily deep (escape
//! probabilities, exit masses) works on types instead of realized nodes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, schema, Error, ErrorKind, Result};
use crate::weights::WeightSpec;

const MODULE: &str = "tree_core";

/// Child counts that depend on the level only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    #[serde(default)]
    pub prefix: Vec<usize>,
    pub tail: CountTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountTail {
    Const(usize),
    /// `base^(level + shift)` children at `level`.
    Power { base: usize, shift: i64 },
}

impl Counts {
    pub fn constant(b: usize) -> Self {
        Counts {
            prefix: Vec::new(),
            tail: CountTail::Const(b),
        }
    }

    pub fn at(&self, level: usize) -> usize {
        if let Some(&c) = self.prefix.get(level) {
            return c;
        }
        match self.tail {
            CountTail::Const(b) => b,
            CountTail::Power { base, shift } => {
                let e = level as i64 + shift;
                base.checked_pow(e as u32).unwrap_or(usize::MAX)
            }
        }
    }

    /// Count as a float, exact where `at` would saturate.
    pub fn at_f64(&self, level: usize) -> f64 {
        match (self.prefix.get(level), self.tail) {
            (None, CountTail::Power { base, shift }) => (base as f64).powi((level as i64 + shift) as i32),
            _ => self.at(level) as f64,
        }
    }

    /// `(start, a, b)` with `count(n) = a * b^n` for every `n >= start`.
    pub fn geometric_form(&self) -> (usize, f64, f64) {
        let start = self.prefix.len();
        match self.tail {
            CountTail::Const(b) => (start, b as f64, 1.0),
            CountTail::Power { base, shift } => {
                let b = base as f64;
                (start, b.powi(shift as i32), b)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.prefix.iter().any(|&c| c == 0) {
            return Err(schema(MODULE, "zero-child interior node in an infinite kind"));
        }
        match self.tail {
            CountTail::Const(0) => Err(schema(MODULE, "zero-child interior node in an infinite kind")),
            CountTail::Power { base: 0, .. } => Err(schema(MODULE, "power tail needs base >= 1")),
            CountTail::Power { shift, .. } if (self.prefix.len() as i64) + shift < 0 => {
                Err(schema(MODULE, "power tail exponent negative at the first tail level"))
            }
            _ => Ok(()),
        }
    }
}

/// Recursive description of a subtree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Every node below has the level-dependent number of children.
    Uniform(Counts),
    /// Explicit children, one rule each. `Split([])` is a leaf.
    Split(Vec<Rule>),
    /// Explicit children where `null` means "this same rule again, one level down".
    Repeat(Vec<Option<Rule>>),
}

pub type ShapeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeNode {
    Uniform(Counts),
    Split(Vec<ShapeId>),
    Repeat(Vec<ShapeId>),
}

/// Interned rule graph. `Repeat` children may point back to the node itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    nodes: Vec<ShapeNode>,
    root: ShapeId,
}

impl Shape {
    pub fn from_rule(rule: &Rule) -> Shape {
        let mut nodes = Vec::new();
        let root = intern(rule, &mut nodes);
        Shape { nodes, root }
    }

    pub fn root(&self) -> ShapeId {
        self.root
    }

    pub fn node(&self, s: ShapeId) -> &ShapeNode {
        &self.nodes[s]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn child_count(&self, s: ShapeId, level: usize) -> usize {
        match &self.nodes[s] {
            ShapeNode::Uniform(c) => c.at(level),
            ShapeNode::Split(v) | ShapeNode::Repeat(v) => v.len(),
        }
    }

    pub fn child(&self, s: ShapeId, _level: usize, k: usize) -> ShapeId {
        match &self.nodes[s] {
            ShapeNode::Uniform(_) => s,
            ShapeNode::Split(v) | ShapeNode::Repeat(v) => v[k],
        }
    }

    pub fn counts(&self, s: ShapeId) -> Option<&Counts> {
        match &self.nodes[s] {
            ShapeNode::Uniform(c) => Some(c),
            _ => None,
        }
    }

    /// A shape without `Uniform` or `Repeat` nodes describes a finite tree.
    pub fn is_finite(&self) -> bool {
        self.nodes.iter().all(|n| matches!(n, ShapeNode::Split(_)))
    }

    /// Depth of the deepest leaf, for finite shapes.
    pub fn finite_depth(&self) -> Option<usize> {
        if !self.is_finite() {
            return None;
        }
        fn go(sh: &Shape, s: ShapeId) -> usize {
            match &sh.nodes[s] {
                ShapeNode::Split(v) => v.iter().map(|&c| 1 + go(sh, c)).max().unwrap_or(0),
                _ => unreachable!(),
            }
        }
        Some(go(self, self.root))
    }

    /// Shape of the node at `path`, checking every child index.
    pub fn shape_at(&self, path: &[u32]) -> Result<ShapeId> {
        let mut s = self.root;
        for (lvl, &k) in path.iter().enumerate() {
            let n = self.child_count(s, lvl);
            if k as usize >= n {
                return Err(Error::new(
                    ErrorKind::Domain,
                    MODULE,
                    format!("child index {k} at level {lvl} out of range ({n} children)"),
                )
                .with_context(serde_json::json!({"path": path_string(path)})));
            }
            s = self.child(s, lvl, k as usize);
        }
        Ok(s)
    }

    /// Shapes along a path, `out[k]` being the shape at level `k`.
    pub fn shapes_along(&self, path: &[u32]) -> Result<Vec<ShapeId>> {
        let mut out = Vec::with_capacity(path.len() + 1);
        let mut s = self.root;
        out.push(s);
        for (lvl, &k) in path.iter().enumerate() {
            if k as usize >= self.child_count(s, lvl) {
                return Err(domain(MODULE, format!("path {} leaves the tree", path_string(path))));
            }
            s = self.child(s, lvl, k as usize);
            out.push(s);
        }
        Ok(out)
    }

    /// Reject leaves reachable in an infinite description.
    fn validate_infinite(&self) -> Result<()> {
        for n in &self.nodes {
            match n {
                ShapeNode::Uniform(c) => c.validate()?,
                ShapeNode::Split(v) | ShapeNode::Repeat(v) if v.is_empty() => {
                    return Err(schema(MODULE, "zero-child interior node in an infinite kind"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn intern(rule: &Rule, nodes: &mut Vec<ShapeNode>) -> ShapeId {
    match rule {
        Rule::Uniform(c) => {
            nodes.push(ShapeNode::Uniform(c.clone()));
            nodes.len() - 1
        }
        Rule::Split(children) => {
            let ids = children.iter().map(|c| intern(c, nodes)).collect();
            nodes.push(ShapeNode::Split(ids));
            nodes.len() - 1
        }
        Rule::Repeat(children) => {
            let me = nodes.len();
            nodes.push(ShapeNode::Repeat(Vec::new()));
            let ids = children
                .iter()
                .map(|c| match c {
                    None => me,
                    Some(r) => intern(r, nodes),
                })
                .collect();
            nodes[me] = ShapeNode::Repeat(ids);
            me
        }
    }
}

/// Dot-joined child indices; the root is the empty string.
pub fn path_string(path: &[u32]) -> String {
    let mut s = String::new();
    for (k, i) in path.iter().enumerate() {
        if k > 0 {
            s.push('.');
        }
        let _ = write!(s, "{i}");
    }
    s
}

pub fn parse_path(s: &str) -> Result<Vec<u32>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('.')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| schema(MODULE, format!("bad node path {s:?}")))
        })
        .collect()
}

/// Length of the common prefix of two child-index paths, i.e. `|i ∧ j|`.
pub fn meet_level(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Child list entry of a finite spec: a count or explicit labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChildList {
    Count(usize),
    Labels(Vec<String>),
}

impl ChildList {
    fn len(&self) -> usize {
        match self {
            ChildList::Count(n) => *n,
            ChildList::Labels(v) => v.len(),
        }
    }
}

/// JSON tree description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub kind: TreeKind,
    #[serde(default, skip_serializing_if = "HashMap::is_empty")]
    pub children: HashMap<String, ChildList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Finite,
    Branching,
    Homogeneous,
}

impl TreeSpec {
    pub fn from_json(text: &str) -> Result<TreeSpec> {
        serde_json::from_str(text).map_err(|e| schema(MODULE, format!("tree spec: {e}")))
    }

    pub fn homogeneous(p: usize) -> TreeSpec {
        TreeSpec {
            kind: TreeKind::Homogeneous,
            children: HashMap::new(),
            root: None,
            rule: None,
            p: Some(p),
            weights: None,
        }
    }

    pub fn branching(rule: Rule) -> TreeSpec {
        TreeSpec {
            kind: TreeKind::Branching,
            children: HashMap::new(),
            root: None,
            rule: Some(rule),
            p: None,
            weights: None,
        }
    }

    /// Finite spec from explicit child counts keyed by path.
    pub fn finite(children: &[(&[u32], usize)]) -> TreeSpec {
        TreeSpec {
            kind: TreeKind::Finite,
            children: children
                .iter()
                .map(|(p, n)| (path_string(p), ChildList::Count(*n)))
                .collect(),
            root: None,
            rule: None,
            p: None,
            weights: None,
        }
    }

    /// Rule graph and node labels described by this spec.
    pub fn shape(&self) -> Result<(Shape, HashMap<Vec<u32>, String>)> {
        match self.kind {
            TreeKind::Homogeneous => {
                let p = self.p.ok_or_else(|| schema(MODULE, "homogeneous spec needs \"p\""))?;
                if p < 2 {
                    return Err(schema(MODULE, "homogeneous spec needs p >= 2"));
                }
                let sub = Rule::Uniform(Counts::constant(p));
                let shape = Shape::from_rule(&Rule::Split(vec![sub; p + 1]));
                Ok((shape, HashMap::new()))
            }
            TreeKind::Branching => {
                let rule = self
                    .rule
                    .as_ref()
                    .ok_or_else(|| schema(MODULE, "branching spec needs \"rule\""))?;
                let shape = Shape::from_rule(rule);
                shape.validate_infinite()?;
                Ok((shape, HashMap::new()))
            }
            TreeKind::Finite => self.finite_shape(),
        }
    }

    fn finite_shape(&self) -> Result<(Shape, HashMap<Vec<u32>, String>)> {
        let mut kids: HashMap<Vec<u32>, &ChildList> = HashMap::new();
        for (k, v) in &self.children {
            kids.insert(parse_path(k)?, v);
        }
        // every listed path must hang off an existing parent slot
        for p in kids.keys() {
            if let Some((&last, parent)) = p.split_last() {
                let n = kids.get(parent).map(|c| c.len()).unwrap_or(0);
                if (last as usize) >= n {
                    return Err(schema(MODULE, format!("orphan node path {:?}", path_string(p)))
                        .with_context(serde_json::json!({"path": path_string(p)})));
                }
            }
        }
        let mut labels = HashMap::new();
        if let Some(r) = &self.root {
            labels.insert(Vec::new(), r.clone());
        }
        fn build(
            path: &mut Vec<u32>,
            kids: &HashMap<Vec<u32>, &ChildList>,
            labels: &mut HashMap<Vec<u32>, String>,
        ) -> Rule {
            let Some(cl) = kids.get(path.as_slice()) else {
                return Rule::Split(Vec::new());
            };
            let mut out = Vec::with_capacity(cl.len());
            for k in 0..cl.len() {
                path.push(k as u32);
                if let ChildList::Labels(v) = cl {
                    labels.insert(path.clone(), v[k].clone());
                }
                out.push(build(path, kids, labels));
                path.pop();
            }
            Rule::Split(out)
        }
        let rule = build(&mut Vec::new(), &kids, &mut labels);
        Ok((Shape::from_rule(&rule), labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
struct NodeRec {
    parent: Option<NodeId>,
    level: usize,
    shape: ShapeId,
    path: Vec<u32>,
    children: Vec<NodeId>,
}

/// Realized prefix of a tree. Extension only appends, so ids stay valid.
#[derive(Debug, Clone)]
pub struct RootedTree {
    shape: Arc<Shape>,
    nodes: Vec<NodeRec>,
    levels: Vec<Vec<NodeId>>,
    labels: HashMap<Vec<u32>, String>,
    finite: bool,
}

/// Realize `spec` down to `depth_cap` (finite specs are realized completely).
pub fn build_tree(spec: &TreeSpec, depth_cap: usize) -> Result<RootedTree> {
    let (shape, labels) = spec.shape()?;
    let mut t = RootedTree::from_shape(Arc::new(shape), depth_cap);
    t.labels = labels;
    Ok(t)
}

impl RootedTree {
    pub fn from_shape(shape: Arc<Shape>, depth_cap: usize) -> RootedTree {
        let finite = shape.is_finite();
        let root = NodeRec {
            parent: None,
            level: 0,
            shape: shape.root(),
            path: Vec::new(),
            children: Vec::new(),
        };
        let mut t = RootedTree {
            shape,
            nodes: vec![root],
            levels: vec![vec![NodeId(0)]],
            labels: HashMap::new(),
            finite,
        };
        let cap = if finite {
            t.shape.finite_depth().unwrap_or(0)
        } else {
            depth_cap
        };
        t.extend_to(cap);
        t
    }

    pub fn shape(&self) -> &Arc<Shape> {
        &self.shape
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.finite
    }

    /// Deepest realized level.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// Realize every node of level `<= depth`. Idempotent; no-op for finite trees.
    pub fn extend_to(&mut self, depth: usize) {
        while self.levels.len() <= depth {
            let lvl = self.levels.len() - 1;
            let mut next = Vec::new();
            for &id in &self.levels[lvl].clone() {
                let s = self.nodes[id.0].shape;
                let n = self.shape.child_count(s, lvl);
                for k in 0..n {
                    let child = NodeId(self.nodes.len());
                    let mut path = self.nodes[id.0].path.clone();
                    path.push(k as u32);
                    self.nodes.push(NodeRec {
                        parent: Some(id),
                        level: lvl + 1,
                        shape: self.shape.child(s, lvl, k),
                        path,
                        children: Vec::new(),
                    });
                    self.nodes[id.0].children.push(child);
                    next.push(child);
                }
            }
            if next.is_empty() {
                break;
            }
            self.levels.push(next);
        }
    }

    fn rec(&self, i: NodeId) -> Result<&NodeRec> {
        self.nodes.get(i.0).ok_or_else(|| {
            Error::new(ErrorKind::Unrealized, MODULE, format!("node {} not realized", i.0))
        })
    }

    pub fn level(&self, i: NodeId) -> usize {
        self.nodes[i.0].level
    }

    pub fn parent(&self, i: NodeId) -> Option<NodeId> {
        self.nodes[i.0].parent
    }

    pub fn children(&self, i: NodeId) -> &[NodeId] {
        &self.nodes[i.0].children
    }

    pub fn path(&self, i: NodeId) -> &[u32] {
        &self.nodes[i.0].path
    }

    pub fn shape_id(&self, i: NodeId) -> ShapeId {
        self.nodes[i.0].shape
    }

    /// Number of children the node has in the full tree (realized or not).
    pub fn child_count(&self, i: NodeId) -> usize {
        let r = &self.nodes[i.0];
        self.shape.child_count(r.shape, r.level)
    }

    /// Leaf of the full tree (only finite branches have these).
    pub fn is_leaf(&self, i: NodeId) -> bool {
        self.child_count(i) == 0
    }

    /// All children realized, so the generator row of `i` is fully known.
    pub fn row_complete(&self, i: NodeId) -> bool {
        self.children(i).len() == self.child_count(i)
    }

    pub fn node_at(&self, path: &[u32]) -> Option<NodeId> {
        let mut id = NodeId(0);
        for &k in path {
            id = *self.nodes[id.0].children.get(k as usize)?;
        }
        Some(id)
    }

    pub fn level_nodes(&self, n: usize) -> &[NodeId] {
        self.levels.get(n).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Nodes of level `<= n`, in level order.
    pub fn window(&self, n: usize) -> Vec<NodeId> {
        self.levels.iter().take(n + 1).flatten().copied().collect()
    }

    pub fn label(&self, i: NodeId) -> String {
        let p = &self.nodes[i.0].path;
        match self.labels.get(p) {
            Some(l) => l.clone(),
            None => path_string(p),
        }
    }

    pub fn find_label(&self, name: &str) -> Option<NodeId> {
        if let Some((p, _)) = self.labels.iter().find(|(_, l)| l.as_str() == name) {
            return self.node_at(p);
        }
        parse_path(name).ok().and_then(|p| self.node_at(&p))
    }

    /// Deepest common ancestor.
    pub fn meet(&self, i: NodeId, j: NodeId) -> Result<NodeId> {
        self.rec(i)?;
        self.rec(j)?;
        let (mut a, mut b) = (i, j);
        while self.level(a) > self.level(b) {
            a = self.parent(a).unwrap();
        }
        while self.level(b) > self.level(a) {
            b = self.parent(b).unwrap();
        }
        while a != b {
            a = self.parent(a).unwrap();
            b = self.parent(b).unwrap();
        }
        Ok(a)
    }

    /// Path `i -> ... -> i∧j -> ... -> j`.
    pub fn geodesic(&self, i: NodeId, j: NodeId) -> Result<Vec<NodeId>> {
        let m = self.meet(i, j)?;
        let mut up = vec![i];
        let mut a = i;
        while a != m {
            a = self.parent(a).unwrap();
            up.push(a);
        }
        let mut down = Vec::new();
        let mut b = j;
        while b != m {
            down.push(b);
            b = self.parent(b).unwrap();
        }
        up.extend(down.into_iter().rev());
        Ok(up)
    }

    /// `true` when `j` lies in the subtree of `i`.
    pub fn is_ancestor(&self, i: NodeId, j: NodeId) -> bool {
        let (pi, pj) = (self.path(i), self.path(j));
        pj.len() >= pi.len() && &pj[..pi.len()] == pi
    }

    /// Atoms of the level-`n` partition of the boundary, one per node of level `n`.
    pub fn cylinder_atoms(&mut self, n: usize) -> Result<Vec<NodeId>> {
        if self.finite {
            if n > self.depth() {
                return Err(Error::new(
                    ErrorKind::Unrealized,
                    MODULE,
                    format!("level {n} beyond the finite tree depth {}", self.depth()),
                ));
            }
        } else {
            self.extend_to(n);
        }
        Ok(self.level_nodes(n).to_vec())
    }
}

/// Boundary point known to a finite resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct BoundaryRay {
    prefix: Vec<u32>,
}

impl BoundaryRay {
    pub fn new(prefix: Vec<u32>) -> Self {
        BoundaryRay { prefix }
    }

    pub fn resolution(&self) -> usize {
        self.prefix.len()
    }

    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }

    /// Child-index path of `ξ(n)`.
    pub fn at(&self, n: usize) -> Result<&[u32]> {
        self.prefix.get(..n).ok_or_else(|| {
            Error::new(
                ErrorKind::Unrealized,
                MODULE,
                format!("ray resolution {} < {n}", self.prefix.len()),
            )
        })
    }

    /// Same ray continued by first children up to resolution `n`.
    pub fn extended(&self, shape: &Shape, n: usize) -> Result<BoundaryRay> {
        let mut p = self.prefix.clone();
        if p.len() >= n {
            return Ok(self.clone());
        }
        let mut s = shape.shape_at(&p)?;
        while p.len() < n {
            let lvl = p.len();
            if shape.child_count(s, lvl) == 0 {
                return Err(domain(MODULE, format!("ray hits a leaf at {}", path_string(&p))));
            }
            s = shape.child(s, lvl, 0);
            p.push(0);
        }
        Ok(BoundaryRay { prefix: p })
    }
}
