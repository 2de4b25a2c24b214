//! Circuit digraph, reduced incidence / fundamental cycle matrices and
//! spanning-tree enumeration.

use std::collections::VecDeque;
use std::ops::Range;

use num_bigint::BigInt;
use serde::Serialize;
use thiserror::Error;

use crate::netlist::DeviceKind;
use crate::rational::{q, QMatrix};

/// Default bound on the number of branches for tree enumeration.
pub const DEFAULT_TREE_CAP: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("circuit graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("tree enumeration limited to {cap} branches, graph has {branches}")]
    CapExceeded { branches: usize, cap: usize },
    #[error("branch {index} references node {node} but the graph has {n} nodes")]
    InvalidNode { index: usize, node: usize, n: usize },
    #[error("branch {index} is a self-loop")]
    SelfLoop { index: usize },
    #[error("branches must be ordered capacitors, inductors, memristors, resistors")]
    OutOfOrder,
    #[error("graph has no branches")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GraphBranch {
    pub tail: usize,
    pub head: usize,
    pub kind: DeviceKind,
}

/// Connected directed multigraph with branches in C, L, M, R block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitGraph {
    n: usize,
    ground: usize,
    branches: Vec<GraphBranch>,
}

/// Column ranges of the four device blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Blocks {
    pub c: Range<usize>,
    pub l: Range<usize>,
    pub m: Range<usize>,
    pub r: Range<usize>,
}

impl Blocks {
    pub fn of(&self, kind: DeviceKind) -> Range<usize> {
        match kind {
            DeviceKind::Capacitor => self.c.clone(),
            DeviceKind::Inductor => self.l.clone(),
            DeviceKind::Memristor => self.m.clone(),
            DeviceKind::Resistor => self.r.clone(),
        }
    }
}

impl CircuitGraph {
    pub fn new(n: usize, ground: usize, branches: Vec<GraphBranch>) -> Result<Self, GraphError> {
        if branches.is_empty() {
            return Err(GraphError::Empty);
        }
        if ground >= n {
            return Err(GraphError::InvalidNode {
                index: 0,
                node: ground,
                n,
            });
        }
        for (index, b) in branches.iter().enumerate() {
            for node in [b.tail, b.head] {
                if node >= n {
                    return Err(GraphError::InvalidNode { index, node, n });
                }
            }
            if b.tail == b.head {
                return Err(GraphError::SelfLoop { index });
            }
        }
        if branches.windows(2).any(|w| w[0].kind > w[1].kind) {
            return Err(GraphError::OutOfOrder);
        }
        let g = CircuitGraph {
            n,
            ground,
            branches,
        };
        let comps = g.components(|_| true);
        if comps > 1 {
            return Err(GraphError::Disconnected { components: comps });
        }
        Ok(g)
    }

    /// Build from branches in any order; returns the graph and, for each
    /// graph branch, the index of the input branch it came from.
    pub fn sorted(
        n: usize,
        ground: usize,
        branches: Vec<GraphBranch>,
    ) -> Result<(Self, Vec<usize>), GraphError> {
        let mut order: Vec<usize> = (0..branches.len()).collect();
        order.sort_by_key(|&i| branches[i].kind); // stable
        let sorted = order.iter().map(|&i| branches[i]).collect();
        Ok((Self::new(n, ground, sorted)?, order))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn branches(&self) -> &[GraphBranch] {
        &self.branches
    }

    pub fn kinds(&self) -> impl Iterator<Item = DeviceKind> + '_ {
        self.branches.iter().map(|b| b.kind)
    }

    pub fn count(&self, kind: DeviceKind) -> usize {
        self.kinds().filter(|&k| k == kind).count()
    }

    pub fn blocks(&self) -> Blocks {
        let mc = self.count(DeviceKind::Capacitor);
        let ml = self.count(DeviceKind::Inductor);
        let mm = self.count(DeviceKind::Memristor);
        let m = self.branch_count();
        Blocks {
            c: 0..mc,
            l: mc..mc + ml,
            m: mc + ml..mc + ml + mm,
            r: mc + ml + mm..m,
        }
    }

    /// Number of connected components using only branches accepted by `keep`.
    fn components(&self, keep: impl Fn(usize) -> bool) -> usize {
        let mut uf = UnionFind::new(self.n);
        let mut comps = self.n;
        for (i, b) in self.branches.iter().enumerate() {
            if keep(i) && uf.union(b.tail, b.head) {
                comps -= 1;
            }
        }
        comps
    }

    /// Rows of the reduced incidence matrix: every node except ground.
    pub fn non_ground_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| v != self.ground).collect()
    }

    /// Spanning tree found by breadth-first search from ground, scanning
    /// branches in index order.
    pub fn bfs_tree(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n];
        seen[self.ground] = true;
        let mut queue = VecDeque::from([self.ground]);
        let mut tree = Vec::new();
        while let Some(v) = queue.pop_front() {
            for (i, b) in self.branches.iter().enumerate() {
                let other = if b.tail == v {
                    b.head
                } else if b.head == v {
                    b.tail
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    tree.push(i);
                    queue.push_back(other);
                }
            }
        }
        tree.sort_unstable();
        tree
    }
}

#[derive(Debug, Clone)]
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false if `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyMatrices {
    /// Reduced incidence matrix, (n−1)×m: +1 at the tail node, −1 at the head.
    pub a: QMatrix,
    /// Fundamental cycle matrix, (m−n+1)×m.
    pub b: QMatrix,
    /// Spanning tree the cycle basis was built from.
    pub tree: Vec<usize>,
    pub blocks: Blocks,
}

impl TopologyMatrices {
    pub fn a_block(&self, kind: DeviceKind) -> QMatrix {
        self.a.columns(self.blocks.of(kind))
    }

    pub fn b_block(&self, kind: DeviceKind) -> QMatrix {
        self.b.columns(self.blocks.of(kind))
    }

    /// A·Bᵀ, which must vanish.
    pub fn cut_cycle_product(&self) -> QMatrix {
        self.a.mul(&self.b.transpose())
    }
}

pub fn topology_matrices(g: &CircuitGraph) -> Result<TopologyMatrices, GraphError> {
    let comps = g.components(|_| true);
    if comps > 1 {
        return Err(GraphError::Disconnected { components: comps });
    }
    let m = g.branch_count();
    let rows = g.non_ground_nodes();
    let mut row_of = vec![usize::MAX; g.n];
    for (r, &v) in rows.iter().enumerate() {
        row_of[v] = r;
    }
    let mut a = QMatrix::zeros(rows.len(), m);
    for (j, b) in g.branches.iter().enumerate() {
        if b.tail != g.ground {
            a[(row_of[b.tail], j)] = q(1);
        }
        if b.head != g.ground {
            a[(row_of[b.head], j)] = q(-1);
        }
    }

    let tree = g.bfs_tree();
    let mut in_tree = vec![false; m];
    for &t in &tree {
        in_tree[t] = true;
    }
    // Tree adjacency for path search.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); g.n];
    for &t in &tree {
        let b = g.branches[t];
        adj[b.tail].push((b.head, t));
        adj[b.head].push((b.tail, t));
    }
    let cotree: Vec<usize> = (0..m).filter(|&j| !in_tree[j]).collect();
    let mut bm = QMatrix::zeros(cotree.len(), m);
    for (r, &e) in cotree.iter().enumerate() {
        let br = g.branches[e];
        bm[(r, e)] = q(1);
        // Walk the tree from head back to tail; each step contributes ±1
        // depending on whether it follows the tree branch orientation.
        for (from, to, t) in tree_path(&adj, br.head, br.tail) {
            let tb = g.branches[t];
            let sign = if tb.tail == from && tb.head == to {
                1
            } else {
                -1
            };
            bm[(r, t)] = q(sign);
        }
    }
    Ok(TopologyMatrices {
        a,
        b: bm,
        tree,
        blocks: g.blocks(),
    })
}

/// Steps (from, to, branch) of the unique tree path from `s` to `t`.
fn tree_path(adj: &[Vec<(usize, usize)>], s: usize, t: usize) -> Vec<(usize, usize, usize)> {
    let n = adj.len();
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[s] = true;
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        if v == t {
            break;
        }
        for &(w, br) in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                prev[w] = Some((v, br));
                queue.push_back(w);
            }
        }
    }
    let mut path = Vec::new();
    let mut cur = t;
    while let Some((p, br)) = prev[cur] {
        path.push((p, cur, br));
        cur = p;
    }
    path.reverse();
    path
}

/// Unweighted matrix-tree count det(A·Aᵀ).
pub fn matrix_tree_count(t: &TopologyMatrices) -> BigInt {
    let d = t.a.mul(&t.a.transpose()).det();
    d.to_integer()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Constraint {
    Free,
    Include,
    Exclude,
}

pub fn spanning_trees(g: &CircuitGraph) -> Result<Vec<Vec<usize>>, GraphError> {
    spanning_trees_capped(g, DEFAULT_TREE_CAP)
}

pub fn spanning_trees_capped(g: &CircuitGraph, cap: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    enumerate_trees(g, cap, |_| Constraint::Free)
}

/// Spanning trees containing every capacitor and no inductor. Memristors
/// take part like resistors.
pub fn proper_trees(g: &CircuitGraph) -> Result<Vec<Vec<usize>>, GraphError> {
    proper_trees_capped(g, DEFAULT_TREE_CAP)
}

pub fn proper_trees_capped(g: &CircuitGraph, cap: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    enumerate_trees(g, cap, |k| match k {
        DeviceKind::Capacitor => Constraint::Include,
        DeviceKind::Inductor => Constraint::Exclude,
        _ => Constraint::Free,
    })
}

/// True when `set` satisfies the proper-tree rule on `g`.
pub fn is_proper(g: &CircuitGraph, set: &[usize]) -> bool {
    g.branches.iter().enumerate().all(|(i, b)| match b.kind {
        DeviceKind::Capacitor => set.contains(&i),
        DeviceKind::Inductor => !set.contains(&i),
        _ => true,
    })
}

fn enumerate_trees(
    g: &CircuitGraph,
    cap: usize,
    rule: impl Fn(DeviceKind) -> Constraint,
) -> Result<Vec<Vec<usize>>, GraphError> {
    let m = g.branch_count();
    if m > cap {
        return Err(GraphError::CapExceeded { branches: m, cap });
    }
    let comps = g.components(|_| true);
    if comps > 1 {
        return Err(GraphError::Disconnected { components: comps });
    }
    let cons: Vec<Constraint> = g.kinds().map(&rule).collect();
    let mut out = Vec::new();
    let mut chosen = Vec::with_capacity(g.n);
    let uf = UnionFind::new(g.n);
    descend(g, &cons, 0, uf, &mut chosen, &mut out);
    // Recursion visits "include" before "exclude" in index order, which is
    // already lexicographic; sort anyway so the contract does not depend on it.
    out.sort();
    Ok(out)
}

fn descend(
    g: &CircuitGraph,
    cons: &[Constraint],
    e: usize,
    uf: UnionFind,
    chosen: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    let m = g.branch_count();
    if chosen.len() == g.n - 1 {
        if cons[e..].iter().all(|&c| c != Constraint::Include) {
            out.push(chosen.clone());
        }
        return;
    }
    if e == m {
        return;
    }
    let b = g.branches[e];
    // Contract: take branch e if it joins two components.
    if cons[e] != Constraint::Exclude {
        let mut inc = uf.clone();
        if inc.union(b.tail, b.head) {
            chosen.push(e);
            descend(g, cons, e + 1, inc, chosen, out);
            chosen.pop();
        }
    }
    // Delete: skip branch e, provided the remaining candidates can still span.
    if cons[e] != Constraint::Include {
        let mut probe = uf.clone();
        let mut comps = (0..g.n).filter(|&v| probe.find(v) == v).count();
        for (j, bj) in g.branches.iter().enumerate().skip(e + 1) {
            if cons[j] != Constraint::Exclude && probe.union(bj.tail, bj.head) {
                comps -= 1;
            }
        }
        if comps == 1 {
            descend(g, cons, e + 1, uf, chosen, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NondegeneracyReport {
    pub m_c: usize,
    pub m_l: usize,
    pub rank_a_c: usize,
    pub rank_b_l: usize,
    /// Capacitor columns are independent (no capacitor-only loop).
    pub no_capacitor_loop: bool,
    /// Inductor columns of B are independent (no inductor-only cutset).
    pub no_inductor_cutset: bool,
    pub nondegenerate: bool,
}

pub fn nondegeneracy_check(g: &CircuitGraph, t: &TopologyMatrices) -> NondegeneracyReport {
    let m_c = g.count(DeviceKind::Capacitor);
    let m_l = g.count(DeviceKind::Inductor);
    let rank_a_c = t.a_block(DeviceKind::Capacitor).rank();
    let rank_b_l = t.b_block(DeviceKind::Inductor).rank();
    let no_capacitor_loop = rank_a_c == m_c;
    let no_inductor_cutset = rank_b_l == m_l;
    NondegeneracyReport {
        m_c,
        m_l,
        rank_a_c,
        rank_b_l,
        no_capacitor_loop,
        no_inductor_cutset,
        nondegenerate: no_capacitor_loop && no_inductor_cutset,
    }
}
