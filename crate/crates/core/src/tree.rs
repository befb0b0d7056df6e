//! Undirected labeled trees over observed and hidden nodes.
//!
//! Trees are immutable after construction: every transformation returns a new
//! tree, so values can be shared freely across threads.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

/// Identifier of a tree node. Observed and hidden ids live in separate
/// namespaces so observed ids survive every transformation; hidden ids may be
/// renamed by learners.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum NodeId {
    /// An observed variable.
    Observed(u32),
    /// A latent variable.
    Hidden(u32),
}

impl NodeId {
    /// True for hidden nodes.
    pub fn is_hidden(&self) -> bool {
        matches!(self, NodeId::Hidden(_))
    }

    /// True for observed nodes.
    pub fn is_observed(&self) -> bool {
        matches!(self, NodeId::Observed(_))
    }

    /// Signed integer encoding used in the JSON edge list: observed `n`
    /// maps to `n`, hidden `n` maps to `-1 - n`.
    pub fn to_signed(&self) -> i64 {
        match self {
            NodeId::Observed(n) => *n as i64,
            NodeId::Hidden(n) => -1 - (*n as i64),
        }
    }

    /// Inverse of [`NodeId::to_signed`].
    pub fn from_signed(v: i64) -> NodeId {
        if v >= 0 {
            NodeId::Observed(v as u32)
        } else {
            NodeId::Hidden((-1 - v) as u32)
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Observed(n) => write!(f, "{n}"),
            NodeId::Hidden(n) => write!(f, "h{n}"),
        }
    }
}

/// Canonical undirected edge key: endpoints in sorted order.
pub(crate) fn edge_key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

/// An undirected tree over observed and hidden nodes, with optional per-edge
/// information distances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentTree {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
    lengths: BTreeMap<(NodeId, NodeId), f64>,
    labels: BTreeMap<NodeId, String>,
}

impl LatentTree {
    /// Empty tree.
    pub fn new() -> Self {
        LatentTree::default()
    }

    /// Builds a tree from an edge list with optional lengths. Isolated nodes
    /// can be added afterwards with [`LatentTree::add_node`]; the result is
    /// validated by [`LatentTree::validate`].
    pub fn from_edges(edges: &[(NodeId, NodeId, Option<f64>)]) -> Result<Self> {
        let mut t = LatentTree::new();
        for &(u, v, d) in edges {
            t.add_node(u);
            t.add_node(v);
            t.add_edge(u, v, d)?;
        }
        t.validate()?;
        Ok(t)
    }

    /// Inserts a node if absent.
    pub fn add_node(&mut self, id: NodeId) {
        self.adj.entry(id).or_default();
    }

    /// Attaches a label to a node.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.labels.insert(id, label.into());
    }

    /// Label of a node, if any.
    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.labels.get(&id).map(|s| s.as_str())
    }

    /// Inserts an undirected edge; endpoints must already exist.
    pub fn add_edge(&mut self, u: NodeId, v: NodeId, d: Option<f64>) -> Result<()> {
        if !self.adj.contains_key(&u) {
            return Err(Error::UnknownNode(u));
        }
        if !self.adj.contains_key(&v) {
            return Err(Error::UnknownNode(v));
        }
        if u == v {
            return Err(Error::InvalidTree("self loop".into()));
        }
        self.adj.get_mut(&u).unwrap().insert(v);
        self.adj.get_mut(&v).unwrap().insert(u);
        if let Some(d) = d {
            self.lengths.insert(edge_key(u, v), d);
        }
        Ok(())
    }

    /// Removes an edge, keeping both endpoints.
    pub fn remove_edge(&mut self, u: NodeId, v: NodeId) -> Result<()> {
        let present = self.adj.get(&u).is_some_and(|s| s.contains(&v));
        if !present {
            return Err(Error::NoSuchEdge(u, v));
        }
        self.adj.get_mut(&u).unwrap().remove(&v);
        self.adj.get_mut(&v).unwrap().remove(&u);
        self.lengths.remove(&edge_key(u, v));
        Ok(())
    }

    /// Removes a node and all incident edges.
    pub fn remove_node(&mut self, u: NodeId) {
        if let Some(nbrs) = self.adj.remove(&u) {
            for v in nbrs {
                self.adj.get_mut(&v).unwrap().remove(&u);
                self.lengths.remove(&edge_key(u, v));
            }
        }
        self.labels.remove(&u);
    }

    /// All node ids in sorted order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    /// Observed node ids in sorted order.
    pub fn observed(&self) -> Vec<NodeId> {
        self.nodes().filter(|n| n.is_observed()).collect()
    }

    /// Hidden node ids in sorted order.
    pub fn hidden(&self) -> Vec<NodeId> {
        self.nodes().filter(|n| n.is_hidden()).collect()
    }

    /// Number of nodes.
    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Number of edges.
    pub fn edge_count(&self) -> usize {
        self.adj.values().map(|s| s.len()).sum::<usize>() / 2
    }

    /// True if the node is present.
    pub fn contains(&self, id: NodeId) -> bool {
        self.adj.contains_key(&id)
    }

    /// Neighbors of a node in sorted order.
    pub fn neighbors(&self, id: NodeId) -> Result<impl Iterator<Item = NodeId> + '_> {
        self.adj
            .get(&id)
            .map(|s| s.iter().copied())
            .ok_or(Error::UnknownNode(id))
    }

    /// Degree of a node.
    pub fn degree(&self, id: NodeId) -> Result<usize> {
        self.adj.get(&id).map(|s| s.len()).ok_or(Error::UnknownNode(id))
    }

    /// True if the edge is present.
    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adj.get(&u).is_some_and(|s| s.contains(&v))
    }

    /// Length attached to an edge, if any.
    pub fn edge_length(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.lengths.get(&edge_key(u, v)).copied()
    }

    /// All edges `(u, v, length)` with `u < v`, in sorted order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, Option<f64>)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (&u, nbrs) in &self.adj {
            for &v in nbrs {
                if u < v {
                    out.push((u, v, self.edge_length(u, v)));
                }
            }
        }
        out
    }

    /// Checks connectivity and acyclicity (`|E| = |W| - 1`, single component)
    /// and that stored edge lengths are positive and finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        if self.edge_count() != n - 1 {
            return Err(Error::InvalidTree(format!(
                "{} edges for {} nodes",
                self.edge_count(),
                n
            )));
        }
        let root = *self.adj.keys().next().unwrap();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([root]);
        seen.insert(root);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[&u] {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        if seen.len() != n {
            return Err(Error::InvalidTree("not connected".into()));
        }
        for (&(u, v), &d) in &self.lengths {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::InvalidTree(format!(
                    "edge ({u}, {v}) has invalid length {d}"
                )));
            }
        }
        Ok(())
    }

    /// BFS hop distances from `start` to every node.
    fn bfs_hops(&self, start: NodeId) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::new();
        dist.insert(start, 0usize);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for &v in &self.adj[&u] {
                if !dist.contains_key(&v) {
                    dist.insert(v, du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// The unique simple path from `i` to `j` as a list of directed edges;
    /// empty iff `i == j`.
    pub fn path(&self, i: NodeId, j: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        if !self.contains(i) {
            return Err(Error::UnknownNode(i));
        }
        if !self.contains(j) {
            return Err(Error::UnknownNode(j));
        }
        if i == j {
            return Ok(Vec::new());
        }
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut queue = VecDeque::from([i]);
        parent.insert(i, i);
        'outer: while let Some(u) = queue.pop_front() {
            for &v in &self.adj[&u] {
                if !parent.contains_key(&v) {
                    parent.insert(v, u);
                    if v == j {
                        break 'outer;
                    }
                    queue.push_back(v);
                }
            }
        }
        let mut rev = Vec::new();
        let mut cur = j;
        while cur != i {
            let p = parent[&cur];
            rev.push((p, cur));
            cur = p;
        }
        rev.reverse();
        Ok(rev)
    }

    /// Sum of edge lengths along the path from `i` to `j`. `None` if any
    /// edge on the path carries no length.
    pub fn path_length(&self, i: NodeId, j: NodeId) -> Result<Option<f64>> {
        let mut total = 0.0;
        for (u, v) in self.path(i, j)? {
            match self.edge_length(u, v) {
                Some(d) => total += d,
                None => return Ok(None),
            }
        }
        Ok(Some(total))
    }

    /// Maximum hop distance of a hidden node to its closest observed node;
    /// zero iff there are no hidden nodes.
    pub fn effective_depth(&self) -> usize {
        // Multi-source BFS from the observed set.
        let mut dist: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for v in self.nodes().filter(NodeId::is_observed) {
            dist.insert(v, 0);
            queue.push_back(v);
        }
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for &v in &self.adj[&u] {
                if !dist.contains_key(&v) {
                    dist.insert(v, du + 1);
                    queue.push_back(v);
                }
            }
        }
        self.nodes()
            .filter(NodeId::is_hidden)
            .map(|h| dist[&h])
            .max()
            .unwrap_or(0)
    }

    /// Longest hop distance between any two nodes.
    pub fn diameter(&self) -> usize {
        let Some(start) = self.nodes().next() else {
            return 0;
        };
        let d0 = self.bfs_hops(start);
        let (&far, _) = d0.iter().max_by_key(|(_, &d)| d).unwrap();
        let d1 = self.bfs_hops(far);
        d1.values().copied().max().unwrap_or(0)
    }

    /// Maximum node degree.
    pub fn max_degree(&self) -> usize {
        self.adj.values().map(|s| s.len()).max().unwrap_or(0)
    }

    /// Nodes of degree one (or the single node of a one-node tree).
    pub fn leaves(&self) -> BTreeSet<NodeId> {
        if self.node_count() == 1 {
            return self.nodes().collect();
        }
        self.adj
            .iter()
            .filter(|(_, s)| s.len() == 1)
            .map(|(&n, _)| n)
            .collect()
    }

    /// True iff every hidden node has degree at least three, so the tree
    /// contains no redundant hidden nodes.
    pub fn is_minimal(&self) -> bool {
        self.adj
            .iter()
            .all(|(n, s)| n.is_observed() || s.len() >= 3)
    }

    /// Contracts the edge `(keep, drop)`: neighbors of `drop` re-attach to
    /// `keep` and `drop` disappears. The removed endpoint must be hidden so
    /// that observed labels survive. When both endpoints are hidden the first
    /// argument survives.
    pub fn contract_edge(&self, keep: NodeId, drop: NodeId) -> Result<LatentTree> {
        if !self.has_edge(keep, drop) {
            return Err(Error::NoSuchEdge(keep, drop));
        }
        if !drop.is_hidden() {
            return Err(Error::InvalidContraction(keep, drop));
        }
        let mut t = self.clone();
        let moved: Vec<NodeId> = t.adj[&drop].iter().copied().filter(|&v| v != keep).collect();
        let moved_lengths: Vec<Option<f64>> =
            moved.iter().map(|&v| t.edge_length(drop, v)).collect();
        t.remove_node(drop);
        for (&v, d) in moved.iter().zip(moved_lengths) {
            t.add_edge(keep, v, d)?;
        }
        Ok(t)
    }

    /// Observed-label bipartitions induced by the edges.
    pub fn splits(&self) -> SplitSet {
        let mut splits = Vec::new();
        for (u, v, _) in self.edges() {
            // Observed nodes on the u-side of the removed edge.
            let mut side = BTreeSet::new();
            let mut queue = VecDeque::from([u]);
            let mut seen = BTreeSet::from([u, v]);
            while let Some(x) = queue.pop_front() {
                if let NodeId::Observed(n) = x {
                    side.insert(n);
                }
                for &y in &self.adj[&x] {
                    if seen.insert(y) {
                        queue.push_back(y);
                    }
                }
            }
            let all: BTreeSet<u32> = self
                .nodes()
                .filter_map(|n| match n {
                    NodeId::Observed(k) => Some(k),
                    NodeId::Hidden(_) => None,
                })
                .collect();
            let other: BTreeSet<u32> = all.difference(&side).copied().collect();
            if side.is_empty() || other.is_empty() {
                // Pendant hidden subtree: no observed split.
                continue;
            }
            // Canonical block: the side containing the smallest observed id.
            let min = *all.iter().next().unwrap();
            let block = if side.contains(&min) { side } else { other };
            splits.push(block.into_iter().collect::<Vec<u32>>());
        }
        splits.sort();
        SplitSet { splits }
    }

    /// Robinson-Foulds distance: multiset symmetric difference of the two
    /// trees' observed-label split sets.
    pub fn robinson_foulds(&self, other: &LatentTree) -> Result<usize> {
        let a: BTreeSet<NodeId> = self.observed().into_iter().collect();
        let b: BTreeSet<NodeId> = other.observed().into_iter().collect();
        if a != b {
            return Err(Error::LabelMismatch);
        }
        Ok(self.splits().symmetric_difference(&other.splits()))
    }

    /// True iff an isomorphism exists that fixes observed labels and bijects
    /// hidden nodes.
    pub fn equal_up_to_hidden_relabel(&self, other: &LatentTree) -> Result<bool> {
        let a: BTreeSet<NodeId> = self.observed().into_iter().collect();
        let b: BTreeSet<NodeId> = other.observed().into_iter().collect();
        if a != b {
            return Err(Error::LabelMismatch);
        }
        if self.node_count() != other.node_count() {
            return Ok(false);
        }
        let ca = self.centers();
        let cb = other.centers();
        let codes_a: Vec<String> = ca.iter().map(|&c| self.canonical_code(c)).collect();
        let codes_b: Vec<String> = cb.iter().map(|&c| other.canonical_code(c)).collect();
        Ok(codes_a.iter().any(|x| codes_b.iter().any(|y| x == y)))
    }

    /// The one or two middle nodes obtained by iterative leaf stripping.
    fn centers(&self) -> Vec<NodeId> {
        let mut degree: BTreeMap<NodeId, usize> =
            self.adj.iter().map(|(&n, s)| (n, s.len())).collect();
        let mut alive: BTreeSet<NodeId> = self.nodes().collect();
        let mut frontier: Vec<NodeId> = alive
            .iter()
            .copied()
            .filter(|n| degree[n] <= 1)
            .collect();
        while alive.len() > 2 {
            let mut next = Vec::new();
            for &leaf in &frontier {
                alive.remove(&leaf);
                for &v in &self.adj[&leaf] {
                    if alive.contains(&v) {
                        let d = degree.get_mut(&v).unwrap();
                        *d -= 1;
                        if *d == 1 {
                            next.push(v);
                        }
                    }
                }
            }
            frontier = next;
        }
        alive.into_iter().collect()
    }

    /// AHU-style canonical encoding of the tree rooted at `root`. Observed
    /// nodes carry their id, hidden nodes are anonymous.
    fn canonical_code(&self, root: NodeId) -> String {
        fn rec(t: &LatentTree, u: NodeId, parent: Option<NodeId>) -> String {
            let mut kids: Vec<String> = t.adj[&u]
                .iter()
                .copied()
                .filter(|&v| Some(v) != parent)
                .map(|v| rec(t, v, Some(u)))
                .collect();
            kids.sort();
            let tag = match u {
                NodeId::Observed(n) => format!("o{n}"),
                NodeId::Hidden(_) => "h".to_string(),
            };
            format!("({tag}{})", kids.concat())
        }
        rec(self, root, None)
    }

    /// Serializes to the canonical JSON edge-list format.
    pub fn to_json(&self) -> TreeJson {
        let nodes = self
            .nodes()
            .map(|n| NodeJson {
                id: n.to_signed(),
                kind: match n {
                    NodeId::Observed(_) => "observed".into(),
                    NodeId::Hidden(_) => "hidden".into(),
                },
                label: self.label(n).map(|s| s.to_string()),
            })
            .collect();
        let edges = self
            .edges()
            .into_iter()
            .map(|(u, v, d)| EdgeJson {
                u: u.to_signed(),
                v: v.to_signed(),
                d,
            })
            .collect();
        TreeJson { nodes, edges }
    }

    /// Deserializes from the JSON edge-list format and validates.
    pub fn from_json(j: &TreeJson) -> Result<LatentTree> {
        let mut t = LatentTree::new();
        for n in &j.nodes {
            let id = NodeId::from_signed(n.id);
            let kind_ok = match id {
                NodeId::Observed(_) => n.kind == "observed",
                NodeId::Hidden(_) => n.kind == "hidden",
            };
            if !kind_ok {
                return Err(Error::InvalidTree(format!(
                    "node {} kind {:?} disagrees with id sign",
                    n.id, n.kind
                )));
            }
            t.add_node(id);
            if let Some(l) = &n.label {
                t.set_label(id, l.clone());
            }
        }
        for e in &j.edges {
            t.add_edge(NodeId::from_signed(e.u), NodeId::from_signed(e.v), e.d)?;
        }
        t.validate()?;
        Ok(t)
    }
}

/// Multiset of observed-label bipartitions, one per tree edge that separates
/// observed nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSet {
    /// Canonical blocks (the side containing the smallest observed id),
    /// sorted.
    pub splits: Vec<Vec<u32>>,
}

impl SplitSet {
    /// Size of the multiset symmetric difference with another split set.
    pub fn symmetric_difference(&self, other: &SplitSet) -> usize {
        let (mut i, mut j, mut diff) = (0usize, 0usize, 0usize);
        while i < self.splits.len() && j < other.splits.len() {
            match self.splits[i].cmp(&other.splits[j]) {
                std::cmp::Ordering::Less => {
                    diff += 1;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    diff += 1;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    i += 1;
                    j += 1;
                }
            }
        }
        diff + (self.splits.len() - i) + (other.splits.len() - j)
    }
}

/// JSON form of a tree: `{"nodes":[..],"edges":[..]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeJson {
    pub nodes: Vec<NodeJson>,
    pub edges: Vec<EdgeJson>,
}

/// JSON form of a node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: i64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// JSON form of an edge with optional information distance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeJson {
    pub u: i64,
    pub v: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(n: u32) -> NodeId {
        NodeId::Observed(n)
    }
    fn h(n: u32) -> NodeId {
        NodeId::Hidden(n)
    }

    /// Six observed leaves under three hidden nodes; the running example used
    /// across the reconstruction tests.
    pub(crate) fn six_leaf_tree() -> LatentTree {
        LatentTree::from_edges(&[
            (h(2), o(1), Some(0.5)),
            (h(2), o(2), Some(0.4)),
            (o(2), o(4), Some(0.6)),
            (h(2), h(3), Some(0.3)),
            (h(3), o(3), Some(0.7)),
            (h(3), h(1), Some(0.45)),
            (h(1), o(5), Some(0.55)),
            (h(1), o(6), Some(0.65)),
        ])
        .unwrap()
    }

    #[test]
    fn path_on_chain() {
        let t = LatentTree::from_edges(&[(o(1), o(2), None), (o(2), o(3), None)]).unwrap();
        assert_eq!(t.path(o(1), o(3)).unwrap(), vec![(o(1), o(2)), (o(2), o(3))]);
        assert!(t.path(o(2), o(2)).unwrap().is_empty());
        assert!(matches!(t.path(o(1), o(9)), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn path_through_hidden_chain() {
        let t = six_leaf_tree();
        assert_eq!(
            t.path(o(4), o(5)).unwrap(),
            vec![
                (o(4), o(2)),
                (o(2), h(2)),
                (h(2), h(3)),
                (h(3), h(1)),
                (h(1), o(5)),
            ]
        );
    }

    #[test]
    fn effective_depth_cases() {
        let chain = LatentTree::from_edges(&[(o(1), o(2), None), (o(2), o(3), None)]).unwrap();
        assert_eq!(chain.effective_depth(), 0);
        let star = LatentTree::from_edges(&[
            (h(0), o(1), None),
            (h(0), o(2), None),
            (h(0), o(3), None),
        ])
        .unwrap();
        assert_eq!(star.effective_depth(), 1);
    }

    #[test]
    fn basic_quantities() {
        let edge = LatentTree::from_edges(&[(o(1), o(2), None)]).unwrap();
        assert_eq!(edge.diameter(), 1);
        let t = six_leaf_tree();
        assert_eq!(t.diameter(), 5);
        assert_eq!(t.max_degree(), 3);
        assert_eq!(
            t.leaves(),
            BTreeSet::from([o(1), o(3), o(4), o(5), o(6)])
        );
    }

    #[test]
    fn minimality() {
        assert!(six_leaf_tree().is_minimal());
        // Degree-2 and degree-1 hidden nodes break minimality.
        let bad = LatentTree::from_edges(&[
            (h(0), o(1), None),
            (h(0), o(2), None),
            (h(0), h(4), None),
            (h(4), h(5), None),
            (h(5), o(3), None),
        ])
        .unwrap();
        assert!(!bad.is_minimal());
        let observed =
            LatentTree::from_edges(&[(o(1), o(2), None), (o(2), o(3), None)]).unwrap();
        assert!(observed.is_minimal());
    }

    #[test]
    fn contraction_star() {
        let star = LatentTree::from_edges(&[
            (h(0), o(1), None),
            (h(0), o(2), None),
            (h(0), o(3), None),
        ])
        .unwrap();
        let c = star.contract_edge(o(1), h(0)).unwrap();
        assert_eq!(c.node_count(), 3);
        assert!(c.has_edge(o(1), o(2)));
        assert!(c.has_edge(o(1), o(3)));
        c.validate().unwrap();
        assert!(matches!(
            star.contract_edge(h(0), o(1)),
            Err(Error::InvalidContraction(_, _))
        ));
        assert!(matches!(
            star.contract_edge(o(2), h(1)),
            Err(Error::NoSuchEdge(_, _))
        ));
    }

    #[test]
    fn robinson_foulds_basics() {
        let t = six_leaf_tree();
        assert_eq!(t.robinson_foulds(&t).unwrap(), 0);
        // Contracting one hidden edge removes exactly one split.
        let c = t.contract_edge(o(3), h(3)).unwrap();
        assert_eq!(t.robinson_foulds(&c).unwrap(), 1);
        let other = LatentTree::from_edges(&[(o(1), o(2), None)]).unwrap();
        assert!(matches!(
            t.robinson_foulds(&other),
            Err(Error::LabelMismatch)
        ));
    }

    #[test]
    fn star_vs_chain_one_contraction_apart() {
        let star = LatentTree::from_edges(&[
            (h(0), o(1), None),
            (h(0), o(2), None),
            (h(0), o(3), None),
        ])
        .unwrap();
        let chain =
            LatentTree::from_edges(&[(o(1), o(2), None), (o(2), o(3), None)]).unwrap();
        assert_eq!(star.robinson_foulds(&chain).unwrap(), 1);
        assert!(!star.equal_up_to_hidden_relabel(&chain).unwrap());
    }

    #[test]
    fn equality_up_to_hidden_relabel() {
        let t = six_leaf_tree();
        // Same structure with hidden ids permuted.
        let relabeled = LatentTree::from_edges(&[
            (h(7), o(1), None),
            (h(7), o(2), None),
            (o(2), o(4), None),
            (h(7), h(9), None),
            (h(9), o(3), None),
            (h(9), h(8), None),
            (h(8), o(5), None),
            (h(8), o(6), None),
        ])
        .unwrap();
        assert!(t.equal_up_to_hidden_relabel(&relabeled).unwrap());
        let c = t.contract_edge(o(3), h(3)).unwrap();
        assert!(!t.equal_up_to_hidden_relabel(&c).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let t = six_leaf_tree();
        let j = t.to_json();
        let s = serde_json::to_string(&j).unwrap();
        let back = LatentTree::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn splits_skip_pendant_hidden() {
        // Hidden leaf: its edge separates no observed nodes.
        let t = LatentTree::from_edges(&[
            (o(1), o(2), None),
            (o(2), h(0), None),
        ])
        .unwrap();
        assert_eq!(t.splits().splits.len(), 1);
    }
}
