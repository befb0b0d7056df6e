//! Neighbor joining and its relaxed form with short-edge contraction.
//!
//! Standard agglomeration: repeatedly join the pair minimizing
//! `Q_ij = (n-2) d_ij - R_i - R_j`, with deterministic tie-breaking by the
//! smallest id pair so outputs do not depend on input row order. Branch
//! lengths can come out slightly negative under noise; the tree stores them
//! clamped at zero and the raw values are kept for diagnostics.

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::tree::{edge_key, LatentTree, NodeId};
use std::collections::{BTreeMap, BTreeSet};

/// Neighbor-joining outcome with the growing distance bookkeeping.
#[derive(Clone, Debug)]
pub struct NjOutcome {
    /// Unrooted tree; inputs are leaves, created nodes are hidden with
    /// degree three.
    pub tree: LatentTree,
    /// Distances over every node including the created ones.
    pub distances: DistanceMatrix,
    /// Unclamped branch lengths.
    pub raw_lengths: BTreeMap<(NodeId, NodeId), f64>,
}

/// Classical neighbor joining over at least three nodes with finite
/// distances.
pub fn nj(d: &DistanceMatrix) -> Result<LatentTree> {
    Ok(nj_run(d, 0)?.tree)
}

/// Neighbor joining with diagnostics; `hidden_start` namespaces the created
/// node ids.
pub fn nj_run(d: &DistanceMatrix, hidden_start: u32) -> Result<NjOutcome> {
    let mut active: Vec<NodeId> = d.labels().to_vec();
    active.sort();
    if active.len() < 3 {
        return Err(Error::TooFewNodes(active.len()));
    }
    for (a, &i) in active.iter().enumerate() {
        for &j in active.iter().skip(a + 1) {
            if !d.get(i, j)?.is_finite() {
                return Err(Error::InfiniteDistance(i, j));
            }
        }
    }
    let mut work = d.clone();
    let mut next_hidden = hidden_start;
    let mut raw_lengths = BTreeMap::new();
    let mut edges: Vec<(NodeId, NodeId, f64)> = Vec::new();
    // Nodes agglomerated beneath each active node.
    let mut below: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();

    while active.len() > 3 {
        let n = active.len();
        let sums: BTreeMap<NodeId, f64> = active
            .iter()
            .map(|&i| {
                let s: f64 = active.iter().map(|&k| work.get(i, k).unwrap()).sum();
                (i, s)
            })
            .collect();
        let mut best: Option<((NodeId, NodeId), f64)> = None;
        for (a, &i) in active.iter().enumerate() {
            for &j in active.iter().skip(a + 1) {
                let q = (n as f64 - 2.0) * work.get(i, j)? - sums[&i] - sums[&j];
                let better = match best {
                    None => true,
                    Some((_, bq)) => q < bq - 1e-15,
                };
                if better {
                    best = Some(((i, j), q));
                }
            }
        }
        let ((i, j), _) = best.unwrap();
        let u = NodeId::Hidden(next_hidden);
        next_hidden += 1;
        let dij = work.get(i, j)?;
        let delta_i = 0.5 * dij + (sums[&i] - sums[&j]) / (2.0 * (n as f64 - 2.0));
        let delta_j = dij - delta_i;
        raw_lengths.insert(edge_key(i, u), delta_i);
        raw_lengths.insert(edge_key(j, u), delta_j);
        edges.push((i, u, delta_i.max(0.0)));
        edges.push((j, u, delta_j.max(0.0)));

        // Distances from the new node.
        let mut dists: BTreeMap<NodeId, f64> = BTreeMap::new();
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let v = 0.5 * (work.get(i, k)? + work.get(j, k)? - dij);
            dists.insert(k, v.max(0.0));
        }
        dists.insert(i, delta_i.max(0.0));
        dists.insert(j, delta_j.max(0.0));
        for &side in &[i, j] {
            let side_len = if side == i { delta_i } else { delta_j };
            for &w in below.get(&side).map(|s| s.iter().collect::<Vec<_>>()).unwrap_or_default()
            {
                let v = side_len + work.get(side, w)?;
                dists.insert(w, v.max(0.0));
            }
        }
        // Retired nodes under other active nodes: through their owner.
        for &a in &active {
            if a == i || a == j {
                continue;
            }
            if let Some(members) = below.get(&a) {
                for &w in members {
                    let v = dists[&a] + work.get(a, w)?;
                    dists.insert(w, v.max(0.0));
                }
            }
        }
        work.push_node(u, &dists);

        let mut under: BTreeSet<NodeId> = BTreeSet::from([i, j]);
        under.extend(below.remove(&i).unwrap_or_default());
        under.extend(below.remove(&j).unwrap_or_default());
        below.insert(u, under);
        active.retain(|&x| x != i && x != j);
        active.push(u);
        active.sort();
    }

    // Final three-way join.
    let (a, b, c) = (active[0], active[1], active[2]);
    let u = NodeId::Hidden(next_hidden);
    let da = 0.5 * (work.get(a, b)? + work.get(a, c)? - work.get(b, c)?);
    let db = 0.5 * (work.get(a, b)? + work.get(b, c)? - work.get(a, c)?);
    let dc = 0.5 * (work.get(a, c)? + work.get(b, c)? - work.get(a, b)?);
    for (&x, &dx) in [a, b, c].iter().zip([da, db, dc].iter()) {
        raw_lengths.insert(edge_key(x, u), dx);
        edges.push((x, u, dx.max(0.0)));
    }
    let mut dists = BTreeMap::new();
    dists.insert(a, da.max(0.0));
    dists.insert(b, db.max(0.0));
    dists.insert(c, dc.max(0.0));
    for (&x, &dx) in [a, b, c].iter().zip([da, db, dc].iter()) {
        if let Some(members) = below.get(&x) {
            for &w in members {
                dists.insert(w, (dx + work.get(x, w)?).max(0.0));
            }
        }
    }
    work.push_node(u, &dists);

    let mut tree = LatentTree::new();
    for &n in d.labels() {
        tree.add_node(n);
    }
    for &(x, y, len) in &edges {
        tree.add_node(x);
        tree.add_node(y);
        tree.add_edge(x, y, Some(len))?;
    }
    tree.validate()?;
    Ok(NjOutcome {
        tree,
        distances: work,
        raw_lengths,
    })
}

/// Contracts every edge with a hidden endpoint shorter than `threshold`,
/// shortest first (ties by id), repeating until none remain. `restrict_to`
/// limits the removable nodes (used by local reconstruction passes that must
/// keep their input nodes).
pub(crate) fn contract_short_hidden_edges(
    tree: &LatentTree,
    threshold: f64,
    restrict_to: Option<&BTreeSet<NodeId>>,
) -> LatentTree {
    let mut t = tree.clone();
    loop {
        let mut candidates: Vec<(f64, NodeId, NodeId)> = Vec::new();
        for (u, v, len) in t.edges() {
            let len = len.unwrap_or(f64::INFINITY).max(0.0);
            if len >= threshold {
                continue;
            }
            // Drop a hidden endpoint, preferring to keep observed labels;
            // between two hidden endpoints drop the larger id.
            let drop = match (u.is_hidden(), v.is_hidden()) {
                (true, false) => Some((v, u)),
                (false, true) => Some((u, v)),
                (true, true) => Some((u.min(v), u.max(v))),
                (false, false) => None,
            };
            if let Some((keep, drop)) = drop {
                let allowed = restrict_to.is_none_or(|set| set.contains(&drop));
                // Never contract the last two nodes into one.
                if allowed && t.node_count() > 2 {
                    candidates.push((len, keep, drop));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        match candidates.first() {
            Some(&(_, keep, drop)) => {
                t = t.contract_edge(keep, drop).expect("candidate edge exists");
            }
            None => return t,
        }
    }
}

/// Neighbor joining followed by contraction of observed-hidden edges shorter
/// than `epsilon_prime` (negative lengths count as zero), restoring observed
/// nodes that sit at internal positions.
pub fn nj_relaxed(d: &DistanceMatrix, epsilon_prime: f64) -> Result<LatentTree> {
    let out = nj_run(d, 0)?;
    Ok(contract_short_hidden_edges(&out.tree, epsilon_prime, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::DistanceSource;
    use crate::tree::NodeId::Observed as O;

    fn matrix(labels: Vec<NodeId>, entries: &[(NodeId, NodeId, f64)]) -> DistanceMatrix {
        let mut d = DistanceMatrix::zeros(labels, DistanceSource::Exact);
        for &(i, j, v) in entries {
            d.set(i, j, v).unwrap();
        }
        d
    }

    #[test]
    fn three_leaves_solve_path_equations() {
        let d = matrix(
            vec![O(0), O(1), O(2)],
            &[(O(0), O(1), 1.0), (O(0), O(2), 1.4), (O(1), O(2), 1.8)],
        );
        let t = nj(&d).unwrap();
        assert_eq!(t.hidden().len(), 1);
        let h = t.hidden()[0];
        let d0 = t.edge_length(O(0), h).unwrap();
        let d1 = t.edge_length(O(1), h).unwrap();
        let d2 = t.edge_length(O(2), h).unwrap();
        assert!((d0 + d1 - 1.0).abs() < 1e-12);
        assert!((d0 + d2 - 1.4).abs() < 1e-12);
        assert!((d1 + d2 - 1.8).abs() < 1e-12);
    }

    #[test]
    fn quartet_split_recovered() {
        // Additive quartet with the 01|23 split; the four-point condition
        // certifies the split as the oracle.
        let (e0, e1, mid, e2, e3) = (1.0, 1.5, 2.0, 1.2, 0.8);
        let d = matrix(
            vec![O(0), O(1), O(2), O(3)],
            &[
                (O(0), O(1), e0 + e1),
                (O(2), O(3), e2 + e3),
                (O(0), O(2), e0 + mid + e2),
                (O(0), O(3), e0 + mid + e3),
                (O(1), O(2), e1 + mid + e2),
                (O(1), O(3), e1 + mid + e3),
            ],
        );
        assert!(d.get(O(0), O(1)).unwrap() + d.get(O(2), O(3)).unwrap()
            < d.get(O(0), O(2)).unwrap() + d.get(O(1), O(3)).unwrap());
        let t = nj(&d).unwrap();
        // 0 and 1 must share a hidden neighbor.
        let h0: Vec<NodeId> = t.neighbors(O(0)).unwrap().collect();
        let h1: Vec<NodeId> = t.neighbors(O(1)).unwrap().collect();
        assert_eq!(h0, h1);
        for (u, v, len) in t.edges() {
            let want = match (u, v) {
                _ if u == O(0) || v == O(0) => e0,
                _ if u == O(1) || v == O(1) => e1,
                _ if u == O(2) || v == O(2) => e2,
                _ if u == O(3) || v == O(3) => e3,
                _ => mid,
            };
            assert!((len.unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_or_infinite_rejected() {
        let d = matrix(vec![O(0), O(1)], &[(O(0), O(1), 1.0)]);
        assert!(matches!(nj(&d), Err(Error::TooFewNodes(2))));
        let d = matrix(
            vec![O(0), O(1), O(2)],
            &[
                (O(0), O(1), 1.0),
                (O(0), O(2), f64::INFINITY),
                (O(1), O(2), 1.0),
            ],
        );
        assert!(matches!(nj(&d), Err(Error::InfiniteDistance(_, _))));
    }

    #[test]
    fn internal_observed_restored_by_contraction() {
        // Chain 0-1-2 with node 1 internal: plain NJ leaves 1 on a
        // zero-length pendant, the relaxed contraction restores it.
        let d = matrix(
            vec![O(0), O(1), O(2)],
            &[(O(0), O(1), 0.6), (O(1), O(2), 0.7), (O(0), O(2), 1.3)],
        );
        let plain = nj(&d).unwrap();
        let h = plain.hidden()[0];
        assert!(plain.edge_length(O(1), h).unwrap().abs() < 1e-12);
        let t = nj_relaxed(&d, -(0.9f64.ln())).unwrap();
        assert!(t.hidden().is_empty());
        assert!(t.has_edge(O(0), O(1)));
        assert!(t.has_edge(O(1), O(2)));
        // Zero threshold contracts nothing.
        let t0 = nj_relaxed(&d, 0.0).unwrap();
        assert!(t0.equal_up_to_hidden_relabel(&plain).unwrap());
    }

    #[test]
    fn row_order_does_not_matter() {
        let entries = [
            (O(0), O(1), 2.5),
            (O(2), O(3), 2.0),
            (O(0), O(2), 4.2),
            (O(0), O(3), 3.8),
            (O(1), O(2), 4.7),
            (O(1), O(3), 4.3),
        ];
        let d1 = matrix(vec![O(0), O(1), O(2), O(3)], &entries);
        let d2 = matrix(vec![O(3), O(1), O(0), O(2)], &entries);
        let t1 = nj(&d1).unwrap();
        let t2 = nj(&d2).unwrap();
        assert!(t1.equal_up_to_hidden_relabel(&t2).unwrap());
    }

    #[test]
    fn relaxed_never_adds_hidden_nodes() {
        let d = matrix(
            vec![O(0), O(1), O(2), O(3)],
            &[
                (O(0), O(1), 1.0),
                (O(0), O(2), 1.1),
                (O(0), O(3), 1.2),
                (O(1), O(2), 0.9),
                (O(1), O(3), 1.3),
                (O(2), O(3), 0.8),
            ],
        );
        let plain = nj(&d).unwrap().hidden().len();
        for eps in [0.0, 0.05, 0.2, 1.0] {
            assert!(nj_relaxed(&d, eps).unwrap().hidden().len() <= plain);
        }
    }
}
