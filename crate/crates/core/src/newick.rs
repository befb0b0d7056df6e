//! Newick export.
//!
//! Trees whose observed nodes are all leaves export losslessly. An observed
//! internal node cannot be named in Newick without becoming a labeled
//! internal vertex, so it is exported as a zero-length pendant leaf hanging
//! off an anonymous internal node; this is the only lossy case.

use crate::tree::{LatentTree, NodeId};
use std::fmt::Write;

/// Renders the tree in Newick format.
pub fn to_newick(tree: &LatentTree) -> String {
    // Pull observed internal nodes onto zero-length pendants.
    let mut work = tree.clone();
    let mut pendant_id = tree
        .hidden()
        .iter()
        .map(|h| match h {
            NodeId::Hidden(n) => n + 1,
            _ => 0,
        })
        .max()
        .unwrap_or(0);
    let internal_observed: Vec<NodeId> = tree
        .observed()
        .into_iter()
        .filter(|&v| tree.degree(v).unwrap() > 1)
        .collect();
    for v in internal_observed {
        let spot = NodeId::Hidden(pendant_id);
        pendant_id += 1;
        let nbrs: Vec<NodeId> = work.neighbors(v).unwrap().collect();
        let lens: Vec<Option<f64>> = nbrs.iter().map(|&u| work.edge_length(v, u)).collect();
        work.add_node(spot);
        for (&u, d) in nbrs.iter().zip(lens) {
            work.remove_edge(v, u).unwrap();
            work.add_edge(spot, u, d).unwrap();
        }
        work.add_edge(spot, v, Some(0.0)).unwrap();
    }

    if work.node_count() == 1 {
        let v = work.nodes().next().unwrap();
        return format!("{};", leaf_name(&work, v));
    }
    // Root at the lowest internal node, or at the first node of a single edge.
    let root = work
        .nodes()
        .find(|&v| work.degree(v).unwrap() > 1)
        .unwrap_or_else(|| work.nodes().next().unwrap());
    let mut s = String::new();
    render(&work, root, None, &mut s);
    s.push(';');
    s
}

fn leaf_name(tree: &LatentTree, v: NodeId) -> String {
    match tree.label(v) {
        Some(l) => l.to_string(),
        None => v.to_string(),
    }
}

fn render(tree: &LatentTree, v: NodeId, parent: Option<NodeId>, out: &mut String) {
    let kids: Vec<NodeId> = tree
        .neighbors(v)
        .unwrap()
        .filter(|&u| Some(u) != parent)
        .collect();
    if kids.is_empty() {
        out.push_str(&leaf_name(tree, v));
    } else {
        out.push('(');
        for (i, &k) in kids.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            render(tree, k, Some(v), out);
            if let Some(d) = tree.edge_length(v, k) {
                let _ = write!(out, ":{d:.16e}");
            }
        }
        out.push(')');
        if v.is_observed() {
            out.push_str(&leaf_name(tree, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::NodeId::{Hidden as H, Observed as O};

    #[test]
    fn leaf_only_tree() {
        let t = LatentTree::from_edges(&[
            (H(0), O(1), Some(1.0)),
            (H(0), O(2), Some(2.0)),
            (H(0), O(3), Some(3.0)),
        ])
        .unwrap();
        let s = to_newick(&t);
        assert!(s.starts_with('(') && s.ends_with(';'));
        assert!(s.contains('1') && s.contains('2') && s.contains('3'));
    }

    #[test]
    fn internal_observed_gets_zero_pendant() {
        let t = LatentTree::from_edges(&[(O(1), O(2), Some(1.0)), (O(2), O(3), Some(1.0))])
            .unwrap();
        let s = to_newick(&t);
        // Node 2 shows up as a pendant with zero length.
        assert!(s.contains("2:0"));
    }
}
