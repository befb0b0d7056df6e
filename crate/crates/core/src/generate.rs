//! Synthetic latent tree generators: the benchmark topologies (double star,
//! hidden Markov chain, complete tree) plus random minimal and random blind
//! instances, parameterized per family with edge correlations drawn
//! uniformly from a configured range.

use crate::error::{Error, Result};
use crate::model::{
    Family, GaussianTreeModel, GeneralDiscreteTreeModel, SymmetricDiscreteTreeModel, TreeModel,
};
use crate::tree::{edge_key, LatentTree, NodeId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Topology kinds.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Two adjacent hidden hubs, each with half of the observed leaves.
    DoubleStar,
    /// Hidden chain with one observed leaf per hidden node and an extra
    /// observed leaf at each end.
    Hmm,
    /// Observed root, two layers of hidden nodes, observed leaves; every
    /// internal node has degree `arity`.
    KComplete,
    /// Random tree in which every hidden node has degree at least three.
    RandomMinimal,
    /// Random tree with all internal nodes hidden and each hidden node's
    /// closest observed node among its own leaves.
    RandomBlind,
}

/// Generator parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: TopologyKind,
    /// Observed node count (exact for double_star/hmm/random_minimal;
    /// derived for k_complete and random_blind).
    #[serde(default)]
    pub observed: usize,
    /// Hidden node count where the kind allows choosing it.
    #[serde(default)]
    pub hidden: usize,
    /// Internal degree for `k_complete`.
    #[serde(default)]
    pub arity: usize,
    pub family: Family,
    /// Alphabet size for discrete families.
    #[serde(default = "default_k")]
    pub k_states: u32,
    /// Correlation range for edge parameter draws.
    #[serde(default = "default_range")]
    pub param_range: (f64, f64),
    pub seed: u64,
}

fn default_k() -> u32 {
    2
}

fn default_range() -> (f64, f64) {
    (0.2, 0.8)
}

impl GeneratorSpec {
    /// Convenience constructor with the default parameter range.
    pub fn new(kind: TopologyKind, observed: usize, family: Family, seed: u64) -> Self {
        GeneratorSpec {
            kind,
            observed,
            hidden: 0,
            arity: 5,
            family,
            k_states: 2,
            param_range: default_range(),
            seed,
        }
    }
}

/// Draws a parameterized model from the spec. Deterministic given the seed.
pub fn generate(spec: &GeneratorSpec) -> Result<TreeModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.param_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "correlation range ({lo}, {hi})"
        )));
    }
    let tree = topology(spec, &mut rng)?;
    // Blind instances pin their anchor edges to high correlation so the
    // closest observed node of each hidden node is one of its own leaves.
    let anchors: BTreeMap<(NodeId, NodeId), f64> = match spec.kind {
        TopologyKind::RandomBlind => blind_anchor_edges(&tree, &mut rng),
        _ => BTreeMap::new(),
    };
    let mut rho: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    for (u, v, _) in tree.edges() {
        let key = edge_key(u, v);
        let r = match anchors.get(&key) {
            Some(&r) => r,
            None if spec.kind == TopologyKind::RandomBlind => rng.random_range(0.2..0.5),
            None => rng.random_range(lo..hi),
        };
        rho.insert(key, r);
    }
    model_from_correlations(spec, tree, &rho, &mut rng)
}

fn model_from_correlations(
    spec: &GeneratorSpec,
    tree: LatentTree,
    rho: &BTreeMap<(NodeId, NodeId), f64>,
    rng: &mut ChaCha8Rng,
) -> Result<TreeModel> {
    match spec.family {
        Family::Gaussian => Ok(TreeModel::Gaussian(GaussianTreeModel::new(
            tree,
            rho.clone(),
        )?)),
        Family::Symmetric => {
            // Solve theta from the same distance draw so difficulty matches
            // the Gaussian experiments: 1 - K theta = rho^(1/(K-1)).
            let k = spec.k_states;
            let theta = rho
                .iter()
                .map(|(&e, &r)| (e, (1.0 - r.powf(1.0 / (k as f64 - 1.0))) / k as f64))
                .collect();
            Ok(TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(
                tree, k, theta,
            )?))
        }
        Family::Discrete => {
            let k = spec.k_states as usize;
            let root = tree.nodes().next().unwrap();
            let mut marginal: Vec<f64> = (0..k).map(|_| rng.random_range(0.8..1.2)).collect();
            let s: f64 = marginal.iter().sum();
            for v in &mut marginal {
                *v /= s;
            }
            let mut conditionals = BTreeMap::new();
            let mut stack = vec![(root, None::<NodeId>)];
            while let Some((u, parent)) = stack.pop() {
                for v in tree.neighbors(u)? {
                    if Some(v) == parent {
                        continue;
                    }
                    let r = rho[&edge_key(u, v)];
                    // Diagonal-dominant channel mixing the identity with a
                    // jittered uniform row; stays nonsingular for r > 0.
                    let mut rows = vec![0.0; k * k];
                    for a in 0..k {
                        let mut noise: Vec<f64> =
                            (0..k).map(|_| rng.random_range(0.7..1.3)).collect();
                        let ns: f64 = noise.iter().sum();
                        for x in &mut noise {
                            *x /= ns;
                        }
                        for b in 0..k {
                            rows[a * k + b] =
                                r * f64::from(u8::from(a == b)) + (1.0 - r) * noise[b];
                        }
                    }
                    conditionals.insert((u, v), rows);
                    stack.push((v, Some(u)));
                }
            }
            Ok(TreeModel::Discrete(GeneralDiscreteTreeModel::new(
                tree.clone(),
                spec.k_states,
                root,
                marginal,
                conditionals,
            )?))
        }
    }
}

fn topology(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<LatentTree> {
    match spec.kind {
        TopologyKind::DoubleStar => double_star(spec.observed),
        TopologyKind::Hmm => hmm_chain(spec.observed),
        TopologyKind::KComplete => k_complete(spec.arity),
        TopologyKind::RandomMinimal => random_minimal(spec.observed, spec.hidden, rng),
        TopologyKind::RandomBlind => random_blind(spec.hidden.max(1), rng),
    }
}

/// Two adjacent hidden hubs with the observed leaves split evenly.
pub fn double_star(observed: usize) -> Result<LatentTree> {
    if observed < 4 {
        return Err(Error::InvalidSpec(format!(
            "double star needs at least 4 observed nodes, got {observed}"
        )));
    }
    let (h0, h1) = (NodeId::Hidden(0), NodeId::Hidden(1));
    let mut edges = vec![(h0, h1, None)];
    for i in 0..observed {
        let hub = if i < observed / 2 { h0 } else { h1 };
        edges.push((hub, NodeId::Observed(i as u32), None));
    }
    LatentTree::from_edges(&edges)
}

/// Hidden chain of `observed - 2` nodes, one observed leaf each, plus one
/// extra observed leaf at each end so every hidden node has degree three.
pub fn hmm_chain(observed: usize) -> Result<LatentTree> {
    if observed < 4 {
        return Err(Error::InvalidSpec(format!(
            "hmm chain needs at least 4 observed nodes, got {observed}"
        )));
    }
    let q = observed - 2;
    let mut edges = Vec::new();
    for i in 0..q {
        let h = NodeId::Hidden(i as u32);
        edges.push((h, NodeId::Observed(i as u32), None));
        if i + 1 < q {
            edges.push((h, NodeId::Hidden(i as u32 + 1), None));
        }
    }
    edges.push((NodeId::Hidden(0), NodeId::Observed(q as u32), None));
    edges.push((
        NodeId::Hidden(q as u32 - 1),
        NodeId::Observed(q as u32 + 1),
        None,
    ));
    LatentTree::from_edges(&edges)
}

/// Observed root, `arity` hidden children, each with `arity - 1` hidden
/// children, each of those with `arity - 1` observed leaves. Every internal
/// node has degree `arity`; for arity 5 this is 25 hidden and 81 observed
/// nodes counting the root.
pub fn k_complete(arity: usize) -> Result<LatentTree> {
    if arity < 3 {
        return Err(Error::InvalidSpec(format!(
            "complete tree needs arity >= 3, got {arity}"
        )));
    }
    let k = arity as u32;
    let root = NodeId::Observed(0);
    let mut edges = Vec::new();
    let mut next_obs = 1u32;
    let mut next_hidden = 0u32;
    for _ in 0..k {
        let level1 = NodeId::Hidden(next_hidden);
        next_hidden += 1;
        edges.push((root, level1, None));
        for _ in 0..k - 1 {
            let level2 = NodeId::Hidden(next_hidden);
            next_hidden += 1;
            edges.push((level1, level2, None));
            for _ in 0..k - 1 {
                edges.push((level2, NodeId::Observed(next_obs), None));
                next_obs += 1;
            }
        }
    }
    LatentTree::from_edges(&edges)
}

/// Random tree over `observed + hidden` positions via a uniform random
/// Prüfer sequence, with hidden status granted only to nodes of degree at
/// least three. When `hidden` is zero a random count is attempted.
pub fn random_minimal(observed: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<LatentTree> {
    if observed < 3 {
        return Err(Error::InvalidSpec(format!(
            "random minimal tree needs at least 3 observed nodes, got {observed}"
        )));
    }
    for _attempt in 0..500 {
        let want_hidden = if hidden > 0 {
            hidden
        } else {
            rng.random_range(0..=observed / 3)
        };
        let n = observed + want_hidden;
        let adj = random_tree_adjacency(n, rng);
        let mut candidates: Vec<usize> = (0..n).filter(|&v| adj[v].len() >= 3).collect();
        if candidates.len() < want_hidden {
            continue;
        }
        candidates.shuffle(rng);
        let hidden_set: std::collections::BTreeSet<usize> =
            candidates.into_iter().take(want_hidden).collect();
        // Degree-3 requirement holds by construction; map to ids.
        let mut ids = Vec::with_capacity(n);
        let (mut oi, mut hi) = (0u32, 0u32);
        for v in 0..n {
            if hidden_set.contains(&v) {
                ids.push(NodeId::Hidden(hi));
                hi += 1;
            } else {
                ids.push(NodeId::Observed(oi));
                oi += 1;
            }
        }
        let mut edges = Vec::new();
        for (v, nbrs) in adj.iter().enumerate() {
            for &w in nbrs {
                if v < w {
                    edges.push((ids[v], ids[w], None));
                }
            }
        }
        let tree = LatentTree::from_edges(&edges)?;
        if tree.is_minimal() {
            return Ok(tree);
        }
    }
    Err(Error::InvalidSpec(
        "failed to draw a minimal random tree".into(),
    ))
}

/// Random tree whose internal nodes are all hidden with degree at least
/// three; each hidden node gets one anchor leaf (bound to a strong edge by
/// the generator) plus extras.
pub fn random_blind(hidden: usize, rng: &mut ChaCha8Rng) -> Result<LatentTree> {
    let mut edges: Vec<(NodeId, NodeId, Option<f64>)> = Vec::new();
    let mut inner_degree = vec![0usize; hidden];
    if hidden > 1 {
        let adj = random_tree_adjacency(hidden, rng);
        for (v, nbrs) in adj.iter().enumerate() {
            inner_degree[v] = nbrs.len();
            for &w in nbrs {
                if v < w {
                    edges.push((NodeId::Hidden(v as u32), NodeId::Hidden(w as u32), None));
                }
            }
        }
    }
    let mut next_obs = 0u32;
    for (h, &deg) in inner_degree.iter().enumerate() {
        let needed = 3usize.saturating_sub(deg).max(1);
        let extra = rng.random_range(0..2usize);
        for _ in 0..needed + extra {
            edges.push((
                NodeId::Hidden(h as u32),
                NodeId::Observed(next_obs),
                None,
            ));
            next_obs += 1;
        }
    }
    LatentTree::from_edges(&edges)
}

/// One strong (high-correlation) leaf edge per hidden node; the generator
/// keeps every other edge clearly weaker.
fn blind_anchor_edges(
    tree: &LatentTree,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<(NodeId, NodeId), f64> {
    let mut anchors = BTreeMap::new();
    for h in tree.hidden() {
        let leaf = tree
            .neighbors(h)
            .unwrap()
            .find(|n| n.is_observed() && tree.degree(*n).unwrap() == 1)
            .expect("blind construction attaches a leaf to every hidden node");
        anchors.insert(edge_key(h, leaf), rng.random_range(0.85..0.9));
    }
    anchors
}

/// Uniform random labeled tree on `n` nodes from a random Prüfer sequence,
/// as adjacency lists.
fn random_tree_adjacency(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(n >= 1);
    let mut adj = vec![Vec::new(); n];
    if n == 1 {
        return adj;
    }
    if n == 2 {
        adj[0].push(1);
        adj[1].push(0);
        return adj;
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &s in &seq {
        degree[s] += 1;
    }
    let mut leaves: std::collections::BTreeSet<usize> =
        (0..n).filter(|&v| degree[v] == 1).collect();
    let connect = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
        adj[a].push(b);
        adj[b].push(a);
    };
    for &s in &seq {
        let leaf = *leaves.iter().next().unwrap();
        leaves.remove(&leaf);
        connect(leaf, s, &mut adj);
        degree[s] -= 1;
        if degree[s] == 1 {
            leaves.insert(s);
        }
    }
    let rest: Vec<usize> = leaves.into_iter().collect();
    connect(rest[0], rest[1], &mut adj);
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TopologyKind, observed: usize, seed: u64) -> GeneratorSpec {
        GeneratorSpec::new(kind, observed, Family::Gaussian, seed)
    }

    #[test]
    fn double_star_counts_and_degrees() {
        let model = generate(&spec(TopologyKind::DoubleStar, 80, 1)).unwrap();
        let t = model.tree();
        assert_eq!(t.node_count(), 82);
        assert_eq!(t.observed().len(), 80);
        for h in t.hidden() {
            assert!(t.degree(h).unwrap() >= 3);
        }
        // Brute-force all-pairs hop count puts the two farthest leaves on
        // opposite hubs.
        assert_eq!(t.diameter(), 3);
        assert!(t.is_minimal());
    }

    #[test]
    fn hmm_counts_degrees_and_diameter() {
        let model = generate(&spec(TopologyKind::Hmm, 80, 2)).unwrap();
        let t = model.tree();
        assert_eq!(t.hidden().len(), 78);
        assert_eq!(t.observed().len(), 80);
        assert_eq!(t.max_degree(), 3);
        // Exhaustive scan: ends carry two leaves, so the longest path runs
        // leaf-to-leaf across the whole chain.
        assert_eq!(t.diameter(), 79);
        assert!(t.is_minimal());
        assert_eq!(t.effective_depth(), 1);
    }

    #[test]
    fn five_complete_counts() {
        let model = generate(&GeneratorSpec {
            arity: 5,
            ..spec(TopologyKind::KComplete, 0, 3)
        })
        .unwrap();
        let t = model.tree();
        assert_eq!(t.hidden().len(), 25);
        assert_eq!(t.observed().len(), 81);
        assert!(t.is_minimal());
        // Every internal node has degree 5.
        for v in t.nodes() {
            let d = t.degree(v).unwrap();
            assert!(d == 1 || d == 5);
        }
        // Brute-force breadth-first search from every hidden node: each
        // hidden layer touches an observed node within one hop.
        assert_eq!(t.effective_depth(), 1);
    }

    #[test]
    fn random_minimal_is_minimal_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for observed in [3usize, 8, 15, 30] {
            for _ in 0..20 {
                let t = random_minimal(observed, 0, &mut rng).unwrap();
                assert!(t.is_minimal());
                assert_eq!(t.observed().len(), observed);
                t.validate().unwrap();
            }
        }
    }

    #[test]
    fn random_blind_satisfies_blind_conditions() {
        for seed in 0..20 {
            let model = generate(&GeneratorSpec {
                hidden: 1 + (seed as usize % 5),
                ..GeneratorSpec::new(TopologyKind::RandomBlind, 0, Family::Gaussian, seed)
            })
            .unwrap();
            let t = model.tree();
            // All internal nodes hidden, all leaves observed.
            for v in t.nodes() {
                if t.degree(v).unwrap() == 1 {
                    assert!(v.is_observed());
                } else {
                    assert!(v.is_hidden());
                }
            }
            // The surrogate of each hidden node is one of its own leaves.
            let sg = crate::clgrouping::surrogate_map(&model).unwrap();
            for h in t.hidden() {
                let s = sg.surrogate(h);
                assert!(t.has_edge(h, s), "surrogate of {h} is not adjacent");
            }
        }
    }

    #[test]
    fn parameters_land_in_range() {
        let model = generate(&spec(TopologyKind::DoubleStar, 10, 4)).unwrap();
        if let TreeModel::Gaussian(g) = &model {
            for (u, v, _) in g.tree.edges() {
                let rho = g.corr(u, v);
                assert!((0.2..0.8).contains(&rho));
            }
        } else {
            panic!("expected a gaussian model");
        }
        // Distances therefore sit inside [-ln 0.8, -ln 0.2] per edge.
        let d = model
            .exact_distance_matrix(&model.tree().observed())
            .unwrap();
        assert!(d.max_finite() <= 3.0 * -(0.2f64.ln()) + 1e-9);
    }

    #[test]
    fn symmetric_parameters_match_distance_draws() {
        let g = generate(&spec(TopologyKind::DoubleStar, 10, 7)).unwrap();
        let s = generate(&GeneratorSpec {
            family: Family::Symmetric,
            ..spec(TopologyKind::DoubleStar, 10, 7)
        })
        .unwrap();
        // Same seed, same topology: distances agree across families.
        let obs = g.tree().observed();
        let dg = g.exact_distance_matrix(&obs).unwrap();
        let ds = s.exact_distance_matrix(&obs).unwrap();
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                assert!((dg.at(i, j) - ds.at(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn discrete_models_pass_nondegeneracy() {
        for seed in 0..10 {
            let model = generate(&GeneratorSpec {
                family: Family::Discrete,
                k_states: 3,
                ..spec(TopologyKind::RandomMinimal, 8, seed)
            })
            .unwrap();
            let d = model
                .exact_distance_matrix(&model.tree().observed())
                .unwrap();
            assert!(d.max_finite().is_finite());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&spec(TopologyKind::RandomMinimal, 12, 33)).unwrap();
        let b = generate(&spec(TopologyKind::RandomMinimal, 12, 33)).unwrap();
        assert!(a.tree().equal_up_to_hidden_relabel(b.tree()).unwrap());
        let da = a.exact_distance_matrix(&a.tree().observed()).unwrap();
        let db = b.exact_distance_matrix(&b.tree().observed()).unwrap();
        for i in 0..da.len() {
            for j in 0..da.len() {
                assert_eq!(da.at(i, j), db.at(i, j));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(
            generate(&spec(TopologyKind::DoubleStar, 3, 0)),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            generate(&GeneratorSpec {
                arity: 2,
                ..spec(TopologyKind::KComplete, 0, 0)
            }),
            Err(Error::InvalidSpec(_))
        ));
    }
}
