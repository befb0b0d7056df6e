//! Sibling/parent testing and recursive grouping reconstruction.
//!
//! The exact form classifies node pairs from the difference statistic
//! `phi(i,j,k) = d_ik - d_jk`: constant and equal to `d_ij` means `i` is a
//! leaf with parent `j`; constant strictly inside `(-d_ij, d_ij)` means two
//! sibling leaves. Families are grouped bottom-up, a hidden parent is
//! introduced whenever a family lacks an observed one, and distances to new
//! hidden nodes follow from the same statistic.
//!
//! The relaxed form replaces the equality tests with a gated range statistic
//! and either a fixed threshold or medoid k-means with silhouette selection,
//! and averages the hidden-distance updates over all admissible witnesses.

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::tree::{LatentTree, NodeId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Absolute tolerance for equality tests on exact additive metrics.
pub const EXACT_TOL: f64 = 1e-9;

/// Classification of an active node pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairRelation {
    /// `child` is a leaf and `parent` is its neighbor.
    ParentChild { parent: NodeId, child: NodeId },
    /// Both are leaves sharing a parent.
    SiblingsBothLeaves,
    /// Anything else.
    Inconclusive,
}

/// Sibling decision rule for the relaxed algorithm.
#[derive(Clone, Debug)]
pub enum Epsilon {
    /// Declare siblings when the range statistic is below a fixed threshold.
    Fixed(f64),
    /// Cluster nodes by the range statistic with medoid k-means and
    /// silhouette selection; `floor` declares a single family when every
    /// pairwise statistic sits below it.
    Auto { floor: f64 },
}

/// Thresholds for the sample-based algorithms.
#[derive(Clone, Debug)]
pub struct RelaxationConfig {
    /// Distance gate: only estimates below `tau` enter any test.
    pub tau: f64,
    /// Sibling rule.
    pub epsilon: Epsilon,
    /// Edge-contraction threshold for post-processing.
    pub epsilon_prime: f64,
    /// Keep at most this many witnesses per pair, preferring the closest;
    /// long estimates carry the most noise, so the reliable short ones
    /// decide. `usize::MAX` disables the cap.
    pub witness_cap: usize,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        RelaxationConfig {
            tau: f64::INFINITY,
            epsilon: Epsilon::Auto { floor: 0.2 },
            epsilon_prime: -(0.9f64.ln()),
            witness_cap: usize::MAX,
        }
    }
}

impl RelaxationConfig {
    /// Distance gate that grows logarithmically with the sample count,
    /// admitting pairs with estimated correlation above roughly 0.15 at
    /// n = 10^4.
    pub fn default_tau(n: usize) -> f64 {
        -(0.15f64.ln()) * (1.0 + (n.max(2) as f64).log10() / 4.0)
    }

    /// Config with the sample-size-dependent gate and the default
    /// reliable-witness cap.
    pub fn for_samples(n: usize) -> Self {
        RelaxationConfig {
            tau: Self::default_tau(n),
            witness_cap: 10,
            ..Default::default()
        }
    }

    /// Tolerance used for the observed-parent test.
    fn parent_tolerance(&self) -> f64 {
        match self.epsilon {
            Epsilon::Fixed(e) => e,
            Epsilon::Auto { floor } => floor,
        }
    }
}

/// View of a distance matrix as the difference statistic
/// `phi(i,j,k) = d_ik - d_jk`.
pub struct PhiTable<'a> {
    d: &'a DistanceMatrix,
}

impl<'a> PhiTable<'a> {
    pub fn new(d: &'a DistanceMatrix) -> Self {
        PhiTable { d }
    }

    /// `d_ik - d_jk`.
    pub fn phi(&self, i: NodeId, j: NodeId, k: NodeId) -> Result<f64> {
        Ok(self.d.get(i, k)? - self.d.get(j, k)?)
    }

    /// For exact additive metrics `|phi(i,j,k)| <= d_ij` on every triple;
    /// violations flag estimation noise.
    pub fn check_additive(&self, tol: f64) -> Result<()> {
        let labels = self.d.labels();
        for &i in labels {
            for &j in labels {
                if j <= i {
                    continue;
                }
                let dij = self.d.get(i, j)?;
                for &k in labels {
                    if k == i || k == j {
                        continue;
                    }
                    let phi = self.phi(i, j, k)?;
                    if phi.abs() > dij + tol {
                        return Err(Error::NotAdditive(format!(
                            "|phi({i},{j},{k})| = {} > d = {dij}",
                            phi.abs()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Classifies every active pair on an exact distance matrix and returns the
/// coarsest partition whose multi-node blocks are families (sibling leaves
/// plus, possibly, their observed parent).
pub fn test_node_relationships(
    d: &DistanceMatrix,
    active: &[NodeId],
) -> Result<(BTreeMap<(NodeId, NodeId), PairRelation>, Vec<Vec<NodeId>>)> {
    if active.len() < 3 {
        return Err(Error::NeedThreeNodes(active.len()));
    }
    let mut relations = BTreeMap::new();
    for (a, &i) in active.iter().enumerate() {
        for &j in active.iter().skip(a + 1) {
            relations.insert((i, j), classify_pair(d, active, i, j)?);
        }
    }
    let blocks = partition_from_relations(active, &relations);
    Ok((relations, blocks))
}

fn classify_pair(
    d: &DistanceMatrix,
    active: &[NodeId],
    i: NodeId,
    j: NodeId,
) -> Result<PairRelation> {
    let dij = d.get(i, j)?;
    let mut first = None;
    let mut constant = true;
    let mut all_plus = true;
    let mut all_minus = true;
    for &k in active {
        if k == i || k == j {
            continue;
        }
        let phi = d.get(i, k)? - d.get(j, k)?;
        if (phi - dij).abs() > EXACT_TOL {
            all_plus = false;
        }
        if (phi + dij).abs() > EXACT_TOL {
            all_minus = false;
        }
        match first {
            None => first = Some(phi),
            Some(f) => {
                if (phi - f).abs() > EXACT_TOL {
                    constant = false;
                }
            }
        }
    }
    if all_plus {
        return Ok(PairRelation::ParentChild {
            parent: j,
            child: i,
        });
    }
    if all_minus {
        return Ok(PairRelation::ParentChild {
            parent: i,
            child: j,
        });
    }
    if constant {
        let c = first.expect("at least one witness");
        if c.abs() < dij - EXACT_TOL {
            return Ok(PairRelation::SiblingsBothLeaves);
        }
    }
    Ok(PairRelation::Inconclusive)
}

/// Connected components of the family relation; in exact arithmetic those
/// components are cliques, one per family.
fn partition_from_relations(
    active: &[NodeId],
    relations: &BTreeMap<(NodeId, NodeId), PairRelation>,
) -> Vec<Vec<NodeId>> {
    let index: BTreeMap<NodeId, usize> = active.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut parent: Vec<usize> = (0..active.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for (&(i, j), rel) in relations {
        if !matches!(rel, PairRelation::Inconclusive) {
            let (a, b) = (find(&mut parent, index[&i]), find(&mut parent, index[&j]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut blocks: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (pos, &n) in active.iter().enumerate() {
        blocks.entry(find(&mut parent, pos)).or_default().push(n);
    }
    blocks.into_values().collect()
}

/// Range of the gated difference statistic together with its witness set;
/// `None` when the gate leaves no witnesses or the pair itself is gated out.
pub fn sibling_statistic(
    d: &DistanceMatrix,
    i: NodeId,
    j: NodeId,
    config: &RelaxationConfig,
) -> Result<Option<(f64, Vec<NodeId>)>> {
    sibling_statistic_over(d, d.labels(), i, j, config)
}

fn sibling_statistic_over(
    d: &DistanceMatrix,
    active: &[NodeId],
    i: NodeId,
    j: NodeId,
    config: &RelaxationConfig,
) -> Result<Option<(f64, Vec<NodeId>)>> {
    if !(d.get(i, j)? < config.tau) {
        return Ok(None);
    }
    let witnesses = gated_witnesses(d, active, i, j, config)?;
    if witnesses.is_empty() {
        return Ok(None);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &k in &witnesses {
        let phi = d.get(i, k)? - d.get(j, k)?;
        lo = lo.min(phi);
        hi = hi.max(phi);
    }
    Ok(Some((hi - lo, witnesses)))
}

/// Witnesses below the gate, trimmed to the `witness_cap` closest.
fn gated_witnesses(
    d: &DistanceMatrix,
    active: &[NodeId],
    i: NodeId,
    j: NodeId,
    config: &RelaxationConfig,
) -> Result<Vec<NodeId>> {
    let mut scored: Vec<(f64, NodeId)> = Vec::new();
    for &k in active {
        if k == i || k == j {
            continue;
        }
        let reach = d.get(i, k)?.max(d.get(j, k)?);
        if reach < config.tau {
            scored.push((reach, k));
        }
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(config.witness_cap);
    Ok(scored.into_iter().map(|(_, k)| k).collect())
}

/// A family block found in one pass: its members and, when one of the
/// members is the parent of the others, that parent.
#[derive(Clone, Debug)]
struct Block {
    members: Vec<NodeId>,
    parent: Option<NodeId>,
}

/// Reconstruction outcome with diagnostics.
#[derive(Clone, Debug)]
pub struct RgOutcome {
    /// The learned tree over the input labels plus introduced hidden nodes.
    pub tree: LatentTree,
    /// Distances over every node of the learned tree, including the values
    /// computed for hidden nodes along the way.
    pub distances: DistanceMatrix,
    /// Number of grouping passes (final two-node join included).
    pub iterations: usize,
}

/// Exact recursive grouping: requires `d` to be the additive metric of a
/// minimal latent tree over its labels.
pub fn rg_exact(d: &DistanceMatrix) -> Result<LatentTree> {
    Ok(rg_exact_with_stats(d)?.tree)
}

/// Exact recursive grouping with diagnostics.
pub fn rg_exact_with_stats(d: &DistanceMatrix) -> Result<RgOutcome> {
    let out = rg_run(d, Mode::Exact, 0)?;
    // Metric idempotence: the output tree must reproduce the input exactly.
    for (a, &i) in d.labels().iter().enumerate() {
        for &j in d.labels().iter().skip(a + 1) {
            let got = out
                .tree
                .path_length(i, j)?
                .ok_or_else(|| Error::NotAdditive("missing edge length".into()))?;
            if (got - d.get(i, j)?).abs() > 1e-6 {
                return Err(Error::NotAdditive(format!(
                    "reconstructed d({i},{j}) = {got}, input {}",
                    d.get(i, j)?
                )));
            }
        }
    }
    Ok(out)
}

/// Relaxed recursive grouping on estimated distances. `seed` drives the
/// k-means restarts when the sibling rule is `Epsilon::Auto`.
pub fn rg_relaxed(d: &DistanceMatrix, config: &RelaxationConfig, seed: u64) -> Result<LatentTree> {
    Ok(rg_relaxed_with_stats(d, config, seed)?.tree)
}

/// Relaxed recursive grouping with diagnostics. A final pass contracts
/// hidden-incident edges shorter than the configured threshold, the same
/// post-processing the relaxed spanning-tree learners apply; it merges the
/// occasional over-split family whose two parents come out at distance
/// near zero.
pub fn rg_relaxed_with_stats(
    d: &DistanceMatrix,
    config: &RelaxationConfig,
    seed: u64,
) -> Result<RgOutcome> {
    let mut out = rg_run(
        d,
        Mode::Relaxed {
            config: config.clone(),
            seed,
        },
        0,
    )?;
    out.tree = crate::neighbor_joining::contract_short_hidden_edges(
        &out.tree,
        config.epsilon_prime,
        None,
    );
    Ok(out)
}

pub(crate) enum Mode {
    Exact,
    Relaxed { config: RelaxationConfig, seed: u64 },
}

/// Shared driver. `hidden_start` namespaces the hidden ids so callers that
/// splice several reconstructions together keep ids unique.
pub(crate) fn rg_run(d: &DistanceMatrix, mode: Mode, hidden_start: u32) -> Result<RgOutcome> {
    let mut active: Vec<NodeId> = d.labels().to_vec();
    active.sort();
    if active.is_empty() {
        return Err(Error::TooFewNodes(0));
    }
    let mut work = d.clone();
    let mut edges: Vec<(NodeId, NodeId, f64)> = Vec::new();
    // Retired descendants of each still-active node.
    let mut below: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut next_hidden = hidden_start;
    let mut iterations = 0usize;
    let mut rng = match &mode {
        Mode::Exact => ChaCha8Rng::seed_from_u64(0),
        Mode::Relaxed { seed, .. } => ChaCha8Rng::seed_from_u64(*seed),
    };

    loop {
        if active.len() <= 1 {
            break;
        }
        if active.len() == 2 {
            iterations += 1;
            let (a, b) = (active[0], active[1]);
            edges.push((a, b, work.get(a, b)?));
            break;
        }
        iterations += 1;
        let blocks = match &mode {
            Mode::Exact => {
                let (relations, parts) = test_node_relationships(&work, &active)?;
                let mut blocks = Vec::new();
                for members in parts {
                    if members.len() < 2 {
                        blocks.push(Block {
                            members,
                            parent: None,
                        });
                        continue;
                    }
                    let parent = exact_parent_of(&members, &relations);
                    blocks.push(Block { members, parent });
                }
                blocks
            }
            Mode::Relaxed { config, .. } => relaxed_blocks(&work, &active, config, &mut rng)?,
        };

        let progress = blocks.iter().any(|b| b.members.len() >= 2);
        let blocks = if progress {
            blocks
        } else {
            match &mode {
                Mode::Exact => {
                    return Err(Error::NotAdditive(
                        "no family found on an exact metric".into(),
                    ))
                }
                Mode::Relaxed { config, .. } => force_progress(&work, &active, config)?,
            }
        };

        let mut new_active: Vec<NodeId> = Vec::new();
        for block in &blocks {
            if block.members.len() == 1 {
                new_active.push(block.members[0]);
                continue;
            }
            match block.parent {
                Some(p) => {
                    for &c in &block.members {
                        if c != p {
                            edges.push((p, c, work.get(p, c)?));
                            let moved = below.remove(&c).unwrap_or_default();
                            let entry = below.entry(p).or_default();
                            entry.insert(c);
                            entry.extend(moved);
                        }
                    }
                    new_active.push(p);
                }
                None => {
                    let h = NodeId::Hidden(next_hidden);
                    next_hidden += 1;
                    attach_hidden_parent(
                        &mut work,
                        &active,
                        &block.members,
                        h,
                        &below,
                        &mode,
                    )?;
                    for &c in &block.members {
                        edges.push((c, h, work.get(c, h)?));
                        let moved = below.remove(&c).unwrap_or_default();
                        let entry = below.entry(h).or_default();
                        entry.insert(c);
                        entry.extend(moved);
                    }
                    new_active.push(h);
                }
            }
        }
        new_active.sort();
        new_active.dedup();
        active = new_active;
    }

    let mut tree = LatentTree::new();
    for &n in d.labels() {
        tree.add_node(n);
    }
    for &(u, v, len) in &edges {
        tree.add_node(u);
        tree.add_node(v);
        tree.add_edge(u, v, Some(len.max(0.0)))?;
    }
    tree.validate()?;
    Ok(RgOutcome {
        tree,
        distances: work,
        iterations,
    })
}

/// In an exact block the parent, when observed, is the unique member that is
/// the `parent` side of a parent-child relation with every other member.
fn exact_parent_of(
    members: &[NodeId],
    relations: &BTreeMap<(NodeId, NodeId), PairRelation>,
) -> Option<NodeId> {
    'outer: for &p in members {
        for &x in members {
            if x == p {
                continue;
            }
            let key = (x.min(p), x.max(p));
            match relations.get(&key) {
                Some(PairRelation::ParentChild { parent, .. }) if *parent == p => {}
                _ => continue 'outer,
            }
        }
        return Some(p);
    }
    None
}

/// Computes distances from a new hidden parent `h` of `children` to every
/// node already in the working matrix, then appends `h`.
fn attach_hidden_parent(
    work: &mut DistanceMatrix,
    active: &[NodeId],
    children: &[NodeId],
    h: NodeId,
    below: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    mode: &Mode,
) -> Result<()> {
    let gate = match mode {
        Mode::Exact => RelaxationConfig::default(),
        Mode::Relaxed { config, .. } => config.clone(),
    };
    // Child distances: d(i,h) averaged over siblings j and gated witnesses k.
    let mut dists: BTreeMap<NodeId, f64> = BTreeMap::new();
    for &i in children {
        let mut terms = Vec::new();
        for &j in children {
            if j == i {
                continue;
            }
            let dij = work.get(i, j)?;
            let mut phis = Vec::new();
            for k in gated_witnesses(work, active, i, j, &gate)? {
                phis.push(work.get(i, k)? - work.get(j, k)?);
            }
            if !phis.is_empty() {
                let mean_phi: f64 = phis.iter().sum::<f64>() / phis.len() as f64;
                terms.push(dij + mean_phi);
            }
        }
        let dih = if terms.is_empty() {
            // Every witness set was gated out: fall back to the nearest
            // witness, ignoring the gate.
            let j = children
                .iter()
                .copied()
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    work.get(i, a)
                        .unwrap()
                        .partial_cmp(&work.get(i, b).unwrap())
                        .unwrap()
                })
                .expect("blocks have at least two members");
            let k = active
                .iter()
                .copied()
                .find(|&k| k != i && k != j)
                .expect("three active nodes");
            0.5 * (work.get(i, j)? + work.get(i, k)? - work.get(j, k)?)
        } else {
            0.5 * terms.iter().sum::<f64>() / terms.len() as f64
        };
        dists.insert(i, dih.max(0.0));
    }
    // Everything else: descendants go through their owning child, other
    // nodes through the averaged difference across children.
    let child_set: BTreeSet<NodeId> = children.iter().copied().collect();
    for &w in work.labels() {
        if child_set.contains(&w) {
            continue;
        }
        let owner = children
            .iter()
            .copied()
            .find(|c| below.get(c).is_some_and(|s| s.contains(&w)));
        let dwh = match owner {
            Some(c) => dists[&c] + work.get(c, w)?,
            None => {
                let mut terms = Vec::new();
                for &i in children {
                    terms.push(work.get(i, w)? - dists[&i]);
                }
                terms.iter().sum::<f64>() / terms.len() as f64
            }
        };
        dists.insert(w, dwh.max(0.0));
    }
    work.push_node(h, &dists);
    Ok(())
}

/// Sibling blocks for the relaxed pass.
fn relaxed_blocks(
    work: &DistanceMatrix,
    active: &[NodeId],
    config: &RelaxationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Block>> {
    // Range statistic for every gated pair.
    let mut lambda: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    for (a, &i) in active.iter().enumerate() {
        for &j in active.iter().skip(a + 1) {
            if let Some((l, _)) = sibling_statistic_over(work, active, i, j, config)? {
                lambda.insert((i, j), l);
            }
        }
    }

    let groups: Vec<Vec<NodeId>> = match config.epsilon {
        Epsilon::Fixed(eps) => threshold_components(active, &lambda, eps),
        Epsilon::Auto { floor } => {
            let clusterable: Vec<NodeId> = active
                .iter()
                .copied()
                .filter(|&n| lambda.keys().any(|&(i, j)| i == n || j == n))
                .collect();
            if clusterable.len() < 4 {
                threshold_components(active, &lambda, floor)
            } else {
                let mut groups = cluster_families(&clusterable, &lambda, floor, rng);
                for &n in active {
                    if !clusterable.contains(&n) {
                        groups.push(vec![n]);
                    }
                }
                groups
            }
        }
    };

    let mut blocks = Vec::new();
    for members in groups {
        if members.len() < 2 {
            blocks.push(Block {
                members,
                parent: None,
            });
            continue;
        }
        let parent = relaxed_parent_of(work, active, &members, config)?;
        blocks.push(Block { members, parent });
    }
    Ok(blocks)
}

/// Components of the graph whose edges are pairs with statistic below `eps`.
fn threshold_components(
    active: &[NodeId],
    lambda: &BTreeMap<(NodeId, NodeId), f64>,
    eps: f64,
) -> Vec<Vec<NodeId>> {
    let relations: BTreeMap<(NodeId, NodeId), PairRelation> = lambda
        .iter()
        .filter(|(_, &l)| l < eps)
        .map(|(&k, _)| (k, PairRelation::SiblingsBothLeaves))
        .collect();
    partition_from_relations(active, &relations)
}

/// Groups active nodes into families by medoid k-means on the range
/// statistic, selecting the cluster count by the average silhouette over
/// `k = 2..=count-2`. All statistics below `floor` collapse to one family.
pub fn cluster_families(
    nodes: &[NodeId],
    lambda: &BTreeMap<(NodeId, NodeId), f64>,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<NodeId>> {
    let m = nodes.len();
    if m <= 1 {
        return vec![nodes.to_vec()];
    }
    let max_finite = lambda.values().copied().fold(0.0f64, f64::max);
    let big = 2.0 * max_finite + 1.0;
    let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut diss = vec![big; m * m];
    let mut all_small = true;
    for i in 0..m {
        diss[i * m + i] = 0.0;
    }
    for (a, &i) in nodes.iter().enumerate() {
        for &j in nodes.iter().skip(a + 1) {
            let v = lambda
                .get(&(i.min(j), i.max(j)))
                .copied()
                .unwrap_or(big);
            let (x, y) = (index[&i], index[&j]);
            diss[x * m + y] = v;
            diss[y * m + x] = v;
            if v >= floor {
                all_small = false;
            }
        }
    }
    if all_small {
        return vec![nodes.to_vec()];
    }
    if m < 4 {
        // Too few nodes to pick k by silhouette.
        return threshold_components(nodes, lambda, floor);
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in 2..=m - 2 {
        for _restart in 0..5 {
            let assignment = kmedoids(&diss, m, k, rng);
            let score = average_silhouette(&diss, m, &assignment, k);
            let better = match &best {
                None => true,
                Some((s, _)) => score > *s + 1e-12,
            };
            if better {
                best = Some((score, assignment));
            }
        }
    }
    let (_, assignment) = best.expect("k range non-empty for m >= 4");
    // Defer ambiguous members: a node whose own silhouette is weak is left
    // ungrouped for a later pass, where it is tested against the averaged
    // (far less noisy) distances of already-introduced parents instead of
    // against single noisy leaves.
    let deferred: Vec<bool> = (0..m)
        .map(|i| node_silhouette(&diss, m, &assignment, i) < DEFER_SILHOUETTE)
        .collect();
    let k = assignment.iter().copied().max().unwrap_or(0) + 1;
    let mut out = vec![Vec::new(); k];
    for (pos, &cluster) in assignment.iter().enumerate() {
        if !deferred[pos] {
            out[cluster].push(nodes[pos]);
        }
    }
    for (pos, &d) in deferred.iter().enumerate() {
        if d {
            out.push(vec![nodes[pos]]);
        }
    }
    out.retain(|c| !c.is_empty());
    out
}

/// Silhouette floor below which a node is deferred to a later pass. Zero
/// defers only nodes that sit strictly closer to a foreign cluster.
const DEFER_SILHOUETTE: f64 = 0.0;

fn node_silhouette(diss: &[f64], m: usize, assignment: &[usize], i: usize) -> f64 {
    let own = assignment[i];
    let own_members: Vec<usize> = (0..m)
        .filter(|&x| assignment[x] == own && x != i)
        .collect();
    if own_members.is_empty() {
        return 1.0;
    }
    let a: f64 =
        own_members.iter().map(|&x| diss[i * m + x]).sum::<f64>() / own_members.len() as f64;
    let k = assignment.iter().copied().max().unwrap_or(0) + 1;
    let mut b = f64::INFINITY;
    for other in 0..k {
        if other == own {
            continue;
        }
        let members: Vec<usize> = (0..m).filter(|&x| assignment[x] == other).collect();
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().map(|&x| diss[i * m + x]).sum::<f64>() / members.len() as f64;
        b = b.min(mean);
    }
    if b.is_finite() {
        (b - a) / a.max(b)
    } else {
        1.0
    }
}

fn kmedoids(diss: &[f64], m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // Farthest-point initialization: a random first medoid, then repeatedly
    // the node farthest from every chosen one. Restarts vary the start.
    let mut centers: Vec<usize> = vec![rng.random_range(0..m)];
    while centers.len() < k {
        let far = (0..m)
            .filter(|i| !centers.contains(i))
            .max_by(|&a, &b| {
                let da = centers.iter().map(|&c| diss[a * m + c]).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|&c| diss[b * m + c]).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        centers.push(far);
    }
    let mut assignment = vec![0usize; m];
    for _ in 0..30 {
        for i in 0..m {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, &c) in centers.iter().enumerate() {
                let d = diss[i * m + c];
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assignment[i] = best;
        }
        // Minimax medoid per cluster.
        let mut new_centers = centers.clone();
        for (ci, nc) in new_centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..m).filter(|&i| assignment[i] == ci).collect();
            if members.is_empty() {
                continue;
            }
            let mut best = members[0];
            let mut best_worst = f64::INFINITY;
            for &c in &members {
                let worst = members
                    .iter()
                    .map(|&i| diss[i * m + c])
                    .fold(0.0f64, f64::max);
                if worst < best_worst {
                    best_worst = worst;
                    best = c;
                }
            }
            *nc = best;
        }
        if new_centers == centers {
            break;
        }
        centers = new_centers;
    }
    // Refinement sweeps: move each point to the cluster with the smallest
    // mean dissimilarity (the same statistic the silhouette scores), which
    // is markedly more robust than medoid distance alone on noisy ranges.
    for _ in 0..10 {
        let mut moved = false;
        for i in 0..m {
            let mut best = assignment[i];
            let mut best_mean = f64::INFINITY;
            for cluster in 0..k {
                let members: Vec<usize> = (0..m)
                    .filter(|&x| assignment[x] == cluster && x != i)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mean = members.iter().map(|&x| diss[i * m + x]).sum::<f64>()
                    / members.len() as f64;
                if mean < best_mean {
                    best_mean = mean;
                    best = cluster;
                }
            }
            if best != assignment[i] {
                assignment[i] = best;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    assignment
}

fn average_silhouette(diss: &[f64], m: usize, assignment: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        let own = assignment[i];
        let own_members: Vec<usize> = (0..m)
            .filter(|&x| assignment[x] == own && x != i)
            .collect();
        if own_members.is_empty() {
            continue; // singleton: silhouette 0
        }
        let a: f64 =
            own_members.iter().map(|&x| diss[i * m + x]).sum::<f64>() / own_members.len() as f64;
        let mut b = f64::INFINITY;
        for other in 0..k {
            if other == own {
                continue;
            }
            let members: Vec<usize> = (0..m).filter(|&x| assignment[x] == other).collect();
            if members.is_empty() {
                continue;
            }
            let mean =
                members.iter().map(|&x| diss[i * m + x]).sum::<f64>() / members.len() as f64;
            b = b.min(mean);
        }
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / m as f64
}

/// Observed-parent detection inside a relaxed family block.
fn relaxed_parent_of(
    work: &DistanceMatrix,
    active: &[NodeId],
    members: &[NodeId],
    config: &RelaxationConfig,
) -> Result<Option<NodeId>> {
    let tol = config.parent_tolerance();
    if members.len() == 2 {
        // No inner witnesses: decide from the mean difference statistic,
        // mirroring the exact leaf/parent case.
        let (i, j) = (members[0], members[1]);
        let dij = work.get(i, j)?;
        let mut phis = Vec::new();
        for k in gated_witnesses(work, active, i, j, config)? {
            phis.push(work.get(i, k)? - work.get(j, k)?);
        }
        if phis.is_empty() {
            return Ok(None);
        }
        let c = phis.iter().sum::<f64>() / phis.len() as f64;
        if (c - dij).abs() < tol {
            return Ok(Some(j));
        }
        if (c + dij).abs() < tol {
            return Ok(Some(i));
        }
        return Ok(None);
    }
    let mut best: Option<(f64, NodeId)> = None;
    for &p in members {
        let mut worst: f64 = 0.0;
        for (a, &i) in members.iter().enumerate() {
            if i == p {
                continue;
            }
            for &j in members.iter().skip(a + 1) {
                if j == p {
                    continue;
                }
                let resid = (work.get(i, p)? + work.get(p, j)? - work.get(i, j)?).abs();
                worst = worst.max(resid);
            }
        }
        let better = match best {
            None => true,
            Some((w, _)) => worst < w,
        };
        if better {
            best = Some((worst, p));
        }
    }
    Ok(match best {
        Some((w, p)) if w < tol => Some(p),
        _ => None,
    })
}

/// Fallback when a relaxed pass finds no family: group the closest pair by
/// the range statistic, or everything under one hidden node when no pair has
/// witnesses.
fn force_progress(
    work: &DistanceMatrix,
    active: &[NodeId],
    config: &RelaxationConfig,
) -> Result<Vec<Block>> {
    let mut best: Option<((NodeId, NodeId), f64)> = None;
    for (a, &i) in active.iter().enumerate() {
        for &j in active.iter().skip(a + 1) {
            let open = RelaxationConfig {
                tau: f64::INFINITY,
                ..config.clone()
            };
            if let Some((l, _)) = sibling_statistic_over(work, active, i, j, &open)? {
                let better = match best {
                    None => true,
                    Some((_, bl)) => l < bl,
                };
                if better {
                    best = Some(((i, j), l));
                }
            }
        }
    }
    match best {
        Some(((i, j), _)) => {
            let mut blocks = vec![Block {
                members: vec![i, j],
                parent: None,
            }];
            for &n in active {
                if n != i && n != j {
                    blocks.push(Block {
                        members: vec![n],
                        parent: None,
                    });
                }
            }
            Ok(blocks)
        }
        None => Ok(vec![Block {
            members: active.to_vec(),
            parent: None,
        }]),
    }
}
