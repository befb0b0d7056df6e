//! Parameterized latent tree distributions.
//!
//! Three families share the tree abstraction: Gaussian models carry one
//! correlation per edge (zero mean, unit variance everywhere), symmetric
//! discrete models carry one crossover probability per edge with uniform
//! marginals, and general discrete models carry a root marginal plus
//! row-stochastic conditionals on directed edges. For the first two families
//! the per-edge information distance determines the parameter and vice
//! versa; for general discrete models no such inverse exists, which is why
//! this module deliberately exposes none.

use crate::distance::{DistanceMatrix, DistanceSource};
use crate::error::{Error, Result};
use crate::tree::{edge_key, LatentTree, NodeId};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// Largest discrete configuration count for exact enumeration.
const EXACT_ENUM_BUDGET: u128 = 1 << 20;

/// Model family tag.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Symmetric,
    Discrete,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Gaussian => write!(f, "gaussian"),
            Family::Symmetric => write!(f, "symmetric"),
            Family::Discrete => write!(f, "discrete"),
        }
    }
}

/// Gaussian tree model: zero mean, unit variance at every node, one
/// correlation coefficient per edge.
#[derive(Clone, Debug)]
pub struct GaussianTreeModel {
    pub tree: LatentTree,
    edge_corr: BTreeMap<(NodeId, NodeId), f64>,
}

impl GaussianTreeModel {
    /// Builds and validates: every tree edge needs a correlation with
    /// `0 < |rho| < 1`.
    pub fn new(tree: LatentTree, corr: BTreeMap<(NodeId, NodeId), f64>) -> Result<Self> {
        tree.validate()?;
        for (u, v, _) in tree.edges() {
            let rho = corr
                .get(&edge_key(u, v))
                .copied()
                .ok_or_else(|| Error::DegenerateParameter(format!("edge ({u}, {v}) missing rho")))?;
            if !(rho.abs() > 0.0 && rho.abs() < 1.0) {
                return Err(Error::DegenerateParameter(format!(
                    "rho = {rho} on edge ({u}, {v})"
                )));
            }
        }
        Ok(GaussianTreeModel {
            tree,
            edge_corr: corr,
        })
    }

    /// Correlation on an edge.
    pub fn corr(&self, u: NodeId, v: NodeId) -> f64 {
        self.edge_corr[&edge_key(u, v)]
    }

    /// Pairwise correlation: product of edge correlations along the path.
    pub fn pair_corr(&self, i: NodeId, j: NodeId) -> Result<f64> {
        let mut rho = 1.0;
        for (u, v) in self.tree.path(i, j)? {
            rho *= self.corr(u, v);
        }
        Ok(rho)
    }

    /// Covariance (= correlation) matrix over the observed nodes in sorted
    /// order.
    pub fn observed_covariance(&self) -> Result<DMatrix<f64>> {
        let obs = self.tree.observed();
        let m = obs.len();
        let mut sigma = DMatrix::zeros(m, m);
        for i in 0..m {
            sigma[(i, i)] = 1.0;
            for j in i + 1..m {
                let rho = self.pair_corr(obs[i], obs[j])?;
                sigma[(i, j)] = rho;
                sigma[(j, i)] = rho;
            }
        }
        Ok(sigma)
    }
}

/// Symmetric discrete tree model: uniform marginals and one crossover
/// probability per edge.
#[derive(Clone, Debug)]
pub struct SymmetricDiscreteTreeModel {
    pub tree: LatentTree,
    pub k: u32,
    edge_theta: BTreeMap<(NodeId, NodeId), f64>,
}

impl SymmetricDiscreteTreeModel {
    /// Builds and validates: `theta` in `(0, 1/K)` on every edge.
    pub fn new(tree: LatentTree, k: u32, theta: BTreeMap<(NodeId, NodeId), f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::DegenerateParameter(format!("alphabet size {k}")));
        }
        tree.validate()?;
        for (u, v, _) in tree.edges() {
            let t = theta
                .get(&edge_key(u, v))
                .copied()
                .ok_or_else(|| Error::DegenerateParameter(format!("edge ({u}, {v}) missing theta")))?;
            if !(t > 0.0 && t < 1.0 / k as f64) {
                return Err(Error::DegenerateParameter(format!(
                    "theta = {t} on edge ({u}, {v})"
                )));
            }
        }
        Ok(SymmetricDiscreteTreeModel {
            tree,
            k,
            edge_theta: theta,
        })
    }

    /// Crossover probability on an edge.
    pub fn theta(&self, u: NodeId, v: NodeId) -> f64 {
        self.edge_theta[&edge_key(u, v)]
    }

    /// Equivalent general discrete model (uniform root, symmetric channels),
    /// rooted at the lowest node id. Used for inference.
    pub fn to_general(&self) -> GeneralDiscreteTreeModel {
        let root = self.tree.nodes().next().unwrap();
        let k = self.k as usize;
        let mut conditionals = BTreeMap::new();
        let mut stack = vec![(root, None::<NodeId>)];
        while let Some((u, parent)) = stack.pop() {
            for v in self.tree.neighbors(u).unwrap() {
                if Some(v) == parent {
                    continue;
                }
                let theta = self.theta(u, v);
                let stay = 1.0 - (self.k as f64 - 1.0) * theta;
                let mut rows = vec![theta; k * k];
                for a in 0..k {
                    rows[a * k + a] = stay;
                }
                conditionals.insert((u, v), rows);
                stack.push((v, Some(u)));
            }
        }
        GeneralDiscreteTreeModel::new(
            self.tree.clone(),
            self.k,
            root,
            vec![1.0 / self.k as f64; k],
            conditionals,
        )
        .expect("symmetric model converts to a valid general model")
    }
}

/// General discrete tree model: root marginal plus a K x K row-stochastic
/// conditional on each edge directed away from the root. Rows are indexed by
/// the parent state.
#[derive(Clone, Debug)]
pub struct GeneralDiscreteTreeModel {
    pub tree: LatentTree,
    pub k: u32,
    pub root: NodeId,
    pub root_marginal: Vec<f64>,
    conditionals: BTreeMap<(NodeId, NodeId), Vec<f64>>,
}

impl GeneralDiscreteTreeModel {
    /// Builds and validates stochasticity and non-degeneracy: the root
    /// marginal and every conditional row must sum to one, node marginals
    /// must stay positive, and every edge's pairwise joint must have a
    /// nonzero determinant.
    pub fn new(
        tree: LatentTree,
        k: u32,
        root: NodeId,
        root_marginal: Vec<f64>,
        conditionals: BTreeMap<(NodeId, NodeId), Vec<f64>>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::DegenerateParameter(format!("alphabet size {k}")));
        }
        tree.validate()?;
        if !tree.contains(root) {
            return Err(Error::UnknownNode(root));
        }
        let kk = k as usize;
        if root_marginal.len() != kk || (root_marginal.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateParameter("root marginal".into()));
        }
        let model = GeneralDiscreteTreeModel {
            tree,
            k,
            root,
            root_marginal,
            conditionals,
        };
        for (u, parent) in model.topo_order()? {
            if let Some(p) = parent {
                let rows = model
                    .conditionals
                    .get(&(p, u))
                    .ok_or_else(|| Error::DegenerateParameter(format!("edge ({p}, {u}) missing conditional")))?;
                if rows.len() != kk * kk {
                    return Err(Error::DegenerateParameter(format!(
                        "conditional on ({p}, {u}) has wrong shape"
                    )));
                }
                for a in 0..kk {
                    let s: f64 = rows[a * kk..(a + 1) * kk].iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(Error::DegenerateParameter(format!(
                            "row {a} of conditional on ({p}, {u}) sums to {s}"
                        )));
                    }
                }
            }
        }
        // C2: every edge joint must be nonsingular and marginals positive.
        let marginals = model.node_marginals()?;
        for (u, parent) in model.topo_order()? {
            if marginals[&u].iter().any(|&p| p <= 1e-12) {
                return Err(Error::DegenerateParameter(format!(
                    "node {u} has a vanishing marginal cell"
                )));
            }
            if let Some(p) = parent {
                let det = crate::distance::det_small(&model.conditionals[&(p, u)], kk);
                if det.abs() < 1e-12 {
                    return Err(Error::DegenerateParameter(format!(
                        "edge ({p}, {u}) conditional is singular"
                    )));
                }
            }
        }
        Ok(model)
    }

    /// Conditional rows for a directed edge (parent -> child).
    pub fn conditional(&self, parent: NodeId, child: NodeId) -> &[f64] {
        &self.conditionals[&(parent, child)]
    }

    /// All directed edges away from the root.
    pub fn directed_edges(&self) -> Vec<(NodeId, NodeId)> {
        self.conditionals.keys().copied().collect()
    }

    /// Nodes in root-first order, paired with their parent.
    pub fn topo_order(&self) -> Result<Vec<(NodeId, Option<NodeId>)>> {
        let mut order = vec![(self.root, None)];
        let mut stack = vec![(self.root, None::<NodeId>)];
        while let Some((u, parent)) = stack.pop() {
            for v in self.tree.neighbors(u)? {
                if Some(v) != parent {
                    order.push((v, Some(u)));
                    stack.push((v, Some(u)));
                }
            }
        }
        Ok(order)
    }

    /// Marginal distribution of every node, propagated from the root.
    pub fn node_marginals(&self) -> Result<BTreeMap<NodeId, Vec<f64>>> {
        let kk = self.k as usize;
        let mut out: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        out.insert(self.root, self.root_marginal.clone());
        for (u, parent) in self.topo_order()? {
            if let Some(p) = parent {
                let pm = out[&p].clone();
                let rows = &self.conditionals[&(p, u)];
                let mut m = vec![0.0; kk];
                for a in 0..kk {
                    for b in 0..kk {
                        m[b] += pm[a] * rows[a * kk + b];
                    }
                }
                out.insert(u, m);
            }
        }
        Ok(out)
    }

    /// Information distance of a single edge via the determinant form.
    fn edge_distance(&self, u: NodeId, v: NodeId, marginals: &BTreeMap<NodeId, Vec<f64>>) -> f64 {
        let kk = self.k as usize;
        let (p, c) = if self.conditionals.contains_key(&(u, v)) {
            (u, v)
        } else {
            (v, u)
        };
        let rows = &self.conditionals[&(p, c)];
        let det_a = crate::distance::det_small(rows, kk);
        let log_det_mp: f64 = marginals[&p].iter().map(|x| x.ln()).sum();
        let log_det_mc: f64 = marginals[&c].iter().map(|x| x.ln()).sum();
        // |det J| = det M_p * |det A|, so d = -(log|det A| + (log det M_p - log det M_c)/2).
        -(det_a.abs().ln() + 0.5 * (log_det_mp - log_det_mc))
    }
}

/// A parameterized latent tree distribution.
#[derive(Clone, Debug)]
pub enum TreeModel {
    Gaussian(GaussianTreeModel),
    Symmetric(SymmetricDiscreteTreeModel),
    Discrete(GeneralDiscreteTreeModel),
}

impl TreeModel {
    /// The underlying tree.
    pub fn tree(&self) -> &LatentTree {
        match self {
            TreeModel::Gaussian(m) => &m.tree,
            TreeModel::Symmetric(m) => &m.tree,
            TreeModel::Discrete(m) => &m.tree,
        }
    }

    /// Family tag.
    pub fn family(&self) -> Family {
        match self {
            TreeModel::Gaussian(_) => Family::Gaussian,
            TreeModel::Symmetric(_) => Family::Symmetric,
            TreeModel::Discrete(_) => Family::Discrete,
        }
    }

    /// Alphabet size for discrete families.
    pub fn alphabet(&self) -> Option<u32> {
        match self {
            TreeModel::Gaussian(_) => None,
            TreeModel::Symmetric(m) => Some(m.k),
            TreeModel::Discrete(m) => Some(m.k),
        }
    }

    /// Per-edge information distance.
    pub fn edge_distance(&self, u: NodeId, v: NodeId) -> Result<f64> {
        if !self.tree().has_edge(u, v) {
            return Err(Error::NoSuchEdge(u, v));
        }
        Ok(match self {
            TreeModel::Gaussian(m) => -m.corr(u, v).abs().ln(),
            TreeModel::Symmetric(m) => {
                let t = m.theta(u, v);
                -(m.k as f64 - 1.0) * (1.0 - m.k as f64 * t).ln()
            }
            TreeModel::Discrete(m) => {
                let marginals = m.node_marginals()?;
                m.edge_distance(u, v, &marginals)
            }
        })
    }

    /// Exact information distances between the given nodes: the per-edge
    /// distances summed along tree paths. For Gaussian models the sign
    /// matrix carries the sign of the correlation product.
    pub fn exact_distance_matrix(&self, nodes: &[NodeId]) -> Result<DistanceMatrix> {
        for &n in nodes {
            if !self.tree().contains(n) {
                return Err(Error::UnknownNode(n));
            }
        }
        // Per-edge distances, computed once.
        let mut edge_d: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
        let discrete_marginals = match self {
            TreeModel::Discrete(m) => Some(m.node_marginals()?),
            _ => None,
        };
        for (u, v, _) in self.tree().edges() {
            let d = match (self, &discrete_marginals) {
                (TreeModel::Discrete(m), Some(marg)) => m.edge_distance(u, v, marg),
                _ => self.edge_distance(u, v)?,
            };
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::DegenerateParameter(format!(
                    "edge ({u}, {v}) has information distance {d}"
                )));
            }
            edge_d.insert(edge_key(u, v), d);
        }
        let mut out = DistanceMatrix::zeros(nodes.to_vec(), DistanceSource::Exact);
        let mut signs = vec![1i8; nodes.len() * nodes.len()];
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate().skip(a + 1) {
                let mut total = 0.0;
                let mut sign = 1i8;
                for (u, v) in self.tree().path(i, j)? {
                    total += edge_d[&edge_key(u, v)];
                    if let TreeModel::Gaussian(m) = self {
                        if m.corr(u, v) < 0.0 {
                            sign = -sign;
                        }
                    }
                }
                out.set(i, j, total)?;
                signs[a * nodes.len() + b] = sign;
                signs[b * nodes.len() + a] = sign;
            }
        }
        if matches!(self, TreeModel::Gaussian(_)) {
            out.set_signs(signs);
        }
        Ok(out)
    }

    /// Covariance matrix over the observed nodes (Gaussian models).
    pub fn observed_covariance(&self) -> Result<DMatrix<f64>> {
        match self {
            TreeModel::Gaussian(m) => m.observed_covariance(),
            _ => Err(Error::UnsupportedFamily(self.family().to_string())),
        }
    }

    /// Draws `n` i.i.d. samples by an ancestral pass rooted at the lowest
    /// node id. Deterministic given the seed. Columns are the observed nodes
    /// in sorted order; `include_hidden` appends the hidden columns.
    pub fn sample(&self, n: usize, seed: u64, include_hidden: bool) -> Result<SampleMatrix> {
        let root = self.tree().nodes().next().unwrap();
        self.sample_from_root(root, n, seed, include_hidden)
    }

    /// Ancestral sampling from an explicit root. The joint distribution does
    /// not depend on the root for these parameterizations.
    pub fn sample_from_root(
        &self,
        root: NodeId,
        n: usize,
        seed: u64,
        include_hidden: bool,
    ) -> Result<SampleMatrix> {
        if !self.tree().contains(root) {
            return Err(Error::UnknownNode(root));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = self.tree().observed();
        if include_hidden {
            columns.extend(self.tree().hidden());
        }
        let col_pos: BTreeMap<NodeId, usize> =
            columns.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        // Visit order: root first, then children.
        let mut order = Vec::new();
        let mut stack = vec![(root, None::<NodeId>)];
        while let Some((u, parent)) = stack.pop() {
            order.push((u, parent));
            for v in self.tree().neighbors(u)? {
                if Some(v) != parent {
                    stack.push((v, Some(u)));
                }
            }
        }

        let mut data = vec![0.0f64; n * columns.len()];
        let mut values: BTreeMap<NodeId, f64> = BTreeMap::new();
        for r in 0..n {
            values.clear();
            for &(u, parent) in &order {
                let x = match self {
                    TreeModel::Gaussian(m) => {
                        let z: f64 = rng.sample(StandardNormal);
                        match parent {
                            None => z,
                            Some(p) => {
                                let rho = m.corr(p, u);
                                rho * values[&p] + (1.0 - rho * rho).sqrt() * z
                            }
                        }
                    }
                    TreeModel::Symmetric(m) => match parent {
                        None => rng.random_range(0..m.k) as f64,
                        Some(p) => {
                            let theta = m.theta(p, u);
                            let stay = 1.0 - (m.k as f64 - 1.0) * theta;
                            let roll: f64 = rng.random();
                            let parent_state = values[&p] as u32;
                            if roll < stay {
                                parent_state as f64
                            } else {
                                // Uniform over the other K-1 states.
                                let step = ((roll - stay) / theta).floor() as u32;
                                let mut s = step.min(m.k - 2);
                                if s >= parent_state {
                                    s += 1;
                                }
                                s as f64
                            }
                        }
                    },
                    TreeModel::Discrete(m) => {
                        let kk = m.k as usize;
                        let dist: Vec<f64> = match parent {
                            None if u == m.root => m.root_marginal.clone(),
                            None => {
                                // Sampling rooted elsewhere needs the marginal
                                // at the new root; conditionals along reversed
                                // edges come from Bayes' rule below.
                                m.node_marginals()?[&u].clone()
                            }
                            Some(p) => {
                                let a = values[&p] as usize;
                                if m.directed_edges().contains(&(p, u)) {
                                    let rows = m.conditional(p, u);
                                    rows[a * kk..(a + 1) * kk].to_vec()
                                } else {
                                    // Reversed edge: p(child = b | parent-in-model direction).
                                    let marg = m.node_marginals()?;
                                    let rows = m.conditional(u, p);
                                    let mut dist = vec![0.0; kk];
                                    for b in 0..kk {
                                        dist[b] = marg[&u][b] * rows[b * kk + a];
                                    }
                                    let s: f64 = dist.iter().sum();
                                    for v in &mut dist {
                                        *v /= s;
                                    }
                                    dist
                                }
                            }
                        };
                        let roll: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut chosen = kk - 1;
                        for (s, &p) in dist.iter().enumerate() {
                            acc += p;
                            if roll < acc {
                                chosen = s;
                                break;
                            }
                        }
                        chosen as f64
                    }
                };
                values.insert(u, x);
            }
            for (&node, &pos) in &col_pos {
                data[r * columns.len() + pos] = values[&node];
            }
        }
        SampleMatrix::new(columns, data, None)
    }

    /// KL divergence between the observed marginals of two models of the
    /// same family over the same observed set.
    pub fn kl_observed(&self, q: &TreeModel) -> Result<f64> {
        let obs_p = self.tree().observed();
        let obs_q = q.tree().observed();
        if obs_p != obs_q {
            return Err(Error::LabelMismatch);
        }
        match (self, q) {
            (TreeModel::Gaussian(_), TreeModel::Gaussian(_)) => {
                let sp = self.observed_covariance()?;
                let sq = q.observed_covariance()?;
                gaussian_kl(&sp, &sq)
            }
            (TreeModel::Symmetric(_), TreeModel::Symmetric(_))
            | (TreeModel::Discrete(_), TreeModel::Discrete(_))
            | (TreeModel::Symmetric(_), TreeModel::Discrete(_))
            | (TreeModel::Discrete(_), TreeModel::Symmetric(_)) => {
                let kp = self.alphabet().unwrap();
                let kq = q.alphabet().unwrap();
                if kp != kq {
                    return Err(Error::UnsupportedFamily(
                        "alphabet sizes differ".to_string(),
                    ));
                }
                let configs = (kp as u128).checked_pow(obs_p.len() as u32);
                match configs {
                    Some(c) if c <= EXACT_ENUM_BUDGET => {}
                    Some(c) => return Err(Error::TooLargeForExact(c, EXACT_ENUM_BUDGET)),
                    None => return Err(Error::TooLargeForExact(u128::MAX, EXACT_ENUM_BUDGET)),
                }
                let gp = self.as_general_discrete();
                let gq = q.as_general_discrete();
                discrete_observed_kl(&gp, &gq, &obs_p)
            }
            _ => Err(Error::UnsupportedFamily(format!(
                "{} vs {}",
                self.family(),
                q.family()
            ))),
        }
    }

    /// View any discrete model as a general discrete model.
    pub fn as_general_discrete(&self) -> GeneralDiscreteTreeModel {
        match self {
            TreeModel::Symmetric(m) => m.to_general(),
            TreeModel::Discrete(m) => m.clone(),
            TreeModel::Gaussian(_) => panic!("gaussian model has no discrete form"),
        }
    }

    /// Gaussian model whose edge correlations are `exp(-length)` with the
    /// given sign convention (all positive when `signs` is `None`). Used to
    /// recover parameters from a learned tree.
    pub fn gaussian_from_lengths(tree: &LatentTree) -> Result<TreeModel> {
        let mut corr = BTreeMap::new();
        for (u, v, d) in tree.edges() {
            let d = d.ok_or_else(|| {
                Error::DegenerateParameter(format!("edge ({u}, {v}) has no length"))
            })?;
            // Clamp away from |rho| = 1 so the model stays nondegenerate.
            let rho = (-d.max(1e-9)).exp();
            corr.insert(edge_key(u, v), rho);
        }
        Ok(TreeModel::Gaussian(GaussianTreeModel::new(
            tree.clone(),
            corr,
        )?))
    }

    /// Symmetric discrete model recovered from edge lengths:
    /// `theta = (1 - exp(-d/(K-1))) / K`.
    pub fn symmetric_from_lengths(tree: &LatentTree, k: u32) -> Result<TreeModel> {
        let mut theta = BTreeMap::new();
        for (u, v, d) in tree.edges() {
            let d = d.ok_or_else(|| {
                Error::DegenerateParameter(format!("edge ({u}, {v}) has no length"))
            })?;
            let t = (1.0 - (-d.max(1e-9) / (k as f64 - 1.0)).exp()) / k as f64;
            theta.insert(edge_key(u, v), t);
        }
        Ok(TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(
            tree.clone(),
            k,
            theta,
        )?))
    }

    /// Serializes to the model JSON format.
    pub fn to_json(&self) -> ModelJson {
        match self {
            TreeModel::Gaussian(m) => ModelJson {
                family: Family::Gaussian,
                tree: m.tree.to_json(),
                k: None,
                edge_corr: Some(
                    m.edge_corr
                        .iter()
                        .map(|(&(u, v), &rho)| EdgeParamJson {
                            u: u.to_signed(),
                            v: v.to_signed(),
                            value: rho,
                        })
                        .collect(),
                ),
                edge_theta: None,
                root: None,
                root_marginal: None,
                conditionals: None,
            },
            TreeModel::Symmetric(m) => ModelJson {
                family: Family::Symmetric,
                tree: m.tree.to_json(),
                k: Some(m.k),
                edge_corr: None,
                edge_theta: Some(
                    m.edge_theta
                        .iter()
                        .map(|(&(u, v), &t)| EdgeParamJson {
                            u: u.to_signed(),
                            v: v.to_signed(),
                            value: t,
                        })
                        .collect(),
                ),
                root: None,
                root_marginal: None,
                conditionals: None,
            },
            TreeModel::Discrete(m) => ModelJson {
                family: Family::Discrete,
                tree: m.tree.to_json(),
                k: Some(m.k),
                edge_corr: None,
                edge_theta: None,
                root: Some(m.root.to_signed()),
                root_marginal: Some(m.root_marginal.clone()),
                conditionals: Some(
                    m.conditionals
                        .iter()
                        .map(|(&(p, c), rows)| ConditionalJson {
                            parent: p.to_signed(),
                            child: c.to_signed(),
                            rows: rows.clone(),
                        })
                        .collect(),
                ),
            },
        }
    }

    /// Deserializes from the model JSON format.
    pub fn from_json(j: &ModelJson) -> Result<TreeModel> {
        let tree = LatentTree::from_json(&j.tree)?;
        match j.family {
            Family::Gaussian => {
                let corr = j
                    .edge_corr
                    .as_ref()
                    .ok_or_else(|| Error::DegenerateParameter("missing edge_corr".into()))?
                    .iter()
                    .map(|e| {
                        (
                            edge_key(NodeId::from_signed(e.u), NodeId::from_signed(e.v)),
                            e.value,
                        )
                    })
                    .collect();
                Ok(TreeModel::Gaussian(GaussianTreeModel::new(tree, corr)?))
            }
            Family::Symmetric => {
                let k = j
                    .k
                    .ok_or_else(|| Error::DegenerateParameter("missing K".into()))?;
                let theta = j
                    .edge_theta
                    .as_ref()
                    .ok_or_else(|| Error::DegenerateParameter("missing edge_theta".into()))?
                    .iter()
                    .map(|e| {
                        (
                            edge_key(NodeId::from_signed(e.u), NodeId::from_signed(e.v)),
                            e.value,
                        )
                    })
                    .collect();
                Ok(TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(
                    tree, k, theta,
                )?))
            }
            Family::Discrete => {
                let k = j
                    .k
                    .ok_or_else(|| Error::DegenerateParameter("missing K".into()))?;
                let root = NodeId::from_signed(
                    j.root
                        .ok_or_else(|| Error::DegenerateParameter("missing root".into()))?,
                );
                let marginal = j
                    .root_marginal
                    .clone()
                    .ok_or_else(|| Error::DegenerateParameter("missing root_marginal".into()))?;
                let conditionals = j
                    .conditionals
                    .as_ref()
                    .ok_or_else(|| Error::DegenerateParameter("missing conditionals".into()))?
                    .iter()
                    .map(|c| {
                        (
                            (NodeId::from_signed(c.parent), NodeId::from_signed(c.child)),
                            c.rows.clone(),
                        )
                    })
                    .collect();
                Ok(TreeModel::Discrete(GeneralDiscreteTreeModel::new(
                    tree, k, root, marginal, conditionals,
                )?))
            }
        }
    }
}

/// Closed-form KL divergence between zero-mean Gaussians with covariances
/// `sigma_p` and `sigma_q`.
pub fn gaussian_kl(sigma_p: &DMatrix<f64>, sigma_q: &DMatrix<f64>) -> Result<f64> {
    let m = sigma_p.nrows();
    let chol_q = sigma_q.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let chol_p = sigma_p.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let ld_q = 2.0 * chol_q.l().diagonal().map(f64::ln).sum();
    let ld_p = 2.0 * chol_p.l().diagonal().map(f64::ln).sum();
    let trace = (chol_q.solve(sigma_p)).trace();
    Ok(0.5 * (trace - m as f64 + ld_q - ld_p).max(0.0))
}

/// Exact observed-marginal KL for discrete models by enumerating all
/// observed configurations and eliminating hidden nodes.
fn discrete_observed_kl(
    p: &GeneralDiscreteTreeModel,
    q: &GeneralDiscreteTreeModel,
    observed: &[NodeId],
) -> Result<f64> {
    let k = p.k as usize;
    let m = observed.len();
    let mut assignment = vec![0u32; m];
    let mut kl = 0.0;
    loop {
        let evid: BTreeMap<NodeId, u32> = observed
            .iter()
            .copied()
            .zip(assignment.iter().copied())
            .collect();
        let lp = crate::inference::observed_logprob(p, &evid)?;
        let lq = crate::inference::observed_logprob(q, &evid)?;
        let pp = lp.exp();
        if pp > 0.0 {
            kl += pp * (lp - lq);
        }
        // Next configuration.
        let mut pos = 0;
        loop {
            if pos == m {
                return Ok(kl.max(0.0));
            }
            assignment[pos] += 1;
            if (assignment[pos] as usize) < k {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

/// An n-by-m matrix of samples with a column-to-node labeling. Discrete
/// samples are stored as integral floats and validated on use.
#[derive(Clone, Debug)]
pub struct SampleMatrix {
    columns: Vec<NodeId>,
    labels: Option<Vec<String>>,
    data: Vec<f64>,
    n: usize,
}

impl SampleMatrix {
    /// Builds from row-major data; the length must be a multiple of the
    /// column count and column ids must be unique.
    pub fn new(columns: Vec<NodeId>, data: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        let m = columns.len();
        if m == 0 || !data.len().is_multiple_of(m) {
            return Err(Error::RaggedRows(0));
        }
        let unique: std::collections::BTreeSet<NodeId> = columns.iter().copied().collect();
        if unique.len() != m {
            return Err(Error::InvalidTree("duplicate sample columns".into()));
        }
        if let Some(l) = &labels {
            if l.len() != m {
                return Err(Error::RaggedRows(0));
            }
        }
        let n = data.len() / m;
        Ok(SampleMatrix {
            columns,
            labels,
            data,
            n,
        })
    }

    /// Number of samples.
    pub fn num_rows(&self) -> usize {
        self.n
    }

    /// Number of columns.
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Column node ids.
    pub fn columns(&self) -> &[NodeId] {
        &self.columns
    }

    /// One sample row.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.columns.len()..(r + 1) * self.columns.len()]
    }

    /// Position of a node's column.
    pub fn column_of(&self, n: NodeId) -> Result<usize> {
        self.columns
            .iter()
            .position(|&c| c == n)
            .ok_or(Error::UnknownNode(n))
    }

    /// Raw data, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Validates and converts to discrete symbols in `0..k`.
    pub fn discrete_data(&self, k: u32) -> Result<Vec<u32>> {
        let m = self.columns.len();
        self.data
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let s = v.round();
                if (v - s).abs() > 1e-9 || s < 0.0 || s >= k as f64 {
                    Err(Error::AlphabetViolation {
                        value: v,
                        column: idx % m,
                        k,
                    })
                } else {
                    Ok(s as u32)
                }
            })
            .collect()
    }

    /// Restriction to a subset of columns, preserving the given order.
    pub fn restrict(&self, cols: &[NodeId]) -> Result<SampleMatrix> {
        let idx: Vec<usize> = cols
            .iter()
            .map(|&c| self.column_of(c))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.n * cols.len());
        for r in 0..self.n {
            let row = self.row(r);
            for &i in &idx {
                data.push(row[i]);
            }
        }
        SampleMatrix::new(cols.to_vec(), data, None)
    }

    /// Horizontal concatenation with another sample matrix of equal length.
    pub fn concat(&self, other: &SampleMatrix) -> Result<SampleMatrix> {
        if self.n != other.n {
            return Err(Error::RaggedRows(other.n));
        }
        let mut columns = self.columns.clone();
        columns.extend_from_slice(&other.columns);
        let mut data = Vec::with_capacity(self.n * columns.len());
        for r in 0..self.n {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        SampleMatrix::new(columns, data, None)
    }

    /// Subtracts empirical column means (for ingested real data).
    pub fn center(&mut self) {
        let m = self.columns.len();
        for c in 0..m {
            let mean: f64 = (0..self.n).map(|r| self.data[r * m + c]).sum::<f64>() / self.n as f64;
            for r in 0..self.n {
                self.data[r * m + c] -= mean;
            }
        }
    }

    /// Writes as CSV with a header of column labels.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = match &self.labels {
            Some(l) => l.clone(),
            None => self.columns.iter().map(|c| c.to_string()).collect(),
        };
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.n {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a CSV with a header row. Columns become observed nodes in
    /// header order, keeping the header strings as labels.
    pub fn read_csv<R: BufRead>(r: R) -> Result<SampleMatrix> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidTree("empty samples CSV".into()))??;
        let labels: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let columns: Vec<NodeId> = labels
            .iter()
            .enumerate()
            .map(|(i, s)| crate::distance::parse_header_token(s, i))
            .collect();
        let m = columns.len();
        let mut data = Vec::new();
        for (rix, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m {
                return Err(Error::RaggedRows(rix + 1));
            }
            for (j, c) in cells.iter().enumerate() {
                let v: f64 = c.trim().parse().map_err(|_| Error::NonNumeric {
                    value: c.trim().to_string(),
                    row: rix + 1,
                    column: j,
                })?;
                data.push(v);
            }
        }
        SampleMatrix::new(columns, data, Some(labels))
    }
}

/// JSON form of a parameterized model: the tree plus a family tag and the
/// family's parameter map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelJson {
    pub family: Family,
    pub tree: crate::tree::TreeJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_corr: Option<Vec<EdgeParamJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_theta: Option<Vec<EdgeParamJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_marginal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditionals: Option<Vec<ConditionalJson>>,
}

/// One scalar edge parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeParamJson {
    pub u: i64,
    pub v: i64,
    pub value: f64,
}

/// One directed edge conditional, row-major by parent state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionalJson {
    pub parent: i64,
    pub child: i64,
    pub rows: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::NodeId::{Hidden as H, Observed as O};

    fn single_edge_gaussian(rho: f64) -> TreeModel {
        let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
        let mut corr = BTreeMap::new();
        corr.insert(edge_key(O(0), O(1)), rho);
        TreeModel::Gaussian(GaussianTreeModel::new(tree, corr).unwrap())
    }

    fn chain_gaussian(rhos: &[f64]) -> TreeModel {
        let mut edges = Vec::new();
        let mut corr = BTreeMap::new();
        for (i, &rho) in rhos.iter().enumerate() {
            let (u, v) = (O(i as u32), O(i as u32 + 1));
            edges.push((u, v, None));
            corr.insert(edge_key(u, v), rho);
        }
        let tree = LatentTree::from_edges(&edges).unwrap();
        TreeModel::Gaussian(GaussianTreeModel::new(tree, corr).unwrap())
    }

    #[test]
    fn gaussian_edge_distance_is_log_two_at_half() {
        let m = single_edge_gaussian(0.5);
        let d = m.exact_distance_matrix(&[O(0), O(1)]).unwrap();
        assert!((d.get(O(0), O(1)).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_chain_distance_adds() {
        let m = chain_gaussian(&[0.5, 0.5]);
        let d = m.exact_distance_matrix(&[O(0), O(2)]).unwrap();
        assert!((d.get(O(0), O(2)).unwrap() - 2.0 * 2.0f64.ln()).abs() < 1e-12);
        // Cross-check against the covariance product.
        let sigma = m.observed_covariance().unwrap();
        assert!((sigma[(0, 2)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn symmetric_edge_distance() {
        let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
        let mut theta = BTreeMap::new();
        theta.insert(edge_key(O(0), O(1)), 0.25);
        let m = TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(tree, 2, theta).unwrap());
        let d = m.exact_distance_matrix(&[O(0), O(1)]).unwrap();
        assert!((d.get(O(0), O(1)).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_parameters_rejected() {
        let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
        let mut corr = BTreeMap::new();
        corr.insert(edge_key(O(0), O(1)), 0.0);
        assert!(matches!(
            GaussianTreeModel::new(tree.clone(), corr),
            Err(Error::DegenerateParameter(_))
        ));
        let mut theta = BTreeMap::new();
        theta.insert(edge_key(O(0), O(1)), 0.5);
        assert!(matches!(
            SymmetricDiscreteTreeModel::new(tree, 2, theta),
            Err(Error::DegenerateParameter(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let m = chain_gaussian(&[0.5, 0.7]);
        let a = m.sample(100, 9, false).unwrap();
        let b = m.sample(100, 9, false).unwrap();
        assert_eq!(a.data(), b.data());
        let c = m.sample(100, 10, false).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn symmetric_single_edge_monte_carlo() {
        let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
        let mut theta = BTreeMap::new();
        theta.insert(edge_key(O(0), O(1)), 0.25);
        let m = TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(tree, 2, theta).unwrap());
        let s = m.sample(100_000, 3, false).unwrap();
        let data = s.discrete_data(2).unwrap();
        let disagree = (0..s.num_rows())
            .filter(|&r| data[2 * r] != data[2 * r + 1])
            .count() as f64
            / s.num_rows() as f64;
        assert!((disagree - 0.25).abs() < 0.01, "disagreement {disagree}");
    }

    #[test]
    fn gaussian_single_edge_monte_carlo() {
        let m = single_edge_gaussian(0.5);
        let s = m.sample(100_000, 4, false).unwrap();
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for r in 0..s.num_rows() {
            let row = s.row(r);
            sxx += row[0] * row[0];
            syy += row[1] * row[1];
            sxy += row[0] * row[1];
        }
        let rho = sxy / (sxx * syy).sqrt();
        assert!((rho - 0.5).abs() < 0.02, "empirical correlation {rho}");
    }

    #[test]
    fn symmetric_marginals_are_uniform() {
        // Star with a hidden center, K = 3.
        let tree = LatentTree::from_edges(&[
            (H(0), O(0), None),
            (H(0), O(1), None),
            (H(0), O(2), None),
        ])
        .unwrap();
        let mut theta = BTreeMap::new();
        for o in [O(0), O(1), O(2)] {
            theta.insert(edge_key(H(0), o), 0.2);
        }
        let m = TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(tree, 3, theta).unwrap());
        let n = 30_000;
        let s = m.sample(n, 5, false).unwrap();
        let data = s.discrete_data(3).unwrap();
        // 3-sigma multinomial bound per cell.
        let expect = n as f64 / 3.0;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in 0..3 {
            let mut counts = [0usize; 3];
            for r in 0..n {
                counts[data[r * 3 + c] as usize] += 1;
            }
            for &count in &counts {
                assert!(
                    (count as f64 - expect).abs() < 3.0 * sigma,
                    "column {c} counts {counts:?}"
                );
            }
        }
    }

    #[test]
    fn observed_covariance_positive_definite() {
        let m = chain_gaussian(&[0.5, -0.6, 0.8]);
        let sigma = m.observed_covariance().unwrap();
        assert!(sigma.cholesky().is_some());
    }

    #[test]
    fn kl_self_is_zero() {
        let m = chain_gaussian(&[0.5, 0.7]);
        assert!(m.kl_observed(&m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_against_independent_oracle() {
        // p: independent pair; q: correlated pair. Direct formula evaluation.
        let p = {
            let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
            let mut corr = BTreeMap::new();
            corr.insert(edge_key(O(0), O(1)), 1e-9);
            TreeModel::Gaussian(GaussianTreeModel::new(tree, corr).unwrap())
        };
        let q = single_edge_gaussian(0.5);
        let kl = p.kl_observed(&q).unwrap();
        // 0.5 * (tr(Sq^-1 Sp) - 2 + ln det Sq - ln det Sp) with Sp ~ I.
        let rho: f64 = 0.5;
        let want = 0.5 * ((2.0 / (1.0 - rho * rho) - 2.0) + (1.0 - rho * rho).ln());
        assert!((kl - want).abs() < 1e-6, "kl {kl} want {want}");
    }

    #[test]
    fn kl_positive_on_random_pairs() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = chain_gaussian(&[rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]);
            let b = chain_gaussian(&[rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]);
            assert!(a.kl_observed(&b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn discrete_kl_small_model() {
        let tree = LatentTree::from_edges(&[
            (H(0), O(0), None),
            (H(0), O(1), None),
            (H(0), O(2), None),
        ])
        .unwrap();
        let mk = |t: f64| {
            let mut theta = BTreeMap::new();
            for o in [O(0), O(1), O(2)] {
                theta.insert(edge_key(H(0), o), t);
            }
            TreeModel::Symmetric(
                SymmetricDiscreteTreeModel::new(tree.clone(), 2, theta).unwrap(),
            )
        };
        let p = mk(0.1);
        let q = mk(0.3);
        assert!(p.kl_observed(&p).unwrap().abs() < 1e-12);
        assert!(p.kl_observed(&q).unwrap() > 0.0);
    }

    #[test]
    fn additivity_matches_covariance_route() {
        // Path-sum distances equal -log |corr| recomputed from the joint.
        let m = chain_gaussian(&[0.5, -0.6, 0.8, 0.3]);
        let obs = m.tree().observed();
        let d = m.exact_distance_matrix(&obs).unwrap();
        let sigma = m.observed_covariance().unwrap();
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                let want = -sigma[(i, j)].abs().ln();
                assert!((d.at(i, j) - want).abs() < 1e-10);
                let sign = d.sign(obs[i], obs[j]).unwrap();
                assert_eq!(sign as f64, sigma[(i, j)].signum());
            }
        }
    }

    #[test]
    fn mutual_information_decreases_with_distance() {
        // Gaussian MI = -0.5 ln(1 - rho^2) strictly decreasing in d = -ln rho.
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let rho = 1.0 - i as f64 / 100.0; // descending rho = ascending d
            let mi = -0.5 * (1.0 - rho * rho).ln();
            assert!(mi < last);
            last = mi;
        }
    }

    #[test]
    fn root_choice_does_not_change_joint() {
        // Discrete: exact check via enumeration of observed configurations.
        let tree = LatentTree::from_edges(&[
            (H(0), O(0), None),
            (H(0), O(1), None),
            (H(0), O(2), None),
        ])
        .unwrap();
        let mut theta = BTreeMap::new();
        for (i, o) in [O(0), O(1), O(2)].into_iter().enumerate() {
            theta.insert(edge_key(H(0), o), 0.1 + 0.05 * i as f64);
        }
        let m = TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(tree, 2, theta).unwrap());
        // Empirical route: sample rooted at two different nodes and compare
        // pairwise disagreement rates.
        let a = m.sample_from_root(O(0), 60_000, 7, false).unwrap();
        let b = m.sample_from_root(O(2), 60_000, 8, false).unwrap();
        let da = estimate_pair_disagreement(&a);
        let db = estimate_pair_disagreement(&b);
        for (x, y) in da.iter().zip(&db) {
            assert!((x - y).abs() < 0.015, "{da:?} vs {db:?}");
        }
    }

    fn estimate_pair_disagreement(s: &SampleMatrix) -> Vec<f64> {
        let m = s.num_columns();
        let data = s.discrete_data(2).unwrap();
        let mut out = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                let d = (0..s.num_rows())
                    .filter(|&r| data[r * m + i] != data[r * m + j])
                    .count() as f64
                    / s.num_rows() as f64;
                out.push(d);
            }
        }
        out
    }

    #[test]
    fn model_json_round_trip() {
        let m = chain_gaussian(&[0.5, -0.6]);
        let j = m.to_json();
        let s = crate::jsonfmt::to_string(&j).unwrap();
        let back = TreeModel::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        let d0 = m.exact_distance_matrix(&m.tree().observed()).unwrap();
        let d1 = back.exact_distance_matrix(&back.tree().observed()).unwrap();
        for i in 0..d0.len() {
            for j in 0..d0.len() {
                assert_eq!(d0.at(i, j), d1.at(i, j));
            }
        }
    }

    #[test]
    fn sampling_error_decays_like_root_n() {
        // Max-entry distance error vs n on a fixed chain; the log-log slope
        // across three decades should be near -1/2.
        let m = chain_gaussian(&[0.5, 0.6, 0.7]);
        let obs = m.tree().observed();
        let exact = m.exact_distance_matrix(&obs).unwrap();
        let mut errs = Vec::new();
        for (pow, n) in [(3u32, 1000usize), (4, 10_000), (5, 100_000)] {
            let trials = 8;
            let mut total = 0.0;
            for t in 0..trials {
                let s = m.sample(n, 1000 + pow as u64 * 17 + t, false).unwrap();
                let est = crate::distance::estimate_gaussian(&s).unwrap();
                let mut worst: f64 = 0.0;
                for i in 0..obs.len() {
                    for j in i + 1..obs.len() {
                        worst = worst.max((est.at(i, j) - exact.at(i, j)).abs());
                    }
                }
                total += worst;
            }
            errs.push(total / trials as f64);
        }
        let slope = (errs[2].ln() - errs[0].ln()) / ((100_000f64).ln() - (1000f64).ln());
        assert!(
            (slope + 0.5).abs() < 0.1,
            "slope {slope}, errors {errs:?}"
        );
    }
}
