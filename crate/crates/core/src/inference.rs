//! Exact inference on discrete tree models: evidence likelihoods, node and
//! edge posteriors, and posterior sampling of hidden nodes.
//!
//! Messages are normalized per node with the log-normalizers accumulated
//! separately, which keeps long chains stable without working in log space
//! throughout.

use crate::error::{Error, Result};
use crate::model::{GeneralDiscreteTreeModel, SampleMatrix, TreeModel};
use crate::tree::NodeId;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Per-sample posteriors from an upward-downward pass.
pub struct Posteriors {
    /// `p(x_u | evidence)` per node.
    pub node: BTreeMap<NodeId, Vec<f64>>,
    /// `p(x_parent, x_child | evidence)` per directed edge, row-major with
    /// the parent state as the row.
    pub edge: BTreeMap<(NodeId, NodeId), Vec<f64>>,
}

/// Reusable message-passing engine over one model.
pub struct TreeInference<'a> {
    model: &'a GeneralDiscreteTreeModel,
    /// Root-first order with parents.
    order: Vec<(NodeId, Option<NodeId>)>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
}

impl<'a> TreeInference<'a> {
    pub fn new(model: &'a GeneralDiscreteTreeModel) -> Result<Self> {
        let order = model.topo_order()?;
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(u, parent) in &order {
            children.entry(u).or_default();
            if let Some(p) = parent {
                children.entry(p).or_default().push(u);
            }
        }
        Ok(TreeInference {
            model,
            order,
            children,
        })
    }

    fn k(&self) -> usize {
        self.model.k as usize
    }

    /// Subtree beliefs (`evidence * product of child messages`, normalized)
    /// for every node, plus the accumulated log-normalizer.
    fn upward(
        &self,
        evidence: &BTreeMap<NodeId, u32>,
    ) -> Result<(BTreeMap<NodeId, Vec<f64>>, f64)> {
        let k = self.k();
        let mut beliefs: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        let mut log_norm = 0.0;
        for &(u, _) in self.order.iter().rev() {
            let mut b = match evidence.get(&u) {
                Some(&v) => {
                    let mut e = vec![0.0; k];
                    e[v as usize] = 1.0;
                    e
                }
                None => vec![1.0; k],
            };
            for &c in &self.children[&u] {
                let rows = self.model.conditional(u, c);
                let bc = &beliefs[&c];
                for (a, bv) in b.iter_mut().enumerate() {
                    let mut msg = 0.0;
                    for x in 0..k {
                        msg += rows[a * k + x] * bc[x];
                    }
                    *bv *= msg;
                }
            }
            let s: f64 = b.iter().sum();
            if s <= 0.0 {
                // Impossible evidence.
                return Ok((BTreeMap::new(), f64::NEG_INFINITY));
            }
            for v in &mut b {
                *v /= s;
            }
            log_norm += s.ln();
            beliefs.insert(u, b);
        }
        Ok((beliefs, log_norm))
    }

    /// `log p(evidence)`; `-inf` for impossible evidence.
    pub fn log_evidence(&self, evidence: &BTreeMap<NodeId, u32>) -> Result<f64> {
        let (beliefs, log_norm) = self.upward(evidence)?;
        if log_norm == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let root = self.model.root;
        let z: f64 = beliefs[&root]
            .iter()
            .zip(&self.model.root_marginal)
            .map(|(b, p)| b * p)
            .sum();
        if z <= 0.0 {
            Ok(f64::NEG_INFINITY)
        } else {
            Ok(z.ln() + log_norm)
        }
    }

    /// Node and directed-edge posteriors given evidence.
    pub fn posteriors(&self, evidence: &BTreeMap<NodeId, u32>) -> Result<Posteriors> {
        let k = self.k();
        let (beliefs, log_norm) = self.upward(evidence)?;
        if log_norm == f64::NEG_INFINITY {
            return Err(Error::ZeroProbability(0));
        }
        // Outside messages, root-first.
        let mut outside: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        outside.insert(self.model.root, self.model.root_marginal.clone());
        let mut node = BTreeMap::new();
        let mut edge = BTreeMap::new();
        for &(u, _) in &self.order {
            let down = outside[&u].clone();
            // Node posterior.
            let mut post: Vec<f64> = down
                .iter()
                .zip(&beliefs[&u])
                .map(|(d, b)| d * b)
                .collect();
            let s: f64 = post.iter().sum();
            for v in &mut post {
                *v /= s;
            }
            node.insert(u, post);
            // Evidence-and-sibling-weighted base at u, reused per child.
            let evid_u: Vec<f64> = match evidence.get(&u) {
                Some(&v) => {
                    let mut e = vec![0.0; k];
                    e[v as usize] = 1.0;
                    e
                }
                None => vec![1.0; k],
            };
            for &c in &self.children[&u] {
                // base(x_u) = down_u * evid_u * prod_{siblings g != c} msg_g.
                let mut base: Vec<f64> = down
                    .iter()
                    .zip(&evid_u)
                    .map(|(d, e)| d * e)
                    .collect();
                for &g in &self.children[&u] {
                    if g == c {
                        continue;
                    }
                    let rows = self.model.conditional(u, g);
                    let bg = &beliefs[&g];
                    for (a, bv) in base.iter_mut().enumerate() {
                        let mut msg = 0.0;
                        for x in 0..k {
                            msg += rows[a * k + x] * bg[x];
                        }
                        *bv *= msg;
                    }
                }
                let rows = self.model.conditional(u, c);
                let bc = &beliefs[&c];
                let mut joint = vec![0.0; k * k];
                let mut total = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let v = base[a] * rows[a * k + b] * bc[b];
                        joint[a * k + b] = v;
                        total += v;
                    }
                }
                for v in &mut joint {
                    *v /= total;
                }
                edge.insert((u, c), joint);
                // Child outside message.
                let mut down_c = vec![0.0; k];
                for b in 0..k {
                    let mut acc = 0.0;
                    for a in 0..k {
                        acc += base[a] * rows[a * k + b];
                    }
                    down_c[b] = acc;
                }
                let s: f64 = down_c.iter().sum();
                for v in &mut down_c {
                    *v /= s;
                }
                outside.insert(c, down_c);
            }
        }
        Ok(Posteriors { node, edge })
    }

    /// Draws the hidden nodes from `p(x_H | evidence)` by a root-to-leaf
    /// pass over the conditioned model.
    pub fn sample_hidden(
        &self,
        evidence: &BTreeMap<NodeId, u32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<BTreeMap<NodeId, u32>> {
        let k = self.k();
        let (beliefs, log_norm) = self.upward(evidence)?;
        if log_norm == f64::NEG_INFINITY {
            return Err(Error::ZeroProbability(0));
        }
        let mut values: BTreeMap<NodeId, u32> = BTreeMap::new();
        for &(u, parent) in &self.order {
            let mut dist: Vec<f64> = match parent {
                None => self
                    .model
                    .root_marginal
                    .iter()
                    .zip(&beliefs[&u])
                    .map(|(p, b)| p * b)
                    .collect(),
                Some(p) => {
                    let a = values[&p] as usize;
                    let rows = self.model.conditional(p, u);
                    (0..k).map(|b| rows[a * k + b] * beliefs[&u][b]).collect()
                }
            };
            let s: f64 = dist.iter().sum();
            for v in &mut dist {
                *v /= s;
            }
            let roll: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = k - 1;
            for (x, &p) in dist.iter().enumerate() {
                acc += p;
                if roll < acc {
                    chosen = x;
                    break;
                }
            }
            values.insert(u, chosen as u32);
        }
        Ok(values
            .into_iter()
            .filter(|(n, _)| n.is_hidden())
            .collect())
    }
}

/// `log p(evidence)` for a general discrete model.
pub fn observed_logprob(
    model: &GeneralDiscreteTreeModel,
    evidence: &BTreeMap<NodeId, u32>,
) -> Result<f64> {
    TreeInference::new(model)?.log_evidence(evidence)
}

/// Total log-likelihood of observed samples under a model, with hidden nodes
/// marginalized out. Gaussian models use the closed form through the
/// observed covariance.
pub fn loglikelihood(model: &TreeModel, samples: &SampleMatrix) -> Result<f64> {
    match model {
        TreeModel::Gaussian(_) => {
            let obs = model.tree().observed();
            let sigma = model.observed_covariance()?;
            // Restrict to the sampled columns.
            let cols: Vec<usize> = samples
                .columns()
                .iter()
                .map(|&c| obs.iter().position(|&o| o == c).ok_or(Error::UnknownNode(c)))
                .collect::<Result<_>>()?;
            let m = cols.len();
            let mut sub = DMatrix::zeros(m, m);
            for (a, &i) in cols.iter().enumerate() {
                for (b, &j) in cols.iter().enumerate() {
                    sub[(a, b)] = sigma[(i, j)];
                }
            }
            let chol = sub.cholesky().ok_or(Error::SingularCovariance)?;
            let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
            let base = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            let mut total = 0.0;
            for r in 0..samples.num_rows() {
                let x = nalgebra::DVector::from_column_slice(samples.row(r));
                let solved = chol.solve(&x);
                total += base - 0.5 * x.dot(&solved);
            }
            Ok(total)
        }
        TreeModel::Symmetric(_) | TreeModel::Discrete(_) => {
            let general = model.as_general_discrete();
            let engine = TreeInference::new(&general)?;
            let k = general.k;
            let data = samples.discrete_data(k)?;
            let m = samples.num_columns();
            let mut total = 0.0;
            for r in 0..samples.num_rows() {
                let evidence: BTreeMap<NodeId, u32> = samples
                    .columns()
                    .iter()
                    .enumerate()
                    .map(|(c, &n)| (n, data[r * m + c]))
                    .collect();
                let lp = engine.log_evidence(&evidence)?;
                if lp == f64::NEG_INFINITY {
                    return Err(Error::ZeroProbability(r));
                }
                total += lp;
            }
            Ok(total)
        }
    }
}

/// Posterior draws of every hidden node conditioned on each observed sample.
/// Deterministic given the seed; columns are the hidden nodes in sorted
/// order.
pub fn posterior_sample_hidden(
    model: &TreeModel,
    samples: &SampleMatrix,
    seed: u64,
) -> Result<SampleMatrix> {
    let general = match model {
        TreeModel::Gaussian(_) => {
            return Err(Error::UnsupportedFamily("gaussian".into()));
        }
        _ => model.as_general_discrete(),
    };
    let engine = TreeInference::new(&general)?;
    let hidden = general.tree.hidden();
    let k = general.k;
    let data = samples.discrete_data(k)?;
    let m = samples.num_columns();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.num_rows() * hidden.len());
    for r in 0..samples.num_rows() {
        let evidence: BTreeMap<NodeId, u32> = samples
            .columns()
            .iter()
            .enumerate()
            .map(|(c, &n)| (n, data[r * m + c]))
            .collect();
        let draw = engine.sample_hidden(&evidence, &mut rng)?;
        for &h in &hidden {
            out.push(draw[&h] as f64);
        }
    }
    SampleMatrix::new(hidden, out, None)
}
