//! EM parameter fitting for discrete latent trees, BIC scoring, and
//! BIC-regularized CLGrouping.

use crate::clgrouping::{mst_observed, Subroutine};
use crate::distance::{estimate_gaussian, estimate_general_discrete, estimate_symmetric, DistanceMatrix};
use crate::error::{Error, Result};
use crate::inference::{loglikelihood, posterior_sample_hidden, TreeInference};
use crate::model::{Family, GeneralDiscreteTreeModel, SampleMatrix, TreeModel};
use crate::neighbor_joining::{contract_short_hidden_edges, nj_run};
use crate::recursive_grouping::{rg_run, Mode, RelaxationConfig};
use crate::tree::{LatentTree, NodeId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Dirichlet-style pseudo-count added in every M-step; keeps zero cells from
/// locking in.
const EM_SMOOTHING: f64 = 1e-3;

/// EM result: the fitted model and the log-likelihood after each iteration.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: GeneralDiscreteTreeModel,
    /// Training log-likelihood trace, one entry per EM iteration.
    pub loglik_trace: Vec<f64>,
}

/// Fits a general discrete model on a fixed structure by EM. Columns of
/// `samples` are clamped as evidence; all other nodes are marginalized in the
/// E-step. Deterministic given the seed.
pub fn em_fit(
    structure: &LatentTree,
    samples: &SampleMatrix,
    k: u32,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<EmFit> {
    structure.validate()?;
    for &c in samples.columns() {
        if !structure.contains(c) {
            return Err(Error::UnknownNode(c));
        }
    }
    let kk = k as usize;
    let n = samples.num_rows();
    let data = samples.discrete_data(k)?;
    let m = samples.num_columns();
    let root = structure.nodes().next().unwrap();

    // Diagonal-heavy initialization with a seeded mixing rate per edge.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conditionals: BTreeMap<(NodeId, NodeId), Vec<f64>> = BTreeMap::new();
    let mut stack = vec![(root, None::<NodeId>)];
    let mut directed: Vec<(NodeId, NodeId)> = Vec::new();
    while let Some((u, parent)) = stack.pop() {
        for v in structure.neighbors(u)? {
            if Some(v) != parent {
                let eps: f64 = rng.random_range(0.1..0.3);
                let mut rows = vec![eps / (kk as f64 - 1.0); kk * kk];
                for a in 0..kk {
                    rows[a * kk + a] = 1.0 - eps;
                }
                conditionals.insert((u, v), rows);
                directed.push((u, v));
                stack.push((v, Some(u)));
            }
        }
    }
    let mut root_marginal: Vec<f64> = (0..kk)
        .map(|_| 1.0 + rng.random_range(-0.05..0.05))
        .collect();
    let s: f64 = root_marginal.iter().sum();
    for v in &mut root_marginal {
        *v /= s;
    }

    let mut model = GeneralDiscreteTreeModel::new(
        structure.clone(),
        k,
        root,
        root_marginal,
        conditionals,
    )?;
    let mut trace: Vec<f64> = Vec::new();

    for _iter in 0..max_iters {
        let engine = TreeInference::new(&model)?;
        let mut ll = 0.0;
        let mut root_counts = vec![0.0f64; kk];
        let mut edge_counts: BTreeMap<(NodeId, NodeId), Vec<f64>> = directed
            .iter()
            .map(|&e| (e, vec![0.0f64; kk * kk]))
            .collect();
        for r in 0..n {
            let evidence: BTreeMap<NodeId, u32> = samples
                .columns()
                .iter()
                .enumerate()
                .map(|(c, &node)| (node, data[r * m + c]))
                .collect();
            let lp = engine.log_evidence(&evidence)?;
            if lp == f64::NEG_INFINITY {
                return Err(Error::ZeroProbability(r));
            }
            ll += lp;
            let post = engine.posteriors(&evidence)?;
            for (x, v) in root_counts.iter_mut().enumerate() {
                *v += post.node[&model.root][x];
            }
            for (&e, counts) in edge_counts.iter_mut() {
                let joint = &post.edge[&e];
                for (x, v) in counts.iter_mut().enumerate() {
                    *v += joint[x];
                }
            }
        }
        let converged = trace.last().is_some_and(|&prev| ll - prev < tol);
        trace.push(ll);
        if converged {
            break;
        }
        // M-step with pseudo-counts.
        let mut new_root: Vec<f64> = root_counts
            .iter()
            .map(|c| c + EM_SMOOTHING)
            .collect();
        let s: f64 = new_root.iter().sum();
        for v in &mut new_root {
            *v /= s;
        }
        let mut new_cond = BTreeMap::new();
        for (&e, counts) in &edge_counts {
            let mut rows = vec![0.0f64; kk * kk];
            for a in 0..kk {
                let total: f64 =
                    counts[a * kk..(a + 1) * kk].iter().sum::<f64>() + kk as f64 * EM_SMOOTHING;
                for b in 0..kk {
                    rows[a * kk + b] = (counts[a * kk + b] + EM_SMOOTHING) / total;
                }
            }
            new_cond.insert(e, rows);
        }
        model = GeneralDiscreteTreeModel::new(
            structure.clone(),
            k,
            model.root,
            new_root,
            new_cond,
        )?;
    }
    Ok(EmFit {
        model,
        loglik_trace: trace,
    })
}

/// BIC report: `bic = loglik - (kappa / 2) log n`.
#[derive(Clone, Debug, Serialize)]
pub struct BicReport {
    pub loglik: f64,
    pub kappa: usize,
    pub n: usize,
    pub bic: f64,
}

/// Number of free parameters: one correlation or crossover probability per
/// edge for the Gaussian and symmetric families; root marginal plus
/// row-stochastic conditionals for general discrete models.
pub fn parameter_count(model: &TreeModel) -> usize {
    let edges = model.tree().edge_count();
    match model {
        TreeModel::Gaussian(_) | TreeModel::Symmetric(_) => edges,
        TreeModel::Discrete(m) => {
            let k = m.k as usize;
            (k - 1) + edges * k * (k - 1)
        }
    }
}

/// Scores a model on samples.
pub fn bic(model: &TreeModel, samples: &SampleMatrix) -> Result<BicReport> {
    let loglik = loglikelihood(model, samples)?;
    let kappa = parameter_count(model);
    let n = samples.num_rows();
    Ok(BicReport {
        loglik,
        kappa,
        n,
        bic: loglik - kappa as f64 / 2.0 * (n as f64).ln(),
    })
}

/// Regularized CLGrouping outcome.
#[derive(Clone, Debug)]
pub struct RegOutcome {
    pub tree: LatentTree,
    pub model: TreeModel,
    /// BIC of the starting spanning tree.
    pub initial_bic: f64,
    /// BIC recorded at each accepted local rebuild.
    pub accepted_bics: Vec<f64>,
}

/// BIC-regularized CLGrouping: starts from the distance MST, repeatedly
/// rebuilds the most BIC-improving unvisited internal neighborhood, and
/// stops when no candidate improves the score (or the hidden budget is
/// reached). General discrete scoring clamps previously accepted hidden
/// nodes to posterior draws so each round stays cheap; parameters are
/// refined at the end on the observed samples only.
pub fn reg_clgrouping(
    samples: &SampleMatrix,
    sub: Subroutine,
    family: Family,
    k: Option<u32>,
    config: &RelaxationConfig,
    max_hidden: Option<usize>,
    seed: u64,
) -> Result<RegOutcome> {
    let _n = samples.num_rows();
    let k_states = match family {
        Family::Gaussian => 0,
        _ => k.ok_or_else(|| Error::InvalidSpec("discrete families need K".into()))?,
    };
    let dist = match family {
        Family::Gaussian => estimate_gaussian(samples)?,
        Family::Symmetric => estimate_symmetric(samples, k_states)?,
        Family::Discrete => estimate_general_discrete(samples, k_states)?,
    };
    let mst = mst_observed(&dist)?;
    let mut tree = mst.clone();
    let mut work = dist.clone();
    let mut next_hidden = 0u32;

    let fit = |t: &LatentTree, scoring: &SampleMatrix, seed: u64| -> Result<(TreeModel, f64)> {
        let model = match family {
            Family::Gaussian => TreeModel::gaussian_from_lengths(t)?,
            Family::Symmetric => TreeModel::symmetric_from_lengths(t, k_states)?,
            Family::Discrete => {
                let em = em_fit(t, scoring, k_states, seed, 40, 1e-4)?;
                TreeModel::Discrete(em.model)
            }
        };
        let score = bic(&model, scoring)?;
        Ok((model, score.bic))
    };

    // Scoring samples: observed columns, augmented with posterior draws of
    // accepted hidden nodes for the general discrete family.
    let mut scoring = samples.clone();
    let (mut current_model, mut current_bic) = fit(&tree, &scoring, seed)?;
    let initial_bic = current_bic;
    let mut accepted_bics = Vec::new();

    let mut unvisited: Vec<NodeId> = mst
        .nodes()
        .filter(|&v| mst.degree(v).unwrap_or(0) >= 2)
        .collect();
    unvisited.sort_by(|&a, &b| {
        mst.degree(b)
            .unwrap()
            .cmp(&mst.degree(a).unwrap())
            .then(b.cmp(&a))
    });

    let budget = max_hidden.unwrap_or(usize::MAX);
    let mut round = 0u64;
    while !unvisited.is_empty() && tree.hidden().len() < budget {
        round += 1;
        let mut best: Option<(usize, LatentTree, DistanceMatrix, Vec<NodeId>, TreeModel, f64)> =
            None;
        for (pos, &center) in unvisited.iter().enumerate() {
            let candidate = rebuild_neighborhood(
                &tree,
                &work,
                center,
                sub,
                config,
                next_hidden,
                seed.wrapping_add(round * 131).wrapping_add(pos as u64),
            );
            let Ok((cand_tree, cand_dists, new_hidden)) = candidate else {
                continue;
            };
            if new_hidden.is_empty() {
                continue;
            }
            let Ok((cand_model, cand_bic)) = fit(
                &cand_tree,
                &scoring,
                seed.wrapping_add(round * 977).wrapping_add(pos as u64),
            ) else {
                continue;
            };
            let better = match &best {
                None => cand_bic > current_bic + 1e-9,
                Some((.., b)) => cand_bic > *b,
            };
            if better {
                best = Some((pos, cand_tree, cand_dists, new_hidden, cand_model, cand_bic));
            }
        }
        match best {
            None => break,
            Some((pos, cand_tree, cand_dists, new_hidden, cand_model, cand_bic)) => {
                let center = unvisited.remove(pos);
                let neighborhood: Vec<NodeId> = {
                    let mut a: Vec<NodeId> = tree.neighbors(center)?.collect();
                    a.push(center);
                    a.sort();
                    a
                };
                tree = cand_tree;
                crate::clgrouping::extend_distance_matrix(
                    &mut work,
                    &tree,
                    &neighborhood,
                    &new_hidden,
                    &cand_dists,
                )?;
                next_hidden = tree
                    .hidden()
                    .iter()
                    .map(|h| match h {
                        NodeId::Hidden(x) => x + 1,
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(next_hidden);
                if family == Family::Discrete {
                    let draws = posterior_sample_hidden(
                        &cand_model,
                        &scoring,
                        seed.wrapping_add(round * 643),
                    )?;
                    let new_cols: Vec<NodeId> = new_hidden.clone();
                    scoring = scoring.concat(&draws.restrict(&new_cols)?)?;
                }
                current_model = cand_model;
                current_bic = cand_bic;
                accepted_bics.push(cand_bic);
            }
        }
    }

    // Final global refinement on the observed samples.
    let final_model = match family {
        Family::Discrete => {
            if tree.hidden().is_empty() {
                current_model
            } else {
                let em = em_fit(&tree, samples, k_states, seed.wrapping_add(17), 200, 1e-6)?;
                TreeModel::Discrete(em.model)
            }
        }
        _ => current_model,
    };
    Ok(RegOutcome {
        tree,
        model: final_model,
        initial_bic,
        accepted_bics,
    })
}

/// Rebuilds one closed neighborhood with the relaxed subroutine and splices
/// it into a copy of the working tree; returns the candidate tree, the local
/// distances, and the surviving new hidden nodes.
fn rebuild_neighborhood(
    tree: &LatentTree,
    work: &DistanceMatrix,
    center: NodeId,
    sub: Subroutine,
    config: &RelaxationConfig,
    next_hidden: u32,
    seed: u64,
) -> Result<(LatentTree, DistanceMatrix, Vec<NodeId>)> {
    let mut neighborhood: Vec<NodeId> = tree.neighbors(center)?.collect();
    neighborhood.push(center);
    neighborhood.sort();
    let local = work.restrict(&neighborhood)?;
    let (mut sub_tree, sub_dists) = match sub {
        Subroutine::RecursiveGrouping => {
            let out = rg_run(
                &local,
                Mode::Relaxed {
                    config: config.clone(),
                    seed,
                },
                next_hidden,
            )?;
            (out.tree, out.distances)
        }
        Subroutine::NeighborJoining => {
            let out = nj_run(&local, next_hidden)?;
            (out.tree, out.distances)
        }
    };
    if sub == Subroutine::NeighborJoining {
        let new_nodes: BTreeSet<NodeId> = sub_tree
            .hidden()
            .into_iter()
            .filter(|h| matches!(h, NodeId::Hidden(x) if *x >= next_hidden))
            .collect();
        sub_tree = contract_short_hidden_edges(&sub_tree, config.epsilon_prime, Some(&new_nodes));
    }
    let new_hidden: Vec<NodeId> = sub_tree
        .hidden()
        .into_iter()
        .filter(|h| matches!(h, NodeId::Hidden(x) if *x >= next_hidden))
        .collect();
    let mut cand = tree.clone();
    let nbrs: Vec<NodeId> = cand.neighbors(center)?.collect();
    for nb in nbrs {
        cand.remove_edge(center, nb)?;
    }
    for n in sub_tree.nodes() {
        cand.add_node(n);
    }
    for (u, v, len) in sub_tree.edges() {
        cand.add_edge(u, v, len)?;
    }
    cand.validate()?;
    Ok((cand, sub_dists, new_hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SymmetricDiscreteTreeModel;
    use crate::tree::edge_key;
    use crate::tree::NodeId::{Hidden as H, Observed as O};

    fn star_model(theta: f64) -> TreeModel {
        let tree = LatentTree::from_edges(&[
            (H(0), O(0), None),
            (H(0), O(1), None),
            (H(0), O(2), None),
        ])
        .unwrap();
        let mut t = BTreeMap::new();
        for o in [O(0), O(1), O(2)] {
            t.insert(edge_key(H(0), o), theta);
        }
        TreeModel::Symmetric(SymmetricDiscreteTreeModel::new(tree, 2, t).unwrap())
    }

    #[test]
    fn fully_observed_em_matches_empirical_frequencies() {
        let tree = LatentTree::from_edges(&[(O(0), O(1), None)]).unwrap();
        let samples = SampleMatrix::new(
            vec![O(0), O(1)],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
            None,
        )
        .unwrap();
        let fit = em_fit(&tree, &samples, 2, 1, 50, 1e-9).unwrap();
        // Root marginal of node 0: p(0) = 3/5 with smoothing.
        let expect0 = (3.0 + EM_SMOOTHING) / (5.0 + 2.0 * EM_SMOOTHING);
        assert!((fit.model.root_marginal[0] - expect0).abs() < 1e-9);
        // Conditional p(x1 = 0 | x0 = 0) = 2/3 smoothed.
        let rows = fit.model.conditional(O(0), O(1));
        let expect = (2.0 + EM_SMOOTHING) / (3.0 + 2.0 * EM_SMOOTHING);
        assert!((rows[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn em_reaches_true_parameter_likelihood() {
        let truth = star_model(0.15);
        let samples = truth.sample(800, 3, false).unwrap();
        let fit = em_fit(truth.tree(), &samples, 2, 5, 200, 1e-8).unwrap();
        let fitted_ll = loglikelihood(&TreeModel::Discrete(fit.model), &samples).unwrap();
        let true_ll = loglikelihood(&truth, &samples).unwrap();
        assert!(
            fitted_ll >= true_ll - 1e-6 * samples.num_rows() as f64,
            "fitted {fitted_ll}, truth {true_ll}"
        );
    }

    #[test]
    fn em_trace_is_monotone() {
        let truth = star_model(0.2);
        let samples = truth.sample(300, 7, false).unwrap();
        for seed in 0..5 {
            let fit = em_fit(truth.tree(), &samples, 2, seed, 100, 1e-9).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "trace decreased: {:?}", fit.loglik_trace);
            }
        }
    }

    #[test]
    fn bic_counts_parameters_per_family() {
        let truth = star_model(0.2);
        let samples = truth.sample(100, 2, false).unwrap();
        // Symmetric: one parameter per edge.
        let report = bic(&truth, &samples).unwrap();
        assert_eq!(report.kappa, 3);
        assert!((report.bic - (report.loglik - 1.5 * (100f64).ln())).abs() < 1e-12);
        // General discrete with K = 2 and three edges: 1 + 3 * 2 = 7.
        let general = TreeModel::Discrete(truth.as_general_discrete());
        assert_eq!(parameter_count(&general), 7);
        // Gaussian chain with 5 edges and n = e^2: bic = loglik - 5.
        let mut edges = Vec::new();
        let mut corr = BTreeMap::new();
        for i in 0..5u32 {
            edges.push((O(i), O(i + 1), None));
            corr.insert(edge_key(O(i), O(i + 1)), 0.5);
        }
        let g = TreeModel::Gaussian(
            crate::model::GaussianTreeModel::new(
                LatentTree::from_edges(&edges).unwrap(),
                corr,
            )
            .unwrap(),
        );
        let n = std::f64::consts::E.powi(2).round() as usize; // not exactly e^2
        let gs = g.sample(n, 1, false).unwrap();
        let rep = bic(&g, &gs).unwrap();
        assert!((rep.bic - (rep.loglik - 2.5 * (n as f64).ln())).abs() < 1e-9);
        // Adding a hidden node strictly increases kappa.
        let bigger = star_model(0.2);
        assert!(parameter_count(&TreeModel::Discrete(bigger.as_general_discrete())) > 1 + 2);
    }

    #[test]
    fn reg_on_observed_chain_adds_nothing() {
        // Data from a fully observed chain: the spanning tree already
        // explains it and every hidden candidate loses on the penalty.
        let mut theta = BTreeMap::new();
        let mut edges = Vec::new();
        for i in 0..4u32 {
            edges.push((O(i), O(i + 1), None));
            theta.insert(edge_key(O(i), O(i + 1)), 0.1);
        }
        let truth = TreeModel::Symmetric(
            SymmetricDiscreteTreeModel::new(LatentTree::from_edges(&edges).unwrap(), 2, theta)
                .unwrap(),
        );
        let samples = truth.sample(1000, 11, false).unwrap();
        let out = reg_clgrouping(
            &samples,
            Subroutine::RecursiveGrouping,
            Family::Symmetric,
            Some(2),
            &RelaxationConfig::for_samples(1000),
            None,
            3,
        )
        .unwrap();
        assert!(out.tree.hidden().is_empty());
        assert!(out.accepted_bics.is_empty());
    }

    #[test]
    fn reg_zero_budget_returns_spanning_tree() {
        let truth = star_model(0.1);
        let samples = truth.sample(500, 13, false).unwrap();
        let out = reg_clgrouping(
            &samples,
            Subroutine::RecursiveGrouping,
            Family::Symmetric,
            Some(2),
            &RelaxationConfig::for_samples(500),
            Some(0),
            5,
        )
        .unwrap();
        assert!(out.tree.hidden().is_empty());
        assert_eq!(out.tree.edge_count(), 2);
    }
}
