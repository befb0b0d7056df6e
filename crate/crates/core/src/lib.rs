//! Learning latent tree graphical models from information distances or samples.
//!
//! The library is organized around a small set of building blocks:
//!
//! - [`tree`]: undirected labeled trees over observed and hidden nodes, with
//!   the usual structural queries (paths, diameter, minimality), edge
//!   contraction, Robinson-Foulds distance, and equality up to hidden
//!   relabeling.
//! - [`model`]: parameterized distributions on a tree (Gaussian, symmetric
//!   discrete, general discrete), exact information distances, ancestral
//!   sampling, and exact observed-marginal quantities for evaluation.
//! - [`distance`]: maximum-likelihood estimation of information distances
//!   from samples, plus CSV I/O for distance matrices.
//! - [`recursive_grouping`]: sibling/parent testing and the recursive
//!   grouping reconstruction algorithm in exact and relaxed (sample) forms.
//! - [`neighbor_joining`]: the classical neighbor-joining baseline and its
//!   relaxed form with short-edge contraction.
//! - [`clgrouping`]: distance-MST construction, surrogate analysis, the
//!   blind MST transformation, and CLGrouping with RG or NJ subroutines.
//! - [`inference`] and [`em`]: exact sum-product on discrete trees,
//!   log-likelihoods, EM parameter fitting, BIC, and BIC-regularized
//!   CLGrouping.
//! - [`generate`] and [`experiment`]: synthetic model generators and the
//!   benchmark grid runner.

pub mod clgrouping;
pub mod distance;
pub mod em;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod inference;
pub mod jsonfmt;
pub mod model;
pub mod neighbor_joining;
pub mod newick;
pub mod recursive_grouping;
pub mod tree;

pub use error::{Error, Result};
pub use tree::{LatentTree, NodeId, SplitSet};
