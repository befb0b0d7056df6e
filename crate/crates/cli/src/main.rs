//! Command line interface: learn latent trees from distances or samples,
//! simulate synthetic models, run benchmark grids, evaluate learned trees,
//! and score models.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use latentree::clgrouping::{cl_blind, clgrouping, mst_observed, LearnMode, Subroutine};
use latentree::distance::{
    estimate_gaussian, estimate_general_discrete, estimate_symmetric, DistanceMatrix,
};
use latentree::em::{bic, reg_clgrouping};
use latentree::experiment::{
    aggregate, ingest_csv, run_experiment, write_report_csv, write_svg_charts, write_timing_csv,
    GridSpec,
};
use latentree::generate::{generate, GeneratorSpec};
use latentree::model::{Family, SampleMatrix, TreeModel};
use latentree::neighbor_joining::{nj, nj_relaxed};
use latentree::newick::to_newick;
use latentree::recursive_grouping::{rg_exact, rg_relaxed, Epsilon, RelaxationConfig};
use latentree::tree::{LatentTree, TreeJson};
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "latentree", version, about = "Latent tree structure learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a latent tree from a distance matrix or sample CSV.
    Learn(LearnArgs),
    /// Sample a synthetic model and write the observed samples as CSV.
    Simulate(SimulateArgs),
    /// Run a benchmark grid and write per-cell and aggregate reports.
    Bench(BenchArgs),
    /// Compare a learned tree against a reference tree or model.
    Eval(EvalArgs),
    /// Score a model on samples (log-likelihood and BIC).
    Score(ScoreArgs),
}

#[derive(Args)]
struct LearnArgs {
    /// Learning method.
    #[arg(long)]
    method: String,
    /// Input CSV: square distance matrix (with --distances) or samples.
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as a distance matrix rather than samples.
    #[arg(long)]
    distances: bool,
    /// Model family of the samples.
    #[arg(long, default_value = "gaussian")]
    family: String,
    /// Alphabet size for discrete families.
    #[arg(long, default_value_t = 2)]
    k: u32,
    /// Distance gate; defaults to a sample-size-dependent schedule.
    #[arg(long)]
    tau: Option<f64>,
    /// Sibling threshold: a number or "auto" for k-means selection.
    #[arg(long, default_value = "auto")]
    epsilon: String,
    /// Edge-contraction threshold.
    #[arg(long, default_value_t = -(0.9f64.ln()))]
    epsilon_prime: f64,
    /// Subtract empirical column means before estimation.
    #[arg(long)]
    center: bool,
    /// Random seed (k-means restarts, EM initialization).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// EM iteration cap for regularized methods on general discrete data.
    #[arg(long, default_value_t = 200)]
    em_iters: usize,
    /// EM convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    /// Hidden-node budget for regularized methods.
    #[arg(long)]
    max_hidden: Option<usize>,
    /// Output tree JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Also write a Newick rendering next to the JSON output.
    #[arg(long)]
    newick: bool,
    /// Write the intermediate spanning tree to this path.
    #[arg(long)]
    emit_mst: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output samples CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating model JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Include hidden columns in the CSV.
    #[arg(long)]
    include_hidden: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid spec JSON.
    #[arg(long)]
    grid: PathBuf,
    /// Output report CSV; aggregates and timings are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Directory for SVG charts.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference: tree JSON or model JSON.
    #[arg(long)]
    truth: PathBuf,
    /// Learned tree JSON.
    #[arg(long)]
    learned: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Samples CSV.
    #[arg(long)]
    samples: PathBuf,
    /// Model family of the samples (for alphabet validation).
    #[arg(long)]
    k: Option<u32>,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Learn(args) => run(learn(args)),
        Command::Simulate(args) => run(simulate(args)),
        Command::Bench(args) => match bench(args) {
            Ok(partial_failures) => {
                if partial_failures {
                    2
                } else {
                    0
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                1
            }
        },
        Command::Eval(args) => run(eval(args)),
        Command::Score(args) => run(score(args)),
    };
    std::process::exit(code);
}

fn run(result: anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn parse_family(s: &str) -> anyhow::Result<Family> {
    Ok(match s {
        "gaussian" => Family::Gaussian,
        "symmetric" => Family::Symmetric,
        "discrete" => Family::Discrete,
        other => bail!("unknown family {other:?}"),
    })
}

fn read_tree(path: &Path) -> anyhow::Result<LatentTree> {
    let file = std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let json: TreeJson = serde_json::from_reader(BufReader::new(file))?;
    Ok(LatentTree::from_json(&json)?)
}

fn write_tree(tree: &LatentTree, path: &Path, newick: bool) -> anyhow::Result<()> {
    let json = latentree::jsonfmt::to_string_pretty(&tree.to_json())?;
    std::fs::write(path, json).with_context(|| format!("write {}", path.display()))?;
    if newick {
        let mut p = path.to_path_buf();
        p.set_extension("nwk");
        std::fs::write(&p, to_newick(tree) + "\n")?;
    }
    Ok(())
}

fn learn(args: LearnArgs) -> anyhow::Result<()> {
    let family = parse_family(&args.family)?;
    let (dist, samples, n): (DistanceMatrix, Option<SampleMatrix>, Option<usize>) =
        if args.distances {
            let file = std::fs::File::open(&args.input)?;
            (
                DistanceMatrix::read_csv(BufReader::new(file))?,
                None,
                None,
            )
        } else {
            let samples = ingest_csv(&args.input, family, Some(args.k), args.center)?;
            let n = samples.num_rows();
            let dist = match family {
                Family::Gaussian => estimate_gaussian(&samples)?,
                Family::Symmetric => estimate_symmetric(&samples, args.k)?,
                Family::Discrete => estimate_general_discrete(&samples, args.k)?,
            };
            (dist, Some(samples), Some(n))
        };

    let epsilon = match args.epsilon.as_str() {
        "auto" => Epsilon::Auto { floor: 0.2 },
        v => Epsilon::Fixed(v.parse().context("--epsilon expects a number or 'auto'")?),
    };
    let config = RelaxationConfig {
        tau: args
            .tau
            .unwrap_or_else(|| match n {
                Some(n) => RelaxationConfig::default_tau(n),
                None => f64::INFINITY,
            }),
        epsilon,
        epsilon_prime: args.epsilon_prime,
        ..RelaxationConfig::default()
    };
    let exact = n.is_none();
    let mode = if exact {
        LearnMode::Exact
    } else {
        LearnMode::Relaxed
    };

    if let Some(p) = &args.emit_mst {
        let mst = mst_observed(&dist)?;
        write_tree(&mst, p, false)?;
    }

    let tree = match args.method.as_str() {
        "rg" => {
            if exact {
                rg_exact(&dist)?
            } else {
                rg_relaxed(&dist, &config, args.seed)?
            }
        }
        "nj" => {
            if exact {
                nj(&dist)?
            } else {
                nj_relaxed(&dist, config.epsilon_prime)?
            }
        }
        "clrg" => clgrouping(&dist, Subroutine::RecursiveGrouping, &config, mode, args.seed)?,
        "clnj" => clgrouping(&dist, Subroutine::NeighborJoining, &config, mode, args.seed)?,
        "clblind" => cl_blind(&mst_observed(&dist)?),
        "cl" => mst_observed(&dist)?,
        "regclrg" | "regclnj" => {
            let samples = samples
                .as_ref()
                .context("regularized methods need sample input")?;
            let sub = if args.method == "regclrg" {
                Subroutine::RecursiveGrouping
            } else {
                Subroutine::NeighborJoining
            };
            let out = reg_clgrouping(
                samples,
                sub,
                family,
                Some(args.k),
                &config,
                args.max_hidden,
                args.seed,
            )?;
            let model_json = latentree::jsonfmt::to_string_pretty(&out.model.to_json())?;
            let mut model_path = args.out.clone();
            model_path.set_extension("model.json");
            std::fs::write(model_path, model_json)?;
            out.tree
        }
        other => bail!("unknown method {other:?}"),
    };
    write_tree(&tree, &args.out, args.newick)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec)?;
    let spec: GeneratorSpec = serde_json::from_str(&text)?;
    let model = generate(&spec)?;
    let samples = model.sample(args.n, args.seed, args.include_hidden)?;
    let mut out = Vec::new();
    samples.write_csv(&mut out)?;
    std::fs::write(&args.out, out)?;
    if let Some(p) = &args.model_out {
        std::fs::write(p, latentree::jsonfmt::to_string_pretty(&model.to_json())?)?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(&args.grid)?;
    let grid: GridSpec = serde_json::from_str(&text)?;
    let rows = run_experiment(&grid);
    let mut report = Vec::new();
    write_report_csv(&rows, &mut report)?;
    std::fs::write(&args.out, report)?;

    let mut timing_path = args.out.clone();
    timing_path.set_extension("timings.csv");
    let mut timings = Vec::new();
    write_timing_csv(&rows, &mut timings)?;
    std::fs::write(timing_path, timings)?;

    let aggs = aggregate(&rows);
    let mut agg_path = args.out.clone();
    agg_path.set_extension("agg.json");
    std::fs::write(agg_path, latentree::jsonfmt::to_string_pretty(&aggs)?)?;

    if let Some(dir) = &args.svg {
        write_svg_charts(&aggs, dir)?;
    }
    Ok(rows.iter().any(|r| r.error.is_some()))
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let learned = read_tree(&args.learned)?;
    // The reference may be a bare tree or a full model.
    let text = std::fs::read_to_string(&args.truth)?;
    let (truth_tree, truth_model): (LatentTree, Option<TreeModel>) =
        match serde_json::from_str::<latentree::model::ModelJson>(&text) {
            Ok(mj) => {
                let model = TreeModel::from_json(&mj)?;
                (model.tree().clone(), Some(model))
            }
            Err(_) => {
                let tj: TreeJson = serde_json::from_str(&text)?;
                (LatentTree::from_json(&tj)?, None)
            }
        };
    let recovered = learned.equal_up_to_hidden_relabel(&truth_tree)?;
    let rf = learned.robinson_foulds(&truth_tree)?;
    let hidden_err = learned.hidden().len() as i64 - truth_tree.hidden().len() as i64;
    let kl = truth_model.as_ref().and_then(|m| {
        let fitted = match m.family() {
            Family::Gaussian => TreeModel::gaussian_from_lengths(&learned).ok()?,
            Family::Symmetric => {
                TreeModel::symmetric_from_lengths(&learned, m.alphabet()?).ok()?
            }
            Family::Discrete => return None,
        };
        m.kl_observed(&fitted).ok()
    });
    let out = serde_json::json!({
        "recovered": recovered,
        "rf": rf,
        "hidden_count_error": hidden_err,
        "kl": kl,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.model)?;
    let mj: latentree::model::ModelJson = serde_json::from_str(&text)?;
    let model = TreeModel::from_json(&mj)?;
    let family = model.family();
    let samples = ingest_csv(&args.samples, family, args.k.or(model.alphabet()), false)?;
    let report = bic(&model, &samples)?;
    println!("{}", latentree::jsonfmt::to_string_pretty(&report)?);
    Ok(())
}
