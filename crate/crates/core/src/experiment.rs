//! Benchmark grid runner: generate, sample, estimate, learn, evaluate.
//!
//! Cells are fully determined by the grid seed, so a rerun of the same grid
//! produces a byte-identical report. Wall-clock timings are kept out of the
//! report rows and written to a separate timing table.

use crate::clgrouping::{cl_blind, clgrouping, mst_observed, LearnMode, Subroutine};
use crate::distance::{
    estimate_gaussian, estimate_general_discrete, estimate_symmetric, DistanceMatrix,
};
use crate::em::reg_clgrouping;
use crate::error::{Error, Result};
use crate::generate::{generate, GeneratorSpec};
use crate::model::{Family, SampleMatrix, TreeModel};
use crate::neighbor_joining::{nj, nj_relaxed};
use crate::recursive_grouping::{rg_exact, rg_relaxed, RelaxationConfig};
use crate::tree::LatentTree;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

/// Learner selection.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rg,
    Nj,
    Clrg,
    Clnj,
    Clblind,
    Cl,
    Regclrg,
    Regclnj,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Rg,
        Method::Nj,
        Method::Clrg,
        Method::Clnj,
        Method::Clblind,
        Method::Cl,
        Method::Regclrg,
        Method::Regclnj,
    ];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Rg => "rg",
            Method::Nj => "nj",
            Method::Clrg => "clrg",
            Method::Clnj => "clnj",
            Method::Clblind => "clblind",
            Method::Cl => "cl",
            Method::Regclrg => "regclrg",
            Method::Regclnj => "regclnj",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Ok(match s {
            "rg" => Method::Rg,
            "nj" => Method::Nj,
            "clrg" => Method::Clrg,
            "clnj" => Method::Clnj,
            "clblind" => Method::Clblind,
            "cl" => Method::Cl,
            "regclrg" => Method::Regclrg,
            "regclnj" => Method::Regclnj,
            other => return Err(Error::InvalidSpec(format!("unknown method {other:?}"))),
        })
    }
}

/// Per-cell sample size; `None` runs on exact distances.
pub type SampleSize = Option<usize>;

/// A benchmark grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub specs: Vec<GeneratorSpec>,
    pub methods: Vec<Method>,
    /// Sample sizes; `null` entries run in exact-distance mode.
    pub sample_sizes: Vec<SampleSize>,
    pub trials: usize,
    pub seed: u64,
}

/// Result of one (spec, method, n, trial) cell.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentRow {
    pub spec_index: usize,
    pub kind: String,
    pub family: Family,
    pub method: Method,
    /// Sample count; absent in exact-distance mode.
    pub n: Option<usize>,
    pub trial: usize,
    pub recovered: bool,
    pub rf: Option<usize>,
    /// Signed difference between learned and true hidden counts.
    pub hidden_count_error: Option<i64>,
    pub kl: Option<f64>,
    /// Wall time of the learning call (excluded from the deterministic
    /// report; see [`write_timing_csv`]).
    pub wall_ms: f64,
    pub error: Option<String>,
}

fn cell_seed(master: u64, spec_index: usize, trial: usize) -> u64 {
    // splitmix-style mixing for stable per-cell streams
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + spec_index as u64))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(1 + trial as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Runs every cell of the grid. Per-cell failures are recorded in the row
/// and never abort the run.
pub fn run_experiment(grid: &GridSpec) -> Vec<ExperimentRow> {
    let mut rows = Vec::new();
    for (spec_index, base_spec) in grid.specs.iter().enumerate() {
        for trial in 0..grid.trials {
            let seed = cell_seed(grid.seed, spec_index, trial);
            let mut spec = base_spec.clone();
            spec.seed = seed;
            let model = match generate(&spec) {
                Ok(m) => m,
                Err(e) => {
                    for &method in &grid.methods {
                        for &n in &grid.sample_sizes {
                            rows.push(error_row(spec_index, &spec, method, n, trial, &e));
                        }
                    }
                    continue;
                }
            };
            for &n in &grid.sample_sizes {
                let dist = match prepare_distances(&model, n, seed) {
                    Ok(d) => d,
                    Err(e) => {
                        for &method in &grid.methods {
                            rows.push(error_row(spec_index, &spec, method, n, trial, &e));
                        }
                        continue;
                    }
                };
                for &method in &grid.methods {
                    rows.push(run_cell(
                        spec_index, &spec, &model, method, n, trial, seed, &dist,
                    ));
                }
            }
        }
    }
    rows
}

struct Prepared {
    dist: DistanceMatrix,
    samples: Option<SampleMatrix>,
}

fn prepare_distances(model: &TreeModel, n: SampleSize, seed: u64) -> Result<Prepared> {
    match n {
        None => Ok(Prepared {
            dist: model.exact_distance_matrix(&model.tree().observed())?,
            samples: None,
        }),
        Some(n) => {
            let samples = model.sample(n, seed ^ 0x5eed, false)?;
            let dist = match model.family() {
                Family::Gaussian => estimate_gaussian(&samples)?,
                Family::Symmetric => estimate_symmetric(&samples, model.alphabet().unwrap())?,
                Family::Discrete => {
                    estimate_general_discrete(&samples, model.alphabet().unwrap())?
                }
            };
            Ok(Prepared {
                dist,
                samples: Some(samples),
            })
        }
    }
}

fn error_row(
    spec_index: usize,
    spec: &GeneratorSpec,
    method: Method,
    n: SampleSize,
    trial: usize,
    e: &Error,
) -> ExperimentRow {
    ExperimentRow {
        spec_index,
        kind: format!("{:?}", spec.kind).to_lowercase(),
        family: spec.family,
        method,
        n,
        trial,
        recovered: false,
        rf: None,
        hidden_count_error: None,
        kl: None,
        wall_ms: 0.0,
        error: Some(e.to_string()),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec_index: usize,
    spec: &GeneratorSpec,
    model: &TreeModel,
    method: Method,
    n: SampleSize,
    trial: usize,
    seed: u64,
    prepared: &Prepared,
) -> ExperimentRow {
    let config = match n {
        None => RelaxationConfig::default(),
        Some(n) => RelaxationConfig::for_samples(n),
    };
    let start = Instant::now();
    let learned: Result<LatentTree> = match (method, n) {
        (Method::Rg, None) => rg_exact(&prepared.dist),
        (Method::Rg, Some(_)) => rg_relaxed(&prepared.dist, &config, seed),
        (Method::Nj, None) => nj(&prepared.dist),
        (Method::Nj, Some(_)) => nj_relaxed(&prepared.dist, config.epsilon_prime),
        (Method::Clrg, mode_n) => clgrouping(
            &prepared.dist,
            Subroutine::RecursiveGrouping,
            &config,
            if mode_n.is_none() {
                LearnMode::Exact
            } else {
                LearnMode::Relaxed
            },
            seed,
        ),
        (Method::Clnj, mode_n) => clgrouping(
            &prepared.dist,
            Subroutine::NeighborJoining,
            &config,
            if mode_n.is_none() {
                LearnMode::Exact
            } else {
                LearnMode::Relaxed
            },
            seed,
        ),
        (Method::Clblind, _) => mst_observed(&prepared.dist).map(|m| cl_blind(&m)),
        (Method::Cl, _) => mst_observed(&prepared.dist),
        (Method::Regclrg | Method::Regclnj, None) => Err(Error::InvalidSpec(
            "regularized methods need samples".into(),
        )),
        (Method::Regclrg | Method::Regclnj, Some(_)) => {
            let sub = if method == Method::Regclrg {
                Subroutine::RecursiveGrouping
            } else {
                Subroutine::NeighborJoining
            };
            reg_clgrouping(
                prepared.samples.as_ref().unwrap(),
                sub,
                spec.family,
                Some(spec.k_states),
                &config,
                None,
                seed,
            )
            .map(|o| o.tree)
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match learned {
        Err(e) => ExperimentRow {
            wall_ms,
            ..error_row(spec_index, spec, method, n, trial, &e)
        },
        Ok(tree) => {
            let (recovered, rf, hidden_count_error, kl) = evaluate(model, &tree);
            ExperimentRow {
                spec_index,
                kind: format!("{:?}", spec.kind).to_lowercase(),
                family: spec.family,
                method,
                n,
                trial,
                recovered,
                rf,
                hidden_count_error,
                kl,
                wall_ms,
                error: None,
            }
        }
    }
}

/// Evaluation of one learned tree against the generating model.
pub fn evaluate(model: &TreeModel, learned: &LatentTree) -> (bool, Option<usize>, Option<i64>, Option<f64>) {
    let truth = model.tree();
    let recovered = learned.equal_up_to_hidden_relabel(truth).unwrap_or(false);
    let rf = learned.robinson_foulds(truth).ok();
    let hidden_err = Some(learned.hidden().len() as i64 - truth.hidden().len() as i64);
    let kl = kl_of_learned(model, learned);
    (recovered, rf, hidden_err, kl)
}

/// Observed-marginal KL of a learned structure with parameters recovered
/// from its edge lengths; `None` when lengths are missing (structure-only
/// learners) or the family does not permit the exact computation.
fn kl_of_learned(model: &TreeModel, learned: &LatentTree) -> Option<f64> {
    if learned.edges().iter().any(|(_, _, d)| d.is_none()) {
        return None;
    }
    let fitted = match model.family() {
        Family::Gaussian => TreeModel::gaussian_from_lengths(learned).ok()?,
        Family::Symmetric => {
            TreeModel::symmetric_from_lengths(learned, model.alphabet()?).ok()?
        }
        Family::Discrete => return None,
    };
    model.kl_observed(&fitted).ok()
}

/// Writes the deterministic report CSV (no timing column).
pub fn write_report_csv<W: Write>(rows: &[ExperimentRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "spec_index,kind,family,method,n,trial,recovered,rf,hidden_count_error,kl,error"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.spec_index,
            r.kind,
            r.family,
            r.method,
            r.n.map_or(String::from("exact"), |n| n.to_string()),
            r.trial,
            r.recovered,
            r.rf.map_or(String::new(), |v| v.to_string()),
            r.hidden_count_error
                .map_or(String::new(), |v| v.to_string()),
            r.kl.map_or(String::new(), |v| format!("{v:.17e}")),
            r.error.as_deref().unwrap_or(""),
        )?;
    }
    Ok(())
}

/// Writes the wall-clock sidecar.
pub fn write_timing_csv<W: Write>(rows: &[ExperimentRow], mut w: W) -> Result<()> {
    writeln!(w, "spec_index,kind,family,method,n,trial,wall_ms")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.spec_index,
            r.kind,
            r.family,
            r.method,
            r.n.map_or(String::from("exact"), |n| n.to_string()),
            r.trial,
            r.wall_ms,
        )?;
    }
    Ok(())
}

/// Aggregate over trials of one (spec, method, n) cell.
#[derive(Clone, Debug, Serialize)]
pub struct AggregateRow {
    pub spec_index: usize,
    pub kind: String,
    pub family: Family,
    pub method: Method,
    pub n: Option<usize>,
    pub trials: usize,
    pub failures: usize,
    pub recovery_rate: f64,
    pub mean_rf: f64,
    /// Absolute difference between the mean learned hidden count and the
    /// true hidden count.
    pub hidden_count_error: f64,
    pub mean_kl: Option<f64>,
    pub mean_wall_ms: f64,
}

/// Averages rows over trials, keyed by (spec, method, n).
pub fn aggregate(rows: &[ExperimentRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, Method, Option<usize>), Vec<&ExperimentRow>> =
        BTreeMap::new();
    for r in rows {
        groups.entry((r.spec_index, r.method, r.n)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((spec_index, method, n), members) in groups {
        let ok: Vec<&&ExperimentRow> = members.iter().filter(|r| r.error.is_none()).collect();
        let trials = members.len();
        let failures = trials - ok.len();
        let recovery_rate =
            ok.iter().filter(|r| r.recovered).count() as f64 / ok.len().max(1) as f64;
        let mean_rf = mean(ok.iter().filter_map(|r| r.rf.map(|v| v as f64)));
        let mean_hidden = mean(
            ok.iter()
                .filter_map(|r| r.hidden_count_error.map(|v| v as f64)),
        );
        let kls: Vec<f64> = ok.iter().filter_map(|r| r.kl).collect();
        let mean_kl = if kls.is_empty() {
            None
        } else {
            Some(kls.iter().sum::<f64>() / kls.len() as f64)
        };
        let mean_wall = mean(ok.iter().map(|r| r.wall_ms));
        out.push(AggregateRow {
            spec_index,
            kind: members[0].kind.clone(),
            family: members[0].family,
            method,
            n,
            trials,
            failures,
            recovery_rate,
            mean_rf,
            hidden_count_error: mean_hidden.abs(),
            mean_kl,
            mean_wall_ms: mean_wall,
        });
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Reads a rectangular CSV with a header row into a sample matrix.
/// Gaussian ingestion optionally centers columns; discrete ingestion
/// validates the alphabet.
pub fn ingest_csv(path: &std::path::Path, family: Family, k: Option<u32>, center: bool) -> Result<SampleMatrix> {
    let file = std::fs::File::open(path)?;
    let mut samples = SampleMatrix::read_csv(std::io::BufReader::new(file))?;
    match family {
        Family::Gaussian => {
            if center {
                samples.center();
            }
        }
        Family::Symmetric | Family::Discrete => {
            let k = k.unwrap_or_else(|| {
                samples
                    .data()
                    .iter()
                    .fold(0.0f64, |acc, &v| acc.max(v))
                    .round() as u32
                    + 1
            });
            samples.discrete_data(k)?;
        }
    }
    Ok(samples)
}

/// Minimal static line charts: one SVG per metric, one polyline per method,
/// sample size on a log axis.
pub fn write_svg_charts(aggregates: &[AggregateRow], dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metrics: [(&str, Box<dyn Fn(&AggregateRow) -> Option<f64>>); 4] = [
        ("recovery_rate", Box::new(|a| Some(a.recovery_rate))),
        ("mean_rf", Box::new(|a| Some(a.mean_rf))),
        (
            "hidden_count_error",
            Box::new(|a| Some(a.hidden_count_error)),
        ),
        ("mean_kl", Box::new(|a| a.mean_kl)),
    ];
    let specs: std::collections::BTreeSet<usize> =
        aggregates.iter().map(|a| a.spec_index).collect();
    for spec_index in specs {
        for (name, extract) in &metrics {
            let rows: Vec<&AggregateRow> = aggregates
                .iter()
                .filter(|a| a.spec_index == spec_index && a.n.is_some())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let svg = render_chart(&rows, extract, name);
            let path = dir.join(format!("spec{spec_index}_{name}.svg"));
            std::fs::write(path, svg)?;
        }
    }
    Ok(())
}

fn render_chart(
    rows: &[&AggregateRow],
    extract: &dyn Fn(&AggregateRow) -> Option<f64>,
    title: &str,
) -> String {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let points: Vec<(Method, f64, f64)> = rows
        .iter()
        .filter_map(|a| extract(a).map(|y| (a.method, (a.n.unwrap() as f64).log10(), y)))
        .collect();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (0.0f64, f64::NEG_INFINITY);
    for &(_, x, y) in &points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !xmin.is_finite() || (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| margin + (x - xmin) / (xmax - xmin) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - ymin) / (ymax - ymin) * (h - 2.0 * margin);
    let colors = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let mut body = String::new();
    body.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>",
        w / 2.0
    ));
    body.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin
    ));
    let methods: std::collections::BTreeSet<Method> =
        points.iter().map(|&(m, _, _)| m).collect();
    for (mi, method) in methods.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|&&(m, _, _)| m == *method)
            .map(|&(_, x, y)| (x, y))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let color = colors[mi % colors.len()];
        body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{method}</text>",
            w - margin + 4.0,
            margin + 16.0 * mi as f64
        ));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">{body}</svg>"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::TopologyKind;

    fn tiny_grid() -> GridSpec {
        GridSpec {
            specs: vec![GeneratorSpec::new(
                TopologyKind::DoubleStar,
                8,
                Family::Gaussian,
                0,
            )],
            methods: vec![Method::Rg, Method::Nj, Method::Clrg, Method::Clnj],
            sample_sizes: vec![None, Some(200), Some(2000)],
            trials: 3,
            seed: 42,
        }
    }

    #[test]
    fn grid_runs_and_is_deterministic() {
        let grid = tiny_grid();
        let rows1 = run_experiment(&grid);
        let rows2 = run_experiment(&grid);
        let mut csv1 = Vec::new();
        let mut csv2 = Vec::new();
        write_report_csv(&rows1, &mut csv1).unwrap();
        write_report_csv(&rows2, &mut csv2).unwrap();
        assert_eq!(csv1, csv2);
        assert_eq!(rows1.len(), 4 * 3 * 3);
    }

    #[test]
    fn recovered_implies_zero_rf() {
        let rows = run_experiment(&tiny_grid());
        for r in &rows {
            if r.recovered {
                assert_eq!(r.rf, Some(0), "row {r:?}");
            }
        }
    }

    #[test]
    fn exact_mode_recovers_for_consistent_methods() {
        let rows = run_experiment(&tiny_grid());
        for r in rows
            .iter()
            .filter(|r| r.n.is_none() && matches!(r.method, Method::Rg | Method::Clrg | Method::Clnj))
        {
            assert!(r.recovered, "row {r:?}");
            assert_eq!(r.rf, Some(0));
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = run_experiment(&tiny_grid());
        let aggs = aggregate(&rows);
        for a in &aggs {
            let members: Vec<&ExperimentRow> = rows
                .iter()
                .filter(|r| {
                    r.spec_index == a.spec_index && r.method == a.method && r.n == a.n
                })
                .collect();
            assert_eq!(members.len(), a.trials);
            let rate = members.iter().filter(|r| r.recovered).count() as f64
                / members.len() as f64;
            assert!((rate - a.recovery_rate).abs() < 1e-12);
        }
    }

    #[test]
    fn ingest_round_trip() {
        let dir = std::env::temp_dir().join(format!("latentree-ingest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("samples.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n3.0,4.0\n").unwrap();
        let s = ingest_csv(&path, Family::Gaussian, None, false).unwrap();
        assert_eq!(s.num_rows(), 2);
        assert_eq!(s.num_columns(), 2);
        let mut centered = ingest_csv(&path, Family::Gaussian, None, true).unwrap();
        let _ = &mut centered;
        assert!((centered.row(0)[0] + 1.0).abs() < 1e-12);

        std::fs::write(&path, "a,b\n0,1\n1,3\n").unwrap();
        assert!(matches!(
            ingest_csv(&path, Family::Symmetric, Some(2), false),
            Err(Error::AlphabetViolation { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
