// scratch: m=80 failure modes
use latentree::distance::estimate_gaussian;
use latentree::generate::{generate, GeneratorSpec, TopologyKind};
use latentree::model::Family;
use latentree::recursive_grouping::{rg_relaxed_with_stats, RelaxationConfig, Epsilon};
use latentree::tree::NodeId;

fn main() {
    for trial in 0..20u64 {
        let spec = GeneratorSpec::new(TopologyKind::DoubleStar, 80, Family::Gaussian, 5000 + trial);
        let model = generate(&spec).unwrap();
        let samples = model.sample(1000, 99 + trial, false).unwrap();
        let d = estimate_gaussian(&samples).unwrap();
        let config = RelaxationConfig {
            tau: RelaxationConfig::default_tau(1000),
            epsilon: Epsilon::Auto { floor: 0.2 },
            epsilon_prime: -(0.9f64.ln()),
            witness_cap: 12,
        };
        let out = rg_relaxed_with_stats(&d, &config, trial).unwrap();
        let t = &out.tree;
        let ok = t.equal_up_to_hidden_relabel(model.tree()).unwrap_or(false);
        if !ok {
            let rf = t.robinson_foulds(model.tree()).unwrap();
            // count misplaced leaves per hidden node
            let mut sizes: Vec<(NodeId, usize)> = t
                .hidden()
                .into_iter()
                .map(|h| (h, t.degree(h).unwrap()))
                .collect();
            sizes.sort();
            println!(
                "trial {trial}: rf={rf} hidden={} iters={} degrees={:?}",
                t.hidden().len(),
                out.iterations,
                sizes.iter().map(|(_, d)| *d).collect::<Vec<_>>()
            );
        }
    }
}
