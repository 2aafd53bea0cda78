//! Scratch probe for the low-rank sufficiency comparison: rank-16 sketch
//! aggregation vs full-spectrum dense aggregation on a small net.

use fipa::aggregate::{AggregationRule, ServerConfig};
use fipa::federation::{
    partition_interval, run_experiment, Experiment, LocalConfig, OptimizerKind, RoundConfig,
    Schedule, SketchSpec,
};
use fipa::model::{init_params, Activation, MlpSpec};
use fipa::problems::sine_target;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let warmup: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(150);
    let refine: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);
    let beta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let problem = sine_target(2).unwrap();
    let model = MlpSpec::new(vec![1, 16, 1], Activation::Tanh).unwrap();
    let clients = partition_interval(&problem, 2, None, 1000, 2, seed).unwrap();
    let theta0 = init_params(&model, seed);
    let local = LocalConfig {
        epochs: 5,
        optimizer: OptimizerKind::Adam,
        lr: 3e-3,
        batch_size: 64,
        prox_mu: 0.0,
    };
    let schedule = Schedule {
        warmup_rounds: warmup,
        total_rounds: warmup + refine,
    };

    let run = |sketch: SketchSpec| {
        let exp = Experiment {
            problem: &problem,
            model: &model,
            clients: &clients,
            theta0: theta0.clone(),
            round: RoundConfig {
                local,
                participation: 1.0,
                sketch: Some(sketch),
                server: ServerConfig {
                    rule: AggregationRule::FipaDense,
                    beta_reg: beta,
                    gamma: 1.0,
                },
            },
            schedule,
            seed,
            workers: 2,
            gn_reference: None,
        };
        run_experiment(&exp).unwrap()
    };

    let t = std::time::Instant::now();
    let low = run(SketchSpec::Subspace {
        rank: 16,
        oversample: 5,
        power_iters: 4,
        adaptive_energy: None,
    });
    let full = run(SketchSpec::DenseExact {
        adaptive_energy: None,
    });
    let low_final = low.records.last().unwrap().test_metric;
    let full_final = full.records.last().unwrap().test_metric;
    println!(
        "seed {seed} p {} beta {beta:.1e}: rank16 {low_final:.4e}  full {full_final:.4e}  ratio {:.3}  ranks r16 {:?} full {:?}  ({:.1}s)",
        model.param_count(),
        low_final / full_final,
        low.records.last().unwrap().sketch_ranks,
        full.records.last().unwrap().sketch_ranks,
        t.elapsed().as_secs_f64()
    );
}
