//! Scratch probe for the two-client sine benchmark; prints per-phase test
//! MSE so aggregation settings can be compared quickly.

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
    let warmup: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(200);
    let refine: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
    let rank: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let beta: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-8);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(5);

    let problem = sine_target(2).unwrap();
    let model = MlpSpec::new(vec![1, 32, 32, 1], Activation::Tanh).unwrap();
    let clients = partition_interval(&problem, 2, None, 1000, 2, seed).unwrap();
    let theta0 = init_params(&model, seed);

    let local = LocalConfig {
        epochs,
        optimizer: OptimizerKind::Adam,
        lr,
        batch_size: std::env::var("BATCH").ok().map(|s| s.parse().unwrap()).unwrap_or(64),
        prox_mu: 0.0,
    };

    let t0 = std::time::Instant::now();
    let fipa_exp = Experiment {
        problem: &problem,
        model: &model,
        clients: &clients,
        theta0: theta0.clone(),
        round: RoundConfig {
            local,
            participation: 1.0,
            sketch: Some(SketchSpec::Subspace {
                rank,
                oversample: 5,
                power_iters: 4,
                adaptive_energy: std::env::var("ADAPT").ok().map(|s| s.parse().unwrap()),
            }),
            server: ServerConfig {
                rule: AggregationRule::FipaQr,
                beta_reg: beta,
                gamma: std::env::var("GAMMA").ok().map(|s| s.parse().unwrap()).unwrap_or(1.0),
            },
        },
        schedule: Schedule {
            warmup_rounds: warmup,
            total_rounds: warmup + refine,
        },
        seed,
        workers: 2,
        gn_reference: None,
    };
    let fipa_run = run_experiment(&fipa_exp).unwrap();
    let fipa_time = t0.elapsed().as_secs_f64();

    let t1 = std::time::Instant::now();
    let fedavg_exp = Experiment {
        round: RoundConfig {
            local,
            participation: 1.0,
            sketch: None,
            server: ServerConfig::fedavg(),
        },
        theta0: theta0.clone(),
        problem: &problem,
        model: &model,
        clients: &clients,
        schedule: Schedule {
            warmup_rounds: warmup,
            total_rounds: warmup + refine,
        },
        seed,
        workers: 2,
        gn_reference: None,
    };
    let fedavg_run = run_experiment(&fedavg_exp).unwrap();
    let fedavg_time = t1.elapsed().as_secs_f64();

    let warm_mse = fipa_run.records[warmup.saturating_sub(1)].test_metric;
    let fipa_final = fipa_run.records.last().unwrap().test_metric;
    let fedavg_final = fedavg_run.records.last().unwrap().test_metric;
    let fipa_best = fipa_run.records[warmup..]
        .iter()
        .map(|r| r.test_metric)
        .fold(f64::INFINITY, f64::min);

    println!(
        "seed {seed} warmup {warmup}+{refine} rank {rank} beta {beta:.0e} lr {lr} tau {epochs}"
    );
    println!("  mse at switch      : {warm_mse:.3e}");
    println!("  fipa final / best  : {fipa_final:.3e} / {fipa_best:.3e}  ({fipa_time:.1}s)");
    println!("  fedavg final       : {fedavg_final:.3e}  ({fedavg_time:.1}s)");
    println!("  ratio fipa/fedavg  : {:.3e}", fipa_final / fedavg_final);
    for k in [warmup, warmup + 1, warmup + 2, warmup + 5, warmup + 10, warmup + 25, warmup + 50]
    {
        if k < fipa_run.records.len() {
            let r = &fipa_run.records[k];
            println!(
            "  round {:>4}: fipa {:.3e} (r_tot {:>3}, off {:.1e})   fedavg {:.3e}",
            k,
            r.test_metric,
            r.r_tot,
            r.solve.as_ref().map(|s| s.off_subspace_fraction).unwrap_or(0.0),
            fedavg_run.records[k].test_metric
        );
        }
    }
}
