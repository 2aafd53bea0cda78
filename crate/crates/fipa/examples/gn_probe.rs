//! Scratch probe comparing the refinement-phase loss slope against the
//! centralized damped Gauss-Newton reference, plus the gap recursion.

use fipa::aggregate::{AggregationRule, ServerConfig};
use fipa::federation::{
    partition_interval, run_experiment, Experiment, GnReferenceConfig, LocalConfig,
    OptimizerKind, RoundConfig, Schedule, SketchSpec,
};
use fipa::gn::contraction_estimate;
use fipa::model::{init_params, Activation, MlpSpec};
use fipa::problems::sine_target;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let warmup: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
    let refine: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(14);
    let tau: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(50);
    let gamma: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let hidden: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(32);

    let problem = sine_target(2).unwrap();
    let model = MlpSpec::new(vec![1, hidden, hidden, 1], Activation::Tanh).unwrap();
    let clients = partition_interval(&problem, 2, None, 1000, 2, seed).unwrap();
    let theta0 = init_params(&model, seed);

    let t = std::time::Instant::now();
    let exp = Experiment {
        problem: &problem,
        model: &model,
        clients: &clients,
        theta0,
        round: RoundConfig {
            local: LocalConfig {
                epochs: tau,
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                batch_size: batch,
                prox_mu: 0.0,
            },
            participation: 1.0,
            sketch: Some(SketchSpec::Subspace {
                rank: 10,
                oversample: 5,
                power_iters: 4,
                adaptive_energy: Some(0.999),
            }),
            server: ServerConfig {
                rule: AggregationRule::FipaQr,
                beta_reg: 1e-6,
                gamma,
            },
        },
        schedule: Schedule {
            warmup_rounds: warmup,
            total_rounds: warmup + refine,
        },
        seed,
        workers: 2,
        gn_reference: Some(GnReferenceConfig { gamma }),
    };
    // Use tau = 5 during warmup by running warmup separately would change
    // streams; keep one config for the probe.
    let run = run_experiment(&exp).unwrap();
    println!("total {:.1}s, rho_hat {:?}", t.elapsed().as_secs_f64(), run.rho_hat);
    println!("k    fipa_test       gap e_k        delta_k");
    for r in &run.records[warmup..] {
        println!(
            "{:>3}  {:.6e}  {:.6e}  {}",
            r.round,
            r.test_metric,
            r.gap.unwrap_or(f64::NAN),
            r.deviation.map(|d| format!("{d:.6e}")).unwrap_or_default()
        );
    }
    let fipa_losses: Vec<f64> = run.records[warmup..]
        .iter()
        .map(|r| r.test_metric)
        .collect();
    let slope_fipa = contraction_estimate(&fipa_losses);
    println!("fipa tail ratio {:?}", slope_fipa);

    // recursion check
    if let Some(gaps) = &run.gaps {
        let rho = run.rho_hat.unwrap_or(1.0);
        let tail_start = gaps.len() / 2;
        let mut ok = 0;
        let mut tot = 0;
        for k in 0..gaps.len() - 1 {
            let lhs = gaps[k + 1].gap;
            let rhs = rho * gaps[k].gap + gaps[k].deviation.unwrap() + 1e-8;
            if k >= tail_start {
                tot += 1;
                if lhs <= rhs {
                    ok += 1;
                }
            }
        }
        println!("recursion holds on {ok}/{tot} tail rounds; e_0 = {:.3e}", gaps[0].gap);
    }
}
