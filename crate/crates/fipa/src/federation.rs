//! Round orchestration: data partitioners, client-side local training,
//! participation sampling, the warmup-then-refine schedule, and
//! communication accounting.
//!
//! Determinism contract: every random draw site has its own seed stream
//! keyed by `(seed, round, client)`, clients are merged in ascending id,
//! and sums are accumulated in index order — so a `(seed, config)` pair
//! reproduces a run bit for bit, with any worker count.

use crate::aggregate::{
    aggregate, AggregationRule, ClientUpdate, ServerConfig, SolveDiagnostics,
};
use crate::curvature::{
    exact_sketch, sketch_from_source, DataCurvature, FisherSketch, PdeCurvature, PdeResidual,
    SketchConfig,
};
use crate::error::{Error, Result};
use crate::gn::{self, GapPoint, GnSystem};
use crate::linalg::vec_ops;
use crate::model::{self, DataSet, LossKind, MlpSpec, ParamVector, Targets};
use crate::problems::{sample_boundary, sample_interior, Problem, Region};
use crate::rng::{self, label};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use std::time::Instant;

/// A client's private data.
#[derive(Debug, Clone)]
pub enum ClientData {
    Supervised(DataSet),
    Pde {
        interior: Vec<Vec<f64>>,
        boundary: Vec<Vec<f64>>,
    },
}

/// One client: id, data, and the subdomain it was sampled from (when the
/// partitioner is geometric).
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: ClientData,
    pub region: Option<Region>,
}

impl ClientDataset {
    /// Sample count used for aggregation weights and byte accounting.
    pub fn n_samples(&self) -> usize {
        match &self.data {
            ClientData::Supervised(d) => d.len(),
            ClientData::Pde { interior, boundary } => interior.len() + boundary.len(),
        }
    }
}

/// Local optimizer choice; state resets at every round start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Client-side training settings for one round.
#[derive(Debug, Clone, Copy)]
pub struct LocalConfig {
    /// Local epochs tau; zero is allowed and returns a zero update.
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal anchor weight mu; 0 disables the term.
    pub prox_mu: f64,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        if self.prox_mu < 0.0 {
            return Err(Error::InvalidArgument("prox_mu must be >= 0".into()));
        }
        Ok(())
    }
}

/// How clients compute their curvature sketch.
#[derive(Debug, Clone, Copy)]
pub enum SketchSpec {
    /// Randomized subspace iteration with Rayleigh-Ritz extraction.
    Subspace {
        rank: usize,
        oversample: usize,
        power_iters: usize,
        /// Keep the smallest leading set holding this fraction of the
        /// spectral mass, when set.
        adaptive_energy: Option<f64>,
    },
    /// Full-spectrum sketch through the dense path (oracle/baseline).
    DenseExact { adaptive_energy: Option<f64> },
}

/// Per-round configuration shared by warmup and refinement phases.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub local: LocalConfig,
    /// Fraction of clients drawn each round, in (0, 1].
    pub participation: f64,
    pub sketch: Option<SketchSpec>,
    pub server: ServerConfig,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidArgument(
                "participation must lie in (0, 1]".into(),
            ));
        }
        self.server.validate()?;
        if self.server.rule != AggregationRule::FedAvg && self.sketch.is_none() {
            return Err(Error::InvalidArgument(
                "Fisher-informed rules need a sketch config".into(),
            ));
        }
        Ok(())
    }
}

/// Warmup-then-refine schedule; warmup rounds always run FedAvg.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub warmup_rounds: usize,
    pub total_rounds: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_rounds > self.total_rounds {
            return Err(Error::InvalidArgument(
                "warmup_rounds exceeds total_rounds".into(),
            ));
        }
        Ok(())
    }
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub rule: AggregationRule,
    /// (client_id, final local loss) of every participant.
    pub client_losses: Vec<(usize, f64)>,
    pub train_loss_mean: f64,
    pub test_metric: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Sketch ranks by participant, empty on FedAvg rounds.
    pub sketch_ranks: Vec<usize>,
    pub r_tot: usize,
    /// Wall-clock diagnostic only; deliberately kept out of the serialized
    /// outputs so identical runs serialize identically.
    pub wall_ms: f64,
    pub solve: Option<SolveDiagnostics>,
    /// Gap to the reference trajectory after this round, when the
    /// reference is enabled.
    pub gap: Option<f64>,
    /// Single-round deviation from the reference map, when enabled.
    pub deviation: Option<f64>,
    /// Running contraction estimate of the reference trajectory.
    pub rho_hat: Option<f64>,
}

/// Smallest leading rank holding `energy_threshold` of the spectral mass.
/// Returns `(0, true)` on an all-zero spectrum.
pub fn adaptive_rank(values: &[f64], energy_threshold: f64) -> Result<(usize, bool)> {
    if !(energy_threshold > 0.0 && energy_threshold < 1.0) {
        return Err(Error::InvalidArgument(
            "energy threshold must lie in (0, 1)".into(),
        ));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Ok((0, true));
    }
    let mut acc = 0.0;
    for (i, &l) in values.iter().enumerate() {
        acc += l;
        if acc >= energy_threshold * total {
            return Ok((i + 1, false));
        }
    }
    Ok((values.len(), false))
}

// ---------------------------------------------------------------------
// Partitioners
// ---------------------------------------------------------------------

fn interval_boundaries(m: usize, proportions: Option<&[f64]>) -> Result<Vec<f64>> {
    let props: Vec<f64> = match proportions {
        Some(p) => {
            if p.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "{} proportions for {m} clients",
                    p.len()
                )));
            }
            if p.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidArgument("proportions must be > 0".into()));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "proportions sum to {s}, expected 1"
                )));
            }
            p.to_vec()
        }
        None => vec![1.0 / m as f64; m],
    };
    let mut bounds = vec![0.0];
    let mut acc = 0.0;
    for &p in &props {
        acc += p;
        bounds.push(acc.min(1.0));
    }
    *bounds.last_mut().unwrap() = 1.0; // exact tiling
    Ok(bounds)
}

fn fill_client(
    problem: &Problem,
    client_id: usize,
    region: Region,
    n_per_client: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<ClientDataset> {
    let mut rng = rng::stream(seed, &[label::PARTITION, client_id as u64]);
    let data = match problem {
        Problem::Sine { .. } | Problem::GaussianMixture { .. } => {
            let inputs = sample_interior(&region, n_per_client, &mut rng);
            let targets = inputs.iter().map(|x| vec![problem.target(x)]).collect();
            ClientData::Supervised(DataSet {
                inputs,
                targets: Targets::Values(targets),
            })
        }
        Problem::Pde(_) => {
            let interior = sample_interior(&region, n_per_client, &mut rng);
            let boundary = sample_boundary(&region, n_boundary, &mut rng);
            ClientData::Pde { interior, boundary }
        }
        Problem::Classification { .. } => {
            return Err(Error::InvalidArgument(
                "classification data is partitioned by labels, not geometry".into(),
            ))
        }
    };
    Ok(ClientDataset {
        client_id,
        data,
        region: Some(region),
    })
}

/// Split the first coordinate of the unit domain into `m` contiguous
/// pieces (optionally non-uniform) and sample each client inside its own
/// piece.
pub fn partition_interval(
    problem: &Problem,
    m: usize,
    proportions: Option<&[f64]>,
    n_per_client: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let bounds = interval_boundaries(m, proportions)?;
    let d = problem.input_dim();
    (0..m)
        .map(|i| {
            let mut region = Region::unit_cube(d);
            region.lo[0] = bounds[i];
            region.hi[0] = bounds[i + 1];
            fill_client(problem, i, region, n_per_client, n_boundary, seed)
        })
        .collect()
}

/// Tile the unit square into `rows x cols` cells, one client per cell;
/// client `(i, j)` gets cell `[j/cols, (j+1)/cols] x [i/rows, (i+1)/rows]`
/// and id `i * cols + j`.
pub fn partition_grid(
    problem: &Problem,
    rows: usize,
    cols: usize,
    n_per_client: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid needs rows, cols >= 1".into()));
    }
    if problem.input_dim() != 2 {
        return Err(Error::InvalidArgument(
            "grid partition needs a 2-dimensional domain".into(),
        ));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let region = Region {
                lo: vec![j as f64 / cols as f64, i as f64 / rows as f64],
                hi: vec![(j + 1) as f64 / cols as f64, (i + 1) as f64 / rows as f64],
            };
            out.push(fill_client(
                problem,
                i * cols + j,
                region,
                n_per_client,
                n_boundary,
                seed,
            )?);
        }
    }
    Ok(out)
}

/// Label-skewed split: per class, client shares are drawn from a
/// symmetric Dirichlet(alpha) and realized by largest-remainder rounding.
/// Every sample lands on exactly one client; empty clients are topped up
/// from the largest one.
pub fn partition_dirichlet_labels(
    data: &DataSet,
    m: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }
    let labels = match &data.targets {
        Targets::Labels(l) => l,
        _ => {
            return Err(Error::InvalidArgument(
                "dirichlet partition needs labeled data".into(),
            ))
        }
    };
    if data.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover {m} clients",
            data.len()
        )));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); m];
    for c in 0..n_classes {
        let mut idxs: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == c).collect();
        if idxs.is_empty() {
            continue;
        }
        let mut rng = rng::stream(seed, &[label::PARTITION, c as u64]);
        idxs.shuffle(&mut rng);

        // symmetric Dirichlet via normalized Gammas
        let gamma = Gamma::new(alpha, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("gamma sampler: {e}")))?;
        let mut props: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
        let mut total: f64 = props.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // vanishing draws at tiny alpha: dump the class on one client
            let lucky = rng.gen_range(0..m);
            props = vec![0.0; m];
            props[lucky] = 1.0;
            total = 1.0;
        }
        for p in props.iter_mut() {
            *p /= total;
        }

        // largest-remainder rounding of per-client counts
        let n_c = idxs.len();
        let exact: Vec<f64> = props.iter().map(|&p| p * n_c as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let mut left = n_c - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &cl in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[cl] += 1;
            left -= 1;
        }

        let mut cursor = 0;
        for (cl, &cnt) in counts.iter().enumerate() {
            assigned[cl].extend_from_slice(&idxs[cursor..cursor + cnt]);
            cursor += cnt;
        }
    }

    // rebalance empties by moving one sample from the largest client
    loop {
        let empty = match assigned.iter().position(|a| a.is_empty()) {
            Some(e) => e,
            None => break,
        };
        let largest = (0..m)
            .max_by_key(|&i| assigned[i].len())
            .expect("at least one client");
        if assigned[largest].len() <= 1 {
            return Err(Error::InvalidArgument(
                "cannot rebalance: too few samples".into(),
            ));
        }
        let moved = assigned[largest].pop().unwrap();
        assigned[empty].push(moved);
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(cl, idxs)| {
            let inputs = idxs.iter().map(|&i| data.inputs[i].clone()).collect();
            let lab = idxs.iter().map(|&i| labels[i]).collect();
            ClientDataset {
                client_id: cl,
                data: ClientData::Supervised(DataSet {
                    inputs,
                    targets: Targets::Labels(lab),
                }),
                region: None,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(p: usize) -> Self {
        Adam {
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut ParamVector, grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..grad.len() {
            if !theta.mask[i] {
                continue;
            }
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta.values[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

fn sgd_step(theta: &mut ParamVector, grad: &[f64], lr: f64) {
    for i in 0..grad.len() {
        if theta.mask[i] {
            theta.values[i] -= lr * grad[i];
        }
    }
}

/// Mean loss and gradient over an index subset of a supervised set.
fn supervised_batch_grad(
    spec: &MlpSpec,
    theta: &ParamVector,
    data: &DataSet,
    kind: LossKind,
    idxs: &[usize],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; spec.param_count()];
    let mut loss = 0.0;
    for &i in idxs {
        let acts = model::forward_cached(spec, &theta.values, &data.inputs[i]);
        let z = acts.last().unwrap().clone();
        let (li, adj) = model::loss_and_adjoint(kind, &z, &data.targets, i);
        loss += li;
        model::backprop_into(spec, &theta.values, &acts, &adj, &mut grad);
    }
    let inv = 1.0 / idxs.len() as f64;
    loss *= inv;
    vec_ops::scale(inv, &mut grad);
    theta.zero_masked(&mut grad);
    (loss, grad)
}

/// Mean PDE loss and gradient over an interior batch plus the full
/// boundary set.
fn pde_batch_grad(
    spec: &MlpSpec,
    theta: &ParamVector,
    interior: &[Vec<f64>],
    batch: &[usize],
    boundary: &[Vec<f64>],
    problem: &crate::problems::PdeProblem,
    beta_bc: f64,
) -> Result<(f64, Vec<f64>)> {
    let p = spec.param_count();
    let mut grad = vec![0.0; p];
    let mut loss = 0.0;
    let inv_int = 1.0 / batch.len() as f64;
    for &i in batch {
        let x = &interior[i];
        let g = model::laplacian_with_grads(spec, theta, x)?;
        let r = problem.interior_residual(x, g.u, g.lap);
        let gp = problem.nonlinearity_prime(g.u);
        loss += 0.5 * r * r * inv_int;
        for k in 0..p {
            grad[k] += r * (-g.grad_lap[k] + gp * g.grad_u[k]) * inv_int;
        }
    }
    let inv_bc = beta_bc / boundary.len() as f64;
    let mut row = vec![0.0; p];
    for x in boundary {
        let acts = model::forward_cached(spec, &theta.values, x);
        let u = acts.last().unwrap()[0];
        let r = u - problem.dirichlet(x);
        loss += 0.5 * inv_bc * r * r;
        row.iter_mut().for_each(|v| *v = 0.0);
        model::backprop_into(spec, &theta.values, &acts, &[1.0], &mut row);
        vec_ops::axpy(inv_bc * r, &row, &mut grad);
    }
    theta.zero_masked(&mut grad);
    Ok((loss, grad))
}

/// Full local objective at `theta` (used for the reported final loss).
fn local_loss(
    spec: &MlpSpec,
    theta: &ParamVector,
    client: &ClientDataset,
    problem: &Problem,
) -> Result<f64> {
    match (&client.data, problem) {
        (ClientData::Supervised(data), _) => {
            let (loss, _) = model::loss_and_gradient(spec, theta, data, problem.loss_kind())?;
            Ok(loss)
        }
        (ClientData::Pde { interior, boundary }, Problem::Pde(pde)) => {
            crate::problems::pde_local_loss(spec, theta, interior, boundary, pde, pde.beta_bc)
        }
        _ => Err(Error::InvalidArgument(
            "PDE client attached to a non-PDE problem".into(),
        )),
    }
}

/// Run `tau` local epochs from the broadcast parameters and return the
/// total update plus the final local loss. Optimizer state starts fresh.
pub fn local_train(
    spec: &MlpSpec,
    broadcast: &ParamVector,
    client: &ClientDataset,
    problem: &Problem,
    cfg: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    let p = spec.param_count();
    let mut theta = broadcast.clone();
    let mut adam = Adam::new(p);

    let n = match &client.data {
        ClientData::Supervised(d) => d.len(),
        ClientData::Pde { interior, .. } => interior.len(),
    };
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::stream(
            seed,
            &[
                label::BATCH,
                round as u64,
                client.client_id as u64,
                epoch as u64,
            ],
        );
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.min(n)) {
            let (_, mut grad) = match (&client.data, problem) {
                (ClientData::Supervised(data), _) => {
                    supervised_batch_grad(spec, &theta, data, problem.loss_kind(), batch)
                }
                (ClientData::Pde { interior, boundary }, Problem::Pde(pde)) => {
                    pde_batch_grad(spec, &theta, interior, batch, boundary, pde, pde.beta_bc)?
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "PDE client attached to a non-PDE problem".into(),
                    ))
                }
            };
            if cfg.prox_mu > 0.0 {
                for i in 0..p {
                    if theta.mask[i] {
                        grad[i] += cfg.prox_mu * (theta.values[i] - broadcast.values[i]);
                    }
                }
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => sgd_step(&mut theta, &grad, cfg.lr),
                OptimizerKind::Adam => adam.step(&mut theta, &grad, cfg.lr),
            }
        }
    }

    let final_loss = local_loss(spec, &theta, client, problem)?;
    let delta = vec_ops::sub(&theta.values, &broadcast.values);
    Ok((delta, final_loss))
}

// ---------------------------------------------------------------------
// Rounds and experiments
// ---------------------------------------------------------------------

fn client_sketch(
    spec: &MlpSpec,
    theta: &ParamVector,
    client: &ClientDataset,
    problem: &Problem,
    sketch: &SketchSpec,
    seed: u64,
    round: usize,
) -> Result<FisherSketch> {
    let stream_seed = rng::derive_seed(
        seed,
        &[label::SKETCH, round as u64, client.client_id as u64],
    );
    let raw = match (&client.data, problem) {
        (ClientData::Supervised(data), _) => {
            let src = DataCurvature::new(spec, theta, data, problem.loss_kind())?;
            match sketch {
                SketchSpec::Subspace {
                    rank,
                    oversample,
                    power_iters,
                    ..
                } => sketch_from_source(
                    &src,
                    &SketchConfig {
                        rank: *rank,
                        oversample: *oversample,
                        power_iters: *power_iters,
                        seed: stream_seed,
                    },
                )?,
                SketchSpec::DenseExact { .. } => exact_sketch(&src)?,
            }
        }
        (ClientData::Pde { interior, boundary }, Problem::Pde(pde)) => {
            let src = PdeCurvature::new(spec, theta, interior, boundary, pde, pde.beta_bc)?;
            match sketch {
                SketchSpec::Subspace {
                    rank,
                    oversample,
                    power_iters,
                    ..
                } => sketch_from_source(
                    &src,
                    &SketchConfig {
                        rank: *rank,
                        oversample: *oversample,
                        power_iters: *power_iters,
                        seed: stream_seed,
                    },
                )?,
                SketchSpec::DenseExact { .. } => exact_sketch(&src)?,
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "PDE client attached to a non-PDE problem".into(),
            ))
        }
    };
    let energy = match sketch {
        SketchSpec::Subspace { adaptive_energy, .. } => *adaptive_energy,
        SketchSpec::DenseExact { adaptive_energy } => *adaptive_energy,
    };
    match energy {
        Some(t) => {
            let (r, _zero) = adaptive_rank(&raw.values, t)?;
            Ok(raw.truncated(r))
        }
        None => Ok(raw),
    }
}

fn sample_participants(m: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = ((fraction * m as f64).round() as usize).clamp(1, m);
    let mut ids: Vec<usize> = (0..m).collect();
    // partial Fisher-Yates, then ascending order for deterministic merging
    for i in 0..k {
        let j = rng.gen_range(i..m);
        ids.swap(i, j);
    }
    let mut chosen = ids[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Payload produced by one participating client.
struct ClientRound {
    update: ClientUpdate,
    final_loss: f64,
    sketch_rank: Option<usize>,
}

fn run_client(
    spec: &MlpSpec,
    theta: &ParamVector,
    client: &ClientDataset,
    problem: &Problem,
    cfg: &RoundConfig,
    rule: AggregationRule,
    seed: u64,
    round: usize,
) -> Result<ClientRound> {
    // Sketch at the broadcast parameters, before any local step.
    let sketch = if rule != AggregationRule::FedAvg {
        let spec_cfg = cfg.sketch.as_ref().ok_or_else(|| {
            Error::InvalidArgument("Fisher-informed round without sketch config".into())
        })?;
        Some(client_sketch(
            spec, theta, client, problem, spec_cfg, seed, round,
        )?)
    } else {
        None
    };
    let (delta, final_loss) =
        local_train(spec, theta, client, problem, &cfg.local, seed, round)?;
    let rank = sketch.as_ref().map(|s| s.rank());
    let update = ClientUpdate::new(
        client.client_id,
        client.n_samples(),
        delta,
        sketch,
        theta.len_eff(),
    );
    Ok(ClientRound {
        update,
        final_loss,
        sketch_rank: rank,
    })
}

/// Execute one communication round and return the next global parameters
/// plus its record.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    spec: &MlpSpec,
    theta: &ParamVector,
    clients: &[ClientDataset],
    problem: &Problem,
    cfg: &RoundConfig,
    rule_override: Option<AggregationRule>,
    seed: u64,
    round: usize,
    workers: usize,
) -> Result<(ParamVector, RoundRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let rule = rule_override.unwrap_or(cfg.server.rule);
    let server = ServerConfig {
        rule,
        ..cfg.server
    };

    let mut part_rng = rng::stream(seed, &[label::PARTICIPATION, round as u64]);
    let participants = sample_participants(clients.len(), cfg.participation, &mut part_rng);

    let results: Vec<Result<ClientRound>> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| {
            participants
                .par_iter()
                .map(|&i| run_client(spec, theta, &clients[i], problem, cfg, rule, seed, round))
                .collect()
        })
    } else {
        participants
            .iter()
            .map(|&i| run_client(spec, theta, &clients[i], problem, cfg, rule, seed, round))
            .collect()
    };

    let mut updates = Vec::with_capacity(results.len());
    let mut client_losses = Vec::with_capacity(results.len());
    let mut sketch_ranks = Vec::new();
    for r in results {
        let r = r?;
        client_losses.push((r.update.client_id, r.final_loss));
        if let Some(rank) = r.sketch_rank {
            sketch_ranks.push(rank);
        }
        updates.push(r.update);
    }

    let (next, solve) = aggregate(theta, &updates, &server)?;

    let p_eff = theta.len_eff() as u64;
    let bytes_up: u64 = updates.iter().map(|u| u.bytes_up).sum();
    let bytes_down = 8 * p_eff * participants.len() as u64;
    let train_loss_mean =
        client_losses.iter().map(|(_, l)| l).sum::<f64>() / client_losses.len() as f64;
    let test_metric = problem.eval_metric(spec, &next)?;
    let r_tot = sketch_ranks.iter().sum();

    let record = RoundRecord {
        round,
        rule,
        client_losses,
        train_loss_mean,
        test_metric,
        bytes_up,
        bytes_down,
        sketch_ranks,
        r_tot,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        solve,
        gap: None,
        deviation: None,
        rho_hat: None,
    };
    Ok((next, record))
}

/// Attach a centralized damped Gauss-Newton reference to the refinement
/// phase.
#[derive(Debug, Clone, Copy)]
pub struct GnReferenceConfig {
    pub gamma: f64,
}

/// A full experiment: fixed problem, model, clients, schedule.
pub struct Experiment<'a> {
    pub problem: &'a Problem,
    pub model: &'a MlpSpec,
    pub clients: &'a [ClientDataset],
    pub theta0: ParamVector,
    pub round: RoundConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub workers: usize,
    pub gn_reference: Option<GnReferenceConfig>,
}

/// Everything an experiment produced.
pub struct ExperimentRun {
    pub records: Vec<RoundRecord>,
    pub theta_final: ParamVector,
    /// Parameters at the warmup/refinement switch.
    pub theta_warmup: Option<ParamVector>,
    /// Global iterates of the refinement phase (index 0 = switch point),
    /// kept when the reference is enabled.
    pub refinement_trajectory: Vec<ParamVector>,
    /// Gap/deviation points against the reference trajectory.
    pub gaps: Option<Vec<GapPoint>>,
    /// Contraction estimate of the reference trajectory.
    pub rho_hat: Option<f64>,
}

/// Pool every client's data for the centralized reference.
fn pooled_data(clients: &[ClientDataset]) -> (DataSet, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut inputs = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    for c in clients {
        match &c.data {
            ClientData::Supervised(d) => {
                inputs.extend(d.inputs.iter().cloned());
                match &d.targets {
                    Targets::Values(v) => values.extend(v.iter().cloned()),
                    Targets::Labels(l) => labels.extend(l.iter().copied()),
                }
            }
            ClientData::Pde { interior: i, boundary: b } => {
                interior.extend(i.iter().cloned());
                boundary.extend(b.iter().cloned());
            }
        }
    }
    let targets = if values.is_empty() {
        Targets::Labels(labels)
    } else {
        Targets::Values(values)
    };
    (DataSet { inputs, targets }, interior, boundary)
}

/// Run the full schedule: FedAvg warmup, then the configured main rule,
/// with optional Gauss-Newton reference diagnostics on the refinement
/// phase.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentRun> {
    exp.round.validate()?;
    exp.schedule.validate()?;
    if exp.clients.is_empty() {
        return Err(Error::EmptyUpdates);
    }

    let mut theta = exp.theta0.clone();
    let mut records = Vec::with_capacity(exp.schedule.total_rounds);
    let mut theta_warmup = None;
    let mut refinement: Vec<ParamVector> = Vec::new();

    for k in 0..exp.schedule.total_rounds {
        let in_warmup = k < exp.schedule.warmup_rounds;
        if k == exp.schedule.warmup_rounds {
            theta_warmup = Some(theta.clone());
            if exp.gn_reference.is_some() {
                refinement.push(theta.clone());
            }
        }
        let rule = if in_warmup {
            Some(AggregationRule::FedAvg)
        } else {
            None
        };
        let (next, record) = run_round(
            exp.model,
            &theta,
            exp.clients,
            exp.problem,
            &exp.round,
            rule,
            exp.seed,
            k,
            exp.workers,
        )?;
        theta = next;
        records.push(record);
        if !in_warmup && exp.gn_reference.is_some() {
            refinement.push(theta.clone());
        }
    }
    if exp.schedule.warmup_rounds == exp.schedule.total_rounds {
        theta_warmup = Some(theta.clone());
        if exp.gn_reference.is_some() {
            refinement.push(theta.clone());
        }
    }

    let mut gaps = None;
    let mut rho_hat = None;
    if let (Some(gn_cfg), Some(start)) = (&exp.gn_reference, &theta_warmup) {
        let (pool, interior, boundary) = pooled_data(exp.clients);
        let sys = match exp.problem {
            Problem::Pde(pde) => GnSystem::pde(exp.model, pde, &interior, &boundary)?,
            _ => GnSystem::supervised(exp.model, &pool)?,
        };
        let steps = exp.schedule.total_rounds - exp.schedule.warmup_rounds;
        if steps > 0 {
            let traj = gn::gn_trajectory(&sys, Some(exp.problem), start, gn_cfg.gamma, steps)?;
            let g = gn::gap_diagnostics(&sys, &refinement, &traj, gn_cfg.gamma)?;
            // distance-to-final errors give the contraction estimate
            let final_theta = &traj.last().unwrap().theta;
            let errs: Vec<f64> = traj[..traj.len() - 1]
                .iter()
                .map(|s| vec_ops::dist(&s.theta.values, &final_theta.values))
                .collect();
            rho_hat = gn::contraction_estimate(&errs).ok();
            // attach per-round diagnostics to the refinement records
            for (j, rec) in records[exp.schedule.warmup_rounds..].iter_mut().enumerate() {
                rec.gap = Some(g[j + 1].gap);
                rec.deviation = g[j].deviation;
                rec.rho_hat = rho_hat;
            }
            gaps = Some(g);
        }
    }

    Ok(ExperimentRun {
        records,
        theta_final: theta,
        theta_warmup,
        refinement_trajectory: refinement,
        gaps,
        rho_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation};
    use crate::problems::sine_target;

    fn sine_clients(m: usize, n: usize, seed: u64) -> (Problem, Vec<ClientDataset>) {
        let problem = sine_target(2).unwrap();
        let clients = partition_interval(&problem, m, None, n, 2, seed).unwrap();
        (problem, clients)
    }

    fn base_local() -> LocalConfig {
        LocalConfig {
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            batch_size: 16,
            prox_mu: 0.0,
        }
    }

    #[test]
    fn interval_partition_geometry() {
        let (_, clients) = sine_clients(2, 50, 3);
        assert_eq!(clients.len(), 2);
        let r0 = clients[0].region.as_ref().unwrap();
        let r1 = clients[1].region.as_ref().unwrap();
        assert_eq!((r0.lo[0], r0.hi[0]), (0.0, 0.5));
        assert_eq!((r1.lo[0], r1.hi[0]), (0.5, 1.0));
        for c in &clients {
            if let ClientData::Supervised(d) = &c.data {
                for x in &d.inputs {
                    assert!(c.region.as_ref().unwrap().contains(x));
                }
            }
        }
    }

    #[test]
    fn interval_partition_single_client_covers_domain() {
        let (_, clients) = sine_clients(1, 10, 3);
        let r = clients[0].region.as_ref().unwrap();
        assert_eq!((r.lo[0], r.hi[0]), (0.0, 1.0));
    }

    #[test]
    fn interval_partition_proportions() {
        let problem = sine_target(2).unwrap();
        let clients =
            partition_interval(&problem, 2, Some(&[0.25, 0.75]), 10, 2, 1).unwrap();
        let r0 = clients[0].region.as_ref().unwrap();
        assert!((r0.hi[0] - 0.25).abs() < 1e-12);
        assert!(partition_interval(&problem, 2, Some(&[0.2, 0.2]), 10, 2, 1).is_err());
    }

    #[test]
    fn grid_partition_cells() {
        let spec = crate::problems::GaussianMixtureSpec::random(5);
        let problem = crate::problems::gaussian_mixture_target(spec).unwrap();
        let clients = partition_grid(&problem, 3, 3, 20, 2, 9).unwrap();
        assert_eq!(clients.len(), 9);
        // client (0, 0) has id 0 and cell [0, 1/3] x [0, 1/3]
        let r = clients[0].region.as_ref().unwrap();
        assert!((r.hi[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.hi[1] - 1.0 / 3.0).abs() < 1e-12);
        if let ClientData::Supervised(d) = &clients[0].data {
            for x in &d.inputs {
                assert!(r.contains(x));
            }
        }
    }

    #[test]
    fn one_by_one_grid_is_whole_square() {
        let spec = crate::problems::GaussianMixtureSpec::random(5);
        let problem = crate::problems::gaussian_mixture_target(spec).unwrap();
        let clients = partition_grid(&problem, 1, 1, 5, 2, 9).unwrap();
        assert_eq!(clients.len(), 1);
        let r = clients[0].region.as_ref().unwrap();
        assert_eq!(r.lo, vec![0.0, 0.0]);
        assert_eq!(r.hi, vec![1.0, 1.0]);
    }

    #[test]
    fn dirichlet_partition_conserves_samples() {
        let data = crate::problems::synthetic_classification(5, 40, 3, 4.0, 7).unwrap();
        let clients = partition_dirichlet_labels(&data, 8, 0.3, 11).unwrap();
        let total: usize = clients.iter().map(|c| c.n_samples()).sum();
        assert_eq!(total, data.len());
        for c in &clients {
            assert!(c.n_samples() > 0);
        }
        // no duplicates: collect all (rounded) inputs
        let mut seen = std::collections::HashSet::new();
        for c in &clients {
            if let ClientData::Supervised(d) = &c.data {
                for x in &d.inputs {
                    let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
                    assert!(seen.insert(key), "duplicate sample");
                }
            }
        }
        assert_eq!(seen.len(), data.len());
    }

    #[test]
    fn dirichlet_high_alpha_is_nearly_uniform() {
        let n_per_class = 60;
        let m = 4;
        let data = crate::problems::synthetic_classification(4, n_per_class, 2, 4.0, 3).unwrap();
        // average deviation over 20 seeds
        let mut worst_rel = 0.0_f64;
        let mut acc = 0.0;
        let mut count = 0;
        for seed in 0..20 {
            let clients = partition_dirichlet_labels(&data, m, 1e6, seed).unwrap();
            for c in &clients {
                if let ClientData::Supervised(d) = &c.data {
                    if let Targets::Labels(l) = &d.targets {
                        for class in 0..4 {
                            let have = l.iter().filter(|&&x| x == class).count() as f64;
                            let want = n_per_class as f64 / m as f64;
                            let rel = (have - want).abs() / want;
                            acc += rel;
                            count += 1;
                            worst_rel = worst_rel.max(rel);
                        }
                    }
                }
            }
        }
        let mean_rel = acc / count as f64;
        assert!(mean_rel < 0.1, "mean relative deviation {mean_rel}");
    }

    #[test]
    fn dirichlet_low_alpha_concentrates_labels() {
        // frozen from a 50-seed simulation: mean max-label share >= 0.8
        let data = crate::problems::synthetic_classification(10, 30, 2, 4.0, 3).unwrap();
        let mut shares = Vec::new();
        for seed in 0..50 {
            let clients = partition_dirichlet_labels(&data, 10, 0.01, seed).unwrap();
            for c in &clients {
                if let ClientData::Supervised(d) = &c.data {
                    if let Targets::Labels(l) = &d.targets {
                        let mut counts = vec![0usize; 10];
                        for &x in l {
                            counts[x] += 1;
                        }
                        let max = *counts.iter().max().unwrap() as f64;
                        shares.push(max / l.len() as f64);
                    }
                }
            }
        }
        let mean: f64 = shares.iter().sum::<f64>() / shares.len() as f64;
        assert!(mean >= 0.8, "mean max-label share {mean}");
    }

    #[test]
    fn adaptive_rank_cases() {
        assert_eq!(adaptive_rank(&[10.0, 0.0, 0.0], 0.9).unwrap(), (1, false));
        assert_eq!(adaptive_rank(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), (2, false));
        assert_eq!(adaptive_rank(&[4.0, 3.0, 2.0, 1.0], 0.95).unwrap(), (4, false));
        assert_eq!(adaptive_rank(&[0.0, 0.0], 0.9).unwrap(), (0, true));
        assert!(adaptive_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn zero_epochs_returns_zero_update() {
        let (problem, clients) = sine_clients(1, 20, 5);
        let spec = MlpSpec::new(vec![1, 4, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 1);
        let mut cfg = base_local();
        cfg.epochs = 0;
        let (delta, _) =
            local_train(&spec, &theta, &clients[0], &problem, &cfg, 3, 0).unwrap();
        assert!(delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_full_batch_sgd_step_is_one_gradient_step() {
        let (problem, clients) = sine_clients(1, 12, 5);
        let spec = MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 2);
        let mut cfg = base_local();
        cfg.epochs = 1;
        cfg.batch_size = 1000; // full batch
        cfg.lr = 0.1;
        let (delta, _) =
            local_train(&spec, &theta, &clients[0], &problem, &cfg, 3, 0).unwrap();
        let data = match &clients[0].data {
            ClientData::Supervised(d) => d,
            _ => unreachable!(),
        };
        let (_, grad) = model::loss_and_gradient(&spec, &theta, data, LossKind::Mse).unwrap();
        for (d, g) in delta.iter().zip(&grad) {
            assert!((d + 0.1 * g).abs() < 1e-14);
        }
    }

    #[test]
    fn huge_prox_pins_the_update() {
        // The anchor holds the iterate within ~||g||/mu of the broadcast
        // point, while the free run keeps drifting. The explicit proximal
        // gradient needs lr * mu <= 1 to stay contractive, hence the tiny
        // step size.
        let (problem, clients) = sine_clients(1, 30, 5);
        let spec = MlpSpec::new(vec![1, 4, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 2);
        let free = LocalConfig {
            epochs: 200,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-6,
            batch_size: 1,
            prox_mu: 0.0,
        };
        let (d_free, _) =
            local_train(&spec, &theta, &clients[0], &problem, &free, 3, 0).unwrap();
        let mut pinned = free;
        pinned.prox_mu = 1e6;
        let (d_pin, _) =
            local_train(&spec, &theta, &clients[0], &problem, &pinned, 3, 0).unwrap();
        let ratio = vec_ops::norm2(&d_pin) / vec_ops::norm2(&d_free).max(1e-300);
        assert!(ratio <= 1e-3, "prox failed to pin: ratio {ratio}");
    }

    #[test]
    fn fedavg_round_matches_hand_average() {
        let (problem, clients) = sine_clients(2, 25, 6);
        let spec = MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 4);
        let cfg = RoundConfig {
            local: base_local(),
            participation: 1.0,
            sketch: None,
            server: ServerConfig::fedavg(),
        };
        let (next, record) = run_round(
            &spec, &theta, &clients, &problem, &cfg, None, 11, 0, 1,
        )
        .unwrap();
        // hand-recompute the weighted average of the two local deltas
        let mut want = theta.values.clone();
        let n: usize = clients.iter().map(|c| c.n_samples()).sum();
        for c in &clients {
            let (delta, _) =
                local_train(&spec, &theta, c, &problem, &cfg.local, 11, 0).unwrap();
            for (w, d) in want.iter_mut().zip(&delta) {
                *w += (c.n_samples() as f64 / n as f64) * d;
            }
        }
        for (a, b) in next.values.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(record.rule, AggregationRule::FedAvg);
        assert_eq!(record.bytes_down, 2 * 8 * spec.param_count() as u64);
        assert_eq!(record.bytes_up, 2 * 8 * spec.param_count() as u64);
    }

    #[test]
    fn rounds_are_deterministic_across_worker_counts() {
        let (problem, clients) = sine_clients(3, 15, 8);
        let spec = MlpSpec::new(vec![1, 4, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 4);
        let cfg = RoundConfig {
            local: base_local(),
            participation: 1.0,
            sketch: Some(SketchSpec::Subspace {
                rank: 3,
                oversample: 2,
                power_iters: 2,
                adaptive_energy: None,
            }),
            server: ServerConfig {
                rule: AggregationRule::FipaQr,
                beta_reg: 1e-6,
                gamma: 1.0,
            },
        };
        let (a, ra) = run_round(&spec, &theta, &clients, &problem, &cfg, None, 7, 0, 1).unwrap();
        let (b, rb) = run_round(&spec, &theta, &clients, &problem, &cfg, None, 7, 0, 2).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(ra.bytes_up, rb.bytes_up);
        assert_eq!(ra.test_metric, rb.test_metric);
    }

    #[test]
    fn fipa_round_byte_accounting() {
        let (problem, clients) = sine_clients(2, 10, 8);
        let spec = MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let theta = init_params(&spec, 4);
        let rank = 2;
        let cfg = RoundConfig {
            local: base_local(),
            participation: 1.0,
            sketch: Some(SketchSpec::Subspace {
                rank,
                oversample: 2,
                power_iters: 2,
                adaptive_energy: None,
            }),
            server: ServerConfig {
                rule: AggregationRule::FipaQr,
                beta_reg: 1e-6,
                gamma: 1.0,
            },
        };
        let (_, record) =
            run_round(&spec, &theta, &clients, &problem, &cfg, None, 7, 0, 1).unwrap();
        let p = spec.param_count() as u64;
        let expected: u64 = record
            .sketch_ranks
            .iter()
            .map(|&r| 8 * (p + p * r as u64 + r as u64))
            .sum();
        assert_eq!(record.bytes_up, expected);
        assert!(record.sketch_ranks.iter().all(|&r| r <= rank));
    }

    #[test]
    fn experiment_all_warmup_equals_pure_fedavg() {
        let (problem, clients) = sine_clients(2, 20, 9);
        let spec = MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let theta0 = init_params(&spec, 5);
        let cfg = RoundConfig {
            local: base_local(),
            participation: 1.0,
            sketch: None,
            server: ServerConfig::fedavg(),
        };
        let all_warmup = Experiment {
            problem: &problem,
            model: &spec,
            clients: &clients,
            theta0: theta0.clone(),
            round: cfg.clone(),
            schedule: Schedule {
                warmup_rounds: 4,
                total_rounds: 4,
            },
            seed: 21,
            workers: 1,
            gn_reference: None,
        };
        let no_warmup = Experiment {
            schedule: Schedule {
                warmup_rounds: 0,
                total_rounds: 4,
            },
            theta0: theta0.clone(),
            round: cfg,
            problem: &problem,
            model: &spec,
            clients: &clients,
            seed: 21,
            workers: 1,
            gn_reference: None,
        };
        let a = run_experiment(&all_warmup).unwrap();
        let b = run_experiment(&no_warmup).unwrap();
        assert_eq!(a.theta_final.values, b.theta_final.values);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.test_metric, rb.test_metric);
        }
    }

    #[test]
    fn experiment_is_seed_reproducible() {
        let (problem, clients) = sine_clients(2, 15, 9);
        let spec = MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let theta0 = init_params(&spec, 5);
        let mk = || Experiment {
            problem: &problem,
            model: &spec,
            clients: &clients,
            theta0: theta0.clone(),
            round: RoundConfig {
                local: base_local(),
                participation: 0.7,
                sketch: Some(SketchSpec::Subspace {
                    rank: 2,
                    oversample: 2,
                    power_iters: 2,
                    adaptive_energy: Some(0.99),
                }),
                server: ServerConfig {
                    rule: AggregationRule::FipaQr,
                    beta_reg: 1e-6,
                    gamma: 1.0,
                },
            },
            schedule: Schedule {
                warmup_rounds: 2,
                total_rounds: 5,
            },
            seed: 33,
            workers: 1,
            gn_reference: None,
        };
        let a = run_experiment(&mk()).unwrap();
        let b = run_experiment(&mk()).unwrap();
        assert_eq!(a.theta_final.values, b.theta_final.values);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.test_metric, rb.test_metric);
            assert_eq!(ra.bytes_up, rb.bytes_up);
            assert_eq!(ra.train_loss_mean, rb.train_loss_mean);
        }
    }
}
