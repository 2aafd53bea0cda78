//! Server-side aggregation rules: data-size-weighted averaging (FedAvg),
//! the dense Fisher-informed path used as an oracle, and the scalable QR
//! path that solves in the stacked sketch subspace.
//!
//! Updates are always processed in ascending client id so results are
//! bit-identical no matter how the round delivered them.

use crate::curvature::{FisherSketch, DENSE_CAP};
use crate::error::{Error, Result};
use crate::linalg::{pinv_apply, qr_thin, solve_regularized, vec_ops, Matrix};
use crate::model::ParamVector;

/// Cap on the stacked sketch rank the QR path will handle.
pub const STACKED_RANK_CAP: usize = 4096;

/// One client's round payload.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub n_samples: usize,
    /// Full-length parameter delta; masked-off coordinates are zero.
    pub delta: Vec<f64>,
    /// Low-rank curvature sketch in the trainable subspace, when the round
    /// runs a Fisher-informed rule.
    pub sketch: Option<FisherSketch>,
    /// Upload cost in bytes under the 8-bytes-per-scalar accounting.
    pub bytes_up: u64,
}

impl ClientUpdate {
    /// Payload cost: `8 p_eff` for a bare delta, `8 (p_eff + p_eff r + r)`
    /// when a rank-r sketch rides along.
    pub fn payload_bytes(p_eff: usize, sketch_rank: Option<usize>) -> u64 {
        match sketch_rank {
            None => 8 * p_eff as u64,
            Some(r) => 8 * (p_eff + p_eff * r + r) as u64,
        }
    }

    pub fn new(
        client_id: usize,
        n_samples: usize,
        delta: Vec<f64>,
        sketch: Option<FisherSketch>,
        p_eff: usize,
    ) -> Self {
        let bytes_up = Self::payload_bytes(p_eff, sketch.as_ref().map(|s| s.rank()));
        ClientUpdate {
            client_id,
            n_samples,
            delta,
            sketch,
            bytes_up,
        }
    }
}

/// Which rule the server applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationRule {
    FedAvg,
    FipaDense,
    FipaQr,
}

impl AggregationRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::FedAvg => "fedavg",
            AggregationRule::FipaDense => "fipa_dense",
            AggregationRule::FipaQr => "fipa_qr",
        }
    }
}

/// Server aggregation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub rule: AggregationRule,
    /// Ridge term added to the merged curvature; must be > 0 for the QR
    /// rule, may be 0 on the dense path (pseudoinverse).
    pub beta_reg: f64,
    /// Global step size applied to the aggregated direction.
    pub gamma: f64,
}

impl ServerConfig {
    pub fn fedavg() -> Self {
        ServerConfig {
            rule: AggregationRule::FedAvg,
            beta_reg: 0.0,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_reg < 0.0 {
            return Err(Error::InvalidArgument("beta_reg must be >= 0".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("gamma must be > 0".into()));
        }
        if self.rule == AggregationRule::FipaQr && self.beta_reg <= 0.0 {
            return Err(Error::InvalidArgument(
                "the QR rule needs beta_reg > 0; use the dense rule for beta = 0".into(),
            ));
        }
        Ok(())
    }
}

/// What the reduced solve saw; serialized into the round metrics.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    /// Stacked rank of the merged client bases.
    pub r_tot: usize,
    /// Two-norm condition estimate of the shifted reduced matrix.
    pub condition_estimate: f64,
    /// `||(I - Q Q^T) b|| / ||b||`, the fraction of the curvature-weighted
    /// update outside the merged subspace.
    pub off_subspace_fraction: f64,
    /// Set when every sketch came back empty and the round fell back to
    /// plain averaging.
    pub fedavg_fallback: bool,
}

fn sorted_indices(updates: &[ClientUpdate]) -> Result<Vec<usize>> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let p = updates[0].delta.len();
    if updates.iter().any(|u| u.delta.len() != p) {
        return Err(Error::DimensionMismatch(
            "client updates disagree on parameter count".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..updates.len()).collect();
    idx.sort_by_key(|&i| updates[i].client_id);
    Ok(idx)
}

fn total_samples(updates: &[ClientUpdate]) -> f64 {
    updates.iter().map(|u| u.n_samples as f64).sum()
}

/// FedAvg: `theta + sum_m (N_m / N) delta_m` over the participating
/// clients.
pub fn fedavg_aggregate(theta: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let order = sorted_indices(updates)?;
    if updates[0].delta.len() != theta.len() {
        return Err(Error::DimensionMismatch(
            "update length vs parameter count".into(),
        ));
    }
    let n = total_samples(updates);
    let mut step = vec![0.0; theta.len()];
    for &i in &order {
        let u = &updates[i];
        vec_ops::axpy(u.n_samples as f64 / n, &u.delta, &mut step);
    }
    let mut out = theta.clone();
    out.add_masked(&step);
    Ok(out)
}

/// Weighted merge `H_hat = sum_m w_m U_m L_m U_m^T` and the curvature-
/// weighted update `b = sum_m w_m U_m L_m U_m^T delta_m`, both in the
/// trainable subspace.
fn merged_dense_system(
    theta: &ParamVector,
    updates: &[ClientUpdate],
    order: &[usize],
) -> Result<(Matrix, Vec<f64>)> {
    let p_eff = theta.len_eff();
    if p_eff > DENSE_CAP {
        return Err(Error::DenseCapExceeded {
            p: p_eff,
            cap: DENSE_CAP,
        });
    }
    let n = total_samples(updates);
    let mut h = Matrix::zeros(p_eff, p_eff);
    let mut b = vec![0.0; p_eff];
    for &i in order {
        let u = &updates[i];
        let sk = u
            .sketch
            .as_ref()
            .ok_or(Error::MissingSketch("fipa_dense"))?;
        if sk.dim() != p_eff {
            return Err(Error::DimensionMismatch(
                "sketch dimension vs trainable subspace".into(),
            ));
        }
        let w = u.n_samples as f64 / n;
        let d_eff = theta.gather(&u.delta);
        let mut coeff = sk.basis.matvec_t(&d_eff);
        for k in 0..sk.rank() {
            let col = sk.basis.col(k);
            h.rank_one_update(w * sk.values[k], &col, &col);
            coeff[k] *= sk.values[k];
        }
        let bu = sk.basis.matvec(&coeff);
        vec_ops::axpy(w, &bu, &mut b);
    }
    h.symmetrize();
    Ok((h, b))
}

/// Explicit per-client matrix weights `B_m = w_m H_hat^+ H_hat_m`.
///
/// Oracle path: materializes p_eff x p_eff matrices, so it is capped and
/// meant for tests and small models. Sketch weights must already hold
/// `N_m / N`.
pub fn fipa_weights_dense(sketches: &[FisherSketch]) -> Result<Vec<Matrix>> {
    if sketches.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let p = sketches[0].dim();
    if sketches.iter().any(|s| s.dim() != p) {
        return Err(Error::DimensionMismatch("sketch dims differ".into()));
    }
    if p > DENSE_CAP {
        return Err(Error::DenseCapExceeded { p, cap: DENSE_CAP });
    }
    let mut h = Matrix::zeros(p, p);
    for s in sketches {
        for k in 0..s.rank() {
            let col = s.basis.col(k);
            h.rank_one_update(s.weight * s.values[k], &col, &col);
        }
    }
    h.symmetrize();
    // columns of B_m = w_m H^+ (H_m e_j)
    let mut weights = Vec::with_capacity(sketches.len());
    for s in sketches {
        let mut bm = Matrix::zeros(p, p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let hm_e = s.apply(&e);
            let col = pinv_apply(&h, &hm_e)?;
            for i in 0..p {
                bm.set(i, j, s.weight * col[i]);
            }
        }
        weights.push(bm);
    }
    Ok(weights)
}

/// Dense Fisher-informed aggregation:
/// `theta + gamma * (H_hat + beta I)^{-1} b`, with the Moore-Penrose
/// pseudoinverse when `beta = 0`.
pub fn fipa_aggregate_dense(
    theta: &ParamVector,
    updates: &[ClientUpdate],
    cfg: &ServerConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    let order = sorted_indices(updates)?;
    let (h, b) = merged_dense_system(theta, updates, &order)?;
    let x_eff = if cfg.beta_reg > 0.0 {
        solve_regularized(&h, cfg.beta_reg, &b)?
    } else {
        // b lies in range(H_hat) by construction; pinv returns the
        // minimum-norm solution.
        pinv_apply(&h, &b)?
    };
    let mut step = theta.scatter(&x_eff);
    vec_ops::scale(cfg.gamma, &mut step);
    let mut out = theta.clone();
    out.add_masked(&step);
    Ok(out)
}

/// Condition estimate of the SPD matrix `K` via a few rounds of power and
/// inverse-power iteration; deterministic start vector.
fn spd_condition_estimate(k: &Matrix, beta: f64) -> f64 {
    let n = k.rows();
    if n == 0 {
        return 1.0;
    }
    let mut shifted = k.clone();
    shifted.add_scaled_identity(beta);
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lmax = 0.0;
    for _ in 0..20 {
        let w = shifted.matvec(&v);
        lmax = vec_ops::norm2(&w);
        if lmax == 0.0 {
            return 1.0;
        }
        v = w;
        vec_ops::scale(1.0 / lmax, &mut v);
    }
    // beta > 0 bounds the smallest eigenvalue away from zero.
    let mut u = vec![1.0 / (n as f64).sqrt(); n];
    let mut lmin = beta.max(f64::MIN_POSITIVE);
    for _ in 0..20 {
        match solve_regularized(k, beta, &u) {
            Ok(w) => {
                let norm = vec_ops::norm2(&w);
                if norm == 0.0 {
                    break;
                }
                lmin = 1.0 / norm;
                u = w;
                vec_ops::scale(1.0 / norm, &mut u);
            }
            Err(_) => break,
        }
    }
    lmax / lmin
}

/// Scalable Fisher-informed aggregation in the stacked sketch subspace.
///
/// Merges the client bases `V = [U_1 ... U_M]`, takes a thin QR, solves the
/// shifted reduced system, and adds the orthogonal-complement correction
/// `(1/beta)(I - Q Q^T) b` so the result equals `(H_hat + beta I)^{-1} b`
/// exactly.
pub fn fipa_aggregate_qr(
    theta: &ParamVector,
    updates: &[ClientUpdate],
    cfg: &ServerConfig,
) -> Result<(ParamVector, SolveDiagnostics)> {
    cfg.validate()?;
    if cfg.rule == AggregationRule::FipaQr && cfg.beta_reg <= 0.0 {
        return Err(Error::InvalidArgument(
            "QR aggregation needs beta_reg > 0".into(),
        ));
    }
    let order = sorted_indices(updates)?;
    let p_eff = theta.len_eff();
    let n = total_samples(updates);

    // Stack bases and the block-diagonal weighted spectra; drop clients
    // whose sketch came back empty.
    let mut bases: Vec<&Matrix> = Vec::new();
    let mut sigma: Vec<f64> = Vec::new();
    let mut b = vec![0.0; p_eff];
    for &i in &order {
        let u = &updates[i];
        let sk = u.sketch.as_ref().ok_or(Error::MissingSketch("fipa_qr"))?;
        if sk.dim() != p_eff {
            return Err(Error::DimensionMismatch(
                "sketch dimension vs trainable subspace".into(),
            ));
        }
        if sk.rank() == 0 {
            continue;
        }
        let w = u.n_samples as f64 / n;
        let d_eff = theta.gather(&u.delta);
        let mut coeff = sk.basis.matvec_t(&d_eff);
        for (c, &l) in coeff.iter_mut().zip(&sk.values) {
            *c *= l;
        }
        let bu = sk.basis.matvec(&coeff);
        vec_ops::axpy(w, &bu, &mut b);
        for &l in &sk.values {
            sigma.push(w * l);
        }
        bases.push(&sk.basis);
    }

    let r_tot: usize = sigma.len();
    if r_tot == 0 {
        // Degenerate round: nothing informative arrived; average instead
        // and record the fallback.
        let out = fedavg_aggregate(theta, updates)?;
        return Ok((
            out,
            SolveDiagnostics {
                fedavg_fallback: true,
                ..Default::default()
            },
        ));
    }
    if r_tot > STACKED_RANK_CAP {
        return Err(Error::StackedRankExceeded {
            r_tot,
            cap: STACKED_RANK_CAP,
        });
    }

    let v = Matrix::hcat(&bases);
    let f = qr_thin(&v)?;
    // K = R Sigma R^T
    let mut r_sigma = f.r.clone();
    for j in 0..r_tot {
        for i in 0..r_tot {
            r_sigma.set(i, j, r_sigma.get(i, j) * sigma[j]);
        }
    }
    let mut k = r_sigma.matmul(&f.r.transpose());
    k.symmetrize();

    let qt_b = f.q.matvec_t(&b);
    let z = solve_regularized(&k, cfg.beta_reg, &qt_b)?;

    // x = Q z + (1/beta)(b - Q Q^T b)
    let mut x = f.q.matvec(&z);
    let q_qtb = f.q.matvec(&qt_b);
    let b_norm = vec_ops::norm2(&b);
    let mut off_norm2 = 0.0;
    for i in 0..p_eff {
        let off = b[i] - q_qtb[i];
        off_norm2 += off * off;
        x[i] += off / cfg.beta_reg;
    }

    let diag = SolveDiagnostics {
        r_tot,
        condition_estimate: spd_condition_estimate(&k, cfg.beta_reg),
        off_subspace_fraction: if b_norm > 0.0 {
            off_norm2.sqrt() / b_norm
        } else {
            0.0
        },
        fedavg_fallback: false,
    };

    let mut step = theta.scatter(&x);
    vec_ops::scale(cfg.gamma, &mut step);
    let mut out = theta.clone();
    out.add_masked(&step);
    Ok((out, diag))
}

/// Dispatch on the configured rule; FedAvg reports no solve diagnostics.
pub fn aggregate(
    theta: &ParamVector,
    updates: &[ClientUpdate],
    cfg: &ServerConfig,
) -> Result<(ParamVector, Option<SolveDiagnostics>)> {
    match cfg.rule {
        AggregationRule::FedAvg => Ok((fedavg_aggregate(theta, updates)?, None)),
        AggregationRule::FipaDense => {
            // An all-empty sketch round degenerates the same way as on the
            // QR path.
            let all_empty = updates
                .iter()
                .all(|u| u.sketch.as_ref().map_or(false, |s| s.rank() == 0));
            if all_empty {
                let out = fedavg_aggregate(theta, updates)?;
                return Ok((
                    out,
                    Some(SolveDiagnostics {
                        fedavg_fallback: true,
                        ..Default::default()
                    }),
                ));
            }
            let out = fipa_aggregate_dense(theta, updates, cfg)?;
            let r_tot = updates
                .iter()
                .map(|u| u.sketch.as_ref().map_or(0, |s| s.rank()))
                .sum();
            Ok((
                out,
                Some(SolveDiagnostics {
                    r_tot,
                    ..Default::default()
                }),
            ))
        }
        AggregationRule::FipaQr => {
            let (out, diag) = fipa_aggregate_qr(theta, updates, cfg)?;
            Ok((out, Some(diag)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::exact_sketch;
    use crate::curvature::{CurvatureSource, FisherSketch};
    use crate::linalg::sym_eig;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn plain_theta(p: usize) -> ParamVector {
        ParamVector::new(vec![0.5; p])
    }

    fn update(id: usize, n: usize, delta: Vec<f64>, sketch: Option<FisherSketch>) -> ClientUpdate {
        let p = delta.len();
        ClientUpdate::new(id, n, delta, sketch, p)
    }

    /// Random PSD sketch with the given spectrum, via QR of a seeded
    /// Gaussian block.
    fn random_sketch(p: usize, values: Vec<f64>, seed: u64) -> FisherSketch {
        let mut rng = crate::rng::stream(seed, &[1234]);
        let mut m = Matrix::zeros(p, values.len());
        for i in 0..p {
            for j in 0..values.len() {
                m.set(i, j, rng.sample::<f64, _>(StandardNormal));
            }
        }
        let q = qr_thin(&m).unwrap().q;
        FisherSketch {
            basis: q,
            values,
            weight: 1.0,
        }
    }

    #[test]
    fn fedavg_single_client() {
        let theta = plain_theta(3);
        let updates = vec![update(0, 10, vec![1.0, -2.0, 0.5], None)];
        let out = fedavg_aggregate(&theta, &updates).unwrap();
        assert_eq!(out.values, vec![1.5, -1.5, 1.0]);
    }

    #[test]
    fn fedavg_equal_opposite_cancels() {
        let theta = plain_theta(2);
        let updates = vec![
            update(0, 5, vec![0.7, -0.3], None),
            update(1, 5, vec![-0.7, 0.3], None),
        ];
        let out = fedavg_aggregate(&theta, &updates).unwrap();
        assert_eq!(out.values, theta.values);
    }

    #[test]
    fn fedavg_weighted_mean() {
        let theta = ParamVector::new(vec![0.0]);
        let updates = vec![
            update(0, 1, vec![4.0], None),
            update(1, 3, vec![0.0], None),
        ];
        let out = fedavg_aggregate(&theta, &updates).unwrap();
        assert!((out.values[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fedavg_is_permutation_invariant() {
        let theta = plain_theta(4);
        let a = update(0, 2, vec![0.1, 0.2, 0.3, 0.4], None);
        let b = update(1, 5, vec![-0.9, 0.1, 0.0, 2.0], None);
        let c = update(2, 3, vec![0.01, -0.4, 1.3, -0.2], None);
        let fwd = fedavg_aggregate(&theta, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let rev = fedavg_aggregate(&theta, &[c, a, b]).unwrap();
        assert_eq!(fwd.values, rev.values); // bit-identical
    }

    #[test]
    fn single_full_rank_client_weight_is_identity() {
        let p = 4;
        let mut sk = random_sketch(p, vec![3.0, 2.0, 1.5, 0.5], 3);
        sk.weight = 1.0;
        let weights = fipa_weights_dense(&[sk]).unwrap();
        let id = Matrix::identity(p);
        let mut err = 0.0_f64;
        for (a, b) in weights[0].data().iter().zip(id.data()) {
            err = err.max((a - b).abs());
        }
        assert!(err < 1e-10, "B_1 vs identity: {err}");
    }

    #[test]
    fn identical_sketches_split_the_projector() {
        let p = 5;
        let mut sk = random_sketch(p, vec![2.0, 1.0], 8);
        sk.weight = 0.5;
        let weights = fipa_weights_dense(&[sk.clone(), sk.clone()]).unwrap();
        // each B_m = 0.5 * projector onto range(H_hat)
        let proj = {
            let h = {
                let mut h = Matrix::zeros(p, p);
                for k in 0..sk.rank() {
                    let col = sk.basis.col(k);
                    h.rank_one_update(sk.values[k], &col, &col);
                }
                h
            };
            let e = sym_eig(&h).unwrap();
            let mut pmat = Matrix::zeros(p, p);
            for k in 0..p {
                if e.values[k] > 1e-10 * e.values[0] {
                    let col = e.vectors.col(k);
                    pmat.rank_one_update(1.0, &col, &col);
                }
            }
            pmat
        };
        for m in 0..2 {
            for (a, b) in weights[m].data().iter().zip(proj.data()) {
                assert!((a - 0.5 * b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weight_sum_is_projector() {
        let p = 6;
        let mut s1 = random_sketch(p, vec![4.0, 1.0], 21);
        let mut s2 = random_sketch(p, vec![2.5, 0.7, 0.1], 22);
        s1.weight = 0.4;
        s2.weight = 0.6;
        let weights = fipa_weights_dense(&[s1.clone(), s2.clone()]).unwrap();
        let mut sum = Matrix::zeros(p, p);
        for w in &weights {
            for i in 0..p {
                for j in 0..p {
                    sum.set(i, j, sum.get(i, j) + w.get(i, j));
                }
            }
        }
        // H_hat^+ H_hat: projector onto range(H_hat)
        let mut h = Matrix::zeros(p, p);
        for s in [&s1, &s2] {
            for k in 0..s.rank() {
                let col = s.basis.col(k);
                h.rank_one_update(s.weight * s.values[k], &col, &col);
            }
        }
        let e = sym_eig(&h).unwrap();
        let mut proj = Matrix::zeros(p, p);
        for k in 0..p {
            if e.values[k] > 1e-10 * e.values[0] {
                let col = e.vectors.col(k);
                proj.rank_one_update(1.0, &col, &col);
            }
        }
        let mut err = 0.0_f64;
        for (a, b) in sum.data().iter().zip(proj.data()) {
            err += (a - b) * (a - b);
        }
        assert!(err.sqrt() <= 1e-8, "projector identity error {}", err.sqrt());
    }

    #[test]
    fn scaling_every_spectrum_leaves_weights_unchanged() {
        let p = 5;
        let mut s1 = random_sketch(p, vec![3.0, 0.5], 31);
        let mut s2 = random_sketch(p, vec![1.2, 0.9], 32);
        s1.weight = 0.5;
        s2.weight = 0.5;
        let w_base = fipa_weights_dense(&[s1.clone(), s2.clone()]).unwrap();
        let c = 7.3;
        let mut s1c = s1.clone();
        let mut s2c = s2.clone();
        for v in s1c.values.iter_mut().chain(s2c.values.iter_mut()) {
            *v *= c;
        }
        let w_scaled = fipa_weights_dense(&[s1c, s2c]).unwrap();
        for (wb, ws) in w_base.iter().zip(&w_scaled) {
            for (a, b) in wb.data().iter().zip(ws.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_aggregate_trivial_cases() {
        let p = 4;
        let theta = plain_theta(p);
        let sk = random_sketch(p, vec![2.0, 1.0, 0.5, 0.25], 40);
        // all deltas zero -> theta unchanged
        let ups = vec![update(0, 3, vec![0.0; p], Some(sk.clone()))];
        let cfg = ServerConfig {
            rule: AggregationRule::FipaDense,
            beta_reg: 0.0,
            gamma: 1.0,
        };
        let out = fipa_aggregate_dense(&theta, &ups, &cfg).unwrap();
        assert_eq!(out.values, theta.values);

        // single full-rank client -> theta + gamma * delta
        let delta = vec![0.3, -0.2, 0.05, 0.6];
        let ups = vec![update(0, 3, delta.clone(), Some(sk))];
        let cfg = ServerConfig {
            rule: AggregationRule::FipaDense,
            beta_reg: 0.0,
            gamma: 0.7,
        };
        let out = fipa_aggregate_dense(&theta, &ups, &cfg).unwrap();
        for i in 0..p {
            assert!(
                (out.values[i] - (theta.values[i] + 0.7 * delta[i])).abs() < 1e-9,
                "coordinate {i}"
            );
        }
    }

    #[test]
    fn gn_consistency_of_dense_aggregation() {
        // Exact local quadratic solves aggregate to the centralized GN
        // step: p = 6, M = 2, full-rank curvatures.
        let p = 6;
        let theta = plain_theta(p);
        let mut rng = crate::rng::stream(99, &[7]);
        let mut updates = Vec::new();
        let mut h_bar = Matrix::zeros(p, p);
        let mut g_bar = vec![0.0; p];
        let n_m = [40.0, 60.0];
        for m in 0..2 {
            // J with more rows than columns -> full-rank H_m
            let rows = 12;
            let mut j = Matrix::zeros(rows, p);
            for i in 0..rows {
                for k in 0..p {
                    j.set(i, k, rng.sample::<f64, _>(StandardNormal));
                }
            }
            let xi: Vec<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut h = j.matmul_tn(&j);
            h.symmetrize();
            let g = j.matvec_t(&xi);
            let w = n_m[m] / 100.0;
            for i in 0..p {
                for k in 0..p {
                    h_bar.set(i, k, h_bar.get(i, k) + w * h.get(i, k));
                }
            }
            vec_ops::axpy(w, &g, &mut g_bar);
            // exact local GN solve
            let delta = {
                let mut d = pinv_apply(&h, &g).unwrap();
                vec_ops::scale(-1.0, &mut d);
                d
            };
            // full-spectrum sketch of H_m
            let e = sym_eig(&h).unwrap();
            let sk = FisherSketch {
                basis: e.vectors.clone(),
                values: e.values.clone(),
                weight: w,
            };
            updates.push(update(m, n_m[m] as usize, delta, Some(sk)));
        }
        let cfg = ServerConfig {
            rule: AggregationRule::FipaDense,
            beta_reg: 0.0,
            gamma: 1.0,
        };
        let out = fipa_aggregate_dense(&theta, &updates, &cfg).unwrap();
        let gn_step = pinv_apply(&h_bar, &g_bar).unwrap();
        for i in 0..p {
            let want = theta.values[i] - gn_step[i];
            assert!(
                (out.values[i] - want).abs() < 1e-8,
                "coordinate {i}: {} vs {}",
                out.values[i],
                want
            );
        }
    }

    #[test]
    fn qr_path_matches_dense_path() {
        let p = 30;
        let theta = plain_theta(p);
        let mut rng = crate::rng::stream(5, &[55]);
        for trial in 0..10 {
            let beta = if trial % 2 == 0 { 1e-4 } else { 1e-2 };
            let m = 2 + trial % 3;
            let mut updates = Vec::new();
            for id in 0..m {
                let r = 2 + (trial + id) % 4;
                let values: Vec<f64> = (0..r)
                    .map(|k| (2.0 + rng.gen::<f64>()) / (k + 1) as f64)
                    .collect();
                let sk = random_sketch(p, values, 1000 + (trial * 10 + id) as u64);
                let delta: Vec<f64> =
                    (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                updates.push(update(id, 10 * (id + 1), delta, Some(sk)));
            }
            let dense_cfg = ServerConfig {
                rule: AggregationRule::FipaDense,
                beta_reg: beta,
                gamma: 1.0,
            };
            let qr_cfg = ServerConfig {
                rule: AggregationRule::FipaQr,
                beta_reg: beta,
                gamma: 1.0,
            };
            let dense = fipa_aggregate_dense(&theta, &updates, &dense_cfg).unwrap();
            let (qr, diag) = fipa_aggregate_qr(&theta, &updates, &qr_cfg).unwrap();
            let denom = vec_ops::norm2(&dense.values);
            let err = vec_ops::dist(&dense.values, &qr.values) / denom;
            assert!(err <= 1e-8, "trial {trial}: dense/qr mismatch {err}");
            assert!(diag.r_tot > 0);
            assert!(diag.condition_estimate >= 1.0);
        }
    }

    #[test]
    fn qr_path_large_beta_asymptote() {
        let p = 12;
        let theta = plain_theta(p);
        let mut rng = crate::rng::stream(6, &[56]);
        let sk = random_sketch(p, vec![3.0, 1.0, 0.4], 77);
        let delta: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let updates = vec![update(0, 10, delta, Some(sk.clone()))];
        let beta = 1e9;
        let cfg = ServerConfig {
            rule: AggregationRule::FipaQr,
            beta_reg: beta,
            gamma: 1.0,
        };
        let (out, _) = fipa_aggregate_qr(&theta, &updates, &cfg).unwrap();
        // update ~ theta + b / beta
        let b = sk.apply(&updates[0].delta);
        for i in 0..p {
            let want = theta.values[i] + b[i] / beta;
            let denom = want.abs().max(1e-12);
            assert!(
                ((out.values[i] - want) / denom).abs() < 1e-6,
                "coordinate {i}"
            );
        }
    }

    #[test]
    fn qr_path_shared_basis_hand_check() {
        // Both clients share one rank-2 basis; K reduces to the weighted
        // spectra in that basis, solvable by hand.
        let p = 6;
        let theta = ParamVector::new(vec![0.0; p]);
        let basis = {
            let mut m = Matrix::zeros(p, 2);
            m.set(0, 0, 1.0);
            m.set(1, 1, 1.0);
            m
        };
        let s1 = FisherSketch {
            basis: basis.clone(),
            values: vec![2.0, 1.0],
            weight: 0.5,
        };
        let s2 = FisherSketch {
            basis: basis.clone(),
            values: vec![4.0, 3.0],
            weight: 0.5,
        };
        let d1 = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let d2 = vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let beta = 0.5;
        let updates = vec![
            update(0, 1, d1, Some(s1)),
            update(1, 1, d2, Some(s2)),
        ];
        let cfg = ServerConfig {
            rule: AggregationRule::FipaQr,
            beta_reg: beta,
            gamma: 1.0,
        };
        let (out, diag) = fipa_aggregate_qr(&theta, &updates, &cfg).unwrap();
        // b = 0.5*(2*1) e0 + 0.5*(1*1) e1 + 0.5*(4*0) e0 + 0.5*(3*2) e1
        //   = [1.0, 3.5]
        // H_hat = diag(3, 2) on span{e0, e1}
        // x = [(1.0)/(3+beta), (3.5)/(2+beta)] = [1/3.5, 3.5/2.5]
        assert!((out.values[0] - 1.0 / 3.5).abs() < 1e-12);
        assert!((out.values[1] - 1.4).abs() < 1e-12);
        for i in 2..p {
            assert_eq!(out.values[i], 0.0);
        }
        assert_eq!(diag.r_tot, 4);
        assert!(diag.off_subspace_fraction < 1e-12);
    }

    #[test]
    fn masked_coordinates_survive_every_rule() {
        let spec = crate::model::MlpSpec::new(vec![1, 3, 1], crate::model::Activation::Tanh)
            .unwrap();
        let init = crate::model::init_params(&spec, 3);
        let mask = spec.last_layer_mask();
        let theta = ParamVector::with_mask(init.values.clone(), mask.clone()).unwrap();
        let frozen: Vec<f64> = theta
            .values
            .iter()
            .zip(&mask)
            .filter_map(|(&v, &m)| (!m).then_some(v))
            .collect();

        let data = crate::model::DataSet {
            inputs: vec![vec![0.2], vec![0.8]],
            targets: crate::model::Targets::Values(vec![vec![0.1], vec![0.9]]),
        };
        let src = crate::curvature::DataCurvature::new(
            &spec,
            &theta,
            &data,
            crate::model::LossKind::Mse,
        )
        .unwrap();
        let sk = exact_sketch(&src).unwrap();
        assert_eq!(sk.dim(), theta.len_eff());
        let mut delta = vec![0.0; theta.len()];
        let step = theta.scatter(&vec![0.1; theta.len_eff()]);
        vec_ops::axpy(1.0, &step, &mut delta);
        let updates = vec![update(0, 2, delta, Some(sk))];

        for rule in [AggregationRule::FedAvg, AggregationRule::FipaDense, AggregationRule::FipaQr]
        {
            let cfg = ServerConfig {
                rule,
                beta_reg: if rule == AggregationRule::FipaQr { 1e-4 } else { 0.0 },
                gamma: 1.0,
            };
            let (out, _) = aggregate(&theta, &updates, &cfg).unwrap();
            let after: Vec<f64> = out
                .values
                .iter()
                .zip(&mask)
                .filter_map(|(&v, &m)| (!m).then_some(v))
                .collect();
            assert_eq!(frozen, after, "rule {:?} touched masked params", rule);
        }
    }

    #[test]
    fn all_empty_sketches_fall_back_to_fedavg() {
        let p = 3;
        let theta = plain_theta(p);
        let empty = FisherSketch {
            basis: Matrix::zeros(p, 0),
            values: vec![],
            weight: 1.0,
        };
        let updates = vec![update(0, 2, vec![0.5, 0.5, 0.5], Some(empty))];
        let cfg = ServerConfig {
            rule: AggregationRule::FipaQr,
            beta_reg: 1e-3,
            gamma: 1.0,
        };
        let (out, diag) = fipa_aggregate_qr(&theta, &updates, &cfg).unwrap();
        assert!(diag.fedavg_fallback);
        let fedavg = fedavg_aggregate(&theta, &updates).unwrap();
        assert_eq!(out.values, fedavg.values);
    }

    #[test]
    fn qr_requires_positive_beta() {
        let cfg = ServerConfig {
            rule: AggregationRule::FipaQr,
            beta_reg: 0.0,
            gamma: 1.0,
        };
        assert!(cfg.validate().is_err());
    }
}
