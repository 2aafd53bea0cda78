//! Centralized damped Gauss-Newton reference: the map
//! `T(theta) = theta - gamma H^{-1} g` with `H = J^T J` and `g = J^T xi`
//! over the stacked residual of a least-squares problem, plus the
//! empirical convergence diagnostics built on it (contraction rate,
//! trajectory gap, single-round deviation).

use crate::curvature::PdeResidual;
use crate::error::{Error, Result};
use crate::linalg::{solve_regularized, vec_ops, Matrix};
use crate::model::{self, DataSet, MlpSpec, ParamVector, Targets};
use crate::problems::{PdeProblem, Problem};

/// Centralized least-squares view of a problem: all residual rows in one
/// place, in the trainable subspace.
pub struct GnSystem<'a> {
    spec: &'a MlpSpec,
    residuals: ResidualSet<'a>,
}

enum ResidualSet<'a> {
    Supervised {
        data: &'a DataSet,
    },
    Pde {
        problem: &'a PdeProblem,
        interior: &'a [Vec<f64>],
        boundary: &'a [Vec<f64>],
        beta_bc: f64,
    },
}

/// One point of the reference trajectory.
#[derive(Debug, Clone)]
pub struct GnState {
    pub theta: ParamVector,
    /// `||xi||^2 / (2N)` at this iterate.
    pub train_loss: f64,
    /// Problem test metric at this iterate, when a problem evaluator was
    /// attached.
    pub test_metric: Option<f64>,
    /// Set when the normal matrix was numerically singular and the step
    /// fell back to the pseudoinverse.
    pub near_singular: bool,
}

impl<'a> GnSystem<'a> {
    /// Regression least squares over the pooled dataset.
    pub fn supervised(spec: &'a MlpSpec, data: &'a DataSet) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !matches!(data.targets, Targets::Values(_)) {
            return Err(Error::Unsupported(
                "the Gauss-Newton reference needs a residual structure; classification has none",
            ));
        }
        Ok(GnSystem {
            spec,
            residuals: ResidualSet::Supervised { data },
        })
    }

    /// PDE least squares: interior residual rows plus sqrt(beta)-scaled
    /// boundary rows over the pooled collocation points.
    pub fn pde(
        spec: &'a MlpSpec,
        problem: &'a PdeProblem,
        interior: &'a [Vec<f64>],
        boundary: &'a [Vec<f64>],
    ) -> Result<Self> {
        if interior.is_empty() || boundary.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(GnSystem {
            spec,
            residuals: ResidualSet::Pde {
                problem,
                interior,
                boundary,
                beta_bc: problem.beta_bc,
            },
        })
    }

    fn residual_count(&self) -> usize {
        match &self.residuals {
            ResidualSet::Supervised { data } => data.len() * self.spec.output_dim(),
            ResidualSet::Pde {
                interior, boundary, ..
            } => interior.len() + boundary.len(),
        }
    }

    /// Visit every residual row (gathered to the trainable subspace) with
    /// its value.
    fn for_each_residual(
        &self,
        theta: &ParamVector,
        mut visit: impl FnMut(&[f64], f64),
    ) -> Result<()> {
        let p = self.spec.param_count();
        match &self.residuals {
            ResidualSet::Supervised { data } => {
                let c = self.spec.output_dim();
                let mut seed = vec![0.0; c];
                for (i, x) in data.inputs.iter().enumerate() {
                    let acts = model::forward_cached(self.spec, &theta.values, x);
                    let z = acts.last().unwrap().clone();
                    let y = match &data.targets {
                        Targets::Values(v) => &v[i],
                        _ => unreachable!(),
                    };
                    for r in 0..c {
                        let mut row = vec![0.0; p];
                        seed[r] = 1.0;
                        model::backprop_into(self.spec, &theta.values, &acts, &seed, &mut row);
                        seed[r] = 0.0;
                        let row_eff = theta.gather(&row);
                        visit(&row_eff, z[r] - y[r]);
                    }
                }
            }
            ResidualSet::Pde {
                problem,
                interior,
                boundary,
                beta_bc,
            } => {
                let sq = beta_bc.sqrt();
                for x in interior.iter() {
                    let g = model::laplacian_with_grads(self.spec, theta, x)?;
                    let gp = problem.nonlinearity_prime(g.u);
                    let full: Vec<f64> = g
                        .grad_lap
                        .iter()
                        .zip(&g.grad_u)
                        .map(|(&gl, &gu)| -gl + gp * gu)
                        .collect();
                    let row_eff = theta.gather(&full);
                    visit(&row_eff, problem.interior_residual(x, g.u, g.lap));
                }
                for x in boundary.iter() {
                    let acts = model::forward_cached(self.spec, &theta.values, x);
                    let u = acts.last().unwrap()[0];
                    let mut row = vec![0.0; p];
                    model::backprop_into(self.spec, &theta.values, &acts, &[1.0], &mut row);
                    let mut row_eff = theta.gather(&row);
                    vec_ops::scale(sq, &mut row_eff);
                    visit(&row_eff, sq * (u - problem.dirichlet(x)));
                }
            }
        }
        Ok(())
    }

    /// Normal matrix `H = J^T J`, gradient `g = J^T xi`, and the stacked
    /// residual norm, all in the trainable subspace.
    pub fn normal_system(&self, theta: &ParamVector) -> Result<(Matrix, Vec<f64>, f64)> {
        let d = theta.len_eff();
        let mut h = Matrix::zeros(d, d);
        let mut g = vec![0.0; d];
        let mut xi2 = 0.0;
        self.for_each_residual(theta, |row, value| {
            h.rank_one_update(1.0, row, row);
            vec_ops::axpy(value, row, &mut g);
            xi2 += value * value;
        })?;
        h.symmetrize();
        Ok((h, g, xi2))
    }

    /// `||xi||^2 / (2N)`
    pub fn train_loss(&self, theta: &ParamVector) -> Result<f64> {
        let mut xi2 = 0.0;
        self.for_each_residual(theta, |_, value| {
            xi2 += value * value;
        })?;
        Ok(0.5 * xi2 / self.residual_count() as f64)
    }
}

/// Apply one damped Gauss-Newton step `theta - gamma H^{-1} g`.
///
/// Near-singular normal matrices fall back to the pseudoinverse with the
/// linalg cutoff; the flag in the returned state reports it.
pub fn gn_step(sys: &GnSystem, theta: &ParamVector, gamma: f64) -> Result<GnState> {
    let (h, g, xi2) = sys.normal_system(theta)?;
    let (dir, near_singular) = match solve_regularized(&h, 0.0, &g) {
        Ok(x) => (x, false),
        Err(Error::InconsistentSystem { .. }) => {
            // g = J^T xi is always in range(J^T J) in exact arithmetic; a
            // failed range check means severe rounding, so take the
            // pseudoinverse direction anyway and flag it.
            (crate::linalg::pinv_apply(&h, &g)?, true)
        }
        Err(e) => return Err(e),
    };
    let mut step = theta.scatter(&dir);
    vec_ops::scale(-gamma, &mut step);
    let mut next = theta.clone();
    next.add_masked(&step);
    Ok(GnState {
        theta: next,
        train_loss: 0.5 * xi2 / sys.residual_count() as f64,
        test_metric: None,
        near_singular,
    })
}

/// Iterate the damped map `k` times from `theta0`; states carry the loss
/// at their own iterate, and optionally the problem metric.
pub fn gn_trajectory(
    sys: &GnSystem,
    problem: Option<&Problem>,
    theta0: &ParamVector,
    gamma: f64,
    rounds: usize,
) -> Result<Vec<GnState>> {
    if rounds < 1 {
        return Err(Error::InvalidArgument("need at least one round".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument("gamma must lie in (0, 1]".into()));
    }
    let mut states = Vec::with_capacity(rounds + 1);
    let metric = |theta: &ParamVector| -> Result<Option<f64>> {
        problem
            .map(|p| p.eval_metric(sys.spec, theta))
            .transpose()
    };
    states.push(GnState {
        theta: theta0.clone(),
        train_loss: sys.train_loss(theta0)?,
        test_metric: metric(theta0)?,
        near_singular: false,
    });
    for _ in 0..rounds {
        let prev = states.last().unwrap();
        let mut next = gn_step(sys, &prev.theta, gamma)?;
        next.train_loss = sys.train_loss(&next.theta)?;
        next.test_metric = metric(&next.theta)?;
        states.push(next);
    }
    Ok(states)
}

/// Contraction-rate estimate from a positive error (or loss) history:
/// least-squares slope of `log e_k` over the tail half, returned as
/// `exp(slope)`.
pub fn contraction_estimate(history: &[f64]) -> Result<f64> {
    if history.len() < 3 {
        return Err(Error::InvalidArgument(
            "contraction estimate needs at least 3 points".into(),
        ));
    }
    let start = (history.len() / 2).min(history.len() - 2);
    let window = &history[start..];
    if window.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "tail window contains non-positive values".into(),
        ));
    }
    let n = window.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (k, &e) in window.iter().enumerate() {
        let x = k as f64;
        let y = e.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(slope.exp())
}

/// Per-round gap between a federated trajectory and the reference, plus
/// the single-round deviation of the federated map from the reference map.
#[derive(Debug, Clone, Copy)]
pub struct GapPoint {
    pub round: usize,
    /// `e_k = ||theta_fed^k - theta_gn^k||`
    pub gap: f64,
    /// `delta_k = ||theta_fed^{k+1} - T(theta_fed^k)||`; absent on the
    /// final round.
    pub deviation: Option<f64>,
}

/// Diagnostics for a pair of trajectories that share their starting point.
pub fn gap_diagnostics(
    sys: &GnSystem,
    fed: &[ParamVector],
    gn: &[GnState],
    gamma: f64,
) -> Result<Vec<GapPoint>> {
    if fed.len() != gn.len() {
        return Err(Error::DimensionMismatch(format!(
            "federated trajectory has {} points, reference {}",
            fed.len(),
            gn.len()
        )));
    }
    if fed.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(fed.len());
    for k in 0..fed.len() {
        let gap = vec_ops::dist(&fed[k].values, &gn[k].theta.values);
        let deviation = if k + 1 < fed.len() {
            let mapped = gn_step(sys, &fed[k], gamma)?;
            Some(vec_ops::dist(&fed[k + 1].values, &mapped.theta.values))
        } else {
            None
        };
        out.push(GapPoint {
            round: k,
            gap,
            deviation,
        });
    }
    Ok(out)
}
