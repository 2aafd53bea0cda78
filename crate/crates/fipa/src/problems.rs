//! Task definitions and evaluators: 1D/2D regression targets, elliptic PDE
//! problems with manufactured solutions, synthetic non-IID classification,
//! and the per-kind test metrics.
//!
//! Every PDE here carries an analytic exact solution; the right-hand side
//! is manufactured so the interior residual of that solution vanishes
//! identically, which makes each problem self-verifying.

use crate::curvature::PdeResidual;
use crate::error::{Error, Result};
use crate::linalg::vec_ops;
use crate::model::{self, DataSet, LossKind, MlpSpec, ParamVector, Targets};
use crate::rng::{self, label};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Axis-aligned box, the subdomain unit handed to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn unit_cube(dim: usize) -> Region {
        Region {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| v >= lo - 1e-12 && v <= hi + 1e-12)
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo })
            .collect()
    }
}

/// One isotropic Gaussian bump of a mixture target.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub center: Vec<f64>,
    pub sigma: f64,
}

/// Mixture-of-Gaussians target on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureSpec {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixtureSpec {
    /// Six random components with centers in the unit square; the usual
    /// multimodal benchmark surface.
    pub fn random(seed: u64) -> GaussianMixtureSpec {
        let mut rng = rng::stream(seed, &[label::PROBLEM, 1]);
        let components = (0..6)
            .map(|_| GaussianComponent {
                weight: rng.gen_range(0.4..1.0),
                center: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                sigma: rng.gen_range(0.05..0.25),
            })
            .collect();
        GaussianMixtureSpec { components }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.iter().any(|c| c.sigma <= 0.0) {
            return Err(Error::InvalidArgument("sigma must be > 0".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let d2: f64 = x
                    .iter()
                    .zip(&c.center)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                c.weight * (-d2 / (2.0 * c.sigma * c.sigma)).exp()
            })
            .sum()
    }
}

/// Nonlinear reaction term of the 1D elliptic family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EllipticKind {
    /// G(u) = (u^3 - u) / eps^2
    AllenCahn { eps: f64 },
    /// G(u) = -lambda e^u
    Bratu { lambda: f64 },
    /// G(u) = -rho u (1 - u)
    Fisher { rho: f64 },
    /// G(u) = kappa u^2
    ReactionDiffusion { kappa: f64 },
}

impl EllipticKind {
    pub fn name(&self) -> &'static str {
        match self {
            EllipticKind::AllenCahn { .. } => "allen_cahn",
            EllipticKind::Bratu { .. } => "bratu",
            EllipticKind::Fisher { .. } => "fisher",
            EllipticKind::ReactionDiffusion { .. } => "reaction_diffusion",
        }
    }

    fn g(&self, u: f64) -> f64 {
        match *self {
            EllipticKind::AllenCahn { eps } => (u * u * u - u) / (eps * eps),
            EllipticKind::Bratu { lambda } => -lambda * u.exp(),
            EllipticKind::Fisher { rho } => -rho * u * (1.0 - u),
            EllipticKind::ReactionDiffusion { kappa } => kappa * u * u,
        }
    }

    fn g_prime(&self, u: f64) -> f64 {
        match *self {
            EllipticKind::AllenCahn { eps } => (3.0 * u * u - 1.0) / (eps * eps),
            EllipticKind::Bratu { lambda } => -lambda * u.exp(),
            EllipticKind::Fisher { rho } => -rho * (1.0 - 2.0 * u),
            EllipticKind::ReactionDiffusion { kappa } => 2.0 * kappa * u,
        }
    }
}

/// Which elliptic problem a PDE task solves.
#[derive(Debug, Clone, PartialEq)]
pub enum PdeKind {
    /// `-lap u = f` on `[0,1]^d` with exact solution `prod_i sin(pi x_i)`.
    Poisson { dim: usize },
    /// 1D `-u'' + G(u) = f` with manufactured solution `sin(pi x)`.
    Elliptic(EllipticKind),
}

/// A PDE task: geometry, reaction term, penalty weight, exact solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    pub kind: PdeKind,
    pub beta_bc: f64,
}

impl PdeProblem {
    pub fn dim(&self) -> usize {
        match &self.kind {
            PdeKind::Poisson { dim } => *dim,
            PdeKind::Elliptic(_) => 1,
        }
    }

    /// Analytic exact solution.
    pub fn exact(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PdeKind::Poisson { .. } => x.iter().map(|&v| (PI * v).sin()).product(),
            PdeKind::Elliptic(_) => (PI * x[0]).sin(),
        }
    }

    /// Analytic Laplacian of the exact solution.
    pub fn exact_laplacian(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PdeKind::Poisson { dim } => -(*dim as f64) * PI * PI * self.exact(x),
            PdeKind::Elliptic(_) => -PI * PI * (PI * x[0]).sin(),
        }
    }

    /// Interior residual of an arbitrary (u, lap) pair at `x`.
    pub fn interior_residual(&self, x: &[f64], u: f64, lap: f64) -> f64 {
        -lap + self.g(u) - self.rhs(x)
    }

    /// Residual of the exact solution, which must vanish; used as a
    /// self-check of the manufactured right-hand side.
    pub fn manufactured_residual(&self, x: &[f64]) -> f64 {
        self.interior_residual(x, self.exact(x), self.exact_laplacian(x))
    }
}

impl PdeResidual for PdeProblem {
    fn nonlinearity(&self, u: f64) -> f64 {
        self.g(u)
    }

    fn nonlinearity_prime(&self, u: f64) -> f64 {
        match &self.kind {
            PdeKind::Poisson { .. } => 0.0,
            PdeKind::Elliptic(k) => k.g_prime(u),
        }
    }

    fn rhs(&self, x: &[f64]) -> f64 {
        match &self.kind {
            // f = d pi^2 prod sin(pi x_i)
            PdeKind::Poisson { dim } => (*dim as f64) * PI * PI * self.exact(x),
            // f = -u*'' + G(u*) = pi^2 sin(pi x) + G(sin(pi x))
            PdeKind::Elliptic(k) => {
                let u = (PI * x[0]).sin();
                PI * PI * u + k.g(u)
            }
        }
    }

    fn dirichlet(&self, x: &[f64]) -> f64 {
        self.exact(x)
    }
}

impl PdeProblem {
    fn g(&self, u: f64) -> f64 {
        match &self.kind {
            PdeKind::Poisson { .. } => 0.0,
            PdeKind::Elliptic(k) => k.g(u),
        }
    }
}

/// Blob-cluster classification data spec.
#[derive(Debug, Clone)]
pub struct ClassificationSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// What a task is, which loss it trains, and how it is scored.
#[derive(Debug, Clone)]
pub enum Problem {
    /// 1D regression of `sin(n pi x)` on `[0,1]` under MSE.
    Sine { n: u32 },
    /// 2D regression of a Gaussian mixture on `[0,1]^2` under MSE.
    GaussianMixture { spec: GaussianMixtureSpec },
    /// Elliptic PDE trained through interior + boundary residuals.
    Pde(PdeProblem),
    /// Softmax classification of Gaussian blobs; holds train and held-out
    /// test splits.
    Classification {
        spec: ClassificationSpec,
        train: DataSet,
        test: DataSet,
    },
}

/// Regression target `u(x) = sin(n pi x)`.
pub fn sine_target(n: u32) -> Result<Problem> {
    if n < 1 {
        return Err(Error::InvalidArgument("frequency multiplier n >= 1".into()));
    }
    Ok(Problem::Sine { n })
}

/// Regression target: the given Gaussian mixture on the unit square.
pub fn gaussian_mixture_target(spec: GaussianMixtureSpec) -> Result<Problem> {
    spec.validate()?;
    Ok(Problem::GaussianMixture { spec })
}

/// d-dimensional Poisson problem with the product-of-sines exact solution.
pub fn poisson_problem(dim: usize, beta_bc: f64) -> Result<Problem> {
    if dim < 1 {
        return Err(Error::InvalidArgument("poisson needs dim >= 1".into()));
    }
    if beta_bc <= 0.0 {
        return Err(Error::InvalidArgument("beta_bc must be > 0".into()));
    }
    Ok(Problem::Pde(PdeProblem {
        kind: PdeKind::Poisson { dim },
        beta_bc,
    }))
}

/// 1D nonlinear elliptic problem with manufactured solution `sin(pi x)`.
pub fn nonlinear_elliptic_problem(kind: EllipticKind, beta_bc: f64) -> Result<Problem> {
    if beta_bc <= 0.0 {
        return Err(Error::InvalidArgument("beta_bc must be > 0".into()));
    }
    Ok(Problem::Pde(PdeProblem {
        kind: PdeKind::Elliptic(kind),
        beta_bc,
    }))
}

fn blob_centers(n_classes: usize, input_dim: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[label::PROBLEM, 2]);
    (0..n_classes)
        .map(|_| {
            let z: Vec<f64> = (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = vec_ops::norm2(&z).max(1e-12);
            z.into_iter().map(|v| v * spread / norm).collect()
        })
        .collect()
}

fn blob_samples(
    centers: &[Vec<f64>],
    n_per_class: usize,
    seed: u64,
    noise_stream: u64,
) -> DataSet {
    let mut rng = rng::stream(seed, &[label::PROBLEM, noise_stream]);
    let mut inputs = Vec::with_capacity(centers.len() * n_per_class);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            inputs.push(x);
            labels.push(c);
        }
    }
    // interleave classes so prefix slices are not single-class
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let inputs = order.iter().map(|&i| inputs[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    DataSet {
        inputs,
        targets: Targets::Labels(labels),
    }
}

/// Gaussian blobs, one per class, centers on a seeded random sphere of
/// radius `spread`, unit isotropic noise.
pub fn synthetic_classification(
    n_classes: usize,
    n_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<DataSet> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let centers = blob_centers(n_classes, input_dim, spread, seed);
    Ok(blob_samples(&centers, n_per_class, seed, 10))
}

/// Classification problem with a held-out test split: same blob centers,
/// an independent noise stream, a quarter of the train size per class.
pub fn classification_problem(spec: ClassificationSpec) -> Result<Problem> {
    if spec.n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let centers = blob_centers(spec.n_classes, spec.input_dim, spec.spread, spec.seed);
    let train = blob_samples(&centers, spec.n_per_class, spec.seed, 10);
    let n_test = (spec.n_per_class / 4).max(8);
    let test = blob_samples(&centers, n_test, spec.seed, 11);
    Ok(Problem::Classification { spec, train, test })
}

impl Problem {
    pub fn name(&self) -> String {
        match self {
            Problem::Sine { n } => format!("sine-{n}"),
            Problem::GaussianMixture { .. } => "gaussian-mixture".into(),
            Problem::Pde(p) => match &p.kind {
                PdeKind::Poisson { dim } => format!("poisson-{dim}d"),
                PdeKind::Elliptic(k) => k.name().into(),
            },
            Problem::Classification { .. } => "classification".into(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Problem::Sine { .. } => 1,
            Problem::GaussianMixture { .. } => 2,
            Problem::Pde(p) => p.dim(),
            Problem::Classification { spec, .. } => spec.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Problem::Classification { spec, .. } => spec.n_classes,
            _ => 1,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            Problem::Classification { .. } => LossKind::SoftmaxCe,
            _ => LossKind::Mse,
        }
    }

    pub fn is_pde(&self) -> bool {
        matches!(self, Problem::Pde(_))
    }

    pub fn pde(&self) -> Option<&PdeProblem> {
        match self {
            Problem::Pde(p) => Some(p),
            _ => None,
        }
    }

    /// Ground-truth regression value; PDE problems expose their exact
    /// solution here too.
    pub fn target(&self, x: &[f64]) -> f64 {
        match self {
            Problem::Sine { n } => (*n as f64 * PI * x[0]).sin(),
            Problem::GaussianMixture { spec } => spec.eval(x),
            Problem::Pde(p) => p.exact(x),
            Problem::Classification { .. } => {
                panic!("classification has no scalar target")
            }
        }
    }

    /// Fixed evaluation grid; deterministic so metric curves are
    /// comparable across methods and runs.
    pub fn test_inputs(&self) -> Vec<Vec<f64>> {
        match self {
            Problem::Sine { .. } => grid_1d(1000),
            Problem::GaussianMixture { .. } => grid_2d(64),
            Problem::Pde(p) => match p.dim() {
                1 => grid_1d(1000),
                2 => grid_2d(64),
                d => {
                    // fixed seeded Monte-Carlo cloud for d >= 3
                    let mut rng = rng::stream(0xd1ce, &[label::PROBLEM, d as u64]);
                    (0..2048)
                        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
                        .collect()
                }
            },
            Problem::Classification { .. } => Vec::new(),
        }
    }

    /// Test metric: MSE for regression, relative L2 error for PDEs,
    /// accuracy for classification.
    pub fn eval_metric(&self, spec: &MlpSpec, theta: &ParamVector) -> Result<f64> {
        match self {
            Problem::Classification { test, .. } => accuracy(spec, theta, test),
            Problem::Pde(_) => {
                let grid = self.test_inputs();
                let mut num = 0.0;
                let mut den = 0.0;
                for x in &grid {
                    let u = model::forward(spec, theta, x)?[0];
                    let t = self.target(x);
                    num += (u - t) * (u - t);
                    den += t * t;
                }
                Ok((num / den.max(1e-300)).sqrt())
            }
            _ => {
                let grid = self.test_inputs();
                let mut mse = 0.0;
                for x in &grid {
                    let u = model::forward(spec, theta, x)?[0];
                    let t = self.target(x);
                    mse += (u - t) * (u - t);
                }
                Ok(mse / grid.len() as f64)
            }
        }
    }
}

/// Fraction of argmax-correct predictions on a labeled set.
pub fn accuracy(spec: &MlpSpec, theta: &ParamVector, data: &DataSet) -> Result<f64> {
    let labels = match &data.targets {
        Targets::Labels(l) => l,
        _ => return Err(Error::InvalidArgument("accuracy needs labels".into())),
    };
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(labels) {
        let z = model::forward(spec, theta, x)?;
        let arg = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if arg == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.inputs.len() as f64)
}

fn grid_1d(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| vec![i as f64 / (n - 1) as f64])
        .collect()
}

fn grid_2d(side: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            out.push(vec![
                j as f64 / (side - 1) as f64,
                i as f64 / (side - 1) as f64,
            ]);
        }
    }
    out
}

/// Monte-Carlo PDE loss: `1/2 mean(r_int^2) + (beta_bc/2) mean(r_bc^2)`.
pub fn pde_local_loss(
    spec: &MlpSpec,
    theta: &ParamVector,
    interior: &[Vec<f64>],
    boundary: &[Vec<f64>],
    problem: &PdeProblem,
    beta_bc: f64,
) -> Result<f64> {
    if interior.is_empty() || boundary.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if beta_bc <= 0.0 {
        return Err(Error::InvalidArgument("beta_bc must be > 0".into()));
    }
    let mut int_sum = 0.0;
    for x in interior {
        let (u, lap) = model::input_laplacian(spec, theta, x)?;
        let r = problem.interior_residual(x, u, lap);
        int_sum += r * r;
    }
    let mut bc_sum = 0.0;
    for x in boundary {
        let u = model::forward(spec, theta, x)?[0];
        let r = u - problem.dirichlet(x);
        bc_sum += r * r;
    }
    Ok(0.5 * int_sum / interior.len() as f64 + 0.5 * beta_bc * bc_sum / boundary.len() as f64)
}

/// Uniform interior samples of a region.
pub fn sample_interior(region: &Region, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| region.sample_uniform(rng)).collect()
}

/// Points on the part of the unit-cube boundary that touches `region`.
///
/// In 1D this is always the two endpoints. For d >= 2, faces are chosen
/// with probability proportional to their overlap area with the region.
pub fn sample_boundary(region: &Region, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = region.dim();
    if d == 1 {
        return vec![vec![0.0], vec![1.0]];
    }
    // candidate faces: (axis, side) where the region touches the face
    let mut faces: Vec<(usize, f64, f64)> = Vec::new(); // (axis, value, area)
    for axis in 0..d {
        for side in [0.0, 1.0] {
            let touches = if side == 0.0 {
                region.lo[axis] <= 1e-12
            } else {
                region.hi[axis] >= 1.0 - 1e-12
            };
            if touches {
                let area: f64 = (0..d)
                    .filter(|&a| a != axis)
                    .map(|a| (region.hi[a] - region.lo[a]).max(0.0))
                    .product();
                if area > 0.0 {
                    faces.push((axis, side, area));
                }
            }
        }
    }
    if faces.is_empty() {
        // region is interior-only; fall back to the global boundary
        let cube = Region::unit_cube(d);
        return sample_boundary(&cube, n, rng);
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = faces.len() - 1;
            for (i, f) in faces.iter().enumerate() {
                if pick < f.2 {
                    chosen = i;
                    break;
                }
                pick -= f.2;
            }
            let (axis, side, _) = faces[chosen];
            let mut x = region.sample_uniform(rng);
            x[axis] = side;
            x
        })
        .collect()
}
