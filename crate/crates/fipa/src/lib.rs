//! Federated learning with Fisher-informed parameterwise aggregation.
//!
//! The crate simulates communication rounds in which clients train locally
//! and upload both a parameter update and a low-rank eigenpair sketch of
//! their local Fisher/Gauss-Newton curvature. The server merges the
//! sketches and reweights each client's update with a matrix weight instead
//! of a scalar, which keeps updates aligned under heterogeneous data.
//!
//! The pieces, bottom up:
//!
//! * [`linalg`] — thin QR, symmetric eigensolve, regularized solves.
//! * [`model`] — dense MLPs with exact parameter Jacobians and input
//!   Laplacians.
//! * [`curvature`] — matrix-free Fisher-vector products and randomized
//!   low-rank sketching.
//! * [`aggregate`] — FedAvg and the Fisher-informed rules (dense oracle
//!   path and the scalable QR path).
//! * [`problems`] — regression targets, PDE problems with manufactured
//!   solutions, synthetic classification, and metrics.
//! * [`federation`] — partitioners, local training, round orchestration.
//! * [`gn`] — a centralized damped Gauss-Newton reference trajectory plus
//!   convergence diagnostics.

pub mod aggregate;
pub mod curvature;
pub mod error;
pub mod federation;
pub mod gn;
pub mod linalg;
pub mod model;
pub mod problems;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    //! Keeps the guide's code blocks compiling: every chapter is included
    //! as a doctest source.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(linear_algebra, "../../../book/src/linear-algebra.md");
    chapter!(models, "../../../book/src/models.md");
    chapter!(curvature, "../../../book/src/curvature.md");
    chapter!(aggregation, "../../../book/src/aggregation.md");
    chapter!(problems, "../../../book/src/problems.md");
    chapter!(federation, "../../../book/src/federation.md");
    chapter!(gauss_newton, "../../../book/src/gauss-newton.md");
    chapter!(cli, "../../../book/src/cli.md");
}
