//! Network Laplacians and their parameter gradients.
//!
//! The forward sweep carries `Dual2` triples through the layers, one input
//! coordinate at a time. The backward sweep propagates adjoints for all
//! three channels, which yields the exact parameter gradient of the
//! Laplacian — the piece PDE residual Jacobians need.

use super::dual::Dual2;
use super::{Activation, MlpSpec, ParamVector};
use crate::error::{Error, Result};

/// Value, Laplacian, and their parameter gradients at one input point.
#[derive(Debug, Clone)]
pub struct LaplacianGrads {
    pub u: f64,
    pub lap: f64,
    pub grad_u: Vec<f64>,
    pub grad_lap: Vec<f64>,
}

fn check(spec: &MlpSpec, theta: &ParamVector, x: &[f64]) -> Result<()> {
    if spec.output_dim() != 1 {
        return Err(Error::Unsupported("input Laplacian needs a scalar output"));
    }
    if spec
        .widths()
        .len()
        .checked_sub(2)
        .map(|h| (0..h).any(|l| spec.layer_activation(l) == Activation::Relu))
        .unwrap_or(false)
    {
        return Err(Error::Unsupported("relu is not twice differentiable"));
    }
    if theta.len() != spec.param_count() || x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch(
            "laplacian input dimensions".into(),
        ));
    }
    Ok(())
}

/// One coordinate sweep: returns per-layer pre-activation triples and
/// post-activation triples (`states[l]` feeds layer `l`).
fn sweep_forward(
    spec: &MlpSpec,
    theta: &[f64],
    x: &[f64],
    coord: usize,
) -> (Vec<Vec<Dual2>>, Vec<Vec<Dual2>>) {
    let layers = spec.num_layers();
    let mut acts: Vec<Vec<Dual2>> = Vec::with_capacity(layers + 1);
    let mut pres: Vec<Vec<Dual2>> = Vec::with_capacity(layers);
    acts.push(
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if j == coord {
                    Dual2::variable(v)
                } else {
                    Dual2::constant(v)
                }
            })
            .collect(),
    );
    for l in 0..layers {
        let (w_off, n_out, n_in, b_off) = spec.layer_layout(l);
        let input = acts.last().unwrap().clone();
        let mut pre = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut z = Dual2::constant(theta[b_off + o]);
            let row = &theta[w_off + o * n_in..w_off + (o + 1) * n_in];
            for (w, a) in row.iter().zip(&input) {
                z = z + a.scale(*w);
            }
            pre.push(z);
        }
        let act = spec.layer_activation(l);
        let post: Vec<Dual2> = match act {
            Activation::Tanh => pre.iter().map(|z| z.tanh()).collect(),
            Activation::Identity => pre.clone(),
            Activation::Relu => unreachable!("rejected in check()"),
        };
        pres.push(pre);
        acts.push(post);
    }
    (acts, pres)
}

/// Network value and Laplacian at `x`, exact up to rounding.
pub fn input_laplacian(spec: &MlpSpec, theta: &ParamVector, x: &[f64]) -> Result<(f64, f64)> {
    check(spec, theta, x)?;
    let mut u = 0.0;
    let mut lap = 0.0;
    for coord in 0..x.len() {
        let (acts, _) = sweep_forward(spec, &theta.values, x, coord);
        let out = acts.last().unwrap()[0];
        u = out.v;
        lap += out.dd;
    }
    Ok((u, lap))
}

/// Like [`input_laplacian`] but also returns exact parameter gradients of
/// both the value and the Laplacian (full-length, unmasked).
pub fn laplacian_with_grads(
    spec: &MlpSpec,
    theta: &ParamVector,
    x: &[f64],
) -> Result<LaplacianGrads> {
    check(spec, theta, x)?;
    let p = spec.param_count();
    let layers = spec.num_layers();
    let mut grad_lap = vec![0.0; p];
    let mut grad_u = vec![0.0; p];
    let mut u = 0.0;
    let mut lap = 0.0;

    for coord in 0..x.len() {
        let (acts, pres) = sweep_forward(spec, &theta.values, x, coord);
        let out = acts.last().unwrap()[0];
        u = out.v;
        lap += out.dd;

        // Adjoint triple per neuron, seeded on the dd channel of the output.
        let c_out = spec.output_dim();
        let mut adj: Vec<Dual2> = vec![Dual2::constant(0.0); c_out];
        adj[0] = Dual2 { v: 0.0, d: 0.0, dd: 1.0 };
        // On the first sweep also harvest the value gradient: seeding the v
        // channel rides along the same stored states.
        let mut adj_u: Vec<Dual2> = vec![Dual2::constant(0.0); c_out];
        adj_u[0] = Dual2 { v: 1.0, d: 0.0, dd: 0.0 };
        let want_u = coord == 0;

        let mut chains: Vec<(Vec<Dual2>, &mut [f64])> = vec![(adj, &mut grad_lap[..])];
        if want_u {
            chains.push((adj_u, &mut grad_u[..]));
        }

        for (bar, grad) in chains.iter_mut() {
            let mut bar = std::mem::take(bar);
            for l in (0..layers).rev() {
                let (w_off, n_out, n_in, b_off) = spec.layer_layout(l);
                // Activation backward: map post-activation adjoints to
                // pre-activation adjoints.
                let zbar: Vec<Dual2> = match spec.layer_activation(l) {
                    Activation::Identity => bar.clone(),
                    Activation::Tanh => {
                        let pre = &pres[l];
                        let post = &acts[l + 1];
                        (0..n_out)
                            .map(|o| {
                                let t = post[o].v;
                                let s = 1.0 - t * t;
                                let zd = pre[o].d;
                                let ze = pre[o].dd;
                                let tb = bar[o];
                                Dual2 {
                                    v: s * tb.v
                                        - 2.0 * t * s * zd * tb.d
                                        - (2.0 * t * s * ze + 2.0 * s * (s - 2.0 * t * t) * zd * zd)
                                            * tb.dd,
                                    d: s * tb.d - 4.0 * t * s * zd * tb.dd,
                                    dd: s * tb.dd,
                                }
                            })
                            .collect()
                    }
                    Activation::Relu => unreachable!(),
                };
                // Affine backward: all three channels contribute to the
                // weight gradient, only the value channel to the bias.
                let a_in = &acts[l];
                for o in 0..n_out {
                    let zb = zbar[o];
                    let wrow = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (g, a) in wrow.iter_mut().zip(a_in) {
                        *g += zb.v * a.v + zb.d * a.d + zb.dd * a.dd;
                    }
                    grad[b_off + o] += zb.v;
                }
                if l > 0 {
                    let mut prev = vec![Dual2::constant(0.0); n_in];
                    for o in 0..n_out {
                        let zb = zbar[o];
                        let row =
                            &theta.values[w_off + o * n_in..w_off + (o + 1) * n_in];
                        for (pb, &w) in prev.iter_mut().zip(row) {
                            pb.v += w * zb.v;
                            pb.d += w * zb.d;
                            pb.dd += w * zb.dd;
                        }
                    }
                    bar = prev;
                }
            }
        }
    }

    Ok(LaplacianGrads {
        u,
        lap,
        grad_u,
        grad_lap,
    })
}
