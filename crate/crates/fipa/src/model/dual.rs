//! Second-order dual numbers: value, first and second derivative with
//! respect to one scalar direction. Sweeping them one input coordinate at a
//! time yields exact Laplacians of scalar fields.

use std::ops::{Add, Mul, Neg, Sub};

/// Truncated Taylor triple `(v, d, dd)` tracking `f`, `f'`, `f''` along a
/// single input direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub d: f64,
    pub dd: f64,
}

impl Dual2 {
    pub fn constant(v: f64) -> Self {
        Dual2 { v, d: 0.0, dd: 0.0 }
    }

    /// A variable the derivative is taken with respect to.
    pub fn variable(v: f64) -> Self {
        Dual2 { v, d: 1.0, dd: 0.0 }
    }

    pub fn tanh(self) -> Self {
        let t = self.v.tanh();
        let s = 1.0 - t * t; // sech^2
        Dual2 {
            v: t,
            d: s * self.d,
            dd: s * self.dd - 2.0 * t * s * self.d * self.d,
        }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        Dual2 {
            v: e,
            d: e * self.d,
            dd: e * (self.dd + self.d * self.d),
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual2 {
            v: s,
            d: c * self.d,
            dd: c * self.dd - s * self.d * self.d,
        }
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual2 {
            v: c,
            d: -s * self.d,
            dd: -s * self.dd - c * self.d * self.d,
        }
    }

    pub fn powi(self, n: i32) -> Self {
        let vp = self.v.powi(n - 2);
        let nf = n as f64;
        Dual2 {
            v: vp * self.v * self.v,
            d: nf * vp * self.v * self.d,
            dd: nf * vp * self.v * self.dd + nf * (nf - 1.0) * vp * self.d * self.d,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Dual2 {
            v: c * self.v,
            d: c * self.d,
            dd: c * self.dd,
        }
    }
}

impl Add for Dual2 {
    type Output = Dual2;
    fn add(self, o: Dual2) -> Dual2 {
        Dual2 {
            v: self.v + o.v,
            d: self.d + o.d,
            dd: self.dd + o.dd,
        }
    }
}

impl Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, o: Dual2) -> Dual2 {
        Dual2 {
            v: self.v - o.v,
            d: self.d - o.d,
            dd: self.dd - o.dd,
        }
    }
}

impl Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, o: Dual2) -> Dual2 {
        Dual2 {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
            dd: self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd,
        }
    }
}

impl Neg for Dual2 {
    type Output = Dual2;
    fn neg(self) -> Dual2 {
        Dual2 {
            v: -self.v,
            d: -self.d,
            dd: -self.dd,
        }
    }
}

/// Value and Laplacian of a scalar field given as a closure over dual
/// coordinates; runs one sweep per input dimension.
pub fn laplacian_of(f: impl Fn(&[Dual2]) -> Dual2, x: &[f64]) -> (f64, f64) {
    let mut lap = 0.0;
    let mut value = 0.0;
    for i in 0..x.len() {
        let coords: Vec<Dual2> = x
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if j == i {
                    Dual2::variable(v)
                } else {
                    Dual2::constant(v)
                }
            })
            .collect();
        let out = f(&coords);
        value = out.v;
        lap += out.dd;
    }
    if x.is_empty() {
        value = f(&[]).v;
    }
    (value, lap)
}
