//! Second-order forward-mode differentiation in two variables.
//!
//! A [`Jet2`] carries a value together with its gradient and Hessian with
//! respect to a pair of independent variables `(u, v)`. Arithmetic on jets
//! propagates all derivatives exactly, which is how the synthetic scenes get
//! closed-form depth and warp derivatives without hand-expanded formulas.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    /// `[d/du, d/dv]`
    pub grad: [f64; 2],
    /// `[d2/du2, d2/dudv, d2/dv2]`
    pub hess: [f64; 3],
}

impl Jet2 {
    pub const fn constant(value: f64) -> Self {
        Self {
            value,
            grad: [0.0; 2],
            hess: [0.0; 3],
        }
    }

    /// The independent variable `u` evaluated at `value`.
    pub const fn var_u(value: f64) -> Self {
        Self {
            value,
            grad: [1.0, 0.0],
            hess: [0.0; 3],
        }
    }

    /// The independent variable `v` evaluated at `value`.
    pub const fn var_v(value: f64) -> Self {
        Self {
            value,
            grad: [0.0, 1.0],
            hess: [0.0; 3],
        }
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.value`.
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        let [gu, gv] = self.grad;
        let [huu, huv, hvv] = self.hess;
        Self {
            value: f,
            grad: [df * gu, df * gv],
            hess: [
                ddf * gu * gu + df * huu,
                ddf * gu * gv + df * huv,
                ddf * gv * gv + df * hvv,
            ],
        }
    }

    pub fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        let x = self.value;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn recip(self) -> Self {
        let x = self.value;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            value: self.value * c,
            grad: [self.grad[0] * c, self.grad[1] * c],
            hess: [self.hess[0] * c, self.hess[1] * c, self.hess[2] * c],
        }
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    fn add(self, o: Jet2) -> Jet2 {
        Jet2 {
            value: self.value + o.value,
            grad: [self.grad[0] + o.grad[0], self.grad[1] + o.grad[1]],
            hess: [
                self.hess[0] + o.hess[0],
                self.hess[1] + o.hess[1],
                self.hess[2] + o.hess[2],
            ],
        }
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, o: Jet2) -> Jet2 {
        self + (-o)
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        self.scale(-1.0)
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, o: Jet2) -> Jet2 {
        let (f, g) = (self, o);
        Jet2 {
            value: f.value * g.value,
            grad: [
                f.grad[0] * g.value + f.value * g.grad[0],
                f.grad[1] * g.value + f.value * g.grad[1],
            ],
            hess: [
                f.hess[0] * g.value + 2.0 * f.grad[0] * g.grad[0] + f.value * g.hess[0],
                f.hess[1] * g.value
                    + f.grad[0] * g.grad[1]
                    + f.grad[1] * g.grad[0]
                    + f.value * g.hess[1],
                f.hess[2] * g.value + 2.0 * f.grad[1] * g.grad[1] + f.value * g.hess[2],
            ],
        }
    }
}

impl Div for Jet2 {
    type Output = Jet2;
    fn div(self, o: Jet2) -> Jet2 {
        self * o.recip()
    }
}

impl Add<f64> for Jet2 {
    type Output = Jet2;
    fn add(mut self, c: f64) -> Jet2 {
        self.value += c;
        self
    }
}

impl Sub<f64> for Jet2 {
    type Output = Jet2;
    fn sub(mut self, c: f64) -> Jet2 {
        self.value -= c;
        self
    }
}

impl Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, c: f64) -> Jet2 {
        self.scale(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(Jet2, Jet2) -> Jet2, u: f64, v: f64) {
        let j = f(Jet2::var_u(u), Jet2::var_v(v));
        let val = |a: f64, b: f64| f(Jet2::constant(a), Jet2::constant(b)).value;
        let h = 1e-4;
        let du = (val(u + h, v) - val(u - h, v)) / (2.0 * h);
        let dv = (val(u, v + h) - val(u, v - h)) / (2.0 * h);
        let duu = (val(u + h, v) - 2.0 * val(u, v) + val(u - h, v)) / (h * h);
        let dvv = (val(u, v + h) - 2.0 * val(u, v) + val(u, v - h)) / (h * h);
        let duv = (val(u + h, v + h) - val(u + h, v - h) - val(u - h, v + h) + val(u - h, v - h))
            / (4.0 * h * h);
        for (a, b, tol) in [
            (j.grad[0], du, 1e-7),
            (j.grad[1], dv, 1e-7),
            (j.hess[0], duu, 1e-5),
            (j.hess[1], duv, 1e-5),
            (j.hess[2], dvv, 1e-5),
        ] {
            assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        fd_check(|u, v| (u * v + 2.0).sqrt() / (u - v * v + 3.0), 0.3, -0.2);
        fd_check(|u, v| (u * 0.5 - v).exp() * (v + 1.5).ln(), 0.1, 0.4);
    }
}
