use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Arithmetic substrate for tape evaluation.
///
/// `f64` runs plain values. [`Dual`] carries a directional derivative along
/// with every value, which turns a reverse-mode gradient pass into a
/// Hessian-vector product (forward-over-reverse).
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    /// Value plus seed for the tangent slot (ignored by `f64`).
    fn from_parts(primal: f64, tangent: f64) -> Self;
    fn primal(self) -> f64;
    fn tangent(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    fn sigmoid(self) -> Self;
    fn is_finite_all(self) -> bool;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_parts(primal: f64, _tangent: f64) -> Self {
        primal
    }
    fn primal(self) -> f64 {
        self
    }
    fn tangent(self) -> f64 {
        0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn sigmoid(self) -> Self {
        stable_sigmoid(self)
    }
    fn is_finite_all(self) -> bool {
        self.is_finite()
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First-order dual number: value `re` and tangent `dx`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dx: f64,
}

impl Dual {
    pub fn new(re: f64, dx: f64) -> Self {
        Dual { re, dx }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.dx + rhs.dx)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.dx - rhs.dx)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.dx * rhs.re + self.re * rhs.dx)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.re;
        Dual::new(self.re * inv, (self.dx - self.re * inv * rhs.dx) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.dx)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        self.re += rhs.re;
        self.dx += rhs.dx;
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn from_parts(primal: f64, tangent: f64) -> Self {
        Dual::new(primal, tangent)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn tangent(self) -> f64 {
        self.dx
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.dx)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.dx / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.dx)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.dx / (2.0 * s))
    }
    fn recip(self) -> Self {
        let inv = 1.0 / self.re;
        Dual::new(inv, -inv * inv * self.dx)
    }
    fn sigmoid(self) -> Self {
        let s = stable_sigmoid(self.re);
        Dual::new(s, s * (1.0 - s) * self.dx)
    }
    fn is_finite_all(self) -> bool {
        self.re.is_finite() && self.dx.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x; // d(x^2) = 2x
        assert_eq!(y.re, 9.0);
        assert_eq!(y.dx, 6.0);
    }

    #[test]
    fn dual_quotient_and_transcendentals() {
        let x = Dual::new(2.0, 1.0);
        let q = Dual::new(1.0, 0.0) / x; // d(1/x) = -1/x^2
        assert!((q.dx + 0.25).abs() < 1e-15);
        let e = x.exp();
        assert!((e.dx - 2.0f64.exp()).abs() < 1e-12);
        let l = x.ln();
        assert!((l.dx - 0.5).abs() < 1e-15);
        let s = x.sqrt();
        assert!((s.dx - 1.0 / (2.0 * 2.0f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_matches_derivative() {
        let x = Dual::new(0.3, 1.0);
        let s = x.sigmoid();
        let sp = stable_sigmoid(0.3);
        assert!((s.re - sp).abs() < 1e-15);
        assert!((s.dx - sp * (1.0 - sp)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_extreme_inputs_stay_finite() {
        assert_eq!(stable_sigmoid(800.0), 1.0);
        assert_eq!(stable_sigmoid(-800.0), 0.0);
    }
}
