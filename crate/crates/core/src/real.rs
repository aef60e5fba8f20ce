//! Scalar abstraction shared by `f64` and forward-mode dual numbers.
//!
//! The meta-learner head and its losses are written once over [`Real`]. Running
//! the gradient code on [`Dual`] inputs yields exact Hessian-vector products,
//! which the second-order meta-gradient needs.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn scale(self, s: f64) -> Self {
        self * Self::cst(s)
    }

    /// `max(x, 0)` with the branch decided on the primal value.
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }

    fn sigmoid(self) -> Self {
        // Split on sign so neither branch overflows.
        if self.value() >= 0.0 {
            Self::cst(1.0) / (Self::cst(1.0) + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::cst(1.0) + e)
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// First-order dual number `re + eps·du`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.du * o.re - self.re * o.du) / (o.re * o.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Real for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_derivatives() {
        let x = Dual::new(0.3, 1.0);
        let y = (x * x).exp() / (x + Dual::cst(2.0)).ln();
        let f = |v: f64| (v * v).exp() / (v + 2.0).ln();
        let h = 1e-6;
        let fd = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        assert!((y.re - f(0.3)).abs() < 1e-15);
        assert!((y.du - fd).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(Real::sigmoid(800.0_f64), 1.0);
        assert!(Real::sigmoid(-800.0_f64) >= 0.0);
        let s = Dual::new(0.0, 1.0).sigmoid();
        assert!((s.re - 0.5).abs() < 1e-15 && (s.du - 0.25).abs() < 1e-15);
    }
}
