//! Forward-mode dual numbers used to assemble loss Jacobians.
//!
//! The residual kernels in this crate are written once, generically over
//! [`Real`], and instantiated with `f64` for plain evaluation or with
//! [`Dual`] to obtain exact derivatives of small sub-expressions. Wide
//! Jacobians are then chained by hand from these narrow blocks.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction over `f64` and dual numbers.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn sqrt(self) -> Self;
    #[allow(dead_code)]
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn atan2(self, other: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
}

/// Value plus an `N`-lane derivative vector.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// A variable seeded as the `lane`-th independent coordinate.
    #[inline]
    pub fn var(v: f64, lane: usize) -> Self {
        let mut d = [0.0; N];
        d[lane] = 1.0;
        Self { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += rhs.d[i];
        }
        Self { v: self.v + rhs.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= rhs.d[i];
        }
        Self { v: self.v - rhs.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Self { v: self.v * rhs.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x = -*x;
        }
        Self { v: -self.v, d }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }

    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        // d/dx sqrt = 1/(2 sqrt); guard the exact-zero case so that
        // norms of zero vectors stay finite (subgradient 0).
        let k = if s > 0.0 { 0.5 / s } else { 0.0 };
        let mut d = self.d;
        for x in &mut d {
            *x *= k;
        }
        Self { v: s, d }
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        let mut d = self.d;
        for x in &mut d {
            *x *= e;
        }
        Self { v: e, d }
    }

    #[inline]
    fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }

    #[inline]
    fn atan2(self, other: Self) -> Self {
        let y = self;
        let x = other;
        let denom = x.v * x.v + y.v * y.v;
        let v = y.v.atan2(x.v);
        let mut d = [0.0; N];
        if denom > 0.0 {
            let inv = 1.0 / denom;
            for i in 0..N {
                d[i] = (x.v * y.d[i] - y.v * x.d[i]) * inv;
            }
        }
        Self { v, d }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let x0 = 0.83;
        let g = |x: Dual<1>| {
            let a = x * x + Dual::constant(2.0) * x;
            (a.sqrt() + x.exp()).atan2(x + Dual::constant(3.0))
        };
        let out = g(Dual::var(x0, 0));
        let scalar = |x: f64| {
            let a = x * x + 2.0 * x;
            (a.sqrt() + x.exp()).atan2(x + 3.0)
        };
        assert!((out.v - scalar(x0)).abs() < 1e-12);
        assert!((out.d[0] - fd(scalar, x0)).abs() < 1e-7);
    }

    #[test]
    fn division_rule() {
        let x0 = 1.7;
        let out = {
            let x = Dual::<1>::var(x0, 0);
            (x * x - Dual::constant(1.0)) / (x + Dual::constant(2.0))
        };
        let scalar = |x: f64| (x * x - 1.0) / (x + 2.0);
        assert!((out.d[0] - fd(scalar, x0)).abs() < 1e-8);
    }
}
