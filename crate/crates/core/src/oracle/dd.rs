//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! `|lo| ≤ ulp(hi)/2`, giving roughly 106 bits of significand.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Multiply by `2^k`; exact barring overflow or underflow.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    /// `e^x − 1`, accurate near zero.
    pub fn exp_m1(self) -> Self {
        if self.hi.abs() < 0.5 {
            self.reduced_exp_m1()
        } else {
            self.exp() - Dd::ONE
        }
    }

    /// Taylor series on `x / 2^10`, then undo the scaling with
    /// `expm1(2y) = expm1(y)·(2 + expm1(y))`.
    fn reduced_exp_m1(self) -> Self {
        const HALVINGS: i32 = 10;
        let r = self.ldexp(-HALVINGS);
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / n as f64;
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..HALVINGS {
            sum = sum * (sum + Dd::new(2.0));
        }
        sum
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * k;
        (r.reduced_exp_m1() + Dd::ONE).ldexp(k as i32)
    }

    /// Natural log by Newton steps on `e^y = x`.
    pub fn ln(self) -> Self {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Self {
        let e = (self.abs() * -2.0).exp_m1();
        let t = -e / (e + Dd::new(2.0));
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, o: f64) -> Dd {
        let (p, e) = two_prod(self.hi, o);
        Dd::renorm(p, e + self.lo * o)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * q1;
        let q2 = r.hi / o.hi;
        let r = r - o * q2;
        let q3 = r.hi / o.hi;
        let (a, b) = quick_two_sum(q1, q2);
        Dd { hi: a, lo: b } + Dd::new(q3)
    }
}

impl Div<f64> for Dd {
    type Output = Dd;
    fn div(self, o: f64) -> Dd {
        self / Dd::new(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        (a - b).to_f64().abs() <= tol * b.to_f64().abs().max(1.0)
    }

    #[test]
    fn constants() {
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-31);
        assert!(close(Dd::new(2.0).ln(), LN2, 1e-31));
        // 1/3 in double-double
        let third = Dd::ONE / 3.0;
        assert!(((third * 3.0) - Dd::ONE).to_f64().abs() < 1e-32);
    }

    #[test]
    fn exp_and_ln_round_trip() {
        for i in 0..=400 {
            let x = Dd::new(-20.0 + 0.1 * i as f64) + Dd::new(1e-19);
            let e = x.exp();
            assert!(close(e * (-x).exp(), Dd::ONE, 1e-30), "{i}");
            assert!(close(e.ln(), x, 2e-31), "{i}");
        }
    }

    #[test]
    fn agrees_with_f64_library() {
        for i in 0..=200 {
            let x = -5.0 + 0.05 * i as f64;
            let d = Dd::new(x);
            assert!((d.exp().to_f64() - x.exp()).abs() <= 2.0 * f64::EPSILON * x.exp());
            assert!((d.exp_m1().to_f64() - x.exp_m1()).abs() <= 2.0 * f64::EPSILON * x.exp_m1().abs());
            assert!((d.tanh().to_f64() - x.tanh()).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn tanh_identity() {
        for i in 0..100 {
            let x = Dd::new(-3.0 + 0.061 * i as f64);
            let t = x.tanh();
            let via_exp = (x * 2.0).exp_m1() / ((x * 2.0).exp() + Dd::ONE);
            assert!(close(t, via_exp, 1e-30));
        }
    }
}
