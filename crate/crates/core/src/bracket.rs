//! Closed real intervals used as certified enclosures.
//!
//! Every quantity computed from a truncated infinite tree carries a lower and
//! an upper value. Combination rules only cover the monotone cases we need,
//! so each caller picks endpoints explicitly.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi || lo.is_nan() || hi.is_nan(), "inverted bracket {lo} > {hi}");
        Bracket { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Bracket { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        if self.hi.is_infinite() {
            self.hi
        } else {
            0.5 * (self.lo + self.hi)
        }
    }

    /// True when `x` lies in the bracket widened by `slack`.
    pub fn contains(&self, x: f64, slack: f64) -> bool {
        x >= self.lo - slack && x <= self.hi + slack
    }

    /// Product of two nonnegative brackets.
    pub fn mul(self, o: Bracket) -> Bracket {
        Bracket::new(self.lo * o.lo, self.hi * o.hi)
    }

    pub fn scale(self, c: f64) -> Bracket {
        if c >= 0.0 {
            Bracket::new(self.lo * c, self.hi * c)
        } else {
            Bracket::new(self.hi * c, self.lo * c)
        }
    }

    pub fn add(self, o: Bracket) -> Bracket {
        Bracket::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn sub(self, o: Bracket) -> Bracket {
        Bracket::new(self.lo - o.hi, self.hi - o.lo)
    }

    /// Quotient of a nonnegative bracket by a positive one.
    pub fn div(self, o: Bracket) -> Bracket {
        Bracket::new(self.lo / o.hi, self.hi / o.lo)
    }

    /// `1 - x`
    pub fn complement(self) -> Bracket {
        Bracket::new(1.0 - self.hi, 1.0 - self.lo)
    }

    pub fn clamp01(self) -> Bracket {
        Bracket::new(self.lo.clamp(0.0, 1.0), self.hi.clamp(0.0, 1.0))
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_encloses() {
        let a = Bracket::new(0.2, 0.3);
        let b = Bracket::new(0.5, 0.6);
        let p = a.mul(b);
        assert!(p.contains(0.25 * 0.55, 0.0));
        let d = a.div(b);
        assert!(d.contains(0.25 / 0.55, 0.0));
        assert_eq!(a.complement(), Bracket::new(0.7, 0.8));
        let s = a.sub(b);
        assert!(s.lo < s.hi && s.contains(-0.3, 0.0));
        assert_eq!(a.scale(-2.0), Bracket::new(-0.6, -0.4));
    }
}
