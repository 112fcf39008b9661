//! Level functions `w_0 < w_1 < ...` with an explicit prefix and a tail rule.

use serde::{Deserialize, Serialize};

use crate::error::{schema, Result};

const MODULE: &str = "tree_matrix";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// `w_{n+1} = w_n + d`
    Arithmetic { d: f64 },
    /// `Δ_{n+1} = rho Δ_n`
    GeometricGap { rho: f64 },
    /// `w_n = limit - c rho^n`, `0 < rho < 1`
    Bounded { limit: f64, c: f64, rho: f64 },
    /// `Δ_{n+1} = a b^n Δ_n`
    GapPower { a: f64, b: f64 },
}

/// Serialized form, embedded in tree specs under `"weights"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub prefix: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<Tail>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSequence {
    prefix: Vec<f64>,
    tail: Option<Tail>,
}

impl WeightSequence {
    pub fn new(prefix: Vec<f64>, tail: Option<Tail>) -> Result<Self> {
        if prefix.is_empty() {
            return Err(schema(MODULE, "weight prefix must contain w_0"));
        }
        if !(prefix[0] > 0.0) || !prefix[0].is_finite() {
            return Err(schema(MODULE, "w_0 must be positive"));
        }
        for k in 1..prefix.len() {
            if !(prefix[k] > prefix[k - 1]) || !prefix[k].is_finite() {
                return Err(schema(MODULE, format!("weights not strictly increasing at level {k}")));
            }
        }
        let m = prefix.len() - 1;
        let wm = prefix[m];
        match tail {
            Some(Tail::Arithmetic { d }) if !(d > 0.0) => {
                return Err(schema(MODULE, "arithmetic tail needs d > 0"))
            }
            Some(Tail::GeometricGap { rho }) if !(rho > 0.0) => {
                return Err(schema(MODULE, "geometric-gap tail needs rho > 0"))
            }
            Some(Tail::Bounded { limit, c, rho }) => {
                if !(rho > 0.0 && rho < 1.0 && c > 0.0) {
                    return Err(schema(MODULE, "bounded tail needs c > 0 and 0 < rho < 1"));
                }
                if !(limit - c * rho.powi(m as i32 + 1) > wm) {
                    return Err(schema(MODULE, "bounded tail does not continue the prefix increasingly"));
                }
            }
            Some(Tail::GapPower { a, b }) if !(a > 0.0 && b > 0.0) => {
                return Err(schema(MODULE, "gap-power tail needs a, b > 0"))
            }
            _ => {}
        }
        Ok(WeightSequence { prefix, tail })
    }

    pub fn from_spec(spec: &WeightSpec) -> Result<Self> {
        Self::new(spec.prefix.clone(), spec.tail)
    }

    pub fn to_spec(&self) -> WeightSpec {
        WeightSpec {
            prefix: self.prefix.clone(),
            tail: self.tail,
        }
    }

    /// `w_n = n + 1`
    pub fn linear() -> Self {
        Self::new(vec![1.0], Some(Tail::Arithmetic { d: 1.0 })).unwrap()
    }

    /// Finite list, no tail.
    pub fn explicit(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), None)
    }

    pub fn tail(&self) -> Option<Tail> {
        self.tail
    }

    fn m(&self) -> usize {
        self.prefix.len() - 1
    }

    /// Deepest level with a defined value, `None` when a tail rule exists.
    pub fn max_level(&self) -> Option<usize> {
        match self.tail {
            None => Some(self.m()),
            Some(_) => None,
        }
    }

    pub fn covers(&self, level: usize) -> bool {
        self.max_level().map_or(true, |m| level <= m)
    }

    /// `w_n`; `w_{-1} = 0`. Levels past a tail-less prefix give NaN.
    pub fn w(&self, n: i64) -> f64 {
        if n < 0 {
            return 0.0;
        }
        let n = n as usize;
        if let Some(&v) = self.prefix.get(n) {
            return v;
        }
        let m = self.m();
        let wm = self.prefix[m];
        match self.tail {
            None => f64::NAN,
            Some(Tail::Arithmetic { d }) => wm + (n - m) as f64 * d,
            Some(Tail::Bounded { limit, c, rho }) => limit - c * rho.powi(n as i32),
            Some(_) => {
                let mut w = wm;
                for k in m + 1..=n {
                    w += self.delta(k);
                }
                w
            }
        }
    }

    /// `Δ_n = w_n - w_{n-1}`, with `Δ_0 = w_0`.
    pub fn delta(&self, n: usize) -> f64 {
        let m = self.m();
        if n <= m {
            return self.w(n as i64) - self.w(n as i64 - 1);
        }
        let dm = self.w(m as i64) - self.w(m as i64 - 1);
        match self.tail {
            None => f64::NAN,
            Some(Tail::Arithmetic { d }) => d,
            Some(Tail::Bounded { c, rho, .. }) if n > m + 1 => c * rho.powi(n as i32 - 1) * (1.0 - rho),
            Some(Tail::Bounded { .. }) => self.w(n as i64) - self.w(n as i64 - 1),
            Some(Tail::GeometricGap { rho }) => dm * rho.powi((n - m) as i32),
            Some(Tail::GapPower { a, b }) => {
                let mut d = dm;
                for k in m..n {
                    d *= a * b.powi(k as i32);
                }
                d
            }
        }
    }

    /// `Δ_{n+1} / Δ_n`, evaluated without forming huge gaps where possible.
    pub fn ratio(&self, n: usize) -> f64 {
        let m = self.m();
        match self.tail {
            Some(Tail::GeometricGap { rho }) if n >= m => rho,
            Some(Tail::GapPower { a, b }) if n >= m => a * b.powi(n as i32),
            Some(Tail::Bounded { rho, .. }) if n > m + 1 => rho,
            Some(Tail::Arithmetic { .. }) if n > m => 1.0,
            _ => self.delta(n + 1) / self.delta(n),
        }
    }

    /// `(start, a, b)` with `ratio(n) = a b^n` for all `n >= start`.
    pub fn ratio_form(&self) -> Option<(usize, f64, f64)> {
        let m = self.m();
        match self.tail? {
            Tail::Arithmetic { .. } => Some((m + 1, 1.0, 1.0)),
            Tail::GeometricGap { rho } => Some((m, rho, 1.0)),
            Tail::Bounded { rho, .. } => Some((m + 2, rho, 1.0)),
            Tail::GapPower { a, b } => Some((m, a, b)),
        }
    }

    /// `sup_n w_n` when finite.
    pub fn limit(&self) -> Option<f64> {
        match self.tail {
            None => Some(self.prefix[self.m()]),
            Some(Tail::Bounded { limit, .. }) => Some(limit),
            Some(Tail::GeometricGap { rho }) if rho < 1.0 => {
                let m = self.m();
                let dm = self.delta(m);
                Some(self.prefix[m] + dm * rho / (1.0 - rho))
            }
            Some(_) => None,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.limit().is_some()
    }

    /// Copy with one prefix value shifted (test helper for residual detectors).
    pub fn perturbed(&self, level: usize, by: f64) -> WeightSequence {
        let mut p = self.prefix.clone();
        while p.len() <= level {
            let n = p.len() as i64;
            p.push(self.w(n));
        }
        p[level] += by;
        WeightSequence {
            prefix: p,
            tail: self.tail,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tails_and_deltas() {
        let w = WeightSequence::linear();
        assert_eq!(w.w(-1), 0.0);
        assert_eq!(w.w(7), 8.0);
        assert_eq!(w.delta(0), 1.0);
        assert_eq!(w.delta(9), 1.0);

        let b = WeightSequence::new(vec![1.0], Some(Tail::Bounded { limit: 2.0, c: 1.0, rho: 0.5 })).unwrap();
        assert!((b.w(3) - (2.0 - 0.125)).abs() < 1e-15);
        assert_eq!(b.limit(), Some(2.0));
        assert!((b.ratio(4) - 0.5).abs() < 1e-15);

        let f2 = WeightSequence::new(vec![1.0], Some(Tail::GapPower { a: 1.0, b: 2.0 })).unwrap();
        // Δ_{n+1} = 2^n Δ_n starting from Δ_0 = w_0 = 1
        assert_eq!(f2.delta(1), 1.0);
        assert_eq!(f2.delta(2), 2.0);
        assert_eq!(f2.delta(3), 8.0);
        assert_eq!(f2.delta(4), 64.0);
        assert_eq!(f2.w(3), 12.0);
        assert_eq!(f2.ratio(5), 32.0);
        assert!(!f2.is_bounded());

        let g = WeightSequence::new(vec![1.0, 3.0], Some(Tail::GeometricGap { rho: 0.5 })).unwrap();
        assert_eq!(g.limit(), Some(5.0));
        assert!((g.w(40) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn ratio_matches_delta_quotient() {
        let seqs = [
            WeightSequence::linear(),
            WeightSequence::new(vec![0.5, 1.0, 2.5], Some(Tail::GeometricGap { rho: 1.5 })).unwrap(),
            WeightSequence::new(vec![1.0], Some(Tail::Bounded { limit: 2.0, c: 1.0, rho: 0.5 })).unwrap(),
            WeightSequence::new(vec![1.0, 1.5], Some(Tail::GapPower { a: 1.2, b: 1.1 })).unwrap(),
        ];
        for w in &seqs {
            for n in 0..12 {
                let q = w.delta(n + 1) / w.delta(n);
                assert!((w.ratio(n) - q).abs() <= 1e-12 * q, "n={n}");
            }
            if let Some((s, a, b)) = w.ratio_form() {
                for n in s..s + 8 {
                    assert!((w.ratio(n) - a * b.powi(n as i32)).abs() < 1e-12 * w.ratio(n));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(WeightSequence::new(vec![0.0, 1.0], None).is_err());
        assert!(WeightSequence::new(vec![1.0, 1.0], None).is_err());
        assert!(WeightSequence::new(vec![1.0, 3.0], Some(Tail::Bounded { limit: 2.0, c: 1.0, rho: 0.5 })).is_err());
        assert!(WeightSequence::new(vec![1.0], Some(Tail::Arithmetic { d: 0.0 })).is_err());
        let e = WeightSequence::explicit(&[1.0, 2.0]).unwrap();
        assert!(e.w(5).is_nan());
        assert_eq!(e.max_level(), Some(1));
    }
}
