//! Small statistics helpers for the Monte Carlo checks.

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (k, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    d
}

/// Critical value of the one-sample statistic at level `alpha` ∈ {0.10, 0.05, 0.01},
/// with the finite-`n` correction `√n + 0.12 + 0.11/√n`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    let c = if alpha <= 0.01 {
        1.628
    } else if alpha <= 0.05 {
        1.358
    } else {
        1.224
    };
    let s = (n as f64).sqrt();
    c / (s + 0.12 + 0.11 / s)
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Standardized deviation of `hits` out of `n` from success probability `p`.
pub fn binomial_z(hits: usize, n: usize, p: f64) -> f64 {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let dev = hits as f64 - n as f64 * p;
    if sd == 0.0 {
        if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dev / sd
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn ks_on_exact_quantiles_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ks_separates_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Exp::new(2.0).unwrap();
        let xs: Vec<f64> = (0..20000).map(|_| e.sample(&mut rng)).collect();
        let crit = ks_critical(xs.len(), 0.01);
        assert!(ks_statistic(&xs, |x| 1.0 - (-2.0 * x).exp()) < crit);
        assert!(ks_statistic(&xs, |x| 1.0 - (-2.2 * x).exp()) > crit);
    }

    #[test]
    fn moments_and_binomial() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(binomial_z(50, 100, 0.5), 0.0);
        assert_eq!(binomial_z(60, 100, 0.5), 2.0);
    }
}
