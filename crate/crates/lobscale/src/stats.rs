//! Two-sample Kolmogorov-Smirnov test, empirical quantiles and moment summaries.
//! Everything here runs in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};

/// `c(a)` in the asymptotic two-sample critical value `c(a)·sqrt((n+m)/(nm))`.
pub fn ks_coefficient(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("significance level {level} outside (0,1)")));
    }
    Ok((-0.5 * (level / 2.0).ln()).sqrt())
}

pub fn ks_critical(level: f64, n: usize, m: usize) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(Error::InsufficientSample { needed: 1, got: n.min(m) });
    }
    let (n, m) = (n as f64, m as f64);
    Ok(ks_coefficient(level)? * ((n + m) / (n * m)).sqrt())
}

/// Two-sample statistic `sup |F_a - F_b|`; NaNs are rejected.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSample { needed: 1, got: a.len().min(b.len()) });
    }
    let x = sorted(a)?;
    let y = sorted(b)?;
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

fn sorted(a: &[f64]) -> Result<Vec<f64>> {
    if a.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { what: "sample".into(), location: "ks".into() });
    }
    let mut v = a.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Asymptotic p-value `Q_KS(λ)`, `λ = (√nₑ + 0.12 + 0.11/√nₑ)·D`, `nₑ = nm/(n+m)`.
pub fn ks_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n * m) as f64 / (n + m) as f64;
    let s = ne.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    kolmogorov_q(lambda)
}

/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub critical_1pct: f64,
    pub critical_5pct: f64,
    pub n: usize,
    pub m: usize,
}

pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsReport> {
    let d = ks_statistic(a, b)?;
    Ok(KsReport {
        statistic: d,
        p_value: ks_pvalue(d, a.len(), b.len()),
        critical_1pct: ks_critical(0.01, a.len(), b.len())?,
        critical_5pct: ks_critical(0.05, a.len(), b.len())?,
        n: a.len(),
        m: b.len(),
    })
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(sample: &[f64], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("quantile level {q} outside [0,1]")));
    }
    let v = sorted(sample)?;
    if v.is_empty() {
        return Err(Error::InsufficientSample { needed: 1, got: 0 });
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub skew: f64,
    /// Standard error of the mean.
    pub se_mean: f64,
    /// Asymptotic standard error of the sample variance, from the fourth moment.
    pub se_var: f64,
    /// Standard error of the skewness under normality, `sqrt(6/n)`.
    pub se_skew: f64,
}

pub fn moments(x: &[f64]) -> Result<Moments> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientSample { needed: 2, got: n });
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2n, m3n, m4n) = (m2 / nf, m3 / nf, m4 / nf);
    let var = m2 / (nf - 1.0);
    Ok(Moments {
        n,
        mean,
        var,
        skew: if m2n > 0.0 { m3n / m2n.powf(1.5) } else { 0.0 },
        se_mean: (var / nf).sqrt(),
        se_var: ((m4n - m2n * m2n).max(0.0) / nf).sqrt(),
        se_skew: (6.0 / nf).sqrt(),
    })
}

/// Sample covariance.
pub fn covariance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Argument("covariance needs equal lengths".into()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientSample { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    Ok(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0))
}

pub fn median(x: &[f64]) -> Result<f64> {
    quantile(x, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// O(nm) oracle: evaluate both ECDFs at every pooled point.
    fn ks_bruteforce(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&t| (ecdf(a, t) - ecdf(b, t)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn critical_coefficients() {
        assert!((ks_coefficient(0.01).unwrap() - 1.628).abs() < 1e-3);
        assert!((ks_coefficient(0.05).unwrap() - 1.358).abs() < 1e-3);
        assert!(ks_coefficient(1.0).is_err());
        let c = ks_critical(0.01, 2000, 2000).unwrap();
        assert!((c - 1.6276 * (4000.0f64 / 4e6).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn kolmogorov_distribution_reference_values() {
        // Q(λ) at the 5% and 1% points
        assert!((kolmogorov_q(1.3580986) - 0.05).abs() < 1e-6);
        assert!((kolmogorov_q(1.6276236) - 0.01).abs() < 1e-6);
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(5.0) < 1e-20);
    }

    #[test]
    fn identical_samples_have_zero_distance() {
        let a = [0.3, -1.0, 2.0, 2.0, 5.5];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(ks_statistic(&[f64::NAN], &[1.0]).is_err());
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn pvalues_are_uniform_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(20261015);
        let reps = 300;
        let mut p = Vec::with_capacity(reps);
        for _ in 0..reps {
            let a: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
            p.push(ks_test(&a, &b).unwrap().p_value);
        }
        p.sort_by(f64::total_cmp);
        let d = p.iter().enumerate().map(|(i, &v)| ((i + 1) as f64 / reps as f64 - v).abs().max((v - i as f64 / reps as f64).abs())).fold(0.0, f64::max);
        // one-sample KS against U(0,1) at the 1% level
        assert!(d < 1.628 / (reps as f64).sqrt(), "{d}");
    }

    #[test]
    fn shifted_samples_are_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.3).collect();
        let r = ks_test(&a, &b).unwrap();
        assert!(r.statistic > r.critical_1pct);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn quantiles_type7() {
        let x = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&x, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&x, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&x, 0.5).unwrap(), 2.5);
        assert!((quantile(&x, 0.05).unwrap() - 1.15).abs() < 1e-15);
        assert!(quantile(&x, 1.5).is_err());
    }

    #[test]
    fn moment_summary() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.var - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.skew, 0.0);
        assert!((covariance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(moments(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn ks_matches_bruteforce_and_is_symmetric(
            a in prop::collection::vec(-5i32..5, 1..40),
            b in prop::collection::vec(-5i32..5, 1..40),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = ks_statistic(&a, &b).unwrap();
            prop_assert!((d - ks_bruteforce(&a, &b)).abs() < 1e-15);
            prop_assert_eq!(d, ks_statistic(&b, &a).unwrap());
        }
    }
}
