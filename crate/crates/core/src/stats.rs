//! Small statistics toolkit shared by the modules and the test suites.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use libm::erfc;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail Q(x) = 1 − Φ(x), accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation (relative error < 1.15e-9) followed by one
/// Halley step against the erfc-based CDF, which brings the result to near
/// machine precision.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile probability must be in (0,1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement; the residual uses the smaller tail to avoid cancellation
    let e = if x > 0.0 { (1.0 - p) - norm_sf(x) } else { norm_cdf(x) - p };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Result of a chi-squared test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    dist.sf(statistic)
}

/// Groups consecutive cells until each group reaches `min_weight` (measured by
/// `weight`); a short remainder is merged into the last group.
fn pooled_groups(len: usize, min_weight: f64, weight: impl Fn(usize) -> f64) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut acc = 0.0;
    for i in 0..len {
        acc += weight(i);
        if acc >= min_weight {
            groups.push((start, i + 1));
            start = i + 1;
            acc = 0.0;
        }
    }
    if start < len {
        match groups.last_mut() {
            Some(last) => last.1 = len,
            None => groups.push((start, len)),
        }
    }
    groups
}

/// Pearson goodness-of-fit of observed counts against cell probabilities.
///
/// Adjacent cells are pooled until each expected count is at least
/// `min_expected`. Probability mass not covered by `probs` is added to the
/// final cell, so tails are never silently dropped.
pub fn chi_square_gof(observed: &[u64], probs: &[f64], min_expected: f64) -> Result<ChiSquare> {
    if observed.len() != probs.len() {
        return Err(Error::domain("observed and probability vectors differ in length"));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::EmptyData("no observations for chi-squared test".into()));
    }
    let mut p = probs.to_vec();
    let covered: f64 = p.iter().sum();
    if let Some(last) = p.last_mut() {
        *last += (1.0 - covered).max(0.0);
    }
    let nf = n as f64;
    let groups = pooled_groups(p.len(), min_expected, |i| p[i] * nf);
    let mut stat = 0.0;
    for &(a, b) in &groups {
        let o: u64 = observed[a..b].iter().sum();
        let e: f64 = p[a..b].iter().sum::<f64>() * nf;
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
        } else if o > 0 {
            stat = f64::INFINITY;
        }
    }
    let dof = groups.len().saturating_sub(1);
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: chi_square_sf(stat, dof),
    })
}

/// Two-sample chi-squared homogeneity test on binned counts.
///
/// Cells are pooled until their combined count reaches `min_count`.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], min_count: u64) -> Result<ChiSquare> {
    let len = a.len().max(b.len());
    let get = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0);
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(Error::EmptyData("two-sample test needs both samples non-empty".into()));
    }
    let groups = pooled_groups(len, min_count as f64, |i| (get(a, i) + get(b, i)) as f64);
    let (k1, k2) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let mut stat = 0.0;
    for &(s, e) in &groups {
        let ra: u64 = (s..e).map(|i| get(a, i)).sum();
        let rb: u64 = (s..e).map(|i| get(b, i)).sum();
        let tot = (ra + rb) as f64;
        if tot > 0.0 {
            stat += (k1 * ra as f64 - k2 * rb as f64).powi(2) / tot;
        }
    }
    let dof = groups.len().saturating_sub(1);
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: chi_square_sf(stat, dof),
    })
}

/// One-sample Kolmogorov–Smirnov test of values against U(0,1).
/// Returns (D statistic, asymptotic p-value).
pub fn ks_uniform(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyData("no values for KS test".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let lo = x - i as f64 / n;
            let hi = (i as f64 + 1.0) / n - x;
            lo.max(hi)
        })
        .fold(0.0, f64::max);
    // Stephens' small-sample correction to the Kolmogorov distribution
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * (j as f64 * t).powi(2)).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    Ok((d, p.clamp(0.0, 1.0)))
}

/// Sample mean and unbiased variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Sample skewness γ₁ (moment estimator).
pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Pearson correlation coefficient.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_known_values() {
        assert_abs_diff_eq!(norm_quantile(0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_quantile(0.995).unwrap(), 2.5758293035489004, epsilon = 1e-12);
        assert_abs_diff_eq!(norm_quantile(0.975).unwrap(), 1.959963984540054, epsilon = 1e-12);
        assert_abs_diff_eq!(norm_quantile(1e-10).unwrap(), -6.361340902404056, epsilon = 1e-9);
        assert!(norm_quantile(0.0).is_err());
        assert!(norm_quantile(1.0).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = norm_quantile(p).unwrap();
            assert!((norm_cdf(x) - p).abs() < 1e-13, "p={p}");
        }
    }

    #[test]
    fn gof_pools_sparse_tail() {
        let probs = [0.5, 0.3, 0.15, 0.04, 0.01];
        let obs = [500, 300, 150, 40, 10];
        let r = chi_square_gof(&obs, &probs, 5.0).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-12);
        assert_eq!(r.dof, 4);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_sample_identical_is_perfect() {
        let a = [10, 20, 30, 40];
        let r = chi_square_two_sample(&a, &a, 5).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ks_on_grid_is_accepting() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (d, p) = ks_uniform(&v).unwrap();
        assert!(d <= 0.0005 + 1e-12);
        assert!(p > 0.99);
    }

    #[test]
    fn skewness_of_symmetric_sample_is_zero() {
        let v = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert_abs_diff_eq!(skewness(&v), 0.0, epsilon = 1e-15);
    }
}
