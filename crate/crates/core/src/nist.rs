//! Statistical randomness tests after NIST SP800-22, pass proportions over
//! fixed-size trials, and Wilson score intervals.
//!
//! Bits are passed unpacked, one `u8` per bit holding 0 or 1.

use std::io::Write;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::provenance::Provenance;
use crate::stats::{ks_uniform, norm_cdf, norm_quantile};

/// Shortest input accepted by any single test.
pub const MIN_BITS: usize = 100;
/// Shortest trial accepted when the plan contains a block-based test.
pub const MIN_BLOCK_TRIAL_BITS: u64 = 100_000;
pub const DEFAULT_TRIAL_SIZE: u64 = 750_000;
pub const DEFAULT_ALPHA: f64 = 0.01;

fn check_len(bits: &[u8], min: usize) -> Result<()> {
    if bits.len() < min {
        return Err(Error::InsufficientData(format!(
            "{} bits given, at least {min} required",
            bits.len()
        )));
    }
    Ok(())
}

fn igamc(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(a, x).clamp(0.0, 1.0)
}

fn erfc(x: f64) -> f64 {
    libm::erfc(x).clamp(0.0, 1.0)
}

fn frequency_raw(bits: &[u8]) -> f64 {
    let ones = bits.iter().map(|&b| b as i64).sum::<i64>();
    let s = 2 * ones - bits.len() as i64;
    erfc(s.unsigned_abs() as f64 / (2.0 * bits.len() as f64).sqrt())
}

/// Monobit frequency test.
pub fn frequency_test(bits: &[u8]) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    Ok(frequency_raw(bits))
}

fn block_frequency_raw(bits: &[u8], m: usize) -> f64 {
    let blocks = bits.len() / m;
    let chi2 = 4.0
        * m as f64
        * bits
            .chunks_exact(m)
            .map(|b| {
                let pi = b.iter().map(|&x| x as u64).sum::<u64>() as f64 / m as f64 - 0.5;
                pi * pi
            })
            .sum::<f64>();
    igamc(blocks as f64 / 2.0, chi2 / 2.0)
}

/// Frequency within blocks of `m` bits.
pub fn block_frequency_test(bits: &[u8], m: usize) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    if m == 0 || m > bits.len() {
        return Err(Error::domain(format!("block length {m} does not fit {} bits", bits.len())));
    }
    Ok(block_frequency_raw(bits, m))
}

fn runs_raw(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let pi = bits.iter().map(|&b| b as u64).sum::<u64>() as f64 / n;
    if (pi - 0.5).abs() >= 2.0 / n.sqrt() {
        return 0.0;
    }
    let v = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let q = pi * (1.0 - pi);
    erfc((v as f64 - 2.0 * n * q).abs() / (2.0 * (2.0 * n).sqrt() * q))
}

/// Runs test; returns 0 when the frequency prerequisite fails.
pub fn runs_test(bits: &[u8]) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    Ok(runs_raw(bits))
}

fn cusum_raw(bits: &[u8], reverse: bool) -> f64 {
    let n = bits.len() as f64;
    let step = |b: &u8| 2 * *b as i64 - 1;
    let mut s = 0i64;
    let mut z = 0i64;
    let mut visit = |b: &u8| {
        s += step(b);
        z = z.max(s.abs());
    };
    if reverse {
        bits.iter().rev().for_each(&mut visit);
    } else {
        bits.iter().for_each(&mut visit);
    }
    let z = z as f64;
    let sn = n.sqrt();
    let range = |lo: f64, hi: f64| (lo / 4.0).floor() as i64..=(hi / 4.0).floor() as i64;
    let mut s1 = 0.0;
    for k in range(-n / z + 1.0, n / z - 1.0) {
        let k = k as f64;
        s1 += norm_cdf((4.0 * k + 1.0) * z / sn) - norm_cdf((4.0 * k - 1.0) * z / sn);
    }
    let mut s2 = 0.0;
    for k in range(-n / z - 3.0, n / z - 1.0) {
        let k = k as f64;
        s2 += norm_cdf((4.0 * k + 3.0) * z / sn) - norm_cdf((4.0 * k + 1.0) * z / sn);
    }
    (1.0 - s1 + s2).clamp(0.0, 1.0)
}

/// Cumulative sums test, forward or reverse.
pub fn cusum_test(bits: &[u8], reverse: bool) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    Ok(cusum_raw(bits, reverse))
}

/// Block length, class boundaries and class probabilities of the longest-run
/// test for an input of `n` bits.
fn longest_run_table(n: usize) -> (usize, u32, &'static [f64]) {
    if n >= 750_000 {
        (10_000, 10, &[0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727])
    } else if n >= 6272 {
        (128, 4, &[0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124])
    } else {
        (8, 1, &[0.2148, 0.3672, 0.2305, 0.1875])
    }
}

/// Longest run of ones within blocks; the block length follows the input size.
pub fn longest_run_test(bits: &[u8]) -> Result<f64> {
    check_len(bits, 128)?;
    let (m, lowest, pi) = longest_run_table(bits.len());
    let k = pi.len() - 1;
    let mut nu = vec![0u64; pi.len()];
    for block in bits.chunks_exact(m) {
        let (mut run, mut best) = (0u32, 0u32);
        for &b in block {
            run = if b == 1 { run + 1 } else { 0 };
            best = best.max(run);
        }
        let class = (best.max(lowest) - lowest).min(k as u32) as usize;
        nu[class] += 1;
    }
    let blocks = (bits.len() / m) as f64;
    let chi2: f64 = nu
        .iter()
        .zip(pi)
        .map(|(&v, &p)| (v as f64 - blocks * p).powi(2) / (blocks * p))
        .sum();
    Ok(igamc(k as f64 / 2.0, chi2 / 2.0))
}

fn spectral_raw(bits: &[u8]) -> f64 {
    let n = bits.len();
    let mut buf: Vec<Complex<f64>> = bits.iter().map(|&b| Complex::new(2.0 * b as f64 - 1.0, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let nf = n as f64;
    let t = ((1.0f64 / 0.05).ln() * nf).sqrt();
    let n0 = 0.95 * nf / 2.0;
    let n1 = buf[..n / 2].iter().filter(|c| c.norm() < t).count() as f64;
    let d = (n1 - n0) / (nf * 0.95 * 0.05 / 4.0).sqrt();
    erfc(d.abs() / std::f64::consts::SQRT_2)
}

/// Discrete Fourier transform (spectral) test.
pub fn spectral_test(bits: &[u8]) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    Ok(spectral_raw(bits))
}

/// Counts of every overlapping `m`-bit pattern, wrapping around the end.
fn pattern_counts(bits: &[u8], m: u32) -> Vec<u64> {
    let mut counts = vec![0u64; 1 << m];
    if m == 0 {
        counts[0] = bits.len() as u64;
        return counts;
    }
    let mask = (1usize << m) - 1;
    let mut w = 0usize;
    for &b in &bits[..m as usize - 1] {
        w = (w << 1) | b as usize;
    }
    for &b in bits.iter().chain(&bits[..m as usize - 1]).skip(m as usize - 1) {
        w = ((w << 1) | b as usize) & mask;
        counts[w] += 1;
    }
    counts
}

fn serial_raw(bits: &[u8], m: u32) -> (f64, f64) {
    let n = bits.len() as f64;
    let psi = |k: i64| -> f64 {
        if k <= 0 {
            return 0.0;
        }
        let c = pattern_counts(bits, k as u32);
        (1u64 << k) as f64 / n * c.iter().map(|&x| (x * x) as f64).sum::<f64>() - n
    };
    let m = m as i64;
    let (p0, p1, p2) = (psi(m), psi(m - 1), psi(m - 2));
    let d1 = p0 - p1;
    let d2 = p0 - 2.0 * p1 + p2;
    (
        igamc(2f64.powi(m as i32 - 2), d1 / 2.0),
        igamc(2f64.powi(m as i32 - 3), d2 / 2.0),
    )
}

/// Serial test with pattern length `m`; returns both P-values.
pub fn serial_test(bits: &[u8], m: u32) -> Result<(f64, f64)> {
    check_len(bits, MIN_BITS)?;
    if m < 2 || (1usize << m) > bits.len() {
        return Err(Error::domain(format!("serial pattern length {m} unsuitable for {} bits", bits.len())));
    }
    Ok(serial_raw(bits, m))
}

fn approximate_entropy_raw(bits: &[u8], m: u32) -> f64 {
    let n = bits.len() as f64;
    let phi = |k: u32| -> f64 {
        if k == 0 {
            return 0.0;
        }
        pattern_counts(bits, k)
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum()
    };
    let apen = phi(m) - phi(m + 1);
    let chi2 = 2.0 * n * (std::f64::consts::LN_2 - apen);
    igamc(2f64.powi(m as i32 - 1), chi2 / 2.0)
}

/// Approximate entropy test with pattern length `m`.
pub fn approximate_entropy_test(bits: &[u8], m: u32) -> Result<f64> {
    check_len(bits, MIN_BITS)?;
    if m < 1 || (1usize << (m + 1)) > bits.len() {
        return Err(Error::domain(format!("entropy pattern length {m} unsuitable for {} bits", bits.len())));
    }
    Ok(approximate_entropy_raw(bits, m))
}

/// Selectable tests. Cumulative sums and serial yield two P-values each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Frequency,
    BlockFrequency,
    CumulativeSums,
    Runs,
    LongestRun,
    Spectral,
    Serial,
    ApproximateEntropy,
}

impl TestKind {
    pub const ALL: [TestKind; 8] = [
        TestKind::Frequency,
        TestKind::BlockFrequency,
        TestKind::CumulativeSums,
        TestKind::Runs,
        TestKind::LongestRun,
        TestKind::Spectral,
        TestKind::Serial,
        TestKind::ApproximateEntropy,
    ];

    /// Names of the P-values this test produces, in order.
    pub fn outcome_names(self) -> &'static [&'static str] {
        match self {
            TestKind::Frequency => &["frequency"],
            TestKind::BlockFrequency => &["block-frequency"],
            TestKind::CumulativeSums => &["cumulative-sums-forward", "cumulative-sums-reverse"],
            TestKind::Runs => &["runs"],
            TestKind::LongestRun => &["longest-run"],
            TestKind::Spectral => &["spectral"],
            TestKind::Serial => &["serial-1", "serial-2"],
            TestKind::ApproximateEntropy => &["approximate-entropy"],
        }
    }

    fn needs_long_trials(self) -> bool {
        !matches!(self, TestKind::Frequency | TestKind::CumulativeSums | TestKind::Runs)
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown test '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialPlan {
    pub trial_size: u64,
    pub alpha: f64,
    pub tests: Vec<TestKind>,
}

impl Default for TrialPlan {
    fn default() -> Self {
        Self {
            trial_size: DEFAULT_TRIAL_SIZE,
            alpha: DEFAULT_ALPHA,
            tests: TestKind::ALL.to_vec(),
        }
    }
}

impl TrialPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.tests.is_empty() {
            return Err(Error::config("no tests selected"));
        }
        let min = if self.tests.iter().any(|t| t.needs_long_trials()) {
            MIN_BLOCK_TRIAL_BITS
        } else {
            MIN_BITS as u64
        };
        if self.trial_size < min {
            return Err(Error::config(format!(
                "trial size {} is below {min} bits for the selected tests",
                self.trial_size
            )));
        }
        Ok(())
    }
}

/// Block and pattern lengths used for trials of a given size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestParams {
    pub block_frequency_m: usize,
    pub longest_run_m: usize,
    pub serial_m: u32,
    pub approximate_entropy_m: u32,
}

impl TestParams {
    pub fn for_length(n: u64) -> Self {
        let log2 = 63 - n.max(1).leading_zeros();
        Self {
            block_frequency_m: if n >= 1_000_000 { 20_000 } else { 10_000.min(n as usize / 10).max(20) },
            longest_run_m: longest_run_table(n as usize).0,
            serial_m: log2.saturating_sub(3).clamp(2, 16),
            approximate_entropy_m: log2.saturating_sub(6).clamp(1, 10),
        }
    }
}

fn evaluate(kind: TestKind, bits: &[u8], p: &TestParams) -> Result<Vec<f64>> {
    Ok(match kind {
        TestKind::Frequency => vec![frequency_test(bits)?],
        TestKind::BlockFrequency => vec![block_frequency_test(bits, p.block_frequency_m)?],
        TestKind::CumulativeSums => vec![cusum_test(bits, false)?, cusum_test(bits, true)?],
        TestKind::Runs => vec![runs_test(bits)?],
        TestKind::LongestRun => vec![longest_run_test(bits)?],
        TestKind::Spectral => vec![spectral_test(bits)?],
        TestKind::Serial => {
            let (a, b) = serial_test(bits, p.serial_m)?;
            vec![a, b]
        }
        TestKind::ApproximateEntropy => vec![approximate_entropy_test(bits, p.approximate_entropy_m)?],
    })
}

/// Two-sided normal quantile for significance `alpha`.
pub fn z_for_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    norm_quantile(1.0 - alpha / 2.0)
}

/// Wilson score bounds for a possibly fractional success count.
fn wilson_bounds(ns: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let nf = n - ns;
    let centre = (ns + z2 / 2.0) / (n + z2);
    let half = z / (n + z2) * (ns * nf / n + z2 / 4.0).sqrt();
    // the bound at an extreme count is exactly 0 or 1; rounding would miss it
    let lo = if ns <= 0.0 { 0.0 } else { (centre - half).clamp(0.0, 1.0) };
    let hi = if nf <= 0.0 { 1.0 } else { (centre + half).clamp(0.0, 1.0) };
    (lo, hi)
}

/// Wilson score interval for `n_s` successes in `n` trials.
pub fn wilson_interval(n_s: u64, n: u64, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 || n_s > n {
        return Err(Error::domain(format!("invalid counts n_s = {n_s}, n = {n}")));
    }
    Ok(wilson_bounds(n_s as f64, n as f64, z_for_alpha(alpha)?))
}

/// Lowest pass proportion consistent with the expected rate 1 − alpha over `n` trials.
pub fn pass_threshold(n: u64, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("no trials"));
    }
    let z = z_for_alpha(alpha)?;
    Ok(wilson_bounds((1.0 - alpha) * n as f64, n as f64, z).0)
}

/// Number of whole trials in `events` words of `d` bits.
pub fn trial_count(events: u64, d: u32, trial_size: u64) -> u64 {
    events * d as u64 / trial_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: String,
    pub p_values: Vec<f64>,
    pub n: u64,
    pub n_s: u64,
    pub proportion: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Wilson lower bound at the expected pass rate; the test passes when
    /// `proportion` reaches it.
    pub threshold: f64,
    pub pass: bool,
    /// Kolmogorov–Smirnov P-value of the trial P-values against uniform,
    /// reported once there are at least 10 trials.
    pub uniformity_p: Option<f64>,
}

impl TestOutcome {
    pub fn from_p_values(test: impl Into<String>, p_values: Vec<f64>, alpha: f64) -> Result<Self> {
        let n = p_values.len() as u64;
        let n_s = p_values.iter().filter(|&&p| p >= alpha).count() as u64;
        let (ci_low, ci_high) = wilson_interval(n_s, n, alpha)?;
        let threshold = pass_threshold(n, alpha)?;
        let proportion = n_s as f64 / n as f64;
        let uniformity_p = if n >= 10 { Some(ks_uniform(&p_values)?.1) } else { None };
        Ok(Self {
            test: test.into(),
            p_values,
            n,
            n_s,
            proportion,
            ci_low,
            ci_high,
            threshold,
            pass: proportion >= threshold,
            uniformity_p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub per_test: Vec<(String, bool)>,
    pub random: bool,
}

pub fn verdict(outcomes: &[TestOutcome]) -> Verdict {
    let per_test: Vec<_> = outcomes.iter().map(|o| (o.test.clone(), o.pass)).collect();
    Verdict {
        random: per_test.iter().all(|(_, p)| *p),
        per_test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub plan: TrialPlan,
    pub params: TestParams,
    pub n_bits: u64,
    pub outcomes: Vec<TestOutcome>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl SuiteReport {
    /// CSV with one row per test.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["test", "n", "n_s", "proportion", "ci_low", "ci_high", "threshold", "pass"])?;
        for o in &self.outcomes {
            wr.write_record([
                o.test.clone(),
                o.n.to_string(),
                o.n_s.to_string(),
                o.proportion.to_string(),
                o.ci_low.to_string(),
                o.ci_high.to_string(),
                o.threshold.to_string(),
                o.pass.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Splits `bits` into disjoint trials and runs every selected test on each.
pub fn run_test_suite(bits: &[u8], plan: &TrialPlan) -> Result<SuiteReport> {
    plan.validate()?;
    let size = plan.trial_size as usize;
    let trials = bits.len() / size;
    if trials == 0 {
        return Err(Error::InsufficientData(format!(
            "{} bits are fewer than one trial of {size}",
            bits.len()
        )));
    }
    let params = TestParams::for_length(plan.trial_size);
    let per_trial: Vec<Vec<f64>> = bits[..trials * size]
        .par_chunks_exact(size)
        .map(|t| {
            plan.tests
                .iter()
                .map(|&k| evaluate(k, t, &params))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.concat())
        })
        .collect::<Result<_>>()?;
    let names: Vec<&str> = plan.tests.iter().flat_map(|k| k.outcome_names().iter().copied()).collect();
    let outcomes = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            TestOutcome::from_p_values(*name, per_trial.iter().map(|t| t[j]).collect(), plan.alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        plan: plan.clone(),
        params,
        n_bits: bits.len() as u64,
        verdict: verdict(&outcomes),
        outcomes,
        provenance: None,
    })
}
