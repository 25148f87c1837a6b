//! Closed-form photon statistics of coherent light.
//!
//! Everything here is a pure function of its inputs. Fock-space operators are
//! never built; parity, loss and phase averaging are expressed directly as
//! transforms of the photon-number distribution.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Default detector truncation (largest resolvable total photon number).
pub const DEFAULT_N_MAX: u32 = 100;

/// Phases used by [`phase_mixture_parity`] for the numerical phase average.
pub const PHASE_SAMPLES: usize = 64;

/// A coherent state, described by its mean photon number and (inert) phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentSpec {
    nbar: f64,
    phase: f64,
}

impl CoherentSpec {
    pub fn new(nbar: f64, phase: f64) -> Result<Self> {
        check_nbar(nbar)?;
        Ok(Self { nbar, phase })
    }

    pub fn with_nbar(nbar: f64) -> Result<Self> {
        Self::new(nbar, 0.0)
    }

    pub fn nbar(&self) -> f64 {
        self.nbar
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    /// Coherent amplitude |α| = √n̄.
    pub fn amplitude(&self) -> f64 {
        self.nbar.sqrt()
    }
}

/// Residue binning of photon counts modulo `q`, optionally truncated at `n_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModQSpec {
    q: u32,
    n_max: Option<u32>,
}

impl ModQSpec {
    /// Arbitrary modulus `q ≥ 2`. `n_max = None` means no detector truncation.
    pub fn new(q: u32, n_max: Option<u32>) -> Result<Self> {
        if q < 2 {
            return Err(Error::domain(format!("modulus must be at least 2, got {q}")));
        }
        Ok(Self { q, n_max })
    }

    /// Binning into `d`-bit words, `q = 2^d`.
    pub fn bits(d: u32, n_max: Option<u32>) -> Result<Self> {
        if d == 0 || d > 31 {
            return Err(Error::domain(format!("bit depth must be in 1..=31, got {d}")));
        }
        Self::new(1 << d, n_max)
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    /// Bits per symbol when `q` is a power of two.
    pub fn d(&self) -> Option<u32> {
        self.q.is_power_of_two().then(|| self.q.trailing_zeros())
    }

    pub fn n_max(&self) -> Option<u32> {
        self.n_max
    }
}

/// Residue probabilities and their worst deviation from uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub probabilities: Vec<f64>,
    pub max_bias: f64,
    pub truncated: bool,
}

impl BiasReport {
    /// Builds a report from (possibly unnormalized) residue weights.
    pub fn from_weights(weights: &[f64], truncated: bool) -> Self {
        let total: f64 = weights.iter().sum();
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let uniform = 1.0 / probabilities.len() as f64;
        let max_bias = probabilities
            .iter()
            .map(|p| (p - uniform).abs())
            .fold(0.0, f64::max);
        Self {
            probabilities,
            max_bias,
            truncated,
        }
    }

    pub fn q(&self) -> usize {
        self.probabilities.len()
    }

    /// Parity Σ(−1)^k P_k; only meaningful for even `q`.
    pub fn parity(&self) -> f64 {
        alternating_sum(&self.probabilities)
    }
}

fn check_nbar(nbar: f64) -> Result<()> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::domain(format!(
            "mean photon number must be finite and non-negative, got {nbar}"
        )));
    }
    Ok(())
}

/// Number of terms treated as "the whole distribution": n̄ + 20√n̄ + 30.
///
/// The Poisson tail beyond this point is below 1e-40 for every n̄.
pub fn summation_cutoff(nbar: f64) -> u32 {
    (nbar + 20.0 * nbar.sqrt() + 30.0).ceil() as u32
}

/// ln P(n | n̄) for the Poisson law.
pub fn poisson_ln_pmf(nbar: f64, n: u32) -> Result<f64> {
    check_nbar(nbar)?;
    if nbar == 0.0 {
        return Ok(if n == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(-nbar + n as f64 * nbar.ln() - ln_factorial(n as u64))
}

/// e^{−n̄} n̄^n / n!, evaluated through log-factorials.
pub fn poisson_pmf(nbar: f64, n: u32) -> Result<f64> {
    poisson_ln_pmf(nbar, n).map(f64::exp)
}

/// Poisson probabilities for n = 0..=n_last.
pub fn poisson_distribution(nbar: f64, n_last: u32) -> Result<Vec<f64>> {
    check_nbar(nbar)?;
    (0..=n_last).map(|n| poisson_pmf(nbar, n)).collect()
}

/// ⟨Π⟩ = e^{−2n̄} for a coherent state.
pub fn coherent_parity(nbar: f64) -> Result<f64> {
    check_nbar(nbar)?;
    Ok((-2.0 * nbar).exp())
}

/// Natural log of the coherent parity, −2n̄. Useful where e^{−2n̄} would underflow.
pub fn ln_coherent_parity(nbar: f64) -> Result<f64> {
    check_nbar(nbar)?;
    Ok(-2.0 * nbar)
}

/// Σ(−1)^n p_n.
pub fn alternating_sum(pmf: &[f64]) -> f64 {
    pmf.iter()
        .enumerate()
        .map(|(n, p)| if n % 2 == 0 { *p } else { -*p })
        .sum()
}

/// Residue probabilities P_k = Σ_{m ≡ k (mod q)} P(m), renormalized over the
/// kept mass when the distribution is truncated at `n_max`.
pub fn modq_probabilities(spec: &CoherentSpec, modq: &ModQSpec) -> BiasReport {
    let q = modq.q() as usize;
    let cutoff = summation_cutoff(spec.nbar());
    let (last, truncated) = match modq.n_max() {
        Some(n_max) if n_max < cutoff => (n_max, true),
        _ => (cutoff, false),
    };
    let mut weights = vec![0.0; q];
    if spec.nbar() == 0.0 {
        weights[0] = 1.0;
    } else {
        for m in 0..=last {
            // nbar was validated when the CoherentSpec was built.
            weights[m as usize % q] += poisson_pmf(spec.nbar(), m).unwrap_or(0.0);
        }
    }
    BiasReport::from_weights(&weights, truncated)
}

/// The four mod-4 residue probabilities in closed form,
/// ¼(1 + 2e^{−n̄}cos(n̄ − kπ/2) + (−1)^k e^{−2n̄}).
pub fn mod4_closed_form(nbar: f64) -> Result<[f64; 4]> {
    check_nbar(nbar)?;
    let e1 = (-nbar).exp();
    let e2 = (-2.0 * nbar).exp();
    let mut out = [0.0; 4];
    for (k, p) in out.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let angle = nbar - k as f64 * std::f64::consts::FRAC_PI_2;
        *p = 0.25 * (1.0 + 2.0 * e1 * angle.cos() + sign * e2);
    }
    Ok(out)
}

/// exp(−4n̄/q): the approximate scale of the largest biasing term under mod-q binning.
pub fn bias_trend(nbar: f64, q: u32) -> Result<f64> {
    if q < 2 {
        return Err(Error::domain(format!("modulus must be at least 2, got {q}")));
    }
    check_nbar(nbar)?;
    Ok((-4.0 * nbar / q as f64).exp())
}

/// Parity of the coherent signal mixed with an arbitrary environment state.
pub fn parity_with_environment(nbar: f64, env_parity: f64) -> Result<f64> {
    if !(env_parity.abs() <= 1.0) {
        return Err(Error::domain(format!(
            "environment parity must lie in [-1, 1], got {env_parity}"
        )));
    }
    Ok(coherent_parity(nbar)? * env_parity)
}

/// Mean photon number surviving a loss channel of transmission `eta`.
pub fn apply_loss(nbar: f64, eta: f64) -> Result<f64> {
    check_nbar(nbar)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("efficiency must lie in [0, 1], got {eta}")));
    }
    Ok(eta * nbar)
}

/// Photon-number distribution of a uniformly phase-averaged coherent state,
/// computed from the complex Fock amplitudes at `phases` equally spaced phases.
pub fn phase_averaged_distribution(nbar: f64, phases: usize, n_last: u32) -> Result<Vec<f64>> {
    check_nbar(nbar)?;
    if phases == 0 {
        return Err(Error::domain("at least one phase sample is required"));
    }
    let r = nbar.sqrt();
    let mut avg = vec![0.0; n_last as usize + 1];
    for j in 0..phases {
        let phi = std::f64::consts::TAU * j as f64 / phases as f64;
        for (n, slot) in avg.iter_mut().enumerate() {
            // ⟨n|r e^{iφ}⟩ = e^{-r²/2} r^n e^{inφ} / √n!
            let modulus = if nbar == 0.0 {
                if n == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-0.5 * nbar + n as f64 * r.ln() - 0.5 * ln_factorial(n as u64)).exp()
            };
            let (s, c) = (n as f64 * phi).sin_cos();
            let (re, im) = (modulus * c, modulus * s);
            *slot += re * re + im * im;
        }
    }
    for p in avg.iter_mut() {
        *p /= phases as f64;
    }
    Ok(avg)
}

/// Parity of a uniform phase mixture of coherent states with mean `nbar`.
///
/// The phase-averaged number distribution is computed numerically and checked
/// against the Poisson law term by term (tolerance 1e-12) before the analytic
/// value e^{−2n̄} is returned.
pub fn phase_mixture_parity(nbar: f64) -> Result<f64> {
    let last = summation_cutoff(nbar);
    let mixed = phase_averaged_distribution(nbar, PHASE_SAMPLES, last)?;
    for (n, p) in mixed.iter().enumerate() {
        let poisson = poisson_pmf(nbar, n as u32)?;
        if (p - poisson).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "phase-averaged distribution departs from Poisson at n={n}: {p} vs {poisson}"
            )));
        }
    }
    coherent_parity(nbar)
}

/// One row of the `theory` subcommand output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub nbar: f64,
    pub q: u32,
    pub n_max: Option<u32>,
    pub probabilities: Vec<f64>,
    pub max_bias: f64,
}

impl TheoryRecord {
    pub fn evaluate(nbar: f64, modq: ModQSpec) -> Result<Self> {
        let spec = CoherentSpec::with_nbar(nbar)?;
        let report = modq_probabilities(&spec, &modq);
        Ok(Self {
            nbar,
            q: modq.q(),
            n_max: modq.n_max(),
            probabilities: report.probabilities,
            max_bias: report.max_bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bias(nbar: f64, q: u32, n_max: Option<u32>) -> BiasReport {
        modq_probabilities(
            &CoherentSpec::with_nbar(nbar).unwrap(),
            &ModQSpec::new(q, n_max).unwrap(),
        )
    }

    #[test]
    fn pmf_examples() {
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 3).unwrap(), 0.0);
        assert_abs_diff_eq!(poisson_pmf(1.0, 1).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        let total: f64 = (0..=200).map(|n| poisson_pmf(1.0, n).unwrap()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);

        let p = poisson_pmf(57.0, 57).unwrap();
        // 30-digit reference: 0.052763999924414018...
        assert_abs_diff_eq!(p, 0.052763999924414018, epsilon = 1e-14);
        assert!(p < 1.0 / (2.0 * std::f64::consts::PI * 57.0).sqrt());
    }

    #[test]
    fn negative_nbar_rejected() {
        assert!(matches!(poisson_pmf(-0.1, 0), Err(Error::Domain(_))));
        assert!(coherent_parity(-1.0).is_err());
        assert!(CoherentSpec::with_nbar(f64::NAN).is_err());
    }

    #[test]
    fn parity_examples() {
        assert_eq!(coherent_parity(0.0).unwrap(), 1.0);
        let p57 = coherent_parity(57.0).unwrap();
        assert!(p57 > 0.0 && p57.log10() > -50.0 && p57.log10() < -49.0);
        assert_eq!(ln_coherent_parity(57.0).unwrap(), -114.0);

        let alt: f64 = alternating_sum(&poisson_distribution(0.5, 60).unwrap());
        assert_abs_diff_eq!(coherent_parity(0.5).unwrap(), alt, epsilon = 1e-12);
        assert_abs_diff_eq!(coherent_parity(0.5).unwrap(), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn modq_examples() {
        assert_eq!(bias(0.0, 4, None).probabilities, vec![1.0, 0.0, 0.0, 0.0]);
        let r = bias(1.0, 4, None);
        assert_abs_diff_eq!(r.probabilities[0], 0.383217, epsilon = 1e-6);
        let closed = 0.25 * (1.0 + 2.0 * (-1.0f64).exp() * 1.0f64.cos() + (-2.0f64).exp());
        assert_abs_diff_eq!(r.probabilities[0], closed, epsilon = 1e-12);
        assert!(!r.truncated);
        assert!(bias(57.0, 8, Some(100)).truncated);
    }

    #[test]
    fn truncated_bias_at_57_matches_high_precision_reference() {
        // Reference values from 50-digit summation of the renormalized truncated law.
        let cases = [
            (2, 1.3178780816995559e-08),
            (4, 2.2266058076637755e-08),
            (8, 2.6478659592617035e-08),
            (16, 0.0016055819747796756),
            (32, 0.021545578586681425),
        ];
        for (q, expected) in cases {
            let got = bias(57.0, q, Some(100)).max_bias;
            assert!(
                (got - expected).abs() < 1e-12 + 1e-6 * expected,
                "q={q}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn bias_trend_examples() {
        assert_abs_diff_eq!(
            bias_trend(57.0, 2).unwrap(),
            (-114.0f64).exp(),
            epsilon = 1e-60
        );
        let t16 = bias_trend(57.0, 16).unwrap();
        assert!((t16 / 6.4760e-7 - 1.0).abs() < 1e-4, "{t16}");
        let t32 = bias_trend(57.0, 32).unwrap();
        assert!((t32 / 8.0473e-4 - 1.0).abs() < 1e-4, "{t32}");
        assert!(bias_trend(57.0, 1).is_err());
        // ordering: larger modulus, larger bias scale
        let trends: Vec<f64> = [2, 4, 8, 16, 32]
            .iter()
            .map(|&q| bias_trend(57.0, q).unwrap())
            .collect();
        assert!(trends.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn environment_parity() {
        assert_eq!(parity_with_environment(1.3, 1.0).unwrap(), coherent_parity(1.3).unwrap());
        assert_eq!(parity_with_environment(1.3, 0.0).unwrap(), 0.0);
        // thermal environment with m̄ = 0.5: Σ(−1)^m m̄^m/(1+m̄)^{m+1}
        let mbar: f64 = 0.5;
        let env: f64 = (0..400)
            .map(|m| (-1.0f64).powi(m) * mbar.powi(m) / (1.0 + mbar).powi(m + 1))
            .sum();
        assert_abs_diff_eq!(env, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(
            parity_with_environment(1.0, env).unwrap(),
            0.0676676,
            epsilon = 1e-7
        );
        assert!(parity_with_environment(1.0, 1.01).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(apply_loss(57.0, 1.0).unwrap(), 57.0);
        assert_eq!(apply_loss(57.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(apply_loss(100.0, 0.9).unwrap(), 90.0, epsilon = 1e-12);
        assert!(apply_loss(1.0, 1.5).is_err());
        assert!(apply_loss(1.0, -0.1).is_err());
    }

    #[test]
    fn phase_mixture_examples() {
        assert_eq!(phase_mixture_parity(0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(phase_mixture_parity(2.0).unwrap(), 0.0183156, epsilon = 1e-7);
        let p57 = phase_mixture_parity(57.0).unwrap();
        assert!(p57.log10() > -50.0 && p57.log10() < -49.0);
        let mixed = phase_averaged_distribution(2.0, PHASE_SAMPLES, 40).unwrap();
        let alt = alternating_sum(&mixed);
        assert_abs_diff_eq!(alt, (-4.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn modq_spec_validation() {
        assert!(ModQSpec::new(1, None).is_err());
        assert_eq!(ModQSpec::bits(3, Some(100)).unwrap().q(), 8);
        assert_eq!(ModQSpec::new(8, None).unwrap().d(), Some(3));
        assert_eq!(ModQSpec::new(6, None).unwrap().d(), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pmf_mass_within_cutoff(nbar in 0.0f64..60.0) {
                let last = summation_cutoff(nbar);
                let total: f64 = (0..=last).map(|n| poisson_pmf(nbar, n).unwrap()).sum();
                prop_assert!(total >= 1.0 - 1e-12);
            }

            #[test]
            fn mod2_matches_parity_closed_form(nbar in 0.0f64..60.0) {
                let r = bias(nbar, 2, None);
                let e = (-2.0 * nbar).exp();
                prop_assert!((r.probabilities[0] - 0.5 * (1.0 + e)).abs() < 1e-12);
                prop_assert!((r.probabilities[1] - 0.5 * (1.0 - e)).abs() < 1e-12);
            }

            #[test]
            fn refinement_consistency(nbar in 0.0f64..60.0, d in 1u32..5, n_max in prop::option::of(20u32..150)) {
                let q = 1u32 << d;
                let coarse = bias(nbar, q, n_max);
                let fine = bias(nbar, 2 * q, n_max);
                for k in 0..q as usize {
                    let merged = fine.probabilities[k] + fine.probabilities[k + q as usize];
                    prop_assert!((merged - coarse.probabilities[k]).abs() < 1e-12);
                }
            }

            #[test]
            fn parity_from_residues(nbar in 0.0f64..60.0, d in 1u32..6) {
                let r = bias(nbar, 1 << d, None);
                prop_assert!((r.parity() - coherent_parity(nbar).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn report_is_a_distribution(nbar in 0.0f64..80.0, q in 2u32..40, n_max in prop::option::of(1u32..150)) {
                let r = bias(nbar, q, n_max);
                let total: f64 = r.probabilities.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(r.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
                prop_assert!(r.max_bias >= 0.0);
            }
        }
    }

    #[test]
    fn max_bias_non_increasing_in_nbar() {
        for q in [2u32, 4, 8, 16, 32] {
            let mut prev = f64::INFINITY;
            for nbar in 1..=60 {
                let b = bias(nbar as f64, q, None).max_bias;
                // below ~1e-16 the sum is at rounding level and no longer ordered
                if prev > 1e-14 {
                    assert!(b <= prev + 1e-15, "q={q} nbar={nbar}: {b} > {prev}");
                }
                prev = b;
            }
        }
    }
}
