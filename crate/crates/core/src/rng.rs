//! Counter-based random streams and the Poisson sampler.
//!
//! Every random quantity in a run is drawn from a stream keyed by
//! `(seed, domain, id, sub)`, so any event can be regenerated on its own and
//! parallel shards reproduce the serial output exactly.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use statrs::function::factorial::ln_factorial;

pub type StreamRng = Xoshiro256PlusPlus;

/// Independent purposes that draw randomness within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    PhotonCounts = 1,
    Waveform = 2,
    Synthetic = 3,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the 64-bit key of a stream.
pub fn stream_key(seed: u64, domain: Domain, id: u64, sub: u64) -> u64 {
    let mut h = mix64(seed ^ (domain as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    h = mix64(h ^ id);
    mix64(h ^ sub.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

pub fn stream(seed: u64, domain: Domain, id: u64, sub: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, domain, id, sub))
}

/// Mean below which Poisson variates are drawn by sequential-search inversion.
pub const INVERSION_LIMIT: f64 = 10.0;

/// Draws a Poisson variate.
///
/// Means below [`INVERSION_LIMIT`] use inversion by sequential search from
/// zero (one uniform per draw). Larger means use Hörmann's transformed
/// rejection with squeeze (PTRS), an exact normal-like-hat rejection method
/// consuming two uniforms per trial.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < INVERSION_LIMIT {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u32 {
    let u: f64 = rng.gen();
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        // cdf saturates below 1 in floating point; p is then negligible
        if p < 1e-300 && k as f64 > mean {
            break;
        }
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u32 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u32;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * loglam - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u32;
        }
    }
}
