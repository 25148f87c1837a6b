//! Photon-number calibration from pulse-area histograms.
//!
//! The fit runs in three steps:
//!
//! 1. Peak finding. Prominent local maxima of a lightly smoothed histogram
//!    seed the comb. The comb is then extended outwards one peak at a time by
//!    extrapolating the local spacing, accepting a predicted peak when enough
//!    events sit near it. This recovers sparse peaks in the tails of the
//!    photon-number distribution.
//! 2. Expectation-maximization on the binned data.
//! 3. A Levenberg–Marquardt polish of the bin-integrated mixture with weights
//!    `1/model`. Its fixed point is the Poisson maximum-likelihood fit.
//!
//! Components are labelled with photon numbers by extrapolating the first few
//! means back to zero area, unless the caller fixes the first label.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector::MAX_PHOTONS_PER_CHANNEL;
use crate::error::{Error, Result};
use crate::stats::{norm_cdf, norm_pdf, norm_sf};

/// Most components a fit may return: photon numbers 1..=37 plus one beyond
/// the resolvable range, which fixes where resolution ends.
pub const MAX_COMPONENTS: usize = MAX_PHOTONS_PER_CHANNEL as usize + 1;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl AreaHistogram {
    pub fn new(bin_edges: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if bin_edges.len() != counts.len() + 1 || counts.is_empty() {
            return Err(Error::domain("histogram needs len(edges) = len(counts) + 1 ≥ 2"));
        }
        if bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("histogram edges must be strictly ascending"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            bin_edges,
            counts,
            total,
        })
    }

    /// Bins whose widths grow geometrically by `ratio`, spanning the positive
    /// values. Non-positive values (pulses that never triggered) are skipped.
    pub fn geometric(values: &[f64], ratio: f64) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(Error::domain(format!("bin ratio must exceed 1, got {ratio}")));
        }
        let pos = values.iter().copied().filter(|&v| v > 0.0 && v.is_finite());
        let (lo, hi) = pos.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            return Err(Error::EmptyData("no positive areas to histogram".into()));
        }
        let lo = lo / ratio;
        let lr = ratio.ln();
        let nbins = (((hi * ratio) / lo).ln() / lr).ceil().max(1.0) as usize;
        let edges: Vec<f64> = (0..=nbins).map(|i| lo * (i as f64 * lr).exp()).collect();
        let mut counts = vec![0u64; nbins];
        for v in values.iter().copied().filter(|&v| v > 0.0 && v.is_finite()) {
            let i = (((v / lo).ln() / lr).floor() as usize).min(nbins - 1);
            // guard against rounding at bin boundaries
            let i = if v < edges[i] {
                i - 1
            } else if v >= edges[i + 1] && i + 1 < nbins {
                i + 1
            } else {
                i
            };
            counts[i] += 1;
        }
        Self::new(edges, counts)
    }

    /// `nbins` equal bins over `[lo, hi)`; values outside are dropped.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, nbins: usize) -> Result<Self> {
        if !(hi > lo) || nbins == 0 {
            return Err(Error::domain("uniform histogram needs hi > lo and nbins > 0"));
        }
        let w = (hi - lo) / nbins as f64;
        let edges = (0..=nbins).map(|i| lo + i as f64 * w).collect();
        let mut counts = vec![0u64; nbins];
        for &v in values {
            if v >= lo && v < hi {
                counts[(((v - lo) / w) as usize).min(nbins - 1)] += 1;
            }
        }
        Self::new(edges, counts)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.bin_edges[i] + self.bin_edges[i + 1])
    }

    /// Index of the first bin whose upper edge exceeds `x`.
    fn bin_of(&self, x: f64) -> usize {
        self.bin_edges[1..].partition_point(|&e| e <= x).min(self.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussComponent {
    pub n: u32,
    pub mu: f64,
    pub sigma: f64,
    pub weight: f64,
}

impl GaussComponent {
    /// Probability mass in `[a, b)`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        gauss_mass(self.mu, self.sigma, a, b)
    }
}

fn gauss_mass(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (za, zb) = ((a - mu) / sigma, (b - mu) / sigma);
    if za > 0.0 {
        norm_sf(za) - norm_sf(zb)
    } else {
        norm_cdf(zb) - norm_cdf(za)
    }
}

/// How "normalized Gaussians" are compared when placing bin edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeRule {
    /// Unit-amplitude Gaussians; the edge lies where both reach the same height.
    #[default]
    PeakNormalized,
    /// Unit-area Gaussians.
    AreaNormalized,
}

/// Options for [`fit_mixture`] and [`Calibration::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub k_max: usize,
    pub window_frac: Option<f64>,
    pub overlap_threshold: f64,
    pub edge_rule: EdgeRule,
    /// Width ratio of consecutive histogram bins.
    pub bin_ratio: f64,
    /// Events needed near a predicted position to accept an extrapolated peak.
    pub min_peak_count: u64,
    /// Photon number of the lowest fitted component; inferred when absent.
    pub first_n: Option<u32>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            k_max: MAX_COMPONENTS,
            window_frac: None,
            overlap_threshold: 0.25,
            edge_rule: EdgeRule::PeakNormalized,
            bin_ratio: 1.001,
            min_peak_count: 5,
            first_n: None,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 || self.k_max > MAX_COMPONENTS {
            return Err(Error::config(format!("k_max must be in 1..={MAX_COMPONENTS}, got {}", self.k_max)));
        }
        if let Some(f) = self.window_frac {
            if !(f > 0.0) {
                return Err(Error::config(format!("window_frac must be positive, got {f}")));
            }
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(Error::config("overlap_threshold must lie in (0,1)"));
        }
        if !(self.bin_ratio > 1.0) {
            return Err(Error::config("bin_ratio must exceed 1"));
        }
        Ok(())
    }
}

/// Quality summary of a mixture fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub r_squared: f64,
    pub deviance: f64,
    pub em_iterations: usize,
    pub lm_iterations: usize,
    pub n_components: usize,
    pub first_n: u32,
    pub fit_range: (f64, f64),
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------- peaks

struct Peak {
    mu: f64,
    sigma: f64,
}

fn smooth(counts: &[u64], width: f64) -> Vec<f64> {
    let r = (4.0 * width).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / width).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let n = counts.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, k) in (-r..=r).zip(&kernel) {
                let idx = i + j;
                if (0..n).contains(&idx) {
                    acc += k * counts[idx as usize] as f64;
                }
            }
            acc / norm
        })
        .collect()
}

/// Topographic prominence of the local maximum at `i`.
fn prominence(y: &[f64], i: usize) -> f64 {
    let h = y[i];
    let mut left_min = h;
    let mut j = i;
    while j > 0 {
        j -= 1;
        if y[j] > h {
            break;
        }
        left_min = left_min.min(y[j]);
    }
    if j == 0 && y[0] <= h {
        left_min = left_min.min(0.0);
    }
    let mut right_min = h;
    let mut j = i;
    while j + 1 < y.len() {
        j += 1;
        if y[j] > h {
            break;
        }
        right_min = right_min.min(y[j]);
    }
    if j + 1 == y.len() && y[j] <= h {
        right_min = right_min.min(0.0);
    }
    h - left_min.max(right_min)
}

const SMOOTH_BINS: f64 = 2.0;
const MIN_PEAK_HEIGHT: f64 = 10.0;
const MIN_PROMINENCE_RATIO: f64 = 0.5;
/// Half-width of the search window around an extrapolated peak, in units of
/// the local peak spacing.
const SEARCH_HALF_WIDTH: f64 = 0.35;

fn strong_peaks(h: &AreaHistogram) -> Vec<Peak> {
    let y = smooth(&h.counts, SMOOTH_BINS);
    let mut peaks = Vec::new();
    for i in 0..y.len() {
        let left = if i > 0 { y[i - 1] } else { 0.0 };
        let right = if i + 1 < y.len() { y[i + 1] } else { 0.0 };
        if !(y[i] > left && y[i] >= right && y[i] >= MIN_PEAK_HEIGHT) {
            continue;
        }
        if prominence(&y, i) < MIN_PROMINENCE_RATIO * y[i] {
            continue;
        }
        // width from the half-maximum crossings of the smoothed curve
        let half = 0.5 * y[i];
        let mut lo = i;
        while lo > 0 && y[lo] > half {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < y.len() && y[hi] > half {
            hi += 1;
        }
        let fwhm = h.center(hi) - h.center(lo);
        peaks.push(Peak {
            mu: h.center(i),
            sigma: (fwhm / 2.3548).max(h.bin_edges[i + 1] - h.bin_edges[i]),
        });
    }
    peaks
}

/// Count, mean and standard deviation of the histogram restricted to `[a, b)`.
fn window_moments(h: &AreaHistogram, a: f64, b: f64) -> (u64, f64, f64) {
    let (i0, i1) = (h.bin_of(a), h.bin_of(b));
    let (mut n, mut s, mut s2) = (0u64, 0.0, 0.0);
    for i in i0..=i1 {
        let x = h.center(i);
        if x < a || x >= b {
            continue;
        }
        let c = h.counts[i];
        n += c;
        s += c as f64 * x;
        s2 += c as f64 * x * x;
    }
    if n == 0 {
        return (0, 0.5 * (a + b), 0.0);
    }
    let m = s / n as f64;
    (n, m, (s2 / n as f64 - m * m).max(0.0).sqrt())
}

/// Looks for a peak near `pred`, given the local spacing. Returns the
/// refined peak if at least `min_count` events lie in the search window.
fn probe(h: &AreaHistogram, pred: f64, spacing: f64, min_count: u64) -> Option<Peak> {
    let half = SEARCH_HALF_WIDTH * spacing;
    let (lo_edge, hi_edge) = (h.bin_edges[0], h.bin_edges[h.len()]);
    if pred - half < lo_edge || pred + half > hi_edge {
        return None;
    }
    let mut center = pred;
    let mut result = None;
    for _ in 0..3 {
        let (n, m, sd) = window_moments(h, center - half, center + half);
        if n < min_count {
            return None;
        }
        result = Some(Peak {
            mu: m,
            sigma: sd.max(1e-3 * spacing),
        });
        // recentre, but never drift more than half a window from the prediction
        center = m.clamp(pred - 0.5 * half, pred + 0.5 * half);
    }
    result
}

fn find_peaks(h: &AreaHistogram, min_count: u64, k_max: usize) -> Vec<Peak> {
    let mut peaks = strong_peaks(h);
    if peaks.len() >= 2 {
        // extend downwards
        loop {
            let (p0, p1) = (&peaks[0], &peaks[1]);
            let d1 = p1.mu - p0.mu;
            let d2 = peaks.get(2).map_or(d1, |p2| p2.mu - p1.mu);
            let spacing = (d1 + (d1 - d2)).clamp(0.5 * d1, 1.5 * d1);
            match probe(h, p0.mu - spacing, spacing, min_count) {
                Some(p) if p.mu < peaks[0].mu - 0.5 * spacing => peaks.insert(0, p),
                _ => break,
            }
            if peaks.len() > 2 * k_max {
                break;
            }
        }
        // extend upwards
        loop {
            let k = peaks.len();
            let (p0, p1) = (&peaks[k - 2], &peaks[k - 1]);
            let d1 = p1.mu - p0.mu;
            let d2 = if k >= 3 { p0.mu - peaks[k - 3].mu } else { d1 };
            let spacing = (d1 + (d1 - d2)).clamp(0.5 * d1, 1.5 * d1);
            match probe(h, p1.mu + spacing, spacing, min_count) {
                Some(p) if p.mu > peaks[k - 1].mu + 0.5 * spacing => peaks.push(p),
                _ => break,
            }
            if peaks.len() > 2 * k_max {
                break;
            }
        }
    }
    peaks.truncate(k_max);
    peaks
}

// ---------------------------------------------------------------- fitting

/// Bin range `[lo, hi)` where a component with these parameters matters.
fn reach(h: &AreaHistogram, mu: f64, sigma: f64, lo: usize, hi: usize) -> (usize, usize) {
    let a = h.bin_of(mu - 10.0 * sigma).max(lo);
    let b = (h.bin_of(mu + 10.0 * sigma) + 1).min(hi);
    (a, b.max(a))
}

struct Mixture {
    amp: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl Mixture {
    fn len(&self) -> usize {
        self.mu.len()
    }

    fn model(&self, h: &AreaHistogram, lo: usize, hi: usize) -> Vec<f64> {
        let mut m = vec![0.0; hi - lo];
        for k in 0..self.len() {
            let (a, b) = reach(h, self.mu[k], self.sigma[k], lo, hi);
            for i in a..b {
                m[i - lo] += self.amp[k] * gauss_mass(self.mu[k], self.sigma[k], h.bin_edges[i], h.bin_edges[i + 1]);
            }
        }
        m
    }
}

fn deviance(counts: &[u64], model: &[f64]) -> f64 {
    2.0 * counts
        .iter()
        .zip(model)
        .map(|(&c, &m)| {
            let m = m.max(1e-300);
            let c = c as f64;
            if c > 0.0 {
                c * (c / m).ln() - (c - m)
            } else {
                m
            }
        })
        .sum::<f64>()
}

const EM_MAX_ITER: usize = 200;
const LM_MAX_ITER: usize = 200;

fn em(h: &AreaHistogram, mix: &mut Mixture, lo: usize, hi: usize) -> usize {
    let k = mix.len();
    let mut iters = 0;
    for _ in 0..EM_MAX_ITER {
        iters += 1;
        let model = mix.model(h, lo, hi);
        let mut nk = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for j in 0..k {
            let (a, b) = reach(h, mix.mu[j], mix.sigma[j], lo, hi);
            for i in a..b {
                let c = h.counts[i] as f64;
                if c == 0.0 || model[i - lo] <= 0.0 {
                    continue;
                }
                let p = mix.amp[j]
                    * gauss_mass(mix.mu[j], mix.sigma[j], h.bin_edges[i], h.bin_edges[i + 1])
                    / model[i - lo];
                let w = c * p;
                let x = h.center(i);
                nk[j] += w;
                s1[j] += w * x;
                s2[j] += w * x * x;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if nk[j] <= 0.0 {
                continue;
            }
            let mu = s1[j] / nk[j];
            let bw = {
                let i = h.bin_of(mu);
                h.bin_edges[i + 1] - h.bin_edges[i]
            };
            // Sheppard's correction for the bin width
            let var = (s2[j] / nk[j] - mu * mu - bw * bw / 12.0).max(0.25 * bw * bw);
            shift = shift.max((mu - mix.mu[j]).abs() / mix.sigma[j]);
            mix.mu[j] = mu;
            mix.sigma[j] = var.sqrt();
            mix.amp[j] = nk[j];
        }
        if shift < 1e-6 {
            break;
        }
    }
    iters
}

fn lm(h: &AreaHistogram, mix: &mut Mixture, lo: usize, hi: usize) -> Result<(usize, f64)> {
    let k = mix.len();
    let np = 3 * k;
    let counts = &h.counts[lo..hi];
    let mut model = mix.model(h, lo, hi);
    let mut dev = deviance(counts, &model);
    let mut lambda = 1e-3;
    let mut iters = 0;
    while iters < LM_MAX_ITER {
        iters += 1;
        // Jacobian rows are sparse: each bin sees only nearby components.
        let mut jtj = DMatrix::<f64>::zeros(np, np);
        let mut jtr = DVector::<f64>::zeros(np);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); hi - lo];
        for j in 0..k {
            let (mu, s, a) = (mix.mu[j], mix.sigma[j], mix.amp[j]);
            let (b0, b1) = reach(h, mu, s, lo, hi);
            for i in b0..b1 {
                let (za, zb) = ((h.bin_edges[i] - mu) / s, (h.bin_edges[i + 1] - mu) / s);
                let p = gauss_mass(mu, s, h.bin_edges[i], h.bin_edges[i + 1]);
                let (pa, pb) = (norm_pdf(za), norm_pdf(zb));
                let r = &mut rows[i - lo];
                r.push((3 * j, a * p));
                r.push((3 * j + 1, -a * (pb - pa) / s));
                r.push((3 * j + 2, -a * (zb * pb - za * pa)));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let m = model[i].max(1e-9);
            let w = 1.0 / m;
            let res = counts[i] as f64 - model[i];
            for &(p, dp) in row {
                jtr[p] += w * dp * res;
                for &(q, dq) in row {
                    jtj[(p, q)] += w * dp * dq;
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for p in 0..np {
                a[(p, p)] += lambda * jtj[(p, p)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let trial = Mixture {
                amp: (0..k).map(|j| mix.amp[j] * step[3 * j].clamp(-5.0, 5.0).exp()).collect(),
                mu: (0..k).map(|j| mix.mu[j] + step[3 * j + 1]).collect(),
                sigma: (0..k).map(|j| mix.sigma[j] * step[3 * j + 2].clamp(-5.0, 5.0).exp()).collect(),
            };
            let ok = trial.mu.iter().chain(&trial.sigma).chain(&trial.amp).all(|v| v.is_finite());
            let tmodel = if ok { trial.model(h, lo, hi) } else { Vec::new() };
            let tdev = if ok { deviance(counts, &tmodel) } else { f64::INFINITY };
            if tdev <= dev {
                let gain = dev - tdev;
                *mix = trial;
                model = tmodel;
                dev = tdev;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if gain <= 1e-9 * dev.max(1.0) {
                    return Ok((iters, dev));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !dev.is_finite() {
        return Err(Error::Fit {
            iterations: iters,
            reason: "deviance is not finite".into(),
        });
    }
    Ok((iters, dev))
}

/// Photon number of the lowest component, from a straight-line fit of the
/// first few means against their index extrapolated to zero area.
fn infer_first_n(mu: &[f64]) -> u32 {
    let m = mu.len().min(4);
    if m < 2 {
        return 1;
    }
    let xs: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let xm = xs.iter().sum::<f64>() / m as f64;
    let ym = mu[..m].iter().sum::<f64>() / m as f64;
    let sxy: f64 = xs.iter().zip(&mu[..m]).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    (intercept / slope).round().max(1.0) as u32
}

/// Fits a sum of Gaussians to an area histogram.
pub fn fit_mixture(hist: &AreaHistogram, opts: &CalibrationOptions) -> Result<(Vec<GaussComponent>, FitReport)> {
    opts.validate()?;
    if hist.total == 0 {
        return Err(Error::EmptyData("area histogram is empty".into()));
    }
    let mut warnings = Vec::new();
    let peaks = find_peaks(hist, opts.min_peak_count, opts.k_max);
    if peaks.is_empty() {
        return Err(Error::Fit {
            iterations: 0,
            reason: "no peaks found in the area histogram".into(),
        });
    }
    if peaks.len() < opts.k_max {
        let msg = format!("found {} peaks, fewer than k_max = {}", peaks.len(), opts.k_max);
        warnings.push(msg);
    }
    let first = &peaks[0];
    let last = &peaks[peaks.len() - 1];
    let lo = hist.bin_of(first.mu - 6.0 * first.sigma);
    let hi = hist.bin_of(last.mu + 6.0 * last.sigma) + 1;

    let mut mix = Mixture {
        amp: Vec::new(),
        mu: Vec::new(),
        sigma: Vec::new(),
    };
    for (j, p) in peaks.iter().enumerate() {
        // keep initial widths below a third of the distance to the neighbours
        let gap = [j.checked_sub(1).map(|i| p.mu - peaks[i].mu), peaks.get(j + 1).map(|q| q.mu - p.mu)]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        let sigma = p.sigma.min(gap / 3.0);
        let (n, _, _) = window_moments(hist, p.mu - 2.0 * sigma, p.mu + 2.0 * sigma);
        mix.amp.push((n as f64).max(1.0));
        mix.mu.push(p.mu);
        mix.sigma.push(sigma);
    }

    let em_iterations = em(hist, &mut mix, lo, hi);
    let (lm_iterations, dev) = lm(hist, &mut mix, lo, hi)?;

    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| mix.mu[a].total_cmp(&mix.mu[b]));
    let mu: Vec<f64> = order.iter().map(|&j| mix.mu[j]).collect();
    if mu.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Fit {
            iterations: em_iterations + lm_iterations,
            reason: "two components converged to the same mean".into(),
        });
    }
    let first_n = opts.first_n.unwrap_or_else(|| infer_first_n(&mu));

    let model = mix.model(hist, lo, hi);
    let counts = &hist.counts[lo..hi];
    let mean = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
    let ss_tot: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum();
    let ss_res: f64 = counts.iter().zip(&model).map(|(&c, m)| (c as f64 - m).powi(2)).sum();

    let total = hist.total as f64;
    let components = order
        .iter()
        .enumerate()
        .map(|(i, &j)| GaussComponent {
            n: first_n + i as u32,
            mu: mix.mu[j],
            sigma: mix.sigma[j],
            weight: mix.amp[j] / total,
        })
        .collect::<Vec<_>>();
    let report = FitReport {
        r_squared: 1.0 - ss_res / ss_tot,
        deviance: dev,
        em_iterations,
        lm_iterations,
        n_components: components.len(),
        first_n,
        fit_range: (hist.bin_edges[lo], hist.bin_edges[hi]),
        warnings,
    };
    Ok((components, report))
}

// ---------------------------------------------------------------- edges

/// Decision boundary between two adjacent components.
pub fn edge_between(a: &GaussComponent, b: &GaussComponent, rule: EdgeRule) -> Result<f64> {
    if !(b.mu > a.mu) {
        return Err(Error::domain("component means must be strictly increasing"));
    }
    if b.mu - a.mu < 0.5 * (a.sigma + b.sigma) {
        return Err(Error::Unresolvable(format!(
            "components at {:.6} and {:.6} are closer than half their summed widths",
            a.mu, b.mu
        )));
    }
    let peak = (a.mu * b.sigma + b.mu * a.sigma) / (a.sigma + b.sigma);
    match rule {
        EdgeRule::PeakNormalized => Ok(peak),
        EdgeRule::AreaNormalized => {
            // ln N(x; a) = ln N(x; b) as a quadratic in x
            let (s1, s2) = (a.sigma * a.sigma, b.sigma * b.sigma);
            let qa = 1.0 / s1 - 1.0 / s2;
            let qb = -2.0 * (a.mu / s1 - b.mu / s2);
            let qc = a.mu * a.mu / s1 - b.mu * b.mu / s2 + 2.0 * (a.sigma / b.sigma).ln();
            if qa.abs() < 1e-15 * (1.0 / s1) {
                return Ok(-qc / qb);
            }
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return Ok(peak);
            }
            let sq = disc.sqrt();
            let roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
            Ok(roots
                .into_iter()
                .find(|&x| x > a.mu && x < b.mu)
                .unwrap_or(peak))
        }
    }
}

/// Edges between consecutive components under the peak-normalized rule.
pub fn place_edges(components: &[GaussComponent]) -> Result<Vec<f64>> {
    place_edges_with(components, EdgeRule::PeakNormalized)
}

pub fn place_edges_with(components: &[GaussComponent], rule: EdgeRule) -> Result<Vec<f64>> {
    components.windows(2).map(|w| edge_between(&w[0], &w[1], rule)).collect()
}

/// Height of the unit-amplitude Gaussian of `c` at `x`.
fn normalized_height(c: &GaussComponent, x: f64) -> f64 {
    (-0.5 * ((x - c.mu) / c.sigma).powi(2)).exp()
}

// ---------------------------------------------------------------- calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schema_version: u32,
    pub components: Vec<GaussComponent>,
    pub edges: Vec<f64>,
    pub overflow_edge: f64,
    pub window_frac: Option<f64>,
    pub edge_rule: EdgeRule,
    pub overlap_threshold: f64,
}

/// Why an event was not assigned a photon number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    Overflow,
    OutsideWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Photons(u32),
    Discard(DiscardReason),
}

impl Calibration {
    /// Builds a calibration from fitted components.
    ///
    /// Resolution ends at the first adjacent pair that is unresolvable or
    /// whose normalized Gaussians overlap above the threshold at their edge,
    /// and in any case after photon number 37. The last resolved bin then
    /// closes at the edge to the next component, or at μ + 3σ when there is
    /// none.
    pub fn build(components: &[GaussComponent], opts: &CalibrationOptions) -> Result<Self> {
        opts.validate()?;
        if components.is_empty() {
            return Err(Error::EmptyData("no components to calibrate with".into()));
        }
        if components.windows(2).any(|w| !(w[1].mu > w[0].mu)) {
            return Err(Error::domain("component means must be strictly increasing"));
        }
        let mut edges = Vec::new();
        let mut overflow_edge = None;
        let mut kept = 1;
        for (i, w) in components.windows(2).enumerate() {
            let stop_label = w[0].n >= MAX_PHOTONS_PER_CHANNEL;
            match edge_between(&w[0], &w[1], opts.edge_rule) {
                Ok(e) => {
                    let overlap = normalized_height(&w[0], e).max(normalized_height(&w[1], e));
                    if stop_label || overlap > opts.overlap_threshold {
                        overflow_edge = Some(e);
                        break;
                    }
                    edges.push(e);
                    kept = i + 2;
                }
                Err(Error::Unresolvable(_)) => {
                    // nothing separates the pair, so resolution ends at the lower mean's upper tail
                    overflow_edge = Some(w[0].mu + 0.5 * (w[1].mu - w[0].mu));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let comps: Vec<GaussComponent> = components[..kept].to_vec();
        let last = comps[comps.len() - 1];
        let overflow_edge = overflow_edge.unwrap_or(last.mu + 3.0 * last.sigma);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            components: comps,
            edges,
            overflow_edge,
            window_frac: opts.window_frac,
            edge_rule: opts.edge_rule,
            overlap_threshold: opts.overlap_threshold,
        })
    }

    /// Calibration of a channel that never triggered: zero area is vacuum and
    /// any pulse is overflow.
    pub fn vacuum_only(opts: &CalibrationOptions) -> Result<Self> {
        opts.validate()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            components: Vec::new(),
            edges: Vec::new(),
            overflow_edge: 0.0,
            window_frac: opts.window_frac,
            edge_rule: opts.edge_rule,
            overlap_threshold: opts.overlap_threshold,
        })
    }

    pub fn with_window(mut self, window_frac: Option<f64>) -> Result<Self> {
        if let Some(f) = window_frac {
            if !(f > 0.0) {
                return Err(Error::domain(format!("window_frac must be positive, got {f}")));
            }
        }
        self.window_frac = window_frac;
        Ok(self)
    }

    /// Lowest calibrated photon number, or 0 without components.
    pub fn first_n(&self) -> u32 {
        self.components.first().map_or(0, |c| c.n)
    }

    /// Highest calibrated photon number, or 0 without components.
    pub fn max_n(&self) -> u32 {
        self.components.last().map_or(0, |c| c.n)
    }

    pub fn component(&self, n: u32) -> Option<&GaussComponent> {
        n.checked_sub(self.first_n()).and_then(|i| self.components.get(i as usize))
    }

    /// Photon number for a pulse area. A pulse that never triggered has area
    /// zero and counts as vacuum; it is never discarded.
    pub fn assign(&self, area: f64) -> Assignment {
        if area <= 0.0 {
            return Assignment::Photons(0);
        }
        if area >= self.overflow_edge {
            return Assignment::Discard(DiscardReason::Overflow);
        }
        // ties at an edge go to the lower bin
        let i = self.edges.partition_point(|&e| e < area);
        let c = &self.components[i];
        if let Some(f) = self.window_frac {
            if (area - c.mu).abs() > f * c.sigma {
                return Assignment::Discard(DiscardReason::OutsideWindow);
            }
        }
        Assignment::Photons(c.n)
    }

    /// Interval of areas assigned to component `i`.
    fn bin_range(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { 0.0 } else { self.edges[i - 1] };
        let hi = if i + 1 == self.components.len() {
            self.overflow_edge
        } else {
            self.edges[i]
        };
        (lo, hi)
    }

    /// Interval of areas kept and assigned to component `i` under `window`.
    fn accept_range(&self, i: usize, window: Option<f64>) -> (f64, f64) {
        let (lo, hi) = self.bin_range(i);
        match window {
            None => (lo, hi),
            Some(f) => {
                let c = &self.components[i];
                (lo.max(c.mu - f * c.sigma), hi.min(c.mu + f * c.sigma))
            }
        }
    }

    /// Probability that a kept event from component `n` is assigned another
    /// photon number, under the given window (or none).
    pub fn error_rate_with(&self, n: u32, window: Option<f64>) -> Option<f64> {
        let i = n.checked_sub(self.first_n())? as usize;
        let c = self.components.get(i)?;
        let mut kept = 0.0;
        let mut right = 0.0;
        for j in 0..self.components.len() {
            let (a, b) = self.accept_range(j, window);
            let p = c.mass(a, b);
            kept += p;
            if j == i {
                right = p;
            }
        }
        Some(if kept > 0.0 { ((kept - right) / kept).max(0.0) } else { 1.0 })
    }

    /// Per-component misclassification probabilities under the calibration's
    /// own window setting.
    pub fn error_rates(&self) -> Vec<(u32, f64)> {
        self.components
            .iter()
            .map(|c| (c.n, self.error_rate_with(c.n, self.window_frac).unwrap()))
            .collect()
    }

    /// Confidence table with no window and windows of ±2σ and ±1σ.
    pub fn confidence_table(&self) -> Vec<ConfidenceRow> {
        self.components
            .iter()
            .map(|c| {
                let e = |w| self.error_rate_with(c.n, w).unwrap();
                ConfidenceRow {
                    n: c.n,
                    mu: c.mu,
                    sigma: c.sigma,
                    error_all: e(None),
                    error_2sigma: e(Some(2.0)),
                    error_1sigma: e(Some(1.0)),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub n: u32,
    pub mu: f64,
    pub sigma: f64,
    pub error_all: f64,
    pub error_2sigma: f64,
    pub error_1sigma: f64,
}

/// Fraction of a Gaussian kept by a ±`window_frac`·σ window.
pub fn window_keep_fraction(window_frac: f64) -> Result<f64> {
    if !(window_frac > 0.0) {
        return Err(Error::domain(format!("window_frac must be positive, got {window_frac}")));
    }
    if window_frac.is_infinite() {
        return Ok(1.0);
    }
    Ok(libm::erf(window_frac / std::f64::consts::SQRT_2))
}

/// Histograms the positive areas and fits them.
pub fn calibrate_areas(areas: &[f64], opts: &CalibrationOptions) -> Result<(Calibration, FitReport)> {
    let hist = AreaHistogram::geometric(areas, opts.bin_ratio)?;
    let (components, report) = fit_mixture(&hist, opts)?;
    Ok((Calibration::build(&components, opts)?, report))
}

// ---------------------------------------------------------------- files

/// Calibrations of all three channels of a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub schema_version: u32,
    pub channels: Vec<ChannelCalibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::provenance::Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub channel: crate::source::ChannelLabel,
    pub calibration: Calibration,
    pub report: Option<FitReport>,
}

impl CalibrationSet {
    pub fn get(&self, ch: crate::source::ChannelLabel) -> Option<&Calibration> {
        self.channels.iter().find(|c| c.channel == ch).map(|c| &c.calibration)
    }

    /// Reads JSON, or TOML when the file name ends in `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: Self = if is_toml(path) {
            toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        if set.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported calibration schema version {}", set.schema_version),
            ));
        }
        Ok(set)
    }

    pub fn to_text(&self, toml_format: bool) -> Result<String> {
        if toml_format {
            toml::to_string_pretty(self).map_err(|e| Error::format("calibration", e.to_string()))
        } else {
            Ok(serde_json::to_string_pretty(self)? + "\n")
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text(is_toml(path))?)?;
        Ok(())
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "toml")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn comp(n: u32, mu: f64, sigma: f64) -> GaussComponent {
        GaussComponent {
            n,
            mu,
            sigma,
            weight: 0.1,
        }
    }

    #[test]
    fn edge_examples() {
        assert_abs_diff_eq!(place_edges(&[comp(0, 0.0, 2.0), comp(1, 10.0, 2.0)]).unwrap()[0], 5.0);
        let e = place_edges(&[comp(0, 0.0, 1.0), comp(1, 10.0, 3.0)]).unwrap()[0];
        assert_abs_diff_eq!(e, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(normalized_height(&comp(0, 0.0, 1.0), e), (-3.125f64).exp(), epsilon = 1e-15);
        let e = place_edges(&[comp(0, 0.0, 2.0), comp(1, 10.0, 2.0), comp(2, 22.0, 2.0)]).unwrap();
        assert_eq!(e, vec![5.0, 16.0]);
    }

    #[test]
    fn unresolvable_pair_is_reported() {
        let r = place_edges(&[comp(0, 0.0, 3.0), comp(1, 2.0, 3.0)]);
        assert!(matches!(r, Err(Error::Unresolvable(_))));
    }

    #[test]
    fn area_normalized_edges_sit_in_between() {
        let a = comp(0, 0.0, 1.0);
        let b = comp(1, 10.0, 3.0);
        let e = edge_between(&a, &b, EdgeRule::AreaNormalized).unwrap();
        assert!(e > 0.0 && e < 10.0);
        let da = (-0.5 * e * e).exp();
        let db = (-0.5 * ((e - 10.0) / 3.0f64).powi(2)).exp() / 3.0;
        assert_abs_diff_eq!(da, db, epsilon = 1e-12);
        let e = edge_between(&comp(0, 0.0, 2.0), &comp(1, 10.0, 2.0), EdgeRule::AreaNormalized).unwrap();
        assert_abs_diff_eq!(e, 5.0, epsilon = 1e-12);
    }

    fn spaced(n: usize, spacing: f64, sigma: f64) -> Vec<GaussComponent> {
        (0..n).map(|i| comp(i as u32 + 1, spacing * (i + 1) as f64, sigma)).collect()
    }

    #[test]
    fn assignment_rules() {
        let cal = Calibration::build(&spaced(10, 100.0, 5.0), &CalibrationOptions::default())
            .unwrap()
            .with_window(Some(1.0))
            .unwrap();
        assert_eq!(cal.assign(700.0), Assignment::Photons(7));
        assert_eq!(cal.assign(707.5), Assignment::Discard(DiscardReason::OutsideWindow));
        assert_eq!(cal.assign(0.0), Assignment::Photons(0));
        let open = cal.clone().with_window(None).unwrap();
        assert_eq!(open.assign(750.0), Assignment::Photons(7));
        assert_eq!(open.assign(750.0 + 1e-9), Assignment::Photons(8));
        assert_eq!(open.assign(1e6), Assignment::Discard(DiscardReason::Overflow));
        assert_abs_diff_eq!(open.overflow_edge, 1015.0);
    }

    #[test]
    fn overlap_threshold_sets_overflow() {
        // spacing 3σ between components 5 and 6 exceeds the 0.25 overlap
        let mut c = spaced(5, 100.0, 5.0);
        c.push(comp(6, 515.0, 5.0));
        c.push(comp(7, 530.0, 5.0));
        let cal = Calibration::build(&c, &CalibrationOptions::default()).unwrap();
        assert_eq!(cal.max_n(), 5);
        assert_abs_diff_eq!(cal.overflow_edge, 507.5);
    }

    #[test]
    fn labels_stop_at_detector_limit() {
        let c: Vec<_> = (0..5).map(|i| comp(35 + i, 100.0 * (i + 1) as f64, 5.0)).collect();
        let cal = Calibration::build(&c, &CalibrationOptions::default()).unwrap();
        assert_eq!(cal.max_n(), 37);
        assert_abs_diff_eq!(cal.overflow_edge, 350.0);
    }

    #[test]
    fn keep_fractions() {
        assert_abs_diff_eq!(1.0 - window_keep_fraction(1.0).unwrap(), 0.31731050786291415, epsilon = 1e-14);
        assert_abs_diff_eq!(1.0 - window_keep_fraction(0.5).unwrap(), 0.6170750774519738, epsilon = 1e-14);
        assert_eq!(window_keep_fraction(f64::INFINITY).unwrap(), 1.0);
        assert!(window_keep_fraction(0.0).is_err());
    }

    #[test]
    fn error_rate_examples() {
        let isolated = Calibration::build(&spaced(3, 100.0, 1.0), &CalibrationOptions::default()).unwrap();
        assert!(isolated.error_rate_with(2, None).unwrap() < 1e-15);
        let cal = Calibration::build(&spaced(3, 4.0, 1.0), &CalibrationOptions::default()).unwrap();
        let e = cal.error_rate_with(2, None).unwrap();
        // kept mass excludes the Q(7) overflow tail of the middle component
        assert_abs_diff_eq!(e, 2.0 * norm_sf(2.0), epsilon = 5e-12);
        assert_abs_diff_eq!(e, 0.0455, epsilon = 5e-5);
        assert!(cal.error_rate_with(2, Some(1.0)).unwrap() < e);
        assert_eq!(cal.error_rate_with(9, None), None);
    }

    #[test]
    fn first_label_inference() {
        assert_eq!(infer_first_n(&[100.0, 200.0, 300.0]), 1);
        assert_eq!(infer_first_n(&[338.7, 428.4, 518.1, 607.5]), 4);
        assert_eq!(infer_first_n(&[500.0]), 1);
    }

    #[test]
    fn calibration_file_round_trip() {
        let cal = Calibration::build(&spaced(4, 100.0, 5.0), &CalibrationOptions::default()).unwrap();
        let set = CalibrationSet {
            schema_version: SCHEMA_VERSION,
            channels: vec![ChannelCalibration {
                channel: crate::source::ChannelLabel::B,
                calibration: cal,
                report: None,
            }],
            provenance: Some(crate::provenance::Provenance::new("abc", Some(7))),
        };
        let dir = tempfile::tempdir().unwrap();
        for name in ["cal.json", "cal.toml"] {
            let p = dir.path().join(name);
            set.save(&p).unwrap();
            assert_eq!(CalibrationSet::load(&p).unwrap(), set);
        }
    }

    #[test]
    fn vacuum_only_calibration() {
        let cal = Calibration::vacuum_only(&CalibrationOptions::default()).unwrap();
        assert_eq!(cal.assign(0.0), Assignment::Photons(0));
        assert_eq!(cal.assign(10.0), Assignment::Discard(DiscardReason::Overflow));
        assert_eq!((cal.first_n(), cal.max_n()), (0, 0));
        assert!(cal.error_rates().is_empty());
    }

    #[test]
    fn geometric_histogram_counts_everything_positive() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).chain([0.0, -3.0]).collect();
        let h = AreaHistogram::geometric(&v, 1.01).unwrap();
        assert_eq!(h.total, 1000);
        for (i, &c) in h.counts.iter().enumerate() {
            let inside = v.iter().filter(|&&x| x >= h.bin_edges[i] && x < h.bin_edges[i + 1]).count();
            assert_eq!(c as usize, inside);
        }
    }
}
