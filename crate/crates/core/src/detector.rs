//! TES-like pulse synthesis and threshold/hysteresis feature extraction.
//!
//! A pulse carrying `n` photons has the noiseless shape
//!
//! ```text
//! V(t) = A(n) (exp(-t/τf) - exp(-t/τr)),   A(n) = v_max (1 - exp(-n/n_sat)),
//! τf = τfall0 (1 + tail_slope·n) (1 + tail_jitter·ξ)
//! ```
//!
//! with `t` counted from the trigger sample and `ξ` one standard normal draw
//! per pulse. White Gaussian noise is added to every sample before
//! round-half-to-even quantization and clamping to the ADC range.
//!
//! Feature extraction opens a window at the first sample ≥ `thr_high` and
//! closes it at the first later sample < `thr_low`. [`simulate_features`]
//! runs the generator and the extractor together and stops as soon as the
//! window closes; its output is bit-identical to extracting from the full
//! record produced by [`synth_pulse`].

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamRng};
use crate::stats::norm_cdf;

/// Largest photon number a single channel resolves.
pub const MAX_PHOTONS_PER_CHANNEL: u32 = 37;

/// Pulse-shape, digitizer and noise parameters of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformParams {
    /// Samples per second.
    pub sample_rate: f64,
    pub adc_bits: u32,
    /// Samples per record.
    pub record_len: usize,
    /// Samples recorded before the pulse starts.
    pub pretrigger: usize,
    /// Saturating amplitude scale, ADC counts.
    pub v_max: f64,
    pub n_sat: f64,
    /// Seconds.
    pub tau_rise: f64,
    /// Seconds.
    pub tau_fall0: f64,
    pub tail_slope: f64,
    /// Relative standard deviation of the fall time from pulse to pulse.
    pub tail_jitter: f64,
    /// ADC counts.
    pub noise_sigma: f64,
    /// Constant baseline shift added before quantization, ADC counts.
    pub noise_offset: f64,
}

impl Default for WaveformParams {
    fn default() -> Self {
        Self {
            sample_rate: 250e6,
            adc_bits: 12,
            record_len: 8000,
            pretrigger: 200,
            v_max: 3500.0,
            n_sat: 15.0,
            tau_rise: 0.5e-6,
            tau_fall0: 2e-6,
            tail_slope: 0.03,
            tail_jitter: 0.0055,
            noise_sigma: 1.0,
            noise_offset: 0.0,
        }
    }
}

impl WaveformParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.adc_bits != 12 {
            return bad(format!("only 12-bit digitizers are modelled, got {}", self.adc_bits));
        }
        if self.record_len == 0 || self.pretrigger >= self.record_len {
            return bad(format!(
                "need 0 ≤ pretrigger < record_len, got {} / {}",
                self.pretrigger, self.record_len
            ));
        }
        if !(self.tau_rise > 0.0 && self.tau_rise < self.tau_fall0) {
            return bad(format!(
                "need 0 < tau_rise < tau_fall0, got {} / {}",
                self.tau_rise, self.tau_fall0
            ));
        }
        if !(self.v_max > 0.0 && self.n_sat > 0.0) {
            return bad("v_max and n_sat must be positive".into());
        }
        if !(self.tail_slope >= 0.0 && self.tail_jitter >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("tail_slope, tail_jitter and noise_sigma must be non-negative".into());
        }
        if !self.noise_offset.is_finite() {
            return bad("noise_offset must be finite".into());
        }
        Ok(())
    }

    pub fn adc_max(&self) -> u16 {
        ((1u32 << self.adc_bits) - 1) as u16
    }

    /// Saturating amplitude A(n).
    pub fn amplitude(&self, n: u32) -> f64 {
        self.v_max * (1.0 - (-(n as f64) / self.n_sat).exp())
    }

    /// Rise time constant in samples.
    pub fn tau_rise_samples(&self) -> f64 {
        self.tau_rise * self.sample_rate
    }

    /// Mean fall time constant for `n` photons, in samples.
    pub fn tau_fall_samples(&self, n: u32) -> f64 {
        self.tau_fall0 * (1.0 + self.tail_slope * n as f64) * self.sample_rate
    }
}

/// Trigger thresholds of the feature extractor, in ADC counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub thr_high: u16,
    pub thr_low: u16,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            thr_high: 60,
            thr_low: 30,
        }
    }
}

impl Thresholds {
    pub fn new(thr_high: u16, thr_low: u16) -> Result<Self> {
        let t = Self { thr_high, thr_low };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thr_low > self.thr_high {
            return Err(Error::config(format!(
                "thr_low ({}) must not exceed thr_high ({})",
                self.thr_low, self.thr_high
            )));
        }
        Ok(())
    }
}

/// One digitized record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waveform {
    pub samples: Vec<u16>,
    pub trigger_time: u32,
}

/// The extractor's output record for one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseFeatures {
    pub area: u64,
    pub height: u16,
    pub duration: u32,
    pub t_start: u32,
    pub t_peak: u32,
}

/// Identifies the random stream of one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseKey {
    pub seed: u64,
    pub event_id: u64,
    pub channel: u16,
}

impl PulseKey {
    pub fn new(seed: u64, event_id: u64, channel: u16) -> Self {
        Self {
            seed,
            event_id,
            channel,
        }
    }
}

/// Generates the quantized samples of one pulse in order.
struct SampleGen<'a> {
    p: &'a WaveformParams,
    rng: StreamRng,
    amp: f64,
    decay_f: f64,
    decay_r: f64,
    ef: f64,
    er: f64,
    idx: usize,
    adc_max: f64,
}

impl<'a> SampleGen<'a> {
    fn new(n: u32, p: &'a WaveformParams, key: PulseKey) -> Self {
        let mut rng = rng::stream(key.seed, Domain::Waveform, key.event_id, key.channel as u64);
        let xi: f64 = rng.sample(StandardNormal);
        let tau_f = p.tau_fall_samples(n) * (1.0 + p.tail_jitter * xi);
        Self {
            p,
            rng,
            amp: p.amplitude(n),
            decay_f: (-1.0 / tau_f).exp(),
            decay_r: (-1.0 / p.tau_rise_samples()).exp(),
            ef: 1.0,
            er: 1.0,
            idx: 0,
            adc_max: p.adc_max() as f64,
        }
    }

    #[inline]
    fn next_sample(&mut self) -> u16 {
        let mut v = self.p.noise_offset;
        if self.idx >= self.p.pretrigger {
            v += self.amp * (self.ef - self.er);
            self.ef *= self.decay_f;
            self.er *= self.decay_r;
        }
        if self.p.noise_sigma > 0.0 {
            let z: f64 = self.rng.sample(StandardNormal);
            v += self.p.noise_sigma * z;
        }
        self.idx += 1;
        v.round_ties_even().clamp(0.0, self.adc_max) as u16
    }
}

fn check_photons(n: u32) -> Result<()> {
    if n > MAX_PHOTONS_PER_CHANNEL {
        return Err(Error::Range(format!(
            "{n} photons exceed the per-channel maximum of {MAX_PHOTONS_PER_CHANNEL}"
        )));
    }
    Ok(())
}

/// Synthesizes the full record of a pulse with `n` photons.
pub fn synth_pulse(n: u32, params: &WaveformParams, key: PulseKey) -> Result<Waveform> {
    check_photons(n)?;
    params.validate()?;
    let mut g = SampleGen::new(n, params, key);
    let samples = (0..params.record_len).map(|_| g.next_sample()).collect();
    Ok(Waveform {
        samples,
        trigger_time: params.pretrigger as u32,
    })
}

/// Incremental form of the window rule.
#[derive(Default)]
struct WindowState {
    open: bool,
    closed: bool,
    area: u64,
    height: u16,
    t_start: u32,
    t_peak: u32,
    end: u32,
}

impl WindowState {
    /// Feeds sample `i`; returns true once the window has closed.
    #[inline]
    fn push(&mut self, i: u32, s: u16, thr: Thresholds) -> bool {
        if !self.open {
            if s >= thr.thr_high {
                self.open = true;
                self.t_start = i;
                self.area = s as u64;
                self.height = s;
                self.t_peak = i;
            }
        } else if s < thr.thr_low {
            self.closed = true;
            self.end = i;
        } else {
            self.area += s as u64;
            if s > self.height {
                self.height = s;
                self.t_peak = i;
            }
        }
        self.closed
    }

    fn finish(self, len: u32) -> Option<PulseFeatures> {
        self.open.then(|| {
            let end = if self.closed { self.end } else { len };
            PulseFeatures {
                area: self.area,
                height: self.height,
                duration: end - self.t_start,
                t_start: self.t_start,
                t_peak: self.t_peak,
            }
        })
    }
}

/// Applies the window rule to a record. `None` means no sample reached
/// `thr_high`.
pub fn extract_features(samples: &[u16], thr: Thresholds) -> Result<Option<PulseFeatures>> {
    thr.validate()?;
    let mut st = WindowState::default();
    for (i, &s) in samples.iter().enumerate() {
        if st.push(i as u32, s, thr) {
            break;
        }
    }
    Ok(st.finish(samples.len() as u32))
}

/// Features of a synthesized pulse without materializing the record.
pub fn simulate_features(
    n: u32,
    params: &WaveformParams,
    thr: Thresholds,
    key: PulseKey,
) -> Result<Option<PulseFeatures>> {
    check_photons(n)?;
    params.validate()?;
    thr.validate()?;
    Ok(render_features(n, params, thr, key))
}

/// Like [`simulate_features`] but without the per-channel photon limit and
/// without validating its inputs. Used when a simulated channel receives more
/// light than the detector resolves; the pulse model is simply extrapolated.
pub fn render_features(
    n: u32,
    params: &WaveformParams,
    thr: Thresholds,
    key: PulseKey,
) -> Option<PulseFeatures> {
    let mut g = SampleGen::new(n, params, key);
    let mut st = WindowState::default();
    for i in 0..params.record_len {
        if st.push(i as u32, g.next_sample(), thr) {
            break;
        }
    }
    st.finish(params.record_len as u32)
}

/// A(n)(τf − τr)·fs: the integral of the noiseless, unclipped pulse.
pub fn unclipped_area(n: u32, params: &WaveformParams) -> f64 {
    params.amplitude(n) * (params.tau_fall_samples(n) - params.tau_rise_samples())
}

/// Nodes and weights of `m`-point Gauss–Hermite quadrature for the standard
/// normal weight (weights sum to one), by the Golub–Welsch eigenproblem.
pub fn gauss_hermite_normal(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(m, m);
    for k in 1..m {
        let b = (k as f64).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

const HERMITE_NODES: usize = 12;
/// Noise beyond this many standard deviations is ignored.
const NOISE_REACH: f64 = 10.0;

/// Mean extracted area of pulses with `n` photons.
///
/// Exact for the synthesis model up to quadrature error: the window rule is a
/// three-state chain (not yet open, open, closed) driven by independent
/// per-sample noise, so the expected contribution of each sample follows from
/// the state probabilities one step earlier. The fall-time jitter is averaged
/// by Gauss–Hermite quadrature. Pulses that never trigger contribute zero.
pub fn expected_area(n: u32, params: &WaveformParams, thr: Thresholds) -> Result<f64> {
    check_photons(n)?;
    params.validate()?;
    thr.validate()?;
    if params.tail_jitter == 0.0 {
        return Ok(expected_area_fixed_tau(n, params, thr, params.tau_fall_samples(n)));
    }
    let (nodes, weights) = gauss_hermite_normal(HERMITE_NODES);
    Ok(nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| {
            let tau = params.tau_fall_samples(n) * (1.0 + params.tail_jitter * x);
            w * expected_area_fixed_tau(n, params, thr, tau)
        })
        .sum())
}

fn expected_area_fixed_tau(n: u32, p: &WaveformParams, thr: Thresholds, tau_f: f64) -> f64 {
    let amp = p.amplitude(n);
    let tau_r = p.tau_rise_samples();
    let sigma = p.noise_sigma;
    let top = p.adc_max() as i64;
    let (h, l) = (thr.thr_high as i64, thr.thr_low as i64);

    // P(s ≥ j) for the quantized, clamped sample with noiseless value v
    let tail = |v: f64, j: i64| -> f64 {
        if j <= 0 {
            1.0
        } else if j > top {
            0.0
        } else if sigma == 0.0 {
            if v.round_ties_even() >= j as f64 {
                1.0
            } else {
                0.0
            }
        } else {
            norm_cdf((v - j as f64 + 0.5) / sigma)
        }
    };
    // E[s · 1{s ≥ t}] = t·P(s ≥ t) + Σ_{j > t} P(s ≥ j)
    let partial_mean = |v: f64, t: i64| -> f64 {
        let t = t.max(0);
        let mut acc = t as f64 * tail(v, t);
        let lo_sure = if sigma == 0.0 {
            v.round_ties_even() as i64
        } else {
            (v - NOISE_REACH * sigma).floor() as i64
        };
        let hi = if sigma == 0.0 {
            lo_sure
        } else {
            (v + NOISE_REACH * sigma).ceil() as i64
        }
        .min(top);
        let mut j = t + 1;
        let sure_end = lo_sure.min(top);
        if sure_end >= j {
            acc += (sure_end - j + 1) as f64;
            j = sure_end + 1;
        }
        while j <= hi {
            acc += tail(v, j);
            j += 1;
        }
        acc
    };

    let (mut q, mut o) = (1.0f64, 0.0f64);
    let mut total = 0.0;
    let (df, dr) = ((-1.0 / tau_f).exp(), (-1.0 / tau_r).exp());
    let (mut ef, mut er) = (1.0f64, 1.0f64);
    let peak_t = (tau_f * tau_r / (tau_f - tau_r)) * (tau_f / tau_r).ln();
    let quiet_level = l.min(h) as f64 - 0.5 - NOISE_REACH * sigma;
    for i in 0..p.record_len {
        let mut v = p.noise_offset;
        let mut after_peak = false;
        if i >= p.pretrigger {
            v += amp * (ef - er);
            ef *= df;
            er *= dr;
            after_peak = (i - p.pretrigger) as f64 > peak_t;
        }
        if v < quiet_level {
            // the sample cannot reach either threshold: an open window closes
            if after_peak {
                break;
            }
            o = 0.0;
            continue;
        }
        let ph = tail(v, h);
        let pl = tail(v, l);
        total += q * partial_mean(v, h) + o * partial_mean(v, l);
        o = q * ph + o * pl;
        q *= 1.0 - ph;
    }
    total
}

/// Magic bytes opening a waveform file.
pub const WAVE_MAGIC: [u8; 8] = *b"PNRWAVE\0";
pub const WAVE_VERSION: u16 = 1;
pub const WAVE_HEADER_BYTES: usize = 24;

/// Global header of a waveform file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveHeader {
    pub adc_bits: u16,
    pub record_len: u32,
    pub sample_rate: f64,
}

/// One record of a waveform file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveRecord {
    pub event_id: u64,
    pub channel: u16,
    pub waveform: Waveform,
}

/// Writes waveform files: 24-byte header (magic, version, adc_bits,
/// record_len, sample_rate) followed by records of event id (u64), channel
/// (u16), trigger time (u32) and `record_len` u16 samples, all little-endian.
pub struct WaveWriter<W: Write> {
    inner: W,
    record_len: usize,
}

impl<W: Write> WaveWriter<W> {
    pub fn new(mut inner: W, header: WaveHeader) -> Result<Self> {
        let mut h = Vec::with_capacity(WAVE_HEADER_BYTES);
        h.extend_from_slice(&WAVE_MAGIC);
        h.extend_from_slice(&WAVE_VERSION.to_le_bytes());
        h.extend_from_slice(&header.adc_bits.to_le_bytes());
        h.extend_from_slice(&header.record_len.to_le_bytes());
        h.extend_from_slice(&header.sample_rate.to_le_bytes());
        inner.write_all(&h)?;
        Ok(Self {
            inner,
            record_len: header.record_len as usize,
        })
    }

    pub fn write(&mut self, rec: &WaveRecord) -> Result<()> {
        if rec.waveform.samples.len() != self.record_len {
            return Err(Error::format(
                "waveform record",
                format!(
                    "event {} has {} samples, header says {}",
                    rec.event_id,
                    rec.waveform.samples.len(),
                    self.record_len
                ),
            ));
        }
        let mut buf = Vec::with_capacity(14 + 2 * self.record_len);
        buf.extend_from_slice(&rec.event_id.to_le_bytes());
        buf.extend_from_slice(&rec.channel.to_le_bytes());
        buf.extend_from_slice(&rec.waveform.trigger_time.to_le_bytes());
        for s in &rec.waveform.samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader for the waveform file format.
pub struct WaveReader<R: Read> {
    inner: R,
    header: WaveHeader,
    buf: Vec<u8>,
}

impl<R: Read> WaveReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; WAVE_HEADER_BYTES];
        inner
            .read_exact(&mut h)
            .map_err(|e| Error::format("waveform header", e.to_string()))?;
        if h[0..8] != WAVE_MAGIC {
            return Err(Error::format("waveform header", "bad magic"));
        }
        let version = u16::from_le_bytes([h[8], h[9]]);
        if version != WAVE_VERSION {
            return Err(Error::format("waveform header", format!("unsupported version {version}")));
        }
        let header = WaveHeader {
            adc_bits: u16::from_le_bytes([h[10], h[11]]),
            record_len: u32::from_le_bytes(h[12..16].try_into().unwrap()),
            sample_rate: f64::from_le_bytes(h[16..24].try_into().unwrap()),
        };
        let buf = vec![0u8; 14 + 2 * header.record_len as usize];
        Ok(Self { inner, header, buf })
    }

    pub fn header(&self) -> WaveHeader {
        self.header
    }

    /// Next record, or `None` at a clean end of file.
    pub fn next_record(&mut self) -> Result<Option<WaveRecord>> {
        let mut got = 0;
        while got < self.buf.len() {
            let k = self.inner.read(&mut self.buf[got..])?;
            if k == 0 {
                break;
            }
            got += k;
        }
        if got == 0 {
            return Ok(None);
        }
        if got < self.buf.len() {
            return Err(Error::format("waveform record", "truncated record"));
        }
        let b = &self.buf;
        let samples = b[14..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Some(WaveRecord {
            event_id: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            channel: u16::from_le_bytes([b[8], b[9]]),
            waveform: Waveform {
                samples,
                trigger_time: u32::from_le_bytes(b[10..14].try_into().unwrap()),
            },
        }))
    }
}

/// One row of a feature file. A channel that did not trigger is stored with
/// all features zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub event_id: u64,
    pub channel: crate::source::ChannelLabel,
    pub area: u64,
    pub height: u16,
    pub duration: u32,
    pub t_start: u32,
    pub t_peak: u32,
}

impl FeatureRow {
    pub fn new(event_id: u64, channel: crate::source::ChannelLabel, f: Option<PulseFeatures>) -> Self {
        let f = f.unwrap_or(PulseFeatures {
            area: 0,
            height: 0,
            duration: 0,
            t_start: 0,
            t_peak: 0,
        });
        Self {
            event_id,
            channel,
            area: f.area,
            height: f.height,
            duration: f.duration,
            t_start: f.t_start,
            t_peak: f.t_peak,
        }
    }
}

pub fn write_features_csv<W: Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(r: R) -> Result<Vec<FeatureRow>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}
