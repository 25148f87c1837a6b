//! Pulsed coherent source, three-way beamsplitter network and per-event
//! photon-number sampling.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

const NORM_TOL: f64 = 1e-12;

/// Amplitude coefficients of the two beamsplitters.
///
/// Channel b takes the reflected port of the first splitter. The transmitted
/// light is split again: channel c takes the reflected and channel a the
/// transmitted port of the second splitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitterNetwork {
    r1: f64,
    t1: f64,
    r2: f64,
    t2: f64,
}

impl SplitterNetwork {
    pub fn new(r1: f64, t1: f64, r2: f64, t2: f64) -> Result<Self> {
        for (name, v) in [("r1", r1), ("t1", t1), ("r2", r2), ("t2", t2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Construction(format!("{name} = {v} outside [0,1]")));
            }
        }
        for (k, r, t) in [(1, r1, t1), (2, r2, t2)] {
            let s = r * r + t * t;
            if (s - 1.0).abs() > NORM_TOL {
                return Err(Error::Construction(format!(
                    "beamsplitter {k} not normalized: r² + t² = {s}"
                )));
            }
        }
        Ok(Self { r1, t1, r2, t2 })
    }

    /// Builds the network from intensity reflectances r1² and r2².
    pub fn from_reflectances(r1_sq: f64, r2_sq: f64) -> Result<Self> {
        for (name, v) in [("r1²", r1_sq), ("r2²", r2_sq)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Construction(format!("{name} = {v} outside [0,1]")));
            }
        }
        Self::new(r1_sq.sqrt(), (1.0 - r1_sq).sqrt(), r2_sq.sqrt(), (1.0 - r2_sq).sqrt())
    }

    /// Even three-way split: r1² = 1/3, r2² = 1/2.
    pub fn balanced() -> Self {
        Self::from_reflectances(1.0 / 3.0, 0.5).expect("balanced network is valid")
    }

    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        (self.r1, self.t1, self.r2, self.t2)
    }

    /// Intensity fractions reaching channels (a, b, c).
    pub fn fractions(&self) -> [f64; 3] {
        let (t1s, t2s) = (self.t1 * self.t1, self.t2 * self.t2);
        [t1s * t2s, self.r1 * self.r1, t1s * self.r2 * self.r2]
    }
}

impl Default for SplitterNetwork {
    fn default() -> Self {
        Self::balanced()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelLabel {
    A,
    B,
    C,
}

impl ChannelLabel {
    pub const ALL: [ChannelLabel; 3] = [ChannelLabel::A, ChannelLabel::B, ChannelLabel::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelLabel::A => "a",
            ChannelLabel::B => "b",
            ChannelLabel::C => "c",
        }
    }
}

/// One detector path: efficiency and the mean photon number it receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub label: ChannelLabel,
    pub efficiency: f64,
    pub mean: f64,
}

/// Detection efficiencies used when none are configured.
pub const DEFAULT_EFFICIENCIES: [f64; 3] = [0.97, 0.93, 0.91];

/// Splits a coherent state of mean `nbar` over the network and applies the
/// per-channel efficiencies `etas` (a, b, c).
pub fn split_coherent(nbar: f64, net: &SplitterNetwork, etas: [f64; 3]) -> Result<[ChannelModel; 3]> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::domain(format!("mean photon number must be finite and ≥ 0, got {nbar}")));
    }
    for &eta in &etas {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain(format!("efficiency {eta} outside [0,1]")));
        }
    }
    let fr = net.fractions();
    Ok(ChannelLabel::ALL.map(|label| {
        let i = label.index();
        ChannelModel {
            label,
            efficiency: etas[i],
            mean: etas[i] * fr[i] * nbar,
        }
    }))
}

/// Mean of the summed count over all channels.
pub fn effective_nbar(channels: &[ChannelModel; 3]) -> f64 {
    channels.iter().map(|c| c.mean).sum()
}

/// Photon numbers registered by the three channels for one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSample {
    pub event_id: u64,
    pub counts: [u32; 3],
}

impl EventSample {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// Deterministic per-event sampler of the product-Poisson law.
#[derive(Debug, Clone)]
pub struct EventSampler {
    means: [f64; 3],
    seed: u64,
    phase_jitter: bool,
}

impl EventSampler {
    pub fn new(channels: &[ChannelModel; 3], seed: u64) -> Self {
        Self {
            means: channels.map(|c| c.mean),
            seed,
            phase_jitter: false,
        }
    }

    /// Draws a uniformly random optical phase for every pulse. Each channel
    /// mean is then taken as the squared modulus of its rotated amplitude,
    /// which leaves the statistics unchanged.
    pub fn with_phase_jitter(mut self, on: bool) -> Self {
        self.phase_jitter = on;
        self
    }

    pub fn means(&self) -> [f64; 3] {
        self.means
    }

    pub fn sample(&self, event_id: u64) -> EventSample {
        let means = if self.phase_jitter {
            let mut prng = rng::stream(self.seed, Domain::PhotonCounts, event_id, 3);
            let phi = rand::Rng::gen::<f64>(&mut prng) * std::f64::consts::TAU;
            let (s, c) = phi.sin_cos();
            self.means.map(|m| {
                let amp = m.sqrt();
                (amp * c).powi(2) + (amp * s).powi(2)
            })
        } else {
            self.means
        };
        let mut counts = [0u32; 3];
        for (ch, count) in counts.iter_mut().enumerate() {
            let mut r = rng::stream(self.seed, Domain::PhotonCounts, event_id, ch as u64);
            *count = rng::poisson(&mut r, means[ch]);
        }
        EventSample { event_id, counts }
    }

    /// Events `start .. start + count`, generated in parallel.
    pub fn sample_range(&self, start: u64, count: u64) -> Vec<EventSample> {
        (start..start + count).into_par_iter().map(|id| self.sample(id)).collect()
    }
}

/// Convenience wrapper: events `0..count` for the given channels.
pub fn sample_events(channels: &[ChannelModel; 3], count: u64, seed: u64) -> Vec<EventSample> {
    EventSampler::new(channels, seed).sample_range(0, count)
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    event_id: u64,
    n_a: u32,
    n_b: u32,
    n_c: u32,
}

pub fn write_events_csv<W: Write>(w: W, events: &[EventSample]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in events {
        wr.serialize(EventRow {
            event_id: e.event_id,
            n_a: e.counts[0],
            n_b: e.counts[1],
            n_c: e.counts[2],
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<Vec<EventSample>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rd.deserialize::<EventRow>()
        .map(|row| {
            let row = row?;
            Ok(EventSample {
                event_id: row.event_id,
                counts: [row.n_a, row.n_b, row.n_c],
            })
        })
        .collect()
}

/// Size of one binary event record in bytes.
pub const EVENT_RECORD_BYTES: usize = 14;

/// Binary records: little-endian u64 event id followed by three u16 counts.
pub fn write_events_binary<W: Write>(mut w: W, events: &[EventSample]) -> Result<()> {
    let mut buf = Vec::with_capacity(events.len() * EVENT_RECORD_BYTES);
    for e in events {
        buf.extend_from_slice(&e.event_id.to_le_bytes());
        for &c in &e.counts {
            let c = u16::try_from(c).map_err(|_| {
                Error::Range(format!("event {}: count {c} does not fit a u16 record", e.event_id))
            })?;
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_events_binary<R: Read>(mut r: R) -> Result<Vec<EventSample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % EVENT_RECORD_BYTES != 0 {
        return Err(Error::format(
            "event records",
            format!("length {} is not a multiple of {EVENT_RECORD_BYTES}", buf.len()),
        ));
    }
    Ok(buf
        .chunks_exact(EVENT_RECORD_BYTES)
        .map(|rec| {
            let id = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let c = |o: usize| u16::from_le_bytes([rec[o], rec[o + 1]]) as u32;
            EventSample {
                event_id: id,
                counts: [c(8), c(10), c(12)],
            }
        })
        .collect())
}
