//! Total photon counts, the empirical distribution and parity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibrate::{Assignment, CalibrationSet, DiscardReason};
use crate::error::{Error, Result};
use crate::source::ChannelLabel;

/// Largest total reported in the distribution.
pub const DEFAULT_N_CAP: u32 = 100;

/// Per-event outcome of all three channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub event_id: u64,
    pub channels: [Assignment; 3],
}

impl CountRecord {
    pub fn total(&self) -> std::result::Result<u32, DiscardReason> {
        total_count(&self.channels)
    }

    /// Per-channel photon numbers when every channel resolved.
    pub fn resolved(&self) -> Option<[u32; 3]> {
        let mut out = [0; 3];
        for (o, a) in out.iter_mut().zip(&self.channels) {
            match a {
                Assignment::Photons(n) => *o = *n,
                Assignment::Discard(_) => return None,
            }
        }
        Some(out)
    }
}

/// Sum of the channel counts, or the first channel's discard reason.
pub fn total_count(outcomes: &[Assignment]) -> std::result::Result<u32, DiscardReason> {
    outcomes.iter().try_fold(0u32, |acc, a| match a {
        Assignment::Photons(n) => Ok(acc + n),
        Assignment::Discard(r) => Err(*r),
    })
}

/// Per-channel misassignment probability indexed by photon number.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Confusion {
    per_channel: [Vec<f64>; 3],
}

impl Confusion {
    /// Error-free channels.
    pub fn perfect() -> Self {
        Self::default()
    }

    pub fn from_calibrations(set: &CalibrationSet) -> Result<Self> {
        let mut per_channel: [Vec<f64>; 3] = Default::default();
        for ch in ChannelLabel::ALL {
            let cal = set
                .get(ch)
                .ok_or_else(|| Error::config(format!("no calibration for channel {}", ch.as_str())))?;
            let mut v = vec![0.0; cal.max_n() as usize + 1];
            for (n, e) in cal.error_rates() {
                v[n as usize] = e;
            }
            per_channel[ch.index()] = v;
        }
        Ok(Self { per_channel })
    }

    fn rate(&self, ch: usize, n: u32) -> f64 {
        self.per_channel[ch].get(n as usize).copied().unwrap_or(0.0)
    }

    /// Probability that at least one channel of this event was misassigned.
    fn event_error(&self, counts: [u32; 3]) -> f64 {
        1.0 - (0..3).map(|c| 1.0 - self.rate(c, counts[c])).product::<f64>()
    }
}

/// Partial tally of count records; merging tallies is associative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n_cap: u32,
    pub counts: Vec<u64>,
    /// Expected misassignments among events in each total bin.
    pub misassigned: Vec<f64>,
    pub n_events: u64,
    pub n_overflow: u64,
    pub n_outside_window: u64,
    /// Resolved events with a total above `n_cap`.
    pub n_above_cap: u64,
}

impl Tally {
    pub fn new(n_cap: u32) -> Self {
        Self {
            n_cap,
            counts: vec![0; n_cap as usize + 1],
            misassigned: vec![0.0; n_cap as usize + 1],
            n_events: 0,
            n_overflow: 0,
            n_outside_window: 0,
            n_above_cap: 0,
        }
    }

    pub fn add(&mut self, rec: &CountRecord, confusion: &Confusion) {
        self.n_events += 1;
        match rec.total() {
            Err(DiscardReason::Overflow) => self.n_overflow += 1,
            Err(DiscardReason::OutsideWindow) => self.n_outside_window += 1,
            Ok(t) if t > self.n_cap => self.n_above_cap += 1,
            Ok(t) => {
                self.counts[t as usize] += 1;
                if let Some(c) = rec.resolved() {
                    self.misassigned[t as usize] += confusion.event_error(c);
                }
            }
        }
    }

    pub fn merge(mut self, other: &Tally) -> Result<Self> {
        if self.n_cap != other.n_cap {
            return Err(Error::domain("cannot merge tallies with different caps"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.misassigned.iter_mut().zip(&other.misassigned) {
            *a += b;
        }
        self.n_events += other.n_events;
        self.n_overflow += other.n_overflow;
        self.n_outside_window += other.n_outside_window;
        self.n_above_cap += other.n_above_cap;
        Ok(self)
    }

    pub fn n_resolved(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn n_discarded(&self) -> u64 {
        self.n_overflow + self.n_outside_window
    }
}

/// Tally of a whole record set.
pub fn tally(records: &[CountRecord], n_cap: u32, confusion: &Confusion) -> Tally {
    let mut t = Tally::new(n_cap);
    for r in records {
        t.add(r, confusion);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub pmf: Vec<f64>,
    pub errors: Vec<f64>,
    /// Events contributing to `pmf`.
    pub n_events: u64,
    pub n_discarded: u64,
    pub n_above_cap: u64,
}

/// Empirical distribution of totals in `0..=n_cap`.
///
/// Each error combines the binomial standard deviation √(p(1−p)/N) with a
/// misassignment term in quadrature. The misassignment term treats channel
/// confusion as a first-order perturbation: a misassigned event moves to a
/// neighbouring total, so bin m can lose its own expected misassignments and
/// gain half of those of each neighbour.
pub fn empirical_distribution(t: &Tally) -> Result<Distribution> {
    let n = t.n_resolved();
    if n == 0 {
        return Err(Error::EmptyData("no resolved events within the count cap".into()));
    }
    let nf = n as f64;
    let pmf: Vec<f64> = t.counts.iter().map(|&c| c as f64 / nf).collect();
    let len = pmf.len();
    let errors = (0..len)
        .map(|m| {
            let p = pmf[m];
            let binom = p * (1.0 - p) / nf;
            let out = t.misassigned[m];
            let inflow = 0.5
                * (m.checked_sub(1).map_or(0.0, |i| t.misassigned[i])
                    + t.misassigned.get(m + 1).copied().unwrap_or(0.0));
            let mis = (out * out + inflow * inflow) / (nf * nf);
            (binom + mis).sqrt()
        })
        .collect();
    Ok(Distribution {
        pmf,
        errors,
        n_events: n,
        n_discarded: t.n_discarded(),
        n_above_cap: t.n_above_cap,
    })
}

/// Parity ⟨(−1)^m⟩ over the events of the distribution, with its standard
/// error √((1 − value²)/N).
pub fn parity_estimate(t: &Tally) -> Result<(f64, f64)> {
    let n = t.n_resolved();
    if n == 0 {
        return Err(Error::EmptyData("no resolved events for a parity estimate".into()));
    }
    let (even, odd) = t.counts.iter().enumerate().fold((0u64, 0u64), |(e, o), (m, &c)| {
        if m % 2 == 0 {
            (e + c, o)
        } else {
            (e, o + c)
        }
    });
    let value = (even as f64 - odd as f64) / n as f64;
    Ok((value, ((1.0 - value * value) / n as f64).sqrt()))
}

/// The distribution report written by the `count` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub pmf: Vec<f64>,
    pub errors: Vec<f64>,
    pub n_events: u64,
    pub n_discarded: u64,
    pub n_above_cap: u64,
    pub n_overflow: u64,
    pub n_outside_window: u64,
    pub parity: f64,
    pub parity_se: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::provenance::Provenance>,
}

impl DistributionReport {
    pub fn from_tally(t: &Tally) -> Result<Self> {
        let d = empirical_distribution(t)?;
        let (parity, parity_se) = parity_estimate(t)?;
        Ok(Self {
            pmf: d.pmf,
            errors: d.errors,
            n_events: d.n_events,
            n_discarded: d.n_discarded,
            n_above_cap: d.n_above_cap,
            n_overflow: t.n_overflow,
            n_outside_window: t.n_outside_window,
            parity,
            parity_se,
            provenance: None,
        })
    }

    /// CSV with columns `n,pmf,error`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "pmf", "error"])?;
        for (n, (p, e)) in self.pmf.iter().zip(&self.errors).enumerate() {
            wr.write_record([n.to_string(), p.to_string(), e.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use Assignment::*;

    fn rec(id: u64, a: [Assignment; 3]) -> CountRecord {
        CountRecord {
            event_id: id,
            channels: a,
        }
    }

    #[test]
    fn totals() {
        assert_eq!(total_count(&[Photons(10), Photons(20), Photons(25)]), Ok(55));
        assert_eq!(
            total_count(&[Photons(10), Discard(DiscardReason::Overflow), Photons(25)]),
            Err(DiscardReason::Overflow)
        );
        assert_eq!(total_count(&[Photons(0); 3]), Ok(0));
    }

    #[test]
    fn vacuum_is_delta_with_unit_parity() {
        let recs: Vec<_> = (0..100).map(|i| rec(i, [Photons(0); 3])).collect();
        let t = tally(&recs, DEFAULT_N_CAP, &Confusion::perfect());
        let d = empirical_distribution(&t).unwrap();
        assert_eq!(d.pmf[0], 1.0);
        assert!(d.pmf[1..].iter().all(|&p| p == 0.0));
        assert_eq!(parity_estimate(&t).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn balanced_parity() {
        let recs: Vec<_> = (0..10_000).map(|i| rec(i, [Photons((i % 2) as u32), Photons(0), Photons(0)])).collect();
        let t = tally(&recs, DEFAULT_N_CAP, &Confusion::perfect());
        let (v, se) = parity_estimate(&t).unwrap();
        assert_eq!(v, 0.0);
        assert_abs_diff_eq!(se, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn binomial_error_with_perfect_calibration() {
        let recs: Vec<_> = (0..20_000)
            .map(|i| rec(i, [Photons(if i % 20 == 0 { 3 } else { 1 }), Photons(0), Photons(0)]))
            .collect();
        let t = tally(&recs, DEFAULT_N_CAP, &Confusion::perfect());
        let d = empirical_distribution(&t).unwrap();
        assert_abs_diff_eq!(d.pmf[3], 0.05);
        assert_abs_diff_eq!(d.errors[3], (0.05f64 * 0.95 / 20_000.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn discards_and_cap() {
        let recs = vec![
            rec(0, [Photons(37), Photons(37), Photons(37)]),
            rec(1, [Photons(1), Discard(DiscardReason::OutsideWindow), Photons(1)]),
            rec(2, [Discard(DiscardReason::Overflow), Photons(1), Photons(1)]),
            rec(3, [Photons(2), Photons(1), Photons(1)]),
        ];
        let t = tally(&recs, DEFAULT_N_CAP, &Confusion::perfect());
        assert_eq!((t.n_above_cap, t.n_overflow, t.n_outside_window, t.n_resolved()), (1, 1, 1, 1));
        assert!(empirical_distribution(&Tally::new(10)).is_err());
        assert!(parity_estimate(&Tally::new(10)).is_err());
    }

    #[test]
    fn merge_matches_single_pass() {
        let recs: Vec<_> = (0..500u64)
            .map(|i| rec(i, [Photons((i % 7) as u32), Photons((i % 5) as u32), Photons((i % 3) as u32)]))
            .collect();
        let conf = Confusion {
            per_channel: [vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06], vec![0.001; 8], vec![0.0; 3]],
        };
        let whole = tally(&recs, 20, &conf);
        let merged = tally(&recs[..200], 20, &conf).merge(&tally(&recs[200..], 20, &conf)).unwrap();
        assert_eq!(whole.counts, merged.counts);
        for (a, b) in whole.misassigned.iter().zip(&merged.misassigned) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(Tally::new(3).merge(&Tally::new(4)).is_err());
    }
}
