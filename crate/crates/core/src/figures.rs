//! Plot-ready tables built from the run's reports.
//!
//! Nothing is rendered. Each table is a CSV file whose first line is a
//! provenance comment.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{AreaHistogram, Assignment, CalibrationSet};
use crate::config::RunConfig;
use crate::counting::{parity_estimate, Confusion, CountRecord, DistributionReport};
use crate::detector::{read_features_csv, synth_pulse, PulseKey};
use crate::error::{Error, Result};
use crate::nist::SuiteReport;
use crate::pipeline::{files, read_json, tally_records, write_atomic};
use crate::provenance::Provenance;
use crate::source::{effective_nbar, split_coherent, ChannelLabel, EventSampler, SplitterNetwork};
use crate::theory::{self, CoherentSpec, ModQSpec};

/// Photon numbers whose example traces are tabulated.
pub const TRACE_PHOTONS: [u32; 8] = [1, 2, 3, 5, 10, 20, 30, 37];
/// Effective mean photon numbers of the parity-decay table.
pub const PARITY_GRID: [f64; 13] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0];
/// Truncation of the residual-bias curves.
pub const BIAS_N_MAX: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    /// Example pulse traces.
    Fig1c,
    /// Area histograms with the fitted mixture.
    Fig1d,
    /// Photon-number distribution against Poisson.
    Fig2,
    /// Parity against mean photon number.
    Fig2Inset,
    /// Randomness-test pass proportions.
    Fig3,
    /// Assignment confidence per photon number.
    Ed5,
    /// Residual bias of mod-2^d binning.
    Ed6,
}

impl Figure {
    pub const ALL: [Figure; 7] = [
        Figure::Fig1c,
        Figure::Fig1d,
        Figure::Fig2,
        Figure::Fig2Inset,
        Figure::Fig3,
        Figure::Ed5,
        Figure::Ed6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig1c => "fig1c",
            Figure::Fig1d => "fig1d",
            Figure::Fig2 => "fig2",
            Figure::Fig2Inset => "fig2-inset",
            Figure::Fig3 => "fig3",
            Figure::Ed5 => "ed5",
            Figure::Ed6 => "ed6",
        }
    }
}

impl std::str::FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown figure '{s}'")))
    }
}

fn table(path: &Path, prov: &Provenance, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "# config_hash={} seed={}", prov.config_hash, prov.seed.map_or("none".into(), |s| s.to_string()))?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(header)?;
        for r in rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    })
}

fn report_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.io.out_dir.join(name)
}

fn load_calibration(cfg: &RunConfig) -> Result<CalibrationSet> {
    let path = cfg.io.calibration.clone().unwrap_or_else(|| report_path(cfg, files::CALIBRATION));
    if !path.exists() {
        return Err(Error::MissingInput {
            stage: "calibrate".into(),
            path,
        });
    }
    CalibrationSet::load(&path)
}

fn fig1c(cfg: &RunConfig) -> Result<(Vec<&'static str>, Vec<Vec<String>>)> {
    let seed = cfg.require_seed()?;
    let p = &cfg.detector.a;
    let traces: Vec<Vec<u16>> = TRACE_PHOTONS
        .iter()
        .map(|&n| synth_pulse(n, p, PulseKey::new(seed, u64::MAX - n as u64, 0)).map(|w| w.samples))
        .collect::<Result<_>>()?;
    let mut header = vec!["t_us"];
    header.extend(["n1", "n2", "n3", "n5", "n10", "n20", "n30", "n37"]);
    let rows = (0..p.record_len)
        .map(|i| {
            let mut r = vec![format!("{}", i as f64 / p.sample_rate * 1e6)];
            r.extend(traces.iter().map(|t| t[i].to_string()));
            r
        })
        .collect();
    Ok((header, rows))
}

fn fig1d(cfg: &RunConfig) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let set = load_calibration(cfg)?;
    let path = cfg.io.features.clone().unwrap_or_else(|| report_path(cfg, files::FEATURES));
    if !path.exists() {
        return Err(Error::MissingInput {
            stage: "extract".into(),
            path,
        });
    }
    let features = read_features_csv(std::fs::File::open(&path)?)?;
    let mut hist_rows = Vec::new();
    let mut comp_rows = Vec::new();
    for ch in ChannelLabel::ALL {
        let Some(cal) = set.get(ch) else { continue };
        let areas: Vec<f64> = features.iter().filter(|r| r.channel == ch).map(|r| r.area as f64).collect();
        let Ok(hist) = AreaHistogram::geometric(&areas, cfg.calibration.bin_ratio) else { continue };
        for (i, &c) in hist.counts.iter().enumerate() {
            let (lo, hi) = (hist.bin_edges[i], hist.bin_edges[i + 1]);
            let model: f64 = cal.components.iter().map(|g| g.weight * hist.total as f64 * g.mass(lo, hi)).sum();
            hist_rows.push(vec![ch.as_str().into(), lo.to_string(), hi.to_string(), c.to_string(), model.to_string()]);
        }
        for (i, g) in cal.components.iter().enumerate() {
            let upper = cal.edges.get(i).copied().unwrap_or(cal.overflow_edge);
            comp_rows.push(vec![
                ch.as_str().into(),
                g.n.to_string(),
                g.mu.to_string(),
                g.sigma.to_string(),
                g.weight.to_string(),
                upper.to_string(),
            ]);
        }
    }
    Ok((hist_rows, comp_rows))
}

fn fig2(cfg: &RunConfig) -> Result<Vec<Vec<String>>> {
    let report: DistributionReport = read_json("count", &report_path(cfg, files::DISTRIBUTION))?;
    let nbar = effective_nbar(&cfg.source.channels()?);
    let poisson = theory::poisson_distribution(nbar, report.pmf.len() as u32 - 1)?;
    Ok(report
        .pmf
        .iter()
        .zip(&report.errors)
        .zip(&poisson)
        .enumerate()
        .map(|(n, ((p, e), q))| vec![n.to_string(), p.to_string(), e.to_string(), q.to_string()])
        .collect())
}

/// Parity of analytically sampled events over [`PARITY_GRID`], using the
/// configured splitter and efficiencies rescaled to each effective mean.
pub fn parity_decay(cfg: &RunConfig) -> Result<Vec<(f64, f64, f64, f64)>> {
    let seed = cfg.require_seed()?;
    let net = SplitterNetwork::from_reflectances(cfg.source.r1_sq, cfg.source.r2_sq)?;
    let unit = effective_nbar(&split_coherent(1.0, &net, cfg.source.efficiencies)?);
    if unit <= 0.0 {
        return Err(Error::config("no light reaches the detectors"));
    }
    PARITY_GRID
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let ch = split_coherent(target / unit, &net, cfg.source.efficiencies)?;
            let events = EventSampler::new(&ch, seed.wrapping_add(i as u64)).sample_range(0, cfg.events);
            let recs: Vec<CountRecord> = events
                .iter()
                .map(|e| CountRecord {
                    event_id: e.event_id,
                    channels: e.counts.map(Assignment::Photons),
                })
                .collect();
            let t = tally_records(&recs, &Confusion::perfect())?;
            let (v, se) = parity_estimate(&t)?;
            Ok((target, v, se, theory::coherent_parity(target)?))
        })
        .collect()
}

fn fig3(cfg: &RunConfig) -> Result<Vec<Vec<String>>> {
    let report: SuiteReport = read_json("certify", &report_path(cfg, files::NIST))?;
    Ok(report
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.test.clone(),
                o.n.to_string(),
                o.n_s.to_string(),
                o.proportion.to_string(),
                o.ci_low.to_string(),
                o.ci_high.to_string(),
                o.threshold.to_string(),
                o.pass.to_string(),
            ]
        })
        .collect())
}

fn ed5(cfg: &RunConfig) -> Result<Vec<Vec<String>>> {
    let set = load_calibration(cfg)?;
    let mut rows = Vec::new();
    for ch in ChannelLabel::ALL {
        let Some(cal) = set.get(ch) else { continue };
        for r in cal.confidence_table() {
            rows.push(vec![
                ch.as_str().into(),
                r.n.to_string(),
                r.mu.to_string(),
                r.sigma.to_string(),
                (1.0 - r.error_all).to_string(),
                (1.0 - r.error_2sigma).to_string(),
                (1.0 - r.error_1sigma).to_string(),
            ]);
        }
    }
    Ok(rows)
}

/// Residual bias of mod-2^d binning for d = 1..5 over n̄ = 1..80, truncated
/// at [`BIAS_N_MAX`] and unbounded.
pub fn bias_curves() -> Result<Vec<(f64, u32, f64, f64)>> {
    let mut rows = Vec::new();
    for d in 1..=5 {
        for k in 1..=80 {
            let nbar = k as f64;
            let spec = CoherentSpec::with_nbar(nbar)?;
            let t = theory::modq_probabilities(&spec, &ModQSpec::bits(d, Some(BIAS_N_MAX))?).max_bias;
            let u = theory::modq_probabilities(&spec, &ModQSpec::bits(d, None)?).max_bias;
            rows.push((nbar, d, t, u));
        }
    }
    Ok(rows)
}

type Table = (PathBuf, Vec<&'static str>, Vec<Vec<String>>);

fn build(cfg: &RunConfig, f: Figure, dir: &Path) -> Result<Vec<Table>> {
    let path = dir.join(format!("{}.csv", f.name()));
    Ok(match f {
        Figure::Fig1c => {
            let (h, rows) = fig1c(cfg)?;
            vec![(path, h, rows)]
        }
        Figure::Fig1d => {
            let (hist, comps) = fig1d(cfg)?;
            vec![
                (path, vec!["channel", "bin_lo", "bin_hi", "count", "model"], hist),
                (
                    dir.join("fig1d-components.csv"),
                    vec!["channel", "n", "mu", "sigma", "weight", "upper_edge"],
                    comps,
                ),
            ]
        }
        Figure::Fig2 => vec![(path, vec!["n", "pmf", "error", "poisson"], fig2(cfg)?)],
        Figure::Fig2Inset => {
            let rows = parity_decay(cfg)?
                .into_iter()
                .map(|(n, v, se, th)| vec![n.to_string(), v.to_string(), se.to_string(), th.to_string()])
                .collect();
            vec![(path, vec!["nbar", "parity", "parity_se", "theory"], rows)]
        }
        Figure::Fig3 => vec![(
            path,
            vec!["test", "n", "n_s", "proportion", "ci_low", "ci_high", "threshold", "pass"],
            fig3(cfg)?,
        )],
        Figure::Ed5 => vec![(
            path,
            vec!["channel", "n", "mu", "sigma", "confidence_all", "confidence_2sigma", "confidence_1sigma"],
            ed5(cfg)?,
        )],
        Figure::Ed6 => {
            let rows = bias_curves()?
                .into_iter()
                .map(|(n, d, t, u)| vec![n.to_string(), d.to_string(), (1u32 << d).to_string(), t.to_string(), u.to_string()])
                .collect();
            vec![(path, vec!["nbar", "d", "q", "max_bias", "max_bias_unbounded"], rows)]
        }
    })
}

/// Writes the requested tables into `dir` and returns their paths. Nothing
/// is written unless every table could be built.
pub fn render(cfg: &RunConfig, which: &[Figure], dir: &Path) -> Result<Vec<PathBuf>> {
    if which.is_empty() {
        return Err(Error::config("no figures requested"));
    }
    let prov = cfg.provenance()?;
    let mut tables = Vec::new();
    for &f in which {
        tables.extend(build(cfg, f, dir)?);
    }
    let mut out = Vec::new();
    for (path, header, rows) in tables {
        table(&path, &prov, &header, rows)?;
        out.push(path);
    }
    Ok(out)
}
