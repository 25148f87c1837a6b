//! The stages of a run and the files they exchange.
//!
//! Every stage reads its inputs from the run directory (or from external
//! files named in the configuration) and writes its outputs there, so any
//! stage can be re-run on its own. Files are written under a temporary name
//! and renamed once complete; a failing stage leaves no partial output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    calibrate_areas, Assignment, Calibration, CalibrationSet, ChannelCalibration, ConfidenceRow, DiscardReason,
    FitReport, SCHEMA_VERSION,
};
use crate::config::RunConfig;
use crate::counting::{tally, Confusion, CountRecord, DistributionReport, Tally, DEFAULT_N_CAP};
use crate::detector::{
    extract_features, read_features_csv, render_features, synth_pulse, write_features_csv, FeatureRow, PulseKey,
    WaveHeader, WaveReader, WaveRecord, WaveWriter,
};
use crate::error::{Error, Result};
use crate::nist::{run_test_suite, SuiteReport, Verdict};
use crate::provenance::{sha256_hex, Provenance};
use crate::qrng::{empirical_bias, generate, BitStream, EmpiricalBias, SourceMeta};
use crate::source::{effective_nbar, read_events_csv, write_events_csv, ChannelLabel, EventSample, EventSampler};

pub mod files {
    pub const EVENTS: &str = "events.csv";
    pub const WAVEFORMS: &str = "waveforms.bin";
    pub const FEATURES: &str = "features.csv";
    pub const CALIBRATION: &str = "calibration.json";
    pub const CALIBRATION_REPORT: &str = "calibration_report.json";
    pub const COUNTS: &str = "counts.csv";
    pub const DISTRIBUTION: &str = "distribution.json";
    pub const DISTRIBUTION_CSV: &str = "distribution.csv";
    pub const BITS: &str = "bits.bin";
    pub const BITS_META: &str = "bits.json";
    pub const NIST: &str = "nist.json";
    pub const NIST_CSV: &str = "nist.csv";
    pub const SUMMARY: &str = "summary.json";
}

/// Records per partial tally when counting.
const TALLY_CHUNK: usize = 1 << 16;

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.io.out_dir.join(name)
}

fn open_input(stage: &str, path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput {
            stage: stage.to_string(),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(e.into()),
    }
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes through `f` into a temporary file that replaces `path` on success.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = File::create(&tmp).map_err(Error::from).and_then(|file| {
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    });
    match res {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(stage: &str, path: &Path) -> Result<T> {
    serde_json::from_reader(open_input(stage, path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn comment_line(w: &mut impl Write, p: &Provenance) -> Result<()> {
    let seed = p.seed.map_or("none".to_string(), |s| s.to_string());
    write!(w, "# config_hash={} seed={}", p.config_hash, seed)?;
    if let Some(h) = &p.input_hash {
        write!(w, " input_hash={h}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn staged<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(stage))
}

// ---------------------------------------------------------------- simulate

/// Samples photon numbers per channel and writes the event CSV.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<EventSample>> {
    staged("simulate", || {
        let seed = cfg.require_seed()?;
        let channels = cfg.source.channels()?;
        let events = EventSampler::new(&channels, seed)
            .with_phase_jitter(cfg.source.phase_jitter)
            .sample_range(0, cfg.events);
        let prov = cfg.provenance()?;
        write_atomic(&out_path(cfg, files::EVENTS), |w| {
            comment_line(w, &prov)?;
            write_events_csv(w, &events)
        })?;
        Ok(events)
    })
}

fn load_events(cfg: &RunConfig, stage: &str) -> Result<Vec<EventSample>> {
    read_events_csv(open_input(stage, &out_path(cfg, files::EVENTS))?)
}

/// Writes the raw waveforms of the first `count` events of the event file.
pub fn dump_waveforms(cfg: &RunConfig, count: u64, path: &Path) -> Result<u64> {
    staged("simulate", || {
        let seed = cfg.require_seed()?;
        let events = load_events(cfg, "simulate")?;
        let p = &cfg.detector.a;
        for ch in ChannelLabel::ALL {
            let q = cfg.detector.channel(ch);
            if (q.adc_bits, q.record_len, q.sample_rate) != (p.adc_bits, p.record_len, p.sample_rate) {
                return Err(Error::config("all channels must share digitizer settings to share a waveform file"));
            }
        }
        let header = WaveHeader {
            adc_bits: p.adc_bits as u16,
            record_len: p.record_len as u32,
            sample_rate: p.sample_rate,
        };
        let mut written = 0;
        write_atomic(path, |w| {
            let mut ww = WaveWriter::new(w, header)?;
            for e in events.iter().take(count as usize) {
                for ch in ChannelLabel::ALL {
                    let i = ch.index();
                    let waveform = synth_pulse(e.counts[i], cfg.detector.channel(ch), PulseKey::new(seed, e.event_id, i as u16))?;
                    ww.write(&WaveRecord {
                        event_id: e.event_id,
                        channel: i as u16,
                        waveform,
                    })?;
                }
                written += 1;
            }
            ww.finish()?;
            Ok(())
        })?;
        Ok(written)
    })
}

// ---------------------------------------------------------------- extract

/// Pulse features of every event and channel, either from synthesized pulses
/// of the event file or from an external waveform file.
pub fn extract(cfg: &RunConfig) -> Result<Vec<FeatureRow>> {
    staged("extract", || {
        let mut prov = cfg.provenance()?;
        let rows = match &cfg.io.waveforms {
            Some(path) => {
                let mut rd = WaveReader::new(open_input("extract", path)?)?;
                let mut rows = Vec::new();
                while let Some(rec) = rd.next_record()? {
                    let ch = ChannelLabel::from_index(rec.channel as usize).ok_or_else(|| {
                        Error::format(path.display().to_string(), format!("channel index {} out of range", rec.channel))
                    })?;
                    let f = extract_features(&rec.waveform.samples, cfg.daq)?;
                    rows.push(FeatureRow::new(rec.event_id, ch, f));
                }
                prov = prov.with_input_hash(hash_file(path)?);
                rows
            }
            None => {
                let seed = cfg.require_seed()?;
                let events = load_events(cfg, "extract")?;
                events
                    .par_iter()
                    .flat_map_iter(|e| {
                        ChannelLabel::ALL.map(|ch| {
                            let i = ch.index();
                            let key = PulseKey::new(seed, e.event_id, i as u16);
                            let f = render_features(e.counts[i], cfg.detector.channel(ch), cfg.daq, key);
                            FeatureRow::new(e.event_id, ch, f)
                        })
                    })
                    .collect()
            }
        };
        write_atomic(&out_path(cfg, files::FEATURES), |w| {
            comment_line(w, &prov)?;
            write_features_csv(w, &rows)
        })?;
        Ok(rows)
    })
}

fn features_path(cfg: &RunConfig) -> PathBuf {
    cfg.io.features.clone().unwrap_or_else(|| out_path(cfg, files::FEATURES))
}

fn load_features(cfg: &RunConfig, stage: &str) -> Result<(Vec<FeatureRow>, Option<String>)> {
    let path = features_path(cfg);
    let rows = read_features_csv(open_input(stage, &path)?)?;
    let hash = match cfg.io.features {
        Some(_) => Some(hash_file(&path)?),
        None => None,
    };
    Ok((rows, hash))
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFitSummary {
    pub channel: ChannelLabel,
    pub n_pulses: u64,
    pub report: Option<FitReport>,
    pub confidence: Vec<ConfidenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub channels: Vec<ChannelFitSummary>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Fits the pulse-area histogram of each channel.
pub fn calibrate(cfg: &RunConfig) -> Result<(CalibrationSet, CalibrationReport)> {
    staged("calibrate", || {
        let (rows, input_hash) = load_features(cfg, "calibrate")?;
        let mut prov = cfg.provenance()?;
        if let Some(h) = input_hash {
            prov = prov.with_input_hash(h);
        }
        let mut channels = Vec::new();
        let mut summaries = Vec::new();
        let mut warnings = Vec::new();
        for ch in ChannelLabel::ALL {
            let areas: Vec<f64> = rows.iter().filter(|r| r.channel == ch).map(|r| r.area as f64).collect();
            let n_pulses = areas.iter().filter(|&&a| a > 0.0).count() as u64;
            let (cal, report) = if n_pulses == 0 {
                warnings.push(format!("channel {} has no pulses; every event counts as vacuum", ch.as_str()));
                (Calibration::vacuum_only(&cfg.calibration)?, None)
            } else {
                let (c, r) = calibrate_areas(&areas, &cfg.calibration)
                    .map_err(|e| e.in_stage(&format!("calibrate channel {}", ch.as_str())))?;
                warnings.extend(r.warnings.iter().map(|w| format!("channel {}: {w}", ch.as_str())));
                (c, Some(r))
            };
            summaries.push(ChannelFitSummary {
                channel: ch,
                n_pulses,
                report: report.clone(),
                confidence: cal.confidence_table(),
            });
            channels.push(ChannelCalibration {
                channel: ch,
                calibration: cal,
                report,
            });
        }
        let set = CalibrationSet {
            schema_version: SCHEMA_VERSION,
            channels,
            provenance: Some(prov.clone()),
        };
        let report = CalibrationReport {
            channels: summaries,
            warnings,
            provenance: prov,
        };
        let text = set.to_text(false)?;
        write_atomic(&out_path(cfg, files::CALIBRATION), |w| Ok(w.write_all(text.as_bytes())?))?;
        write_json(&out_path(cfg, files::CALIBRATION_REPORT), &report)?;
        Ok((set, report))
    })
}

// ---------------------------------------------------------------- count

fn calibration_path(cfg: &RunConfig) -> PathBuf {
    cfg.io.calibration.clone().unwrap_or_else(|| out_path(cfg, files::CALIBRATION))
}

fn assignment_cell(a: Assignment) -> String {
    match a {
        Assignment::Photons(n) => n.to_string(),
        Assignment::Discard(DiscardReason::Overflow) => "overflow".into(),
        Assignment::Discard(DiscardReason::OutsideWindow) => "outside-window".into(),
    }
}

fn parse_assignment(s: &str) -> Result<Assignment> {
    match s {
        "overflow" => Ok(Assignment::Discard(DiscardReason::Overflow)),
        "outside-window" => Ok(Assignment::Discard(DiscardReason::OutsideWindow)),
        _ => s
            .parse()
            .map(Assignment::Photons)
            .map_err(|_| Error::format("counts", format!("bad channel outcome '{s}'"))),
    }
}

pub fn write_counts_csv<W: Write>(w: W, records: &[CountRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["event_id", "n_a", "n_b", "n_c", "total"])?;
    for r in records {
        let total = r.total().map_or(String::new(), |t| t.to_string());
        let [a, b, c] = r.channels.map(assignment_cell);
        wr.write_record([r.event_id.to_string(), a, b, c, total])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_counts_csv<R: std::io::Read>(r: R) -> Result<Vec<CountRecord>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() < 4 {
            return Err(Error::format("counts", format!("expected at least 4 columns, got {}", row.len())));
        }
        let event_id = row[0]
            .parse()
            .map_err(|_| Error::format("counts", format!("bad event id '{}'", &row[0])))?;
        out.push(CountRecord {
            event_id,
            channels: [parse_assignment(&row[1])?, parse_assignment(&row[2])?, parse_assignment(&row[3])?],
        });
    }
    Ok(out)
}

/// Per-event channel areas in event order. A channel without a row did not
/// trigger.
fn areas_by_event(rows: &[FeatureRow]) -> Result<Vec<(u64, [f64; 3])>> {
    let mut map: BTreeMap<u64, ([f64; 3], [bool; 3])> = BTreeMap::new();
    for r in rows {
        let e = map.entry(r.event_id).or_insert(([0.0; 3], [false; 3]));
        let i = r.channel.index();
        if e.1[i] {
            return Err(Error::format(
                "features",
                format!("event {} has two rows for channel {}", r.event_id, r.channel.as_str()),
            ));
        }
        e.0[i] = r.area as f64;
        e.1[i] = true;
    }
    Ok(map.into_iter().map(|(id, (a, _))| (id, a)).collect())
}

/// Merges fixed-size partial tallies in order, so the result does not depend
/// on the number of worker threads.
pub fn tally_records(records: &[CountRecord], confusion: &Confusion) -> Result<Tally> {
    let parts: Vec<Tally> = records
        .par_chunks(TALLY_CHUNK)
        .map(|c| tally(c, DEFAULT_N_CAP, confusion))
        .collect();
    parts.iter().try_fold(Tally::new(DEFAULT_N_CAP), |acc, t| acc.merge(t))
}

/// Assigns photon numbers and builds the distribution report.
pub fn count(cfg: &RunConfig) -> Result<(Vec<CountRecord>, DistributionReport)> {
    staged("count", || {
        let mut set = CalibrationSet::load(&calibration_path(cfg)).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingInput {
                stage: "count".into(),
                path: calibration_path(cfg),
            },
            e => e,
        })?;
        for c in set.channels.iter_mut() {
            c.calibration = c.calibration.clone().with_window(cfg.calibration.window_frac)?;
        }
        let cals: Vec<&Calibration> = ChannelLabel::ALL
            .iter()
            .map(|&ch| {
                set.get(ch)
                    .ok_or_else(|| Error::config(format!("calibration has no channel {}", ch.as_str())))
            })
            .collect::<Result<_>>()?;
        let (rows, input_hash) = load_features(cfg, "count")?;
        let records: Vec<CountRecord> = areas_by_event(&rows)?
            .into_par_iter()
            .map(|(event_id, a)| CountRecord {
                event_id,
                channels: [cals[0].assign(a[0]), cals[1].assign(a[1]), cals[2].assign(a[2])],
            })
            .collect();
        let confusion = Confusion::from_calibrations(&set)?;
        let t = tally_records(&records, &confusion)?;
        let mut report = DistributionReport::from_tally(&t)?;
        let mut prov = cfg.provenance()?;
        if let Some(h) = input_hash {
            prov = prov.with_input_hash(h);
        }
        report.provenance = Some(prov.clone());
        write_atomic(&out_path(cfg, files::COUNTS), |w| {
            comment_line(w, &prov)?;
            write_counts_csv(w, &records)
        })?;
        write_json(&out_path(cfg, files::DISTRIBUTION), &report)?;
        write_atomic(&out_path(cfg, files::DISTRIBUTION_CSV), |w| {
            comment_line(w, &prov)?;
            report.write_csv(w)
        })?;
        Ok((records, report))
    })
}

// ---------------------------------------------------------------- genbits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitsMeta {
    pub d: u32,
    pub n_bits: u64,
    pub n_events_used: u64,
    pub n_discarded: u64,
    pub source: SourceMeta,
    /// Residue statistics modulo 2^d, when the stream is long enough.
    pub empirical_bias: Option<EmpiricalBias>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Turns the counted totals into a bitstream.
pub fn genbits(cfg: &RunConfig) -> Result<(BitStream, BitsMeta)> {
    staged("genbits", || {
        let path = out_path(cfg, files::COUNTS);
        let records = read_counts_csv(open_input("genbits", &path)?)?;
        let mut stream = generate(&records, cfg.qrng.d)?;
        let prov = cfg.provenance()?;
        stream.source = SourceMeta {
            nbar: Some(cfg.source.nbar),
            seed: cfg.seed,
            input_hash: match (&cfg.io.features, &cfg.io.waveforms) {
                (Some(p), _) | (None, Some(p)) => Some(hash_file(p)?),
                _ => None,
            },
        };
        let mut warnings = Vec::new();
        if stream.is_empty() {
            warnings.push("bitstream is empty: no event resolved on all channels".into());
        }
        let bias = match empirical_bias(&stream, 1 << cfg.qrng.d) {
            Ok(b) => Some(b),
            Err(Error::InsufficientData(m)) => {
                warnings.push(format!("no bias estimate: {m}"));
                None
            }
            Err(e) => return Err(e),
        };
        let meta = BitsMeta {
            d: stream.d,
            n_bits: stream.len(),
            n_events_used: stream.n_events_used,
            n_discarded: stream.n_discarded,
            source: stream.source.clone(),
            empirical_bias: bias,
            warnings,
            provenance: prov,
        };
        write_atomic(&out_path(cfg, files::BITS), |w| stream.write(w))?;
        write_json(&out_path(cfg, files::BITS_META), &meta)?;
        Ok((stream, meta))
    })
}

// ---------------------------------------------------------------- certify

fn load_bits(cfg: &RunConfig, stage: &str) -> Result<BitStream> {
    BitStream::read(open_input(stage, &out_path(cfg, files::BITS))?)
}

/// Runs the randomness tests on the bitstream.
pub fn certify(cfg: &RunConfig) -> Result<SuiteReport> {
    staged("certify", || {
        let stream = load_bits(cfg, "certify")?;
        let mut report = run_test_suite(&stream.unpacked(), &cfg.nist)?;
        report.provenance = Some(cfg.provenance()?);
        write_json(&out_path(cfg, files::NIST), &report)?;
        write_atomic(&out_path(cfg, files::NIST_CSV), |w| report.write_csv(w))?;
        Ok(report)
    })
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub effective_nbar: f64,
    pub n_events: u64,
    pub n_resolved: u64,
    pub n_discarded: u64,
    pub parity: f64,
    pub parity_se: f64,
    pub n_bits: u64,
    /// Absent when the stream was too short to certify.
    pub verdict: Option<Verdict>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Runs every stage in order. Stages whose output is supplied as an external
/// input are skipped.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.io.out_dir)?;
    let mut warnings = Vec::new();
    if cfg.io.features.is_none() {
        if cfg.io.waveforms.is_none() {
            simulate(cfg)?;
        }
        extract(cfg)?;
    }
    if cfg.io.calibration.is_none() {
        let (_, report) = calibrate(cfg)?;
        warnings.extend(report.warnings);
    }
    let (records, dist) = count(cfg)?;
    let (stream, meta) = genbits(cfg)?;
    warnings.extend(meta.warnings);
    let verdict = if stream.len() < cfg.nist.trial_size {
        warnings.push(format!(
            "bitstream of {} bits is shorter than one trial of {}; certification skipped",
            stream.len(),
            cfg.nist.trial_size
        ));
        None
    } else {
        Some(certify(cfg)?.verdict)
    };
    let summary = Summary {
        effective_nbar: effective_nbar(&cfg.source.channels()?),
        n_events: records.len() as u64,
        n_resolved: dist.n_events,
        n_discarded: dist.n_discarded,
        parity: dist.parity,
        parity_se: dist.parity_se,
        n_bits: stream.len(),
        verdict,
        warnings,
        provenance: cfg.provenance()?,
    };
    write_json(&out_path(cfg, files::SUMMARY), &summary)?;
    Ok(summary)
}
