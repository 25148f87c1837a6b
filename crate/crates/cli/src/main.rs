use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pnr_core::config::{RunConfig, ENV_CALIBRATION, ENV_FEATURES, ENV_OUT_DIR, ENV_WAVEFORMS};
use pnr_core::figures::{self, Figure};
use pnr_core::nist::TestKind;
use pnr_core::pipeline::{self, files};
use pnr_core::theory::{ModQSpec, TheoryRecord};

/// Photon-number-resolving detection workbench.
#[derive(Parser)]
#[command(name = "pnr", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Defaults apply to everything not set.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    events: Option<u64>,
    /// Mean photon number before splitting and loss.
    #[arg(long, global = true)]
    nbar: Option<f64>,
    /// Bits per event.
    #[arg(long, short = 'd', global = true)]
    bits: Option<u32>,
    /// Keep only areas within this many σ of their component mean.
    #[arg(long, global = true)]
    window_frac: Option<f64>,
    #[arg(long, global = true)]
    trial_size: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Comma-separated randomness tests.
    #[arg(long, global = true, value_delimiter = ',')]
    tests: Option<Vec<TestKind>>,
    #[arg(long, global = true, env = ENV_OUT_DIR)]
    out_dir: Option<PathBuf>,
    /// External waveform file to extract.
    #[arg(long, global = true, env = ENV_WAVEFORMS)]
    waveforms: Option<PathBuf>,
    /// External feature CSV to calibrate and count.
    #[arg(long, global = true, env = ENV_FEATURES)]
    features: Option<PathBuf>,
    /// Calibration file to count with.
    #[arg(long, global = true, env = ENV_CALIBRATION)]
    calibration: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Residue probabilities and bias of a coherent state.
    Theory {
        /// One or more mean photon numbers.
        #[arg(long = "mean", required = true, value_delimiter = ',')]
        means: Vec<f64>,
        /// Modulus; defaults to 2^d.
        #[arg(long, short)]
        q: Option<u32>,
        /// Truncate the distribution above this photon number.
        #[arg(long)]
        n_max: Option<u32>,
    },
    /// Sample per-channel photon numbers.
    Simulate {
        /// Also write raw waveforms of the first N events.
        #[arg(long, value_name = "N")]
        dump_waveforms: Option<u64>,
    },
    /// Extract pulse features.
    Extract,
    /// Fit the area histograms.
    Calibrate,
    /// Assign photon numbers and build the distribution.
    Count,
    /// Generate the bitstream.
    Genbits,
    /// Run the randomness tests; exit code 1 means not random.
    Certify,
    /// Write plot-ready tables.
    Figures {
        /// Comma-separated subset (fig1c, fig1d, fig2, fig2-inset, fig3, ed5, ed6).
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<Figure>>,
        /// Output directory; defaults to <out-dir>/figures.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run every stage; exit code 1 means not random.
    Pipeline,
    /// Print the resolved configuration as TOML.
    Config,
}

fn resolve_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.io.apply_env();
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    set!(g.events => events);
    set!(g.nbar => source.nbar);
    set!(g.bits => qrng.d);
    set!(g.trial_size => nist.trial_size);
    set!(g.alpha => nist.alpha);
    set!(g.tests => nist.tests);
    set!(g.out_dir => io.out_dir);
    if g.window_frac.is_some() {
        cfg.calibration.window_frac = g.window_frac;
    }
    if g.waveforms.is_some() {
        cfg.io.waveforms = g.waveforms.clone();
    }
    if g.features.is_some() {
        cfg.io.features = g.features.clone();
    }
    if g.calibration.is_some() {
        cfg.io.calibration = g.calibration.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn verdict_code(random: bool) -> ExitCode {
    if random {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

#[derive(Serialize)]
struct CountSummary {
    events: u64,
    resolved: u64,
    discarded: u64,
    parity: f64,
    parity_se: f64,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Theory { means, q, n_max } => {
            let modq = match q {
                Some(q) => ModQSpec::new(q, n_max)?,
                None => ModQSpec::bits(cfg.qrng.d, n_max)?,
            };
            for nbar in means {
                println!("{}", serde_json::to_string(&TheoryRecord::evaluate(nbar, modq)?)?);
            }
        }
        Command::Simulate { dump_waveforms } => {
            let events = pipeline::simulate(&cfg)?;
            eprintln!("wrote {} events to {}", events.len(), cfg.io.out_dir.join(files::EVENTS).display());
            if let Some(n) = dump_waveforms {
                let path = cfg.io.out_dir.join(files::WAVEFORMS);
                let k = pipeline::dump_waveforms(&cfg, n, &path)?;
                eprintln!("wrote waveforms of {k} events to {}", path.display());
            }
        }
        Command::Extract => {
            let rows = pipeline::extract(&cfg)?;
            eprintln!("wrote {} feature rows", rows.len());
        }
        Command::Calibrate => {
            let (_, report) = pipeline::calibrate(&cfg)?;
            warn_all(&report.warnings);
            print_json(&report.channels.iter().map(|c| (c.channel, c.report.as_ref().map(|r| r.r_squared))).collect::<Vec<_>>())?;
        }
        Command::Count => {
            let (records, d) = pipeline::count(&cfg)?;
            print_json(&CountSummary {
                events: records.len() as u64,
                resolved: d.n_events,
                discarded: d.n_discarded,
                parity: d.parity,
                parity_se: d.parity_se,
            })?;
        }
        Command::Genbits => {
            let (_, meta) = pipeline::genbits(&cfg)?;
            warn_all(&meta.warnings);
            eprintln!("wrote {} bits from {} events", meta.n_bits, meta.n_events_used);
        }
        Command::Certify => {
            let report = pipeline::certify(&cfg)?;
            print_json(&report.verdict)?;
            return Ok(verdict_code(report.verdict.random));
        }
        Command::Figures { only, dir } => {
            let which = only.unwrap_or_else(|| Figure::ALL.to_vec());
            let dir = dir.unwrap_or_else(|| cfg.io.out_dir.join("figures"));
            for p in figures::render(&cfg, &which, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Pipeline => {
            let summary = pipeline::run_pipeline(&cfg)?;
            warn_all(&summary.warnings);
            print_json(&summary)?;
            if let Some(v) = &summary.verdict {
                return Ok(verdict_code(v.random));
            }
        }
        Command::Config => {
            if cfg.seed.is_none() {
                eprintln!("note: no seed set; simulation stages will refuse to run");
            }
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
