//! `faultsim` command line.
//!
//! Exit codes: 0 success, 1 campaign-level failure (the golden run trapped
//! or disagreed with the reference), 2 usage or input error. Diagnostics go
//! to stderr, filtered by `FAULTSIM_LOG` (`error`, `warn`, `info`, `debug`).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::campaign::{
    self, group_rows, read_results, CampaignConfig, CampaignError, DeviceSettings, ReportFormat,
    RunOptions,
};
use crate::cnn::{load_idx, load_model, read_idx_images, CompiledModel, Model, Tensor};
use crate::faults::{
    generate_fault_list, write_fault_list, BitMode, FaultConstraints, FaultKind, LaneScope,
};
use crate::isa::{RegisterId, UnitClass};
use crate::simt::{DeviceConfig, WARP_SIZE};

#[derive(Debug, Parser)]
#[command(name = "faultsim", version, about = "Permanent-fault injection for CNN inference on a simulated SIMT GPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count destination-register writes over a golden run.
    Profile {
        #[arg(long)]
        model: PathBuf,
        /// IDX image file.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// JSON device settings; defaults to 2 SMs x 16 warps, 32 registers.
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run fault-free inference and write the output vectors.
    Golden {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a seeded list of distinct faults.
    GenFaults {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Register indices, e.g. `0..9` (inclusive) or `0,3,7`.
        #[arg(long)]
        registers: Option<String>,
        /// Unit classes, e.g. `FP_CORE` or `INT_CORE,SFU`.
        #[arg(long)]
        units: Option<String>,
        /// SM ids, e.g. `0` or `0..1`.
        #[arg(long)]
        sm: Option<String>,
        /// Resident thread ids.
        #[arg(long)]
        threads: Option<String>,
        /// Bit positions.
        #[arg(long)]
        bits: Option<String>,
        /// Stuck-at values for register faults.
        #[arg(long)]
        stuck_at: Option<String>,
        /// Lane scopes for unit faults: `all`, `each`, or lane indices.
        #[arg(long)]
        lanes: Option<String>,
        /// Corruption modes for unit faults: `flip,stuck_at_0,stuck_at_1`.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a fault-injection campaign described by a JSON config.
    Campaign {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent fault runs; overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
        /// Keep faults already complete in the results file.
        #[arg(long)]
        resume: bool,
        /// Stop after this many newly processed faults.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Aggregate a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
        /// Output file; tables default to stdout, json/csv to
        /// `summary.<ext>` beside the results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Register,
    Unit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
    Csv,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Campaign(anyhow::Error),
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        Failure::Input(e)
    }
}

fn campaign_err(e: CampaignError) -> Failure {
    if e.is_campaign_failure() {
        Failure::Campaign(e.into())
    } else {
        Failure::Input(e.into())
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAULTSIM_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Campaign(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Profile {
            model,
            images,
            count,
            device,
            out,
        } => profile(&model, &images, count, device.as_deref(), &out),
        Command::Golden {
            model,
            images,
            labels,
            count,
            device,
            out,
        } => golden(&model, &images, &labels, count, device.as_deref(), &out),
        Command::GenFaults {
            kind,
            n,
            seed,
            registers,
            units,
            sm,
            threads,
            bits,
            stuck_at,
            lanes,
            modes,
            device,
            out,
        } => {
            let device = load_device(device.as_deref())?.device(0, 1);
            let mut c = FaultConstraints::for_device(&device);
            if let Some(s) = registers {
                c.registers = parse_list(&s, "register")?
                    .into_iter()
                    .map(|i| {
                        u8::try_from(i)
                            .ok()
                            .and_then(RegisterId::new)
                            .ok_or_else(|| anyhow!("register {i} out of range"))
                    })
                    .collect::<anyhow::Result<_>>()?;
            }
            if let Some(s) = units {
                c.units = s
                    .split(',')
                    .map(|u| {
                        UnitClass::from_name(u.trim().to_ascii_uppercase().as_str())
                            .ok_or_else(|| anyhow!("unknown unit `{u}`"))
                    })
                    .collect::<anyhow::Result<_>>()?;
            }
            if let Some(s) = sm {
                c.sm_ids = parse_list(&s, "sm")?;
            }
            if let Some(s) = threads {
                c.thread_ids = parse_list(&s, "thread")?;
            }
            if let Some(s) = bits {
                c.bits = narrow(parse_list(&s, "bit")?)?;
            }
            if let Some(s) = stuck_at {
                c.stuck_at = narrow(parse_list(&s, "stuck-at value")?)?;
            }
            if let Some(s) = lanes {
                c.lanes = parse_lanes(&s)?;
            }
            if let Some(s) = modes {
                c.modes = s
                    .split(',')
                    .map(|m| match m.trim() {
                        "flip" => Ok(BitMode::Flip),
                        "stuck_at_0" => Ok(BitMode::StuckAt0),
                        "stuck_at_1" => Ok(BitMode::StuckAt1),
                        m => Err(anyhow!("unknown mode `{m}`")),
                    })
                    .collect::<anyhow::Result<_>>()?;
            }
            let kind = match kind {
                KindArg::Register => FaultKind::Register,
                KindArg::Unit => FaultKind::Unit,
            };
            let list = generate_fault_list(seed, n, kind, &c, &device)
                .map_err(|e| anyhow!(e))?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_fault_list(BufWriter::new(f), &list)
                .with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} faults to {}", list.len(), out.display());
            Ok(())
        }
        Command::Campaign {
            config,
            jobs,
            resume,
            stop_after,
        } => {
            if jobs == Some(0) {
                return Err(anyhow!("--jobs must be at least 1").into());
            }
            let cfg = CampaignConfig::load(&config).map_err(campaign_err)?;
            let report = campaign::run_campaign(
                &cfg,
                RunOptions {
                    jobs,
                    resume,
                    stop_after,
                },
            )
            .map_err(campaign_err)?;
            log::info!(
                "{} runs, {} faults; report in {}",
                report.per_run.total,
                report.per_fault.total,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Report {
            results,
            format,
            out,
        } => {
            let f = File::open(&results)
                .with_context(|| format!("opening {}", results.display()))?;
            let rows = read_results(BufReader::new(f)).map_err(campaign_err)?;
            let report = campaign::aggregate(&group_rows(&rows).map_err(campaign_err)?)
                .map_err(campaign_err)?;
            let (fmt, ext) = match format {
                FormatArg::Table => (ReportFormat::Table, None),
                FormatArg::Json => (ReportFormat::Json, Some("json")),
                FormatArg::Csv => (ReportFormat::Csv, Some("csv")),
            };
            let text = report.render(fmt);
            let dest = out.or_else(|| {
                ext.map(|e| {
                    results
                        .parent()
                        .unwrap_or_else(|| Path::new("."))
                        .join(format!("summary.{e}"))
                })
            });
            match dest {
                Some(p) => std::fs::write(&p, text)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn load_device(path: Option<&Path>) -> anyhow::Result<DeviceSettings> {
    let Some(path) = path else {
        return Ok(DeviceSettings::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_inputs(
    model: &Path,
    images: Vec<Tensor>,
    count: usize,
    device: Option<&Path>,
) -> anyhow::Result<(Model, Vec<Tensor>, DeviceConfig)> {
    let model = load_model(model)?;
    if count == 0 || count > images.len() {
        bail!("--count {count} must be in 1..={}", images.len());
    }
    let settings = load_device(device)?;
    let need = CompiledModel::compile(&model)?.memory_words();
    let words = settings.global_mem_words.unwrap_or(need);
    let device = settings.device(words, u64::MAX);
    device.validate()?;
    Ok((model, images.into_iter().take(count).collect(), device))
}

fn profile(
    model: &Path,
    images: &Path,
    count: usize,
    device: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let imgs = read_idx_images(images).map_err(anyhow::Error::from)?;
    let (model, imgs, device) = load_inputs(model, imgs, count, device)?;
    let rows = campaign::profile_registers(&model, &imgs, &device).map_err(campaign_err)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        model: &'a str,
        images: usize,
        total_writes: u64,
        registers: &'a [campaign::ProfileRow],
    }
    let doc = Doc {
        model: &model.name,
        images: imgs.len(),
        total_writes: rows.iter().map(|r| r.writes).sum(),
        registers: &rows,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)? + "\n";
    std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn golden(
    model: &Path,
    images: &Path,
    labels: &Path,
    count: usize,
    device: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let ds = load_idx(images, labels).map_err(anyhow::Error::from)?;
    let (model, imgs, device) = load_inputs(model, ds.images, count, device)?;
    let g = campaign::run_golden(&model, &imgs, &device).map_err(campaign_err)?;
    std::fs::write(out, g.to_json(&model.name, &ds.labels))
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// `a..b` (inclusive), `a`, or comma-separated mixes of both; an optional
/// `R` prefix is accepted on each bound.
fn parse_list(s: &str, what: &str) -> anyhow::Result<Vec<usize>> {
    let num = |t: &str| -> anyhow::Result<usize> {
        let t = t.trim();
        let t = t.strip_prefix(['R', 'r']).unwrap_or(t);
        t.parse()
            .with_context(|| format!("bad {what} `{t}`"))
    };
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
                if a > b {
                    bail!("empty {what} range `{part}`");
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        bail!("no {what} values in `{s}`");
    }
    Ok(out)
}

fn narrow(v: Vec<usize>) -> anyhow::Result<Vec<u8>> {
    v.into_iter()
        .map(|x| u8::try_from(x).map_err(|_| anyhow!("value {x} out of range")))
        .collect()
}

fn parse_lanes(s: &str) -> anyhow::Result<Vec<LaneScope>> {
    match s.trim() {
        "all" => Ok(vec![LaneScope::AllLanes]),
        "each" => Ok((0..WARP_SIZE as u8).map(LaneScope::Lane).collect()),
        s => Ok(narrow(parse_list(s, "lane")?)?
            .into_iter()
            .map(LaneScope::Lane)
            .collect()),
    }
}
