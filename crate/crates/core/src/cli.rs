//! Command-line front end. Loads a config, runs one experiment through the
//! library and writes CSV/JSON artifacts.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bounds::{crb_map, write_map_csv, MapSpec};
use crate::error::{Error, Result};
use crate::montecarlo::{
    run_cooperation_sweep, run_missing_rss_sweep, run_mobile, run_static, write_records_csv,
};
use crate::scenario::{parse_config, ExperimentConfig, Scheme};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cotar",
    version,
    about = "Cooperative TOA/RSS localization experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bound maps over the area for every scheme.
    CrbMap(CommonArgs),
    /// Monte-Carlo localization at the configured evaluation points.
    SimulateStatic(CommonArgs),
    /// Bound and sample RMS versus cluster size and spacing.
    SweepCooperation(CommonArgs),
    /// Sample RMS versus the fraction of missing neighbor RSS.
    SweepMissingRss(CommonArgs),
    /// Tracking of moving clusters with warm-started solves.
    SimulateMobile(CommonArgs),
    /// Parse and validate a config without running anything.
    ValidateConfig(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for one per core.
    #[arg(long, env = "COTAR_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub quiet: bool,
    /// Skip the per-trial CSV (summaries only).
    #[arg(long)]
    pub no_trials: bool,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::CrbMap(a)
            | Command::SimulateStatic(a)
            | Command::SweepCooperation(a)
            | Command::SweepMissingRss(a)
            | Command::SimulateMobile(a)
            | Command::ValidateConfig(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::CrbMap(_) => "crb-map",
            Command::SimulateStatic(_) => "simulate-static",
            Command::SweepCooperation(_) => "sweep-cooperation",
            Command::SweepMissingRss(_) => "sweep-missing-rss",
            Command::SimulateMobile(_) => "simulate-mobile",
            Command::ValidateConfig(_) => "validate-config",
        }
    }
}

/// One-line, `key=value` error report.
pub fn error_line(e: &Error) -> String {
    let quoted = |s: &str| format!("{s:?}");
    match e {
        Error::Config { field, message } => {
            format!(
                "error kind=config field={} message={}",
                quoted(field),
                quoted(message)
            )
        }
        other => {
            let kind = match other {
                Error::Domain(_) => "domain",
                Error::DegenerateGeometry { .. } => "degenerate_geometry",
                Error::Singular { .. } => "singular",
                Error::Divergence { .. } => "divergence",
                _ => "io",
            };
            format!("error kind={kind} message={}", quoted(&other.to_string()))
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `argv` and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error kind=usage message={first:?}");
            return EXIT_CONFIG;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// Inputs shared by every subcommand once the config is loaded.
struct Context {
    cfg: ExperimentConfig,
    raw: serde_json::Value,
    header: String,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn load(args: &CommonArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config).map_err(|e| {
            Error::config(
                "<file>",
                format!("cannot read {}: {e}", args.config.display()),
            )
        })?;
        let mut cfg = parse_config(&text)?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        let raw = serde_json::from_str(&text).unwrap_or(serde_json::Value::Null);
        let digest = Sha256::digest(text.as_bytes());
        let hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let header = format!(
            "# cotar {} config_sha256={hash} seed={}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.seed
        );
        Ok(Context {
            cfg,
            raw,
            header,
            out: args.out.clone(),
            quiet: args.quiet,
        })
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", self.out.display())))
    }

    fn write_csv(&self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = self.header.clone().into_bytes();
        fill(&mut buf)?;
        self.write_file(name, &buf)
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes)
            .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
        if !self.quiet {
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }

    fn write_summary(&self, command: &str, results: impl Serialize) -> Result<()> {
        let doc = json!({
            "tool": "cotar",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.cfg.seed,
            "config": self.raw,
            "results": results,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write_file("summary.json", text.as_bytes())
    }
}

fn write_serialized<T: Serialize>(rows: &[T], out: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Io(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn execute(command: &Command) -> Result<()> {
    let args = command.args();
    let ctx = Context::load(args)?;
    if let Command::ValidateConfig(_) = command {
        if !ctx.quiet {
            println!("ok {}", args.config.display());
        }
        return Ok(());
    }
    ctx.ensure_out()?;
    with_threads(args.threads, || dispatch(command, &ctx))?
}

fn dispatch(command: &Command, ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let name = command.name();
    match command {
        Command::CrbMap(_) => {
            let spec = MapSpec {
                area_side_m: cfg.area_side_m,
                references: cfg.references.clone(),
                formation: cfg.formation.clone(),
                params: cfg.channel,
                condition: cfg.condition.clone(),
                pitch_m: cfg.lattice_pitch_m,
            };
            let mut files = Vec::new();
            for scheme in Scheme::ALL {
                let cells = crb_map(&spec, scheme);
                let file = format!("crb_map_{}.csv", scheme.name());
                ctx.write_csv(&file, |buf| write_map_csv(&cells, buf))?;
                files.push(
                    json!({ "scheme": scheme.name(), "file": file, "cells": cells.len() / 2 }),
                );
            }
            ctx.write_summary(name, files)
        }
        Command::SimulateStatic(a) => {
            let r = run_static(cfg, !a.no_trials)?;
            ctx.write_csv("static_points.csv", |buf| write_serialized(&r.points, buf))?;
            if !a.no_trials {
                ctx.write_csv("static_trials.csv", |buf| {
                    write_records_csv(&r.records, buf)
                })?;
            }
            ctx.write_summary(name, &r)
        }
        Command::SweepCooperation(_) => {
            let rows = run_cooperation_sweep(cfg, &cfg.sweep.n_values, &cfg.sweep.delta_values)?;
            ctx.write_csv("cooperation.csv", |buf| write_serialized(&rows, buf))?;
            ctx.write_summary(name, &rows)
        }
        Command::SweepMissingRss(_) => {
            let rows = run_missing_rss_sweep(cfg, &cfg.sweep.p_values, &cfg.sweep.n_values)?;
            ctx.write_csv("missing_rss.csv", |buf| write_serialized(&rows, buf))?;
            ctx.write_summary(name, &rows)
        }
        Command::SimulateMobile(a) => {
            let r = run_mobile(cfg, !a.no_trials)?;
            if !a.no_trials {
                ctx.write_csv("mobile_trials.csv", |buf| {
                    write_records_csv(&r.records, buf)
                })?;
            }
            ctx.write_summary(name, &r.summary)
        }
        Command::ValidateConfig(_) => Ok(()),
    }
}
