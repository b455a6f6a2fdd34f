//! `ccc`: simulate, chart and analyse connected cruise control with a safety filter.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use ccc_core::stability::Plane;
use ccc_core::Controller;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ccc", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; omitted keys take reference values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides CCC_OUT_DIR and `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured scenario and write one trajectory CSV per controller.
    Simulate {
        /// Run only this controller: nominal, nominal-accel or filtered.
        #[arg(long)]
        variant: Option<Controller>,
        /// Integration step (s).
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Classify a gain plane and write the chart with its boundaries.
    Chart {
        #[arg(long)]
        plane: Option<Plane>,
        /// Grid size as NxM.
        #[arg(long, value_parser = parse_resolution)]
        resolution: Option<(usize, usize)>,
        /// `nominal-accel` selects the acceleration-feedback bounds.
        #[arg(long)]
        variant: Option<Controller>,
        /// Gain held fixed off the plane.
        #[arg(long)]
        fixed: Option<f64>,
        /// Also render chart.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Largest actuator lag that admits safe gains.
    CriticalLag {
        /// Sweep the standstill distance as START:END:N and print CSV.
        #[arg(long, value_parser = parse_sweep)]
        sweep_dst: Option<(f64, f64, usize)>,
    },
    /// Write one family of stability boundaries.
    Boundaries {
        #[arg(long = "type", value_enum)]
        kind: BoundaryKind,
        #[arg(long)]
        plane: Option<Plane>,
        #[arg(long)]
        fixed: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundaryKind {
    Plant,
    #[value(name = "string-w0")]
    StringW0,
    #[value(name = "string-wK", alias = "string-wk")]
    StringWk,
}

impl BoundaryKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            BoundaryKind::Plant => "plant",
            BoundaryKind::StringW0 => "string_w0",
            BoundaryKind::StringWk => "string_wK",
        }
    }
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(x)?, parse(y)?))
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else {
        return Err(format!("expected START:END:N, got {s:?}"));
    };
    let f = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let n: usize = n.trim().parse().map_err(|e| format!("{n:?}: {e}"))?;
    if n == 0 {
        return Err("sweep needs at least one point".into());
    }
    Ok((f(a)?, f(b)?, n))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { variant, dt } => commands::simulate(&cli.common, variant, dt),
        Command::Chart { plane, resolution, variant, fixed, svg } => {
            commands::chart(&cli.common, plane, resolution, variant, fixed, svg)
        }
        Command::CriticalLag { sweep_dst } => commands::critical_lag(&cli.common, sweep_dst),
        Command::Boundaries { kind, plane, fixed } => commands::boundaries(&cli.common, kind, plane, fixed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
