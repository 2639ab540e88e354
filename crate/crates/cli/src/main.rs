//! `fractalqos` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime or audit failure, 2 on
//! configuration or schema errors. Log verbosity comes from
//! `FRACTALQOS_LOG_LEVEL` (default `warn`).

mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fractalqos::analysis::{analysis_report, AnalysisReport};
use fractalqos::control::calibrate;
use fractalqos::detection::detect;
use fractalqos::engine::{load_series, run, sweep, MethodMode, ReportRow, SimReport};
use fractalqos::traffic::{generate_trace, inject_attacks};
use fractalqos::{Error, SecurityProfile, TrafficTrace};
use serde::Serialize;

use config::{AnalyzeConfig, CalibrateConfig, GenerateConfig, SweepConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_)
            | Error::WindowOutOfBounds { .. }
            | Error::OverlappingWindows(..)
            | Error::InvalidQ(_)
            | Error::TooFewOrders(_)
            | Error::InvalidDomain(_)
            | Error::UnknownEndpoint(_)
            | Error::EmptyAdmissibleSet(..)
            | Error::Topology(_)
            | Error::Config(_)
            | Error::CalibrationMissing
            | Error::Json(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "fractalqos", version, about = "Fractality-aware QoS simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a packet-count trace as CSV (`slot,count,label`).
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the trace seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Characterize a trace CSV and score the detector on its labels.
    Analyze {
        trace: PathBuf,
        /// Optional detector settings: `{"detector": {...}}`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Build the buffer calibration table.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the grid's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Run one scenario in each requested method mode.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Method modes to run; all four when omitted.
        #[arg(long = "mode")]
        modes: Vec<MethodMode>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-load series next to the report.
        #[arg(long)]
        emit_plot: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Run the loads × seeds × modes grid of a scenario.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the sweep's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        emit_plot: bool,
        #[command(flatten)]
        output: Output,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FRACTALQOS_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { config, seed, output } => cmd_generate(&config, seed, &output),
        Command::Analyze { trace, config, output } => cmd_analyze(&trace, config.as_deref(), &output),
        Command::Calibrate { config, seed, output } => cmd_calibrate(&config, seed, &output),
        Command::Simulate {
            config,
            modes,
            seed,
            emit_plot,
            output,
        } => cmd_simulate(&config, &modes, seed, emit_plot, &output),
        Command::Sweep {
            config,
            seed,
            emit_plot,
            output,
        } => cmd_sweep(&config, seed, emit_plot, &output),
    }
}

fn check_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Opens the output sink after confirming every path in `extra` is writable too.
fn open_output(output: &Output, extra: &[PathBuf]) -> Result<Box<dyn Write>, CliError> {
    for p in output.out.iter().chain(extra) {
        check_writable(p, output.force)?;
    }
    Ok(match &output.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// `report.csv` → `report.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn cmd_generate(config: &Path, seed: Option<u64>, output: &Output) -> Result<(), CliError> {
    let cfg: GenerateConfig = config::read_json(config)?;
    let mut spec = cfg.trace;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut trace = generate_trace(&spec)?;
    if let Some(a) = &cfg.attack {
        trace = inject_attacks(&trace, a)?;
    }
    let mut out = open_output(output, &[])?;
    trace.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeOutput {
    slots: usize,
    attack_slots: usize,
    analysis: AnalysisReport,
    /// Present when the trace is long enough for at least one detector window.
    security: Option<SecurityProfile>,
}

fn cmd_analyze(trace_path: &Path, config: Option<&Path>, output: &Output) -> Result<(), CliError> {
    let cfg: AnalyzeConfig = match config {
        Some(p) => config::read_json(p)?,
        None => AnalyzeConfig::default(),
    };
    let file = File::open(trace_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", trace_path.display())))?;
    let trace = TrafficTrace::read_csv(BufReader::new(file))?;
    let analysis = analysis_report(&trace)?;
    let security = match detect(&trace, &cfg.detector) {
        Ok(d) => Some(d.profile),
        Err(Error::TraceTooShort { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let report = AnalyzeOutput {
        slots: trace.len(),
        attack_slots: trace.attack_slots(),
        analysis,
        security,
    };
    let mut out = open_output(output, &[])?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn cmd_calibrate(config: &Path, seed: Option<u64>, output: &Output) -> Result<(), CliError> {
    let mut cfg: CalibrateConfig = config::read_json(config)?;
    if let Some(s) = seed {
        cfg.grid.base_seed = s;
    }
    let mut out = open_output(output, &[])?;
    let table = calibrate(&cfg.classes, &cfg.grid)?;
    let saturated = table.cells.iter().filter(|c| c.is_none()).count();
    log::info!("calibrated {} cells, {saturated} saturated", table.cells.len());
    out.write_all(table.to_json()?.as_bytes())?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_rows(out: &mut dyn Write, reports: &[SimReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(ReportRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

fn write_plot(path: &Path, reports: &[SimReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in load_series(reports) {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn audit_outcome(reports: &[SimReport]) -> Result<(), CliError> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.audit.passed())
        .map(|r| {
            format!(
                "mode {} load {} seed {}: {}",
                r.mode,
                r.load_ratio,
                r.seed,
                r.audit.failures.join("; ")
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("invariant audit failed\n  {}", failed.join("\n  "))))
    }
}

fn cmd_simulate(
    config: &Path,
    modes: &[MethodMode],
    seed: Option<u64>,
    emit_plot: bool,
    output: &Output,
) -> Result<(), CliError> {
    let modes: Vec<MethodMode> = if modes.is_empty() { MethodMode::ALL.to_vec() } else { modes.to_vec() };
    let mut scenario = config::load_scenario(config, &modes)?;
    if let Some(s) = seed {
        scenario.config.seed = s;
    }
    let mut side = Vec::new();
    if let Some(out) = &output.out {
        for m in &modes {
            side.push(sibling(out, &format!("{m}.events.jsonl")));
            side.push(sibling(out, &format!("{m}.json")));
        }
        if emit_plot {
            side.push(sibling(out, "plot.csv"));
        }
    } else if emit_plot {
        return Err(CliError::Config("--emit-plot needs --out".into()));
    }
    let mut out = open_output(output, &side)?;

    let mut reports = Vec::new();
    for &mode in &modes {
        let mut cfg = scenario.config.clone();
        cfg.method_mode = mode;
        let sim = run(&cfg, &scenario.graph, scenario.table.as_ref())?;
        log::info!(
            "{mode}: loss {:.3}% jitter {:.4} ms utilization {:.3}",
            sim.report.lost_data_pct,
            sim.report.jitter_ms,
            sim.report.channel_utilization
        );
        if let Some(o) = &output.out {
            let events = File::create(sibling(o, &format!("{mode}.events.jsonl")))?;
            let mut events = BufWriter::new(events);
            sim.write_event_log(&mut events)?;
            events.flush()?;
            let report = File::create(sibling(o, &format!("{mode}.json")))?;
            serde_json::to_writer_pretty(BufWriter::new(report), &sim.report)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        reports.push(sim.report);
    }
    write_rows(&mut out, &reports)?;
    out.flush()?;
    if emit_plot {
        write_plot(&sibling(output.out.as_ref().expect("checked above"), "plot.csv"), &reports)?;
    }
    audit_outcome(&reports)
}

fn cmd_sweep(config: &Path, seed: Option<u64>, emit_plot: bool, output: &Output) -> Result<(), CliError> {
    let cfg: SweepConfig = config::read_json(config)?;
    if cfg.loads.is_empty() || cfg.seeds == 0 || cfg.modes.is_empty() {
        return Err(CliError::Config("sweep needs at least one load, seed and mode".into()));
    }
    let scenario_path = config::resolve_sweep_scenario(config, &cfg);
    let scenario = config::load_scenario(&scenario_path, &cfg.modes)?;
    for &load in &cfg.loads {
        let mut probe = scenario.config.clone();
        probe.load_ratio = load;
        probe.validate()?;
    }
    let base = seed.unwrap_or(cfg.base_seed);
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| base + i).collect();

    let plot_path = match (&output.out, emit_plot) {
        (Some(o), true) => Some(sibling(o, "plot.csv")),
        (None, true) => return Err(CliError::Config("--emit-plot needs --out".into())),
        _ => None,
    };
    let mut out = open_output(output, plot_path.as_slice())?;
    let reports = sweep(
        &scenario.config,
        &cfg.loads,
        &seeds,
        &cfg.modes,
        &scenario.graph,
        scenario.table.as_ref(),
    )?;
    write_rows(&mut out, &reports)?;
    out.flush()?;
    if let Some(p) = plot_path {
        write_plot(&p, &reports)?;
    }
    audit_outcome(&reports)
}
