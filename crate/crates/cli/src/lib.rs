//! Subcommand dispatch for the `imstab` binary.

pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use imstab_core::config::{parse_config, ExperimentConfig};
use imstab_core::pipeline;
use imstab_core::Error;

use report::{field_csv, to_value, write_atomic, write_report, IoError, SummaryRow, Written};

#[derive(Debug, Parser)]
#[command(name = "imstab", version, about = "Coefficient identification from one interior measurement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for amplitude sweeps.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Forward solve of problem 1 with residual diagnostics.
    Solve,
    /// Sector decomposition of ψ at each amplitude.
    CheckAdmissible,
    /// Integral identity and fundamental estimate at each amplitude.
    VerifyIdentity,
    /// Critical set, strata, tube and Łojasiewicz fits.
    Geometry,
    /// Full Hölder certificate over the amplitude family.
    Stability,
    /// Direct coefficient reconstruction from u₁.
    Reconstruct,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::CheckAdmissible => "check-admissible",
            Command::VerifyIdentity => "verify-identity",
            Command::Geometry => "geometry",
            Command::Stability => "stability",
            Command::Reconstruct => "reconstruct",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(IoError),
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e @ Error::Stage { .. }) => write!(f, "{e}"),
            CliError::Core(e @ Error::Config(_)) => write!(f, "[config] {e}"),
            CliError::Core(e) => write!(f, "[run] {e}"),
            CliError::Io(e) => write!(f, "[io] {e}"),
            CliError::Usage(m) => write!(f, "[usage] {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

/// Result of one dispatch.
#[derive(Debug)]
pub struct Outcome {
    pub verdict: bool,
    pub written: Written,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.verdict {
            0
        } else {
            2
        }
    }
}

/// Exit status for a dispatch result: 0 pass, 2 verdict failure, 1 error.
pub fn exit_code(r: &Result<Outcome, CliError>) -> i32 {
    match r {
        Ok(o) => o.exit_code(),
        Err(_) => 1,
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let cfg = parse_config(path, &cli.overrides)?;
    let workers = cli.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli.command, &cfg, &cli.out))
        }
        None => dispatch(cli.command, &cfg, &cli.out),
    }
}

fn with_config(mut v: Value, cfg: &ExperimentConfig, command: Command) -> Value {
    if let Value::Object(m) = &mut v {
        m.insert("config".into(), to_value(cfg));
        m.insert("subcommand".into(), Value::String(command.name().into()));
    }
    v
}

fn row(id: String, verdict: bool) -> SummaryRow {
    SummaryRow { id, lhs: None, rhs: None, alpha: None, c_final: None, verdict }
}

/// Runs one subcommand and writes its artifacts under `out`.
pub fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let stem = format!("{}.{}", cfg.id, command.name());
    let tag = |suffix: String| format!("{}:{}{}", cfg.id, command.name(), suffix);
    let mut extra: Vec<(PathBuf, String)> = Vec::new();
    let (value, rows, verdict) = match command {
        Command::Solve => {
            let (o, grid, u) = pipeline::solve(cfg)?;
            extra.push((out.join(format!("{stem}.u1.csv")), field_csv(&grid, &u)));
            (to_value(&o), vec![row(tag(String::new()), o.verdict)], o.verdict)
        }
        Command::CheckAdmissible => {
            let o = pipeline::check_admissible(cfg)?;
            let rows = o
                .rows
                .iter()
                .map(|r| row(tag(format!(":t={}", r.amplitude)), r.decomposition.is_admissible()))
                .collect();
            (to_value(&o), rows, o.verdict)
        }
        Command::VerifyIdentity => {
            let o = pipeline::verify_identity(cfg)?;
            let rows = o
                .rows
                .iter()
                .map(|r| {
                    let mut s = row(tag(format!(":t={}", r.amplitude)), r.verdict);
                    if let Some(e) = &r.estimate {
                        s.lhs = Some(e.lhs);
                        s.rhs = Some(e.rhs);
                    } else if let Some(e) = &r.rho_estimate {
                        s.lhs = Some(e.integral);
                        s.rhs = Some(e.bound);
                    }
                    s
                })
                .collect();
            (to_value(&o), rows, o.verdict)
        }
        Command::Geometry => {
            let o = pipeline::geometry(cfg)?;
            (to_value(&o), vec![row(tag(String::new()), o.verdict)], o.verdict)
        }
        Command::Stability => {
            let o = pipeline::run_experiment(cfg)?;
            let mut plot = String::from("amplitude,lhs,rhs,bound,bound_fitted\n");
            let rows = o
                .reports
                .iter()
                .map(|r| {
                    plot.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.amplitude,
                        r.lhs,
                        r.rhs,
                        r.C_final * r.rhs.powf(r.alpha),
                        r.C_fitted * r.rhs.powf(r.alpha)
                    ));
                    SummaryRow {
                        id: tag(format!(":t={}", r.amplitude)),
                        lhs: Some(r.lhs),
                        rhs: Some(r.rhs),
                        alpha: Some(r.alpha),
                        c_final: Some(r.C_final),
                        verdict: r.verdict,
                    }
                })
                .collect();
            extra.push((out.join(format!("{stem}.plot.csv")), plot));
            (to_value(&o), rows, o.verdict)
        }
        Command::Reconstruct => {
            let (o, grid, field) = pipeline::reconstruct(cfg)?;
            extra.push((out.join(format!("{stem}.field.csv")), field_csv(&grid, &field)));
            let mut s = row(tag(String::new()), o.verdict);
            s.lhs = Some(o.max_rel_error);
            s.rhs = Some(o.tolerance);
            (to_value(&o), vec![s], o.verdict)
        }
    };
    let mut written = write_report(out, &stem, with_config(value, cfg, command), &rows)?;
    for (p, body) in extra {
        write_atomic(&p, body.as_bytes())?;
        written.extra.push(p);
    }
    Ok(Outcome { verdict, written })
}
