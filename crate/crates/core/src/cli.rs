//! Command-line entry point: `ingest`, `build`, `validate`, `diff`.
//!
//! Exit codes: 0 success, 1 validation or data error, 2 environment or
//! configuration error. Audit events go to stderr as JSON lines; reports and
//! summaries go to stdout.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::datapackage::{self, PackageError};
use crate::events::Event;
use crate::fsutil::LockFile;
use crate::par::{self, Exec};
use crate::pipeline::{self, PipelineConfig, PipelineError};
use crate::sources::{self, Cache};

pub const DEFAULT_CACHE_DIR: &str = ".gridforge-cache";
pub const LOCK_FILE: &str = ".gridforge.lock";

#[derive(Debug, Parser)]
#[command(name = "gridforge", version, about = "Build validated, versioned Tabular Data Packages from raw electricity-system tables")]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Snapshot cache directory.
    #[arg(long, global = true, value_name = "DIR", env = "GRIDFORGE_CACHE", default_value = DEFAULT_CACHE_DIR)]
    pub cache: PathBuf,
    /// Never fetch remote origins.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Worker threads for data-parallel stages (1 runs sequentially).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Snapshot every configured source into the cache.
    Ingest,
    /// Run the configured pipeline and publish a stamped package.
    Build,
    /// Validate a package directory.
    Validate { dir: PathBuf },
    /// Compare two package directories.
    Diff { a: PathBuf, b: PathBuf },
}

/// Outcome of a command, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Data(String),
    Environment(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Environment(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Data(m) | Failure::Environment(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            2 => Failure::Environment(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<PackageError> for Failure {
    fn from(e: PackageError) -> Self {
        match e {
            PackageError::MissingDescriptor(_) | PackageError::Io { .. } | PackageError::Registry { .. } => {
                Failure::Environment(e.to_string())
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

fn emit(err: &mut dyn Write, event: Event) {
    let _ = writeln!(err, "{}", event.to_json_line());
}

fn require_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| Failure::Environment("--config is required for this command".into()))?;
    Ok(pipeline::load_config(path)?)
}

fn exec_for(cli: &Cli) -> Exec {
    match cli.jobs {
        Some(1) => Exec::Sequential,
        _ => Exec::Parallel,
    }
}

/// Snapshot each source; keep going after failures so that everything
/// reachable ends up cached.
pub fn cmd_ingest(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let cfg = require_config(cli)?;
    fs::create_dir_all(&cli.cache).map_err(|e| Failure::Environment(format!("{}: {e}", cli.cache.display())))?;
    let cache = Cache::new(&cli.cache);
    let (mut cached, mut new, mut failed) = (0, 0, Vec::new());
    for path in &cfg.sources {
        let result = sources::load_descriptor(path).and_then(|desc| {
            let base = path.parent().unwrap_or(Path::new("."));
            let bytes = sources::read_origin(&desc, base, cli.offline)?;
            let (entry, is_new) = cache.snapshot(&desc.id, &bytes)?;
            Ok((entry, is_new))
        });
        match result {
            Ok((entry, is_new)) => {
                cached += 1;
                new += usize::from(is_new);
                emit(
                    err,
                    Event::new("ingest", if is_new { "snapshot_stored" } else { "snapshot_unchanged" })
                        .with("source", &entry.source_id)
                        .with("content_hash", &entry.content_hash),
                );
            }
            Err(e) => {
                emit(
                    err,
                    Event::new("ingest", "source_failed").with("descriptor", path.display().to_string()).with("error", e.to_string()),
                );
                failed.push(format!("{}: {e}", path.display()));
            }
        }
    }
    let _ = writeln!(out, "ingest: {cached} cached ({new} new), {} failed", failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Environment(failed.join("\n")))
    }
}

/// Build into a staging directory, validate, stamp, then publish to
/// `<output_dir>/<package_name>/<version>`.
pub fn cmd_build(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<PathBuf, Failure> {
    let cfg = require_config(cli)?;
    let env = |e: io::Error, p: &Path| Failure::Environment(format!("{}: {e}", p.display()));
    fs::create_dir_all(&cfg.output_dir).map_err(|e| env(e, &cfg.output_dir))?;
    let lock_path = cfg.output_dir.join(LOCK_FILE);
    let _lock = LockFile::try_acquire(&lock_path).map_err(|e| {
        if e.kind() == io::ErrorKind::AlreadyExists {
            Failure::Environment(format!("{} is locked by another run ({})", cfg.output_dir.display(), lock_path.display()))
        } else {
            env(e, &lock_path)
        }
    })?;

    let cache = Cache::new(&cli.cache);
    let exec = exec_for(cli);
    let built = pipeline::run(&cfg, &cache, exec)?;
    for e in built.events.events() {
        emit(err, e.clone());
    }

    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(&cfg.output_dir).map_err(|e| env(e, &cfg.output_dir))?;
    datapackage::write_package(staging.path(), &built.meta, &built.resources, &built.extras, exec)
        .map_err(|e| stage_failure("datapackage", e))?;
    let report = datapackage::validate_package_with(staging.path(), exec).map_err(|e| stage_failure("validate", e))?;
    if !report.is_empty() {
        return Err(Failure::Data(format!("stage validate: built package is invalid:\n{report}")));
    }
    let stamp = datapackage::version_stamp(staging.path(), &cfg.version, &cfg.registry_path()).map_err(|e| stage_failure("version", e))?;
    let target = cfg.package_dir();
    if target.exists() {
        if stamp.newly_registered {
            // unregistered leftover from an interrupted run
            fs::remove_dir_all(&target).map_err(|e| env(e, &target))?;
        } else {
            emit(err, Event::new("version", "unchanged").with("id", &stamp.identifier));
            let _ = writeln!(out, "{} unchanged at {}", stamp.identifier, target.display());
            return Ok(target);
        }
    }
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent).map_err(|e| env(e, parent))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &target).map_err(|e| env(e, &target))?;
    emit(err, Event::new("version", "published").with("id", &stamp.identifier).with("content_hash", &stamp.content_hash));
    let _ = writeln!(out, "{} published at {}", stamp.identifier, target.display());
    Ok(target)
}

fn stage_failure(stage: &str, e: PackageError) -> Failure {
    match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("stage {stage}: {m}")),
        Failure::Environment(m) => Failure::Environment(format!("stage {stage}: {m}")),
    }
}

pub fn cmd_validate(dir: &Path, exec: Exec, out: &mut dyn Write) -> Result<(), Failure> {
    let report = datapackage::validate_package_with(dir, exec)?;
    if report.is_empty() {
        let _ = writeln!(out, "{}: valid", dir.display());
        Ok(())
    } else {
        let _ = write!(out, "{report}");
        Err(Failure::Data(format!("{}: {} issue(s)", dir.display(), report.issues.len())))
    }
}

pub fn cmd_diff(a: &Path, b: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let diff = datapackage::diff_packages(a, b)?;
    if diff.is_empty() {
        let _ = writeln!(out, "no differences");
    } else {
        let _ = write!(out, "{diff}");
    }
    Ok(())
}

/// Parse arguments and run one command, writing to the given streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            let _ = writeln!(err, "error: --jobs must be at least 1");
            return 2;
        }
        // the global pool can only be configured once per process
        if let Err(e) = par::set_jobs(n) {
            emit(err, Event::new("cli", "jobs_ignored").with("reason", e));
        }
    }
    let result = match &cli.command {
        Command::Ingest => cmd_ingest(&cli, out, err),
        Command::Build => cmd_build(&cli, out, err).map(|_| ()),
        Command::Validate { dir } => cmd_validate(dir, exec_for(&cli), out),
        Command::Diff { a, b } => cmd_diff(a, b, out),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let code = run_with(args, &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code)
}
