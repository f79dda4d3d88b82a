//! Configuration-driven front end for the tdz-core simulator.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod svg;

pub use config::RunConfig;

pub const SCHEMA: &str = include_str!("../config/schema.txt");
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] tdz_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use tdz_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Model(E::Io(_)) => 3,
            Self::Model(E::Config(_) | E::Domain { .. } | E::Parse { .. } | E::OutOfRange(_)) => 2,
            Self::Model(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tdzsim", version, about = "T-D impedance readout simulator", after_long_help = SCHEMA)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides TDZSIM_SEED and [run] seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for sweeps, Monte-Carlo runs and frame scans.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory; overrides [run] out.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One conversion of a load given as `R`, `R+Xj` or `R-Xj` (ohm).
    Measure {
        #[arg(long, allow_hyphen_values = true)]
        load: String,
    },
    /// Noiseless accuracy sweep over log-spaced resistive loads.
    Sweep,
    /// Repeated noisy conversions per load: SNR and ENOB.
    Montecarlo,
    /// Scans the configured grid and writes a resistance map.
    Frame,
    /// Scans the grid and reconstructs element resistances.
    Recon,
    /// Driver THD against load-current amplitude, adaptive bias on and off.
    Thd,
    /// Recomputes the comparison table and the power budget.
    Table,
}

/// Resolved inputs of one invocation.
pub struct Context {
    pub cfg: RunConfig,
    /// Directory relative grid paths are resolved against.
    pub base: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn hash(&self) -> String {
        self.cfg.hash()
    }

    /// Header line embedded in every output file.
    pub fn header(&self) -> String {
        format!("tdzsim config={} seed={}", self.hash(), self.seed)
    }

    pub fn write(&self, name: &str, content: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, content).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

fn parse_seed(s: &str, from: &str) -> Result<u64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{from} `{s}` is not an unsigned integer")))
}

/// Builds the context: seed from the flag, then `env_seed`, then the
/// config, then the default.
pub fn context(common: &Common, env_seed: Option<&str>) -> Result<Context, CliError> {
    let (mut cfg, base) = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), PathBuf::new()),
    };
    let seed = match (common.seed, env_seed) {
        (Some(s), _) => s,
        (None, Some(e)) => parse_seed(e, "TDZSIM_SEED")?,
        (None, None) => cfg.run.seed,
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out));
    // the hash covers what determines the outputs, not where they land
    cfg.run.seed = seed;
    cfg.run.out = config::DEFAULT_OUT.into();
    Ok(Context { cfg, base, seed, out })
}

pub fn execute(cmd: &Command, ctx: &Context, stdout: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::Io(format!("{}: {e}", ctx.out.display())))?;
    let mut files = match cmd {
        Command::Measure { load } => commands::measure(ctx, load, stdout)?,
        Command::Sweep => commands::sweep(ctx, stdout)?,
        Command::Montecarlo => commands::montecarlo(ctx, stdout)?,
        Command::Frame => commands::frame(ctx, stdout)?,
        Command::Recon => commands::recon(ctx, stdout)?,
        Command::Thd => commands::thd(ctx, stdout)?,
        Command::Table => commands::table(ctx, stdout)?,
    };
    let resolved = format!("# {}\n{}", ctx.header(), ctx.cfg.to_toml());
    files.push(ctx.write("config.resolved.toml", &resolved)?);
    for f in &files {
        let _ = writeln!(stdout, "wrote {}", f.display());
    }
    Ok(files)
}

/// Full invocation: parses `args`, runs the command inside a pool of
/// `--jobs` threads and returns the process exit code.
pub fn run<I, T>(args: I, env_seed: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let mut buf = Vec::new();
    let result = (|| {
        let ctx = context(&cli.common, env_seed)?;
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.common.jobs {
            if n == 0 {
                return Err(CliError::Config("--jobs must be at least 1".into()));
            }
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| execute(&cli.command, &ctx, &mut buf))
    })();
    let _ = stdout.write_all(&buf);
    match result {
        Ok(_) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "tdzsim: {e}");
            e.exit_code()
        }
    }
}
