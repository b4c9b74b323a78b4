use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use basis::ablation::AblationKind;
use basis::config::{ConfigError, Precision, RunConfig};
use basis::run::{self, RunError};
use basis::smr::{SmrBits, SmrConfig};

#[derive(Parser)]
#[command(name = "basis", version, about = "Basis transformers for multi-task tabular regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, env = "BASIS_OUT_DIR")]
    out: Option<PathBuf>,
    /// Floating-point precision: 32 or 64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Download manifest datasets that are not cached yet.
    Fetch(Common),
    /// Train every seed and write metric logs, checkpoints and a report.
    Train(Common),
    /// Score a checkpoint on the test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write decoded predictions for a CSV file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CSV with a header row.
        #[arg(long)]
        input: PathBuf,
        /// Column to ignore if present (e.g. the target).
        #[arg(long)]
        drop: Option<String>,
        /// Output CSV; defaults to `<out>/predictions.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print sign-magnitude bit strings, or decode them with --decode.
    Encode {
        #[arg(long, default_value_t = 29)]
        high: u32,
        #[arg(long, default_value_t = 14)]
        low: u32,
        /// File with one value per line.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Treat inputs as bit strings and print their values.
        #[arg(long)]
        decode: bool,
        #[arg(allow_hyphen_values = true)]
        values: Vec<String>,
    },
    /// Run an ablation: numeric, gamma, blocks or loss.
    Ablate {
        kind: AblationKind,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<u32>().map_err(|e| e.to_string()).and_then(Precision::try_from)
}

fn load_config(c: &Common) -> Result<(RunConfig, PathBuf), RunError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    if c.deterministic {
        // All kernels already run on the calling thread; the flag is recorded for the log.
        log::info!("deterministic mode: single-threaded execution");
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => run::$f::<f32>($($arg),*),
            Precision::F64 => run::$f::<f64>($($arg),*),
        }
    };
}

fn encode(high: u32, low: u32, file: Option<&Path>, decode: bool, values: &[String]) -> Result<(), RunError> {
    let smr = SmrConfig::new(high, low).map_err(|e| ConfigError::Invalid { field: "smr".into(), msg: e.to_string() })?;
    let mut inputs: Vec<String> = values.to_vec();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.into(), source })?;
        inputs.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    let bad = |msg: String| RunError::Config(ConfigError::Invalid { field: "value".into(), msg });
    for s in inputs {
        if decode {
            let bits = SmrBits::parse(&s, smr).map_err(|e| bad(e.to_string()))?;
            println!("{}", bits.decode());
        } else {
            let v: f64 = s.parse().map_err(|_| bad(format!("{s:?} is not a number")))?;
            let (bits, saturated) = smr.encode_saturating(v).map_err(|e| bad(e.to_string()))?;
            if saturated {
                log::warn!("{v} exceeds the representable range and was saturated");
            }
            println!("{bits}");
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Fetch(c) => {
            let (cfg, _) = load_config(&c)?;
            for (name, path, bytes) in run::fetch_all(&cfg)? {
                println!("{name}\t{bytes}\t{}", path.display());
            }
        }
        Command::Train(c) => {
            let (cfg, out) = load_config(&c)?;
            let (_, report) = with_precision!(cfg, train_all(&cfg, &out))?;
            print!("{report}");
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, _) = load_config(&common)?;
            let (_, report) = with_precision!(cfg, eval_checkpoint(&cfg, &checkpoint))?;
            print!("{report}");
        }
        Command::Predict { common, checkpoint, input, drop, output } => {
            let (cfg, out) = load_config(&common)?;
            let dest = output.unwrap_or_else(|| out.join("predictions.csv"));
            if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| RunError::Io { path: parent.into(), source })?;
            }
            let n = with_precision!(cfg, predict_csv(&cfg, &checkpoint, &input, drop.as_deref(), &dest))?;
            log::info!("wrote {n} predictions to {}", dest.display());
        }
        Command::Encode { high, low, file, decode, values } => encode(high, low, file.as_deref(), decode, &values)?,
        Command::Ablate { kind, common } => {
            let (cfg, out) = load_config(&common)?;
            let report = with_precision!(cfg, ablate(&cfg, kind, &out))?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
