//! `osasc`: runs the open-set scene classification pipeline from one config
//! file. Every stage writes artifacts stamped with a fingerprint of the
//! configuration and upstream artifacts that produced them; later stages
//! refuse artifacts whose fingerprint does not match.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod workspace;

pub use config::PipelineConfig;

/// A problem with the user's input: config, manifest, audio or artifacts.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Parser)]
#[command(name = "osasc", version, about = "Open-set acoustic scene classification pipeline")]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(short, long, global = true, default_value = "osasc.toml")]
    pub config: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the training regime (c1 or c2).
    #[arg(long, global = true)]
    pub regime: Option<String>,

    /// Softmax thresholds; replaces `threshold.epsilons` when given.
    #[arg(long = "epsilon", global = true)]
    pub epsilons: Vec<f64>,

    /// Autoencoder reconstruction-error threshold.
    #[arg(long, global = true)]
    pub theta: Option<f64>,

    /// Feature cache directory.
    #[arg(long, global = true, env = config::CACHE_DIR_ENV)]
    pub cache_dir: Option<PathBuf>,

    /// Sets any config key, e.g. `--set classifier.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Threshold,
    Openmax,
    C2ae,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Renders the synthetic dataset described in `[synthesis]` and its manifest.
    Synthesize,
    /// Extracts log-mel features for every manifest clip and fits standardization.
    Featurize,
    /// Trains the CNN classifier.
    TrainClassifier,
    /// Trains the class-conditioned autoencoder.
    TrainAutoencoder,
    /// Fits the Openmax class models on the classifier's training outputs.
    FitOpenmax,
    /// Scores the test split and writes reports.
    Evaluate {
        #[arg(long, value_enum, default_value = "all")]
        backend: Backend,
    },
    /// Classifies WAV files and prints one decision per line.
    Infer {
        #[arg(long, value_enum, default_value = "c2ae")]
        backend: Backend,
        #[arg(required = true)]
        clips: Vec<PathBuf>,
    },
}

impl Cli {
    /// Config with command-line flags folded in.
    pub fn load_config(&self) -> anyhow::Result<PipelineConfig> {
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(r) = &self.regime {
            overrides.push(format!("regime=\"{}\"", r.to_ascii_lowercase()));
        }
        if !self.epsilons.is_empty() {
            let list: Vec<String> = self.epsilons.iter().map(|e| format!("{e:?}")).collect();
            overrides.push(format!("threshold.epsilons=[{}]", list.join(", ")));
        }
        if let Some(t) = self.theta {
            overrides.push(format!("autoencoder.threshold={t:?}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        let mut cfg = PipelineConfig::load(&self.config, &overrides)?;
        if let Some(dir) = &self.cache_dir {
            cfg.paths.cache_dir = dir.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.load_config()?;
    match &cli.command {
        Command::Synthesize => commands::synthesize(&cfg),
        Command::Featurize => commands::featurize(&cfg),
        Command::TrainClassifier => commands::train_classifier(&cfg),
        Command::TrainAutoencoder => commands::train_autoencoder(&cfg),
        Command::FitOpenmax => commands::fit_openmax(&cfg),
        Command::Evaluate { backend } => commands::evaluate(&cfg, *backend).map(|_| ()),
        Command::Infer { backend, clips } => {
            let stdout = std::io::stdout();
            commands::infer(&cfg, *backend, clips, stdout.lock())
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| InputError(e.to_string()))?;
    run(&cli)
}

/// 0 success, 1 internal error, 2 input error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use osasc_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<InputError>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) => io_code(io),
                E::UnsupportedFormat(_)
                | E::CorruptFile(_)
                | E::EmptyClass(_)
                | E::InvalidParameter(_)
                | E::EmptyDataset(_)
                | E::RegimeViolation(_)
                | E::InvalidThreshold { .. }
                | E::InvalidConfig(_)
                | E::PipelineMismatch(_)
                | E::InvalidInput(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn io_code(e: &std::io::Error) -> i32 {
    match e.kind() {
        std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 2,
        _ => 1,
    }
}
