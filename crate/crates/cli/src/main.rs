use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use retsynth_cli::{run, CliError, CliResult, Command, ExperimentConfig, RunDir};

#[derive(Debug, Parser)]
#[command(name = "retsynth", version, about = "Synthetic-data-augmented retinal image classification pipeline")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Caps intra-stage parallelism (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run even if upstream stages were produced under a different config.
    #[arg(long, global = true)]
    allow_config_change: bool,
    #[command(subcommand)]
    command: Top,
}

#[derive(Debug, Subcommand)]
enum Top {
    /// Print a preset config (desk or paper) as TOML.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    #[command(flatten)]
    Stage(Command),
}

/// Sends log lines to stderr and to the stage log file.
struct Tee {
    file: Mutex<fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.lock().expect("log lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.lock().expect("log lock").flush()
    }
}

fn init_logging(log_file: Option<PathBuf>) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(path) = log_file {
        if let Some(dir) = path.parent() {
            let _ = fs::create_dir_all(dir);
        }
        if let Ok(f) = fs::File::create(&path) {
            b.target(env_logger::Target::Pipe(Box::new(Tee { file: Mutex::new(f) })));
        }
    }
    b.init();
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => return Err(CliError::Config("--config is required".into())),
    };
    cfg.apply_env()?;
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main_inner(cli: Cli) -> CliResult<()> {
    let command = match &cli.command {
        Top::InitConfig { preset } => {
            init_logging(None);
            print!("{}", ExperimentConfig::preset(preset)?.to_toml()?);
            return Ok(());
        }
        Top::Stage(c) => c.clone(),
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            init_logging(None);
            return Err(e);
        }
    };
    init_logging(Some(cfg.output_dir.join("logs").join(format!("{}.log", command.name()))));
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dir = RunDir::open(cfg, cli.allow_config_change)?;
    log::info!("run directory {} (config {})", dir.root.display(), dir.hash);
    run(&command, &dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
