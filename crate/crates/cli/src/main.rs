use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use e2urec_core::baselines::Method;
use e2urec_core::eval::render_table;
use e2urec_core::experiment::{render_saved, Experiment, ExperimentConfig};
use e2urec_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "e2urec", version, about = "Recommendation unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset bundle and its manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Also write every rendered sample as JSON lines.
        #[arg(long)]
        dump_rendered: bool,
    },
    /// Train the original and retrained reference models.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run unlearning methods and write the comparison table.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method keys.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        /// Run methods on separate threads.
        #[arg(long)]
        parallel_methods: bool,
    },
    /// Compare the full objective with each loss removed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the tables from saved reports.
    Report {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            common,
            dump_rendered,
        } => {
            let mut exp = Experiment::new(&load(&common)?)?;
            let m = exp.prepare(dump_rendered)?;
            println!(
                "train {} valid {} test {} forgotten {} ({} users) retained {}",
                m.train, m.valid, m.test, m.forgotten, m.forgotten_users, m.retained
            );
        }
        Command::Train { common } => {
            let mut exp = Experiment::new(&load(&common)?)?;
            exp.original()?;
            exp.reference()?;
            println!("models cached in {}", exp.out_dir().display());
        }
        Command::Run {
            common,
            methods,
            parallel_methods,
        } => {
            let cfg = load(&common)?;
            let methods = methods.unwrap_or_else(|| cfg.methods.clone());
            let mut exp = Experiment::new(&cfg)?;
            let rows = exp.run(&methods, parallel_methods)?;
            print!("{}", render_table(&rows));
        }
        Command::Ablate { common } => {
            let mut exp = Experiment::new(&load(&common)?)?;
            let rows = exp.ablate()?;
            print!("{}", render_table(&rows));
        }
        Command::Report { out } => print!("{}", render_saved(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Training => 4,
            })
        }
    }
}
