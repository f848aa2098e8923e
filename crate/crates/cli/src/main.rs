use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cbsa_cli::commands::{self, TrainReport};
use cbsa_cli::config::{self, Overrides};
use cbsa_cli::Result;
use cbsa_core::model::Ablation;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbsa", version, about = "Semi-supervised multi-label training on synthetic data")]
struct Cli {
    /// TOML file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// tp, tp+saa or full (`none` is accepted for full).
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    /// Comma-separated training seeds for `train` and `ablate`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data directory.
    GenData,
    /// Partition labels into contexts from the labeled subset.
    Partition,
    /// Train one model per seed.
    Train,
    /// Re-score the validation set with a saved model.
    Evaluate,
    /// Train every ablation for every seed.
    Ablate,
    /// Print the resolved configuration.
    Config,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown ablation `{s}`, expected tp, tp+saa, full or none"))
}

fn run(cli: Cli) -> Result<()> {
    let flags = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        ablation: cli.ablate,
        out_dir: cli.out,
        data_dir: cli.data,
    };
    let cfg = config::resolve(cli.config.as_deref(), std::env::vars(), &flags)?;
    let mut log = std::io::stderr().lock();
    match cli.command {
        Command::GenData => {
            let r = commands::gen_data(&cfg)?;
            let _ = writeln!(
                log,
                "wrote {} train ({} labeled) and {} validation instances to {}",
                r.n_train,
                r.n_labeled,
                r.n_val,
                cfg.paths.data_dir.display()
            );
        }
        Command::Partition => {
            let p = commands::partition(&cfg)?;
            for (i, g) in p.groups().iter().enumerate() {
                let _ = writeln!(log, "context {i}: {g:?}");
            }
        }
        Command::Train => match commands::train(&cfg, &cli.seeds, &mut log)? {
            TrainReport::Single(r) => {
                let _ = writeln!(log, "seed {}: mAP {:.2}  CF1 {:.3}", r.seed, 100.0 * r.metrics.map_val, r.metrics.cf1_val);
            }
            TrainReport::Multi(r) => {
                let m = r.summary.map_val;
                let _ = writeln!(log, "mAP {:.2} ± {:.2} over {} seeds", 100.0 * m.mean, 100.0 * m.stderr, m.n);
            }
        },
        Command::Evaluate => {
            let e = commands::evaluate(&cfg)?;
            let _ = writeln!(log, "mAP {:.2}  CF1 {:.3}", 100.0 * e.map_val, e.cf1_val);
        }
        Command::Ablate => {
            let r = commands::ablate(&cfg, &cli.seeds, &mut log)?;
            for ab in Ablation::ALL {
                let m = r.summary_of(ab).map_val;
                let _ = writeln!(log, "{ab:>7}: mAP {:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.stderr);
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
