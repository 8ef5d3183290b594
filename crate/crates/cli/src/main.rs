//! `hgnn`: train, evaluate, and inspect the graph few-shot models from one
//! flat key-value configuration. Every run writes its fully resolved
//! configuration next to its artifacts, and identical invocations produce
//! byte-identical outputs.

mod commands;
mod config;
mod errors;
mod pca;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::RunConfig;
use errors::CliError;

#[derive(Parser)]
#[command(
    name = "hgnn",
    version,
    about = "Few-shot classification by feature adaptation on graphs",
    after_help = config::key_help(),
    arg_required_else_help = true
)]
struct Cli {
    /// Config file of `key = value` lines ('#' starts a comment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override every stream seed (data, train, eval, proj, gradcheck) at once.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory artifacts are written to.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Override one configuration key; repeatable. Applied after --config and --seed.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic feature pool and write it as a feature file.
    GenData,
    /// Train a model; writes the checkpoint and the per-epoch log.
    Train,
    /// Evaluate a checkpoint over independently seeded tasks.
    Eval,
    /// Train and evaluate every cell of the configured ablation grids.
    Ablate,
    /// Project one episode's node features to 2D and write the coordinates.
    ExportProj,
    /// Audit analytic gradients against central finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.apply_sets(&cli.set)?;
    cfg.resolve()?;

    std::fs::create_dir_all(&cli.out).map_err(|e| {
        CliError::Artifact(format!("cannot create output directory {}: {e}", cli.out.display()))
    })?;
    let resolved = cli.out.join("resolved_config.txt");
    std::fs::write(&resolved, cfg.echo())
        .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", resolved.display())))?;

    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &cli.out),
        Command::Train => commands::train(&cfg, &cli.out),
        Command::Eval => commands::eval(&cfg, &cli.out),
        Command::Ablate => commands::ablate_cmd(&cfg, &cli.out),
        Command::ExportProj => commands::export_proj(&cfg, &cli.out),
        Command::Gradcheck => commands::gradcheck(&cfg, &cli.out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}
