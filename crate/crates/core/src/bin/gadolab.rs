use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gadolab::config::RunConfig;
use gadolab::nets::Role;
use gadolab::{pipeline, Error, Modality};

#[derive(Parser)]
#[command(name = "gadolab", version, about = "Virtual contrast enhancement on synthetic MRI phantoms")]
struct Cli {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    name: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired phantom datasets for every configured modality.
    Gen,
    /// Train models and write checkpoints.
    Train {
        /// e2e, dm or fm; all configured models when omitted.
        #[arg(long)]
        model: Option<Role>,
        /// t1 or t1w; all configured modalities when omitted.
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict or sample every test slice.
    Sample {
        #[arg(long)]
        model: Option<Role>,
        #[arg(long)]
        modality: Option<Modality>,
        /// Posterior samples per slice.
        #[arg(long)]
        ensemble: Option<usize>,
        /// Reverse-diffusion steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write reports/metrics.csv.
    Eval,
    /// Write reports/sweep.csv and the Dice/Jaccard plots.
    Sweep,
    /// Print the resolved configuration.
    Config,
}

fn resolve(cli: &Cli) -> gadolab::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(n) = &cli.name {
        overrides.push(format!("name={}", serde_json::Value::String(n.clone())));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("output_dir={}", serde_json::Value::String(o.display().to_string())));
    }
    match &cli.command {
        Command::Train { epochs: Some(e), .. } => overrides.push(format!("train.epochs={e}")),
        Command::Sample { ensemble, steps, .. } => {
            if let Some(n) = ensemble {
                overrides.push(format!("sampler.ensemble={n}"));
            }
            if let Some(s) = steps {
                overrides.push(format!("sampler.dm_steps={s}"));
            }
        }
        _ => {}
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn targets(cfg: &RunConfig, model: Option<Role>, modality: Option<Modality>) -> Vec<(Role, Modality)> {
    let roles = model.map(|r| vec![r]).unwrap_or_else(|| cfg.models.clone());
    let mods = modality.map(|m| vec![m]).unwrap_or_else(|| cfg.modalities.clone());
    roles.iter().flat_map(|&r| mods.iter().map(move |&m| (r, m))).collect()
}

fn run(cli: &Cli, argv: &[String]) -> gadolab::Result<()> {
    let cfg = resolve(cli)?;
    let root = cfg.run_dir();
    match &cli.command {
        Command::Config => println!("{}", cfg.to_json()?),
        Command::Gen => {
            pipeline::timed(&cfg, argv, "gen", || pipeline::gen(&cfg))?;
            println!("datasets written under {}", root.join("data").display());
        }
        Command::Train { model, modality, .. } => pipeline::timed(&cfg, argv, "train", || {
            for (role, m) in targets(&cfg, *model, *modality) {
                let every = (cfg.train.epochs / 10).max(1);
                let log = pipeline::train(&cfg, role, m, |e| {
                    if e.epoch % every == 0 {
                        eprintln!("{} {} epoch {} loss {:.6}", role.name(), m.name(), e.epoch, e.loss);
                    }
                })?;
                println!("{} {}: {} epochs, final loss {:.6}", role.name(), m.name(), log.len(), log.last().map_or(f64::NAN, |e| e.loss));
            }
            Ok(())
        })?,
        Command::Sample { model, modality, .. } => pipeline::timed(&cfg, argv, "sample", || {
            for (role, m) in targets(&cfg, *model, *modality) {
                pipeline::sample(&cfg, role, m)?;
                println!("{} {}: samples written", role.name(), m.name());
            }
            Ok(())
        })?,
        Command::Eval => {
            let rows = pipeline::timed(&cfg, argv, "eval", || pipeline::eval(&cfg))?;
            for r in rows.iter().filter(|r| r.slice == "mean" || r.slice == "all") {
                println!("{:<4} {:<4} {:<18} {}", r.modality.name(), r.model, r.metric, r.value);
            }
        }
        Command::Sweep => {
            let curves = pipeline::timed(&cfg, argv, "sweep", || pipeline::sweep(&cfg))?;
            for (m, c) in &curves {
                let mean = c.dice.iter().sum::<f64>() / c.dice.len() as f64;
                println!("{:<4} {:<6} mean dice {:.4}", m.name(), c.label, mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) | Error::Integration { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
