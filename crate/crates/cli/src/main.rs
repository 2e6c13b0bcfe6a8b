//! `race-lab`: train, deploy and evaluate racing policies.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use racelab::experiment::{self, ExperimentConfig, ExperimentError};

const SEED_ENV: &str = "RACE_LAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "race-lab", version, about = "Residual SAC racing laboratory")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train a policy and write checkpoint, report and lap curve.
    Train(Args),
    /// Drive a checkpoint (or the base controller alone) until 20 clean laps.
    Deploy(Args),
    /// Run the four-variant ablation grid over several seeds.
    Ablation(Args),
    /// Zero- or few-shot transfer of a checkpoint to another track.
    Transfer(Args),
    /// Print track geometry statistics as JSON.
    TrackInfo(Args),
    /// Write the steady-state steering lookup table as CSV.
    MakeMapTable(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides: `--section.key=value` or `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

/// Turns `--a.b=1 --flag --c-d 2` into dotted key/value pairs; dashes in
/// keys become underscores and a bare flag means `true`.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let body = tok
            .strip_prefix("--")
            .ok_or_else(|| ExperimentError::Config(format!("unexpected argument `{tok}`; overrides look like --key=value")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => match tokens.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 1;
                    (body, next.clone())
                }
                _ => (body, "true".to_string()),
            },
        };
        if key.is_empty() {
            return Err(ExperimentError::Config(format!("empty key in `{tok}`")));
        }
        out.push((key.replace('-', "_"), value));
        i += 1;
    }
    Ok(out)
}

fn load_config(args: &Args) -> Result<ExperimentConfig, ExperimentError> {
    let mut overrides = parse_overrides(&args.overrides)?;
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let file_has_seed = text
        .parse::<racelab::experiment::TomlTable>()
        .map(|t| t.contains_key("seed"))
        .unwrap_or(false);
    if !file_has_seed && !overrides.iter().any(|(k, _)| k == "seed") {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            overrides.insert(0, ("seed".into(), seed));
        }
    }
    ExperimentConfig::from_toml_str(&text, &overrides)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).context("serializing result")?);
    Ok(())
}

fn run(verb: &Verb) -> Result<(), ExperimentError> {
    let args = match verb {
        Verb::Train(a) | Verb::Deploy(a) | Verb::Ablation(a) | Verb::Transfer(a) | Verb::TrackInfo(a) | Verb::MakeMapTable(a) => a,
    };
    let cfg = load_config(args)?;
    let out = |r: Result<()>| r.map_err(|e| ExperimentError::Runtime(format!("{e:#}")));
    match verb {
        Verb::Train(_) => {
            let r = experiment::cmd_train(&cfg)?;
            eprintln!(
                "trained {} steps, {} updates, {} laps, {} boundary violations -> {}",
                r.env_steps,
                r.learner_updates,
                r.laps.len(),
                r.boundary_violations,
                cfg.output_dir.display()
            );
        }
        Verb::Deploy(_) => {
            let r = experiment::cmd_deploy(&cfg)?;
            eprintln!(
                "converged {} t_mu {:?} n_bound {} -> {}",
                r.converged,
                r.t_mu,
                r.n_bound,
                cfg.output_dir.display()
            );
            if !r.converged {
                return Err(ExperimentError::Runtime("deployment did not reach the clean-lap target".into()));
            }
        }
        Verb::Ablation(_) => {
            let s = experiment::cmd_ablation(&cfg)?;
            print!("{}", experiment::ablation_csv(&s.rows));
        }
        Verb::Transfer(_) => {
            let r = experiment::cmd_transfer(&cfg)?;
            eprintln!(
                "transfer={} {} -> {}: t_mu {:?} n_bound {}",
                r.transfer, r.source_track, r.target_track, r.deployment.t_mu, r.deployment.n_bound
            );
        }
        Verb::TrackInfo(_) => {
            let info = experiment::track_info(&cfg)?;
            experiment::write_manifest(&cfg, &cfg.output_dir, "track-info")?;
            out(print_json(&info))?
        }
        Verb::MakeMapTable(_) => {
            let table = experiment::make_map_table(&cfg);
            let path = cfg.output_dir.join("map_table.csv");
            out(std::fs::create_dir_all(&cfg.output_dir)
                .and_then(|_| std::fs::write(&path, table.to_csv()))
                .with_context(|| format!("writing {}", path.display())))?;
            experiment::write_manifest(&cfg, &cfg.output_dir, "make-map-table")?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("race-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
