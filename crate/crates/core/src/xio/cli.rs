//! `asyppo train | eval | ablate | plot`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{load_config, parse_assignment, set_key};
use super::{load_params, metrics, plots, run_training, RunManifest, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::seed;
use crate::trainer::{evaluate_policy, run_ablation, AblationArm, AblationAxis, AblationSpec, EvalMode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "asyppo", version, about = "Actor-critic training with mini-critic ensembles")]
pub struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Serial execution and zeroed timings in the metrics.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a saved policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Defaults to the `config.toml` next to the policy.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Argmax actions instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Sweep arms over a grid of overrides.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// `key=v1,v2,...`; several axes form a cartesian product.
        #[arg(long, num_args = 1.., value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        /// `label:key=value;key=value`, repeatable.
        #[arg(long)]
        arm: Vec<String>,
    },
    /// Render SVG plots from a metrics log.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn build_config(path: Option<&Path>, sets: &[String], cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    for s in sets {
        let (k, v) = parse_assignment(s)?;
        set_key(&mut cfg, &k, &v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_arm(s: &str) -> Result<AblationArm> {
    let (label, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("arm {s:?} must look like label:key=value;...")))?;
    let overrides = rest
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(parse_assignment)
        .collect::<Result<_>>()?;
    Ok(AblationArm {
        label: label.trim().to_string(),
        overrides,
    })
}

fn parse_axis(s: &str) -> Result<AblationAxis> {
    let (key, values) = parse_assignment(s)?;
    Ok(AblationAxis {
        key,
        values: values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
    })
}

fn default_out(cfg: &TrainConfig, what: &str) -> PathBuf {
    PathBuf::from("runs").join(format!("{what}-{}-seed{}", cfg.algorithm.as_str(), cfg.seed))
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, set } => {
            let cfg = build_config(config.as_deref(), set, cli)?;
            let dir = cli.out.clone().unwrap_or_else(|| default_out(&cfg, "train"));
            let (outcome, _) = run_training(&cfg, &dir, "train")?;
            let last = outcome.reports.last().map_or(0.0, |r| r.mean_return);
            println!(
                "trained {} steps, final mean return {last:.4}, run directory {}",
                outcome.reports.len(),
                dir.display()
            );
        }
        Command::Eval {
            policy,
            config,
            set,
            episodes,
            greedy,
        } => {
            let sibling = policy.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.exists());
            let cfg = build_config(config.as_deref().or(sibling.as_deref()), set, cli)?;
            let params = load_params(policy)?;
            let env = cfg.env_spec();
            let prompts = env.sample_prompts(cfg.dataset_seed, cfg.num_prompts)?;
            let mode = if *greedy { EvalMode::Greedy } else { EvalMode::Sampled };
            let summary = evaluate_policy(
                &params,
                &env,
                &prompts,
                episodes.unwrap_or(cfg.eval_episodes),
                seed::derive(cfg.seed, &[seed::TAG_EVAL]),
                mode,
            )?;
            let json = serde_json::to_string_pretty(&summary)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("eval.json"), &json)?;
            }
            println!("{json}");
        }
        Command::Ablate { config, set, grid, arm } => {
            let cfg = build_config(config.as_deref(), set, cli)?;
            let spec = AblationSpec {
                arms: arm.iter().map(|a| parse_arm(a)).collect::<Result<_>>()?,
                axes: grid.iter().map(|g| parse_axis(g)).collect::<Result<_>>()?,
            };
            let dir = cli.out.clone().unwrap_or_else(|| default_out(&cfg, "ablate"));
            let cells = run_ablation(&cfg, &spec, Some(&dir))?;
            for c in &cells {
                println!("{}\t{:.4}\t{:.4}", c.label, c.tail_mean_return, c.eval.mean_return);
            }
        }
        Command::Plot { metrics: path } => {
            let reports = metrics::read_metrics(path)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            let written = plots::write_plots(&dir, &reports)?;
            if let Ok(mut manifest) = RunManifest::read(&dir) {
                for name in &written {
                    manifest.add_artifact(name.clone());
                }
                manifest.write(&dir)?;
            }
            for name in written {
                println!("{}", dir.join(name).display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            EXIT_DIVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_and_axis_syntax() {
        let arm = parse_arm("mini:algorithm=asyppo; k=0.2").unwrap();
        assert_eq!(arm.label, "mini");
        assert_eq!(arm.overrides, vec![("algorithm".into(), "asyppo".into()), ("k".into(), "0.2".into())]);
        assert!(parse_arm("nolabel").is_err());
        let axis = parse_axis("h=0, 0.2,").unwrap();
        assert_eq!(axis.values, vec!["0".to_string(), "0.2".to_string()]);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["asyppo", "fly"]), EXIT_USAGE);
        assert_eq!(run(["asyppo", "--help"]), EXIT_OK);
    }
}
