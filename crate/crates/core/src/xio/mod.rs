//! Files and the command line: configs, metric logs, manifests, plots.
//!
//! A run directory holds `config.toml`, `metrics.jsonl`, `metrics.csv`,
//! `policy.json`, `critics.json` (critic-based runs), the SVG plots and
//! exactly one `manifest.json` listing all of them.

use std::path::Path;

use crate::approximator::ApproximatorParams;
use crate::error::{Error, Result};
use crate::trainer::{train_with_observer, AblationCell, TrainConfig, TrainOutcome};

pub mod cli;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod plots;

pub use manifest::RunManifest;
pub use metrics::{read_metrics, MetricsWriter};

pub const CONFIG_FILE: &str = "config.toml";
pub const POLICY_FILE: &str = "policy.json";
pub const CRITICS_FILE: &str = "critics.json";
pub const LAST_GOOD_POLICY_FILE: &str = "last_good_policy.json";

pub fn save_params(path: &Path, params: &ApproximatorParams) -> Result<()> {
    std::fs::write(path, serde_json::to_string(params)?)?;
    Ok(())
}

/// Loads and re-validates a saved network.
pub fn load_params(path: &Path) -> Result<ApproximatorParams> {
    let raw: ApproximatorParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    ApproximatorParams::from_weights(raw.layer_sizes(), raw.weights().to_vec(), raw.seed())
}

/// Trains into `dir`, streaming metrics as steps finish. On divergence the
/// last good policy is saved and the manifest records the failure before
/// the error is returned.
pub fn run_training(cfg: &TrainConfig, dir: &Path, command: &str) -> Result<(TrainOutcome, RunManifest)> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    for stale in [metrics::JSONL_FILE, metrics::CSV_FILE, LAST_GOOD_POLICY_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let mut manifest = RunManifest::new(cfg, command);
    std::fs::write(dir.join(CONFIG_FILE), &manifest.config)?;
    manifest.add_artifact(CONFIG_FILE);
    let mut writer = MetricsWriter::open(dir)?;
    manifest.add_artifact(metrics::JSONL_FILE);
    manifest.add_artifact(metrics::CSV_FILE);
    manifest.write(dir)?;

    let outcome = match train_with_observer(cfg, |r| writer.append(r)) {
        Ok(o) => o,
        Err(err) => {
            if let Error::Diverged { last_good_policy, .. } = &err {
                save_params(&dir.join(LAST_GOOD_POLICY_FILE), last_good_policy)?;
                manifest.add_artifact(LAST_GOOD_POLICY_FILE);
            }
            manifest.status = format!("failed: {err}");
            manifest.finish();
            manifest.write(dir)?;
            return Err(err);
        }
    };

    save_params(&dir.join(POLICY_FILE), &outcome.policy)?;
    manifest.add_artifact(POLICY_FILE);
    if let Some(ens) = &outcome.ensemble {
        std::fs::write(dir.join(CRITICS_FILE), serde_json::to_string(ens.critics())?)?;
        manifest.add_artifact(CRITICS_FILE);
    }
    for name in plots::write_plots(dir, &outcome.reports)? {
        manifest.add_artifact(name);
    }
    manifest.step_wall_time_ms = outcome.step_wall_time_ms.clone();
    manifest.status = "completed".into();
    manifest.finish();
    manifest.write(dir)?;
    Ok((outcome, manifest))
}

/// Writes `ablation.csv` and `ablation.md` summarizing the cells.
pub fn write_ablation_table(dir: &Path, cells: &[AblationCell]) -> Result<Vec<String>> {
    let mut w = csv::Writer::from_path(dir.join("ablation.csv")).map_err(|e| Error::Parse(e.to_string()))?;
    let csv = |r: csv::Result<()>| r.map_err(|e| Error::Parse(e.to_string()));
    csv(w.write_record([
        "label",
        "arm",
        "overrides",
        "final_mean_return",
        "tail_mean_return",
        "eval_mean_return",
        "eval_episodes",
    ]))?;
    let mut md = String::from(
        "| cell | arm | overrides | final return | tail return | eval return |\n|---|---|---|---|---|---|\n",
    );
    for c in cells {
        let overrides: Vec<String> = c.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let overrides = overrides.join(";");
        csv(w.write_record([
            c.label.clone(),
            c.arm.clone(),
            overrides.clone(),
            format!("{:?}", c.final_mean_return),
            format!("{:?}", c.tail_mean_return),
            format!("{:?}", c.eval.mean_return),
            c.eval.episodes.to_string(),
        ]))?;
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
            c.label, c.arm, overrides, c.final_mean_return, c.tail_mean_return, c.eval.mean_return
        ));
    }
    w.flush()?;
    std::fs::write(dir.join("ablation.md"), md)?;
    Ok(vec!["ablation.csv".into(), "ablation.md".into()])
}
