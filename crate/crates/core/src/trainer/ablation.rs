//! Grid sweeps: every arm crossed with the cartesian product of the axes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{evaluate_policy, train, EvalMode, EvalSummary, StepReport, TrainConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::xio::{config::set_key, run_training, write_ablation_table, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// A named bundle of overrides, e.g. `asyppo` versus `ppo`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationSpec {
    /// Empty means a single arm with no overrides.
    pub arms: Vec<AblationArm>,
    pub axes: Vec<AblationAxis>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub label: String,
    pub arm: String,
    pub overrides: Vec<(String, String)>,
    #[serde(skip)]
    pub config: TrainConfig,
    #[serde(skip)]
    pub reports: Vec<StepReport>,
    pub final_mean_return: f64,
    /// Mean batch return over the last tenth of training.
    pub tail_mean_return: f64,
    pub eval: EvalSummary,
    pub run_dir: Option<PathBuf>,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// `(arm, label, overrides, config)` for one cell.
pub type PlannedCell = (String, String, Vec<(String, String)>, TrainConfig);

/// Expands the sweep in table order: arms outermost, then axes with the last
/// one varying fastest.
pub fn expand(base: &TrainConfig, spec: &AblationSpec) -> Result<Vec<PlannedCell>> {
    for axis in &spec.axes {
        if axis.values.is_empty() {
            return Err(Error::key(axis.key.clone(), None, "grid axis has no values"));
        }
    }
    let default_arm = [AblationArm {
        label: "base".into(),
        overrides: Vec::new(),
    }];
    let arms: &[AblationArm] = if spec.arms.is_empty() { &default_arm } else { &spec.arms };
    let combos: usize = spec.axes.iter().map(|a| a.values.len()).product();
    let mut out = Vec::with_capacity(arms.len() * combos);
    for arm in arms {
        for mut idx in 0..combos {
            let mut picks = vec![0; spec.axes.len()];
            for (slot, axis) in picks.iter_mut().zip(&spec.axes).rev() {
                *slot = idx % axis.values.len();
                idx /= axis.values.len();
            }
            let mut overrides = arm.overrides.clone();
            let mut label = arm.label.clone();
            for (axis, &i) in spec.axes.iter().zip(&picks) {
                overrides.push((axis.key.clone(), axis.values[i].clone()));
                label.push_str(&format!("__{}={}", axis.key, axis.values[i]));
            }
            let mut cfg = base.clone();
            for (k, v) in &overrides {
                set_key(&mut cfg, k, v)?;
            }
            cfg.validate()?;
            out.push((arm.label.clone(), label, overrides, cfg));
        }
    }
    Ok(out)
}

fn tail_mean(reports: &[StepReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    let n = (reports.len() / 10).max(1);
    reports[reports.len() - n..].iter().map(|r| r.mean_return).sum::<f64>() / n as f64
}

/// Trains every cell in turn. With `out_root`, each cell gets its own run
/// directory and the root receives `ablation.csv`, `ablation.md` and a
/// manifest of its own.
pub fn run_ablation(base: &TrainConfig, spec: &AblationSpec, out_root: Option<&Path>) -> Result<Vec<AblationCell>> {
    let plan = expand(base, spec)?;
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)?;
    }
    let mut cells = Vec::with_capacity(plan.len());
    for (i, (arm, label, overrides, cfg)) in plan.into_iter().enumerate() {
        log::info!("ablation cell {}: {label}", i);
        let (outcome, run_dir) = match out_root {
            Some(root) => {
                let dir = root.join(format!("cell_{i:03}_{}", sanitize(&label)));
                let (outcome, _) = run_training(&cfg, &dir, &format!("ablate cell {label}"))?;
                (outcome, Some(dir))
            }
            None => (train(&cfg)?, None),
        };
        let env = cfg.env_spec();
        let prompts = env.sample_prompts(cfg.dataset_seed, cfg.num_prompts)?;
        let eval = evaluate_policy(
            &outcome.policy,
            &env,
            &prompts,
            cfg.eval_episodes,
            seed::derive(cfg.seed, &[seed::TAG_EVAL]),
            EvalMode::Sampled,
        )?;
        cells.push(AblationCell {
            label,
            arm,
            overrides,
            final_mean_return: outcome.reports.last().map_or(0.0, |r| r.mean_return),
            tail_mean_return: tail_mean(&outcome.reports),
            eval,
            reports: outcome.reports,
            config: cfg,
            run_dir,
        });
    }
    if let Some(root) = out_root {
        let artifacts = write_ablation_table(root, &cells)?;
        let mut manifest = RunManifest::new(base, "ablate");
        manifest.artifacts = artifacts;
        manifest.status = "completed".into();
        manifest.finish();
        manifest.write(root)?;
    }
    Ok(cells)
}
