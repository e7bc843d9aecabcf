//! Advantage estimators: GAE over ensemble-aggregated values, and the
//! critic-free group baseline.

use serde::{Deserialize, Serialize};

use crate::ensemble::ValueTable;
use crate::error::{Error, Result};
use crate::rollout::TrajectoryBatch;

/// Added to the group standard deviation before dividing.
pub const GROUP_BASELINE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    GaeEnsemble,
    GroupBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    /// One advantage per flat batch row.
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub source: AdvantageSource,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// GAE with the aggregated critic value `V̄` and per-trajectory bootstrap
/// values from `values`.
pub fn gae(batch: &TrajectoryBatch, values: &ValueTable, gamma: f64, lambda: f64) -> Result<AdvantageTable> {
    gae_from_values(batch, &values.aggregated, &values.bootstrap, gamma, lambda)
}

/// Single reverse sweep: `A_t = δ_t + γλ A_{t+1}`, with
/// `δ_t = r_t + γ V(s_{t+1}) − V(s_t)` and `V(s_T)` taken from `bootstrap`.
pub fn gae_from_values(
    batch: &TrajectoryBatch,
    state_values: &[f64],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageTable> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    if state_values.len() != batch.num_rows() {
        return Err(Error::Shape {
            context: "state values",
            expected: batch.num_rows(),
            actual: state_values.len(),
        });
    }
    if bootstrap.len() != batch.trajectories().len() {
        return Err(Error::Shape {
            context: "bootstrap values",
            expected: batch.trajectories().len(),
            actual: bootstrap.len(),
        });
    }
    let mut out = vec![0.0; batch.num_rows()];
    for (i, traj) in batch.trajectories().iter().enumerate() {
        let mut next_value = bootstrap[i];
        let mut acc = 0.0;
        for (row, step) in batch.rows_of(i).rev().zip(traj.steps.iter().rev()) {
            let delta = step.reward + gamma * next_value - state_values[row];
            acc = delta + gamma * lambda * acc;
            out[row] = acc;
            next_value = state_values[row];
        }
    }
    if let Some(row) = out.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("advantage at row {row} is {}", out[row])));
    }
    Ok(AdvantageTable {
        values: out,
        gamma,
        lambda,
        source: AdvantageSource::GaeEnsemble,
    })
}

/// Group-normalized episode return, broadcast to every token of the episode.
pub fn group_baseline_advantage(batch: &TrajectoryBatch) -> Result<AdvantageTable> {
    let g = batch.group_size();
    if g < 2 {
        return Err(Error::Config(format!(
            "the group baseline needs at least 2 responses per prompt, got {g}"
        )));
    }
    let mut out = vec![0.0; batch.num_rows()];
    for p in 0..batch.prompts().len() {
        let returns: Vec<f64> = (0..g).map(|r| batch.trajectory(p, r).total_reward()).collect();
        let first = returns[0];
        if returns.iter().all(|&r| r == first) {
            continue;
        }
        let mean = returns.iter().sum::<f64>() / g as f64;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        for (r, ret) in returns.iter().enumerate() {
            let a = (ret - mean) / (std + GROUP_BASELINE_EPSILON);
            for row in batch.rows_of(batch.trajectory_index(p, r)) {
                out[row] = a;
            }
        }
    }
    Ok(AdvantageTable {
        values: out,
        gamma: 1.0,
        lambda: 1.0,
        source: AdvantageSource::GroupBaseline,
    })
}

/// Batch-wide zero-mean, unit-variance rescaling (off by default in training).
pub fn whiten(table: &mut AdvantageTable) {
    let n = table.values.len();
    if n < 2 {
        return;
    }
    let mean = table.values.iter().sum::<f64>() / n as f64;
    let std = (table.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    table
        .values
        .iter_mut()
        .for_each(|a| *a = (*a - mean) / (std + GROUP_BASELINE_EPSILON));
}

/// `A_t + V(s_t)`: the λ-return target implied by an advantage table.
pub fn lambda_returns(advantages: &AdvantageTable, state_values: &[f64]) -> Vec<f64> {
    advantages
        .values
        .iter()
        .zip(state_values)
        .map(|(a, v)| a + v)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::PromptSpec;
    use crate::rollout::{returns_to_go, TokenStep, Trajectory};
    use crate::seed;
    use rand::Rng as _;

    fn batch(groups: &[Vec<Vec<f64>>]) -> TrajectoryBatch {
        let g = groups[0].len();
        let prompts = (0..groups.len())
            .map(|i| PromptSpec {
                prompt_id: i as u64,
                difficulty: 1,
                context: vec![],
                target: vec![],
            })
            .collect();
        let mut trajs = Vec::new();
        for (p, group) in groups.iter().enumerate() {
            for (r, rewards) in group.iter().enumerate() {
                trajs.push(Trajectory {
                    prompt_index: p,
                    response_index: r,
                    steps: rewards
                        .iter()
                        .enumerate()
                        .map(|(t, &rw)| TokenStep {
                            state_encoding: vec![],
                            action: 0,
                            behavior_log_prob: 0.0,
                            behavior_entropy: 0.0,
                            reward: rw,
                            done: t + 1 == rewards.len(),
                        })
                        .collect(),
                    bootstrap_state: None,
                });
            }
        }
        TrajectoryBatch::new(prompts, g, trajs).unwrap()
    }

    fn double_sum(r: &[f64], v: &[f64], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let next = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..n).map(|t| r[t] + gamma * next(t) - v[t]).collect();
        (0..n)
            .map(|t| (0..n - t).map(|l| (gamma * lambda).powi(l as i32) * delta[t + l]).sum())
            .collect()
    }

    #[test]
    fn worked_example() {
        let b = batch(&[vec![vec![0.0, 0.0, 1.0]]]);
        let a = gae_from_values(&b, &[0.5, 0.5, 0.5], &[0.0], 1.0, 1.0).unwrap();
        assert_eq!(a.values, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn zeros_give_zeros() {
        let b = batch(&[vec![vec![0.0; 4], vec![0.0; 2]]]);
        let a = gae_from_values(&b, &[0.0; 6], &[0.0; 2], 0.9, 0.8).unwrap();
        assert!(a.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let b = batch(&[vec![vec![0.3, -0.2, 1.0]]]);
        let v = [0.1, 0.7, -0.4];
        let a = gae_from_values(&b, &v, &[0.25], 0.9, 0.0).unwrap();
        let deltas = [0.3 + 0.9 * 0.7 - 0.1, -0.2 + 0.9 * -0.4 - 0.7, 1.0 + 0.9 * 0.25 + 0.4];
        assert_eq!(a.values, deltas);
    }

    #[test]
    fn gamma_zero_ignores_bootstrap() {
        let b = batch(&[vec![vec![0.3, 1.0]]]);
        let v = [0.1, 0.6];
        let a1 = gae_from_values(&b, &v, &[5.0], 0.0, 0.7).unwrap();
        let a2 = gae_from_values(&b, &v, &[-3.0], 0.0, 0.7).unwrap();
        assert_eq!(a1.values, a2.values);
        assert_eq!(a1.values, vec![0.3 - 0.1, 1.0 - 0.6]);
    }

    #[test]
    fn matches_double_sum_random() {
        let mut rng = seed::rng(4, &[]);
        for _ in 0..1000 {
            let n = rng.random_range(1..=10);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let boot = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-1.0..1.0) };
            let (g, l) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
            let got = gae_from_values(&batch(&[vec![r.clone()]]), &v, &[boot], g, l).unwrap();
            for (x, y) in got.values.iter().zip(double_sum(&r, &v, boot, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unit_gamma_lambda_is_return_minus_value() {
        let mut rng = seed::rng(5, &[]);
        for _ in 0..200 {
            let n = rng.random_range(1..=10);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = batch(&[vec![r]]);
            let a = gae_from_values(&b, &v, &[0.0], 1.0, 1.0).unwrap();
            let ret = returns_to_go(&b, 1.0);
            for t in 0..n {
                assert!((a.values[t] - (ret[t] - v[t])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let b = batch(&[vec![vec![1.0]]]);
        assert!(gae_from_values(&b, &[0.0], &[0.0], 1.1, 1.0).is_err());
        assert!(gae_from_values(&b, &[0.0], &[0.0], 1.0, -0.1).is_err());
        assert!(gae_from_values(&b, &[0.0, 1.0], &[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn group_baseline_example() {
        let b = batch(&[vec![vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0], vec![0.0, 0.0, 0.0]]]);
        let a = group_baseline_advantage(&b).unwrap();
        let std = (0.1875f64).sqrt();
        let hi = 0.75 / (std + 1e-8);
        let lo = -0.25 / (std + 1e-8);
        assert!((hi - 1.7320508).abs() < 1e-6);
        assert!((lo + 0.5773503).abs() < 1e-6);
        assert_eq!(&a.values[..2], &[hi, hi]);
        assert!(a.values[2..].iter().all(|&x| x == lo));
    }

    #[test]
    fn group_baseline_zero_variance_and_centering() {
        let b = batch(&[vec![vec![1.0], vec![1.0], vec![1.0]], vec![vec![0.0], vec![1.0], vec![0.0]]]);
        let a = group_baseline_advantage(&b).unwrap();
        assert_eq!(&a.values[..3], &[0.0, 0.0, 0.0]);
        let mean: f64 = a.values[3..].iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!(group_baseline_advantage(&batch(&[vec![vec![1.0]]])).is_err());
    }

    #[test]
    fn group_baseline_shift_invariant() {
        let mut rng = seed::rng(6, &[]);
        for _ in 0..50 {
            let rs: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let c = rng.random_range(-5.0..5.0);
            let a = group_baseline_advantage(&batch(&[rs.iter().map(|&r| vec![r]).collect()])).unwrap();
            let b = group_baseline_advantage(&batch(&[rs.iter().map(|&r| vec![r + c]).collect()])).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whitening_normalizes() {
        let mut t = AdvantageTable {
            values: vec![1.0, 2.0, 3.0, 6.0],
            gamma: 1.0,
            lambda: 1.0,
            source: AdvantageSource::GaeEnsemble,
        };
        whiten(&mut t);
        let mean: f64 = t.values.iter().sum::<f64>() / 4.0;
        let var: f64 = t.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
    }
}
