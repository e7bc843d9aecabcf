//! Grouped trajectory collection and row bookkeeping.
//!
//! A batch holds `G` responses for every prompt, stored prompt-major
//! (`trajectory = prompt_index * G + response_index`). Token steps are also
//! addressable as flat rows so batch-wide statistics (value spread ranking,
//! minibatching) can work on one index space.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::approximator::ApproximatorParams;
use crate::envs::{ActionId, EnvSpec, EnvState, PromptSpec, TabularPolicy};
use crate::error::{Error, Result};
use crate::objective::entropy;
use crate::seed;

/// Anything that maps a state to action log-probabilities.
pub trait ActionPolicy: Sync {
    fn action_log_probs(&self, prompt: &PromptSpec, state: &EnvState, encoding: &[f64]) -> Result<Vec<f64>>;
}

impl ActionPolicy for ApproximatorParams {
    fn action_log_probs(&self, _prompt: &PromptSpec, _state: &EnvState, encoding: &[f64]) -> Result<Vec<f64>> {
        self.policy_forward(encoding).map(|(lp, _)| lp)
    }
}

impl ActionPolicy for TabularPolicy {
    fn action_log_probs(&self, _prompt: &PromptSpec, state: &EnvState, _encoding: &[f64]) -> Result<Vec<f64>> {
        let n = self.vocab();
        Ok(match self.action(state) {
            Some(a) => (0..n)
                .map(|i| if i == a { 0.0 } else { f64::NEG_INFINITY })
                .collect(),
            None => vec![-(n as f64).ln(); n],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStep {
    pub state_encoding: Vec<f64>,
    pub action: ActionId,
    /// Log-probability of `action` under the policy that sampled it.
    pub behavior_log_prob: f64,
    /// Entropy of the sampling distribution at this state.
    pub behavior_entropy: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_index: usize,
    pub response_index: usize,
    pub steps: Vec<TokenStep>,
    /// Encoding of the state after the last step when the episode was cut
    /// short by the rollout length cap rather than ending.
    pub bootstrap_state: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn is_truncated(&self) -> bool {
        self.bootstrap_state.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    prompts: Vec<PromptSpec>,
    group_size: usize,
    trajectories: Vec<Trajectory>,
    row_offsets: Vec<usize>,
    row_trajectory: Vec<usize>,
}

impl TrajectoryBatch {
    pub fn new(prompts: Vec<PromptSpec>, group_size: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if trajectories.len() != prompts.len() * group_size {
            return Err(Error::Contract(format!(
                "{} trajectories for {} prompts with group size {}",
                trajectories.len(),
                prompts.len(),
                group_size
            )));
        }
        let mut row_offsets = Vec::with_capacity(trajectories.len() + 1);
        let mut row_trajectory = Vec::new();
        row_offsets.push(0);
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.prompt_index != i / group_size || traj.response_index != i % group_size {
                return Err(Error::Contract(format!(
                    "trajectory {i} labelled ({}, {}) breaks prompt-major order",
                    traj.prompt_index, traj.response_index
                )));
            }
            if traj.is_empty() {
                return Err(Error::Contract(format!("trajectory {i} has no steps")));
            }
            row_trajectory.extend(std::iter::repeat_n(i, traj.len()));
            row_offsets.push(row_trajectory.len());
        }
        Ok(Self {
            prompts,
            group_size,
            trajectories,
            row_offsets,
            row_trajectory,
        })
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Mutable access for tests that edit rewards or states in place.
    pub fn trajectories_mut(&mut self) -> &mut [Trajectory] {
        &mut self.trajectories
    }

    pub fn num_rows(&self) -> usize {
        self.row_trajectory.len()
    }

    pub fn trajectory_index(&self, prompt: usize, response: usize) -> usize {
        prompt * self.group_size + response
    }

    pub fn trajectory(&self, prompt: usize, response: usize) -> &Trajectory {
        &self.trajectories[self.trajectory_index(prompt, response)]
    }

    /// Flat rows of trajectory `traj`.
    pub fn rows_of(&self, traj: usize) -> Range<usize> {
        self.row_offsets[traj]..self.row_offsets[traj + 1]
    }

    /// `(prompt, response, t)` to flat row.
    pub fn row_index(&self, prompt: usize, response: usize, t: usize) -> Option<usize> {
        if prompt >= self.prompts.len() || response >= self.group_size {
            return None;
        }
        let rows = self.rows_of(self.trajectory_index(prompt, response));
        (t < rows.len()).then(|| rows.start + t)
    }

    /// Flat row to `(trajectory, t)`.
    pub fn locate(&self, row: usize) -> (usize, usize) {
        let traj = self.row_trajectory[row];
        (traj, row - self.row_offsets[traj])
    }

    pub fn step_at(&self, row: usize) -> &TokenStep {
        let (traj, t) = self.locate(row);
        &self.trajectories[traj].steps[t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &TokenStep> + '_ {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    pub fn mean_return(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / self.trajectories.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CollectOptions {
    /// Cap on response length; episodes still running at the cap are
    /// marked truncated. `None` runs to the environment's own termination.
    pub max_len: Option<usize>,
    pub parallel: bool,
}

pub(crate) fn sample_categorical(log_probs: &[f64], u: f64) -> ActionId {
    let mut acc = 0.0;
    let mut last_live = 0;
    for (a, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_live = a;
        }
        acc += p;
        if u < acc {
            return a;
        }
    }
    last_live
}

fn run_group<P: ActionPolicy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    prompt_index: usize,
    prompt: &PromptSpec,
    group_size: usize,
    seed_value: u64,
    opts: CollectOptions,
) -> Result<Vec<Trajectory>> {
    let mut rng = seed::rng(seed_value, &[seed::TAG_ROLLOUT, prompt.prompt_id]);
    let cap = opts.max_len.unwrap_or(usize::MAX);
    (0..group_size)
        .map(|response_index| {
            let mut state = env.reset(prompt);
            let mut steps = Vec::new();
            let mut timed_out = false;
            while !state.done && steps.len() < cap {
                let encoding = env.encode_state(prompt, &state);
                let log_probs = policy.action_log_probs(prompt, &state, &encoding)?;
                let action = sample_categorical(&log_probs, rng.random::<f64>());
                let res = env.step(prompt, &state, action)?;
                steps.push(TokenStep {
                    state_encoding: encoding,
                    action,
                    behavior_log_prob: log_probs[action],
                    behavior_entropy: entropy(&log_probs),
                    reward: res.reward,
                    done: res.done,
                });
                timed_out = res.truncated;
                state = res.next_state;
            }
            // Cut off by the length cap or the horizon: bootstrap from the
            // boundary state.
            let bootstrap_state = (!state.done || timed_out).then(|| env.encode_state(prompt, &state));
            Ok(Trajectory {
                prompt_index,
                response_index,
                steps,
                bootstrap_state,
            })
        })
        .collect()
}

/// Samples `group_size` responses per prompt. Each prompt draws from its
/// own stream keyed by `(seed, prompt_id)`, so parallel and serial
/// collection agree exactly.
pub fn collect<P: ActionPolicy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    prompts: &[PromptSpec],
    group_size: usize,
    seed_value: u64,
    opts: CollectOptions,
) -> Result<TrajectoryBatch> {
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    if opts.max_len == Some(0) {
        return Err(Error::Config("response length cap must be at least 1".into()));
    }
    let groups: Vec<Vec<Trajectory>> = if opts.parallel {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| run_group(policy, env, i, p, group_size, seed_value, opts))
            .collect::<Result<_>>()?
    } else {
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| run_group(policy, env, i, p, group_size, seed_value, opts))
            .collect::<Result<_>>()?
    };
    TrajectoryBatch::new(prompts.to_vec(), group_size, groups.into_iter().flatten().collect())
}

/// Discounted reward-to-go per flat row.
pub fn returns_to_go(batch: &TrajectoryBatch, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; batch.num_rows()];
    for (i, traj) in batch.trajectories().iter().enumerate() {
        let rows = batch.rows_of(i);
        let mut acc = 0.0;
        for (row, step) in rows.rev().zip(traj.steps.iter().rev()) {
            acc = step.reward + gamma * acc;
            out[row] = acc;
        }
    }
    out
}

/// Shuffled row-index minibatches over several epochs.
#[derive(Debug, Clone)]
pub struct Minibatches {
    num_rows: usize,
    size: usize,
    epochs: usize,
    seed: u64,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
}

pub fn minibatches(num_rows: usize, size: usize, epochs: usize, seed_value: u64) -> Result<Minibatches> {
    if size == 0 || epochs == 0 {
        return Err(Error::Config(format!(
            "minibatch size and epoch count must be positive (got {size}, {epochs})"
        )));
    }
    Ok(Minibatches {
        num_rows,
        size,
        epochs,
        seed: seed_value,
        epoch: 0,
        cursor: num_rows,
        order: Vec::new(),
    })
}

impl Minibatches {
    /// Epoch of the most recently yielded minibatch.
    pub fn epoch(&self) -> usize {
        self.epoch.saturating_sub(1)
    }
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.num_rows == 0 {
            return None;
        }
        if self.cursor >= self.num_rows {
            if self.epoch >= self.epochs {
                return None;
            }
            let mut rng = seed::rng(self.seed, &[seed::TAG_MINIBATCH, self.epoch as u64]);
            self.order = (0..self.num_rows).collect();
            self.order.shuffle(&mut rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.size).min(self.num_rows);
        let chunk = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(chunk)
    }
}
