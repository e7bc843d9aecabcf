//! Mini-critic ensemble trained on disjoint per-prompt shards.
//!
//! Within every prompt group the responses are shuffled and dealt
//! round-robin to the critics, so each critic sees a near-equal share of
//! every prompt and no response is seen by two critics. Each critic then
//! regresses its own shard's returns with squared error. The ensemble's
//! aggregated value and the population standard deviation across critics
//! are reported per token.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{ApproximatorParams, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::rollout::{Trajectory, TrajectoryBatch};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    critics: Vec<ApproximatorParams>,
    optimizers: Vec<Optimizer>,
    learning_rate: f64,
}

impl CriticEnsemble {
    /// `num_critics` critics of one layout, critic `m` seeded from `(seed, m)`.
    pub fn new(
        layer_sizes: &[usize],
        num_critics: usize,
        seed_value: u64,
        optimizer: OptimizerKind,
        learning_rate: f64,
    ) -> Result<Self> {
        if num_critics == 0 {
            return Err(Error::Config("an ensemble needs at least one critic".into()));
        }
        let critics = (0..num_critics)
            .map(|m| {
                ApproximatorParams::init(
                    layer_sizes,
                    seed::derive(seed_value, &[seed::TAG_CRITIC_INIT, m as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_critics(critics, optimizer, learning_rate)
    }

    pub fn from_critics(
        critics: Vec<ApproximatorParams>,
        optimizer: OptimizerKind,
        learning_rate: f64,
    ) -> Result<Self> {
        let first = critics
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one critic".into()))?;
        if first.output_dim() != 1 {
            return Err(Error::Config("critics must have a scalar output".into()));
        }
        if critics.iter().any(|c| c.layer_sizes() != first.layer_sizes()) {
            return Err(Error::Config("all critics must share one layer layout".into()));
        }
        let optimizers = critics
            .iter()
            .map(|c| Optimizer::new(optimizer, learning_rate, c.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            critics,
            optimizers,
            learning_rate,
        })
    }

    pub fn num_critics(&self) -> usize {
        self.critics.len()
    }

    pub fn critics(&self) -> &[ApproximatorParams] {
        &self.critics
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Total parameters across all critics.
    pub fn param_count(&self) -> usize {
        self.critics.iter().map(ApproximatorParams::len).sum()
    }

    pub fn values_at(&self, encoding: &[f64]) -> Result<Vec<f64>> {
        self.critics.iter().map(|c| c.value_forward(encoding)).collect()
    }
}

/// Owner critic of every `(prompt, response)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    num_critics: usize,
    group_size: usize,
    owner: Vec<usize>,
}

impl ShardAssignment {
    pub fn num_critics(&self) -> usize {
        self.num_critics
    }

    pub fn critic_of(&self, prompt: usize, response: usize) -> usize {
        self.owner[prompt * self.group_size + response]
    }

    /// Owner indexed by trajectory (prompt-major order).
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    pub fn shard_trajectories(&self, critic: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&i| self.owner[i] == critic).collect()
    }

    pub fn shard_rows(&self, batch: &TrajectoryBatch, critic: usize) -> Vec<usize> {
        self.shard_trajectories(critic)
            .into_iter()
            .flat_map(|t| batch.rows_of(t))
            .collect()
    }
}

/// Shuffles each prompt's responses and deals them round-robin to `num_critics`.
pub fn assign_shards(batch: &TrajectoryBatch, num_critics: usize, seed_value: u64) -> Result<ShardAssignment> {
    let g = batch.group_size();
    if num_critics == 0 {
        return Err(Error::Config("an ensemble needs at least one critic".into()));
    }
    if g < num_critics {
        return Err(Error::Config(format!(
            "group size {g} is smaller than the critic count {num_critics}; some critic would get no data"
        )));
    }
    let mut owner = vec![0; batch.trajectories().len()];
    for (p, prompt) in batch.prompts().iter().enumerate() {
        let mut rng = seed::rng(seed_value, &[seed::TAG_SHARDS, prompt.prompt_id]);
        let mut order: Vec<usize> = (0..g).collect();
        order.shuffle(&mut rng);
        for (deal, response) in order.into_iter().enumerate() {
            owner[p * g + response] = deal % num_critics;
        }
    }
    Ok(ShardAssignment {
        num_critics,
        group_size: g,
        owner,
    })
}

/// Mean squared error of one critic over `rows`, and its gradient.
pub fn critic_loss_and_gradient(
    critic: &ApproximatorParams,
    batch: &TrajectoryBatch,
    rows: &[usize],
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if targets.len() != batch.num_rows() {
        return Err(Error::Shape {
            context: "critic targets",
            expected: batch.num_rows(),
            actual: targets.len(),
        });
    }
    let mut grad = vec![0.0; critic.len()];
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    let n = rows.len() as f64;
    let mut loss = 0.0;
    for &row in rows {
        let (v, record) = critic.value_forward_record(&batch.step_at(row).state_encoding)?;
        let err = v - targets[row];
        loss += err * err / n;
        critic.backward_accumulate(&record, &[2.0 * err / n], &mut grad)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("critic loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Full-shard loss and gradient for critic `critic`.
pub fn shard_gradient(
    ensemble: &CriticEnsemble,
    critic: usize,
    batch: &TrajectoryBatch,
    assignment: &ShardAssignment,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let rows = assignment.shard_rows(batch, critic);
    critic_loss_and_gradient(&ensemble.critics[critic], batch, &rows, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticSchedule {
    /// Passes over each shard.
    pub passes: usize,
    /// Rows per gradient step; `0` means one full-shard step per pass.
    pub minibatch_size: usize,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriticTrainReport {
    /// `loss_trace[m][pass]`: row-weighted mean minibatch loss during the pass.
    pub loss_trace: Vec<Vec<f64>>,
    /// Rows in each critic's shard.
    pub shard_rows: Vec<usize>,
}

impl CriticTrainReport {
    /// Last recorded loss per critic (`NaN`-free; empty trace gives 0).
    pub fn final_losses(&self) -> Vec<f64> {
        self.loss_trace
            .iter()
            .map(|t| t.last().copied().unwrap_or(0.0))
            .collect()
    }
}

fn train_one(
    critic_index: usize,
    critic: &mut ApproximatorParams,
    optimizer: &mut Optimizer,
    batch: &TrajectoryBatch,
    mut rows: Vec<usize>,
    targets: &[f64],
    schedule: CriticSchedule,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(schedule.passes);
    let total = rows.len();
    let chunk = if schedule.minibatch_size == 0 {
        total.max(1)
    } else {
        schedule.minibatch_size
    };
    for pass in 0..schedule.passes {
        if schedule.minibatch_size != 0 {
            let mut rng = seed::rng(
                schedule.seed,
                &[seed::TAG_CRITIC_MB, critic_index as u64, pass as u64],
            );
            rows.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        for mb in rows.chunks(chunk) {
            let (loss, grad) = critic_loss_and_gradient(critic, batch, mb, targets).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("critic {critic_index}, pass {pass}: {msg}")),
                other => other,
            })?;
            weighted += loss * mb.len() as f64;
            optimizer.step(critic, &grad)?;
        }
        trace.push(if total == 0 { 0.0 } else { weighted / total as f64 });
    }
    Ok(trace)
}

/// Fits every critic to `targets` on its own shard only.
pub fn train_critics(
    ensemble: &mut CriticEnsemble,
    batch: &TrajectoryBatch,
    assignment: &ShardAssignment,
    targets: &[f64],
    schedule: CriticSchedule,
) -> Result<CriticTrainReport> {
    if assignment.num_critics() != ensemble.num_critics() {
        return Err(Error::Contract(format!(
            "assignment for {} critics applied to an ensemble of {}",
            assignment.num_critics(),
            ensemble.num_critics()
        )));
    }
    if targets.len() != batch.num_rows() {
        return Err(Error::Shape {
            context: "critic targets",
            expected: batch.num_rows(),
            actual: targets.len(),
        });
    }
    let shards: Vec<Vec<usize>> = (0..ensemble.num_critics())
        .map(|m| assignment.shard_rows(batch, m))
        .collect();
    let shard_rows = shards.iter().map(Vec::len).collect();
    let work = ensemble
        .critics
        .iter_mut()
        .zip(ensemble.optimizers.iter_mut())
        .zip(shards)
        .enumerate();
    let loss_trace = if schedule.parallel {
        work.collect::<Vec<_>>()
            .into_par_iter()
            .map(|(m, ((c, o), rows))| train_one(m, c, o, batch, rows, targets, schedule))
            .collect::<Result<Vec<_>>>()?
    } else {
        work.map(|(m, ((c, o), rows))| train_one(m, c, o, batch, rows, targets, schedule))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(CriticTrainReport {
        loss_trace,
        shard_rows,
    })
}

/// Aggregated value and population standard deviation of one token's critic values.
pub fn aggregate(values: &[f64], mode: Aggregation) -> (f64, f64) {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return (first, 0.0);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let agg = match mode {
        Aggregation::Mean => mean,
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
    };
    (agg, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    /// `per_critic[m][row]`.
    pub per_critic: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
    pub std: Vec<f64>,
    /// Bootstrap value per trajectory: 0 for finished episodes.
    pub bootstrap: Vec<f64>,
    pub mode: Aggregation,
}

pub fn evaluate(ensemble: &CriticEnsemble, batch: &TrajectoryBatch, mode: Aggregation) -> Result<ValueTable> {
    let n = batch.num_rows();
    let mut per_critic = vec![Vec::with_capacity(n); ensemble.num_critics()];
    let mut aggregated = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for step in batch.rows() {
        let values = ensemble.values_at(&step.state_encoding)?;
        for (col, v) in per_critic.iter_mut().zip(&values) {
            col.push(*v);
        }
        let (agg, s) = aggregate(&values, mode);
        aggregated.push(agg);
        std.push(s);
    }
    let bootstrap = batch
        .trajectories()
        .iter()
        .map(|t| bootstrap_value(ensemble, t, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueTable {
        per_critic,
        aggregated,
        std,
        bootstrap,
        mode,
    })
}

/// Value after a trajectory's last step: 0 for a finished episode, the
/// aggregated critic value of the boundary state for a truncated one.
pub fn bootstrap_value(ensemble: &CriticEnsemble, trajectory: &Trajectory, mode: Aggregation) -> Result<f64> {
    match &trajectory.bootstrap_state {
        None => Ok(0.0),
        Some(state) => Ok(aggregate(&ensemble.values_at(state)?, mode).0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{DigitChainSpec, EnvSpec, PromptSpec};
    use crate::rollout::{collect, returns_to_go, CollectOptions, TokenStep};

    fn digit_batch(g: usize, prompts: usize, seed_value: u64) -> TrajectoryBatch {
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let ps = env.sample_prompts(seed_value, prompts).unwrap();
        let policy = ApproximatorParams::init(&[env.feature_dim(), 8, env.vocab_size()], seed_value).unwrap();
        collect(&policy, &env, &ps, g, seed_value, CollectOptions::default()).unwrap()
    }

    fn tiny_batch(encodings: &[f64], rewards: &[f64]) -> TrajectoryBatch {
        let prompt = PromptSpec {
            prompt_id: 3,
            difficulty: 1,
            context: vec![],
            target: vec![],
        };
        let trajs = encodings
            .iter()
            .zip(rewards)
            .enumerate()
            .map(|(g, (&x, &r))| Trajectory {
                prompt_index: 0,
                response_index: g,
                steps: vec![TokenStep {
                    state_encoding: vec![x],
                    action: 0,
                    behavior_log_prob: 0.0,
                    behavior_entropy: 0.0,
                    reward: r,
                    done: true,
                }],
                bootstrap_state: None,
            })
            .collect();
        TrajectoryBatch::new(vec![prompt], encodings.len(), trajs).unwrap()
    }

    #[test]
    fn even_split_with_default_group_size() {
        let batch = digit_batch(32, 2, 1);
        let a = assign_shards(&batch, 2, 9).unwrap();
        for p in 0..2 {
            let c0 = (0..32).filter(|&g| a.critic_of(p, g) == 0).count();
            assert_eq!(c0, 16);
        }
    }

    #[test]
    fn single_critic_gets_everything() {
        let batch = digit_batch(5, 3, 2);
        let a = assign_shards(&batch, 1, 0).unwrap();
        assert!(a.owners().iter().all(|&o| o == 0));
        assert_eq!(a.shard_rows(&batch, 0).len(), batch.num_rows());
    }

    #[test]
    fn group_smaller_than_ensemble_rejected() {
        let batch = digit_batch(2, 1, 2);
        assert!(matches!(assign_shards(&batch, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_leave_ensemble_unchanged() {
        let batch = digit_batch(4, 2, 3);
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let mut ens = CriticEnsemble::new(&[env.feature_dim(), 4, 1], 2, 1, OptimizerKind::Adam, 0.01).unwrap();
        let before = ens.clone();
        let a = assign_shards(&batch, 2, 0).unwrap();
        let r = returns_to_go(&batch, 1.0);
        let sched = CriticSchedule {
            passes: 0,
            minibatch_size: 0,
            seed: 0,
            parallel: false,
        };
        let rep = train_critics(&mut ens, &batch, &a, &r, sched).unwrap();
        assert_eq!(ens, before);
        assert!(rep.loss_trace.iter().all(Vec::is_empty));
    }

    #[test]
    fn critics_fit_their_own_targets() {
        // Two one-row shards with different targets; a bias-only critic can
        // represent any constant, so each should land on its own target.
        let batch = tiny_batch(&[0.0, 0.0], &[0.0, 1.0]);
        let assignment = assign_shards(&batch, 2, 4).unwrap();
        let mut ens = CriticEnsemble::new(&[1, 1], 2, 5, OptimizerKind::Adam, 0.05).unwrap();
        let targets = returns_to_go(&batch, 1.0);
        let sched = CriticSchedule {
            passes: 800,
            minibatch_size: 0,
            seed: 0,
            parallel: false,
        };
        train_critics(&mut ens, &batch, &assignment, &targets, sched).unwrap();
        for g in 0..2 {
            let m = assignment.critic_of(0, g);
            let v = ens.critics()[m].value_forward(&[0.0]).unwrap();
            assert!((v - targets[g]).abs() < 0.05, "critic {m}: {v} vs {}", targets[g]);
        }
    }

    #[test]
    fn full_batch_loss_trend_is_down() {
        let batch = digit_batch(4, 4, 6);
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let mut ens = CriticEnsemble::new(&[env.feature_dim(), 6, 1], 2, 1, OptimizerKind::Adam, 0.003).unwrap();
        let a = assign_shards(&batch, 2, 0).unwrap();
        let targets: Vec<f64> = (0..batch.num_rows()).map(|r| (r % 3) as f64 * 0.5).collect();
        let sched = CriticSchedule {
            passes: 10,
            minibatch_size: 0,
            seed: 0,
            parallel: false,
        };
        let rep = train_critics(&mut ens, &batch, &a, &targets, sched).unwrap();
        for trace in &rep.loss_trace {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{trace:?}");
            }
            assert!(trace.last() < trace.first());
        }
    }

    #[test]
    fn parallel_training_matches_serial() {
        let batch = digit_batch(4, 3, 7);
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let base = CriticEnsemble::new(&[env.feature_dim(), 5, 1], 2, 1, OptimizerKind::Adam, 0.01).unwrap();
        let a = assign_shards(&batch, 2, 0).unwrap();
        let r = returns_to_go(&batch, 1.0);
        let mut serial = base.clone();
        let mut parallel = base;
        let mut sched = CriticSchedule {
            passes: 3,
            minibatch_size: 7,
            seed: 2,
            parallel: false,
        };
        let r1 = train_critics(&mut serial, &batch, &a, &r, sched).unwrap();
        sched.parallel = true;
        let r2 = train_critics(&mut parallel, &batch, &a, &r, sched).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(r1, r2);
    }

    #[test]
    fn gradient_ignores_other_shards() {
        let mut batch = digit_batch(6, 3, 8);
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let ens = CriticEnsemble::new(&[env.feature_dim(), 5, 1], 2, 1, OptimizerKind::Adam, 0.01).unwrap();
        let a = assign_shards(&batch, 2, 1).unwrap();
        // Give every row a reward so zeroing is visible.
        for t in batch.trajectories_mut() {
            for s in &mut t.steps {
                s.reward = 1.0;
            }
        }
        let (_, before) = shard_gradient(&ens, 0, &batch, &a, &returns_to_go(&batch, 1.0)).unwrap();
        let owners = a.owners().to_vec();
        for (i, t) in batch.trajectories_mut().iter_mut().enumerate() {
            if owners[i] != 0 {
                t.steps.iter_mut().for_each(|s| s.reward = 0.0);
            }
        }
        let (_, after) = shard_gradient(&ens, 0, &batch, &a, &returns_to_go(&batch, 1.0)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate(&[1.0, 0.0], Aggregation::Mean), (0.5, 0.5));
        assert_eq!(aggregate(&[1.0, 0.0], Aggregation::Min), (0.0, 0.5));
        assert_eq!(aggregate(&[0.1, 0.1, 0.1], Aggregation::Mean), (0.1, 0.0));
        assert_eq!(aggregate(&[0.7], Aggregation::Min), (0.7, 0.0));
    }

    #[test]
    fn singleton_and_identical_ensembles_have_zero_std() {
        let batch = digit_batch(3, 2, 9);
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let one = CriticEnsemble::new(&[env.feature_dim(), 4, 1], 1, 3, OptimizerKind::Adam, 0.01).unwrap();
        let mean = evaluate(&one, &batch, Aggregation::Mean).unwrap();
        let min = evaluate(&one, &batch, Aggregation::Min).unwrap();
        assert!(mean.std.iter().all(|&s| s == 0.0));
        assert_eq!(mean.aggregated, min.aggregated);
        assert_eq!(mean.std, min.std);

        let c = one.critics()[0].clone();
        let twins = CriticEnsemble::from_critics(vec![c.clone(), c], OptimizerKind::Adam, 0.01).unwrap();
        let t = evaluate(&twins, &batch, Aggregation::Mean).unwrap();
        assert!(t.std.iter().all(|&s| s == 0.0));
        assert_eq!(t.aggregated, mean.aggregated);
    }

    #[test]
    fn bootstrap_conventions() {
        let env = EnvSpec::DigitChain(DigitChainSpec::default());
        let ps = env.sample_prompts(1, 2).unwrap();
        let policy = ApproximatorParams::init(&[env.feature_dim(), 8, env.vocab_size()], 1).unwrap();
        let opts = CollectOptions {
            max_len: Some(3),
            parallel: false,
        };
        let batch = collect(&policy, &env, &ps, 8, 1, opts).unwrap();
        let ens = CriticEnsemble::new(&[env.feature_dim(), 4, 1], 2, 3, OptimizerKind::Adam, 0.01).unwrap();
        let table = evaluate(&ens, &batch, Aggregation::Mean).unwrap();
        let mut saw_truncated = false;
        for (i, t) in batch.trajectories().iter().enumerate() {
            match &t.bootstrap_state {
                None => assert_eq!(table.bootstrap[i], 0.0),
                Some(s) => {
                    saw_truncated = true;
                    let v = ens.values_at(s).unwrap();
                    assert_eq!(table.bootstrap[i], aggregate(&v, Aggregation::Mean).0);
                    assert!(((v[0] + v[1]) / 2.0 - table.bootstrap[i]).abs() < 1e-15);
                }
            }
        }
        assert!(saw_truncated);
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = ApproximatorParams::init(&[2, 3, 1], 1).unwrap();
        let b = ApproximatorParams::init(&[2, 4, 1], 1).unwrap();
        assert!(CriticEnsemble::from_critics(vec![a, b], OptimizerKind::Sgd, 0.1).is_err());
        assert!(CriticEnsemble::new(&[2, 3, 1], 0, 1, OptimizerKind::Sgd, 0.1).is_err());
    }
}
