//! Training drivers.
//!
//! One loop serves all three algorithms. Each step collects a grouped batch,
//! then (for the critic-based variants) assigns shards and updates the
//! critics *before* computing advantages from their aggregated values, builds
//! the spread masks once, and runs `ppo_epochs` passes of minibatch policy
//! updates against that fixed batch.
//!
//! * `asyppo`: `M` mini-critics, masks with fractions `k` and `h`.
//! * `ppo`: a single critic, no masks. The critic copies the actor's hidden
//!   layout unless `critic_hidden` is given.
//! * `grpo`: no critic at all; group-normalized episode returns.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::advantage::{gae, group_baseline_advantage, lambda_returns, whiten};
use crate::approximator::{ApproximatorParams, Optimizer, OptimizerKind};
use crate::ensemble::{assign_shards, evaluate, train_critics, Aggregation, CriticEnsemble, CriticSchedule};
use crate::envs::{DigitChainSpec, EnvSpec, MicroMdpSpec, PromptSpec};
use crate::error::{Error, Result};
use crate::objective::{build_masks, policy_loss, LossCoefficients, MaskVectors};
use crate::rollout::{collect, minibatches, returns_to_go, sample_categorical, ActionPolicy, CollectOptions};
use crate::seed;

pub mod ablation;

pub use ablation::{run_ablation, AblationArm, AblationAxis, AblationCell, AblationSpec};

/// Hidden layout used for mini-critics when `critic_hidden` is unset.
pub const DEFAULT_MINI_CRITIC_HIDDEN: &[usize] = &[16];

/// Abort when the mean `|IS − 1|` of a minibatch exceeds this.
pub const DIVERGENCE_RATIO_DEVIATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    AsyPpo,
    Ppo,
    Grpo,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::AsyPpo => "asyppo",
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticTarget {
    /// Discounted Monte-Carlo return-to-go.
    MonteCarlo,
    /// `A_t + V̄(s_t)` from the pre-update critics.
    LambdaReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    DigitChain,
    MicroMdp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    /// `k`: fraction of lowest-spread tokens whose surrogate is masked.
    pub adv_mask_fraction: f64,
    /// `h`: fraction of highest-spread tokens excluded from the entropy bonus.
    pub ent_filter_fraction: f64,
    pub num_critics: usize,
    pub group_size: usize,
    pub ppo_epochs: usize,
    pub max_steps: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optimizer: OptimizerKind,
    pub aggregation: Aggregation,
    pub critic_target: CriticTarget,
    pub critic_steps_per_batch: usize,
    /// `0` means one full-shard step per pass.
    pub critic_minibatch_size: usize,
    pub minibatch_size: usize,
    pub whiten_advantages: bool,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Option<Vec<usize>>,
    pub env: EnvKind,
    pub digit_chain: DigitChainSpec,
    pub micro_mdp: MicroMdpSpec,
    pub num_prompts: usize,
    pub rollout_batch_size: usize,
    /// Response length cap; `None` runs every episode to termination.
    pub response_length: Option<usize>,
    pub eval_episodes: usize,
    pub seed: u64,
    pub dataset_seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::AsyPpo,
            gamma: 1.0,
            lambda: 1.0,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            adv_mask_fraction: 0.2,
            ent_filter_fraction: 0.2,
            num_critics: 2,
            group_size: 32,
            ppo_epochs: 4,
            max_steps: 500,
            actor_lr: 3e-3,
            critic_lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            aggregation: Aggregation::Mean,
            critic_target: CriticTarget::MonteCarlo,
            critic_steps_per_batch: 1,
            critic_minibatch_size: 256,
            minibatch_size: 512,
            whiten_advantages: false,
            actor_hidden: vec![64],
            critic_hidden: None,
            env: EnvKind::DigitChain,
            digit_chain: DigitChainSpec::default(),
            micro_mdp: MicroMdpSpec::default(),
            num_prompts: 256,
            rollout_batch_size: 64,
            response_length: None,
            eval_episodes: 256,
            seed: 42,
            dataset_seed: 0,
            deterministic: false,
        }
    }
}

fn unit_range(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::key(key, None, format!("must lie in [0, 1], got {v}")))
    }
}

fn half_open(key: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::key(key, None, format!("must lie in [0, 1), got {v}")))
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::key(key, None, "must be at least 1"))
    }
}

impl TrainConfig {
    pub fn env_spec(&self) -> EnvSpec {
        match self.env {
            EnvKind::DigitChain => EnvSpec::DigitChain(self.digit_chain),
            EnvKind::MicroMdp => EnvSpec::MicroMdp(self.micro_mdp),
        }
    }

    /// Errors name the configuration key at fault.
    pub fn validate(&self) -> Result<()> {
        unit_range("gamma", self.gamma)?;
        unit_range("lambd", self.lambda)?;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::key("clip_epsilon", None, format!("must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::key("entropy_loss_coef", None, "must be a finite non-negative number"));
        }
        half_open("gradient_mask_percentage", self.adv_mask_fraction)?;
        half_open("entropy_filter_mask_percentage", self.ent_filter_fraction)?;
        positive("num_critics", self.num_critics)?;
        positive("num_return_sequences", self.group_size)?;
        positive("ppo_epochs", self.ppo_epochs)?;
        positive("minibatch_size", self.minibatch_size)?;
        positive("num_prompts", self.num_prompts)?;
        positive("rollout_batch_size", self.rollout_batch_size)?;
        positive("eval_episodes", self.eval_episodes)?;
        for (key, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::key(key, None, format!("must be positive, got {lr}")));
            }
        }
        if self.actor_hidden.contains(&0) {
            return Err(Error::key("actor_hidden", None, "layer sizes must be positive"));
        }
        if let Some(h) = &self.critic_hidden {
            if h.contains(&0) {
                return Err(Error::key("critic_hidden", None, "layer sizes must be positive"));
            }
        }
        if self.response_length == Some(0) {
            return Err(Error::key("response_length", None, "must be at least 1 when set"));
        }
        match self.algorithm {
            Algorithm::AsyPpo if self.group_size < self.num_critics => {
                return Err(Error::key(
                    "num_return_sequences",
                    None,
                    format!(
                        "group size {} is smaller than num_critics {}",
                        self.group_size, self.num_critics
                    ),
                ))
            }
            Algorithm::Grpo if self.group_size < 2 => {
                return Err(Error::key("num_return_sequences", None, "the group baseline needs at least 2"))
            }
            _ => {}
        }
        self.env_spec()
            .validate()
            .map_err(|e| Error::key("env", None, e.to_string()))
    }

    /// Critic count actually trained (0 for the critic-free driver).
    pub fn effective_num_critics(&self) -> usize {
        match self.algorithm {
            Algorithm::AsyPpo => self.num_critics,
            Algorithm::Ppo => 1,
            Algorithm::Grpo => 0,
        }
    }

    pub fn effective_masks(&self) -> (f64, f64) {
        match self.algorithm {
            Algorithm::AsyPpo => (self.adv_mask_fraction, self.ent_filter_fraction),
            Algorithm::Ppo | Algorithm::Grpo => (0.0, 0.0),
        }
    }

    pub fn effective_critic_hidden(&self) -> Vec<usize> {
        match (&self.critic_hidden, self.algorithm) {
            (Some(h), _) => h.clone(),
            (None, Algorithm::Ppo) => self.actor_hidden.clone(),
            (None, _) => DEFAULT_MINI_CRITIC_HIDDEN.to_vec(),
        }
    }

    pub fn actor_layout(&self) -> Vec<usize> {
        let env = self.env_spec();
        let mut sizes = vec![env.feature_dim()];
        sizes.extend(&self.actor_hidden);
        sizes.push(env.vocab_size());
        sizes
    }

    pub fn critic_layout(&self) -> Vec<usize> {
        let mut sizes = vec![self.env_spec().feature_dim()];
        sizes.extend(self.effective_critic_hidden());
        sizes.push(1);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub mean_return: f64,
    pub policy_entropy: f64,
    pub critic_losses: Vec<f64>,
    pub sigma_mean: f64,
    pub sigma_q10: f64,
    pub sigma_q50: f64,
    pub sigma_q90: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub entropy_term: f64,
    pub policy_loss: f64,
    pub masked_adv_count: usize,
    pub filtered_ent_count: usize,
    pub batch_tokens: usize,
    pub critic_tokens: usize,
    /// Zero in deterministic mode; real timings then live in the manifest.
    pub wall_time_ms: u64,
}

impl StepReport {
    /// Largest absolute difference over every numeric field except timing;
    /// `None` when the integer fields or vector lengths differ.
    pub fn max_abs_diff(&self, other: &StepReport) -> Option<f64> {
        if self.step != other.step
            || self.masked_adv_count != other.masked_adv_count
            || self.filtered_ent_count != other.filtered_ent_count
            || self.batch_tokens != other.batch_tokens
            || self.critic_tokens != other.critic_tokens
            || self.critic_losses.len() != other.critic_losses.len()
        {
            return None;
        }
        let pairs = [
            (self.mean_return, other.mean_return),
            (self.policy_entropy, other.policy_entropy),
            (self.sigma_mean, other.sigma_mean),
            (self.sigma_q10, other.sigma_q10),
            (self.sigma_q50, other.sigma_q50),
            (self.sigma_q90, other.sigma_q90),
            (self.clip_fraction, other.clip_fraction),
            (self.surrogate, other.surrogate),
            (self.entropy_term, other.entropy_term),
            (self.policy_loss, other.policy_loss),
        ];
        let losses = self.critic_losses.iter().zip(&other.critic_losses).map(|(a, b)| (*a, *b));
        Some(
            pairs
                .into_iter()
                .chain(losses)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ApproximatorParams,
    pub ensemble: Option<CriticEnsemble>,
    pub reports: Vec<StepReport>,
    pub step_wall_time_ms: Vec<u64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn select_prompts(all: &[PromptSpec], count: usize, seed_value: u64, step: usize) -> Vec<PromptSpec> {
    if count >= all.len() {
        return all.to_vec();
    }
    let mut rng = seed::rng(seed_value, &[seed::TAG_PROMPTS, step as u64]);
    let mut picked = sample(&mut rng, all.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(config, |_| Ok(()))
}

/// Runs training, handing each step report to `observer` as it is produced.
pub fn train_with_observer<F>(config: &TrainConfig, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepReport) -> Result<()>,
{
    config.validate()?;
    let env = config.env_spec();
    let dataset = env.sample_prompts(config.dataset_seed, config.num_prompts)?;
    let mut policy = ApproximatorParams::init(
        &config.actor_layout(),
        seed::derive(config.seed, &[seed::TAG_ACTOR_INIT]),
    )?;
    let mut actor_opt = Optimizer::new(config.optimizer, config.actor_lr, policy.len())?;
    let mut ensemble = match config.effective_num_critics() {
        0 => None,
        m => Some(CriticEnsemble::new(
            &config.critic_layout(),
            m,
            config.seed,
            config.optimizer,
            config.critic_lr,
        )?),
    };
    let (k, h) = config.effective_masks();
    let coef = LossCoefficients {
        clip_epsilon: config.clip_epsilon,
        entropy_coef: config.entropy_coef,
    };
    let parallel = !config.deterministic;
    let mut reports = Vec::with_capacity(config.max_steps);
    let mut timings = Vec::with_capacity(config.max_steps);
    let mut last_good: Option<usize> = None;

    for step in 0..config.max_steps {
        let started = Instant::now();
        let snapshot = policy.clone();
        let diverged = |reason: String| Error::Diverged {
            step,
            reason,
            last_good_step: last_good,
            last_good_policy: Box::new(snapshot.clone()),
        };
        let wrap = |e: Error| match e {
            Error::NonFinite(msg) => diverged(msg),
            other => other,
        };

        let prompts = select_prompts(&dataset, config.rollout_batch_size, config.seed, step);
        let batch = collect(
            &policy,
            &env,
            &prompts,
            config.group_size,
            seed::derive(config.seed, &[seed::TAG_ROLLOUT, step as u64]),
            CollectOptions {
                max_len: config.response_length,
                parallel,
            },
        )?;
        let n_rows = batch.num_rows();

        let (mut advantages, sigma, critic_losses, critic_tokens) = match ensemble.as_mut() {
            Some(ens) => {
                let targets = match config.critic_target {
                    CriticTarget::MonteCarlo => returns_to_go(&batch, config.gamma),
                    CriticTarget::LambdaReturn => {
                        let before = evaluate(ens, &batch, config.aggregation)?;
                        let adv = gae(&batch, &before, config.gamma, config.lambda).map_err(wrap)?;
                        lambda_returns(&adv, &before.aggregated)
                    }
                };
                let assignment = assign_shards(
                    &batch,
                    ens.num_critics(),
                    seed::derive(config.seed, &[seed::TAG_SHARDS, step as u64]),
                )?;
                let schedule = CriticSchedule {
                    passes: config.critic_steps_per_batch,
                    minibatch_size: config.critic_minibatch_size,
                    seed: seed::derive(config.seed, &[seed::TAG_CRITIC_MB, step as u64]),
                    parallel,
                };
                let critic_report = train_critics(ens, &batch, &assignment, &targets, schedule).map_err(wrap)?;
                let values = evaluate(ens, &batch, config.aggregation)?;
                let adv = gae(&batch, &values, config.gamma, config.lambda).map_err(wrap)?;
                let tokens = critic_report.shard_rows.iter().sum::<usize>();
                (adv, values.std, critic_report.final_losses(), tokens)
            }
            None => (group_baseline_advantage(&batch)?, vec![0.0; n_rows], Vec::new(), 0),
        };
        if config.whiten_advantages {
            whiten(&mut advantages);
        }
        let masks = if k == 0.0 && h == 0.0 {
            MaskVectors::ones(n_rows)
        } else {
            build_masks(&sigma, k, h)?
        };

        let mut updates = 0usize;
        let (mut clip_sum, mut surr_sum, mut ent_sum, mut loss_sum) = (0.0, 0.0, 0.0, 0.0);
        let mb_seed = seed::derive(config.seed, &[seed::TAG_MINIBATCH, step as u64]);
        for rows in minibatches(n_rows, config.minibatch_size, config.ppo_epochs, mb_seed)? {
            let out = policy_loss(&batch, &advantages, &masks, &policy, &rows, coef).map_err(wrap)?;
            if out.breakdown.mean_abs_ratio_deviation > DIVERGENCE_RATIO_DEVIATION {
                return Err(diverged(format!(
                    "mean |ratio - 1| = {} exceeds {}",
                    out.breakdown.mean_abs_ratio_deviation, DIVERGENCE_RATIO_DEVIATION
                )));
            }
            actor_opt.step(&mut policy, &out.gradient).map_err(wrap)?;
            clip_sum += out.breakdown.clip_fraction;
            surr_sum += out.breakdown.surrogate;
            ent_sum += out.breakdown.entropy_term;
            loss_sum += out.breakdown.total;
            updates += 1;
        }
        let per_update = |s: f64| if updates == 0 { 0.0 } else { s / updates as f64 };

        let mut sorted = sigma.clone();
        sorted.sort_by(f64::total_cmp);
        let elapsed = started.elapsed().as_millis() as u64;
        let report = StepReport {
            step,
            mean_return: batch.mean_return(),
            policy_entropy: batch.rows().map(|s| s.behavior_entropy).sum::<f64>() / n_rows as f64,
            critic_losses,
            sigma_mean: sigma.iter().sum::<f64>() / n_rows as f64,
            sigma_q10: quantile(&sorted, 0.1),
            sigma_q50: quantile(&sorted, 0.5),
            sigma_q90: quantile(&sorted, 0.9),
            clip_fraction: per_update(clip_sum),
            surrogate: per_update(surr_sum),
            entropy_term: per_update(ent_sum),
            policy_loss: per_update(loss_sum),
            masked_adv_count: masks.masked_adv(),
            filtered_ent_count: masks.filtered_ent(),
            batch_tokens: n_rows,
            critic_tokens,
            wall_time_ms: if config.deterministic { 0 } else { elapsed },
        };
        observer(&report)?;
        reports.push(report);
        timings.push(elapsed);
        last_good = Some(step);
    }

    Ok(TrainOutcome {
        policy,
        ensemble,
        reports,
        step_wall_time_ms: timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyStats {
    pub difficulty: u32,
    pub episodes: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub episodes: usize,
    pub mean_return: f64,
    pub by_difficulty: Vec<DifficultyStats>,
}

/// Rolls out `episodes` episodes, cycling through `prompts`. Episode `i`
/// draws from its own stream, so the result depends only on `seed`.
pub fn evaluate_policy<P: ActionPolicy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    prompts: &[PromptSpec],
    episodes: usize,
    seed_value: u64,
    mode: EvalMode,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Config("evaluation needs at least one prompt".into()));
    }
    let mut buckets: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..episodes {
        let prompt = &prompts[i % prompts.len()];
        let mut rng = seed::rng(seed_value, &[seed::TAG_EVAL, i as u64]);
        let mut state = env.reset(prompt);
        let mut ret = 0.0;
        while !state.done {
            let encoding = env.encode_state(prompt, &state);
            let lp = policy.action_log_probs(prompt, &state, &encoding)?;
            let action = match mode {
                EvalMode::Greedy => lp
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, &v)| if v > best.1 { (a, v) } else { best })
                    .0,
                EvalMode::Sampled => sample_categorical(&lp, rng.random::<f64>()),
            };
            let res = env.step(prompt, &state, action)?;
            ret += res.reward;
            state = res.next_state;
        }
        total += ret;
        let bucket = buckets.entry(prompt.difficulty).or_default();
        bucket.0 += 1;
        bucket.1 += ret;
    }
    Ok(EvalSummary {
        mode,
        episodes,
        mean_return: total / episodes as f64,
        by_difficulty: buckets
            .into_iter()
            .map(|(difficulty, (n, sum))| DifficultyStats {
                difficulty,
                episodes: n,
                mean_return: sum / n as f64,
            })
            .collect(),
    })
}
