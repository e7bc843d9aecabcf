//! Toy sequence-generation environments with sparse terminal rewards.
//!
//! Two environments share one interface:
//!
//! * **digit chain**: the prompt is a list of base-`m` operands; the agent
//!   must write every running partial sum (after the first operand, mod `m`)
//!   and then an end token. Filler tokens may be emitted anywhere and are
//!   ignored by the checker. Reward is 1 at termination iff the non-filler
//!   tokens are exactly the partial-sum chain; everything else pays 0.
//! * **micro MDP**: a fixed-length chain over a tiny alphabet whose target
//!   sequence is visible in the prompt. Small enough to enumerate every
//!   prefix and solve exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

pub type ActionId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub prompt_id: u64,
    pub difficulty: u32,
    /// What the agent observes (operands, or the target chain for the micro MDP).
    pub context: Vec<usize>,
    /// The token sequence the checker accepts, filler and end tokens excluded.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub prompt_id: u64,
    pub emitted: Vec<ActionId>,
    pub step: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The episode hit the horizon rather than finishing on its own.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigitChainSpec {
    pub modulus: usize,
    /// Difficulty `d` means `d + 1` operands and `d` digits to write.
    pub max_difficulty: usize,
    pub filler_tokens: usize,
    pub horizon: usize,
    pub window: usize,
}

impl Default for DigitChainSpec {
    fn default() -> Self {
        Self {
            modulus: 5,
            max_difficulty: 4,
            filler_tokens: 2,
            horizon: 24,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroMdpSpec {
    pub chain_length: usize,
    pub num_actions: usize,
}

impl Default for MicroMdpSpec {
    fn default() -> Self {
        Self {
            chain_length: 3,
            num_actions: 2,
        }
    }
}

/// Upper bound on enumerable micro-MDP prefix states.
pub const MAX_MICRO_STATES: usize = 500;

impl MicroMdpSpec {
    /// Number of prefixes of length `0..=chain_length`, or `None` on overflow.
    pub fn state_count(&self) -> Option<usize> {
        let mut total: usize = 0;
        let mut level: usize = 1;
        for i in 0..=self.chain_length {
            total = total.checked_add(level)?;
            if i < self.chain_length {
                level = level.checked_mul(self.num_actions)?;
            }
        }
        Some(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvSpec {
    DigitChain(DigitChainSpec),
    MicroMdp(MicroMdpSpec),
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::DigitChain(DigitChainSpec::default())
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::DigitChain(s) => {
                if s.modulus < 2 {
                    return Err(Error::Config("digit chain modulus must be at least 2".into()));
                }
                if s.max_difficulty < 1 {
                    return Err(Error::Config("digit chain max difficulty must be at least 1".into()));
                }
                if s.horizon < s.max_difficulty + 1 {
                    return Err(Error::Config(format!(
                        "horizon {} cannot fit {} digits plus the end token",
                        s.horizon, s.max_difficulty
                    )));
                }
                if s.window < 1 {
                    return Err(Error::Config("token window must be at least 1".into()));
                }
            }
            EnvSpec::MicroMdp(s) => {
                if s.chain_length < 1 || s.num_actions < 2 {
                    return Err(Error::Config(
                        "micro MDP needs chain length >= 1 and at least 2 actions".into(),
                    ));
                }
                match s.state_count() {
                    Some(n) if n <= MAX_MICRO_STATES => {}
                    n => {
                        return Err(Error::Config(format!(
                            "micro MDP with chain length {} and {} actions has {} states, limit is {}",
                            s.chain_length,
                            s.num_actions,
                            n.map(|n| n.to_string()).unwrap_or_else(|| "overflowing".into()),
                            MAX_MICRO_STATES
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            EnvSpec::DigitChain(s) => s.modulus + s.filler_tokens + 1,
            EnvSpec::MicroMdp(s) => s.num_actions,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::DigitChain(s) => s.horizon,
            EnvSpec::MicroMdp(s) => s.chain_length,
        }
    }

    /// Token that ends a digit-chain episode.
    pub fn end_token(&self) -> Option<ActionId> {
        match self {
            EnvSpec::DigitChain(s) => Some(s.modulus + s.filler_tokens),
            EnvSpec::MicroMdp(_) => None,
        }
    }

    pub fn is_filler(&self, token: ActionId) -> bool {
        match self {
            EnvSpec::DigitChain(s) => token >= s.modulus && token < s.modulus + s.filler_tokens,
            EnvSpec::MicroMdp(_) => false,
        }
    }

    pub fn num_difficulty_levels(&self) -> usize {
        match self {
            EnvSpec::DigitChain(s) => s.max_difficulty,
            EnvSpec::MicroMdp(s) => s.chain_length + 1,
        }
    }

    /// Length of [`encode_state`](Self::encode_state) output.
    pub fn feature_dim(&self) -> usize {
        match self {
            EnvSpec::DigitChain(s) => {
                (s.max_difficulty + 1) * s.modulus + 1 + (s.max_difficulty + 2) + s.window * self.vocab_size()
            }
            EnvSpec::MicroMdp(s) => 2 * s.chain_length * s.num_actions + s.chain_length + 1,
        }
    }

    /// A deterministic dataset of `n` prompts with ids `0..n`.
    pub fn sample_prompts(&self, dataset_seed: u64, n: usize) -> Result<Vec<PromptSpec>> {
        if n == 0 {
            return Err(Error::Config("prompt count must be at least 1".into()));
        }
        self.validate()?;
        let mut rng = seed::rng(dataset_seed, &[seed::TAG_PROMPTS]);
        match self {
            EnvSpec::DigitChain(s) => {
                // Difficulties are dealt round-robin then shuffled so every
                // level is represented once n reaches the level count.
                let mut levels: Vec<u32> = (0..n).map(|i| (i % s.max_difficulty) as u32 + 1).collect();
                levels.shuffle(&mut rng);
                Ok(levels
                    .into_iter()
                    .enumerate()
                    .map(|(i, difficulty)| {
                        let operands: Vec<usize> = (0..=difficulty)
                            .map(|_| rng.random_range(0..s.modulus))
                            .collect();
                        PromptSpec {
                            prompt_id: i as u64,
                            difficulty,
                            target: partial_sums(&operands, s.modulus),
                            context: operands,
                        }
                    })
                    .collect())
            }
            EnvSpec::MicroMdp(s) => Ok((0..n)
                .map(|i| {
                    let target: Vec<usize> = (0..s.chain_length)
                        .map(|_| rng.random_range(0..s.num_actions))
                        .collect();
                    PromptSpec {
                        prompt_id: i as u64,
                        difficulty: target.iter().filter(|&&a| a != 0).count() as u32,
                        context: target.clone(),
                        target,
                    }
                })
                .collect()),
        }
    }

    pub fn reset(&self, prompt: &PromptSpec) -> EnvState {
        EnvState {
            prompt_id: prompt.prompt_id,
            emitted: Vec::new(),
            step: 0,
            done: false,
        }
    }

    pub fn step(&self, prompt: &PromptSpec, state: &EnvState, action: ActionId) -> Result<StepResult> {
        if state.done {
            return Err(Error::Contract(format!(
                "step called on a finished episode (prompt {})",
                state.prompt_id
            )));
        }
        if state.prompt_id != prompt.prompt_id {
            return Err(Error::Contract(format!(
                "state belongs to prompt {} but prompt {} was supplied",
                state.prompt_id, prompt.prompt_id
            )));
        }
        if action >= self.vocab_size() {
            return Err(Error::Contract(format!(
                "action {action} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        let mut next = state.clone();
        next.emitted.push(action);
        next.step += 1;
        let (done, reward, truncated) = match self {
            EnvSpec::DigitChain(s) => {
                if Some(action) == self.end_token() {
                    (true, self.score(prompt, &next.emitted), false)
                } else {
                    let timeout = next.step >= s.horizon;
                    (timeout, 0.0, timeout)
                }
            }
            // The chain length is the task itself, not a time limit.
            EnvSpec::MicroMdp(s) => {
                if next.step >= s.chain_length {
                    (true, self.score(prompt, &next.emitted), false)
                } else {
                    (false, 0.0, false)
                }
            }
        };
        next.done = done;
        Ok(StepResult {
            next_state: next,
            reward,
            done,
            truncated,
        })
    }

    /// Terminal checker: 1.0 iff the emitted tokens solve the prompt.
    pub fn score(&self, prompt: &PromptSpec, emitted: &[ActionId]) -> f64 {
        let solved = match self {
            EnvSpec::DigitChain(_) => {
                let end = self.end_token();
                match emitted.split_last() {
                    Some((&last, body)) if Some(last) == end => body
                        .iter()
                        .filter(|&&t| !self.is_filler(t))
                        .copied()
                        .eq(prompt.target.iter().copied()),
                    _ => false,
                }
            }
            EnvSpec::MicroMdp(_) => emitted == prompt.target.as_slice(),
        };
        if solved {
            1.0
        } else {
            0.0
        }
    }

    /// A shortest token sequence that earns reward 1.
    pub fn solution(&self, prompt: &PromptSpec) -> Vec<ActionId> {
        let mut seq = prompt.target.clone();
        seq.extend(self.end_token());
        seq
    }

    /// Prompt features, position features and a one-hot window of the most
    /// recent tokens (most recent first).
    pub fn encode_state(&self, prompt: &PromptSpec, state: &EnvState) -> Vec<f64> {
        let mut features = vec![0.0; self.feature_dim()];
        let vocab = self.vocab_size();
        match self {
            EnvSpec::DigitChain(s) => {
                for (i, &d) in prompt.context.iter().take(s.max_difficulty + 1).enumerate() {
                    features[i * s.modulus + d.min(s.modulus - 1)] = 1.0;
                }
                let mut at = (s.max_difficulty + 1) * s.modulus;
                features[at] = state.step as f64 / s.horizon as f64;
                at += 1;
                let digits = state
                    .emitted
                    .iter()
                    .filter(|&&t| t < s.modulus)
                    .count()
                    .min(s.max_difficulty + 1);
                features[at + digits] = 1.0;
                at += s.max_difficulty + 2;
                for (slot, &tok) in state.emitted.iter().rev().take(s.window).enumerate() {
                    features[at + slot * vocab + tok] = 1.0;
                }
            }
            EnvSpec::MicroMdp(s) => {
                for (i, &a) in prompt.context.iter().take(s.chain_length).enumerate() {
                    features[i * s.num_actions + a] = 1.0;
                }
                let mut at = s.chain_length * s.num_actions;
                features[at + state.step.min(s.chain_length)] = 1.0;
                at += s.chain_length + 1;
                for (slot, &tok) in state.emitted.iter().rev().take(s.chain_length).enumerate() {
                    features[at + slot * vocab + tok] = 1.0;
                }
            }
        }
        features
    }
}

fn partial_sums(operands: &[usize], modulus: usize) -> Vec<usize> {
    let mut acc = operands.first().copied().unwrap_or(0) % modulus;
    operands[1..]
        .iter()
        .map(|&d| {
            acc = (acc + d) % modulus;
            acc
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

/// Exhaustive transition table of one micro-MDP prompt. State 0 is the
/// empty prefix; terminal states have no outgoing transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMdpTable {
    pub spec: MicroMdpSpec,
    pub prompt: PromptSpec,
    pub states: Vec<EnvState>,
    pub transitions: Vec<Vec<Transition>>,
    index: HashMap<Vec<ActionId>, usize>,
}

/// Builds the full prefix tree for one prompt.
pub fn enumerate_micro_mdp(spec: &MicroMdpSpec, prompt: &PromptSpec) -> Result<MicroMdpTable> {
    let env = EnvSpec::MicroMdp(*spec);
    env.validate()?;
    let mut states = vec![env.reset(prompt)];
    let mut transitions: Vec<Vec<Transition>> = vec![Vec::new()];
    let mut index = HashMap::new();
    index.insert(Vec::new(), 0);
    let mut frontier = 0;
    while frontier < states.len() {
        if !states[frontier].done {
            let current = states[frontier].clone();
            let mut outgoing = Vec::with_capacity(spec.num_actions);
            for a in 0..spec.num_actions {
                let res = env.step(prompt, &current, a)?;
                let next = states.len();
                index.insert(res.next_state.emitted.clone(), next);
                states.push(res.next_state);
                transitions.push(Vec::new());
                outgoing.push(Transition {
                    next,
                    reward: res.reward,
                    done: res.done,
                });
            }
            transitions[frontier] = outgoing;
        }
        frontier += 1;
    }
    Ok(MicroMdpTable {
        spec: *spec,
        prompt: prompt.clone(),
        states,
        transitions,
        index,
    })
}

impl MicroMdpTable {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn index_of(&self, emitted: &[ActionId]) -> Option<usize> {
        self.index.get(emitted).copied()
    }

    /// Undiscounted optimal values by value iteration to a fixed point.
    pub fn value_iteration(&self) -> Vec<f64> {
        let mut values = vec![0.0; self.num_states()];
        loop {
            let mut changed = false;
            for s in 0..self.num_states() {
                if self.transitions[s].is_empty() {
                    continue;
                }
                let best = self.transitions[s]
                    .iter()
                    .map(|t| t.reward + if t.done { 0.0 } else { values[t.next] })
                    .fold(f64::NEG_INFINITY, f64::max);
                if best != values[s] {
                    values[s] = best;
                    changed = true;
                }
            }
            if !changed {
                return values;
            }
        }
    }

    /// Greedy action per non-terminal state (lowest index among ties).
    pub fn optimal_actions(&self) -> Vec<Option<ActionId>> {
        let values = self.value_iteration();
        self.transitions
            .iter()
            .map(|out| {
                let mut best: Option<(ActionId, f64)> = None;
                for (a, t) in out.iter().enumerate() {
                    let q = t.reward + if t.done { 0.0 } else { values[t.next] };
                    if best.is_none_or(|(_, b)| q > b) {
                        best = Some((a, q));
                    }
                }
                best.map(|(a, _)| a)
            })
            .collect()
    }

    /// Exact value of a stochastic policy given as per-state action probabilities.
    pub fn policy_values<F>(&self, probs: F) -> Vec<f64>
    where
        F: Fn(usize) -> Vec<f64>,
    {
        let mut values = vec![0.0; self.num_states()];
        // Children always have larger indices than parents.
        for s in (0..self.num_states()).rev() {
            if self.transitions[s].is_empty() {
                continue;
            }
            let p = probs(s);
            values[s] = self.transitions[s]
                .iter()
                .zip(&p)
                .map(|(t, &pa)| pa * (t.reward + if t.done { 0.0 } else { values[t.next] }))
                .sum();
        }
        values
    }

    pub fn uniform_value(&self) -> f64 {
        let a = self.spec.num_actions;
        self.policy_values(|_| vec![1.0 / a as f64; a])[0]
    }
}

/// Greedy tabular policy read off exact micro-MDP solutions, one table per prompt.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    actions: HashMap<(u64, Vec<ActionId>), ActionId>,
    vocab: usize,
}

impl TabularPolicy {
    pub fn optimal(tables: &[MicroMdpTable]) -> Self {
        let mut actions = HashMap::new();
        let mut vocab = 0;
        for table in tables {
            vocab = table.spec.num_actions;
            for (s, a) in table.optimal_actions().into_iter().enumerate() {
                if let Some(a) = a {
                    actions.insert((table.prompt.prompt_id, table.states[s].emitted.clone()), a);
                }
            }
        }
        Self { actions, vocab }
    }

    pub fn action(&self, state: &EnvState) -> Option<ActionId> {
        self.actions.get(&(state.prompt_id, state.emitted.clone())).copied()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}
