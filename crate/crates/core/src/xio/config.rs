//! Flat TOML configuration files.
//!
//! Every key is optional and falls back to [`TrainConfig::default`]. Unknown
//! keys, nested tables and ill-typed values are rejected with the offending
//! key and its line number.

use std::path::Path;

use toml::Value;

use crate::approximator::OptimizerKind;
use crate::ensemble::Aggregation;
use crate::error::{Error, Result};
use crate::trainer::{Algorithm, CriticTarget, EnvKind, TrainConfig};

/// Canonical keys in serialization order.
pub const KEYS: &[&str] = &[
    "algorithm",
    "seed",
    "dataset_seed",
    "deterministic",
    "max_steps",
    "gamma",
    "lambd",
    "clip_epsilon",
    "entropy_loss_coef",
    "gradient_mask_percentage",
    "entropy_filter_mask_percentage",
    "num_critics",
    "num_return_sequences",
    "ppo_epochs",
    "minibatch_size",
    "actor_lr",
    "critic_lr",
    "optimizer",
    "value_aggregation_strategy",
    "critic_target",
    "critic_steps_per_batch",
    "critic_minibatch_size",
    "whiten_advantages",
    "actor_hidden",
    "critic_hidden",
    "env",
    "num_prompts",
    "rollout_batch_size",
    "response_length",
    "eval_episodes",
    "modulus",
    "max_difficulty",
    "filler_tokens",
    "horizon",
    "token_window",
    "chain_length",
    "num_actions",
];

/// Short names accepted by command-line overrides.
pub const ALIASES: &[(&str, &str)] = &[
    ("k", "gradient_mask_percentage"),
    ("h", "entropy_filter_mask_percentage"),
    ("m", "num_critics"),
    ("g", "num_return_sequences"),
    ("beta", "entropy_loss_coef"),
    ("epsilon", "clip_epsilon"),
    ("lambda", "lambd"),
    ("aggregation", "value_aggregation_strategy"),
    ("steps", "max_steps"),
];

pub fn canonical_key(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(alias, _)| alias.eq_ignore_ascii_case(key))
        .map_or(key, |(_, canon)| canon)
}

fn as_f64(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn as_u64(v: &Value) -> std::result::Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(format!("expected a non-negative integer, got {i}")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn as_usize(v: &Value) -> std::result::Result<usize, String> {
    as_u64(v).and_then(|u| usize::try_from(u).map_err(|e| e.to_string()))
}

fn as_bool(v: &Value) -> std::result::Result<bool, String> {
    v.as_bool()
        .ok_or_else(|| format!("expected a boolean, got {}", v.type_str()))
}

fn as_str(v: &Value) -> std::result::Result<&str, String> {
    v.as_str()
        .ok_or_else(|| format!("expected a string, got {}", v.type_str()))
}

fn as_layers(v: &Value) -> std::result::Result<Vec<usize>, String> {
    match v {
        Value::Array(items) => items.iter().map(as_usize).collect(),
        Value::Integer(_) => Ok(vec![as_usize(v)?]),
        other => Err(format!("expected an array of layer sizes, got {}", other.type_str())),
    }
}

fn choice<T: Copy>(v: &Value, options: &[(&str, T)]) -> std::result::Result<T, String> {
    let s = as_str(v)?;
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(s))
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            format!("unknown value {s:?}; expected one of {}", names.join(", "))
        })
}

/// Applies one canonical key. Errors carry only the message.
fn apply(cfg: &mut TrainConfig, key: &str, v: &Value) -> std::result::Result<(), String> {
    match key {
        "algorithm" => {
            cfg.algorithm = choice(
                v,
                &[("asyppo", Algorithm::AsyPpo), ("ppo", Algorithm::Ppo), ("grpo", Algorithm::Grpo)],
            )?
        }
        "seed" => cfg.seed = as_u64(v)?,
        "dataset_seed" => cfg.dataset_seed = as_u64(v)?,
        "deterministic" => cfg.deterministic = as_bool(v)?,
        "max_steps" => cfg.max_steps = as_usize(v)?,
        "gamma" => cfg.gamma = as_f64(v)?,
        "lambd" => cfg.lambda = as_f64(v)?,
        "clip_epsilon" => cfg.clip_epsilon = as_f64(v)?,
        "entropy_loss_coef" => cfg.entropy_coef = as_f64(v)?,
        "gradient_mask_percentage" => cfg.adv_mask_fraction = as_f64(v)?,
        "entropy_filter_mask_percentage" => cfg.ent_filter_fraction = as_f64(v)?,
        "num_critics" => cfg.num_critics = as_usize(v)?,
        "num_return_sequences" => cfg.group_size = as_usize(v)?,
        "ppo_epochs" => cfg.ppo_epochs = as_usize(v)?,
        "minibatch_size" => cfg.minibatch_size = as_usize(v)?,
        "actor_lr" => cfg.actor_lr = as_f64(v)?,
        "critic_lr" => cfg.critic_lr = as_f64(v)?,
        "optimizer" => cfg.optimizer = choice(v, &[("adam", OptimizerKind::Adam), ("sgd", OptimizerKind::Sgd)])?,
        "value_aggregation_strategy" => {
            cfg.aggregation = choice(v, &[("mean", Aggregation::Mean), ("min", Aggregation::Min)])?
        }
        "critic_target" => {
            cfg.critic_target = choice(
                v,
                &[("mc", CriticTarget::MonteCarlo), ("lambda_return", CriticTarget::LambdaReturn)],
            )?
        }
        "critic_steps_per_batch" => cfg.critic_steps_per_batch = as_usize(v)?,
        "critic_minibatch_size" => cfg.critic_minibatch_size = as_usize(v)?,
        "whiten_advantages" => cfg.whiten_advantages = as_bool(v)?,
        "actor_hidden" => cfg.actor_hidden = as_layers(v)?,
        "critic_hidden" => {
            cfg.critic_hidden = match v {
                Value::String(s) if s.eq_ignore_ascii_case("auto") => None,
                other => Some(as_layers(other)?),
            }
        }
        "env" => {
            cfg.env = choice(
                v,
                &[("digit_chain", EnvKind::DigitChain), ("micro_mdp", EnvKind::MicroMdp)],
            )?
        }
        "num_prompts" => cfg.num_prompts = as_usize(v)?,
        "rollout_batch_size" => cfg.rollout_batch_size = as_usize(v)?,
        "response_length" => {
            cfg.response_length = match as_usize(v)? {
                0 => None,
                n => Some(n),
            }
        }
        "eval_episodes" => cfg.eval_episodes = as_usize(v)?,
        "modulus" => cfg.digit_chain.modulus = as_usize(v)?,
        "max_difficulty" => cfg.digit_chain.max_difficulty = as_usize(v)?,
        "filler_tokens" => cfg.digit_chain.filler_tokens = as_usize(v)?,
        "horizon" => cfg.digit_chain.horizon = as_usize(v)?,
        "token_window" => cfg.digit_chain.window = as_usize(v)?,
        "chain_length" => cfg.micro_mdp.chain_length = as_usize(v)?,
        "num_actions" => cfg.micro_mdp.num_actions = as_usize(v)?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

/// 1-based line on which `key` is assigned, if it can be found.
fn find_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|line| {
        let t = line.trim_start();
        let rest = t
            .strip_prefix(key)
            .or_else(|| t.strip_prefix(&format!("\"{key}\"")));
        rest.is_some_and(|r| r.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn with_line(err: Error, text: &str) -> Error {
    match err {
        Error::ConfigKey { mut location, message } => {
            if location.line.is_none() {
                location.line = find_line(text, &location.key);
            }
            Error::ConfigKey { location, message }
        }
        other => other,
    }
}

/// Parses a configuration file body on top of the defaults.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    parse_config_onto(TrainConfig::default(), text)
}

pub fn parse_config_onto(mut cfg: TrainConfig, text: &str) -> Result<TrainConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    for (key, value) in &table {
        let line = find_line(text, key);
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::key(key.clone(), line, "unknown configuration key"));
        }
        apply(&mut cfg, key, value).map_err(|m| Error::key(key.clone(), line, m))?;
    }
    cfg.validate().map_err(|e| with_line(e, text))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parses a command-line value: anything TOML accepts, else a bare string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets one key (aliases allowed) from its textual form. Does not validate
/// the config as a whole.
pub fn set_key(cfg: &mut TrainConfig, key: &str, raw: &str) -> Result<()> {
    let canon = canonical_key(key);
    if !KEYS.contains(&canon) {
        return Err(Error::key(key, None, "unknown configuration key"));
    }
    apply(cfg, canon, &parse_value(raw)).map_err(|m| Error::key(canon, None, m))
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Parse(format!("empty key in {s:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn f(v: f64) -> String {
    // Debug formatting is the shortest text that parses back to the same bits.
    format!("{v:?}")
}

fn layers(v: &[usize]) -> String {
    let items: Vec<_> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

/// Serializes every key, so the output fully determines the config.
pub fn to_toml_string(cfg: &TrainConfig) -> String {
    let env = match cfg.env {
        EnvKind::DigitChain => "digit_chain",
        EnvKind::MicroMdp => "micro_mdp",
    };
    let optimizer = match cfg.optimizer {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    let target = match cfg.critic_target {
        CriticTarget::MonteCarlo => "mc",
        CriticTarget::LambdaReturn => "lambda_return",
    };
    let critic_hidden = cfg
        .critic_hidden
        .as_deref()
        .map_or_else(|| "\"auto\"".to_string(), layers);
    let pairs: Vec<(&str, String)> = vec![
        ("algorithm", format!("\"{}\"", cfg.algorithm.as_str())),
        ("seed", cfg.seed.to_string()),
        ("dataset_seed", cfg.dataset_seed.to_string()),
        ("deterministic", cfg.deterministic.to_string()),
        ("max_steps", cfg.max_steps.to_string()),
        ("gamma", f(cfg.gamma)),
        ("lambd", f(cfg.lambda)),
        ("clip_epsilon", f(cfg.clip_epsilon)),
        ("entropy_loss_coef", f(cfg.entropy_coef)),
        ("gradient_mask_percentage", f(cfg.adv_mask_fraction)),
        ("entropy_filter_mask_percentage", f(cfg.ent_filter_fraction)),
        ("num_critics", cfg.num_critics.to_string()),
        ("num_return_sequences", cfg.group_size.to_string()),
        ("ppo_epochs", cfg.ppo_epochs.to_string()),
        ("minibatch_size", cfg.minibatch_size.to_string()),
        ("actor_lr", f(cfg.actor_lr)),
        ("critic_lr", f(cfg.critic_lr)),
        ("optimizer", format!("\"{optimizer}\"")),
        ("value_aggregation_strategy", format!("\"{}\"", cfg.aggregation.as_str())),
        ("critic_target", format!("\"{target}\"")),
        ("critic_steps_per_batch", cfg.critic_steps_per_batch.to_string()),
        ("critic_minibatch_size", cfg.critic_minibatch_size.to_string()),
        ("whiten_advantages", cfg.whiten_advantages.to_string()),
        ("actor_hidden", layers(&cfg.actor_hidden)),
        ("critic_hidden", critic_hidden),
        ("env", format!("\"{env}\"")),
        ("num_prompts", cfg.num_prompts.to_string()),
        ("rollout_batch_size", cfg.rollout_batch_size.to_string()),
        ("response_length", cfg.response_length.unwrap_or(0).to_string()),
        ("eval_episodes", cfg.eval_episodes.to_string()),
        ("modulus", cfg.digit_chain.modulus.to_string()),
        ("max_difficulty", cfg.digit_chain.max_difficulty.to_string()),
        ("filler_tokens", cfg.digit_chain.filler_tokens.to_string()),
        ("horizon", cfg.digit_chain.horizon.to_string()),
        ("token_window", cfg.digit_chain.window.to_string()),
        ("chain_length", cfg.micro_mdp.chain_length.to_string()),
        ("num_actions", cfg.micro_mdp.num_actions.to_string()),
    ];
    debug_assert_eq!(pairs.len(), KEYS.len());
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}
