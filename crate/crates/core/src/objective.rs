//! Clipped-surrogate policy loss with value-spread masks.
//!
//! Per token `t` of response `o` the maximized objective is
//!
//! ```text
//! I^A_t · min(IS_t·A_t, clip(IS_t, 1−ε, 1+ε)·A_t) + β · I^H_t · H[π(·|s_t)]
//! ```
//!
//! averaged with weight `1/|o|` inside each response and then over
//! responses. `I^A` zeroes the `⌊kN⌋` lowest-spread tokens of the batch and
//! `I^H` the `⌊hN⌋` highest-spread ones. Masked tokens still count in `|o|`.
//! The returned loss is the negated objective.

use crate::advantage::AdvantageTable;
use crate::approximator::ApproximatorParams;
use crate::error::{Error, Result};
use crate::rollout::TrajectoryBatch;

/// Shannon entropy of a normalized distribution given as log-probabilities.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

/// Number of tokens selected by a fraction: `⌊fraction · n⌋`.
pub fn selection_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVectors {
    /// `false` where the surrogate is masked.
    pub adv_mask: Vec<bool>,
    /// `false` where the entropy bonus is withheld.
    pub ent_mask: Vec<bool>,
    pub k: f64,
    pub h: f64,
}

impl MaskVectors {
    /// No masking at all.
    pub fn ones(n: usize) -> Self {
        Self {
            adv_mask: vec![true; n],
            ent_mask: vec![true; n],
            k: 0.0,
            h: 0.0,
        }
    }

    pub fn masked_adv(&self) -> usize {
        self.adv_mask.iter().filter(|&&m| !m).count()
    }

    pub fn filtered_ent(&self) -> usize {
        self.ent_mask.iter().filter(|&&m| !m).count()
    }
}

/// Ranks `sigma` over the whole batch. Ties go to the lower row index first
/// in both selections.
pub fn build_masks(sigma: &[f64], k: f64, h: f64) -> Result<MaskVectors> {
    for (name, v) in [("k", k), ("h", h)] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("mask fraction {name} must lie in [0, 1), got {v}")));
        }
    }
    if let Some(i) = sigma.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("value spread at row {i} is NaN")));
    }
    let n = sigma.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut adv_mask = vec![true; n];
    let mut ent_mask = vec![true; n];

    let low = selection_count(k, n);
    if low > 0 {
        order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
        order[..low].iter().for_each(|&i| adv_mask[i] = false);
    }
    let top = selection_count(h, n);
    if top > 0 {
        order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
        order[..top].iter().for_each(|&i| ent_mask[i] = false);
    }
    Ok(MaskVectors {
        adv_mask,
        ent_mask,
        k,
        h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    /// Weighted, masked clipped surrogate (maximized).
    pub surrogate: f64,
    /// Weighted, filtered entropy (maximized, before `β`).
    pub entropy_term: f64,
    /// `−surrogate − β·entropy_term`.
    pub total: f64,
    /// Share of rows with `|IS − 1| > ε`.
    pub clip_fraction: f64,
    pub masked_adv_count: usize,
    pub filtered_ent_count: usize,
    pub mean_abs_ratio_deviation: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of `total`.
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLossTerms {
    pub breakdown: LossBreakdown,
    /// Gradient of `−surrogate`.
    pub surrogate_gradient: Vec<f64>,
    /// Gradient of `−β·entropy_term`.
    pub entropy_gradient: Vec<f64>,
}

impl PolicyLossTerms {
    pub fn gradient(&self) -> Vec<f64> {
        self.surrogate_gradient
            .iter()
            .zip(&self.entropy_gradient)
            .map(|(a, b)| a + b)
            .collect()
    }
}

enum Sink<'a> {
    Combined(&'a mut [f64]),
    Split(&'a mut [f64], &'a mut [f64]),
}

fn accumulate(
    batch: &TrajectoryBatch,
    advantages: &AdvantageTable,
    masks: &MaskVectors,
    params: &ApproximatorParams,
    rows: &[usize],
    coef: LossCoefficients,
    mut sink: Sink<'_>,
) -> Result<LossBreakdown> {
    let n = batch.num_rows();
    if advantages.values.len() != n || masks.adv_mask.len() != n || masks.ent_mask.len() != n {
        return Err(Error::Shape {
            context: "advantage or mask vectors",
            expected: n,
            actual: advantages.values.len().min(masks.adv_mask.len()).min(masks.ent_mask.len()),
        });
    }
    let eps = coef.clip_epsilon;
    let beta = coef.entropy_coef;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("clip epsilon must lie in (0, 1), got {eps}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("entropy coefficient must be non-negative, got {beta}")));
    }

    let mut out = LossBreakdown {
        rows: rows.len(),
        ..Default::default()
    };
    if rows.is_empty() {
        return Ok(out);
    }
    // Unbiased minibatch estimate of the full-batch mean; exact when rows
    // covers the whole batch.
    let scale = n as f64 / rows.len() as f64 / batch.trajectories().len() as f64;
    let mut clipped = 0usize;
    let mut abs_dev = 0.0;
    let vocab = params.output_dim();
    let mut surr_up = vec![0.0; vocab];
    let mut ent_up = vec![0.0; vocab];

    for &row in rows {
        let (traj, t) = batch.locate(row);
        let step = &batch.trajectories()[traj].steps[t];
        let weight = scale / batch.trajectories()[traj].len() as f64;
        let (log_probs, record) = params.policy_forward(&step.state_encoding)?;
        let ratio = (log_probs[step.action] - step.behavior_log_prob).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!(
                "importance ratio {ratio} at row {row} (prompt {}, response {}, t {t}): \
                 log-prob {} vs behavior {}",
                batch.trajectories()[traj].prompt_index,
                batch.trajectories()[traj].response_index,
                log_probs[step.action],
                step.behavior_log_prob
            )));
        }
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        abs_dev += (ratio - 1.0).abs();

        let use_adv = masks.adv_mask[row];
        let use_ent = masks.ent_mask[row];
        if !use_adv {
            out.masked_adv_count += 1;
        }
        if !use_ent {
            out.filtered_ent_count += 1;
        }

        let mut touched = false;
        if use_adv {
            let a = advantages.values[row];
            let unclipped = ratio * a;
            let clipped_val = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            out.surrogate += weight * unclipped.min(clipped_val);
            let d_logp = if unclipped <= clipped_val { unclipped } else { 0.0 };
            if d_logp != 0.0 {
                // d(ratio)/d(log π) = ratio; push through the log-softmax.
                let g = -weight * d_logp;
                for (j, (u, lp)) in surr_up.iter_mut().zip(&log_probs).enumerate() {
                    let delta = if j == step.action { 1.0 } else { 0.0 };
                    *u = g * (delta - lp.exp());
                }
                touched = true;
            } else {
                surr_up.iter_mut().for_each(|u| *u = 0.0);
            }
        } else {
            surr_up.iter_mut().for_each(|u| *u = 0.0);
        }

        ent_up.iter_mut().for_each(|u| *u = 0.0);
        if use_ent {
            let ent = entropy(&log_probs);
            out.entropy_term += weight * ent;
            if beta > 0.0 {
                // dH/dz_j = −p_j (log p_j + H)
                for (u, &lp) in ent_up.iter_mut().zip(&log_probs) {
                    *u = beta * weight * lp.exp() * (lp + ent);
                }
                touched = true;
            }
        }

        if touched {
            match &mut sink {
                Sink::Combined(grad) => {
                    let up: Vec<f64> = surr_up.iter().zip(&ent_up).map(|(a, b)| a + b).collect();
                    params.backward_accumulate(&record, &up, grad)?;
                }
                Sink::Split(surr_grad, ent_grad) => {
                    if use_adv {
                        params.backward_accumulate(&record, &surr_up, surr_grad)?;
                    }
                    if use_ent && beta > 0.0 {
                        params.backward_accumulate(&record, &ent_up, ent_grad)?;
                    }
                }
            }
        }
    }

    out.clip_fraction = clipped as f64 / rows.len() as f64;
    out.mean_abs_ratio_deviation = abs_dev / rows.len() as f64;
    out.total = -out.surrogate - beta * out.entropy_term;
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("policy loss is {}", out.total)));
    }
    Ok(out)
}

/// Loss and gradient over `rows` (pass every row for the full-batch loss).
pub fn policy_loss(
    batch: &TrajectoryBatch,
    advantages: &AdvantageTable,
    masks: &MaskVectors,
    params: &ApproximatorParams,
    rows: &[usize],
    coef: LossCoefficients,
) -> Result<PolicyLoss> {
    let mut gradient = vec![0.0; params.len()];
    let breakdown = accumulate(
        batch,
        advantages,
        masks,
        params,
        rows,
        coef,
        Sink::Combined(&mut gradient),
    )?;
    Ok(PolicyLoss { breakdown, gradient })
}

/// Same loss with the surrogate and entropy gradients kept apart.
pub fn policy_loss_terms(
    batch: &TrajectoryBatch,
    advantages: &AdvantageTable,
    masks: &MaskVectors,
    params: &ApproximatorParams,
    rows: &[usize],
    coef: LossCoefficients,
) -> Result<PolicyLossTerms> {
    let mut surrogate_gradient = vec![0.0; params.len()];
    let mut entropy_gradient = vec![0.0; params.len()];
    let breakdown = accumulate(
        batch,
        advantages,
        masks,
        params,
        rows,
        coef,
        Sink::Split(&mut surrogate_gradient, &mut entropy_gradient),
    )?;
    Ok(PolicyLossTerms {
        breakdown,
        surrogate_gradient,
        entropy_gradient,
    })
}
