//! Group-relative advantages, sequence-level importance ratios and the clipped
//! surrogate objective, plus a finite-difference gradient check.
//!
//! The kernel works on summed sequence log-probabilities. It returns the value
//! of a single group; averaging across groups is left to the caller.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStat {
    pub reward: f64,
    /// Sequence length `|τ|` in tokens.
    pub length: u32,
    pub logprob_new: f64,
    pub logprob_old: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_estimate: Option<f64>,
}

impl RolloutStat {
    pub fn new(reward: f64, length: u32, logprob_new: f64, logprob_old: f64) -> Self {
        RolloutStat { reward, length, logprob_new, logprob_old, kl_estimate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    pub group_size: usize,
    pub clip: f64,
    pub kl_coefficient: f64,
    pub divide_by_std: bool,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig { group_size: 8, clip: 0.2, kl_coefficient: 0.0, divide_by_std: false }
    }
}

impl GroupConfig {
    pub fn new(group_size: usize) -> Self {
        GroupConfig { group_size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GspoError> {
        if self.group_size < 2 {
            return Err(GspoError::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(GspoError::Config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return Err(GspoError::Config(format!(
                "kl_coefficient must be finite and non-negative, got {}",
                self.kl_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GspoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("group has {actual} rollouts but group_size is {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("rollout {index} has no kl_estimate but kl_coefficient is positive")]
    MissingKl { index: usize },
    #[error("rollout {index}: {message}")]
    InvalidRollout { index: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
}

/// `r_i - mean(r)`, optionally divided by the population standard deviation.
/// A group whose rewards are all equal gets exact zeros.
pub fn group_advantages(rewards: &[f64], divide_by_std: bool) -> Result<Vec<f64>, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !divide_by_std {
        return Ok(centered);
    }
    let std = (centered.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(centered);
    }
    Ok(centered.into_iter().map(|a| a / std).collect())
}

/// `exp((logprob_new - logprob_old) / length)`.
pub fn importance_ratio(stat: &RolloutStat) -> Result<f64, GspoError> {
    ratio_at(stat, 0)
}

fn ratio_at(stat: &RolloutStat, index: usize) -> Result<f64, GspoError> {
    let invalid = |message: String| GspoError::InvalidRollout { index, message };
    if stat.length == 0 {
        return Err(invalid("length must be at least 1".into()));
    }
    if !stat.logprob_new.is_finite() || !stat.logprob_old.is_finite() {
        return Err(invalid("log-probabilities must be finite".into()));
    }
    let ratio = ((stat.logprob_new - stat.logprob_old) / f64::from(stat.length)).exp();
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(invalid(format!("importance ratio {ratio} is not a positive finite number")));
    }
    Ok(ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutTerm {
    pub advantage: f64,
    pub ratio: f64,
    /// The clipped branch was strictly smaller than the unclipped one.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub value: f64,
    pub per_rollout: Vec<RolloutTerm>,
}

pub fn gspo_objective(group: &[RolloutStat], cfg: &GroupConfig) -> Result<Objective, GspoError> {
    cfg.validate()?;
    if group.len() != cfg.group_size {
        return Err(GspoError::SizeMismatch { expected: cfg.group_size, actual: group.len() });
    }
    for (index, stat) in group.iter().enumerate() {
        if !(0.0..=1.0).contains(&stat.reward) {
            return Err(GspoError::InvalidRollout { index, message: format!("reward {} outside [0, 1]", stat.reward) });
        }
    }
    let kl_mean = if cfg.kl_coefficient > 0.0 {
        let mut total = 0.0;
        for (index, stat) in group.iter().enumerate() {
            match stat.kl_estimate {
                Some(kl) if kl.is_finite() && kl >= 0.0 => total += kl,
                Some(kl) => {
                    return Err(GspoError::InvalidRollout {
                        index,
                        message: format!("kl_estimate {kl} must be finite and non-negative"),
                    })
                }
                None => return Err(GspoError::MissingKl { index }),
            }
        }
        total / group.len() as f64
    } else {
        0.0
    };

    let rewards: Vec<f64> = group.iter().map(|s| s.reward).collect();
    let advantages = group_advantages(&rewards, cfg.divide_by_std)?;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    let mut per_rollout = Vec::with_capacity(group.len());
    let mut total = Neumaier::default();
    for (index, (stat, advantage)) in group.iter().zip(advantages).enumerate() {
        let ratio = ratio_at(stat, index)?;
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(lo, hi) * advantage;
        total.add(unclipped.min(clipped));
        per_rollout.push(RolloutTerm { advantage, ratio, clipped: clipped < unclipped });
    }
    let mut value = total.sum() / group.len() as f64;
    if cfg.kl_coefficient > 0.0 {
        value -= cfg.kl_coefficient * kl_mean;
    }
    Ok(Objective { value, per_rollout })
}

/// Compensated summation; keeps finite differences of the value clean.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    carry: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `∂value/∂logprob_new_i`. Zero where the clipped branch is active, since the
/// clipped ratio is constant there. The KL estimates are treated as inputs.
pub fn analytic_gradient(group: &[RolloutStat], cfg: &GroupConfig) -> Result<Vec<f64>, GspoError> {
    let objective = gspo_objective(group, cfg)?;
    let g = group.len() as f64;
    Ok(group
        .iter()
        .zip(&objective.per_rollout)
        .map(|(stat, term)| if term.clipped { 0.0 } else { term.advantage * term.ratio / (f64::from(stat.length) * g) })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Indices whose `logprob_new` was moved off a clip boundary first.
    pub shifted: Vec<usize>,
}

/// Gradients smaller than this are compared absolutely rather than relatively.
const GRADIENT_FLOOR: f64 = 1e-8;

/// Compares [`analytic_gradient`] with central differences of step `delta`.
///
/// A rollout whose ratio sits within a few steps of `1 ± clip` is first moved
/// to `4·delta` past the boundary on its own side, so neither probe straddles
/// the kink.
pub fn gradient_check(group: &[RolloutStat], cfg: &GroupConfig, delta: f64) -> Result<GradientCheck, GspoError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(GspoError::Config(format!("perturbation must be positive, got {delta}")));
    }
    gspo_objective(group, cfg)?;
    let mut point = group.to_vec();
    let mut shifted = Vec::new();
    for (i, stat) in point.iter_mut().enumerate() {
        let length = f64::from(stat.length);
        for bound in [1.0 - cfg.clip, 1.0 + cfg.clip] {
            let kink = stat.logprob_old + length * bound.ln();
            let gap = stat.logprob_new - kink;
            if gap.abs() < 2.0 * delta {
                stat.logprob_new = kink + if gap < 0.0 { -4.0 } else { 4.0 } * delta;
                shifted.push(i);
            }
        }
    }

    let analytic = analytic_gradient(&point, cfg)?;
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_relative_error: f64 = 0.0;
    for i in 0..point.len() {
        let base = point[i].logprob_new;
        point[i].logprob_new = base + delta;
        let up = gspo_objective(&point, cfg)?.value;
        point[i].logprob_new = base - delta;
        let down = gspo_objective(&point, cfg)?.value;
        point[i].logprob_new = base;
        let estimate = (up - down) / (2.0 * delta);
        let scale = analytic[i].abs().max(estimate.abs()).max(GRADIENT_FLOOR);
        max_relative_error = max_relative_error.max((analytic[i] - estimate).abs() / scale);
        numeric.push(estimate);
    }
    Ok(GradientCheck { max_relative_error, analytic, numeric, shifted })
}
