//! Tabular PPO: softmax policy over token-prefix states, a value table, the
//! clipped surrogate plus squared-error value objective with analytic
//! gradients, and the common implementation variants (reward normalization,
//! reward whitening, KL clamping, adaptive KL).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::env::{EnvError, ToyEnv};
use crate::evaluator::{EvalError, RewardNorm, TabularEvaluator, ValueTable};
use crate::policy::{state_map, HashedLogits, Policy, TabularPolicy};
use crate::Token;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("training diverged at step {step}: mean |logit| = {mean_abs_logit:.3} exceeds {limit}")]
    Diverged { step: usize, mean_abs_logit: f64, limit: f64 },
    #[error("unsupported artifact format version {0}")]
    FormatVersion(u32),
    #[error("artifact: {0}")]
    Artifact(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Clip range of the probability ratio.
    pub epsilon: f64,
    /// Weight of the value objective.
    pub alpha: f64,
    /// KL coefficient; the starting point when `adaptive_kl` is on.
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over `num_steps`.
    pub anneal_lr: bool,
    pub rollouts_per_step: usize,
    pub num_steps: usize,
    pub reward_normalization: bool,
    /// Rollouts of the initial policy used to estimate the normalization.
    pub normalization_rollouts: usize,
    pub reward_whitening: bool,
    pub kl_clamping: bool,
    pub adaptive_kl: bool,
    pub target_kl: f64,
    /// Reference ("pretrained") policy the trainer starts from.
    pub reference: HashedLogits,
    /// Abort when the mean absolute logit of the table exceeds this.
    pub divergence_limit: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            alpha: 1.0,
            beta: 0.15,
            gamma: 1.0,
            learning_rate: 0.05,
            anneal_lr: true,
            rollouts_per_step: 64,
            num_steps: 200,
            reward_normalization: false,
            normalization_rollouts: 256,
            reward_whitening: false,
            kl_clamping: false,
            adaptive_kl: false,
            target_kl: 0.5,
            reference: HashedLogits::new(2, 0, 1.0),
            divergence_limit: 50.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.epsilon > 0.0) {
            return Err(ConfigError::field("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(ConfigError::field("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ConfigError::field("beta", format!("must be non-negative, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::field("gamma", format!("must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::field("learning_rate", "must be positive"));
        }
        if self.rollouts_per_step < 1 {
            return Err(ConfigError::field("rollouts_per_step", "must be at least 1"));
        }
        if self.reward_normalization && self.normalization_rollouts < 2 {
            return Err(ConfigError::field("normalization_rollouts", "must be at least 2"));
        }
        if self.adaptive_kl && !(self.target_kl.is_finite() && self.target_kl > 0.0) {
            return Err(ConfigError::field("target_kl", "must be positive"));
        }
        if !self.reference.bias.is_empty() && self.reference.bias.len() != self.reference.vocab_size {
            return Err(ConfigError::field("reference", "bias length must equal vocab_size"));
        }
        Ok(())
    }
}

/// One sampled step: the state it was taken from, the token, and log-probs
/// under the rollout policy and the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<Token>,
    pub action: Token,
    pub logprob: f64,
    pub ref_logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Env reward of the complete sequence, before normalization.
    pub reward: f64,
}

/// Per-step training target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: Vec<Token>,
    pub action: Token,
    pub old_logprob: f64,
    pub ret: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean raw env reward of the batch.
    pub mean_reward: f64,
    /// Mean per-sequence sampled KL to the reference.
    pub mean_kl: f64,
    pub beta: f64,
    pub loss: f64,
}

/// Trained policy/value pair plus everything needed to decode from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoState {
    pub format_version: u32,
    pub env: ToyEnv,
    pub config: PpoConfig,
    pub seed: u64,
    pub policy: TabularPolicy,
    pub value_table: ValueTable,
    pub step: usize,
    /// Final KL coefficient (differs from `config.beta` under adaptive KL).
    pub beta: f64,
    /// `(μ0, σ0)` applied to terminal rewards when normalization was on.
    pub reward_norm: Option<RewardNorm>,
    /// Times each state was visited across all training rollouts.
    #[serde(with = "state_map")]
    pub visit_counts: BTreeMap<Vec<Token>, u64>,
    pub history: Vec<StepStats>,
}

impl PpoState {
    /// Untrained state: policy equals the reference, values are zero.
    pub fn new(env: ToyEnv, config: PpoConfig, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            policy: TabularPolicy::new(config.reference.clone()),
            value_table: ValueTable::default(),
            step: 0,
            beta: config.beta,
            reward_norm: None,
            visit_counts: BTreeMap::new(),
            history: Vec::new(),
            env,
            config,
            seed,
        }
    }

    pub fn reference(&self) -> &HashedLogits {
        &self.policy.reference
    }

    /// Whether exact `Q` is unusable for decoding: the value scale is unknown
    /// after whitening, and the engine's KL term is unclamped.
    pub fn requires_approx_q(&self) -> bool {
        self.config.reward_whitening || self.config.kl_clamping
    }

    /// In-process evaluator over the trained policy, frozen reference and
    /// value table, with terminal rewards on the training scale.
    pub fn evaluator(&self) -> Result<TabularEvaluator, EvalError> {
        Ok(TabularEvaluator::new(
            self.env.clone(),
            Arc::new(self.policy.clone()),
            Some(Arc::new(self.policy.reference.clone())),
            Arc::new(self.value_table.clone()),
        )?
        .with_reward_norm(self.reward_norm))
    }

    pub fn to_json(&self) -> Result<String, PpoError> {
        serde_json::to_string(self).map_err(|e| PpoError::Artifact(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, PpoError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| PpoError::Artifact(e.to_string()))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(PpoError::FormatVersion(version));
        }
        serde_json::from_value(raw).map_err(|e| PpoError::Artifact(e.to_string()))
    }
}

fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Samples one complete sequence from `policy` after a random prompt.
pub fn rollout<R: Rng + ?Sized>(
    env: &ToyEnv,
    policy: &dyn Policy,
    reference: &dyn Policy,
    rng: &mut R,
) -> Result<Trajectory, PpoError> {
    let mut state = env.random_prompt(rng);
    let mut steps = Vec::new();
    while !env.is_terminal(&state) {
        let lp = policy.log_probs(&state);
        let lr = reference.log_probs(&state);
        let a = sample_index(&lp, rng);
        steps.push(Step {
            state: state.clone(),
            action: a as Token,
            logprob: lp[a],
            ref_logprob: lr[a],
        });
        state.push(a as Token);
    }
    let reward = env.terminal_reward(&state)?;
    Ok(Trajectory { steps, reward })
}

/// Step rewards `r_t = -β KL_t (+ r on the last step)`, with the KL term
/// clamped at zero when `kl_clamping` is set.
pub fn step_rewards(traj: &Trajectory, beta: f64, kl_clamping: bool, norm: Option<RewardNorm>) -> Vec<f64> {
    let last = traj.steps.len().saturating_sub(1);
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut kl = s.logprob - s.ref_logprob;
            if kl_clamping {
                kl = kl.max(0.0);
            }
            let mut r = -beta * kl;
            if t == last {
                r += norm.map_or(traj.reward, |n| n.apply(traj.reward));
            }
            r
        })
        .collect()
}

/// Returns `G_t = Σ γ^(t'-t) r_t'` and advantages `Â_t = G_t - V(s_t)` for every
/// step of every trajectory. With whitening, all step rewards in the batch
/// are first divided by their standard deviation.
pub fn compute_returns_and_advantages(
    batch: &[Trajectory],
    values: &ValueTable,
    beta: f64,
    config: &PpoConfig,
    norm: Option<RewardNorm>,
) -> Result<Vec<Sample>, PpoError> {
    let mut rewards = Vec::with_capacity(batch.len());
    for traj in batch {
        if traj.steps.is_empty() {
            return Err(PpoError::EmptyTrajectory);
        }
        rewards.push(step_rewards(traj, beta, config.kl_clamping, norm));
    }
    if config.reward_whitening {
        let all: Vec<f64> = rewards.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-12 {
            for r in rewards.iter_mut().flatten() {
                *r /= std;
            }
        }
    }
    let mut samples = Vec::new();
    for (traj, r) in batch.iter().zip(rewards) {
        let mut g = 0.0;
        let mut rets = vec![0.0; r.len()];
        for t in (0..r.len()).rev() {
            g = r[t] + config.gamma * g;
            rets[t] = g;
        }
        for (s, ret) in traj.steps.iter().zip(rets) {
            samples.push(Sample {
                state: s.state.clone(),
                action: s.action,
                old_logprob: s.logprob,
                ret,
                advantage: ret - values.0.get(&s.state).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(samples)
}

/// Loss `-J` and its gradients with respect to policy logits and value entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub policy_grad: BTreeMap<Vec<Token>, Vec<f64>>,
    pub value_grad: BTreeMap<Vec<Token>, f64>,
}

/// `J = Ê[min(ν Â, clip(ν, 1-ε, 1+ε) Â)] + α Ê[-(V(s) - G)²]`, with
/// `ν = p_θ(a|s) / p_old(a|s)` computed in log space. Returns `-J`.
///
/// Advantages are held fixed, as in PPO; the value term alone carries the
/// value gradient.
pub fn ppo_loss(samples: &[Sample], state: &PpoState, config: &PpoConfig) -> LossOutput {
    let mut out = LossOutput::default();
    if samples.is_empty() {
        return out;
    }
    let m = samples.len() as f64;
    let (lo, hi) = (1.0 - config.epsilon, 1.0 + config.epsilon);
    let mut j = 0.0;
    for s in samples {
        let lp = state.policy.log_probs(&s.state);
        let log_ratio = (lp[s.action as usize] - s.old_logprob).min(700.0);
        let ratio = log_ratio.exp();
        let a = s.advantage;
        let (surrogate, active) = if a >= 0.0 {
            if ratio < hi {
                (ratio * a, true)
            } else {
                (hi * a, false)
            }
        } else if ratio > lo {
            (ratio * a, true)
        } else {
            (lo * a, false)
        };
        j += surrogate / m;
        let grad = out
            .policy_grad
            .entry(s.state.clone())
            .or_insert_with(|| vec![0.0; lp.len()]);
        if active {
            // d(ν A)/dz_j = ν A (1[j=a] - π_j); loss is -J
            let w = ratio * a / m;
            for (jj, g) in grad.iter_mut().enumerate() {
                let indicator = if jj == s.action as usize { 1.0 } else { 0.0 };
                *g -= w * (indicator - lp[jj].exp());
            }
        }
        let v = state.value_table.0.get(&s.state).copied().unwrap_or(0.0);
        let err = v - s.ret;
        j -= config.alpha * err * err / m;
        *out.value_grad.entry(s.state.clone()).or_insert(0.0) += 2.0 * config.alpha * err / m;
    }
    out.loss = -j;
    out
}

/// Adam moments for touched table rows; untouched rows are left alone.
#[derive(Clone, Debug, Default)]
struct Adam {
    t: i32,
    policy: BTreeMap<Vec<Token>, (Vec<f64>, Vec<f64>)>,
    value: BTreeMap<Vec<Token>, (f64, f64)>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn step(&mut self, state: &mut PpoState, grads: &LossOutput, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        for (s, g) in &grads.policy_grad {
            let (m, v) = self
                .policy
                .entry(s.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let row = state.policy.logits_mut(s);
            for i in 0..g.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                row[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        for (s, &g) in &grads.value_grad {
            let (m, v) = self.value.entry(s.clone()).or_insert((0.0, 0.0));
            *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
            *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
            *state.value_table.0.entry(s.clone()).or_insert(0.0) -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Mean and standard deviation of the env reward under the reference policy.
pub fn estimate_reward_norm<R: Rng + ?Sized>(
    env: &ToyEnv,
    reference: &HashedLogits,
    rollouts: usize,
    rng: &mut R,
) -> Result<RewardNorm, PpoError> {
    let mut rewards = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        rewards.push(rollout(env, reference, reference, rng)?.reward);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(RewardNorm {
        mean,
        std: if std > 1e-12 { std } else { 1.0 },
    })
}

/// Trains from the reference for `config.num_steps` steps; one gradient
/// step per batch of fresh rollouts. Deterministic per seed.
pub fn train(env: &ToyEnv, config: &PpoConfig, seed: u64) -> Result<PpoState, PpoError> {
    config.validate()?;
    env.validate()?;
    if config.reference.vocab_size != env.vocab_size {
        return Err(EvalError::VocabularyMismatch {
            policy: config.reference.vocab_size,
            env: env.vocab_size,
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = PpoState::new(env.clone(), config.clone(), seed);
    if config.reward_normalization {
        state.reward_norm = Some(estimate_reward_norm(
            env,
            &config.reference,
            config.normalization_rollouts,
            &mut rng,
        )?);
    }
    let reference = config.reference.clone();
    let mut adam = Adam::default();
    for step in 0..config.num_steps {
        let mut batch = Vec::with_capacity(config.rollouts_per_step);
        for _ in 0..config.rollouts_per_step {
            batch.push(rollout(env, &state.policy, &reference, &mut rng)?);
        }
        for traj in &batch {
            for s in &traj.steps {
                *state.visit_counts.entry(s.state.clone()).or_insert(0) += 1;
            }
        }
        let n = batch.len() as f64;
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / n;
        let mean_kl = batch
            .iter()
            .map(|t| t.steps.iter().map(|s| s.logprob - s.ref_logprob).sum::<f64>())
            .sum::<f64>()
            / n;
        let samples = compute_returns_and_advantages(&batch, &state.value_table, state.beta, config, state.reward_norm)?;
        let grads = ppo_loss(&samples, &state, config);
        let lr = if config.anneal_lr {
            config.learning_rate * (1.0 - step as f64 / config.num_steps as f64)
        } else {
            config.learning_rate
        };
        adam.step(&mut state, &grads, lr);
        state.history.push(StepStats {
            step,
            mean_reward,
            mean_kl,
            beta: state.beta,
            loss: grads.loss,
        });
        log::debug!("ppo step {step}: reward {mean_reward:.4} kl {mean_kl:.4} beta {:.4}", state.beta);
        if config.adaptive_kl {
            let sign = (mean_kl - config.target_kl).signum();
            state.beta *= 1.0 + 0.1 * sign;
        }
        state.step = step + 1;
        let mal = state.policy.mean_abs_logit();
        if !(mal <= config.divergence_limit) {
            return Err(PpoError::Diverged {
                step,
                mean_abs_logit: mal,
                limit: config.divergence_limit,
            });
        }
    }
    Ok(state)
}
