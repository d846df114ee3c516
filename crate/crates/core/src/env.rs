//! Synthetic token MDPs with exact terminal rewards and exhaustive oracles.
//!
//! A state is `prompt ++ response`. Prompts have the fixed length
//! `prompt_len` and are drawn uniformly from the vocabulary; the reward
//! depends on the response only. An episode ends when the response reaches
//! `max_len` tokens or emits `eos_token`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{hash_tokens, unit_from_hash};
use crate::policy::Policy;
use crate::Token;

/// Largest number of complete sequences the exhaustive oracles will enumerate.
pub const MAX_ENUMERATION: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { token: Token, vocab_size: usize },
    #[error("state has {got} tokens but the prompt alone needs {prompt_len}")]
    PromptTooShort { prompt_len: usize, got: usize },
    #[error("prompt has {got} tokens, env expects {expected}")]
    PromptLength { expected: usize, got: usize },
    #[error("response of {got} tokens exceeds max_len {max_len}")]
    TooLong { max_len: usize, got: usize },
    #[error("tokens follow the end-of-sequence token")]
    TokenAfterEos,
    #[error("state is not terminal")]
    NotTerminal,
    #[error("instance too large to enumerate: {count} complete sequences (limit {MAX_ENUMERATION})")]
    TooLarge { count: u64 },
    #[error("no outputs to score")]
    EmptyOutputs,
    #[error("invalid env: {0}")]
    Invalid(String),
}

/// Terminal reward definitions. Encoded as a tagged union on `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `min(count(token), target) / target`: a lexical constraint that is
    /// fully satisfied once `token` appears `target` times.
    TargetTokenCount { token: Token, target: usize },
    /// Fraction of `suffix` matched by the tail of the response: the largest
    /// `j` with `response[-j..] == suffix[-j..]`, divided by `|suffix|`.
    SuffixMatch { suffix: Vec<Token> },
    /// Mean per-token weight over the response (weights in [0, 1]).
    WeightedBag { weights: Vec<f64> },
    /// Uniform reward in `[low, high]` drawn from a seeded hash of the full response.
    RandomTable { seed: u64, low: f64, high: f64 },
    /// Fraction of "positive" tokens; the lower half of the vocabulary is positive.
    SentimentProxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEnv {
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub prompt_len: usize,
    #[serde(default)]
    pub eos_token: Option<Token>,
    pub reward_spec: RewardSpec,
}

impl ToyEnv {
    pub fn new(vocab_size: usize, max_len: usize, reward_spec: RewardSpec) -> Self {
        Self {
            vocab_size,
            max_len,
            prompt_len: 0,
            eos_token: None,
            reward_spec,
        }
    }

    pub fn with_prompt_len(mut self, prompt_len: usize) -> Self {
        self.prompt_len = prompt_len;
        self
    }

    pub fn with_eos(mut self, eos: Token) -> Self {
        self.eos_token = Some(eos);
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(2..=64).contains(&self.vocab_size) {
            return Err(EnvError::Invalid(format!(
                "vocab_size must be in 2..=64, got {}",
                self.vocab_size
            )));
        }
        if !(1..=64).contains(&self.max_len) {
            return Err(EnvError::Invalid(format!(
                "max_len must be in 1..=64, got {}",
                self.max_len
            )));
        }
        if let Some(eos) = self.eos_token {
            self.check_token(eos)?;
        }
        match &self.reward_spec {
            RewardSpec::TargetTokenCount { token, target } => {
                self.check_token(*token)?;
                if *target == 0 || *target > self.max_len {
                    return Err(EnvError::Invalid(format!(
                        "target must be in 1..={}, got {target}",
                        self.max_len
                    )));
                }
            }
            RewardSpec::SuffixMatch { suffix } => {
                if suffix.is_empty() {
                    return Err(EnvError::Invalid("suffix must be non-empty".into()));
                }
                for &t in suffix {
                    self.check_token(t)?;
                }
            }
            RewardSpec::WeightedBag { weights } => {
                if weights.len() != self.vocab_size {
                    return Err(EnvError::Invalid(format!(
                        "weights has {} entries, vocabulary has {}",
                        weights.len(),
                        self.vocab_size
                    )));
                }
                if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                    return Err(EnvError::Invalid("weights must lie in [0, 1]".into()));
                }
            }
            RewardSpec::RandomTable { low, high, .. } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(EnvError::Invalid(format!(
                        "random-table bounds must satisfy low <= high, got [{low}, {high}]"
                    )));
                }
            }
            RewardSpec::SentimentProxy => {}
        }
        Ok(())
    }

    fn check_token(&self, token: Token) -> Result<(), EnvError> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(EnvError::InvalidToken {
                token,
                vocab_size: self.vocab_size,
            })
        }
    }

    pub fn check_prompt(&self, prompt: &[Token]) -> Result<(), EnvError> {
        if prompt.len() != self.prompt_len {
            return Err(EnvError::PromptLength {
                expected: self.prompt_len,
                got: prompt.len(),
            });
        }
        prompt.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Checks vocabulary membership and response-length/EOS structure.
    pub fn check_state(&self, state: &[Token]) -> Result<(), EnvError> {
        if state.len() < self.prompt_len {
            return Err(EnvError::PromptTooShort {
                prompt_len: self.prompt_len,
                got: state.len(),
            });
        }
        state.iter().try_for_each(|&t| self.check_token(t))?;
        let response = &state[self.prompt_len..];
        if response.len() > self.max_len {
            return Err(EnvError::TooLong {
                max_len: self.max_len,
                got: response.len(),
            });
        }
        if let Some(eos) = self.eos_token {
            if let Some(pos) = response.iter().position(|&t| t == eos) {
                if pos + 1 != response.len() {
                    return Err(EnvError::TokenAfterEos);
                }
            }
        }
        Ok(())
    }

    /// The response part of a state. Panics if the state is shorter than the prompt.
    pub fn response<'a>(&self, state: &'a [Token]) -> &'a [Token] {
        &state[self.prompt_len..]
    }

    pub fn is_terminal(&self, state: &[Token]) -> bool {
        let response = &state[self.prompt_len.min(state.len())..];
        response.len() >= self.max_len
            || matches!((self.eos_token, response.last()), (Some(e), Some(&l)) if e == l)
    }

    pub fn is_positive(&self, token: Token) -> bool {
        (token as usize) < self.vocab_size / 2 && Some(token) != self.eos_token
    }

    /// Reward of a complete response.
    pub fn reward(&self, response: &[Token]) -> f64 {
        let content = match (self.eos_token, response.split_last()) {
            (Some(eos), Some((&last, rest))) if last == eos => rest,
            _ => response,
        };
        match &self.reward_spec {
            RewardSpec::TargetTokenCount { token, target } => {
                let count = content.iter().filter(|&&t| t == *token).count();
                count.min(*target) as f64 / *target as f64
            }
            RewardSpec::SuffixMatch { suffix } => {
                let matched = (0..=suffix.len().min(content.len()))
                    .rev()
                    .find(|&j| content[content.len() - j..] == suffix[suffix.len() - j..])
                    .unwrap_or(0);
                matched as f64 / suffix.len() as f64
            }
            RewardSpec::WeightedBag { weights } => {
                if content.is_empty() {
                    0.0
                } else {
                    content.iter().map(|&t| weights[t as usize]).sum::<f64>() / content.len() as f64
                }
            }
            RewardSpec::RandomTable { seed, low, high } => {
                low + (high - low) * unit_from_hash(hash_tokens(*seed, response))
            }
            RewardSpec::SentimentProxy => {
                if content.is_empty() {
                    0.0
                } else {
                    content.iter().filter(|&&t| self.is_positive(t)).count() as f64
                        / content.len() as f64
                }
            }
        }
    }

    pub fn terminal_reward(&self, state: &[Token]) -> Result<f64, EnvError> {
        self.check_state(state)?;
        if !self.is_terminal(state) {
            return Err(EnvError::NotTerminal);
        }
        Ok(self.reward(self.response(state)))
    }

    /// Bounds that every reward lies in.
    pub fn reward_bounds(&self) -> (f64, f64) {
        match self.reward_spec {
            RewardSpec::RandomTable { low, high, .. } => (low, high),
            _ => (0.0, 1.0),
        }
    }

    /// Upper bound on the number of complete responses (`vocab^max_len`, saturating).
    pub fn sequence_count(&self) -> u64 {
        (0..self.max_len).fold(1u64, |acc, _| acc.saturating_mul(self.vocab_size as u64))
    }

    pub fn random_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        (0..self.prompt_len)
            .map(|_| rng.gen_range(0..self.vocab_size) as Token)
            .collect()
    }
}

/// Exhaustive optimum of the KL-penalized return from one root state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    #[serde(with = "crate::policy::state_map")]
    pub optimal_action_per_state: BTreeMap<Vec<Token>, Token>,
    #[serde(with = "crate::policy::state_map")]
    pub state_values: BTreeMap<Vec<Token>, f64>,
    /// `r(s, a) + γ V*(s')` for every root action, in token order.
    pub root_action_values: Vec<(Token, f64)>,
    pub best_return: f64,
    /// Lowest achievable return from the root.
    pub worst_return: f64,
    /// Best minus second-best root action value.
    pub return_gap: f64,
}

impl OracleResult {
    pub fn best_root_action(&self) -> Token {
        self.optimal_action_per_state
            .iter()
            .min_by_key(|(s, _)| s.len())
            .map(|(_, a)| *a)
            .expect("oracle always has a root")
    }
}

/// Backward induction over every continuation of `prompt`.
///
/// The edge reward is `-β (ln p(a|s) - ln p_ref(a|s))`; complete sequences are
/// worth their terminal reward, discounted by `γ` per edge, matching the
/// search's backup. Optimal-action ties go to the smallest token.
pub fn enumerate_returns(
    env: &ToyEnv,
    prompt: &[Token],
    policy: &dyn Policy,
    reference: &dyn Policy,
    beta: f64,
    gamma: f64,
) -> Result<OracleResult, EnvError> {
    env.validate()?;
    env.check_prompt(prompt)?;
    let count = env.sequence_count();
    if count > MAX_ENUMERATION {
        return Err(EnvError::TooLarge { count });
    }
    let mut out = OracleResult {
        optimal_action_per_state: BTreeMap::new(),
        state_values: BTreeMap::new(),
        root_action_values: Vec::new(),
        best_return: 0.0,
        worst_return: 0.0,
        return_gap: f64::INFINITY,
    };
    let mut state = prompt.to_vec();
    let (best, worst) = induct(env, &mut state, policy, reference, beta, gamma, &mut out);
    out.best_return = best;
    out.worst_return = worst;
    Ok(out)
}

fn edge_rewards(
    env: &ToyEnv,
    state: &[Token],
    policy: &dyn Policy,
    reference: &dyn Policy,
    beta: f64,
) -> Vec<f64> {
    if beta == 0.0 {
        return vec![0.0; env.vocab_size];
    }
    let lp = policy.log_probs(state);
    let lr = reference.log_probs(state);
    lp.iter().zip(&lr).map(|(p, r)| -beta * (p - r)).collect()
}

fn induct(
    env: &ToyEnv,
    state: &mut Vec<Token>,
    policy: &dyn Policy,
    reference: &dyn Policy,
    beta: f64,
    gamma: f64,
    out: &mut OracleResult,
) -> (f64, f64) {
    if env.is_terminal(state) {
        let r = env.reward(env.response(state));
        out.state_values.insert(state.clone(), r);
        return (r, r);
    }
    let is_root = state.len() == env.prompt_len;
    let rewards = edge_rewards(env, state, policy, reference, beta);
    let mut action_values = Vec::with_capacity(env.vocab_size);
    let mut worst = f64::INFINITY;
    for a in 0..env.vocab_size {
        state.push(a as Token);
        let (b, w) = induct(env, state, policy, reference, beta, gamma, out);
        state.pop();
        action_values.push((a as Token, rewards[a] + gamma * b));
        worst = worst.min(rewards[a] + gamma * w);
    }
    let (best_action, best) =
        crate::math::argmax_by_token(action_values.iter().copied()).expect("vocab >= 2");
    out.state_values.insert(state.clone(), best);
    out.optimal_action_per_state.insert(state.clone(), best_action);
    if is_root {
        let mut sorted: Vec<f64> = action_values.iter().map(|(_, v)| *v).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        out.return_gap = sorted.get(1).map_or(f64::INFINITY, |second| sorted[0] - second);
        out.root_action_values = action_values;
    }
    (best, worst)
}

/// Fraction of responses whose reward is at least `threshold`.
pub fn goal_rate(outputs: &[Vec<Token>], env: &ToyEnv, threshold: f64) -> Result<f64, EnvError> {
    if outputs.is_empty() {
        return Err(EnvError::EmptyOutputs);
    }
    let hits = outputs
        .iter()
        .filter(|r| env.reward(r) >= threshold)
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::HashedLogits;

    fn bandit(r0: f64, r1: f64) -> ToyEnv {
        // weighted-bag over a single token is exactly a two-armed bandit
        ToyEnv::new(2, 1, RewardSpec::WeightedBag { weights: vec![r0, r1] })
    }

    #[test]
    fn end_with_zero_suffix_env() {
        let env = ToyEnv::new(4, 2, RewardSpec::SuffixMatch { suffix: vec![0] });
        assert_eq!(env.terminal_reward(&[3, 0]).unwrap(), 1.0);
        assert_eq!(env.terminal_reward(&[3, 2]).unwrap(), 0.0);
        assert_eq!(env.terminal_reward(&[3]), Err(EnvError::NotTerminal));
    }

    #[test]
    fn lexical_presence_matches_membership() {
        let env = ToyEnv::new(6, 3, RewardSpec::TargetTokenCount { token: 4, target: 1 });
        for a in 0..6u32 {
            for b in 0..6u32 {
                for c in 0..6u32 {
                    let s = [a, b, c];
                    let expected = if s.contains(&4) { 1.0 } else { 0.0 };
                    assert_eq!(env.terminal_reward(&s).unwrap(), expected);
                }
            }
        }
    }

    #[test]
    fn suffix_partial_match() {
        let env = ToyEnv::new(4, 4, RewardSpec::SuffixMatch { suffix: vec![1, 2, 3] });
        assert_eq!(env.reward(&[0, 1, 2, 3]), 1.0);
        assert!((env.reward(&[0, 0, 2, 3]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(env.reward(&[3, 2, 1, 0]), 0.0);
    }

    #[test]
    fn sentiment_counts_lower_half() {
        let env = ToyEnv::new(6, 4, RewardSpec::SentimentProxy);
        assert_eq!(env.reward(&[0, 1, 2, 5]), 0.75);
        assert_eq!(env.reward(&[3, 4, 5, 3]), 0.0);
    }

    #[test]
    fn eos_terminates_and_is_excluded_from_content() {
        let env = ToyEnv::new(4, 5, RewardSpec::SentimentProxy).with_eos(3);
        assert!(env.is_terminal(&[0, 3]));
        assert!(!env.is_terminal(&[0, 2]));
        assert_eq!(env.reward(&[0, 2, 3]), 0.5);
        assert_eq!(env.check_state(&[3, 0]), Err(EnvError::TokenAfterEos));
    }

    #[test]
    fn random_table_is_reproducible_and_bounded() {
        let spec = RewardSpec::RandomTable { seed: 5, low: -2.0, high: 3.0 };
        let a = ToyEnv::new(3, 3, spec.clone());
        let b = ToyEnv::new(3, 3, spec);
        for s in [[0, 1, 2], [2, 2, 2], [1, 0, 0]] {
            let r = a.reward(&s);
            assert_eq!(r, b.reward(&s));
            assert!((-2.0..=3.0).contains(&r));
        }
    }

    #[test]
    fn state_checks() {
        let env = ToyEnv::new(3, 2, RewardSpec::SentimentProxy).with_prompt_len(1);
        assert!(env.check_state(&[0, 1, 2]).is_ok());
        assert!(matches!(env.check_state(&[0, 3]), Err(EnvError::InvalidToken { .. })));
        assert!(matches!(env.check_state(&[0, 1, 1, 1]), Err(EnvError::TooLong { .. })));
        assert!(matches!(env.check_state(&[]), Err(EnvError::PromptTooShort { .. })));
        assert!(matches!(env.check_prompt(&[]), Err(EnvError::PromptLength { .. })));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(ToyEnv::new(1, 2, RewardSpec::SentimentProxy).validate().is_err());
        assert!(ToyEnv::new(4, 2, RewardSpec::WeightedBag { weights: vec![0.5; 3] })
            .validate()
            .is_err());
        assert!(ToyEnv::new(4, 2, RewardSpec::TargetTokenCount { token: 1, target: 3 })
            .validate()
            .is_err());
    }

    #[test]
    fn bandit_oracle() {
        let env = bandit(0.3, 0.9);
        let u = HashedLogits::uniform(2);
        let o = enumerate_returns(&env, &[], &u, &u, 0.0, 1.0).unwrap();
        assert_eq!(o.best_root_action(), 1);
        assert!((o.return_gap - 0.6).abs() < 1e-12);
        assert!((o.best_return - 0.9).abs() < 1e-12);
        assert!((o.worst_return - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_ignores_policy() {
        let env = ToyEnv::new(3, 3, RewardSpec::RandomTable { seed: 2, low: 0.0, high: 1.0 });
        let u = HashedLogits::uniform(3);
        let p = HashedLogits::new(3, 9, 3.0);
        let a = enumerate_returns(&env, &[], &p, &u, 0.0, 1.0).unwrap();
        let b = enumerate_returns(&env, &[], &u, &u, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_large_instance_is_rejected() {
        let env = ToyEnv::new(64, 8, RewardSpec::SentimentProxy);
        let u = HashedLogits::uniform(64);
        assert!(matches!(
            enumerate_returns(&env, &[], &u, &u, 0.0, 1.0),
            Err(EnvError::TooLarge { .. })
        ));
    }

    #[test]
    fn goal_rate_counts() {
        let env = ToyEnv::new(4, 2, RewardSpec::SentimentProxy);
        assert_eq!(goal_rate(&[vec![0, 1], vec![0, 0]], &env, 0.5).unwrap(), 1.0);
        assert_eq!(goal_rate(&[], &env, 0.5), Err(EnvError::EmptyOutputs));
        let batch = vec![vec![0, 1], vec![0, 3], vec![2, 3], vec![3, 2], vec![1, 2]];
        // rewards 1.0, 0.5, 0.0, 0.0, 0.5
        assert_eq!(goal_rate(&batch, &env, 0.5).unwrap(), 3.0 / 5.0);
        assert_eq!(goal_rate(&batch, &env, 0.75).unwrap(), 1.0 / 5.0);
    }
}
