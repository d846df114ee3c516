//! The contract through which the search sees a policy, a reference policy,
//! a value model and (optionally) the terminal reward.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, ToyEnv, MAX_ENUMERATION};
use crate::policy::Policy;
use crate::protocol::ProtocolError;
use crate::Token;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("evaluator has no terminal reward")]
    NoTerminalReward,
    #[error("policy vocabulary {policy} does not match env vocabulary {env}")]
    VocabularyMismatch { policy: usize, env: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// One candidate next token with its policy and reference log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub token: Token,
    pub policy_logprob: f64,
    pub ref_logprob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorOutput {
    /// Next-token candidates; empty for terminal states.
    pub actions: Vec<ScoredAction>,
    /// Value-model estimate `V(s)`.
    pub value: f64,
    pub is_terminal_state: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorCaps {
    /// Without a reference policy the KL term is unknown and the search must
    /// approximate `Q(s, a)` by `V̄(s')`.
    pub has_reference_policy: bool,
    /// Without a terminal reward the search must value terminal states with
    /// the value model.
    pub has_terminal_reward: bool,
    pub vocabulary_size: usize,
}

pub trait Evaluator {
    fn caps(&self) -> EvaluatorCaps;

    /// Priors for the next token and the value of `state` (full token
    /// sequence, prompt included). `top_k` is a hint: implementations return
    /// at least the `top_k` most likely actions and may return more.
    fn evaluate_state(&self, state: &[Token], top_k: usize) -> Result<EvaluatorOutput, EvalError>;

    /// Exact reward of a terminal state.
    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn caps(&self) -> EvaluatorCaps {
        (**self).caps()
    }
    fn evaluate_state(&self, state: &[Token], top_k: usize) -> Result<EvaluatorOutput, EvalError> {
        (**self).evaluate_state(state, top_k)
    }
    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError> {
        (**self).terminal_reward(state)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn caps(&self) -> EvaluatorCaps {
        (**self).caps()
    }
    fn evaluate_state(&self, state: &[Token], top_k: usize) -> Result<EvaluatorOutput, EvalError> {
        (**self).evaluate_state(state, top_k)
    }
    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError> {
        (**self).terminal_reward(state)
    }
}

/// A value model over token-prefix states.
pub trait StateValues: Send + Sync {
    fn value(&self, state: &[Token]) -> f64;
}

impl<F> StateValues for F
where
    F: Fn(&[Token]) -> f64 + Send + Sync,
{
    fn value(&self, state: &[Token]) -> f64 {
        self(state)
    }
}

/// Sparse value table; missing states are worth zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueTable(#[serde(with = "crate::policy::state_map")] pub BTreeMap<Vec<Token>, f64>);

impl StateValues for ValueTable {
    fn value(&self, state: &[Token]) -> f64 {
        self.0.get(state).copied().unwrap_or(0.0)
    }
}

/// Affine map applied to env rewards before they reach the search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl RewardNorm {
    pub fn apply(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

/// In-process evaluator over a toy env with full-vocabulary priors.
#[derive(Clone)]
pub struct TabularEvaluator {
    env: ToyEnv,
    policy: Arc<dyn Policy>,
    reference: Option<Arc<dyn Policy>>,
    values: Arc<dyn StateValues>,
    has_terminal_reward: bool,
    reward_norm: Option<RewardNorm>,
}

impl TabularEvaluator {
    pub fn new(
        env: ToyEnv,
        policy: Arc<dyn Policy>,
        reference: Option<Arc<dyn Policy>>,
        values: Arc<dyn StateValues>,
    ) -> Result<Self, EvalError> {
        env.validate()?;
        for p in std::iter::once(&policy).chain(reference.as_ref()) {
            if p.vocab_size() != env.vocab_size {
                return Err(EvalError::VocabularyMismatch {
                    policy: p.vocab_size(),
                    env: env.vocab_size,
                });
            }
        }
        Ok(Self {
            env,
            policy,
            reference,
            values,
            has_terminal_reward: true,
            reward_norm: None,
        })
    }

    /// Hide the env reward, as when the reward model is unavailable at decode time.
    pub fn without_terminal_reward(mut self) -> Self {
        self.has_terminal_reward = false;
        self
    }

    pub fn without_reference(mut self) -> Self {
        self.reference = None;
        self
    }

    pub fn with_reward_norm(mut self, norm: Option<RewardNorm>) -> Self {
        self.reward_norm = norm;
        self
    }

    pub fn env(&self) -> &ToyEnv {
        &self.env
    }

    pub fn policy(&self) -> &Arc<dyn Policy> {
        &self.policy
    }

    pub fn reference(&self) -> Option<&Arc<dyn Policy>> {
        self.reference.as_ref()
    }

    pub fn values(&self) -> &Arc<dyn StateValues> {
        &self.values
    }
}

impl Evaluator for TabularEvaluator {
    fn caps(&self) -> EvaluatorCaps {
        EvaluatorCaps {
            has_reference_policy: self.reference.is_some(),
            has_terminal_reward: self.has_terminal_reward,
            vocabulary_size: self.env.vocab_size,
        }
    }

    fn evaluate_state(&self, state: &[Token], _top_k: usize) -> Result<EvaluatorOutput, EvalError> {
        self.env.check_state(state)?;
        let value = self.values.value(state);
        if self.env.is_terminal(state) {
            return Ok(EvaluatorOutput {
                actions: Vec::new(),
                value,
                is_terminal_state: true,
            });
        }
        let lp = self.policy.log_probs(state);
        let lr = self.reference.as_ref().map(|r| r.log_probs(state));
        let actions = lp
            .iter()
            .enumerate()
            .map(|(i, &p)| ScoredAction {
                token: i as Token,
                policy_logprob: p,
                ref_logprob: lr.as_ref().map(|r| r[i]),
            })
            .collect();
        Ok(EvaluatorOutput {
            actions,
            value,
            is_terminal_state: false,
        })
    }

    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError> {
        if !self.has_terminal_reward {
            return Err(EvalError::NoTerminalReward);
        }
        let r = self.env.terminal_reward(state)?;
        Ok(self.reward_norm.map_or(r, |n| n.apply(r)))
    }
}

/// Exact expected KL-penalized return under a policy, by memoized backward
/// induction: `V(s) = Σ_a p(a|s) [-β ln(p/p_ref) + γ V(s')]`, with terminal
/// states worth their reward.
pub struct GroundTruthValues {
    env: ToyEnv,
    policy: Arc<dyn Policy>,
    reference: Arc<dyn Policy>,
    beta: f64,
    gamma: f64,
    memo: Mutex<HashMap<Vec<Token>, f64>>,
}

impl GroundTruthValues {
    pub fn new(
        env: ToyEnv,
        policy: Arc<dyn Policy>,
        reference: Arc<dyn Policy>,
        beta: f64,
        gamma: f64,
    ) -> Result<Self, EvalError> {
        env.validate()?;
        let count = env.sequence_count();
        if count > MAX_ENUMERATION {
            return Err(EnvError::TooLarge { count }.into());
        }
        Ok(Self {
            env,
            policy,
            reference,
            beta,
            gamma,
            memo: Mutex::new(HashMap::new()),
        })
    }

    fn induct(&self, state: &mut Vec<Token>, memo: &mut HashMap<Vec<Token>, f64>) -> f64 {
        if let Some(&v) = memo.get(state.as_slice()) {
            return v;
        }
        let v = if self.env.is_terminal(state) {
            self.env.reward(self.env.response(state))
        } else {
            let lp = self.policy.log_probs(state);
            let lr = if self.beta != 0.0 {
                self.reference.log_probs(state)
            } else {
                lp.clone()
            };
            let mut total = 0.0;
            for a in 0..self.env.vocab_size {
                let p = lp[a].exp();
                state.push(a as Token);
                let next = self.induct(state, memo);
                state.pop();
                total += p * (-self.beta * (lp[a] - lr[a]) + self.gamma * next);
            }
            total
        };
        memo.insert(state.clone(), v);
        v
    }
}

impl StateValues for GroundTruthValues {
    fn value(&self, state: &[Token]) -> f64 {
        let mut memo = self.memo.lock().unwrap_or_else(|e| e.into_inner());
        let mut s = state.to_vec();
        self.induct(&mut s, &mut memo)
    }
}

/// Evaluator whose values are the exact expected return under `policy`.
pub fn make_ground_truth_evaluator(
    env: &ToyEnv,
    policy: Arc<dyn Policy>,
    reference: Arc<dyn Policy>,
    beta: f64,
    gamma: f64,
) -> Result<TabularEvaluator, EvalError> {
    let values = GroundTruthValues::new(env.clone(), policy.clone(), reference.clone(), beta, gamma)?;
    TabularEvaluator::new(env.clone(), policy, Some(reference), Arc::new(values))
}

/// State-keyed memo in front of another evaluator. Lives for one decode;
/// call [`CachedEvaluator::clear`] between prompts.
pub struct CachedEvaluator<E> {
    inner: E,
    outputs: RefCell<HashMap<(Vec<Token>, usize), EvaluatorOutput>>,
    rewards: RefCell<HashMap<Vec<Token>, f64>>,
    inner_calls: Cell<usize>,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            outputs: RefCell::new(HashMap::new()),
            rewards: RefCell::new(HashMap::new()),
            inner_calls: Cell::new(0),
        }
    }

    /// Calls that reached the wrapped evaluator.
    pub fn inner_calls(&self) -> usize {
        self.inner_calls.get()
    }

    pub fn clear(&self) {
        self.outputs.borrow_mut().clear();
        self.rewards.borrow_mut().clear();
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Evaluator> Evaluator for CachedEvaluator<E> {
    fn caps(&self) -> EvaluatorCaps {
        self.inner.caps()
    }

    fn evaluate_state(&self, state: &[Token], top_k: usize) -> Result<EvaluatorOutput, EvalError> {
        let key = (state.to_vec(), top_k);
        if let Some(out) = self.outputs.borrow().get(&key) {
            return Ok(out.clone());
        }
        self.inner_calls.set(self.inner_calls.get() + 1);
        let out = self.inner.evaluate_state(state, top_k)?;
        self.outputs.borrow_mut().insert(key, out.clone());
        Ok(out)
    }

    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError> {
        if let Some(&r) = self.rewards.borrow().get(state) {
            return Ok(r);
        }
        self.inner_calls.set(self.inner_calls.get() + 1);
        let r = self.inner.terminal_reward(state)?;
        self.rewards.borrow_mut().insert(state.to_vec(), r);
        Ok(r)
    }
}
