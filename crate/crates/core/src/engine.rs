//! Value-guided MCTS: select with PUCT, expand with tempered top-k priors,
//! evaluate with the value model (initializing child `Q` from `V`), back up
//! KL-penalized `Q` and visit-weighted `V̄`, and decode from visit counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::evaluator::{EvalError, Evaluator, EvaluatorOutput, ScoredAction};
use crate::math::log_softmax;
use crate::tree::{NodeId, SearchTree, TreeError};
use crate::Token;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("evaluator failed: {0}")]
    Eval(#[from] EvalError),
    #[error("node {0} is terminal and cannot be expanded")]
    ExpandTerminal(NodeId),
    #[error("node {0} is already expanded")]
    AlreadyExpanded(NodeId),
    #[error("node {0} was already evaluated")]
    AlreadyEvaluated(NodeId),
    #[error("node {0} has no children to select from")]
    Unexpanded(NodeId),
    #[error("root must be expanded and evaluated before running simulations")]
    RootNotEvaluated,
    #[error("evaluator returned no actions for nonterminal state at node {0}")]
    EmptyPriors(NodeId),
    #[error("evaluator returned token {token} twice")]
    DuplicateAction { token: Token },
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    VocabularyMismatch { token: Token, vocab_size: usize },
    #[error("node {0} has no reference log-prob; exact Q needs a reference policy")]
    MissingReference(NodeId),
    #[error("all visit counts are zero")]
    NoVisits,
}

/// Search and decoding hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Simulations per decoded token (`S`).
    pub num_simulations: usize,
    /// Children linked per expansion (`k`).
    pub branching: usize,
    pub c_puct: f64,
    /// Temperature on visit counts when decoding; 0 means argmax.
    pub tau_d: f64,
    /// Temperature on policy priors at expansion.
    pub tau_e: f64,
    /// KL coefficient of the step reward.
    pub beta: f64,
    pub gamma: f64,
    pub max_new_tokens: usize,
    pub q_init_from_v: bool,
    pub approx_terminal_reward_with_value: bool,
    pub approx_q_with_v: bool,
    /// Linearly anneal `tau_d` to zero over `max_new_tokens`.
    pub anneal_tau_d: bool,
    pub decode_top_p: Option<f64>,
    pub seed: u64,
    /// Carry the chosen child's subtree into the next token's search.
    pub reuse_subtree: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            num_simulations: 50,
            branching: 50,
            c_puct: 8.0,
            tau_d: 2.0,
            tau_e: 2.0,
            beta: 0.15,
            gamma: 1.0,
            max_new_tokens: 20,
            q_init_from_v: true,
            approx_terminal_reward_with_value: false,
            approx_q_with_v: false,
            anneal_tau_d: true,
            decode_top_p: None,
            seed: 0,
            reuse_subtree: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_simulations < 1 {
            return Err(ConfigError::field("num_simulations", "must be at least 1"));
        }
        if self.branching < 1 {
            return Err(ConfigError::field("branching", "must be at least 1"));
        }
        if !(self.c_puct.is_finite() && self.c_puct > 0.0) {
            return Err(ConfigError::field("c_puct", format!("must be positive, got {}", self.c_puct)));
        }
        if !(self.tau_d.is_finite() && self.tau_d >= 0.0) {
            return Err(ConfigError::field("tau_d", format!("must be non-negative, got {}", self.tau_d)));
        }
        if !(self.tau_e.is_finite() && self.tau_e > 0.0) {
            return Err(ConfigError::field("tau_e", format!("must be positive, got {}", self.tau_e)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ConfigError::field("beta", format!("must be non-negative, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::field("gamma", format!("must be in (0, 1], got {}", self.gamma)));
        }
        if self.max_new_tokens < 1 {
            return Err(ConfigError::field("max_new_tokens", "must be at least 1"));
        }
        if let Some(p) = self.decode_top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ConfigError::field("decode_top_p", format!("must be in (0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Decode temperature for the `step`-th token (0-based).
    pub fn tau_d_at(&self, step: usize) -> f64 {
        if self.anneal_tau_d {
            self.tau_d * (1.0 - step as f64 / self.max_new_tokens as f64).max(0.0)
        } else {
            self.tau_d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub tokens: Vec<Token>,
    /// Root visit distribution used for each decoded token, by ascending token.
    pub per_step_visit_distributions: Vec<Vec<(Token, f64)>>,
    /// Number of `evaluate_state` calls issued.
    pub evaluator_call_count: usize,
    /// Root `V̄` when each token was chosen.
    pub root_values: Vec<f64>,
}

/// Edge statistics seen by the PUCT rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PuctCandidate {
    pub token: Token,
    pub prior: f64,
    pub q: f64,
    pub visits: u32,
}

pub fn puct_score(c: &PuctCandidate, parent_visits: u32, c_puct: f64) -> f64 {
    c.q + c_puct * c.prior * f64::from(parent_visits).sqrt() / (1.0 + f64::from(c.visits))
}

/// Index of `argmax_a Q(s,a) + c_puct p(a|s) √N(s) / (1 + N(s'))`; ties go to
/// the smallest token. `None` when there are no candidates.
pub fn puct_select(candidates: &[PuctCandidate], parent_visits: u32, c_puct: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = puct_score(c, parent_visits, c_puct);
        best = match best {
            None => Some((i, s)),
            Some((bi, bs)) if s > bs || (s == bs && c.token < candidates[bi].token) => Some((i, s)),
            keep => keep,
        };
    }
    best.map(|(i, _)| i)
}

/// Per-step reward: `-β (ln p - ln p_ref)`, plus the final reward on the last step.
pub fn step_reward(policy_logprob: f64, ref_logprob: f64, beta: f64, terminal_reward: Option<f64>) -> f64 {
    -beta * (policy_logprob - ref_logprob) + terminal_reward.unwrap_or(0.0)
}

/// Links the top-`k` actions of `output` as unexplored children of `node`.
///
/// Priors are `p^(1/τ_e)` renormalized over the kept actions. Truncating
/// before tempering gives the same distribution as tempering over the full
/// vocabulary first, and makes full-vocabulary and top-k evaluators agree
/// bit for bit.
pub fn expand(
    tree: &mut SearchTree,
    node: NodeId,
    output: &EvaluatorOutput,
    tau_e: f64,
    k: usize,
) -> Result<(), EngineError> {
    let n = tree.node(node)?;
    if n.is_terminal {
        return Err(EngineError::ExpandTerminal(node));
    }
    if n.is_expanded {
        return Err(EngineError::AlreadyExpanded(node));
    }
    if output.actions.is_empty() {
        return Err(EngineError::EmptyPriors(node));
    }
    let mut actions: Vec<&ScoredAction> = output.actions.iter().collect();
    actions.sort_by(|a, b| {
        b.policy_logprob
            .total_cmp(&a.policy_logprob)
            .then(a.token.cmp(&b.token))
    });
    let mut seen = std::collections::HashSet::new();
    if let Some(a) = actions.iter().find(|a| !seen.insert(a.token)) {
        return Err(EngineError::DuplicateAction { token: a.token });
    }
    actions.truncate(k);
    let tempered: Vec<f64> = actions.iter().map(|a| a.policy_logprob / tau_e).collect();
    let priors = log_softmax(&tempered);
    for (a, lp) in actions.iter().zip(priors) {
        tree.add_child(node, a.token, lp.exp(), a.policy_logprob, a.ref_logprob)?;
    }
    tree.node_mut(node)?.is_expanded = true;
    Ok(())
}

/// Marks `node` evaluated with value `value`: `N ← 1`, `V̄ ← value`, and each
/// child edge's `Q` set to `value` (or 0 without `q_init_from_v`).
pub fn evaluate(tree: &mut SearchTree, node: NodeId, value: f64, q_init_from_v: bool) -> Result<(), EngineError> {
    let n = tree.node_mut(node)?;
    if n.is_evaluated() {
        return Err(EngineError::AlreadyEvaluated(node));
    }
    n.visit_count = 1;
    n.mean_value = value;
    let q0 = if q_init_from_v { value } else { 0.0 };
    for e in &mut n.edges {
        e.q = q0;
    }
    Ok(())
}

/// Bottom-up update from `leaf` to the root. For each ancestor `s` with
/// on-path child `s̃` via `ã`:
/// `Q(s,ã) ← r(s,ã) + γ V̄(s̃)` (or `V̄(s̃)` when approximating),
/// `V̄(s) ← Σ N(s') Q(s,a) / Σ N(s')`, then `N(s) ← N(s) + 1`.
pub fn backup(tree: &mut SearchTree, leaf: NodeId, config: &DecodeConfig) -> Result<(), EngineError> {
    let mut cur = leaf;
    while let Some(parent) = tree.node(cur)?.parent {
        let child = tree.node(cur)?;
        let token = child.token.expect("non-root nodes carry a token");
        let q = if config.approx_q_with_v {
            child.mean_value
        } else {
            let r = child.ref_logprob.ok_or(EngineError::MissingReference(cur))?;
            step_reward(child.policy_logprob, r, config.beta, None) + config.gamma * child.mean_value
        };
        let p = tree.node(parent)?;
        let mut weighted = 0.0;
        let mut total = 0.0;
        let mut slot = None;
        for (i, e) in p.edges.iter().enumerate() {
            let edge_q = if e.token == token {
                slot = Some(i);
                q
            } else {
                e.q
            };
            let visits = f64::from(tree.node(e.child)?.visit_count);
            if visits > 0.0 {
                weighted += visits * edge_q;
                total += visits;
            }
        }
        let slot = slot.ok_or(TreeError::InvalidNode(cur))?;
        let p = tree.node_mut(parent)?;
        p.edges[slot].q = q;
        p.mean_value = weighted / total;
        p.visit_count += 1;
        cur = parent;
    }
    Ok(())
}

/// `p(a) ∝ N(a)^(1/τ_d)` over children with visits, optionally nucleus-truncated.
/// `τ_d = 0` is argmax with ties to the smallest token. Output is sorted by token.
pub fn decode_distribution(
    child_counts: &[(Token, u32)],
    tau_d: f64,
    top_p: Option<f64>,
) -> Result<Vec<(Token, f64)>, EngineError> {
    let mut visited: Vec<(Token, u32)> = child_counts.iter().copied().filter(|(_, n)| *n > 0).collect();
    if visited.is_empty() {
        return Err(EngineError::NoVisits);
    }
    visited.sort_by_key(|(t, _)| *t);
    if tau_d == 0.0 {
        let (best, _) = crate::math::argmax_by_token(visited.iter().map(|&(t, n)| (t, f64::from(n))))
            .expect("non-empty");
        return Ok(vec![(best, 1.0)]);
    }
    let logw: Vec<f64> = visited.iter().map(|(_, n)| f64::from(*n).ln() / tau_d).collect();
    let probs: Vec<f64> = log_softmax(&logw).into_iter().map(f64::exp).collect();
    let mut dist: Vec<(Token, f64)> = visited.iter().map(|(t, _)| *t).zip(probs).collect();
    if let Some(p) = top_p {
        dist = nucleus(dist, p);
    }
    Ok(dist)
}

/// Keeps the smallest highest-probability prefix whose mass reaches `p`,
/// renormalized, sorted by token. Probability ties rank the smaller token first.
pub fn nucleus(mut dist: Vec<(Token, f64)>, p: f64) -> Vec<(Token, f64)> {
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = dist.len();
    for (i, (_, q)) in dist.iter().enumerate() {
        cum += q;
        if cum >= p {
            keep = i + 1;
            break;
        }
    }
    dist.truncate(keep);
    let total: f64 = dist.iter().map(|(_, q)| q).sum();
    for (_, q) in &mut dist {
        *q /= total;
    }
    dist.sort_by_key(|(t, _)| *t);
    dist
}

/// Draws a token from a distribution; single-entry distributions consume no randomness.
pub fn sample_from<R: Rng + ?Sized>(dist: &[(Token, f64)], rng: &mut R) -> Token {
    if dist.len() == 1 {
        return dist[0].0;
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(t, p) in dist {
        cum += p;
        if u < cum {
            return t;
        }
    }
    dist.last().expect("non-empty distribution").0
}

/// One search over one tree at a time, bound to an evaluator.
pub struct Search<'e, E: Evaluator + ?Sized> {
    config: DecodeConfig,
    evaluator: &'e E,
    vocab_size: usize,
    evaluator_calls: usize,
}

impl<'e, E: Evaluator + ?Sized> Search<'e, E> {
    /// Validates the config and switches on the approximations the
    /// evaluator's capabilities make mandatory.
    pub fn new(mut config: DecodeConfig, evaluator: &'e E) -> Result<Self, EngineError> {
        config.validate()?;
        let caps = evaluator.caps();
        if !caps.has_reference_policy && !config.approx_q_with_v {
            log::warn!("evaluator has no reference policy; approximating Q with V");
            config.approx_q_with_v = true;
        }
        if !caps.has_terminal_reward && !config.approx_terminal_reward_with_value {
            log::warn!("evaluator has no terminal reward; approximating it with the value model");
            config.approx_terminal_reward_with_value = true;
        }
        Ok(Self {
            config,
            evaluator,
            vocab_size: caps.vocabulary_size,
            evaluator_calls: 0,
        })
    }

    /// Effective config, after capability adjustments.
    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn evaluator_calls(&self) -> usize {
        self.evaluator_calls
    }

    fn evaluate_leaf(&mut self, tree: &mut SearchTree, node: NodeId) -> Result<(), EngineError> {
        let state = tree.state(node)?;
        let out = self.evaluator.evaluate_state(&state, self.config.branching)?;
        self.evaluator_calls += 1;
        if let Some(a) = out.actions.iter().find(|a| a.token as usize >= self.vocab_size) {
            return Err(EngineError::VocabularyMismatch {
                token: a.token,
                vocab_size: self.vocab_size,
            });
        }
        let generated = tree.depth_offset() + tree.node(node)?.depth;
        if out.is_terminal_state {
            let value = if self.config.approx_terminal_reward_with_value {
                out.value
            } else {
                self.evaluator.terminal_reward(&state)?
            };
            tree.node_mut(node)?.is_terminal = true;
            evaluate(tree, node, value, self.config.q_init_from_v)
        } else if generated >= self.config.max_new_tokens {
            tree.node_mut(node)?.is_terminal = true;
            evaluate(tree, node, out.value, self.config.q_init_from_v)
        } else {
            expand(tree, node, &out, self.config.tau_e, self.config.branching)?;
            evaluate(tree, node, out.value, self.config.q_init_from_v)
        }
    }

    /// Expands and evaluates the root if that has not happened yet.
    pub fn initialize_root(&mut self, tree: &mut SearchTree) -> Result<(), EngineError> {
        if !tree.node(tree.root())?.is_evaluated() {
            self.evaluate_leaf(tree, tree.root())?;
        }
        Ok(())
    }

    /// Select down to an unexplored or terminal node, evaluate it on first
    /// visit, and back up. Increments the root count exactly once.
    pub fn run_simulation(&mut self, tree: &mut SearchTree) -> Result<(), EngineError> {
        if !tree.node(tree.root())?.is_evaluated() {
            return Err(EngineError::RootNotEvaluated);
        }
        let mut cur = tree.root();
        loop {
            let n = tree.node(cur)?;
            if n.is_terminal || !n.is_evaluated() {
                break;
            }
            let mut candidates = Vec::with_capacity(n.edges.len());
            for e in &n.edges {
                candidates.push(PuctCandidate {
                    token: e.token,
                    prior: e.prior,
                    q: e.q,
                    visits: tree.node(e.child)?.visit_count,
                });
            }
            let idx = puct_select(&candidates, n.visit_count, self.config.c_puct)
                .ok_or(EngineError::Unexpanded(cur))?;
            cur = n.edges[idx].child;
        }
        if tree.node(cur)?.is_evaluated() {
            // terminal revisit: no evaluation, straight to backup
            tree.node_mut(cur)?.visit_count += 1;
        } else {
            self.evaluate_leaf(tree, cur)?;
        }
        backup(tree, cur, &self.config)
    }

    /// Initializes the root and simulates until the root has `S + 1` visits.
    /// A reused subtree already holds some of those visits.
    pub fn search(&mut self, tree: &mut SearchTree) -> Result<(), EngineError> {
        self.initialize_root(tree)?;
        let target = self.config.num_simulations as u32 + 1;
        loop {
            let root = tree.node(tree.root())?;
            if root.is_terminal || root.visit_count >= target {
                return Ok(());
            }
            self.run_simulation(tree)?;
        }
    }

    /// Decodes up to `max_new_tokens` tokens after `prompt`.
    pub fn decode(&mut self, prompt: &[Token]) -> Result<DecodeOutcome, EngineError> {
        if let Some(&t) = prompt.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(EngineError::VocabularyMismatch {
                token: t,
                vocab_size: self.vocab_size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let start_calls = self.evaluator_calls;
        let mut tree = SearchTree::new(prompt.to_vec());
        let mut out = DecodeOutcome {
            tokens: Vec::new(),
            per_step_visit_distributions: Vec::new(),
            evaluator_call_count: 0,
            root_values: Vec::new(),
        };
        for step in 0..self.config.max_new_tokens {
            self.search(&mut tree)?;
            let root = tree.node(tree.root())?;
            if root.is_terminal {
                break;
            }
            let dist = decode_distribution(
                &tree.root_child_counts(),
                self.config.tau_d_at(step),
                self.config.decode_top_p,
            )?;
            let token = sample_from(&dist, &mut rng);
            out.root_values.push(root.mean_value);
            out.per_step_visit_distributions.push(dist);
            out.tokens.push(token);
            let child = tree
                .child_by_token(tree.root(), token)?
                .ok_or(TreeError::NoSuchChild(token))?;
            if tree.node(child)?.is_terminal {
                break;
            }
            tree = if self.config.reuse_subtree {
                tree.detach_subtree(token)?
            } else {
                let mut state = prompt.to_vec();
                state.extend(&out.tokens);
                SearchTree::with_offset(state, step + 1)
            };
        }
        out.evaluator_call_count = self.evaluator_calls - start_calls;
        Ok(out)
    }
}

/// Runs a full MCTS decode of `prompt`.
pub fn decode_sequence<E: Evaluator + ?Sized>(
    prompt: &[Token],
    config: &DecodeConfig,
    evaluator: &E,
) -> Result<DecodeOutcome, EngineError> {
    Search::new(config.clone(), evaluator)?.decode(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(token: Token, prior: f64, q: f64, visits: u32) -> PuctCandidate {
        PuctCandidate { token, prior, q, visits }
    }

    #[test]
    fn unvisited_equal_q_picks_highest_prior() {
        let c = [cand(0, 0.2, 0.5, 0), cand(1, 0.5, 0.5, 0), cand(2, 0.3, 0.5, 0)];
        assert_eq!(puct_select(&c, 1, 1.5), Some(1));
    }

    #[test]
    fn zero_c_puct_is_greedy_in_q() {
        let c = [cand(0, 0.9, 0.1, 0), cand(1, 0.05, 0.7, 50), cand(2, 0.05, 0.3, 1)];
        assert_eq!(puct_select(&c, 52, 0.0), Some(1));
    }

    #[test]
    fn puct_ties_go_to_smallest_token() {
        let c = [cand(4, 0.5, 0.0, 0), cand(2, 0.5, 0.0, 0)];
        assert_eq!(puct_select(&c, 3, 1.0), Some(1));
        assert_eq!(puct_select(&[], 3, 1.0), None);
    }

    #[test]
    fn puct_scalar_oracle() {
        // priors [0.6,0.3,0.1], Q [0.2,0.9,0.5], counts [4,1,0], N(s)=6, c=2
        let c = [cand(0, 0.6, 0.2, 4), cand(1, 0.3, 0.9, 1), cand(2, 0.1, 0.5, 0)];
        let oracle = |p: f64, q: f64, n: f64| q + 2.0 * p * 6f64.sqrt() / (1.0 + n);
        let scores = [oracle(0.6, 0.2, 4.0), oracle(0.3, 0.9, 1.0), oracle(0.1, 0.5, 0.0)];
        let want = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        // 0.78788..., 1.63485..., 0.98990...
        assert_eq!(want, 1);
        assert_eq!(puct_select(&c, 6, 2.0), Some(want));
    }

    #[test]
    fn step_reward_cases() {
        assert_eq!(step_reward(-0.7, -0.7, 0.15, None), 0.0);
        assert_eq!(step_reward(-0.7, -0.7, 0.15, Some(1.0)), 1.0);
        let r = step_reward(0.8f64.ln(), 0.4f64.ln(), 0.15, None);
        assert!((r - (-0.15 * 2f64.ln())).abs() < 1e-15);
        assert!((r + 0.10397).abs() < 1e-5);
    }

    #[test]
    fn decode_distribution_normalizes_counts() {
        let d = decode_distribution(&[(0, 30), (1, 15), (2, 5)], 1.0, None).unwrap();
        for ((_, p), want) in d.iter().zip([0.6, 0.3, 0.1]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_distribution_square_roots() {
        let d = decode_distribution(&[(0, 9), (1, 4), (2, 1)], 2.0, None).unwrap();
        for ((_, p), want) in d.iter().zip([0.5, 1.0 / 3.0, 1.0 / 6.0]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_distribution_zero_temperature_tie() {
        let d = decode_distribution(&[(4, 7), (1, 7), (0, 2)], 0.0, None).unwrap();
        assert_eq!(d, vec![(1, 1.0)]);
    }

    #[test]
    fn decode_distribution_rejects_all_zero() {
        assert!(matches!(decode_distribution(&[(0, 0), (1, 0)], 1.0, None), Err(EngineError::NoVisits)));
    }

    #[test]
    fn decode_distribution_skips_unvisited_and_truncates() {
        let d = decode_distribution(&[(0, 6), (1, 3), (2, 1), (3, 0)], 1.0, Some(0.5)).unwrap();
        assert_eq!(d, vec![(0, 1.0)]);
        let d = decode_distribution(&[(0, 6), (1, 3), (2, 1), (3, 0)], 1.0, Some(0.8)).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn annealing_schedule() {
        let c = DecodeConfig {
            tau_d: 2.0,
            max_new_tokens: 20,
            anneal_tau_d: true,
            ..DecodeConfig::default()
        };
        assert_eq!(c.tau_d_at(0), 2.0);
        assert_eq!(c.tau_d_at(10), 1.0);
        assert_eq!(c.tau_d_at(20), 0.0);
        let flat = DecodeConfig { anneal_tau_d: false, ..c };
        assert_eq!(flat.tau_d_at(19), 2.0);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = DecodeConfig { gamma: 0.0, ..DecodeConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("gamma"));
        let bad = DecodeConfig { tau_e: 0.0, ..DecodeConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("tau_e"));
        let bad = DecodeConfig { num_simulations: 0, ..DecodeConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("num_simulations"));
    }

    #[test]
    fn config_reads_toml_field_names() {
        let text = r#"
            num_simulations = 10
            branching = 4
            c_puct = 1.5
            tau_d = 0.0
            tau_e = 1.0
            beta = 0.1
            gamma = 0.9
            max_new_tokens = 6
            q_init_from_v = false
            approx_terminal_reward_with_value = true
            approx_q_with_v = true
            anneal_tau_d = false
            decode_top_p = 0.9
            seed = 7
        "#;
        let c: DecodeConfig = crate::config::parse_str(text, "inline").unwrap();
        assert_eq!(c.num_simulations, 10);
        assert_eq!(c.decode_top_p, Some(0.9));
        assert!(c.approx_q_with_v && !c.q_init_from_v);
        let err = crate::config::parse_str::<DecodeConfig>("bogus = 1", "inline").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
