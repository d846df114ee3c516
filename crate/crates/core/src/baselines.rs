//! Reference decoders: nucleus sampling, greedy, best-of-n reranked by the
//! value model, and one-step value reranking without a tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{nucleus, sample_from};
use crate::evaluator::{EvalError, Evaluator, EvaluatorOutput, ScoredAction};
use crate::math::{argmax_by_token, log_softmax};
use crate::Token;

/// Generated tokens plus the number of `evaluate_state` calls spent on them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<Token>,
    pub evaluator_calls: usize,
}

fn top_actions(out: &EvaluatorOutput, k: usize) -> Vec<&ScoredAction> {
    let mut actions: Vec<&ScoredAction> = out.actions.iter().collect();
    actions.sort_by(|a, b| {
        b.policy_logprob
            .total_cmp(&a.policy_logprob)
            .then(a.token.cmp(&b.token))
    });
    actions.truncate(k);
    actions
}

fn nucleus_step<R: Rng + ?Sized>(out: &EvaluatorOutput, p: f64, temperature: f64, rng: &mut R) -> Token {
    if temperature == 0.0 {
        let (t, _) = argmax_by_token(out.actions.iter().map(|a| (a.token, a.policy_logprob))).expect("non-empty");
        return t;
    }
    let scaled: Vec<f64> = out.actions.iter().map(|a| a.policy_logprob / temperature).collect();
    let dist: Vec<(Token, f64)> = out
        .actions
        .iter()
        .zip(log_softmax(&scaled))
        .map(|(a, lp)| (a.token, lp.exp()))
        .collect();
    sample_from(&nucleus(dist, p), rng)
}

fn nucleus_with_rng<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    evaluator: &E,
    prompt: &[Token],
    p: f64,
    temperature: f64,
    max_new_tokens: usize,
    rng: &mut R,
) -> Result<Generation, EvalError> {
    let vocab = evaluator.caps().vocabulary_size;
    let mut state = prompt.to_vec();
    let mut calls = 0;
    for _ in 0..max_new_tokens {
        let out = evaluator.evaluate_state(&state, vocab)?;
        calls += 1;
        if out.is_terminal_state || out.actions.is_empty() {
            break;
        }
        state.push(nucleus_step(&out, p, temperature, rng));
    }
    Ok(Generation {
        tokens: state[prompt.len()..].to_vec(),
        evaluator_calls: calls,
    })
}

/// Nucleus sampling from the policy priors at `temperature`; zero
/// temperature is greedy decoding.
pub fn sample_top_p<E: Evaluator + ?Sized>(
    evaluator: &E,
    prompt: &[Token],
    p: f64,
    temperature: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<Generation, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nucleus_with_rng(evaluator, prompt, p, temperature, max_new_tokens, &mut rng)
}

pub fn greedy<E: Evaluator + ?Sized>(
    evaluator: &E,
    prompt: &[Token],
    max_new_tokens: usize,
) -> Result<Generation, EvalError> {
    sample_top_p(evaluator, prompt, 1.0, 0.0, max_new_tokens, 0)
}

/// Draws `n` nucleus samples and keeps the one whose complete sequence the
/// value model scores highest; ties keep the earliest draw.
pub fn best_of_n<E: Evaluator + ?Sized>(
    evaluator: &E,
    prompt: &[Token],
    n: usize,
    p: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<Generation, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<Token>, f64)> = None;
    let mut calls = 0;
    for _ in 0..n.max(1) {
        let g = nucleus_with_rng(evaluator, prompt, p, 1.0, max_new_tokens, &mut rng)?;
        let mut full = prompt.to_vec();
        full.extend(&g.tokens);
        let score = evaluator.evaluate_state(&full, 0)?.value;
        calls += g.evaluator_calls + 1;
        if best.as_ref().map_or(true, |(_, s)| score > *s) {
            best = Some((g.tokens, score));
        }
    }
    Ok(Generation {
        tokens: best.expect("n >= 1").0,
        evaluator_calls: calls,
    })
}

/// Per token: value each of the top-`k` one-step extensions and sample from
/// `softmax(V / τ)`, with `τ` annealed linearly to zero over `max_new_tokens`.
/// The chosen child's evaluation supplies the next step's priors, so the
/// cost is one call for the prompt plus `k` per token.
pub fn stepwise_value<E: Evaluator + ?Sized>(
    evaluator: &E,
    prompt: &[Token],
    k: usize,
    tau: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<Generation, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = evaluator.caps().vocabulary_size;
    let mut state = prompt.to_vec();
    let mut out = evaluator.evaluate_state(&state, vocab)?;
    let mut calls = 1;
    for t in 0..max_new_tokens {
        if out.is_terminal_state || out.actions.is_empty() {
            break;
        }
        let mut children = Vec::new();
        for a in top_actions(&out, k.max(1)) {
            state.push(a.token);
            let child = evaluator.evaluate_state(&state, vocab)?;
            state.pop();
            calls += 1;
            children.push((a.token, child));
        }
        let tau_t = tau * (1.0 - t as f64 / max_new_tokens as f64).max(0.0);
        let token = if tau_t == 0.0 || children.len() == 1 {
            argmax_by_token(children.iter().map(|(t, c)| (*t, c.value))).expect("non-empty").0
        } else {
            let logits: Vec<f64> = children.iter().map(|(_, c)| c.value / tau_t).collect();
            let dist: Vec<(Token, f64)> = children
                .iter()
                .zip(log_softmax(&logits))
                .map(|((t, _), lp)| (*t, lp.exp()))
                .collect();
            sample_from(&dist, &mut rng)
        };
        state.push(token);
        out = children
            .into_iter()
            .find(|(t, _)| *t == token)
            .expect("chosen among children")
            .1;
    }
    Ok(Generation {
        tokens: state[prompt.len()..].to_vec(),
        evaluator_calls: calls,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::{RewardSpec, ToyEnv};
    use crate::evaluator::{make_ground_truth_evaluator, TabularEvaluator, ValueTable};
    use crate::policy::{HashedLogits, Policy};

    fn env() -> ToyEnv {
        ToyEnv::new(4, 3, RewardSpec::SentimentProxy)
    }

    fn policy() -> Arc<dyn Policy> {
        Arc::new(HashedLogits::new(4, 11, 1.5))
    }

    fn ground_truth() -> TabularEvaluator {
        let p = policy();
        make_ground_truth_evaluator(&env(), p.clone(), p, 0.0, 1.0).unwrap()
    }

    #[test]
    fn greedy_follows_argmax_prior() {
        let ev = ground_truth();
        let g = greedy(&ev, &[], 3).unwrap();
        let mut state = vec![];
        for &t in &g.tokens {
            let lp = policy().log_probs(&state);
            let best = (0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(t as usize, best);
            state.push(t);
        }
        assert_eq!(g.tokens.len(), 3);
    }

    #[test]
    fn nucleus_half_keeps_dominant_token() {
        let out = EvaluatorOutput {
            actions: [0.6f64, 0.3, 0.1]
                .iter()
                .enumerate()
                .map(|(i, p)| ScoredAction {
                    token: i as Token,
                    policy_logprob: p.ln(),
                    ref_logprob: None,
                })
                .collect(),
            value: 0.0,
            is_terminal_state: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(nucleus_step(&out, 0.5, 1.0, &mut rng), 0);
        }
    }

    #[test]
    fn best_of_one_is_one_sample() {
        let ev = ground_truth();
        for seed in 0..5 {
            let a = best_of_n(&ev, &[], 1, 0.9, 3, seed).unwrap();
            let b = sample_top_p(&ev, &[], 0.9, 1.0, 3, seed).unwrap();
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn best_of_n_with_ground_truth_takes_max_reward() {
        let ev = ground_truth();
        let e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut best: f64 = 0.0;
        for _ in 0..50 {
            let g = nucleus_with_rng(&ev, &[], 0.9, 1.0, 3, &mut rng).unwrap();
            best = best.max(e.reward(&g.tokens));
        }
        let g = best_of_n(&ev, &[], 50, 0.9, 3, 4).unwrap();
        assert_eq!(e.reward(&g.tokens), best);
    }

    #[test]
    fn best_of_n_ties_keep_first_draw() {
        let e = env();
        let ev = TabularEvaluator::new(e, policy(), Some(policy()), Arc::new(ValueTable::default())).unwrap();
        let a = best_of_n(&ev, &[], 20, 0.9, 3, 8).unwrap();
        let b = sample_top_p(&ev, &[], 0.9, 1.0, 3, 8).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn stepwise_k1_is_greedy() {
        let ev = ground_truth();
        let s = stepwise_value(&ev, &[], 1, 1.0, 3, 0).unwrap();
        assert_eq!(s.tokens, greedy(&ev, &[], 3).unwrap().tokens);
    }

    #[test]
    fn stepwise_zero_tau_picks_best_child_and_counts_calls() {
        let ev = ground_truth();
        let s = stepwise_value(&ev, &[], 3, 0.0, 3, 0).unwrap();
        assert_eq!(s.evaluator_calls, 1 + 3 * s.tokens.len());
        let mut state = vec![];
        for &t in &s.tokens {
            let lp = policy().log_probs(&state);
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            let best = order[..3]
                .iter()
                .map(|&a| {
                    let mut c = state.clone();
                    c.push(a as Token);
                    (a as Token, ev.evaluate_state(&c, 4).unwrap().value)
                })
                .fold(None::<(Token, f64)>, |acc, (a, v)| match acc {
                    Some((ba, bv)) if bv > v || (bv == v && ba < a) => Some((ba, bv)),
                    _ => Some((a, v)),
                })
                .unwrap();
            assert_eq!(t, best.0);
            state.push(t);
        }
    }

    #[test]
    fn samplers_are_seeded() {
        let ev = ground_truth();
        for seed in 0..3 {
            assert_eq!(sample_top_p(&ev, &[], 0.95, 1.0, 3, seed).unwrap(), sample_top_p(&ev, &[], 0.95, 1.0, 3, seed).unwrap());
            assert_eq!(stepwise_value(&ev, &[], 2, 1.0, 3, seed).unwrap(), stepwise_value(&ev, &[], 2, 1.0, 3, seed).unwrap());
        }
    }
}
