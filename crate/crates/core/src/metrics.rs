//! Automatic metrics over decoded samples, grouped by prompt.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::env::{EnvError, ToyEnv};
use crate::policy::Policy;
use crate::Token;

/// All samples decoded for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSamples {
    pub prompt: Vec<Token>,
    pub samples: Vec<Vec<Token>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_reward: f64,
    /// Per-prompt maximum reward over its samples, averaged over prompts.
    pub max_reward_over_n: f64,
    /// Fraction of samples with reward at or above the goal threshold.
    pub goal_rate: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    /// Perplexity of the samples under the reference policy, averaged per sequence.
    pub ref_perplexity: f64,
    pub samples_per_prompt: usize,
}

/// Unique n-grams over total n-grams, pooled across `samples`. Sequences
/// shorter than `n` are skipped; `None` when no sequence is long enough.
pub fn distinct_n(samples: &[Vec<Token>], n: usize) -> Option<f64> {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in samples.iter().filter(|s| s.len() >= n) {
        for g in s.windows(n) {
            seen.insert(g);
            total += 1;
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

/// `exp` of the mean negative log-likelihood of `response` after `prompt`.
pub fn perplexity(reference: &dyn Policy, prompt: &[Token], response: &[Token]) -> f64 {
    if response.is_empty() {
        return 1.0;
    }
    let mut state = prompt.to_vec();
    let mut nll = 0.0;
    for &t in response {
        nll -= reference.log_probs(&state)[t as usize];
        state.push(t);
    }
    (nll / response.len() as f64).exp()
}

fn mean_over(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_metrics(
    outputs: &[PromptSamples],
    env: &ToyEnv,
    reference: &dyn Policy,
    goal_threshold: f64,
) -> Result<MetricsReport, EnvError> {
    let all: Vec<&Vec<Token>> = outputs.iter().flat_map(|o| &o.samples).collect();
    if all.is_empty() {
        return Err(EnvError::EmptyOutputs);
    }
    let rewards: Vec<f64> = all.iter().map(|s| env.reward(s)).collect();
    let per_prompt_max = outputs
        .iter()
        .filter(|o| !o.samples.is_empty())
        .map(|o| o.samples.iter().map(|s| env.reward(s)).fold(f64::NEG_INFINITY, f64::max));
    let distinct = |n| mean_over(outputs.iter().filter_map(|o| distinct_n(&o.samples, n)));
    let ppl = mean_over(
        outputs
            .iter()
            .flat_map(|o| o.samples.iter().map(move |s| perplexity(reference, &o.prompt, s))),
    );
    Ok(MetricsReport {
        mean_reward: mean_over(rewards.iter().copied()),
        max_reward_over_n: mean_over(per_prompt_max),
        goal_rate: rewards.iter().filter(|&&r| r >= goal_threshold).count() as f64 / rewards.len() as f64,
        distinct_2: distinct(2),
        distinct_3: distinct(3),
        ref_perplexity: ppl,
        samples_per_prompt: outputs.iter().map(|o| o.samples.len()).max().unwrap_or(0),
    })
}
