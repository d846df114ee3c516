#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use valdec_core::{
    enumerate_returns, make_ground_truth_evaluator, HashedLogits, OracleResult, Policy, RewardSpec, TabularEvaluator,
    ToyEnv,
};

/// A fine-tuned policy: reference logits plus an independent perturbation.
#[derive(Clone, Debug)]
pub struct Tilted {
    pub base: HashedLogits,
    pub tilt: HashedLogits,
}

impl Policy for Tilted {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size
    }

    fn logits(&self, state: &[u32]) -> Vec<f64> {
        let t = self.tilt.logits(state);
        self.base.logits(state).into_iter().zip(t).map(|(a, b)| a + b).collect()
    }
}

/// A random tabular instance with its policy, reference and KL coefficient.
pub struct Instance {
    pub env: ToyEnv,
    pub policy: Tilted,
    pub reference: HashedLogits,
    pub beta: f64,
}

impl Instance {
    pub fn oracle(&self, gamma: f64) -> OracleResult {
        enumerate_returns(&self.env, &[], &self.policy, &self.reference, self.beta, gamma).unwrap()
    }

    pub fn ground_truth(&self, gamma: f64) -> TabularEvaluator {
        let p: Arc<dyn Policy> = Arc::new(self.policy.clone());
        let r: Arc<dyn Policy> = Arc::new(self.reference.clone());
        make_ground_truth_evaluator(&self.env, p, r, self.beta, gamma).unwrap()
    }

    pub fn leaves(&self) -> usize {
        self.env.sequence_count() as usize
    }
}

pub fn random_reward<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> RewardSpec {
    match rng.gen_range(0..4) {
        0 => RewardSpec::RandomTable {
            seed: rng.gen(),
            low: 0.0,
            high: 1.0,
        },
        1 => RewardSpec::TargetTokenCount {
            token: rng.gen_range(0..vocab) as u32,
            target: rng.gen_range(1..=len),
        },
        2 => RewardSpec::SuffixMatch {
            suffix: (0..rng.gen_range(1..=len)).map(|_| rng.gen_range(0..vocab) as u32).collect(),
        },
        _ => RewardSpec::WeightedBag {
            weights: (0..vocab).map(|_| rng.gen::<f64>()).collect(),
        },
    }
}

pub fn random_instance<R: Rng>(rng: &mut R, max_vocab: usize, max_len: usize) -> Instance {
    let vocab = rng.gen_range(2..=max_vocab);
    let len = rng.gen_range(1..=max_len);
    let reward = random_reward(rng, vocab, len);
    let reference = HashedLogits::new(vocab, rng.gen(), rng.gen_range(0.3..1.5));
    let tilt = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.1..0.5) };
    let policy = Tilted {
        base: reference.clone(),
        tilt: HashedLogits::new(vocab, rng.gen(), tilt),
    };
    let beta = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.01..0.3) };
    Instance {
        env: ToyEnv::new(vocab, len, reward),
        policy,
        reference,
        beta,
    }
}
