//! Next-token distributions over token-prefix states.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::math::{hash_tokens, log_softmax, normal_from_hash};
use crate::Token;

/// A conditional next-token distribution `p(a | s)` over a fixed vocabulary.
pub trait Policy: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Unnormalized scores for every vocabulary entry.
    fn logits(&self, state: &[Token]) -> Vec<f64>;

    fn log_probs(&self, state: &[Token]) -> Vec<f64> {
        log_softmax(&self.logits(state))
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn logits(&self, state: &[Token]) -> Vec<f64> {
        (**self).logits(state)
    }
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn logits(&self, state: &[Token]) -> Vec<f64> {
        (**self).logits(state)
    }
}

/// Synthetic "pretrained" language model: per-state logits drawn from a
/// seeded hash of the state, scaled, plus a fixed per-token bias.
///
/// Every state has logits without any table, so arbitrarily large state
/// spaces cost nothing until touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashedLogits {
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Added to every state's logits; empty means no bias.
    #[serde(default)]
    pub bias: Vec<f64>,
}

fn default_scale() -> f64 {
    1.0
}

impl HashedLogits {
    pub fn new(vocab_size: usize, seed: u64, scale: f64) -> Self {
        Self {
            vocab_size,
            seed,
            scale,
            bias: Vec::new(),
        }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self::new(vocab_size, 0, 0.0)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        self.bias = bias;
        self
    }
}

impl Policy for HashedLogits {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, state: &[Token]) -> Vec<f64> {
        let h = hash_tokens(self.seed, state);
        (0..self.vocab_size)
            .map(|j| {
                let noise = if self.scale == 0.0 {
                    0.0
                } else {
                    self.scale * normal_from_hash(h ^ (j as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
                };
                noise + self.bias.get(j).copied().unwrap_or(0.0)
            })
            .collect()
    }
}

/// A reference model with a sparse table of overridden logits.
///
/// States absent from the table fall back to the reference logits, which is
/// exactly the tabular softmax parameterization initialized at the
/// reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub reference: HashedLogits,
    #[serde(with = "state_map")]
    pub table: BTreeMap<Vec<Token>, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(reference: HashedLogits) -> Self {
        Self {
            reference,
            table: BTreeMap::new(),
        }
    }

    /// Mutable logits for a state, materialized from the reference on first touch.
    pub fn logits_mut(&mut self, state: &[Token]) -> &mut Vec<f64> {
        if !self.table.contains_key(state) {
            let init = self.reference.logits(state);
            self.table.insert(state.to_vec(), init);
        }
        self.table.get_mut(state).expect("inserted above")
    }

    pub fn mean_abs_logit(&self) -> f64 {
        let (sum, n) = self
            .table
            .values()
            .flatten()
            .fold((0.0, 0usize), |(s, n), x| (s + x.abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl Policy for TabularPolicy {
    fn vocab_size(&self) -> usize {
        self.reference.vocab_size
    }

    fn logits(&self, state: &[Token]) -> Vec<f64> {
        match self.table.get(state) {
            Some(l) => l.clone(),
            None => self.reference.logits(state),
        }
    }
}

/// Serializes maps keyed by token sequences as lists of `[state, value]` pairs,
/// since JSON object keys must be strings.
pub mod state_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Token;

    pub fn serialize<V: Serialize, S: Serializer>(
        map: &BTreeMap<Vec<Token>, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<Token>, V>, D::Error> {
        let pairs: Vec<(Vec<Token>, V)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}
