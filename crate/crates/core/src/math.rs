//! Small numeric helpers shared across modules.

use crate::Token;

/// Numerically stable `ln Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats of a (possibly unnormalized) non-negative weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    // a single point mass sums to -0.0
    h + 0.0
}

/// Index of the largest score; ties go to the smallest token.
pub fn argmax_by_token<I>(items: I) -> Option<(Token, f64)>
where
    I: IntoIterator<Item = (Token, f64)>,
{
    let mut best: Option<(Token, f64)> = None;
    for (token, score) in items {
        best = match best {
            None => Some((token, score)),
            Some((bt, bs)) if score > bs || (score == bs && token < bt) => Some((token, score)),
            keep => keep,
        };
    }
    best
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of a token sequence under a seed. Unlike `std` hashers this
/// never changes between toolchains, so seeded tables stay reproducible.
pub fn hash_tokens(seed: u64, tokens: &[Token]) -> u64 {
    let mut h = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    for &t in tokens {
        h = mix64(h ^ (u64::from(t) + 1));
    }
    mix64(h ^ tokens.len() as u64)
}

/// Uniform sample in [0, 1) derived from a hash.
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal sample derived from a hash (Box-Muller).
pub fn normal_from_hash(h: u64) -> f64 {
    let u1 = unit_from_hash(mix64(h)).max(f64::MIN_POSITIVE);
    let u2 = unit_from_hash(mix64(h ^ 0xD1B5_4A32_D192_ED03));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 3.0, -700.0]);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1e6, 1e6 - 1.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] / p[1] - 1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_lower_token_on_ties() {
        assert_eq!(argmax_by_token([(3, 1.0), (1, 1.0), (2, 0.5)]), Some((1, 1.0)));
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[2.0, 2.0, 2.0, 2.0]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[5.0, 0.0]), 0.0);
    }

    #[test]
    fn token_hash_is_order_sensitive() {
        assert_ne!(hash_tokens(1, &[1, 2]), hash_tokens(1, &[2, 1]));
        assert_ne!(hash_tokens(1, &[0]), hash_tokens(1, &[0, 0]));
        assert_eq!(hash_tokens(9, &[4, 4]), hash_tokens(9, &[4, 4]));
    }
}
