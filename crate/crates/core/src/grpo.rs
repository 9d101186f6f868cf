//! Group-relative advantages, the token-level clipped surrogate and the KL
//! penalty, as pure functions over caller-supplied rewards and token ratios.
//!
//! ```text
//! Â_i    = (R_i − mean R) / (std R + ε_A)
//! J_clip = 1/G Σ_i 1/|y_i| Σ_t min(r_it·Â_i, clip(r_it, 1−ε, 1+ε)·Â_i)
//! D_KL   = 1/G Σ_i 1/|y_i| Σ_t (ρ_it − ln ρ_it − 1)
//! J      = J_clip − β·D_KL
//! ```
//!
//! All sums are Neumaier-compensated so results do not depend on the order
//! rollouts or tokens arrive in.

use serde::{Deserialize, Serialize};

/// Log-prob differences beyond this are clamped before exponentiation.
pub const MAX_LOG_RATIO: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("rollout {rollout}: {what} at token {token} must be positive and finite, got {value}")]
    BadRatio { rollout: usize, token: usize, what: &'static str, value: f64 },
    #[error("rollout {0}: empty token stream")]
    EmptyStream(usize),
    #[error("rollout {rollout}: length mismatch ({detail})")]
    LengthMismatch { rollout: usize, detail: String },
    #[error("{0} rewards but {1} streams")]
    Misaligned(usize, usize),
    #[error("reward {index} is not finite: {value}")]
    NonFiniteReward { index: usize, value: f64 },
    #[error("invalid constant: {0}")]
    BadConstant(String),
}

/// Neumaier's compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn compensated_mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub epsilon_clip: f64,
    pub beta: f64,
    pub epsilon_a: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { epsilon_clip: 0.2, beta: 0.04, epsilon_a: 1e-4 }
    }
}

impl GrpoConfig {
    pub fn check(&self) -> Result<(), GrpoError> {
        if !(self.epsilon_clip.is_finite() && self.epsilon_clip > 0.0) {
            return Err(GrpoError::BadConstant(format!("epsilon_clip must be > 0, got {}", self.epsilon_clip)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(GrpoError::BadConstant(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon_a.is_finite() && self.epsilon_a >= 0.0) {
            return Err(GrpoError::BadConstant(format!("epsilon_a must be >= 0, got {}", self.epsilon_a)));
        }
        Ok(())
    }
}

/// Per-token ratios for one rollout: `ratios` are current/old, `ref_ratios`
/// are reference/current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRatioStream {
    pub ratios: Vec<f64>,
    pub ref_ratios: Vec<f64>,
}

impl TokenRatioStream {
    pub fn new(ratios: Vec<f64>, ref_ratios: Vec<f64>) -> Self {
        TokenRatioStream { ratios, ref_ratios }
    }

    /// Unit ratios of the given length (on-policy, reference equal to current).
    pub fn identity(len: usize) -> Self {
        TokenRatioStream { ratios: vec![1.0; len], ref_ratios: vec![1.0; len] }
    }

    /// Builds ratios from per-token log-probabilities under the current, old
    /// and reference policies.
    pub fn from_logprobs(current: &[f64], old: &[f64], reference: &[f64]) -> Result<Self, GrpoError> {
        if current.len() != old.len() || current.len() != reference.len() {
            return Err(GrpoError::LengthMismatch {
                rollout: 0,
                detail: format!("current {}, old {}, ref {}", current.len(), old.len(), reference.len()),
            });
        }
        let ratio = |a: f64, b: f64| (a - b).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
        Ok(TokenRatioStream {
            ratios: current.iter().zip(old).map(|(c, o)| ratio(*c, *o)).collect(),
            ref_ratios: reference.iter().zip(current).map(|(r, c)| ratio(*r, *c)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    fn check(&self, rollout: usize) -> Result<(), GrpoError> {
        if self.ratios.is_empty() {
            return Err(GrpoError::EmptyStream(rollout));
        }
        if self.ratios.len() != self.ref_ratios.len() {
            return Err(GrpoError::LengthMismatch {
                rollout,
                detail: format!("{} ratios, {} reference ratios", self.ratios.len(), self.ref_ratios.len()),
            });
        }
        for (what, list) in [("ratio", &self.ratios), ("reference ratio", &self.ref_ratios)] {
            if let Some((token, &value)) = list.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                return Err(GrpoError::BadRatio { rollout, token, what, value });
            }
        }
        Ok(())
    }
}

/// G rollouts for one input, with the constants used to score them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub streams: Vec<TokenRatioStream>,
    pub config: GrpoConfig,
}

impl RolloutGroup {
    pub fn new(rewards: Vec<f64>, streams: Vec<TokenRatioStream>, config: GrpoConfig) -> Result<Self, GrpoError> {
        let group = RolloutGroup { rewards, streams, config };
        group.check()?;
        Ok(group)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn check(&self) -> Result<(), GrpoError> {
        self.config.check()?;
        if self.rewards.len() < 2 {
            return Err(GrpoError::GroupTooSmall(self.rewards.len()));
        }
        if self.rewards.len() != self.streams.len() {
            return Err(GrpoError::Misaligned(self.rewards.len(), self.streams.len()));
        }
        check_rewards(&self.rewards)?;
        for (i, s) in self.streams.iter().enumerate() {
            s.check(i)?;
        }
        Ok(())
    }
}

fn check_rewards(rewards: &[f64]) -> Result<(), GrpoError> {
    match rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        Some((index, &value)) => Err(GrpoError::NonFiniteReward { index, value }),
        None => Ok(()),
    }
}

/// Standardizes rewards within the group using the population standard
/// deviation. A group with identical rewards has all-zero advantages.
pub fn group_advantages(rewards: &[f64], epsilon_a: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if !(epsilon_a.is_finite() && epsilon_a >= 0.0) {
        return Err(GrpoError::BadConstant(format!("epsilon_a must be >= 0, got {epsilon_a}")));
    }
    check_rewards(rewards)?;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mean = compensated_mean(rewards);
    let var = compensated_mean(&rewards.iter().map(|r| (r - mean) * (r - mean)).collect::<Vec<_>>());
    let denom = var.sqrt() + epsilon_a;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn per_token_double_mean<F>(group: &RolloutGroup, mut term: F) -> f64
where
    F: FnMut(usize, usize) -> f64,
{
    let per_rollout: Vec<f64> = group
        .streams
        .iter()
        .enumerate()
        .map(|(i, s)| compensated_sum((0..s.len()).map(|t| term(i, t))) / s.len() as f64)
        .collect();
    compensated_mean(&per_rollout)
}

pub fn clipped_surrogate(group: &RolloutGroup, advantages: &[f64]) -> Result<f64, GrpoError> {
    group.check()?;
    if advantages.len() != group.len() {
        return Err(GrpoError::Misaligned(advantages.len(), group.len()));
    }
    let eps = group.config.epsilon_clip;
    Ok(per_token_double_mean(group, |i, t| {
        let r = group.streams[i].ratios[t];
        let a = advantages[i];
        (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
    }))
}

/// Unclipped surrogate, used to check clip inactivity.
pub fn unclipped_surrogate(group: &RolloutGroup, advantages: &[f64]) -> Result<f64, GrpoError> {
    group.check()?;
    if advantages.len() != group.len() {
        return Err(GrpoError::Misaligned(advantages.len(), group.len()));
    }
    Ok(per_token_double_mean(group, |i, t| group.streams[i].ratios[t] * advantages[i]))
}

/// `k(ρ) = ρ − ln ρ − 1`, non-negative with equality at ρ = 1.
pub fn kl_term(rho: f64) -> f64 {
    rho - rho.ln() - 1.0
}

pub fn kl_penalty(group: &RolloutGroup) -> Result<f64, GrpoError> {
    group.check()?;
    Ok(per_token_double_mean(group, |i, t| kl_term(group.streams[i].ref_ratios[t])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub advantages: Vec<f64>,
    pub j_clip: f64,
    pub kl: f64,
    pub objective: f64,
}

pub fn grpo_objective(group: &RolloutGroup) -> Result<ObjectiveTerms, GrpoError> {
    let advantages = group_advantages(&group.rewards, group.config.epsilon_a)?;
    let j_clip = clipped_surrogate(group, &advantages)?;
    let kl = kl_penalty(group)?;
    Ok(ObjectiveTerms { objective: j_clip - group.config.beta * kl, advantages, j_clip, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(ratio: f64, rho: f64) -> TokenRatioStream {
        TokenRatioStream::new(vec![ratio], vec![rho])
    }

    fn group(rewards: Vec<f64>, streams: Vec<TokenRatioStream>, cfg: GrpoConfig) -> RolloutGroup {
        RolloutGroup::new(rewards, streams, cfg).unwrap()
    }

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[1.0, -1.0], 0.0).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[5.0; 4], 1e-4).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.1, 0.1, 0.1], 0.0).unwrap(), vec![0.0; 3]);

        // Oracle: exact rational mean and variance, then one division each.
        let r = [9.0, 6.0, 0.0, 0.0];
        let mean = 15.0 / 4.0;
        let var = ((9.0f64 - mean).powi(2) + (6.0f64 - mean).powi(2) + 2.0 * mean * mean) / 4.0;
        assert_eq!(var, 15.1875);
        let got = group_advantages(&r, 0.0).unwrap();
        for (g, x) in got.iter().zip(r) {
            assert!((g - (x - mean) / var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_reject_tiny_groups() {
        assert_eq!(group_advantages(&[], 1e-4), Err(GrpoError::GroupTooSmall(0)));
        assert_eq!(group_advantages(&[1.0], 1e-4), Err(GrpoError::GroupTooSmall(1)));
        assert!(group_advantages(&[1.0, f64::NAN], 1e-4).is_err());
    }

    #[test]
    fn single_token_fixtures() {
        let cfg = GrpoConfig { beta: 0.0, ..GrpoConfig::default() };
        let g = group(vec![0.0, 0.0], vec![single(1.5, 1.0), single(1.5, 1.0)], cfg);
        assert!((clipped_surrogate(&g, &[1.0, 1.0]).unwrap() - 1.2).abs() < 1e-12);
        let g = group(vec![0.0, 0.0], vec![single(0.5, 1.0), single(0.5, 1.0)], cfg);
        assert!((clipped_surrogate(&g, &[-1.0, -1.0]).unwrap() + 0.8).abs() < 1e-12);
        let g = group(vec![0.0, 0.0], vec![single(1.0, 2.0), single(1.0, 2.0)], cfg);
        assert!((kl_penalty(&g).unwrap() - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((kl_penalty(&g).unwrap() - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn kl_mixed_tokens() {
        let s = TokenRatioStream::new(vec![1.0, 1.0], vec![0.5, 2.0]);
        let g = group(vec![0.0, 1.0], vec![s.clone(), s], GrpoConfig::default());
        let expected = ((0.5 - 0.5f64.ln() - 1.0) + (2.0 - 2f64.ln() - 1.0)) / 2.0;
        assert!((kl_penalty(&g).unwrap() - expected).abs() < 1e-12);
        let g = group(vec![0.0, 1.0], vec![TokenRatioStream::identity(3); 2], GrpoConfig::default());
        assert_eq!(kl_penalty(&g).unwrap(), 0.0);
    }

    #[test]
    fn objective_examples() {
        let g = group(vec![1.0, -1.0], vec![TokenRatioStream::identity(5); 2], GrpoConfig::default());
        let t = grpo_objective(&g).unwrap();
        assert!(t.objective.abs() < 1e-12);
        assert_eq!(t.kl, 0.0);

        let cfg = GrpoConfig { beta: 0.0, ..GrpoConfig::default() };
        let s = TokenRatioStream::new(vec![1.5, 0.9], vec![2.0, 0.5]);
        let g = group(vec![3.0, 1.0], vec![s.clone(), s], cfg);
        let t = grpo_objective(&g).unwrap();
        assert_eq!(t.objective, clipped_surrogate(&g, &t.advantages).unwrap());

        // Composition: the surrogate and KL fixtures combined with beta = 0.5.
        let cfg = GrpoConfig { beta: 0.5, epsilon_a: 0.0, epsilon_clip: 0.2 };
        let g = group(vec![1.0, -1.0], vec![single(1.5, 2.0), single(0.5, 2.0)], cfg);
        let t = grpo_objective(&g).unwrap();
        assert_eq!(t.advantages, vec![1.0, -1.0]);
        let expected = (1.2 + -0.8) / 2.0 - 0.5 * (2.0 - 2f64.ln() - 1.0);
        assert!((t.objective - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ratios() {
        let err = RolloutGroup::new(vec![0.0, 1.0], vec![single(0.0, 1.0), single(1.0, 1.0)], GrpoConfig::default());
        assert!(matches!(err, Err(GrpoError::BadRatio { rollout: 0, token: 0, .. })));
        let err = RolloutGroup::new(vec![0.0, 1.0], vec![single(1.0, -2.0), single(1.0, 1.0)], GrpoConfig::default());
        assert!(matches!(err, Err(GrpoError::BadRatio { what: "reference ratio", .. })));
        let err = RolloutGroup::new(
            vec![0.0, 1.0],
            vec![TokenRatioStream::identity(0), single(1.0, 1.0)],
            GrpoConfig::default(),
        );
        assert_eq!(err, Err(GrpoError::EmptyStream(0)));
        let err = RolloutGroup::new(vec![0.0], vec![single(1.0, 1.0)], GrpoConfig::default());
        assert_eq!(err, Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn logprob_ratios_and_overflow_guard() {
        let s =
            TokenRatioStream::from_logprobs(&[-1.0, 0.0, -1000.0], &[-1.0, -2f64.ln(), 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.ratios[0], 1.0);
        assert!((s.ratios[1] - 2.0).abs() < 1e-15);
        assert_eq!(s.ratios[2], (-MAX_LOG_RATIO).exp());
        assert_eq!(s.ref_ratios[2], MAX_LOG_RATIO.exp());
        assert!(s.ratios.iter().chain(&s.ref_ratios).all(|r| r.is_finite() && *r > 0.0));
        assert!(TokenRatioStream::from_logprobs(&[0.0], &[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn permutation_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = 64;
        let streams: Vec<TokenRatioStream> = (0..g)
            .map(|_| {
                let n = rng.random_range(1..=4096);
                TokenRatioStream::new(
                    (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
                    (0..n).map(|_| rng.random_range(0.2..5.0)).collect(),
                )
            })
            .collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-3.0..9.0)).collect();
        let base = grpo_objective(&group(rewards.clone(), streams.clone(), GrpoConfig::default())).unwrap();
        for _ in 0..3 {
            let mut order: Vec<usize> = (0..g).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<TokenRatioStream> = order
                .iter()
                .map(|&i| {
                    let mut idx: Vec<usize> = (0..streams[i].len()).collect();
                    idx.shuffle(&mut rng);
                    TokenRatioStream::new(
                        idx.iter().map(|&t| streams[i].ratios[t]).collect(),
                        idx.iter().map(|&t| streams[i].ref_ratios[t]).collect(),
                    )
                })
                .collect();
            let r: Vec<f64> = order.iter().map(|&i| rewards[i]).collect();
            let t = grpo_objective(&group(r, shuffled, GrpoConfig::default())).unwrap();
            assert!((t.j_clip - base.j_clip).abs() < 1e-10);
            assert!((t.kl - base.kl).abs() < 1e-10);
            assert!((t.objective - base.objective).abs() < 1e-10);
            for (k, &i) in order.iter().enumerate() {
                assert!((t.advantages[k] - base.advantages[i]).abs() < 1e-10);
            }
        }
    }

    fn ratio() -> impl Strategy<Value = f64> {
        prop_oneof![1e-6f64..1e-2, 1e-2f64..10.0, 10.0f64..1e6]
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(rhos in proptest::collection::vec(ratio(), 1..64)) {
            let n = rhos.len();
            let g = group(vec![0.0, 1.0], vec![TokenRatioStream::new(vec![1.0; n], rhos.clone()); 2], GrpoConfig::default());
            prop_assert!(kl_penalty(&g).unwrap() >= 0.0);
            prop_assert!(rhos.iter().all(|r| kl_term(*r) >= 0.0));
        }

        #[test]
        fn advantages_zero_mean(rewards in proptest::collection::vec(-10.0f64..10.0, 2..32)) {
            prop_assume!(rewards.iter().any(|r| *r != rewards[0]));
            let a = group_advantages(&rewards, 0.0).unwrap();
            prop_assert!(compensated_sum(a.iter().copied()).abs() < 1e-12);
        }

        #[test]
        fn argmax_survives_positive_affine_maps(
            rewards in proptest::collection::vec(-10.0f64..10.0, 2..32),
            scale in 0.01f64..100.0, shift in -50.0f64..50.0,
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
            let a = group_advantages(&rewards, 1e-4).unwrap();
            let mapped: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
            let b = group_advantages(&mapped, 1e-4).unwrap();
            prop_assume!(rewards.iter().filter(|r| **r == rewards[argmax(&rewards)]).count() == 1);
            prop_assert_eq!(argmax(&a), argmax(&rewards));
            prop_assert_eq!(argmax(&b), argmax(&rewards));
        }

        #[test]
        fn clip_inactive_inside_trust_region(
            ratios in proptest::collection::vec(0.8f64..=1.2, 1..32),
            rewards in proptest::collection::vec(-3.0f64..9.0, 2..8),
        ) {
            let n = ratios.len();
            let s = TokenRatioStream::new(ratios, vec![1.0; n]);
            let g = group(rewards.clone(), vec![s; rewards.len()], GrpoConfig::default());
            let a = group_advantages(&rewards, 1e-4).unwrap();
            let clipped = clipped_surrogate(&g, &a).unwrap();
            let plain = unclipped_surrogate(&g, &a).unwrap();
            prop_assert!((clipped - plain).abs() < 1e-12);
        }
    }
}
