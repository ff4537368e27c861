//! Implicit process rewards from a log-likelihood-ratio outcome reward.
//!
//! With `r(y) = s · log π(y)/π_ref(y)`, the partial sum `q^t` of token
//! log-ratios up to the end of step `t` equals `s · log E_ref[exp(r/s)]`
//! over all completions of the first `t` steps, so an outcome-trained model
//! yields per-step rewards `r^t = q^t − q^{t−1}` for free.
//!
//! All sums are evaluated in one fixed order: per-step partial sums, then a
//! left fold over steps. `sequence_reward` is that same fold, which keeps the
//! telescoping identity `Σ r^t = r(y)` exact in floating point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{ScoredSequence, Tokenizer, ToyLm, END_TOKEN};

/// Signal strengths: `beta` for the CoT model, `gamma` for the KG model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            gamma: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        check_strength(beta)?;
        check_strength(gamma)?;
        Ok(Self { beta, gamma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    pub q_values: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub total: f64,
}

fn check_strength(strength: f64) -> Result<()> {
    if strength > 0.0 && strength.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "strength must be positive and finite, got {strength}"
        )))
    }
}

/// Unscaled log-ratio sum of each step's tokens.
fn step_log_ratios(seq: &ScoredSequence) -> Vec<f64> {
    let ratios: Vec<f64> = seq.log_ratios().collect();
    let mut start = 0;
    seq.step_boundaries
        .iter()
        .map(|&end| {
            let s = ratios[start..end].iter().fold(0.0, |acc, x| acc + x);
            start = end;
            s
        })
        .collect()
}

pub fn step_rewards(seq: &ScoredSequence, strength: f64) -> Result<StepRewards> {
    check_strength(strength)?;
    if seq.step_boundaries.is_empty() {
        return Err(Error::Contract("sequence has no steps".into()));
    }
    let step_rewards: Vec<f64> = step_log_ratios(seq)
        .into_iter()
        .map(|x| strength * x)
        .collect();
    let mut q_values = Vec::with_capacity(step_rewards.len());
    let mut acc = 0.0;
    for r in &step_rewards {
        acc += r;
        q_values.push(acc);
    }
    Ok(StepRewards {
        total: acc,
        q_values,
        step_rewards,
    })
}

/// `strength · Σ (log π − log π_ref)` over the whole completion.
pub fn sequence_reward(seq: &ScoredSequence, strength: f64) -> Result<f64> {
    check_strength(strength)?;
    if seq.step_boundaries.is_empty() {
        return Ok(0.0);
    }
    Ok(step_rewards(seq, strength)?.total)
}

/// `q^t`: the scaled log-ratio sum through the end of step `t`.
pub fn cumulative_q(seq: &ScoredSequence, strength: f64, t: usize) -> Result<f64> {
    let n = seq.num_steps();
    if t >= n {
        return Err(Error::Bounds { index: t, len: n });
    }
    Ok(step_rewards(seq, strength)?.q_values[t])
}

/// Reward of the final step only, i.e. `q^T − q^{T−1}`.
pub fn last_step_reward(seq: &ScoredSequence, strength: f64) -> Result<f64> {
    let r = step_rewards(seq, strength)?;
    Ok(*r.step_rewards.last().expect("at least one step"))
}

/// Right-hand side of the exponential-average identity, by enumeration:
/// `s · log Σ_y π_ref(y | prefix) · exp(r(prefix ⊕ y) / s)`.
pub fn proposition_oracle(
    policy: &ToyLm,
    reference: &ToyLm,
    prefix: &str,
    strength: f64,
) -> Result<f64> {
    check_strength(strength)?;
    if policy.vocab() != reference.vocab() || policy.max_len() != reference.max_len() {
        return Err(Error::Contract(
            "policy and reference must share vocabulary and max_len".into(),
        ));
    }
    let prefix_ids = reference.tokenize_completion(prefix)?;
    let leaves = reference.enumerate_ids(&[], &prefix_ids)?;
    let mut terms = Vec::with_capacity(leaves.len());
    for (tail, ref_cond) in leaves {
        let mut full = prefix_ids.clone();
        full.extend_from_slice(&tail);
        let lp_pol: f64 = policy.token_logprobs(&[], &full)?.iter().sum();
        let lp_ref: f64 = reference.token_logprobs(&[], &full)?.iter().sum();
        // exp(r/s) = π(y)/π_ref(y); weight by π_ref(y | prefix)
        terms.push(ref_cond + (lp_pol - lp_ref));
    }
    Ok(strength * log_sum_exp(&terms))
}

/// One random instance checked against the enumeration oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionCase {
    pub vocab_size: usize,
    pub order: usize,
    pub max_len: usize,
    pub prefix: String,
    pub strength: f64,
    pub q: f64,
    pub oracle: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub seed: u64,
    pub max_rel_err: f64,
    pub cases: Vec<PropositionCase>,
}

/// Checks `q^t` against [`proposition_oracle`] on random toy instances with
/// at most five tokens (end marker included) and `max_len ≤ 5`.
pub fn verify_proposition(instances: usize, seed: u64) -> Result<PropositionReport> {
    if instances == 0 {
        return Err(Error::Contract("need at least one instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters = ["a", "b", "c", "d"];
    let mut cases = Vec::with_capacity(instances);
    for _ in 0..instances {
        let k = rng.random_range(2..=letters.len());
        let mut vocab: Vec<String> = letters[..k].iter().map(|s| s.to_string()).collect();
        vocab.push(END_TOKEN.to_string());
        let order = rng.random_range(1..=2);
        let max_len = rng.random_range(2..=5);
        let mut policy = ToyLm::new(vocab.clone(), order, max_len, Tokenizer::Chars)?;
        let mut reference = policy.clone();
        policy.randomize(&mut rng, 2.0);
        reference.randomize(&mut rng, 2.0);
        let len = rng.random_range(1..max_len);
        let prefix: String = (0..len).map(|_| letters[rng.random_range(0..k)]).collect();
        let strength = rng.random_range(0.01..1.0);
        let ids = policy.tokenize_completion(&prefix)?;
        let pol = policy.token_logprobs(&[], &ids)?;
        let refr = reference.token_logprobs(&[], &ids)?;
        let seq = ScoredSequence::from_logprobs(&pol, &refr, vec![ids.len()])?;
        let q = cumulative_q(&seq, strength, 0)?;
        let oracle = proposition_oracle(&policy, &reference, &prefix, strength)?;
        let rel_err = (q - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
        cases.push(PropositionCase {
            vocab_size: vocab.len(),
            order,
            max_len,
            prefix,
            strength,
            q,
            oracle,
            rel_err,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(PropositionReport {
        seed,
        max_rel_err,
        cases,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(policy: &[f64], reference: &[f64], b: Vec<usize>) -> ScoredSequence {
        ScoredSequence::from_logprobs(policy, reference, b).unwrap()
    }

    #[test]
    fn identical_models_give_zero() {
        let s = seq(&[-1.0, -2.0, -0.5], &[-1.0, -2.0, -0.5], vec![1, 3]);
        let r = step_rewards(&s, 0.05).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.q_values.iter().chain(&r.step_rewards).all(|x| *x == 0.0));
    }

    #[test]
    fn direct_formula() {
        let s = seq(&[-1.0, -1.0], &[-2.0, -2.0], vec![2]);
        assert!((sequence_reward(&s, 0.05).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn last_q_is_sequence_reward() {
        let s = seq(&[-0.3, -1.2, -0.7], &[-1.0, -0.2, -0.1], vec![1, 2, 3]);
        assert_eq!(
            cumulative_q(&s, 0.05, 2).unwrap(),
            sequence_reward(&s, 0.05).unwrap()
        );
        assert!(matches!(
            cumulative_q(&s, 0.05, 3),
            Err(Error::Bounds { index: 3, len: 3 })
        ));
    }

    #[test]
    fn hand_three_step_fixture() {
        // per-token differences (0.4, 0.6 | 1.0 | -0.2)
        let reference = [-1.0; 4];
        let policy = [-0.6, -0.4, 0.0, -1.2];
        let s = seq(&policy, &reference, vec![2, 3, 4]);
        let r = step_rewards(&s, 0.05).unwrap();
        let expected = [0.05, 0.05, -0.01];
        for (a, b) in r.step_rewards.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_step() {
        let s = seq(&[-0.2, -0.9], &[-0.5, -0.5], vec![2]);
        let r = step_rewards(&s, 0.05).unwrap();
        assert_eq!(r.step_rewards, vec![sequence_reward(&s, 0.05).unwrap()]);
    }

    #[test]
    fn proposition_on_random_instances() {
        let r = verify_proposition(20, 3).unwrap();
        assert_eq!(r.cases.len(), 20);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
        assert!(r.cases.iter().all(|c| c.vocab_size <= 5 && c.max_len <= 5));
    }

    #[test]
    fn bad_inputs() {
        let s = seq(&[-0.2], &[-0.5], vec![1]);
        assert!(step_rewards(&s, 0.0).is_err());
        assert!(step_rewards(&s, f64::NAN).is_err());
        let empty = ScoredSequence::from_logprobs(&[], &[], vec![]).unwrap();
        assert!(matches!(
            step_rewards(&empty, 0.05),
            Err(Error::Contract(_))
        ));
        assert!(RewardConfig::new(0.05, -1.0).is_err());
    }
}
