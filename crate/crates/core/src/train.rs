//! Pairwise preference training of toy PRMs with closed-form gradients.
//!
//! The loss of a pair is `softplus(−m)` with margin
//! `m = s · (Σ log π/π_ref (chosen) − Σ log π/π_ref (rejected))`. Each
//! visited position of a sequence with coefficient `c` contributes
//! `c · (onehot(token) − softmax(row))` to its context row.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundry::{Modality, PreferencePair};
use crate::kg::STEP_SEPARATOR;
use crate::lm::{score_steps, ScoredSequence, ToyLm};
use crate::reward::sequence_reward;
use crate::util::stable_hash;

/// Gradient rows keyed by context ids, aligned with [`ToyLm::rows`].
pub type Gradient = BTreeMap<Vec<u32>, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitKg,
    InitCot,
    CoKgFromCot,
    CoCotFromKg,
}

impl Phase {
    pub fn modality(self) -> Modality {
        match self {
            Phase::InitKg | Phase::CoKgFromCot => Modality::Kg,
            Phase::InitCot | Phase::CoCotFromKg => Modality::Cot,
        }
    }

    pub fn is_cotraining(self) -> bool {
        matches!(self, Phase::CoKgFromCot | Phase::CoCotFromKg)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::InitKg => "init_kg",
            Phase::InitCot => "init_cot",
            Phase::CoKgFromCot => "co_kg_from_cot",
            Phase::CoCotFromKg => "co_cot_from_kg",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "init_kg" => Ok(Phase::InitKg),
            "init_cot" => Ok(Phase::InitCot),
            "co_kg_from_cot" => Ok(Phase::CoKgFromCot),
            "co_cot_from_kg" => Ok(Phase::CoCotFromKg),
            other => Err(Error::Contract(format!("unknown training phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strength: f64,
    pub learning_rate: f64,
    /// Epochs per phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Vec<Phase>,
    /// Native to converted batches in co-training phases.
    pub mix_ratio: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strength: 0.05,
            learning_rate: 40.0,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            schedule: vec![
                Phase::InitKg,
                Phase::InitCot,
                Phase::CoKgFromCot,
                Phase::CoCotFromKg,
            ],
            mix_ratio: (1, 1),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(Error::Contract(format!(
                "invalid strength {}",
                self.strength
            )));
        }
        if self.schedule.is_empty() {
            return Err(Error::Contract("training schedule is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".into()));
        }
        if self.mix_ratio.0 == 0 && self.mix_ratio.1 == 0 {
            return Err(Error::Contract("mix_ratio cannot be 0:0".into()));
        }
        Ok(())
    }
}

/// Native and converted pairs for both modalities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Datasets {
    pub kg: Vec<PreferencePair>,
    pub cot: Vec<PreferencePair>,
    /// CoT pairs converted to KG paths.
    pub kg_from_cot: Vec<PreferencePair>,
    /// KG pairs converted to CoTs.
    pub cot_from_kg: Vec<PreferencePair>,
}

impl Datasets {
    fn native(&self, modality: Modality) -> &[PreferencePair] {
        match modality {
            Modality::Kg => &self.kg,
            Modality::Cot => &self.cot,
        }
    }

    fn converted(&self, modality: Modality) -> &[PreferencePair] {
        match modality {
            Modality::Kg => &self.kg_from_cot,
            Modality::Cot => &self.cot_from_kg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: Phase,
    pub native_batches: usize,
    pub converted_batches: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss before each optimizer step.
    pub loss_trace: Vec<f64>,
    pub phases: Vec<PhaseLog>,
    /// Margin accuracy on held-out native pairs.
    pub margin_accuracy: Option<f64>,
    pub held_out: usize,
    pub grad_check_max_rel_err: Option<f64>,
    pub config_echo: TrainConfig,
}

/// Held-out membership: one id in ten, by stable hash.
pub fn is_held_out(pair: &PreferencePair) -> bool {
    stable_hash(&pair.id).is_multiple_of(10)
}

pub fn split_held_out(pairs: &[PreferencePair]) -> (Vec<&PreferencePair>, Vec<&PreferencePair>) {
    pairs.iter().partition(|p| !is_held_out(p))
}

/// `−log σ(chosen − rejected)`, as softplus of the negated margin.
pub fn pairwise_loss(reward_chosen: f64, reward_rejected: f64) -> Result<f64> {
    if !reward_chosen.is_finite() || !reward_rejected.is_finite() {
        return Err(Error::Numeric(format!(
            "rewards {reward_chosen}, {reward_rejected}"
        )));
    }
    Ok(softplus(reward_rejected - reward_chosen))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// σ(−m), stable for large |m|.
fn sigmoid_neg(m: f64) -> f64 {
    if m >= 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

/// Splits pair text into steps and returns the joiner that rebuilds it.
pub fn split_steps(text: &str, modality: Modality) -> (Vec<String>, String) {
    match modality {
        Modality::Kg => {
            let joiner = format!(" {STEP_SEPARATOR} ");
            (
                text.split(joiner.as_str()).map(str::to_string).collect(),
                joiner,
            )
        }
        Modality::Cot => (text.lines().map(str::to_string).collect(), "\n".to_string()),
    }
}

/// The complete (terminated) response `text` scored under both models.
pub fn score_response(
    policy: &ToyLm,
    reference: &ToyLm,
    question: &str,
    text: &str,
    modality: Modality,
) -> Result<ScoredSequence> {
    let (steps, joiner) = split_steps(text, modality);
    score_steps(policy, reference, question, &steps, &joiner, true)
}

/// Sequence rewards of (chosen, rejected).
pub fn pair_rewards(
    policy: &ToyLm,
    reference: &ToyLm,
    pair: &PreferencePair,
    strength: f64,
) -> Result<(f64, f64)> {
    let c = score_response(
        policy,
        reference,
        &pair.question,
        &pair.chosen,
        pair.modality,
    )?;
    let r = score_response(
        policy,
        reference,
        &pair.question,
        &pair.rejected,
        pair.modality,
    )?;
    Ok((
        sequence_reward(&c, strength)?,
        sequence_reward(&r, strength)?,
    ))
}

/// Fraction of pairs whose chosen reward is strictly higher; ties fail.
pub fn margin_accuracy<'a, I>(
    policy: &ToyLm,
    reference: &ToyLm,
    pairs: I,
    strength: f64,
) -> Result<f64>
where
    I: IntoIterator<Item = &'a PreferencePair>,
{
    let pairs: Vec<&PreferencePair> = pairs.into_iter().collect();
    let outcomes: Vec<bool> = pairs
        .par_iter()
        .map(|p| pair_rewards(policy, reference, p, strength).map(|(c, r)| c > r))
        .collect::<Result<_>>()?;
    if outcomes.is_empty() {
        return Err(Error::Contract(
            "margin accuracy of an empty pair set".into(),
        ));
    }
    Ok(outcomes.iter().filter(|x| **x).count() as f64 / outcomes.len() as f64)
}

struct Encoded {
    prompt: Vec<u32>,
    chosen: Vec<u32>,
    rejected: Vec<u32>,
}

fn encode(model: &ToyLm, pair: &PreferencePair) -> Result<Encoded> {
    let full = |t: &str| model.tokenize_completion(&format!("{t} {}", crate::lm::END_TOKEN));
    Ok(Encoded {
        prompt: model.tokenize_prompt(&pair.question),
        chosen: full(&pair.chosen)?,
        rejected: full(&pair.rejected)?,
    })
}

fn log_ratio(policy: &ToyLm, reference: &ToyLm, prompt: &[u32], completion: &[u32]) -> Result<f64> {
    let p = policy.token_logprobs(prompt, completion)?;
    let r = reference.token_logprobs(prompt, completion)?;
    Ok(p.iter().zip(&r).fold(0.0, |acc, (a, b)| acc + (a - b)))
}

fn encoded_margin(policy: &ToyLm, reference: &ToyLm, e: &Encoded, strength: f64) -> Result<f64> {
    Ok(strength
        * (log_ratio(policy, reference, &e.prompt, &e.chosen)?
            - log_ratio(policy, reference, &e.prompt, &e.rejected)?))
}

/// Loss of one pair under `policy`.
pub fn pair_loss(
    policy: &ToyLm,
    reference: &ToyLm,
    pair: &PreferencePair,
    strength: f64,
) -> Result<f64> {
    let e = encode(policy, pair)?;
    let m = encoded_margin(policy, reference, &e, strength)?;
    pairwise_loss(m, 0.0)
}

fn accumulate(
    policy: &ToyLm,
    prompt: &[u32],
    completion: &[u32],
    coef: f64,
    grad: &mut Gradient,
) -> Result<()> {
    for v in policy.visits(prompt, completion)? {
        if v.forced {
            continue;
        }
        let probs = policy.probs(&v.context);
        let row = grad
            .entry(v.context)
            .or_insert_with(|| vec![0.0; probs.len()]);
        for (k, p) in probs.iter().enumerate() {
            row[k] -= coef * p;
        }
        row[v.token as usize] += coef;
    }
    Ok(())
}

fn encoded_gradient(
    policy: &ToyLm,
    reference: &ToyLm,
    e: &Encoded,
    strength: f64,
) -> Result<(f64, Gradient)> {
    let m = encoded_margin(policy, reference, e, strength)?;
    let loss = pairwise_loss(m, 0.0)?;
    let w = sigmoid_neg(m) * strength;
    let mut grad = Gradient::new();
    accumulate(policy, &e.prompt, &e.chosen, -w, &mut grad)?;
    accumulate(policy, &e.prompt, &e.rejected, w, &mut grad)?;
    Ok((loss, grad))
}

/// Exact gradient of the pair loss with respect to every logit.
pub fn loss_gradient(
    policy: &ToyLm,
    reference: &ToyLm,
    pair: &PreferencePair,
    strength: f64,
) -> Result<Gradient> {
    let e = encode(policy, pair)?;
    Ok(encoded_gradient(policy, reference, &e, strength)?.1)
}

/// Denominator floor for the finite-difference comparison.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Max over visited logits of `|analytic − fd| / max(|analytic|, |fd|, floor)`
/// using central differences with step `h`.
pub fn gradient_check(
    policy: &ToyLm,
    reference: &ToyLm,
    pair: &PreferencePair,
    strength: f64,
    h: f64,
) -> Result<f64> {
    let analytic = loss_gradient(policy, reference, pair, strength)?;
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for (ctx, row) in &analytic {
        for (k, a) in row.iter().enumerate() {
            let base = probe.row_mut(ctx)[k];
            probe.row_mut(ctx)[k] = base + h;
            let up = pair_loss(&probe, reference, pair, strength)?;
            probe.row_mut(ctx)[k] = base - h;
            let down = pair_loss(&probe, reference, pair, strength)?;
            probe.row_mut(ctx)[k] = base;
            let fd = (up - down) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn batches_of(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Interleaves native and converted batches `a:b`; leftovers go last.
fn interleave<T>(native: Vec<T>, converted: Vec<T>, (a, b): (usize, usize)) -> Vec<(bool, T)> {
    let mut out = Vec::with_capacity(native.len() + converted.len());
    let mut n = native.into_iter().peekable();
    let mut c = converted.into_iter().peekable();
    while n.peek().is_some() || c.peek().is_some() {
        let before = out.len();
        out.extend(n.by_ref().take(a).map(|x| (false, x)));
        out.extend(c.by_ref().take(b).map(|x| (true, x)));
        if out.len() == before {
            // one side has weight zero and the other is exhausted
            out.extend(n.by_ref().map(|x| (false, x)));
            out.extend(c.by_ref().map(|x| (true, x)));
        }
    }
    out
}

fn step(
    policy: &mut ToyLm,
    reference: &ToyLm,
    batch: &[&Encoded],
    strength: f64,
    lr: f64,
) -> Result<f64> {
    let results: Vec<(f64, Gradient)> = batch
        .par_iter()
        .map(|e| encoded_gradient(policy, reference, e, strength))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total = Gradient::new();
    for (l, g) in results {
        loss += l;
        for (ctx, row) in g {
            let acc = total.entry(ctx).or_insert_with(|| vec![0.0; row.len()]);
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    }
    if lr != 0.0 {
        for (ctx, g) in total {
            let row = policy.row_mut(&ctx);
            for (w, x) in row.iter_mut().zip(g) {
                *w -= lr * scale * x;
            }
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss {loss}")));
    }
    Ok(loss)
}

/// Result of training one model.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ToyLm,
    /// Snapshot after the initialization phase, before co-training.
    pub init_only: Option<ToyLm>,
    pub report: TrainReport,
}

/// Runs every phase of `config.schedule` that targets `modality`.
///
/// The reference model is a frozen copy of `policy` as passed in.
pub fn train(
    policy: &ToyLm,
    modality: Modality,
    datasets: &Datasets,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    let phases: Vec<Phase> = config
        .schedule
        .iter()
        .copied()
        .filter(|p| p.modality() == modality)
        .collect();
    if phases.is_empty() {
        return Err(Error::Contract(format!(
            "schedule has no phase for {modality:?}"
        )));
    }
    let reference = policy.clone();
    let mut model = policy.clone();
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed ^ (modality as u64).wrapping_mul(0x9E37_79B9));

    let native_all = datasets.native(modality);
    if native_all.is_empty() {
        return Err(Error::Contract(format!("no native {modality:?} pairs")));
    }
    let (native_train, held_out) = split_held_out(native_all);
    let native: Vec<Encoded> = native_train
        .iter()
        .map(|p| encode(&model, p))
        .collect::<Result<_>>()?;
    let converted: Vec<Encoded> = datasets
        .converted(modality)
        .iter()
        .filter(|p| !is_held_out(p))
        .map(|p| encode(&model, p))
        .collect::<Result<_>>()?;

    let mut loss_trace = Vec::new();
    let mut logs = Vec::new();
    let mut init_only = None;
    for phase in phases {
        if phase.is_cotraining() {
            if converted.is_empty() {
                return Err(Error::Contract(format!(
                    "phase {phase} has no converted pairs"
                )));
            }
            if init_only.is_none() {
                init_only = Some(model.clone());
            }
        }
        let mut log = PhaseLog {
            phase,
            native_batches: 0,
            converted_batches: 0,
            epoch_losses: Vec::with_capacity(config.epochs),
        };
        for _ in 0..config.epochs {
            let nb = batches_of(native.len(), config.batch_size, &mut rng);
            let plan = if phase.is_cotraining() {
                let cb = batches_of(converted.len(), config.batch_size, &mut rng);
                interleave(nb, cb, config.mix_ratio)
            } else {
                nb.into_iter().map(|b| (false, b)).collect()
            };
            let mut sum = 0.0;
            for (is_conv, idx) in &plan {
                let source = if *is_conv { &converted } else { &native };
                let batch: Vec<&Encoded> = idx.iter().map(|&i| &source[i]).collect();
                let loss = step(
                    &mut model,
                    &reference,
                    &batch,
                    config.strength,
                    config.learning_rate,
                )?;
                if *is_conv {
                    log.converted_batches += 1;
                } else {
                    log.native_batches += 1;
                }
                loss_trace.push(loss);
                sum += loss;
            }
            log.epoch_losses.push(sum / plan.len() as f64);
        }
        logs.push(log);
    }

    let margin_accuracy = if held_out.is_empty() {
        None
    } else {
        Some(margin_accuracy(
            &model,
            &reference,
            held_out.clone(),
            config.strength,
        )?)
    };
    let probe = held_out
        .first()
        .copied()
        .or_else(|| native_train.first().copied());
    let grad_check_max_rel_err = match probe {
        Some(p) => Some(gradient_check(
            &model,
            &reference,
            p,
            config.strength,
            1e-5,
        )?),
        None => None,
    };
    Ok(Trained {
        model,
        init_only,
        report: TrainReport {
            loss_trace,
            phases: logs,
            margin_accuracy,
            held_out: held_out.len(),
            grad_check_max_rel_err,
            config_echo: config.clone(),
        },
    })
}
