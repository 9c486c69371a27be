//! Losses, the scheduled joint objective, corruption for denoising, and the
//! training loop.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::corpus::{KnowledgeSnippet, TfIdfIndex};
use crate::data::{build_input, build_target, encode_context, DialogueExample, PromptTag, Tokenizer, MAX_OUTPUT_LEN};
use crate::error::{Error, Result};
use crate::metrics::unigram_f1;
use crate::mixup::mix_with_fallback;
use crate::model::{greedy_decode, SequenceModel};
use crate::negatives::{model_generated_negatives, retrieved_negatives, sample_negative_set, EntailmentFilter, NegativeSet};
use crate::registry::Registry;
use crate::spans::Extractors;
use crate::text::{derive_seed, normalize};

pub const PROB_FLOOR: f64 = 1e-7;

fn check_floor(floor: f64) -> Result<()> {
    if floor > 0.0 && floor < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("prob_floor must lie in (0, 0.5), got {floor}")))
    }
}

/// `-Σ ln p_t` over clamped probabilities, with the gradient with respect to
/// each `ln p_t`. Clamped positions have zero gradient.
pub fn mle_terms<T: Scalar>(logprobs: &[T], floor: f64) -> (T, Vec<T>) {
    let signs = vec![1u8; logprobs.len()];
    mix_terms(logprobs, &signs, floor)
}

/// `-Σ [φ ln p + (1 − φ) ln(1 − p)]` over clamped probabilities, with the
/// gradient with respect to each `ln p_t`.
pub fn mix_terms<T: Scalar>(logprobs: &[T], signs: &[u8], floor: f64) -> (T, Vec<T>) {
    let lo = T::of(floor);
    let hi = T::of(1.0 - floor);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logprobs.len());
    for (&lp, &phi) in logprobs.iter().zip(signs) {
        let p = lp.exp();
        let clamped = p < lo || p > hi;
        let pc = p.max(lo).min(hi);
        if phi == 1 {
            loss -= pc.ln();
            grad.push(if clamped { T::zero() } else { -T::one() });
        } else {
            loss -= (-pc).ln_1p();
            grad.push(if clamped { T::zero() } else { pc / (T::one() - pc) });
        }
    }
    (loss, grad)
}

/// Cross-entropy of the first score against all scores, with its gradient.
pub fn sentence_ce_terms<T: Scalar>(scores: &[T]) -> (T, Vec<T>) {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = scores.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s - lse).exp() - if i == 0 { T::one() } else { T::zero() })
        .collect();
    (lse - scores[0], grad)
}

pub fn mixed_contrast_loss(step_probs: &[f64], signs: &[u8], floor: f64) -> Result<f64> {
    check_floor(floor)?;
    if step_probs.len() != signs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities but {} signs",
            step_probs.len(),
            signs.len()
        )));
    }
    if let Some(p) = step_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let lps: Vec<f64> = step_probs.iter().map(|p| p.ln()).collect();
    Ok(mix_terms(&lps, signs, floor).0)
}

pub fn sentence_contrastive_from_scores(s_pos: f64, s_neg: &[f64]) -> Result<f64> {
    if s_neg.is_empty() {
        return Err(Error::InvalidArgument("sentence contrast needs at least one negative".into()));
    }
    let mut scores = vec![s_pos];
    scores.extend_from_slice(s_neg);
    Ok(sentence_ce_terms(&scores).0)
}

fn logprobs_f64<M: SequenceModel + ?Sized>(model: &M, input: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    Ok(model
        .target_logprobs(input, targets)?
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.f64()).collect())
        .collect())
}

pub fn mle_loss<M: SequenceModel + ?Sized>(model: &M, x: &[u32], y: &[u32], floor: f64) -> Result<f64> {
    check_floor(floor)?;
    Ok(mle_terms(&logprobs_f64(model, x, &[y])?[0], floor).0)
}

/// `−log p(k | k̂)` with `k̂` behind the corpus-denoising prompt.
pub fn lm_loss<M: SequenceModel + ?Sized>(
    model: &M,
    k: &[u32],
    k_hat: &[u32],
    tokenizer: &dyn Tokenizer,
    floor: f64,
) -> Result<f64> {
    if k.is_empty() || k_hat.is_empty() {
        return Err(Error::InvalidArgument("denoising needs non-empty text".into()));
    }
    let (input, _) = build_input(PromptTag::CorpusDenoising.text(), k_hat, tokenizer)?;
    let (target, _) = build_target(k, tokenizer.eos_id());
    mle_loss(model, &input, &target, floor)
}

pub fn sentence_contrastive_loss<M: SequenceModel + ?Sized>(
    model: &M,
    x: &[u32],
    z_pos: &[u32],
    negatives: &[Vec<u32>],
) -> Result<f64> {
    let mut targets: Vec<&[u32]> = vec![z_pos];
    targets.extend(negatives.iter().map(|n| n.as_slice()));
    let lps = logprobs_f64(model, x, &targets)?;
    let scores: Vec<f64> = lps.iter().map(|r| r.iter().sum()).collect();
    sentence_contrastive_from_scores(scores[0], &scores[1..])
}

/// Teacher-forced targets for the knowledge-identification input together
/// with the loss over their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub targets: Vec<Vec<u32>>,
    pub loss: ContrastLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContrastLoss {
    /// Sum of token-level mixed losses, one sign row per target.
    Mixed { signs: Vec<Vec<u8>> },
    /// Cross-entropy of target 0 against the rest by total log-probability.
    Sentence,
}

impl ContrastLoss {
    pub fn evaluate<T: Scalar>(&self, lps: &[Vec<T>], floor: f64) -> (T, Vec<Vec<T>>) {
        match self {
            ContrastLoss::Mixed { signs } => {
                let mut total = T::zero();
                let mut grads = Vec::with_capacity(lps.len());
                for (lp, s) in lps.iter().zip(signs) {
                    let (v, g) = mix_terms(lp, s, floor);
                    total += v;
                    grads.push(g);
                }
                (total, grads)
            }
            ContrastLoss::Sentence => {
                let scores: Vec<T> = lps.iter().map(|r| r.iter().copied().sum()).collect();
                let (v, gs) = sentence_ce_terms(&scores);
                (v, lps.iter().zip(gs).map(|(r, g)| vec![g; r.len()]).collect())
            }
        }
    }
}

pub struct ContrastContext<'a> {
    pub extractors: &'a Extractors,
    pub tokenizer: &'a dyn Tokenizer,
    pub beta_span: f64,
}

pub trait ContrastObjective: Send + Sync {
    fn name(&self) -> &str;
    fn build(
        &self,
        positive: &KnowledgeSnippet,
        negatives: &[KnowledgeSnippet],
        ctx: &ContrastContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ContrastBatch>;
}

fn with_eos(tokens: &[u32], eos: u32) -> Vec<u32> {
    build_target(tokens, eos).0
}

/// One mixed sequence per negative; the appended eos carries sign 1.
#[derive(Debug, Clone, Default)]
pub struct MixedObjective;

impl ContrastObjective for MixedObjective {
    fn name(&self) -> &str {
        "mixed"
    }

    fn build(
        &self,
        positive: &KnowledgeSnippet,
        negatives: &[KnowledgeSnippet],
        ctx: &ContrastContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ContrastBatch> {
        let mut targets = Vec::with_capacity(negatives.len());
        let mut signs = Vec::with_capacity(negatives.len());
        for neg in negatives {
            let mixed = mix_with_fallback(positive, neg, ctx.beta_span, ctx.extractors, ctx.tokenizer, rng)?;
            let t = with_eos(&mixed.tokens, ctx.tokenizer.eos_id());
            let mut s = mixed.signs[..t.len() - 1].to_vec();
            s.push(1);
            targets.push(t);
            signs.push(s);
        }
        Ok(ContrastBatch {
            targets,
            loss: ContrastLoss::Mixed { signs },
        })
    }
}

/// Whole-sequence contrast of the positive against every negative.
#[derive(Debug, Clone, Default)]
pub struct SentenceObjective;

impl ContrastObjective for SentenceObjective {
    fn name(&self) -> &str {
        "sentence"
    }

    fn build(
        &self,
        positive: &KnowledgeSnippet,
        negatives: &[KnowledgeSnippet],
        ctx: &ContrastContext<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ContrastBatch> {
        if negatives.is_empty() {
            return Err(Error::InvalidArgument("sentence contrast needs at least one negative".into()));
        }
        let eos = ctx.tokenizer.eos_id();
        let mut targets = vec![with_eos(&ctx.tokenizer.encode(&positive.text), eos)];
        targets.extend(negatives.iter().map(|n| with_eos(&ctx.tokenizer.encode(&n.text), eos)));
        Ok(ContrastBatch {
            targets,
            loss: ContrastLoss::Sentence,
        })
    }
}

pub fn builtin_objectives() -> Registry<dyn ContrastObjective> {
    let mut reg: Registry<dyn ContrastObjective> = Registry::new("contrast objective");
    reg.register("mixed", |_: &()| Box::new(MixedObjective));
    reg.register("sentence", |_: &()| Box::new(SentenceObjective));
    reg
}

/// Sum over the negatives of the mixed loss under the
/// knowledge-identification input `x`.
pub fn mcl_loss<M: SequenceModel + ?Sized>(
    model: &M,
    x: &[u32],
    z_pos: &KnowledgeSnippet,
    negatives: &[KnowledgeSnippet],
    ctx: &ContrastContext<'_>,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_floor(floor)?;
    let batch = MixedObjective.build(z_pos, negatives, ctx, rng)?;
    let targets: Vec<&[u32]> = batch.targets.iter().map(|t| t.as_slice()).collect();
    Ok(batch.loss.evaluate(&logprobs_f64(model, x, &targets)?, floor).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeightSchedule {
    pub alpha_init: [f64; 3],
    pub alpha_final: [f64; 3],
    pub total_steps: usize,
}

impl Default for LossWeightSchedule {
    fn default() -> Self {
        Self {
            alpha_init: [0.4, 0.3, 0.3],
            alpha_final: [0.5, 0.5, 0.0],
            total_steps: 1000,
        }
    }
}

impl LossWeightSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.alpha_init.iter().chain(&self.alpha_final).any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Linear interpolation between the initial and final weights; steps past
/// the end keep the final weights.
pub fn loss_weights(step: usize, schedule: &LossWeightSchedule) -> [f64; 3] {
    let s = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    let mut w = [0.0; 3];
    for i in 0..3 {
        w[i] = (1.0 - s) * schedule.alpha_init[i] + s * schedule.alpha_final[i];
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    Mask,
    Delete,
    Infill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Weights of mask, delete, infill.
    pub mode_weights: [f64; 3],
    pub mask_rate: f64,
    pub infill_mean: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mode_weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            mask_rate: 0.15,
            infill_mean: 3.0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mode_weights.iter().sum();
        if self.mode_weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("corruption mode weights must be non-negative and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(self.infill_mean > 0.0) {
            return Err(Error::Config("mask_rate must lie in [0, 1] and infill_mean be positive".into()));
        }
        Ok(())
    }
}

/// Replaces `ids[start..start + len]` with a single mask id.
pub fn infill_span(ids: &[u32], start: usize, len: usize, mask_id: u32) -> Vec<u32> {
    let end = (start + len).min(ids.len());
    let mut out = ids[..start].to_vec();
    out.push(mask_id);
    out.extend_from_slice(&ids[end..]);
    out
}

/// Corrupts `k` with one mode drawn from the configured weights. Bos and eos
/// are never touched.
pub fn corrupt<R: Rng + ?Sized>(
    k: &[u32],
    config: &CorruptionConfig,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Vec<u32> {
    let u: f64 = rng.random();
    let mode = if u < config.mode_weights[0] {
        CorruptionMode::Mask
    } else if u < config.mode_weights[0] + config.mode_weights[1] {
        CorruptionMode::Delete
    } else {
        CorruptionMode::Infill
    };
    corrupt_with(k, mode, config, tokenizer, rng)
}

pub fn corrupt_with<R: Rng + ?Sized>(
    k: &[u32],
    mode: CorruptionMode,
    config: &CorruptionConfig,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Vec<u32> {
    let reserved = |id: u32| id == tokenizer.bos_id() || id == tokenizer.eos_id();
    let mask = tokenizer.mask_id();
    match mode {
        CorruptionMode::Mask => k
            .iter()
            .map(|&id| {
                if !reserved(id) && config.mask_rate > 0.0 && rng.random_bool(config.mask_rate) {
                    mask
                } else {
                    id
                }
            })
            .collect(),
        CorruptionMode::Delete => {
            let out: Vec<u32> = k
                .iter()
                .copied()
                .filter(|&id| reserved(id) || config.mask_rate == 0.0 || !rng.random_bool(config.mask_rate))
                .collect();
            if out.is_empty() {
                vec![mask]
            } else {
                out
            }
        }
        CorruptionMode::Infill => {
            if config.mask_rate == 0.0 {
                return k.to_vec();
            }
            let movable: Vec<usize> = (0..k.len()).filter(|&i| !reserved(k[i])).collect();
            let Some(&start) = movable.choose(rng) else {
                return k.to_vec();
            };
            let poisson = Poisson::new(config.infill_mean).expect("positive mean");
            let mut len = poisson.sample(rng) as usize;
            // The span stays inside the run of non-reserved tokens.
            let mut room = 0;
            while start + room < k.len() && !reserved(k[start + room]) {
                room += 1;
            }
            len = len.min(room);
            infill_span(k, start, len, mask)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_mcl: bool,
    pub disable_lm: bool,
    pub random_negatives: bool,
    pub disable_model_negatives: bool,
    pub mle_only: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            disable_mcl: false,
            disable_lm: false,
            random_negatives: false,
            disable_model_negatives: false,
            mle_only: false,
        }
    }
}

impl AblationFlags {
    pub fn parse(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "base" => {}
            "disable_mcl" | "wo_mcl" => f.disable_mcl = true,
            "disable_lm" | "wo_lm" => f.disable_lm = true,
            "random_negatives" => f.random_negatives = true,
            "disable_model_negatives" | "wo_model_negatives" => f.disable_model_negatives = true,
            "mle_only" => f.mle_only = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (known: base, disable_mcl, disable_lm, random_negatives, disable_model_negatives, mle_only)"
                )))
            }
        }
        Ok(f)
    }

    pub fn name(&self) -> &'static str {
        if self.mle_only {
            "mle_only"
        } else if self.disable_mcl {
            "disable_mcl"
        } else if self.disable_lm {
            "disable_lm"
        } else if self.random_negatives {
            "random_negatives"
        } else if self.disable_model_negatives {
            "disable_model_negatives"
        } else {
            "base"
        }
    }

    pub fn use_mcl(&self) -> bool {
        !self.mle_only && !self.disable_mcl
    }

    pub fn use_lm(&self) -> bool {
        !self.mle_only && !self.disable_lm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub m: usize,
    pub beta_neg: f64,
    pub beta_span: f64,
    pub prob_floor: f64,
    #[serde(flatten)]
    pub ablation: AblationFlags,
    pub objective: String,
    #[serde(flatten)]
    pub corruption: CorruptionConfig,
    #[serde(flatten)]
    pub schedule: LossWeightSchedule,
    /// Model samples per context when refreshing generated negatives.
    pub refresh_samples: usize,
    pub sample_temperature: f64,
    pub retrieval_pool: usize,
    /// Validation examples decoded at each epoch end (0 disables selection).
    pub validation_limit: usize,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            clip_norm: 0.1,
            epochs: 5,
            batch_size: 16,
            seed: 13,
            m: 8,
            beta_neg: 0.5,
            beta_span: 0.5,
            prob_floor: PROB_FLOOR,
            ablation: AblationFlags::default(),
            objective: "mixed".into(),
            corruption: CorruptionConfig::default(),
            schedule: LossWeightSchedule::default(),
            refresh_samples: 4,
            sample_temperature: 1.0,
            retrieval_pool: 20,
            validation_limit: 64,
            max_decode_len: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 0.5) {
            return bad(format!("prob_floor must lie in (0, 0.5), got {}", self.prob_floor));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.m == 0 {
            return bad("epochs, batch_size and m must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta_neg) || !(0.0..=1.0).contains(&self.beta_span) {
            return bad("beta_neg and beta_span must lie in [0, 1]".into());
        }
        self.corruption.validate()?;
        self.schedule.validate()
    }
}

/// Scales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn describe(&self) -> String {
        format!("adamw(wd={})", self.weight_decay)
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i].f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let p = params[i].f64();
            let update = self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p);
            params[i] = T::of(p - update);
        }
    }
}

/// Inputs and targets of each loss term for one example, with all
/// randomness already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTerms {
    pub mle: Option<(Vec<u32>, Vec<u32>)>,
    pub contrast: Option<(Vec<u32>, ContrastBatch)>,
    pub lm: Option<(Vec<u32>, Vec<u32>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermLosses {
    pub mle: Option<f64>,
    pub mcl: Option<f64>,
    pub lm: Option<f64>,
}

impl TermLosses {
    pub fn weighted(&self, w: [f64; 3]) -> f64 {
        w[0] * self.mle.unwrap_or(0.0) + w[1] * self.mcl.unwrap_or(0.0) + w[2] * self.lm.unwrap_or(0.0)
    }
}

fn finite(value: f64, term: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// Evaluates each prepared term, adding `scale · α_i · ∂L_i/∂θ` into `grad`.
pub fn accumulate_terms<M: SequenceModel + ?Sized>(
    model: &M,
    terms: &PreparedTerms,
    weights: [f64; 3],
    scale: f64,
    floor: f64,
    step: usize,
    grad: &mut [M::Real],
) -> Result<TermLosses> {
    let mut out = TermLosses::default();
    let mle_fn = |lps: &[Vec<M::Real>]| -> Result<(M::Real, Vec<Vec<M::Real>>)> {
        let (v, g) = mle_terms(&lps[0], floor);
        Ok((v, vec![g]))
    };
    if let Some((x, y)) = &terms.mle {
        let v = model.loss_gradient(x, &[y], &mle_fn, M::Real::of(scale * weights[0]), grad)?;
        out.mle = Some(finite(v.f64(), "L_MLE", step)?);
    }
    if let Some((x, batch)) = &terms.contrast {
        let targets: Vec<&[u32]> = batch.targets.iter().map(|t| t.as_slice()).collect();
        let f = |lps: &[Vec<M::Real>]| Ok(batch.loss.evaluate(lps, floor));
        let v = model.loss_gradient(x, &targets, &f, M::Real::of(scale * weights[1]), grad)?;
        out.mcl = Some(finite(v.f64(), "L_MCL", step)?);
    }
    if let Some((x, y)) = &terms.lm {
        let v = model.loss_gradient(x, &[y], &mle_fn, M::Real::of(scale * weights[2]), grad)?;
        out.lm = Some(finite(v.f64(), "L_LM", step)?);
    }
    Ok(out)
}

/// Loss values of the prepared terms without gradients.
pub fn evaluate_terms<M: SequenceModel + ?Sized>(model: &M, terms: &PreparedTerms, floor: f64) -> Result<TermLosses> {
    let mut out = TermLosses::default();
    if let Some((x, y)) = &terms.mle {
        out.mle = Some(mle_terms(&logprobs_f64(model, x, &[y])?[0], floor).0);
    }
    if let Some((x, batch)) = &terms.contrast {
        let targets: Vec<&[u32]> = batch.targets.iter().map(|t| t.as_slice()).collect();
        out.mcl = Some(batch.loss.evaluate(&logprobs_f64(model, x, &targets)?, floor).0);
    }
    if let Some((x, y)) = &terms.lm {
        out.lm = Some(mle_terms(&logprobs_f64(model, x, &[y])?[0], floor).0);
    }
    Ok(out)
}

/// A dialogue example encoded once for training.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub mle_input: Vec<u32>,
    pub mle_target: Vec<u32>,
    pub ki_input: Vec<u32>,
    pub positives: Vec<KnowledgeSnippet>,
    pub context_text: String,
}

impl TrainExample {
    pub fn encode(ex: &DialogueExample, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let body = encode_context(&ex.context, tokenizer);
        let (mle_input, _) = build_input(PromptTag::ResponseGeneration.text(), &body, tokenizer)?;
        let (ki_input, _) = build_input(PromptTag::KnowledgeIdentification.text(), &body, tokenizer)?;
        let (mle_target, _) = build_target(&tokenizer.encode(&ex.response), tokenizer.eos_id());
        Ok(Self {
            id: ex.id.clone(),
            mle_input,
            mle_target,
            ki_input,
            positives: ex.positives.clone(),
            context_text: ex.context_text(),
        })
    }
}

/// Shared, read-only state for preparing terms.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub tokenizer: &'a dyn Tokenizer,
    pub extractors: &'a Extractors,
    pub objective: &'a dyn ContrastObjective,
    pub corpus: &'a [KnowledgeSnippet],
    pub negatives: &'a HashMap<String, NegativeSet>,
}

/// Draws this step's positive, negatives, mixes and corruption for one
/// example. Terms whose weight is zero or that are ablated are omitted.
pub fn prepare_terms(
    ex: &TrainExample,
    ctx: &StepContext<'_>,
    weights: [f64; 3],
    step: usize,
) -> Result<PreparedTerms> {
    let cfg = ctx.config;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["step", &step.to_string(), &ex.id]));
    let mle = (weights[0] > 0.0).then(|| (ex.mle_input.clone(), ex.mle_target.clone()));

    let mut contrast = None;
    if cfg.ablation.use_mcl() && weights[1] > 0.0 && !ex.positives.is_empty() {
        let positive = ex.positives.choose(&mut rng).expect("non-empty positives");
        let negs = if cfg.ablation.random_negatives {
            random_negatives(ctx.corpus, &ex.positives, cfg.m, &mut rng)
        } else {
            ctx.negatives
                .get(&ex.id)
                .map(|set| {
                    set.negatives
                        .iter()
                        .map(|n| KnowledgeSnippet::new(n.id.clone(), "", n.text.clone()))
                        .collect()
                })
                .unwrap_or_default()
        };
        if !negs.is_empty() {
            let cctx = ContrastContext {
                extractors: ctx.extractors,
                tokenizer: ctx.tokenizer,
                beta_span: cfg.beta_span,
            };
            let batch = ctx.objective.build(positive, &negs, &cctx, &mut rng)?;
            contrast = Some((ex.ki_input.clone(), batch));
        }
    }

    let mut lm = None;
    if cfg.ablation.use_lm() && weights[2] > 0.0 && !ctx.corpus.is_empty() {
        let k = ctx.corpus.choose(&mut rng).expect("non-empty corpus");
        let k_ids = ctx.tokenizer.encode(&k.text);
        if !k_ids.is_empty() {
            let k_ids = &k_ids[..k_ids.len().min(MAX_OUTPUT_LEN - 1)];
            let k_hat = corrupt(k_ids, &cfg.corruption, ctx.tokenizer, &mut rng);
            let (input, _) = build_input(PromptTag::CorpusDenoising.text(), &k_hat, ctx.tokenizer)?;
            let (target, _) = build_target(k_ids, ctx.tokenizer.eos_id());
            lm = Some((input, target));
        }
    }
    Ok(PreparedTerms { mle, contrast, lm })
}

fn random_negatives(
    corpus: &[KnowledgeSnippet],
    positives: &[KnowledgeSnippet],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<KnowledgeSnippet> {
    let pos: Vec<String> = positives.iter().map(|p| normalize(&p.text)).collect();
    let pool: Vec<&KnowledgeSnippet> = corpus.iter().filter(|s| !pos.contains(&normalize(&s.text))).collect();
    if pool.is_empty() {
        return Vec::new();
    }
    (0..m).map(|_| (*pool.choose(rng).expect("non-empty pool")).clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    #[serde(rename = "L_MLE")]
    pub l_mle: Option<f64>,
    #[serde(rename = "L_MCL")]
    pub l_mcl: Option<f64>,
    #[serde(rename = "L_LM")]
    pub l_lm: Option<f64>,
    #[serde(rename = "J")]
    pub j: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a batch: `J = Σ α_i L_i` averaged over the batch,
/// gradient clipped to `clip_norm`, then applied.
pub fn joint_step<M: SequenceModel>(
    model: &mut M,
    optimizer: &mut Adam,
    batch: &[&TrainExample],
    step: usize,
    epoch: usize,
    ctx: &StepContext<'_>,
) -> Result<LogRecord> {
    let cfg = ctx.config;
    let weights = loss_weights(step, &cfg.schedule);
    let scale = 1.0 / batch.len().max(1) as f64;
    let n = model.parameters().len();
    let per_example: Vec<Result<(TermLosses, Vec<M::Real>)>> = {
        let model = &*model;
        batch
            .par_iter()
            .map(|ex| {
                let terms = prepare_terms(ex, ctx, weights, step)?;
                let mut g = vec![M::Real::of(0.0); n];
                let losses = accumulate_terms(model, &terms, weights, scale, cfg.prob_floor, step, &mut g)?;
                Ok((losses, g))
            })
            .collect()
    };
    let mut grad = vec![M::Real::of(0.0); n];
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut j = 0.0;
    for r in per_example {
        let (losses, g) = r?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
        for (i, v) in [losses.mle, losses.mcl, losses.lm].into_iter().enumerate() {
            if let Some(v) = v {
                sums[i] += v;
                counts[i] += 1;
            }
        }
        j += losses.weighted(weights) * scale;
    }
    let j = finite(j, "J", step)?;
    let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { term: "gradient", step });
    }
    optimizer.step(model.parameters_mut(), &grad);
    let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    Ok(LogRecord {
        step,
        epoch,
        alpha1: weights[0],
        alpha2: weights[1],
        alpha3: weights[2],
        l_mle: mean(0),
        l_mcl: mean(1),
        l_lm: mean(2),
        j,
        grad_norm,
    })
}

/// Number of optimizer steps for `n` examples.
pub fn steps_for(n: usize, config: &TrainConfig) -> usize {
    config.epochs * n.div_ceil(config.batch_size)
}

pub struct TrainInputs<'a> {
    pub train: &'a [DialogueExample],
    pub validation: &'a [DialogueExample],
    pub index: &'a TfIdfIndex,
    pub tokenizer: &'a dyn Tokenizer,
    pub extractors: &'a Extractors,
    pub filter: &'a dyn EntailmentFilter,
    /// Negative sets mined before training, keyed by example id.
    pub negatives: HashMap<String, NegativeSet>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<LogRecord>,
    /// Parameters with the best validation F1 (the final ones when
    /// validation is disabled).
    pub best_params: Vec<T>,
    pub best_epoch: usize,
    pub validation_f1: Vec<f64>,
}

/// Trains `model` in place and returns the log and selected parameters.
pub fn train<M: SequenceModel>(model: &mut M, mut inputs: TrainInputs<'_>, config: &TrainConfig) -> Result<TrainOutcome<M::Real>> {
    config.validate()?;
    let objective = builtin_objectives().create(&config.objective, &())?;
    let examples: Vec<TrainExample> = inputs
        .train
        .iter()
        .map(|ex| TrainExample::encode(ex, inputs.tokenizer))
        .collect::<Result<_>>()?;
    let mut negatives = std::mem::take(&mut inputs.negatives);
    let mut optimizer = Adam::new(model.parameters().len(), config.learning_rate);
    let mut log = Vec::new();
    let mut step = 0;
    let mut best: Option<(f64, usize, Vec<M::Real>)> = None;
    let mut validation_f1 = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.epochs {
        if epoch > 0 && config.ablation.use_mcl() && !config.ablation.disable_model_negatives && !config.ablation.random_negatives {
            negatives = refresh_negatives(&*model, &inputs, config, epoch)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);
        let ctx = StepContext {
            config,
            tokenizer: inputs.tokenizer,
            extractors: inputs.extractors,
            objective: objective.as_ref(),
            corpus: inputs.index.snippets(),
            negatives: &negatives,
        };
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            log.push(joint_step(model, &mut optimizer, &batch, step, epoch, &ctx)?);
            step += 1;
        }
        if config.validation_limit > 0 && !inputs.validation.is_empty() {
            let f1 = validation_score(&*model, &inputs.validation[..inputs.validation.len().min(config.validation_limit)], inputs.tokenizer, config.max_decode_len)?;
            validation_f1.push(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.parameters().to_vec()));
            }
        }
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (config.epochs - 1, model.parameters().to_vec()),
    };
    Ok(TrainOutcome {
        log,
        best_params,
        best_epoch,
        validation_f1,
    })
}

/// Mean unigram F1 of greedy responses against the gold responses.
pub fn validation_score<M: SequenceModel + ?Sized>(
    model: &M,
    examples: &[DialogueExample],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<f64> {
    let scores: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let enc = TrainExample::encode(ex, tokenizer)?;
            let out = greedy_decode(model, &enc.mle_input, max_len)?;
            Ok(unigram_f1(&tokenizer.decode(&out), &ex.response))
        })
        .collect();
    let total: f64 = scores.into_iter().collect::<Result<Vec<_>>>()?.iter().sum();
    Ok(total / examples.len().max(1) as f64)
}

/// Re-draws every negative set with generated candidates from the current
/// model mixed with retrieval candidates.
fn refresh_negatives<M: SequenceModel>(
    model: &M,
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<HashMap<String, NegativeSet>> {
    let sets: Vec<Result<Option<NegativeSet>>> = inputs
        .train
        .par_iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["refresh", &epoch.to_string(), &ex.id]));
            let positives: Vec<&str> = ex.positives.iter().map(|p| p.text.as_str()).collect();
            let ret = retrieved_negatives(&ex.context_text(), inputs.index, &positives, config.retrieval_pool, inputs.tokenizer);
            let ki = TrainExample::encode(ex, inputs.tokenizer)?.ki_input;
            let gen = model_generated_negatives(
                model,
                &ki,
                &positives,
                inputs.filter,
                config.refresh_samples,
                config.sample_temperature,
                inputs.tokenizer,
                &mut rng,
                &ex.id,
            )?;
            match sample_negative_set(&ex.id, &ret, &gen, config.beta_neg, config.m, &mut rng) {
                Ok(s) => Ok(Some(s)),
                Err(Error::NoNegatives(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = HashMap::new();
    for s in sets {
        if let Some(s) = s? {
            out.insert(s.context_id.clone(), s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_tokenizer;
    use crate::model::toy::{TableModel, UniformModel};
    use proptest::prelude::*;

    #[test]
    fn mle_oracles() {
        let m = UniformModel::new(4);
        assert!((mle_loss(&m, &[0], &[1, 2], PROB_FLOOR).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);

        let mut one = vec![0.0; 4];
        one[2] = 1.0;
        let perfect = TableModel::<f64>::from_probs(vec![one]);
        let v = mle_loss(&perfect, &[0], &[2, 2], PROB_FLOOR).unwrap();
        assert!((v - (-2.0 * (1.0 - 1e-7f64).ln())).abs() < 1e-12, "{v}");

        let table = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.25, 0.25, 0.25, 0.25], vec![0.7, 0.1, 0.1, 0.1]];
        let t = TableModel::<f64>::from_probs(table);
        let expected = -(0.4f64 * 0.25 * 0.1).ln();
        assert!((mle_loss(&t, &[0], &[3, 0, 1], PROB_FLOOR).unwrap() - expected).abs() < 1e-12);
        assert!(mle_loss(&t, &[0], &[9], PROB_FLOOR).is_err());
    }

    #[test]
    fn mixed_oracles() {
        let v = mixed_contrast_loss(&[0.5, 0.25], &[1, 0], PROB_FLOOR).unwrap();
        assert!((v - (-(0.5f64.ln() + 0.75f64.ln()))).abs() < 1e-12);
        assert!((v - 0.9808).abs() < 1e-4);
        let v = mixed_contrast_loss(&[1e-7], &[0], PROB_FLOOR).unwrap();
        assert!((v - 1e-7).abs() < 1e-12);
        assert!(mixed_contrast_loss(&[0.5], &[1, 0], PROB_FLOOR).is_err());
    }

    #[test]
    fn sentence_oracles() {
        assert!((sentence_contrastive_from_scores(-3.0, &[-3.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(sentence_contrastive_from_scores(500.0, &[0.0, -1.0]).unwrap() < 1e-12);
        let v = sentence_contrastive_from_scores(0.0, &[-1.0, -2.0]).unwrap();
        let expected = -(1.0 / (1.0 + (-1f64).exp() + (-2f64).exp())).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.4076).abs() < 1e-4);
        assert!(sentence_contrastive_from_scores(0.0, &[]).is_err());
    }

    #[test]
    fn lm_oracles() {
        let tok = build_tokenizer(["a b c"], 10).unwrap();
        let m = UniformModel::new(tok.vocab_size());
        let k = tok.encode("a b");
        // target is k plus eos: three positions
        let v = lm_loss(&m, &k, &k, &tok, PROB_FLOOR).unwrap();
        assert!((v - 3.0 * (tok.vocab_size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn schedule_points() {
        let s = LossWeightSchedule {
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(loss_weights(0, &s), [0.4, 0.3, 0.3]);
        assert_eq!(loss_weights(100, &s), [0.5, 0.5, 0.0]);
        assert_eq!(loss_weights(250, &s), [0.5, 0.5, 0.0]);
        let mid = loss_weights(50, &s);
        for (a, b) in mid.iter().zip([0.45, 0.4, 0.15]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corruption_rules() {
        let tok = build_tokenizer(["a b c d e"], 20).unwrap();
        let k = tok.encode("a b c d e");
        let none = CorruptionConfig {
            mask_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(corrupt(&k, &none, &tok, &mut rng), k);
        }
        let infilled = infill_span(&k, 1, 3, tok.mask_id());
        assert_eq!(infilled.len(), k.len() - 2);
        let masks = |v: &[u32]| v.iter().filter(|&&i| i == tok.mask_id()).count();
        assert_eq!(masks(&infilled), masks(&k) + 1);

        let all = CorruptionConfig {
            mask_rate: 1.0,
            ..Default::default()
        };
        let with_eos = [k.clone(), vec![tok.eos_id()]].concat();
        let masked = corrupt_with(&with_eos, CorruptionMode::Mask, &all, &tok, &mut rng);
        assert_eq!(*masked.last().unwrap(), tok.eos_id());
        let deleted = corrupt_with(&with_eos, CorruptionMode::Delete, &all, &tok, &mut rng);
        assert_eq!(deleted, vec![tok.eos_id()]);
    }

    #[test]
    fn delete_one_of_five() {
        let tok = build_tokenizer(["a b c d e"], 20).unwrap();
        let k = tok.encode("a b c d e");
        let cfg = CorruptionConfig {
            mask_rate: 0.2,
            ..Default::default()
        };
        let mut seen = false;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = corrupt_with(&k, CorruptionMode::Delete, &cfg, &tok, &mut rng);
            let removed = k.len() - out.len();
            if removed == 1 {
                assert_eq!(out.len(), 4);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![6.0f64, 8.0];
        let norm = clip_global_norm(&mut g, 0.1);
        assert_eq!(norm, 10.0);
        assert!((g[0] - 0.06).abs() < 1e-15 && (g[1] - 0.08).abs() < 1e-15);
        let mut small = vec![0.01f64, 0.02];
        clip_global_norm(&mut small, 0.1);
        assert_eq!(small, vec![0.01, 0.02]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(3, 1e-3);
        let mut p = vec![0.5f32, -1.0, 2.0];
        opt.step(&mut p, &[0.0f32; 3]);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn ablation_names_roundtrip() {
        for name in ["base", "disable_mcl", "disable_lm", "random_negatives", "disable_model_negatives", "mle_only"] {
            assert_eq!(AblationFlags::parse(name).unwrap().name(), name);
        }
        assert!(AblationFlags::parse("nope").is_err());
        let f = AblationFlags::parse("mle_only").unwrap();
        assert!(!f.use_mcl() && !f.use_lm());
    }

    #[test]
    fn objective_registry() {
        let reg = builtin_objectives();
        assert_eq!(reg.create("mixed", &()).unwrap().name(), "mixed");
        assert_eq!(reg.create("sentence", &()).unwrap().name(), "sentence");
        assert!(reg.create("triplet", &()).is_err());
    }

    proptest! {
        #[test]
        fn all_ones_reduces_to_mle(lps in prop::collection::vec(-12.0f64..0.0, 1..40)) {
            let signs = vec![1u8; lps.len()];
            let a = mix_terms(&lps, &signs, PROB_FLOOR).0;
            let b = mle_terms(&lps, PROB_FLOOR).0;
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-300));
        }

        #[test]
        fn monotone_in_each_probability(
            probs in prop::collection::vec(0.01f64..0.98, 1..10),
            signs in prop::collection::vec(0u8..2, 10),
            pick in 0usize..10,
        ) {
            let signs = &signs[..probs.len()];
            let j = pick % probs.len();
            let base = mixed_contrast_loss(&probs, signs, PROB_FLOOR).unwrap();
            let mut up = probs.clone();
            up[j] += 0.01;
            let moved = mixed_contrast_loss(&up, signs, PROB_FLOOR).unwrap();
            if signs[j] == 0 {
                prop_assert!(moved > base);
            } else {
                prop_assert!(moved < base);
            }
        }

        #[test]
        fn schedule_is_affine(a in 0usize..500, b in 0usize..500) {
            prop_assume!((a + b) % 2 == 0);
            let s = LossWeightSchedule { total_steps: 500, ..Default::default() };
            let (wa, wb, wm) = (loss_weights(a, &s), loss_weights(b, &s), loss_weights((a + b) / 2, &s));
            for i in 0..3 {
                prop_assert!((wa[i] + wb[i] - 2.0 * wm[i]).abs() < 1e-12);
                prop_assert!(wa[i] >= 0.0);
            }
        }

        #[test]
        fn clip_bound_holds(g in prop::collection::vec(-100.0f64..100.0, 1..50)) {
            let mut g = g;
            let pre = clip_global_norm(&mut g, 0.1);
            let post = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if pre > 0.1 {
                prop_assert!(post <= 0.1 + 1e-9);
            }
        }
    }
}
