use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, forward_batch, patchify_batch, BatchCycler};
use crate::numerics::{argmax, mean_entropy, softmax_rows, Tape, Tensor};
use crate::optim::AdamW;
use crate::ot::{cost_labeled, ot_grad_targets, sinkhorn, uniform_weights};
use crate::rng;
use crate::{PromptSet, ViTParams};

use super::{AdaptationConfig, Method, RepresentationBank};

/// Warm-up batch count when the stream length is unknown.
pub const FALLBACK_WARMUP_BATCHES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub probs: Tensor<f64>,
    pub mean_entropy: f64,
}

/// Argmax predictions (lowest index wins ties), class probabilities and
/// their mean entropy.
pub fn pseudo_label(params: &ViTParams, prompts: Option<&PromptSet>, images: &Tensor<f64>) -> Result<PseudoLabels> {
    let (logits, _) = forward_batch(params, prompts, images)?;
    Ok(from_logits(&logits))
}

fn from_logits(logits: &Tensor<f64>) -> PseudoLabels {
    let probs = softmax_rows(logits);
    let labels = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let mean_entropy = if logits.rows() == 0 { 0.0 } else { mean_entropy(&probs) };
    PseudoLabels { labels, probs, mean_entropy }
}

pub fn predict(params: &ViTParams, prompts: Option<&PromptSet>, images: &Tensor<f64>) -> Result<Vec<usize>> {
    Ok(pseudo_label(params, prompts, images)?.labels)
}

/// Telemetry of one optimization step, measured before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Transport value of the plan used for the gradient (OT objectives only).
    pub ot_value: Option<f64>,
    pub mean_entropy: f64,
    pub loss: f64,
    pub sinkhorn_iterations: Option<usize>,
    pub marginal_violation: Option<f64>,
    pub converged: Option<bool>,
    /// Wall-clock time since the run started, at the end of this step.
    pub elapsed_ms: f64,
}

/// Mutable state of one prompt-optimization run.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub prompts: PromptSet,
    pub optimizer: AdamW<f64>,
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub started: Instant,
}

impl AdaptationState {
    pub fn new(params: &ViTParams, cfg: &AdaptationConfig) -> Result<Self> {
        let prompts = PromptSet::init(cfg.prompt_len, params.config.embed_dim, cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer(), &[prompts.tokens().numel()]);
        Ok(AdaptationState { prompts, optimizer, step: 0, history: Vec::new(), started: Instant::now() })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Objective {
    Transport { lambda: f64 },
    Entropy,
}

/// One forward, objective, backward and AdamW update on `patches`.
pub(crate) fn prompt_step(
    params: &ViTParams,
    state: &mut AdaptationState,
    patches: &Tensor<f64>,
    objective: Objective,
    bank: Option<&RepresentationBank>,
    cfg: &AdaptationConfig,
) -> Result<()> {
    let step = state.step + 1;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false)?;
    let gamma = tape.param(state.prompts.tokens().clone())?;
    let enc = encode(&mut tape, params, &vars, patches, Some(gamma))?;
    let current = from_logits(tape.value(enc.logits));
    let mut record = StepRecord {
        step,
        ot_value: None,
        mean_entropy: current.mean_entropy,
        loss: 0.0,
        sinkhorn_iterations: None,
        marginal_violation: None,
        converged: None,
        elapsed_ms: 0.0,
    };
    let grads = match objective {
        Objective::Transport { lambda } => {
            let bank = bank.ok_or(Error::Empty("representation bank"))?;
            let (zs, ys) = bank.subsample(cfg.source_cap, rng::derive_index(rng::derive(cfg.seed, "source"), step as u64));
            let zt = tape.value(enc.z).clone();
            let cost = cost_labeled(&zs, &ys, &zt, &current.labels, lambda)?;
            let plan = sinkhorn(&uniform_weights(zs.rows()), &uniform_weights(zt.rows()), &cost, &cfg.sinkhorn)?;
            let g = ot_grad_targets(&plan, &zs, &zt)?;
            record.ot_value = Some(plan.value);
            record.loss = plan.value;
            record.sinkhorn_iterations = Some(plan.iterations);
            record.marginal_violation = Some(plan.marginal_violation);
            record.converged = Some(plan.converged);
            tape.backward_with_seed(enc.z, &g)?
        }
        Objective::Entropy => {
            let probs = tape.softmax(enc.logits)?;
            let h = tape.entropy(probs)?;
            record.loss = tape.value(h).item();
            tape.backward(h)?
        }
    };
    let g = grads.slice(gamma).ok_or_else(|| Error::Invalid("prompt received no gradient".into()))?;
    state.optimizer.step(&mut [state.prompts.tokens_mut().data_mut()], &[g]);
    if !state.prompts.tokens().is_finite() {
        return Err(Error::NonFinite { op: "prompt update" });
    }
    state.step = step;
    record.elapsed_ms = state.started.elapsed().as_secs_f64() * 1e3;
    state.history.push(record);
    Ok(())
}

/// Final prompts and per-step telemetry of an offline run.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub prompts: PromptSet,
    pub history: Vec<StepRecord>,
}

pub(crate) fn run_offline(
    params: &ViTParams,
    bank: Option<&RepresentationBank>,
    images: &Tensor<f64>,
    cfg: &AdaptationConfig,
    objective: Objective,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if images.shape().first().is_none_or(|&n| n == 0) {
        return Err(Error::Empty("target data"));
    }
    let patches = patchify_batch(images, &params.config)?;
    let mut state = AdaptationState::new(params, cfg)?;
    let mut batches = BatchCycler::new(patches.shape()[0], cfg.batch_size, rng::derive(cfg.seed, "target-batches"));
    for _ in 0..cfg.steps {
        let batch = patches.gather_rows(&batches.next_batch());
        prompt_step(params, &mut state, &batch, objective, bank, cfg)?;
    }
    Ok(AdaptOutcome { prompts: state.prompts, history: state.history })
}

/// Offline prompt optimization against the source bank (`otvp` / `otvp-b`).
pub fn adapt_offline(
    params: &ViTParams,
    bank: &RepresentationBank,
    images: &Tensor<f64>,
    cfg: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    if !matches!(cfg.method, Method::Otvp | Method::OtvpB) {
        return Err(Error::Invalid(format!("adapt_offline needs otvp or otvp-b, got {}", cfg.method)));
    }
    bank.verify(params)?;
    if bank.is_empty() {
        return Err(Error::Empty("representation bank"));
    }
    run_offline(params, Some(bank), images, cfg, Objective::Transport { lambda: cfg.effective_lambda() })
}

/// Per-batch result of an online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineBatch {
    pub index: usize,
    pub warmup: bool,
    pub steps: usize,
    /// Predictions made after this batch's own update.
    pub predictions: Vec<usize>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub prompts: PromptSet,
    pub batches: Vec<OnlineBatch>,
    pub history: Vec<StepRecord>,
    pub warmup_batches: usize,
}

/// Streaming adaptation with one shared prompt set: `warmup_steps` updates
/// on each warm-up batch, `online_steps` afterwards, predicting every batch
/// right after its update. The warm-up count comes from the iterator's exact
/// length when available.
pub fn adapt_online<I>(
    params: &ViTParams,
    bank: &RepresentationBank,
    batches: I,
    cfg: &AdaptationConfig,
) -> Result<OnlineOutcome>
where
    I: IntoIterator<Item = Tensor<f64>>,
{
    cfg.validate()?;
    if !matches!(cfg.method, Method::Otvp | Method::OtvpB) {
        return Err(Error::Invalid(format!("adapt_online needs otvp or otvp-b, got {}", cfg.method)));
    }
    bank.verify(params)?;
    let iter = batches.into_iter();
    let total = match iter.size_hint() {
        (lo, Some(hi)) if lo == hi => Some(lo),
        _ => None,
    };
    let warmup_batches = cfg.warmup_batches(total);
    let objective = Objective::Transport { lambda: cfg.effective_lambda() };
    let mut state = AdaptationState::new(params, cfg)?;
    let mut out = Vec::new();
    for (index, images) in iter.enumerate() {
        let patches = patchify_batch(&images, &params.config)?;
        if patches.shape()[0] == 0 {
            return Err(Error::Empty("stream batch"));
        }
        let warmup = index < warmup_batches;
        let steps = if warmup { cfg.warmup_steps } else { cfg.online_steps };
        for _ in 0..steps {
            prompt_step(params, &mut state, &patches, objective, Some(bank), cfg)?;
        }
        let pl = pseudo_label(params, Some(&state.prompts), &images)?;
        out.push(OnlineBatch { index, warmup, steps, predictions: pl.labels, mean_entropy: pl.mean_entropy });
    }
    if out.is_empty() {
        return Err(Error::Empty("target stream"));
    }
    Ok(OnlineOutcome { prompts: state.prompts, batches: out, history: state.history, warmup_batches })
}
