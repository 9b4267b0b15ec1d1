use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{encode, is_layer_norm, patchify_batch, BatchCycler};
use crate::numerics::{Tape, Tensor};
use crate::optim::AdamW;
use crate::rng;
use crate::ViTParams;

use super::engine::{run_offline, AdaptOutcome, Objective, StepRecord};
use super::AdaptationConfig;

/// Prompt optimization that minimizes mean prediction entropy instead of
/// the transport distance.
pub fn baseline_entropy_prompt(params: &ViTParams, images: &Tensor<f64>, cfg: &AdaptationConfig) -> Result<AdaptOutcome> {
    run_offline(params, None, images, cfg, Objective::Entropy)
}

#[derive(Debug, Clone)]
pub struct TentOutcome {
    /// Copy of the input weights with adapted layer-norm gains and biases.
    pub params: ViTParams,
    pub history: Vec<StepRecord>,
}

/// Entropy minimization over layer-norm parameters only.
pub fn baseline_tent_ln(params: &ViTParams, images: &Tensor<f64>, cfg: &AdaptationConfig) -> Result<TentOutcome> {
    cfg.validate()?;
    if images.shape().first().is_none_or(|&n| n == 0) {
        return Err(Error::Empty("target data"));
    }
    let patches = patchify_batch(images, &params.config)?;
    let mut adapted = params.clone();
    let ln: Vec<usize> =
        adapted.named().iter().enumerate().filter(|(_, (n, _))| is_layer_norm(n)).map(|(i, _)| i).collect();
    let sizes: Vec<usize> = ln.iter().map(|&i| adapted.named()[i].1.numel()).collect();
    let mut opt = AdamW::new(cfg.optimizer(), &sizes);
    let mut batches = BatchCycler::new(patches.shape()[0], cfg.batch_size, rng::derive(cfg.seed, "target-batches"));
    let mut history = Vec::new();
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let batch = patches.gather_rows(&batches.next_batch());
        let mut tape = Tape::new();
        let vars = adapted.register(&mut tape, is_layer_norm)?;
        let enc = encode(&mut tape, &adapted, &vars, &batch, None)?;
        let probs = tape.softmax(enc.logits)?;
        let h = tape.entropy(probs)?;
        let loss = tape.value(h).item();
        let grads = tape.backward(h)?;
        let g: Vec<&[f64]> = ln
            .iter()
            .map(|&i| grads.slice(vars.in_order()[i]).ok_or(Error::Empty("layer-norm gradient")))
            .collect::<Result<_>>()?;
        let mut named = adapted.named_mut();
        let mut slots: Vec<&mut [f64]> = Vec::with_capacity(ln.len());
        for (i, (_, t)) in named.iter_mut().enumerate() {
            if ln.contains(&i) {
                slots.push(t.data_mut());
            }
        }
        opt.step(&mut slots, &g);
        history.push(StepRecord {
            step,
            ot_value: None,
            mean_entropy: loss,
            loss,
            sinkhorn_iterations: None,
            marginal_violation: None,
            converged: None,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TentOutcome { params: adapted, history })
}
