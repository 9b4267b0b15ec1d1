use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Scalar, Tape, Tensor};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng;

use super::vit::{encode, forward_batch, patchify_batch};
use super::{PromptSet, ViTParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 64, lr: 1e-3, weight_decay: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 0 means the initial weights were never beaten.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Fraction of `images` whose argmax prediction equals the label.
pub fn accuracy<T: Scalar>(
    params: &ViTParams<T>,
    prompts: Option<&PromptSet<T>>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (logits, _) = forward_batch(params, prompts, images)?;
    if logits.rows() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} images, {} labels", logits.rows(), labels.len())));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_labeled<T: Scalar>(images: &Tensor<T>, labels: &[usize], classes: usize, what: &'static str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty(what));
    }
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("train", format!("{what}: images {:?}, {} labels", images.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("{what}: label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Supervised source training with AdamW and cosine decay. Returns the
/// weights of the epoch with the best validation accuracy (earliest on ties).
pub fn train_source<T: Scalar>(
    init: &ViTParams<T>,
    train: (&Tensor<T>, &[usize]),
    val: (&Tensor<T>, &[usize]),
    cfg: &TrainConfig,
) -> Result<(ViTParams<T>, TrainReport)> {
    let classes = init.config.num_classes;
    check_labeled(train.0, train.1, classes, "training set")?;
    check_labeled(val.0, val.1, classes, "validation set")?;
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Invalid("batch_size must be positive and lr >= 0".into()));
    }
    let patches = patchify_batch(train.0, &init.config)?;
    let n = train.1.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut params = init.clone();
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &sizes);
    let mut best = params.clone();
    let mut best_acc = accuracy(&params, None, val.0, val.1)?;
    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, best_val_accuracy: best_acc };
    let epoch_seed = rng::derive(cfg.seed, "train-epoch");
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = rng::permutation(n, rng::derive_index(epoch_seed, epoch as u64));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = patches.gather_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, |_| true)?;
            let enc = encode(&mut tape, &params, &vars, &batch, None)?;
            let loss = tape.cross_entropy(enc.logits, &labels)?;
            loss_sum += tape.value(loss).item().as_f64() * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<&[T]> = vars.in_order().iter().map(|&v| grads.slice(v).expect("trainable")).collect();
            let mut named = params.named_mut();
            let mut slots: Vec<&mut [T]> = named.iter_mut().map(|(_, t)| t.data_mut()).collect();
            opt.step_with_lr(&mut slots, &g, cosine_lr(cfg.lr, step, total));
            step += 1;
        }
        let val_accuracy = accuracy(&params, None, val.0, val.1)?;
        report.epochs.push(EpochStats { epoch, train_loss: loss_sum / n as f64, val_accuracy });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = params.clone();
            report.best_epoch = epoch;
            report.best_val_accuracy = val_accuracy;
        }
    }
    Ok((best, report))
}

/// Result of [`fit_prompts_supervised`].
#[derive(Debug, Clone)]
pub struct PromptFit<T> {
    /// Best iterate by accuracy on the fitting data, `gamma_0` included.
    pub prompts: PromptSet<T>,
    pub initial_accuracy: f64,
    pub best_accuracy: f64,
    pub best_step: usize,
    pub losses: Vec<f64>,
}

/// Optimize prompts against true labels with the backbone frozen.
#[allow(clippy::too_many_arguments)]
pub fn fit_prompts_supervised<T: Scalar>(
    params: &ViTParams<T>,
    init: &PromptSet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PromptFit<T>> {
    check_labeled(images, labels, params.config.num_classes, "prompt fitting set")?;
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let patches = patchify_batch(images, &params.config)?;
    let n = labels.len();
    let mut prompts = init.clone();
    let mut opt = AdamW::new(AdamWConfig { lr, ..Default::default() }, &[prompts.tokens().numel()]);
    let initial = accuracy(params, Some(&prompts), images, labels)?;
    let mut fit = PromptFit { prompts: prompts.clone(), initial_accuracy: initial, best_accuracy: initial, best_step: 0, losses: vec![] };
    let mut batches = BatchCycler::new(n, batch_size, rng::derive(seed, "prompt-batches"));
    for step in 1..=steps {
        let idx = batches.next_batch();
        let batch = patches.gather_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, |_| false)?;
        let p = tape.param(prompts.tokens().clone())?;
        let enc = encode(&mut tape, params, &vars, &batch, Some(p))?;
        let loss = tape.cross_entropy(enc.logits, &y)?;
        fit.losses.push(tape.value(loss).item().as_f64());
        let grads = tape.backward(loss)?;
        let g = grads.slice(p).expect("prompt gradient");
        opt.step(&mut [prompts.tokens_mut().data_mut()], &[g]);
        if !prompts.tokens().is_finite() {
            return Err(Error::NonFinite { op: "prompt update" });
        }
        let acc = accuracy(params, Some(&prompts), images, labels)?;
        if acc > fit.best_accuracy {
            fit.best_accuracy = acc;
            fit.best_step = step;
            fit.prompts = prompts.clone();
        }
    }
    Ok(fit)
}

/// Endless minibatches over `0..n`: a fresh seeded shuffle per pass, batches
/// may straddle two passes.
#[derive(Debug, Clone)]
pub(crate) struct BatchCycler {
    n: usize,
    batch: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchCycler { n, batch: batch.min(n), seed, pass: 0, order: Vec::new(), pos: 0 }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = rng::permutation(self.n, rng::derive_index(self.seed, self.pass));
                self.pass += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
