//! Micro vision transformer with optional prompt tokens.

mod checkpoint;
mod params;
mod train;
mod vit;

pub use checkpoint::{checkpoint_bytes, checkpoint_hash, load_checkpoint, load_prompts, save_checkpoint, save_prompts};
pub use params::{is_layer_norm, BlockParams, ParamVars, ViTParams};
pub use train::{accuracy, fit_prompts_supervised, train_source, EpochStats, PromptFit, TrainConfig, TrainReport};
pub(crate) use train::BatchCycler;
pub use vit::{encode, forward, forward_batch, forward_with_prompts, patchify, patchify_batch, unpatchify, Encoded};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng;

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers: 3,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 7,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.channels == 0 || self.num_classes < 2 || self.mlp_ratio == 0 {
            return fail("channels, mlp_ratio must be positive and num_classes >= 2".into());
        }
        Ok(())
    }

    /// Patches per image, `(image_size / patch_size)^2`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// The trainable prompt tokens, `len x embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T> {
    tokens: Tensor<T>,
}

pub(crate) const PROMPT_INIT_STD: f64 = 0.02;

impl<T: Scalar> PromptSet<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] == 0 {
            return Err(Error::shape("prompts", format!("expected l x d with l >= 1, got {:?}", tokens.shape())));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "prompts" });
        }
        Ok(PromptSet { tokens: tokens.with_requires_grad(false) })
    }

    /// Gaussian initialization, mean 0, std 0.02.
    pub fn init(len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(rng::derive(seed, "prompt-init"));
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let data = (0..len * dim).map(|_| T::lit(normal.sample(&mut r))).collect();
        PromptSet::new(Tensor::new(vec![len, dim], data)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tokens
    }
}
