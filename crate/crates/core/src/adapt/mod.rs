//! Test-time prompt adaptation: source representation bank, pseudo-labels,
//! offline and online OT-guided prompt optimization, and baselines.

mod bank;
mod baselines;
mod engine;

pub use bank::{precompute_source_reps, RepresentationBank};
pub use baselines::{baseline_entropy_prompt, baseline_tent_ln, TentOutcome};
pub use engine::{
    adapt_offline, adapt_online, pseudo_label, predict, AdaptOutcome, AdaptationState, OnlineBatch, OnlineOutcome,
    PseudoLabels, StepRecord, FALLBACK_WARMUP_BATCHES,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::ot::SinkhornConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Otvp,
    OtvpB,
    EntropyPrompt,
    TentLn,
    SupervisedOracle,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::None, Method::Otvp, Method::OtvpB, Method::EntropyPrompt, Method::TentLn, Method::SupervisedOracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Otvp => "otvp",
            Method::OtvpB => "otvp-b",
            Method::EntropyPrompt => "entropy-prompt",
            Method::TentLn => "tent-ln",
            Method::SupervisedOracle => "supervised-oracle",
        }
    }

    /// Methods that learn prompt tokens over a frozen backbone.
    pub fn uses_prompts(self) -> bool {
        matches!(self, Method::Otvp | Method::OtvpB | Method::EntropyPrompt | Method::SupervisedOracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}")))
    }
}

/// Everything that determines one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub method: Method,
    pub lambda: f64,
    pub prompt_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub online: bool,
    pub warmup_fraction: f64,
    pub warmup_steps: usize,
    pub online_steps: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    pub source_cap: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            method: Method::Otvp,
            lambda: 1e4,
            prompt_len: 4,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            steps: 50,
            batch_size: 64,
            online: false,
            warmup_fraction: 0.01,
            warmup_steps: 50,
            online_steps: 1,
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
            source_cap: 2048,
        }
    }
}

/// Step budget of the "hard" corruption preset.
pub const HARD_STEPS: usize = 100;

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return fail(format!("warmup_fraction must be in (0, 1], got {}", self.warmup_fraction));
        }
        if self.prompt_len == 0 || self.batch_size == 0 || self.source_cap == 0 {
            return fail("prompt_len, batch_size and source_cap must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("bad optimizer settings lr={} betas=({}, {})", self.lr, self.beta1, self.beta2));
        }
        self.sinkhorn.validate()
    }

    /// Label penalty actually used: OT-VP-B always runs without one.
    pub fn effective_lambda(&self) -> f64 {
        if self.method == Method::OtvpB {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }

    /// Warm-up batch count for a stream of `total` batches, if known.
    pub fn warmup_batches(&self, total: Option<usize>) -> usize {
        match total {
            Some(n) => ((self.warmup_fraction * n as f64).ceil() as usize).min(n),
            None => FALLBACK_WARMUP_BATCHES,
        }
    }
}
