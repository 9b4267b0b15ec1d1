//! Test-time visual prompting for a frozen micro vision transformer.
//!
//! A handful of prompt tokens are appended to the transformer input and
//! optimized so that target-domain CLS representations move towards a bank
//! of precomputed source representations, measured by an entropic optimal
//! transport distance whose cost penalizes label disagreement.
//!
//! The numerical core ([`numerics`], [`ot`], [`model`]) is generic over the
//! scalar type; the aliases below fix it to `f64`, which is what the
//! adaptation engine, data pipeline and file formats use.

pub mod adapt;
pub mod container;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod ot;
pub mod rng;

pub use error::{Error, Result};

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type ViTParams = model::ViTParams<f64>;
pub type PromptSet = model::PromptSet<f64>;
pub type CostMatrix = ot::CostMatrix<f64>;
pub type TransportPlan = ot::TransportPlan<f64>;
pub type EmpiricalMeasure = ot::EmpiricalMeasure<f64>;
