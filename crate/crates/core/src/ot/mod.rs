//! Entropic optimal transport between representation sets.
//!
//! * [`cost_base`] / [`cost_labeled`] build Euclidean and label-penalized
//!   cost matrices.
//! * [`sinkhorn`] solves the entropy-regularized problem in the log domain.
//! * [`exact_ot_uniform`] solves the equal-size uniform case exactly by
//!   linear assignment; it is the reference for the solver.
//! * [`ot_grad_targets`] differentiates the transport value with respect to
//!   the target points, holding the coupling fixed.

mod cost;
mod exact;
mod grad;
mod sinkhorn;

pub use cost::{cost_base, cost_labeled, CostMatrix};
pub use exact::{exact_ot_uniform, hungarian, ExactSolution};
pub use grad::{frozen_plan_value, ot_grad_targets};
pub use sinkhorn::{sinkhorn, sinkhorn_warm, SinkhornConfig, TransportPlan};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Weighted point cloud with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure<T> {
    pub points: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub weights: Vec<T>,
}

impl<T: Scalar> EmpiricalMeasure<T> {
    /// Uniform weights `1/n` over the rows of `points`.
    pub fn uniform(points: Tensor<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = check_points(&points, labels.as_deref())?;
        let w = T::one() / T::from_usize(n).unwrap();
        Ok(EmpiricalMeasure { points, labels, weights: vec![w; n] })
    }

    pub fn weighted(points: Tensor<T>, labels: Option<Vec<usize>>, weights: Vec<T>) -> Result<Self> {
        let n = check_points(&points, labels.as_deref())?;
        if weights.len() != n {
            return Err(Error::shape("measure", format!("{n} points, {} weights", weights.len())));
        }
        check_simplex("weights", &weights)?;
        Ok(EmpiricalMeasure { points, labels, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_points(points: &Tensor<impl Scalar>, labels: Option<&[usize]>) -> Result<usize> {
    if points.ndim() != 2 || points.shape()[0] == 0 {
        return Err(Error::shape("measure", format!("points must be non-empty n x d, got {:?}", points.shape())));
    }
    let n = points.shape()[0];
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::shape("measure", format!("{n} points, {} labels", l.len())));
        }
    }
    Ok(n)
}

/// Simplex check with a tolerance of `1e-12` (or a few ulps for `f32`).
pub(crate) fn check_simplex<T: Scalar>(what: &str, w: &[T]) -> Result<()> {
    if w.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(Error::Invalid(format!("{what}: negative or non-finite weight")));
    }
    let total = w.iter().copied().sum::<T>().as_f64();
    let tol = 1e-12f64.max(64.0 * T::epsilon().as_f64());
    if (total - 1.0).abs() > tol * (w.len().max(1) as f64).sqrt().max(1.0) {
        return Err(Error::Invalid(format!("{what}: weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Uniform weight vector of length `n`.
pub fn uniform_weights<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one() / T::from_usize(n.max(1)).unwrap(); n]
}
