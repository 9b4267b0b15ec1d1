use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::TransportPlan;

/// Gradient of `sum_ij pi_ij |z_s[i] - z_t[j]|` with respect to `z_t`,
/// holding `pi` fixed.
///
/// Pairs at distance zero contribute nothing. Label penalties are constant
/// in `z_t` and so never appear here.
pub fn ot_grad_targets<T: Scalar>(plan: &TransportPlan<T>, zs: &Tensor<T>, zt: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = (plan.rows(), plan.cols());
    if zs.ndim() != 2 || zt.ndim() != 2 || zs.shape()[0] != m || zt.shape()[0] != n || zs.shape()[1] != zt.shape()[1] {
        return Err(Error::shape(
            "ot_grad_targets",
            format!("plan {m}x{n}, source {:?}, target {:?}", zs.shape(), zt.shape()),
        ));
    }
    let d = zs.shape()[1];
    let mut out = vec![T::zero(); n * d];
    let mut diff = vec![T::zero(); d];
    for j in 0..n {
        let t = zt.row(j);
        let gj = &mut out[j * d..(j + 1) * d];
        for i in 0..m {
            let p = plan.get(i, j);
            if p == T::zero() {
                continue;
            }
            let s = zs.row(i);
            let mut sq = T::zero();
            for k in 0..d {
                diff[k] = t[k] - s[k];
                sq += diff[k] * diff[k];
            }
            if sq == T::zero() {
                continue;
            }
            let w = p / sq.sqrt();
            for k in 0..d {
                gj[k] += w * diff[k];
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Transport value of a fixed coupling under the Euclidean cost (plus
/// `lambda` on mismatched labels when both label sets are given).
pub fn frozen_plan_value<T: Scalar>(
    plan: &TransportPlan<T>,
    zs: &Tensor<T>,
    zt: &Tensor<T>,
    labels: Option<(&[usize], &[usize], T)>,
) -> T {
    let (m, n) = (plan.rows(), plan.cols());
    let mut total = T::zero();
    for i in 0..m {
        for j in 0..n {
            let p = plan.get(i, j);
            let d = zs.row(i).iter().zip(zt.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
            let pen = match labels {
                Some((ys, yt, lambda)) if ys[i] != yt[j] => lambda,
                _ => T::zero(),
            };
            total += p * (d + pen);
        }
    }
    total
}
