use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Scalar, Tensor};

use super::{check_simplex, CostMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Regularization strength as a fraction of the mean distance entry.
    pub epsilon_rel: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { epsilon_rel: 0.05, max_iters: 1000, marginal_tol: 1e-6 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel > 0.0) || !self.epsilon_rel.is_finite() {
            return Err(Error::Invalid(format!("epsilon_rel must be > 0, got {}", self.epsilon_rel)));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(Error::Invalid(format!("marginal_tol must be > 0, got {}", self.marginal_tol)));
        }
        Ok(())
    }
}

/// Coupling returned by [`sinkhorn`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    /// `rows x cols` coupling.
    pub pi: Tensor<T>,
    /// Unregularized transport value `sum(pi * C)`.
    pub value: T,
    pub iterations: usize,
    /// Largest absolute row or column marginal error.
    pub marginal_violation: T,
    pub converged: bool,
    /// Absolute regularization strength used in the final stage.
    pub epsilon: T,
    /// Dual potentials (absolute units), usable as a warm start.
    pub f: Vec<T>,
    pub g: Vec<T>,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn rows(&self) -> usize {
        self.pi.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.pi.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.pi.data()[i * self.cols() + j]
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows()).map(|i| self.pi.row(i).iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let n = self.cols();
        let mut s = vec![T::zero(); n];
        for (k, &v) in self.pi.data().iter().enumerate() {
            s[k % n] += v;
        }
        s
    }
}

/// Entropic OT between weights `a` (rows) and `b` (columns).
pub fn sinkhorn<T: Scalar>(a: &[T], b: &[T], cost: &CostMatrix<T>, cfg: &SinkhornConfig) -> Result<TransportPlan<T>> {
    sinkhorn_warm(a, b, cost, cfg, None)
}

const STAGE_FACTOR: f64 = 0.5;
const STAGE_ITERS: usize = 8;
// Over-relaxation factor for the final stage, applied while the row error
// exceeds `RELAX_UNTIL * marginal_tol`; plain updates otherwise, and for
// the rest of the solve if the error ever grows a hundredfold.
const RELAX: f64 = 1.9;
const RELAX_UNTIL: f64 = 1.0;
// Newton polishing in the final stage: every `NEWTON_EVERY` iterations
// while unconverged, for up to `NEWTON_MAX_COLS` columns.
const NEWTON_EVERY: usize = 20;
const NEWTON_STEPS: usize = 12;
const NEWTON_MAX_COLS: usize = 512;

/// [`sinkhorn`] with optional initial potentials `(f, g)`.
///
/// Iterations run on log-domain potentials with log-sum-exp reductions, so
/// entries of size `C/eps` far beyond the exponent range (label penalties)
/// are harmless. The regularization is annealed geometrically from the
/// largest cost entry down to the target strength; each coarse stage runs a
/// few iterations and warm-starts the next. The final stage uses
/// over-relaxed updates and stops once a plain column update (which makes
/// column marginals exact) leaves the row marginal error below
/// `marginal_tol`, or when the iteration budget is spent. Small
/// regularization makes plain iterations crawl, so the final stage also
/// takes periodic Newton steps on the column potentials.
pub fn sinkhorn_warm<T: Scalar>(
    a: &[T],
    b: &[T],
    cost: &CostMatrix<T>,
    cfg: &SinkhornConfig,
    init: Option<(&[T], &[T])>,
) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    let (m, n) = (cost.rows(), cost.cols());
    if a.len() != m || b.len() != n {
        return Err(Error::shape("sinkhorn", format!("cost {m}x{n}, marginals {} and {}", a.len(), b.len())));
    }
    check_simplex("a", a)?;
    check_simplex("b", b)?;
    let c = cost.values();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }

    let mean = cost.euclidean_mean();
    let scale = if mean > T::zero() { mean } else { T::one() };
    let eps_target = T::lit(cfg.epsilon_rel) * scale;
    let tol = T::lit(cfg.marginal_tol);

    let mut f = vec![T::zero(); m];
    let mut g = vec![T::zero(); n];
    if let Some((f0, g0)) = init {
        if f0.len() == m && g0.len() == n {
            f.copy_from_slice(f0);
            g.copy_from_slice(g0);
        }
    }

    // Annealing schedule; skipped for warm starts, which are already close.
    let cmax = c.iter().copied().fold(T::zero(), T::max);
    let mut stages = Vec::new();
    if init.is_none() {
        let mut eps = cmax;
        while eps > eps_target * T::lit(1.0 / STAGE_FACTOR) {
            stages.push(eps);
            eps = eps * T::lit(STAGE_FACTOR);
        }
    }
    stages.push(eps_target);

    let log_a: Vec<T> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<T> = b.iter().map(|v| v.ln()).collect();
    let mut kern = vec![T::zero(); m * n];
    let mut kern_t = vec![T::zero(); m * n];
    let mut u = vec![T::zero(); m];
    let mut v = vec![T::zero(); n];
    let mut lse = vec![T::zero(); m];
    let mut buf_row = vec![T::zero(); n.max(m)];

    let blocks = match cost.labels() {
        Some((ys, yt)) if cost.lambda() > T::zero() => ClassBlocks::new(ys, yt, a, b),
        _ => None,
    };

    let mut iterations = 0;
    let mut converged = false;
    let last = stages.len() - 1;
    for (s, &eps) in stages.iter().enumerate() {
        let inv = T::one() / eps;
        for i in 0..m {
            for j in 0..n {
                let k = -c[i * n + j] * inv;
                kern[i * n + j] = k;
                kern_t[j * m + i] = k;
            }
        }
        for i in 0..m {
            u[i] = f[i] * inv;
        }
        for j in 0..n {
            v[j] = g[j] * inv;
        }
        let budget = if s == last { cfg.max_iters.saturating_sub(iterations) } else { STAGE_ITERS };
        let mut it = 0;
        let mut omega = if s == last { T::lit(RELAX) } else { T::one() };
        let mut best = T::infinity();
        let mut best_uv: Option<(Vec<T>, Vec<T>)> = None;
        let mut last_plain = false;
        let mut next_newton = NEWTON_EVERY;
        let mut polished = false;
        loop {
            // Row log-sums for the current (u, v); they give both the row
            // marginal error and the next u.
            for i in 0..m {
                let row = &kern[i * n..(i + 1) * n];
                for j in 0..n {
                    buf_row[j] = v[j] + row[j];
                }
                lse[i] = log_sum_exp(&buf_row[..n]);
            }
            let mut step = T::one();
            if s == last {
                let viol = (0..m)
                    .map(|i| (a[i] - (u[i] + lse[i]).exp()).abs())
                    .fold(T::zero(), T::max);
                if viol < tol && last_plain {
                    converged = true;
                    break;
                }
                if viol > best * T::lit(100.0) {
                    omega = T::one();
                }
                // Right after a Newton step the columns are not exact, so the
                // row error alone says little.
                if viol < best && !polished {
                    best = viol;
                    best_uv = Some((u.clone(), v.clone()));
                }
                polished = false;
                if it >= next_newton && it < budget && n <= NEWTON_MAX_COLS {
                    next_newton = it + NEWTON_EVERY;
                    if newton_polish(&kern, &log_a, b, &mut u, &mut v, cfg.marginal_tol * 1e-3) {
                        omega = T::one();
                        last_plain = false;
                        polished = true;
                        continue;
                    }
                }
                if viol > tol * T::lit(RELAX_UNTIL) {
                    step = omega;
                }
            }
            if it >= budget {
                if let Some((bu, bv)) = best_uv.take() {
                    u = bu;
                    v = bv;
                }
                break;
            }
            for i in 0..m {
                u[i] = u[i] + step * (log_a[i] - lse[i] - u[i]);
            }
            if let Some(bl) = &blocks {
                bl.rebalance(&kern, &mut u, &mut v);
            }
            for j in 0..n {
                let col = &kern_t[j * m..(j + 1) * m];
                for i in 0..m {
                    buf_row[i] = u[i] + col[i];
                }
                v[j] = v[j] + step * (log_b[j] - log_sum_exp(&buf_row[..m]) - v[j]);
            }
            if u.iter().chain(v.iter()).any(|x| x.is_nan()) {
                return Err(Error::NonFinite { op: "sinkhorn potentials" });
            }
            last_plain = step == T::one();
            it += 1;
            iterations += 1;
        }
        for i in 0..m {
            f[i] = u[i] * eps;
        }
        for j in 0..n {
            g[j] = v[j] * eps;
        }
        if s == last {
            let mut pi = vec![T::zero(); m * n];
            let mut value = T::zero();
            for i in 0..m {
                for j in 0..n {
                    let p = (u[i] + v[j] + kern[i * n + j]).exp();
                    pi[i * n + j] = p;
                    value += p * c[i * n + j];
                }
            }
            if !value.is_finite() || pi.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite { op: "sinkhorn plan" });
            }
            let pi = Tensor::new(vec![m, n], pi)?;
            let mut plan = TransportPlan {
                pi,
                value,
                iterations,
                marginal_violation: T::zero(),
                converged,
                epsilon: eps,
                f: f.clone(),
                g: g.clone(),
            };
            let rv = plan.row_sums().iter().zip(a).map(|(&r, &w)| (r - w).abs()).fold(T::zero(), T::max);
            let cv = plan.col_sums().iter().zip(b).map(|(&r, &w)| (r - w).abs()).fold(T::zero(), T::max);
            plan.marginal_violation = rv.max(cv);
            if plan.marginal_violation >= tol {
                plan.converged = false;
            }
            return Ok(plan);
        }
    }
    unreachable!("final stage always returns")
}

/// Damped Newton steps on the column log-potentials `v`, with `u` set so
/// that row marginals are exact. Returns whether any step was taken.
///
/// The Jacobian of the column sums is `diag(c) - P^T P` with
/// `P_ij = pi_ij / sqrt(a_i)`; it is singular along the all-ones direction,
/// which the residual never has a component in, so that direction is
/// pinned with a rank-one term.
fn newton_polish<T: Scalar>(kern: &[T], log_a: &[T], b: &[T], u: &mut [T], v: &mut [T], target: f64) -> bool {
    let (m, n) = (u.len(), v.len());
    let mut pi = vec![0.0; m * n];
    let mut buf = vec![T::zero(); n];
    let mut eval = |v: &[T], u: &mut [T], pi: &mut [f64]| {
        let mut col = vec![0.0; n];
        for i in 0..m {
            let row = &kern[i * n..(i + 1) * n];
            for j in 0..n {
                buf[j] = v[j] + row[j];
            }
            u[i] = log_a[i] - log_sum_exp(&buf);
            for j in 0..n {
                let p = (u[i] + buf[j]).exp().as_f64();
                pi[i * n + j] = p;
                col[j] += p;
            }
        }
        let resid: Vec<f64> = col.iter().zip(b).map(|(c, &w)| c - w.as_f64()).collect();
        let viol = resid.iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
        (col, resid, viol)
    };
    let (mut col, mut resid, mut viol) = eval(v, u, &mut pi);
    let mut moved = false;
    let mut trial_u = u.to_vec();
    let mut trial_v = v.to_vec();
    let mut trial_pi = vec![0.0; m * n];
    for _ in 0..NEWTON_STEPS {
        if viol <= target {
            break;
        }
        let scaled = DMatrix::from_fn(m, n, |i, j| pi[i * n + j] / log_a[i].as_f64().exp().sqrt());
        let mut jac = -scaled.tr_mul(&scaled);
        let pin = col.iter().sum::<f64>() / n as f64;
        let ridge = 1e-14 * col.iter().fold(0.0f64, |a, &c| a.max(c));
        for j in 0..n {
            for l in 0..n {
                jac[(j, l)] += pin;
            }
            jac[(j, j)] += col[j] + ridge;
        }
        let Some(chol) = jac.cholesky() else { break };
        let step = chol.solve(&DVector::from_iterator(n, resid.iter().map(|r| -r)));
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..10 {
            for j in 0..n {
                trial_v[j] = v[j] + T::lit(t * step[j]);
            }
            let (c2, r2, v2) = eval(&trial_v, &mut trial_u, &mut trial_pi);
            if v2 < viol {
                v.copy_from_slice(&trial_v);
                u.copy_from_slice(&trial_u);
                std::mem::swap(&mut pi, &mut trial_pi);
                (col, resid, viol) = (c2, r2, v2);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        moved = true;
    }
    moved
}

/// Per-class dual offsets for label-penalized costs.
///
/// Adding `s` to the row potentials of class `c` and subtracting it from the
/// column potentials of class `c` leaves the matched block unchanged and
/// rescales only the mismatched flows leaving and entering the class. Plain
/// Sinkhorn moves along these directions very slowly once the penalty is far
/// above the regularization, so each iteration first maximizes the dual along
/// them exactly (a quadratic in `exp(s)` per class, a few Gauss-Seidel sweeps).
struct ClassBlocks<T> {
    row_class: Vec<usize>,
    col_class: Vec<usize>,
    classes: usize,
    /// Row mass minus column mass per class.
    excess: Vec<T>,
}

const BLOCK_SWEEPS: usize = 5;

impl<T: Scalar> ClassBlocks<T> {
    fn new(ys: &[usize], yt: &[usize], a: &[T], b: &[T]) -> Option<Self> {
        let classes = ys.iter().chain(yt).max().map_or(0, |&c| c + 1);
        if classes < 2 {
            return None;
        }
        let mut excess = vec![T::zero(); classes];
        for (&c, &w) in ys.iter().zip(a) {
            excess[c] += w;
        }
        for (&c, &w) in yt.iter().zip(b) {
            excess[c] -= w;
        }
        Some(ClassBlocks { row_class: ys.to_vec(), col_class: yt.to_vec(), classes, excess })
    }

    fn rebalance(&self, kern: &[T], u: &mut [T], v: &mut [T]) {
        let (k, n) = (self.classes, v.len());
        // Log-mass of every (row class, column class) block, streamed.
        let mut mx = vec![T::neg_infinity(); k * k];
        let mut acc = vec![T::zero(); k * k];
        for (i, &ui) in u.iter().enumerate() {
            let ci = self.row_class[i];
            let row = &kern[i * n..(i + 1) * n];
            for j in 0..n {
                let x = ui + v[j] + row[j];
                let slot = ci * k + self.col_class[j];
                if x > mx[slot] {
                    acc[slot] = acc[slot] * (mx[slot] - x).exp() + T::one();
                    mx[slot] = x;
                } else {
                    acc[slot] += (x - mx[slot]).exp();
                }
            }
        }
        let block: Vec<T> = mx.iter().zip(&acc).map(|(&m, &s)| if s > T::zero() { m + s.ln() } else { m }).collect();
        let two = T::lit(2.0);
        let mut shift = vec![T::zero(); k];
        let mut terms = Vec::with_capacity(k);
        for _ in 0..BLOCK_SWEEPS {
            for c in 0..k {
                terms.clear();
                terms.extend((0..k).filter(|&d| d != c).map(|d| block[c * k + d] + shift[c] - shift[d]));
                let out = log_sum_exp(&terms);
                terms.clear();
                terms.extend((0..k).filter(|&d| d != c).map(|d| block[d * k + c] + shift[d] - shift[c]));
                let inflow = log_sum_exp(&terms);
                // Stationarity in x = exp(step): out*x^2 - excess*x - inflow = 0.
                let e = self.excess[c];
                let root = if (out + inflow).is_finite() { (e * e + two * two * (out + inflow).exp()).sqrt() } else { e.abs() };
                let step = if e > T::zero() && out.is_finite() {
                    (e + root).ln() - two.ln() - out
                } else if e < T::zero() && inflow.is_finite() {
                    two.ln() + inflow - (root - e).ln()
                } else if e == T::zero() && (out + inflow).is_finite() {
                    (inflow - out) / two
                } else {
                    continue;
                };
                if step.is_finite() {
                    shift[c] += step;
                }
            }
        }
        for (x, &c) in u.iter_mut().zip(&self.row_class) {
            *x += shift[c];
        }
        for (x, &c) in v.iter_mut().zip(&self.col_class) {
            *x -= shift[c];
        }
    }
}
