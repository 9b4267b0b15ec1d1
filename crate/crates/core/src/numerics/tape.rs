//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. A backward pass
//! walks the nodes once in reverse insertion order, which is a valid reverse
//! topological order because inputs are always recorded before their users.

use crate::error::{Error, Result};

use super::scalar::matmul_into;
use super::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    ConcatTokens(Vec<Var>),
    BroadcastBatch(Var),
    SliceToken { x: Var, index: usize },
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Entropy(Var),
    WeightedSum { x: Var, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by a backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn slice(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0)?.as_deref()
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product: `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_into(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `x + y` where `y`'s shape equals the trailing dimensions of `x`
    /// (bias rows, positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", format!("{sx:?} + {sy:?}")));
        }
        let yd = self.value(y).data();
        let period = yd.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yd[i % period])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_broadcast", value, Op::AddBroadcast(x, y), &[x, y])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Invalid("layer_norm eps must be positive".into()));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {sx:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / d.max(1);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Concatenate `[B, T_i, d]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_tokens", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(Error::shape("concat_tokens", format!("expected 3-D, got {s0:?}")));
        }
        let (batch, d) = (s0[0], s0[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != batch || s[2] != d {
                return Err(Error::shape("concat_tokens", format!("{s0:?} with {s:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for &p in parts {
                let t = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * t * d..(b + 1) * t * d]);
            }
        }
        let value = Tensor::new(vec![batch, total, d], out)?;
        self.push("concat_tokens", value, Op::ConcatTokens(parts.to_vec()), parts)
    }

    /// Repeat `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let value = Tensor::new(shape, out)?;
        self.push("broadcast_batch", value, Op::BroadcastBatch(x), &[x])
    }

    /// Token `index` of every sequence: `[B, T, d] -> [B, d]`.
    pub fn slice_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("slice_token", format!("{s:?}[{index}]")));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let off = (b * t + index) * d;
            out.extend_from_slice(&src[off..off + d]);
        }
        let value = Tensor::new(vec![batch, d], out)?;
        self.push("slice_token", value, Op::SliceToken { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `[B, T, H*dh] -> [B*H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for ti in 0..t {
                    let from = (b * t + ti) * d + h * dh;
                    let to = ((b * heads + h) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, t, dh], out)?;
        self.push("split_heads", value, Op::SplitHeads { x, heads }, &[x])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{s:?} from {heads} heads")));
        }
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let batch = bh / heads;
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for ti in 0..t {
                    let from = ((b * heads + h) * t + ti) * dh;
                    let to = (b * t + ti) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch, t, d], out)?;
        self.push("merge_heads", value, Op::MergeHeads { x, heads }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::shape("cross_entropy", format!("label {bad} >= {classes} classes")));
        }
        let probs = softmax_rows(self.value(logits));
        let ld = self.value(logits).data();
        let mut loss = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &ld[b * classes..(b + 1) * classes];
            loss += log_sum_exp(row) - row[y];
        }
        loss /= T::from_usize(labels.len()).unwrap();
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs: probs.into_data() };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean Shannon entropy (nats) of `[B, C]` probability rows.
    pub fn entropy(&mut self, probs: Var) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("entropy", format!("{s:?}")));
        }
        let h = self.value(probs).data().iter().map(|&p| entropy_term(p)).sum::<T>()
            / T::from_usize(s[0]).unwrap();
        self.push("entropy", Tensor::scalar(h), Op::Entropy(probs), &[probs])
    }

    /// `sum(x * w)` for a constant weight tensor `w` of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        check_same("weighted_sum", self.shape(x), weights.shape())?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        let op = Op::WeightedSum { x, weights: weights.data().to_vec() };
        self.push("weighted_sum", Tensor::scalar(s), op, &[x])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_with_seed(loss, &Tensor::full(self.shape(loss).to_vec(), T::one()))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        check_same("backward_with_seed", self.shape(out), seed.shape())?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[id].take() {
                self.backprop(node, &g, &mut grads);
            }
        }
        let shapes = self.nodes[..=out.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    matmul_into(m, n, k, g, false, bd, true, self.buf(grads, *a), true);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    matmul_into(k, m, n, ad, true, g, false, self.buf(grads, *b), true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = self.buf(grads, *a);
                    for i in 0..batch {
                        matmul_into(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.needs(*b) {
                    let db = self.buf(grads, *b);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            matmul_into(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            matmul_into(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(self.buf(grads, v), g);
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.needs(*x) {
                    add_into(self.buf(grads, *x), g);
                }
                if self.needs(*y) {
                    let dy = self.buf(grads, *y);
                    let period = dy.len().max(1);
                    for (i, &gv) in g.iter().enumerate() {
                        dy[i % period] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = self.buf(grads, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if self.needs(*b) {
                    let db = self.buf(grads, *b);
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = self.buf(grads, *x);
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let dx = self.buf(grads, *x);
                for r in 0..y.len() / d.max(1) {
                    let range = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for (j, dxj) in dx[range].iter_mut().enumerate() {
                        *dxj += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                let gd = self.value(*gain).data();
                let dn = T::from_usize(d).unwrap();
                if self.needs(*x) {
                    let dx = self.buf(grads, *x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for (j, dxj) in dx[range].iter_mut().enumerate() {
                            *dxj += rs * (gr[j] * gd[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = self.buf(grads, *gain);
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * h;
                    }
                }
                if self.needs(*bias) {
                    let db = self.buf(grads, *bias);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let dx = self.buf(grads, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_parts(xd[i]).1;
                }
            }
            Op::ConcatTokens(parts) => {
                let s = node.value.shape();
                let (batch, total, d) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let t = self.shape(p)[1];
                    if self.needs(p) {
                        let dp = self.buf(grads, p);
                        for b in 0..batch {
                            let src = (b * total + offset) * d;
                            add_into(&mut dp[b * t * d..(b + 1) * t * d], &g[src..src + t * d]);
                        }
                    }
                    offset += t;
                }
            }
            Op::BroadcastBatch(x) => {
                let dx = self.buf(grads, *x);
                let per = dx.len();
                for chunk in g.chunks(per.max(1)) {
                    add_into(dx, chunk);
                }
            }
            Op::SliceToken { x, index } => {
                let s = self.shape(*x);
                let (batch, t, d) = (s[0], s[1], s[2]);
                let dx = self.buf(grads, *x);
                for b in 0..batch {
                    let off = (b * t + index) * d;
                    add_into(&mut dx[off..off + d], &g[b * d..(b + 1) * d]);
                }
            }
            Op::Reshape(x) => add_into(self.buf(grads, *x), g),
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (batch, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let dx = self.buf(grads, *x);
                for b in 0..batch {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let xo = (b * t + ti) * d + h * dh;
                            let go = ((b * heads + h) * t + ti) * dh;
                            add_into(&mut dx[xo..xo + dh], &g[go..go + dh]);
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let d = dh * heads;
                let dx = self.buf(grads, *x);
                for b in 0..bh / heads {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let xo = ((b * heads + h) * t + ti) * dh;
                            let go = (b * t + ti) * d + h * dh;
                            add_into(&mut dx[xo..xo + dh], &g[go..go + dh]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.buf(grads, *x).iter_mut().for_each(|d| *d += g0);
            }
            Op::Mean(x) => {
                let dx = self.buf(grads, *x);
                let g0 = g[0] / T::from_usize(dx.len()).unwrap();
                dx.iter_mut().for_each(|d| *d += g0);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let dx = self.buf(grads, *logits);
                for (b, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == y { T::one() } else { T::zero() };
                        dx[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
            Op::Entropy(p) => {
                let rows = self.shape(*p)[0];
                let scale = g[0] / T::from_usize(rows).unwrap();
                let pd = self.value(*p).data();
                let dp = self.buf(grads, *p);
                for (d, &pv) in dp.iter_mut().zip(pd) {
                    let lp = pv.max(T::min_positive_value()).ln();
                    *d -= scale * (lp + T::one());
                }
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[0];
                let dx = self.buf(grads, *x);
                for (d, &w) in dx.iter_mut().zip(weights) {
                    *d += g0 * w;
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn entropy_term<T: Scalar>(p: T) -> T {
    if p <= T::zero() {
        T::zero()
    } else {
        -p * p.ln()
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Softmax over the last axis of a tensor, returning a new tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    if d > 0 {
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Mean entropy (nats) of probability rows `[B, C]`, without recording.
pub fn mean_entropy<T: Scalar>(probs: &Tensor<T>) -> T {
    let rows = probs.rows().max(1);
    probs.data().iter().map(|&p| entropy_term(p)).sum::<T>() / T::from_usize(rows).unwrap()
}
