use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::{self, Rng};

use super::ViTConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub o_w: Tensor<T>,
    pub o_b: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// All transformer weights. Linear maps are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams<T> {
    pub config: ViTConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Tape handles mirroring [`ViTParams`] for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub(crate) patch_w: Var,
    pub(crate) patch_b: Var,
    pub(crate) cls_token: Var,
    pub(crate) pos_embed: Var,
    pub(crate) blocks: Vec<[Var; 16]>,
    pub(crate) norm_gain: Var,
    pub(crate) norm_bias: Var,
    pub(crate) head_w: Var,
    pub(crate) head_b: Var,
    order: Vec<Var>,
}

impl ParamVars {
    /// Handles in [`ViTParams::named`] order.
    pub fn in_order(&self) -> &[Var] {
        &self.order
    }
}

fn normal<T: Scalar>(shape: &[usize], std: f64, r: &mut Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(r))).collect()).expect("shape")
}

fn linear<T: Scalar>(fan_in: usize, fan_out: usize, r: &mut Rng) -> (Tensor<T>, Tensor<T>) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    (normal(&[fan_in, fan_out], std, r), Tensor::zeros([fan_out]))
}

impl<T: Scalar> ViTParams<T> {
    /// Seeded random initialization: Xavier-normal linear layers, unit
    /// layer-norm gains, `N(0, 0.02)` class/positional embeddings.
    pub fn init(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::derive(config.seed, "vit-init"));
        let d = config.embed_dim;
        let hidden = config.hidden_dim();
        let (patch_w, patch_b) = linear(config.patch_dim(), d, &mut r);
        let cls_token = normal(&[1, d], 0.02, &mut r);
        let pos_embed = normal(&[config.num_patches() + 1, d], 0.02, &mut r);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let (q_w, q_b) = linear(d, d, &mut r);
            let (k_w, k_b) = linear(d, d, &mut r);
            let (v_w, v_b) = linear(d, d, &mut r);
            let (o_w, o_b) = linear(d, d, &mut r);
            let (fc1_w, fc1_b) = linear(d, hidden, &mut r);
            let (fc2_w, fc2_b) = linear(hidden, d, &mut r);
            blocks.push(BlockParams {
                ln1_gain: Tensor::full([d], T::one()),
                ln1_bias: Tensor::zeros([d]),
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                ln2_gain: Tensor::full([d], T::one()),
                ln2_bias: Tensor::zeros([d]),
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let (head_w, head_b) = linear(d, config.num_classes, &mut r);
        Ok(ViTParams {
            config: config.clone(),
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_gain: Tensor::full([d], T::one()),
            norm_bias: Tensor::zeros([d]),
            head_w,
            head_b,
        })
    }

    /// Every tensor with a stable dotted name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in BLOCK_NAMES.iter().zip(block_tensors(b)) {
                out.push((format!("blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("norm.gain".to_string(), &self.norm_gain));
        out.push(("norm.bias".to_string(), &self.norm_bias));
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`ViTParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut self.patch_w),
            ("patch_embed.bias".to_string(), &mut self.patch_b),
            ("cls_token".to_string(), &mut self.cls_token),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in BLOCK_NAMES.iter().zip(block_tensors_mut(b)) {
                out.push((format!("blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("norm.gain".to_string(), &mut self.norm_gain));
        out.push(("norm.bias".to_string(), &mut self.norm_bias));
        out.push(("head.weight".to_string(), &mut self.head_w));
        out.push(("head.bias".to_string(), &mut self.head_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Record every tensor as a tape leaf; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn register(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Result<ParamVars> {
        let mut order = Vec::new();
        for (name, t) in self.named() {
            let leaf = t.clone().with_requires_grad(trainable(&name));
            order.push(tape.leaf(leaf)?);
        }
        let expected = 4 + 16 * self.blocks.len() + 4;
        if order.len() != expected {
            return Err(Error::Invalid("parameter layout changed".into()));
        }
        let blocks = order[4..4 + 16 * self.blocks.len()]
            .chunks(16)
            .map(|c| <[Var; 16]>::try_from(c).expect("16 tensors per block"))
            .collect();
        let tail = &order[order.len() - 4..];
        Ok(ParamVars {
            patch_w: order[0],
            patch_b: order[1],
            cls_token: order[2],
            pos_embed: order[3],
            blocks,
            norm_gain: tail[0],
            norm_bias: tail[1],
            head_w: tail[2],
            head_b: tail[3],
            order,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ViTParams<U> {
        let block = |b: &BlockParams<T>| BlockParams {
            ln1_gain: b.ln1_gain.cast(),
            ln1_bias: b.ln1_bias.cast(),
            q_w: b.q_w.cast(),
            q_b: b.q_b.cast(),
            k_w: b.k_w.cast(),
            k_b: b.k_b.cast(),
            v_w: b.v_w.cast(),
            v_b: b.v_b.cast(),
            o_w: b.o_w.cast(),
            o_b: b.o_b.cast(),
            ln2_gain: b.ln2_gain.cast(),
            ln2_bias: b.ln2_bias.cast(),
            fc1_w: b.fc1_w.cast(),
            fc1_b: b.fc1_b.cast(),
            fc2_w: b.fc2_w.cast(),
            fc2_b: b.fc2_b.cast(),
        };
        ViTParams {
            config: self.config.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self.blocks.iter().map(block).collect(),
            norm_gain: self.norm_gain.cast(),
            norm_bias: self.norm_bias.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// True for layer-normalization gains and biases.
pub fn is_layer_norm(name: &str) -> bool {
    name.contains(".ln1_") || name.contains(".ln2_") || name.starts_with("norm.")
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias", "attn.v.weight",
    "attn.v.bias", "attn.o.weight", "attn.o.bias", "ln2_gain", "ln2_bias", "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
];

fn block_tensors<T>(b: &BlockParams<T>) -> [&Tensor<T>; 16] {
    [
        &b.ln1_gain, &b.ln1_bias, &b.q_w, &b.q_b, &b.k_w, &b.k_b, &b.v_w, &b.v_b, &b.o_w, &b.o_b, &b.ln2_gain,
        &b.ln2_bias, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b,
    ]
}

fn block_tensors_mut<T>(b: &mut BlockParams<T>) -> [&mut Tensor<T>; 16] {
    [
        &mut b.ln1_gain,
        &mut b.ln1_bias,
        &mut b.q_w,
        &mut b.q_b,
        &mut b.k_w,
        &mut b.k_b,
        &mut b.v_w,
        &mut b.v_b,
        &mut b.o_w,
        &mut b.o_b,
        &mut b.ln2_gain,
        &mut b.ln2_bias,
        &mut b.fc1_w,
        &mut b.fc1_b,
        &mut b.fc2_w,
        &mut b.fc2_b,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_orders_agree() {
        let mut p = ViTParams::<f64>::init(&ViTConfig::default()).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.named_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 8 + 16 * 3);
        assert_eq!(names.iter().filter(|n| is_layer_norm(n)).count(), 2 + 4 * 3);
    }

    #[test]
    fn init_is_seeded() {
        let a = ViTParams::<f64>::init(&ViTConfig::default()).unwrap();
        let b = ViTParams::<f64>::init(&ViTConfig::default()).unwrap();
        let c = ViTParams::<f64>::init(&ViTConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.pos_embed.shape(), &[65, 64]);
    }
}
