use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

use super::params::ParamVars;
use super::{PromptSet, ViTConfig, ViTParams, LN_EPS};

/// Forward images per tape in [`forward_batch`].
const CHUNK: usize = 64;

/// Split a `C x H x W` image into `k` flattened patches, raster order.
/// Within a patch values are ordered channel, row, column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let (c, s) = (cfg.channels, cfg.image_size);
    if image.shape() != [c, s, s] {
        return Err(Error::shape("patchify", format!("expected {:?}, got {:?}", [c, s, s], image.shape())));
    }
    let mut out = Vec::with_capacity(image.numel());
    patches_into(image.data(), cfg, &mut out);
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// `N x C x H x W -> N x k x P`.
pub fn patchify_batch<T: Scalar>(images: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let (c, s) = (cfg.channels, cfg.image_size);
    let sh = images.shape();
    if sh.len() != 4 || sh[1..] != [c, s, s] {
        return Err(Error::shape("patchify_batch", format!("expected [N, {c}, {s}, {s}], got {sh:?}")));
    }
    let per = c * s * s;
    let mut out = Vec::with_capacity(images.numel());
    for img in images.data().chunks(per) {
        patches_into(img, cfg, &mut out);
    }
    Tensor::new(vec![sh[0], cfg.num_patches(), cfg.patch_dim()], out)
}

fn patches_into<T: Scalar>(img: &[T], cfg: &ViTConfig, out: &mut Vec<T>) {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let side = s / p;
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + py * p + dy) * s + px * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::shape("unpatchify", format!("got {:?}", patches.shape())));
    }
    let side = s / p;
    let mut img = vec![T::zero(); c * s * s];
    let mut src = patches.data().chunks(p);
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + py * p + dy) * s + px * p;
                    img[row..row + p].copy_from_slice(src.next().expect("patch count checked"));
                }
            }
        }
    }
    Tensor::new(vec![c, s, s], img)
}

/// Tape handles produced by [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Final-layer CLS embedding, `B x d`.
    pub z: Var,
    /// Classifier output, `B x num_classes`.
    pub logits: Var,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let d_in = *s.last().expect("non-scalar");
    let rows = s.iter().product::<usize>() / d_in;
    let flat = tape.reshape(x, &[rows, d_in])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add_broadcast(y, b)?;
    let d_out = tape.value(y).shape()[1];
    let mut shape = s;
    *shape.last_mut().unwrap() = d_out;
    tape.reshape(y, &shape)
}

/// Record the transformer on `tape` for patches `B x k x P`, with `prompts`
/// (`l x d`) appended after the patch tokens when given.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ViTParams<T>,
    vars: &ParamVars,
    patches: &Tensor<T>,
    prompts: Option<Var>,
) -> Result<Encoded> {
    let cfg = &params.config;
    let (k, pd, d) = (cfg.num_patches(), cfg.patch_dim(), cfg.embed_dim);
    let sh = patches.shape();
    if sh.len() != 3 || sh[1..] != [k, pd] {
        return Err(Error::shape("encode", format!("expected [B, {k}, {pd}], got {sh:?}")));
    }
    let batch = sh[0];
    let x = tape.constant(patches.clone())?;
    let emb = linear(tape, x, vars.patch_w, vars.patch_b)?;
    let cls = tape.broadcast_batch(vars.cls_token, batch)?;
    let seq = tape.concat_tokens(&[cls, emb])?;
    let mut h = tape.add_broadcast(seq, vars.pos_embed)?;
    if let Some(p) = prompts {
        let ps = tape.value(p).shape().to_vec();
        if ps.len() != 2 || ps[1] != d || ps[0] == 0 {
            return Err(Error::shape("encode", format!("prompts {ps:?} for embed_dim {d}")));
        }
        let pb = tape.broadcast_batch(p, batch)?;
        h = tape.concat_tokens(&[h, pb])?;
    }
    let eps = T::lit(LN_EPS);
    let heads = cfg.num_heads;
    let inv_sqrt = T::lit(1.0 / ((d / heads) as f64).sqrt());
    for b in &vars.blocks {
        let [ln1_g, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = *b;
        let a = tape.layer_norm(h, ln1_g, ln1_b, eps)?;
        let q = linear(tape, a, q_w, q_b)?;
        let kk = linear(tape, a, k_w, k_b)?;
        let v = linear(tape, a, v_w, v_b)?;
        let q = tape.split_heads(q, heads)?;
        let kk = tape.split_heads(kk, heads)?;
        let v = tape.split_heads(v, heads)?;
        let scores = tape.batch_matmul(q, kk, true)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let att = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(att, v, false)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        let out = linear(tape, ctx, o_w, o_b)?;
        h = tape.add(h, out)?;
        let m = tape.layer_norm(h, ln2_g, ln2_b, eps)?;
        let m = linear(tape, m, fc1_w, fc1_b)?;
        let m = tape.gelu(m)?;
        let m = linear(tape, m, fc2_w, fc2_b)?;
        h = tape.add(h, m)?;
    }
    // Layer norm is per token, so normalizing only the CLS slot is exact.
    let cls = tape.slice_token(h, 0)?;
    let z = tape.layer_norm(cls, vars.norm_gain, vars.norm_bias, eps)?;
    let logits = linear(tape, z, vars.head_w, vars.head_b)?;
    Ok(Encoded { z, logits })
}

fn run<T: Scalar>(
    params: &ViTParams<T>,
    prompts: Option<&PromptSet<T>>,
    patches: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false)?;
    let p = prompts.map(|p| tape.constant(p.tokens().clone())).transpose()?;
    let enc = encode(&mut tape, params, &vars, patches, p)?;
    Ok((tape.value(enc.logits).clone(), tape.value(enc.z).clone()))
}

fn single<T: Scalar>(
    params: &ViTParams<T>,
    prompts: Option<&PromptSet<T>>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let patches = patchify(image, &params.config)?;
    let patches = patches.reshape(vec![1, params.config.num_patches(), params.config.patch_dim()])?;
    let (logits, z) = run(params, prompts, &patches)?;
    let (c, d) = (params.config.num_classes, params.config.embed_dim);
    Ok((logits.reshape(vec![c])?, z.reshape(vec![d])?))
}

/// Prompt-free forward of one `C x H x W` image: `(logits, cls_rep)`.
pub fn forward<T: Scalar>(params: &ViTParams<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    single(params, None, image)
}

pub fn forward_with_prompts<T: Scalar>(
    params: &ViTParams<T>,
    prompts: &PromptSet<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    single(params, Some(prompts), image)
}

/// Inference over `N x C x H x W` images: `(logits N x C, reps N x d)`.
pub fn forward_batch<T: Scalar>(
    params: &ViTParams<T>,
    prompts: Option<&PromptSet<T>>,
    images: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let patches = patchify_batch(images, &params.config)?;
    let n = patches.shape()[0];
    let (c, d) = (params.config.num_classes, params.config.embed_dim);
    let per = params.config.num_patches() * params.config.patch_dim();
    let mut logits = Vec::with_capacity(n * c);
    let mut reps = Vec::with_capacity(n * d);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk = Tensor::new(
            vec![end - start, params.config.num_patches(), params.config.patch_dim()],
            patches.data()[start * per..end * per].to_vec(),
        )?;
        let (l, z) = run(params, prompts, &chunk)?;
        logits.extend_from_slice(l.data());
        reps.extend_from_slice(z.data());
    }
    Ok((Tensor::new(vec![n, c], logits)?, Tensor::new(vec![n, d], reps)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn small() -> ViTConfig {
        ViTConfig { image_size: 8, patch_size: 4, embed_dim: 8, num_layers: 2, num_heads: 2, ..Default::default() }
    }

    fn random_images(n: usize, cfg: &ViTConfig, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let len = n * cfg.channels * cfg.image_size * cfg.image_size;
        let data = (0..len).map(|_| r.random::<f64>()).collect();
        Tensor::new(vec![n, cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
    }

    fn first(images: &Tensor<f64>, i: usize) -> Tensor<f64> {
        let per = images.numel() / images.shape()[0];
        Tensor::new(images.shape()[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec()).unwrap()
    }

    #[test]
    fn patch_geometry() {
        let cfg = ViTConfig::default();
        let img = Tensor::<f64>::full([3, 32, 32], 0.5);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[64, 48]);
        assert!((0..64).all(|i| p.row(i) == p.row(0)));
        let x = random_images(1, &cfg, 3);
        let x = first(&x, 0);
        assert_eq!(unpatchify(&patchify(&x, &cfg).unwrap(), &cfg).unwrap(), x);
        assert!(patchify(&Tensor::<f64>::zeros([3, 16, 16]), &cfg).is_err());
    }

    #[test]
    fn patch_ordering() {
        let cfg = ViTConfig { image_size: 4, patch_size: 2, channels: 1, ..small() };
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small();
        let params = ViTParams::<f64>::init(&cfg).unwrap();
        let imgs = random_images(2, &cfg, 1);
        let x = first(&imgs, 0);
        let (l1, z1) = forward(&params, &x).unwrap();
        let (l2, z2) = forward(&params, &x).unwrap();
        assert_eq!(l1.shape(), &[7]);
        assert_eq!(z1.shape(), &[8]);
        assert_eq!((l1.clone(), z1.clone()), (l2, z2));
        let prompts = PromptSet::init(3, 8, 0).unwrap();
        let (lp, zp) = forward_with_prompts(&params, &prompts, &x).unwrap();
        assert_eq!(lp.shape(), l1.shape());
        assert_eq!(zp.shape(), z1.shape());
        let zero = PromptSet::new(Tensor::zeros([4, 8])).unwrap();
        let (lz, _) = forward_with_prompts(&params, &zero, &x).unwrap();
        assert_ne!(lz, l1);
    }

    #[test]
    fn batch_matches_single() {
        let cfg = small();
        let params = ViTParams::<f64>::init(&cfg).unwrap();
        let imgs = random_images(70, &cfg, 2);
        let prompts = PromptSet::init(2, 8, 5).unwrap();
        let (logits, reps) = forward_batch(&params, Some(&prompts), &imgs).unwrap();
        for i in [0, 63, 64, 69] {
            let (l, z) = forward_with_prompts(&params, &prompts, &first(&imgs, i)).unwrap();
            for (a, b) in l.data().iter().zip(logits.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in z.data().iter().zip(reps.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_order_matters() {
        let cfg = small();
        let params = ViTParams::<f64>::init(&cfg).unwrap();
        let x = first(&random_images(1, &cfg, 4), 0);
        let mut p = patchify(&x, &cfg).unwrap();
        let (r0, r1) = (p.row(0).to_vec(), p.row(1).to_vec());
        let pd = cfg.patch_dim();
        p.data_mut()[..pd].copy_from_slice(&r1);
        p.data_mut()[pd..2 * pd].copy_from_slice(&r0);
        let swapped = unpatchify(&p, &cfg).unwrap();
        let (_, z) = forward(&params, &x).unwrap();
        let (_, zs) = forward(&params, &swapped).unwrap();
        assert!(z.data().iter().zip(zs.data()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let cfg = small();
        let params = ViTParams::<f64>::init(&cfg).unwrap();
        let x = first(&random_images(1, &cfg, 6), 0);
        let (l64, _) = forward(&params, &x).unwrap();
        let (l32, _) = forward(&params.cast::<f32>(), &x.cast::<f32>()).unwrap();
        for (a, b) in l64.data().iter().zip(l32.data()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
