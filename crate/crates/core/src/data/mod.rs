//! Deterministic shapes-on-backgrounds image domains with optional
//! corruptions, plus the dataset directory format.

mod corrupt;
mod io;
mod render;

pub use corrupt::{apply_strength, Corruption, CorruptionKind, MAX_SEVERITY};
pub use io::{load_dataset, load_domain, read_manifest, save_dataset, Manifest, SplitEntry};
pub use render::{NUM_BACKGROUNDS, NUM_PALETTES, SHAPES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const CHANNELS: usize = 3;
pub const MIN_IMAGE_SIZE: usize = 16;

/// One image domain: rendering style plus an optional post-render corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default)]
    pub palette: usize,
    #[serde(default)]
    pub background: usize,
    /// Rotation range in degrees.
    #[serde(default = "default_rotation")]
    pub rotation: [f64; 2],
    #[serde(default)]
    pub corruption: Option<Corruption>,
    #[serde(default)]
    pub seed: u64,
}

fn default_rotation() -> [f64; 2] {
    [-20.0, 20.0]
}

impl DomainSpec {
    pub fn clean(name: impl Into<String>, seed: u64) -> Self {
        DomainSpec { name: name.into(), palette: 0, background: 0, rotation: default_rotation(), corruption: None, seed }
    }

    /// Clean style with `kind` at `severity`, named `<kind>-<severity>`.
    pub fn corrupted(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        DomainSpec {
            corruption: Some(Corruption { kind, severity }),
            ..DomainSpec::clean(format!("{}-{severity}", kind.name()), seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ':']) {
            return Err(Error::Invalid(format!("bad domain name {:?}", self.name)));
        }
        if !(self.rotation[0] <= self.rotation[1]) {
            return Err(Error::Invalid(format!("rotation range {:?} is empty", self.rotation)));
        }
        self.corruption.as_ref().map_or(Ok(()), Corruption::validate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub name: String,
    pub split: String,
    pub num_classes: usize,
    /// `N x C x H x W`, values in [0, 1].
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn new(name: String, split: String, num_classes: usize, images: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        let sh = images.shape();
        if sh.len() != 4 || sh[0] != labels.len() || sh[2] != sh[3] {
            return Err(Error::shape("dataset", format!("images {sh:?} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(SyntheticDataset { name, split, num_classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize], split: impl Into<String>) -> SyntheticDataset {
        SyntheticDataset {
            name: self.name.clone(),
            split: split.into(),
            num_classes: self.num_classes,
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stack datasets of the same domain geometry.
    pub fn concat(parts: &[SyntheticDataset], split: impl Into<String>) -> Result<SyntheticDataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.images.shape()[1..] != first.images.shape()[1..] || p.num_classes != first.num_classes {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", p.images.shape(), first.images.shape())));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let mut shape = first.images.shape().to_vec();
        shape[0] = labels.len();
        SyntheticDataset::new(first.name.clone(), split.into(), first.num_classes, Tensor::new(shape, data)?, labels)
    }
}

/// Render `n` class-balanced images of `spec`.
pub fn generate(spec: &DomainSpec, n: usize, num_classes: usize, image_size: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    if !(2..=SHAPES.len()).contains(&num_classes) {
        return Err(Error::Invalid(format!("num_classes must be in 2..={}, got {num_classes}", SHAPES.len())));
    }
    if n < num_classes {
        return Err(Error::Invalid(format!("need at least one image per class: n={n} < {num_classes}")));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Invalid(format!("image_size {image_size} too small to render shapes (< {MIN_IMAGE_SIZE})")));
    }
    let order = rng::permutation(n, rng::derive(spec.seed, "labels"));
    let labels: Vec<usize> = order.iter().map(|&i| i % num_classes).collect();
    let style = render::Style {
        palette: spec.palette,
        background: spec.background,
        rotation: (spec.rotation[0], spec.rotation[1]),
    };
    let (render_seed, corrupt_seed) = (rng::derive(spec.seed, "render"), rng::derive(spec.seed, "corrupt"));
    let per = CHANNELS * image_size * image_size;
    let mut data = Vec::with_capacity(n * per);
    for (i, &y) in labels.iter().enumerate() {
        let mut img = render::render(y, image_size, style, &mut rng::seeded(rng::derive_index(render_seed, i as u64)));
        if let Some(c) = &spec.corruption {
            c.apply(&mut img, CHANNELS, image_size, &mut rng::seeded(rng::derive_index(corrupt_seed, i as u64)));
        }
        data.extend(img);
    }
    let images = Tensor::new(vec![n, CHANNELS, image_size, image_size], data)?;
    SyntheticDataset::new(spec.name.clone(), "all".into(), num_classes, images, labels)
}

/// Seeded stratified split into `(train, val)`; every class lands on both sides.
pub fn split(ds: &SyntheticDataset, train_fraction: f64, seed: u64) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!("train_fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..ds.num_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Invalid(format!("class {class} has fewer than 2 samples")));
        }
        let perm = rng::permutation(members.len(), rng::derive_index(rng::derive(seed, "split"), class as u64));
        let k = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend(perm[..k].iter().map(|&j| members[j]));
        val.extend(perm[k..].iter().map(|&j| members[j]));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train, "train"), ds.subset(&val, "val")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = DomainSpec::corrupted(CorruptionKind::GaussianNoise, 3, 11);
        let a = generate(&spec, 50, 7, 16).unwrap();
        let b = generate(&spec, 50, 7, 16).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.name, "gaussian_noise-3");
    }

    #[test]
    fn clean_equals_severity_zero() {
        let clean = generate(&DomainSpec::clean("x", 4), 14, 7, 16).unwrap();
        let zero = DomainSpec { corruption: Some(Corruption { kind: CorruptionKind::Blur, severity: 0 }), ..DomainSpec::clean("x", 4) };
        assert_eq!(generate(&zero, 14, 7, 16).unwrap(), clean);
    }

    #[test]
    fn generation_preconditions() {
        let spec = DomainSpec::clean("s", 0);
        assert!(generate(&spec, 5, 7, 16).is_err());
        assert!(generate(&spec, 14, 7, 12).is_err());
        assert!(generate(&spec, 14, 8, 16).is_err());
        assert!(generate(&DomainSpec::clean("a/b", 0), 14, 7, 16).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let ds = generate(&DomainSpec::clean("s", 2), 700, 7, 16).unwrap();
        let (tr, va) = split(&ds, 0.8, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (560, 140));
        assert!(tr.class_counts().iter().all(|&c| c == 80));
        let (tr2, _) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(tr, tr2);
        assert!(split(&ds, 1.0, 0).is_err());
        let tiny = ds.subset(&[0], "x");
        assert!(split(&tiny, 0.5, 0).is_err());
    }
}
