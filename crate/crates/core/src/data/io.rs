use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::SyntheticDataset;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub tag: String,
    pub count: usize,
    pub images_file: String,
    pub labels_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub splits: Vec<SplitEntry>,
}

fn images_bytes(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * t.numel());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn labels_bytes(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &y in labels {
        let y = u32::try_from(y).map_err(|_| Error::Invalid(format!("label {y} does not fit u32")))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

/// Write the splits of one domain into `dir` (one manifest, two files per split).
pub fn save_dataset(dir: &Path, parts: &[SyntheticDataset]) -> Result<()> {
    let first = parts.first().ok_or(Error::Empty("dataset splits"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        name: first.name.clone(),
        num_classes: first.num_classes,
        image_size: first.image_size(),
        channels: first.channels(),
        splits: Vec::new(),
    };
    for p in parts {
        if p.name != first.name || p.images.shape()[1..] != first.images.shape()[1..] {
            return Err(Error::Invalid(format!("split {} does not match domain {}", p.split, first.name)));
        }
        let entry = SplitEntry {
            tag: p.split.clone(),
            count: p.len(),
            images_file: format!("{}.images.bin", p.split),
            labels_file: format!("{}.labels.bin", p.split),
        };
        write(&dir.join(&entry.images_file), &images_bytes(&p.images))?;
        write(&dir.join(&entry.labels_file), &labels_bytes(&p.labels)?)?;
        manifest.splits.push(entry);
    }
    write(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_u64s(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<u64>> {
    if bytes.len() < 8 * count {
        return Err(Error::format(path, "truncated header"));
    }
    Ok(bytes[..8 * count].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_images(path: &Path, m: &Manifest, count: usize) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims: Vec<usize> = read_u64s(&bytes, 4, path)?.into_iter().map(|d| d as usize).collect();
    let expected = [count, m.channels, m.image_size, m.image_size];
    if dims != expected {
        return Err(Error::format(path, format!("dims {dims:?}, manifest implies {expected:?}")));
    }
    let body = &bytes[32..];
    if body.len() != 8 * dims.iter().product::<usize>() {
        return Err(Error::format(path, format!("payload of {} bytes for dims {dims:?}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

fn read_labels(path: &Path, count: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = read_u64s(&bytes, 1, path)?[0] as usize;
    if len != count || bytes.len() != 8 + 4 * len {
        return Err(Error::format(path, format!("{len} labels in {} bytes, manifest count {count}", bytes.len())));
    }
    Ok(bytes[8..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Load split `tag` of the domain stored in `dir`, or all splits stacked
/// when `tag` is `None`.
pub fn load_dataset(dir: &Path, tag: Option<&str>) -> Result<SyntheticDataset> {
    let m = read_manifest(dir)?;
    let entries: Vec<&SplitEntry> = m.splits.iter().filter(|s| tag.is_none_or(|t| s.tag == t)).collect();
    if entries.is_empty() {
        return Err(Error::Invalid(format!("domain {} has no split {:?}", m.name, tag.unwrap_or("*"))));
    }
    let mut parts = Vec::new();
    let mut max_label = None;
    for e in entries {
        let images = read_images(&dir.join(&e.images_file), &m, e.count)?;
        let labels = read_labels(&dir.join(&e.labels_file), e.count)?;
        max_label = max_label.max(labels.iter().copied().max());
        parts.push(SyntheticDataset { name: m.name.clone(), split: e.tag.clone(), num_classes: m.num_classes, images, labels });
    }
    if max_label.map(|y| y + 1) != Some(m.num_classes) {
        return Err(Error::Invalid(format!(
            "manifest num_classes {} but labels span 0..={}",
            m.num_classes,
            max_label.map_or(-1, |y| y as i64)
        )));
    }
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    SyntheticDataset::concat(&parts, tag.unwrap_or("all"))
}

/// Resolve `name` or `name:split` under a data root.
pub fn load_domain(root: &Path, selector: &str) -> Result<SyntheticDataset> {
    let (name, tag) = match selector.split_once(':') {
        Some((n, t)) => (n, Some(t)),
        None => (selector, None),
    };
    let dir: PathBuf = root.join(name);
    load_dataset(&dir, tag)
}

#[cfg(test)]
mod tests {
    use super::super::{generate, split, DomainSpec};
    use super::*;

    #[test]
    fn round_trip_and_selectors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&DomainSpec::clean("clean", 1), 28, 7, 16).unwrap();
        let (tr, va) = split(&ds, 0.75, 0).unwrap();
        save_dataset(&dir.path().join("clean"), &[tr.clone(), va.clone()]).unwrap();
        assert_eq!(load_domain(dir.path(), "clean:train").unwrap(), tr);
        assert_eq!(load_domain(dir.path(), "clean:val").unwrap(), va);
        let all = load_domain(dir.path(), "clean").unwrap();
        assert_eq!(all.len(), 28);
        assert!(load_domain(dir.path(), "clean:test").is_err());
    }

    #[test]
    fn detects_inconsistencies() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("x");
        let ds = generate(&DomainSpec::clean("x", 1), 14, 7, 16).unwrap();
        save_dataset(&d, &[ds.clone()]).unwrap();
        fs::remove_file(d.join("all.labels.bin")).unwrap();
        assert!(matches!(load_dataset(&d, None), Err(Error::Io { .. })));

        save_dataset(&d, &[ds.clone()]).unwrap();
        let mut m = read_manifest(&d).unwrap();
        m.num_classes = 8;
        fs::write(d.join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_dataset(&d, None).unwrap_err();
        assert!(err.is_validation(), "{err}");

        save_dataset(&d, &[ds]).unwrap();
        let mut m = read_manifest(&d).unwrap();
        m.image_size = 32;
        fs::write(d.join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(&d, None), Err(Error::Format { .. })));
    }
}
