use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::model::{checkpoint_hash, forward_batch};
use crate::numerics::Tensor;
use crate::rng;
use crate::ViTParams;

/// Prompt-free source representations with their labels, tied to the
/// checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBank {
    pub z_s: Tensor<f64>,
    pub y_s: Vec<usize>,
    pub source_id: String,
    pub checkpoint_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    source_id: String,
    checkpoint_hash: String,
}

pub fn precompute_source_reps(
    params: &ViTParams,
    images: &Tensor<f64>,
    labels: &[usize],
    source_id: &str,
) -> Result<RepresentationBank> {
    if labels.is_empty() {
        return Err(Error::Empty("source data"));
    }
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("precompute_source_reps", format!("{:?} with {} labels", images.shape(), labels.len())));
    }
    let (_, z_s) = forward_batch(params, None, images)?;
    Ok(RepresentationBank {
        z_s,
        y_s: labels.to_vec(),
        source_id: source_id.to_string(),
        checkpoint_hash: checkpoint_hash(params)?,
    })
}

impl RepresentationBank {
    pub fn len(&self) -> usize {
        self.y_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_s.is_empty()
    }

    /// Fail unless the bank was computed with `params`.
    pub fn verify(&self, params: &ViTParams) -> Result<()> {
        let model = checkpoint_hash(params)?;
        if model != self.checkpoint_hash {
            return Err(Error::HashMismatch { bank: self.checkpoint_hash.clone(), model });
        }
        Ok(())
    }

    /// At most `cap` rows, stratified by class (largest-remainder quotas),
    /// seeded. Returns the full bank unchanged when it already fits.
    pub fn subsample(&self, cap: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let n = self.len();
        if n <= cap {
            return (self.z_s.clone(), self.y_s.clone());
        }
        let classes = self.y_s.iter().max().map_or(0, |&m| m + 1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &y) in self.y_s.iter().enumerate() {
            members[y].push(i);
        }
        let mut quota: Vec<usize> = members.iter().map(|m| m.len() * cap / n).collect();
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by_key(|&c| (std::cmp::Reverse((members[c].len() * cap) % n), c));
        let mut left = cap - quota.iter().sum::<usize>();
        for c in order {
            if left == 0 {
                break;
            }
            if quota[c] < members[c].len() {
                quota[c] += 1;
                left -= 1;
            }
        }
        let mut idx = Vec::with_capacity(cap);
        for (c, m) in members.iter().enumerate() {
            let perm = rng::permutation(m.len(), rng::derive_index(seed, c as u64));
            idx.extend(perm[..quota[c]].iter().map(|&j| m[j]));
        }
        idx.sort_unstable();
        (self.z_s.gather_rows(&idx), idx.iter().map(|&i| self.y_s[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta { source_id: self.source_id.clone(), checkpoint_hash: self.checkpoint_hash.clone() };
        container::write_file(
            path,
            &[
                NamedTensor::json("__meta__", &serde_json::to_string(&meta)?),
                NamedTensor::new("z_s", self.z_s.shape().to_vec(), self.z_s.data().to_vec()),
                NamedTensor::new("y_s", vec![self.len()], self.y_s.iter().map(|&y| y as f64).collect()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = container::read_file(path)?;
        let meta: Meta = serde_json::from_str(&container::find(&tensors, "__meta__", path)?.as_json()?)
            .map_err(|e| Error::format(path, format!("bad __meta__: {e}")))?;
        let z = container::find(&tensors, "z_s", path)?;
        let y = container::find(&tensors, "y_s", path)?;
        if z.shape.len() != 2 || y.shape != [z.shape[0]] {
            return Err(Error::format(path, format!("z_s {:?} vs y_s {:?}", z.shape, y.shape)));
        }
        let y_s = y
            .data
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Error::format(path, "bad label")) })
            .collect::<Result<Vec<_>>>()?;
        let z_s = Tensor::new(z.shape.clone(), z.data.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(RepresentationBank { z_s, y_s, source_id: meta.source_id, checkpoint_hash: meta.checkpoint_hash })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(labels: Vec<usize>) -> RepresentationBank {
        let n = labels.len();
        RepresentationBank {
            z_s: Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap(),
            y_s: labels,
            source_id: "clean".into(),
            checkpoint_hash: "00".into(),
        }
    }

    #[test]
    fn subsample_is_stratified_and_seeded() {
        let b = bank((0..100).map(|i| if i < 70 { 0 } else if i < 90 { 1 } else { 2 }).collect());
        let (z, y) = b.subsample(10, 3);
        assert_eq!(z.shape(), &[10, 2]);
        let count = |c| y.iter().filter(|&&v| v == c).count();
        assert_eq!((count(0), count(1), count(2)), (7, 2, 1));
        assert_eq!(b.subsample(10, 3), (z, y.clone()));
        assert_ne!(b.subsample(10, 4).0, b.subsample(10, 3).0);
        assert_eq!(b.subsample(100, 0).1, b.y_s);
        let (_, y) = b.subsample(7, 0);
        assert_eq!(y.len(), 7);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let b = bank(vec![0, 1, 2, 1]);
        b.save(&path).unwrap();
        assert_eq!(RepresentationBank::load(&path).unwrap(), b);
    }
}
