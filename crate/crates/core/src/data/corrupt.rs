use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] =
        [CorruptionKind::GaussianNoise, CorruptionKind::Blur, CorruptionKind::Contrast, CorruptionKind::Pixelate];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Strength at `severity`; index 0 is the identity setting.
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 6] = match self {
            CorruptionKind::GaussianNoise => [0.0, 0.05, 0.08, 0.11, 0.15, 0.2],
            // Gaussian sigma as a fraction of the image side.
            CorruptionKind::Blur => [0.0, 0.03, 0.05, 0.07, 0.1, 0.13],
            // Remaining contrast and remaining resolution; smaller is harsher.
            CorruptionKind::Contrast => [1.0, 0.5, 0.4, 0.3, 0.24, 0.18],
            CorruptionKind::Pixelate => [1.0, 0.75, 0.6, 0.5, 0.45, 0.375],
        };
        table[usize::from(severity.min(MAX_SEVERITY))]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::Invalid(format!("severity {} outside 0..={MAX_SEVERITY}", self.severity)));
        }
        Ok(())
    }

    /// Corrupt a `channels x size x size` image in place; values stay in [0, 1].
    pub fn apply(&self, img: &mut [f64], channels: usize, size: usize, r: &mut Rng) {
        if self.severity > 0 {
            apply_strength(self.kind, self.kind.parameter(self.severity), img, channels, size, r);
        }
    }
}

/// Apply `kind` at an explicit strength (see [`CorruptionKind::parameter`]).
pub fn apply_strength(kind: CorruptionKind, p: f64, img: &mut [f64], channels: usize, size: usize, r: &mut Rng) {
    match kind {
        CorruptionKind::GaussianNoise => {
            if p > 0.0 {
                let normal = Normal::new(0.0, p).expect("positive std");
                for v in img.iter_mut() {
                    *v += normal.sample(r);
                }
            }
        }
        CorruptionKind::Blur => {
            if p > 0.0 {
                blur(img, channels, size, p * size as f64)
            }
        }
        CorruptionKind::Contrast => {
            let plane = size * size;
            for c in img.chunks_mut(plane) {
                let mean = c.iter().sum::<f64>() / plane as f64;
                for v in c {
                    *v = (*v - mean) * p + mean;
                }
            }
        }
        CorruptionKind::Pixelate => pixelate(img, channels, size, ((size as f64 * p).round() as usize).max(1)),
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Separable Gaussian blur with edge clamping.
fn blur(img: &mut [f64], channels: usize, size: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let at = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for c in 0..channels {
        let plane = &mut img[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                let s: f64 = kernel.iter().enumerate().map(|(k, w)| w * plane[y * size + at(x as isize + k as isize - radius)]).sum();
                tmp[y * size + x] = s / norm;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let s: f64 = kernel.iter().enumerate().map(|(k, w)| w * tmp[at(y as isize + k as isize - radius) * size + x]).sum();
                plane[y * size + x] = s / norm;
            }
        }
    }
}

/// Box-average down to `low x low`, then nearest-neighbour back up.
fn pixelate(img: &mut [f64], channels: usize, size: usize, low: usize) {
    if low >= size {
        return;
    }
    let cell = |i: usize| i * low / size;
    for c in 0..channels {
        let plane = &mut img[c * size * size..(c + 1) * size * size];
        let mut sum = vec![0.0; low * low];
        let mut count = vec![0usize; low * low];
        for y in 0..size {
            for x in 0..size {
                let k = cell(y) * low + cell(x);
                sum[k] += plane[y * size + x];
                count[k] += 1;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let k = cell(y) * low + cell(x);
                plane[y * size + x] = sum[k] / count[k] as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gradient_image(size: usize) -> Vec<f64> {
        (0..3 * size * size).map(|i| ((i % size) as f64 / size as f64 + (i / size % size) as f64 / (2 * size) as f64) / 1.5).collect()
    }

    fn deviation(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn severity_zero_is_identity() {
        let img = gradient_image(16);
        for kind in CorruptionKind::ALL {
            let mut out = img.clone();
            Corruption { kind, severity: 0 }.apply(&mut out, 3, 16, &mut rng::seeded(0));
            assert_eq!(out, img);
        }
    }

    #[test]
    fn strength_grows_with_severity() {
        let img = gradient_image(32);
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for severity in 1..=MAX_SEVERITY {
                let mut out = img.clone();
                Corruption { kind, severity }.apply(&mut out, 3, 32, &mut rng::seeded(7));
                let dev = deviation(&out, &img);
                assert!(dev > prev, "{} severity {severity}: {dev} <= {prev}", kind.name());
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
                prev = dev;
            }
        }
    }

    #[test]
    fn noise_std_is_larger_at_high_severity() {
        let flat = vec![0.5; 3 * 16 * 16];
        let std_at = |severity| {
            let mut out = flat.clone();
            Corruption { kind: CorruptionKind::GaussianNoise, severity }.apply(&mut out, 3, 16, &mut rng::seeded(1));
            deviation(&out, &flat)
        };
        assert!(std_at(5) > std_at(1));
        assert!(Corruption { kind: CorruptionKind::Blur, severity: 6 }.validate().is_err());
    }

    #[test]
    fn names_round_trip_through_serde() {
        for kind in CorruptionKind::ALL {
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
    }
}
