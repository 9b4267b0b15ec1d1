use rand::Rng as _;

use crate::rng::Rng;

/// The seven class shapes, indexed by label.
pub const SHAPES: [&str; 7] = ["circle", "square", "triangle", "cross", "ring", "bar", "diamond"];

const SUPERSAMPLE: usize = 4;

type Rgb = [f64; 3];

const PALETTES: [&[Rgb]; 3] = [
    &[[0.92, 0.22, 0.2], [0.2, 0.78, 0.3], [0.25, 0.42, 0.95], [0.95, 0.85, 0.2], [0.88, 0.4, 0.9], [0.2, 0.85, 0.9]],
    &[[0.98, 0.7, 0.7], [0.7, 0.95, 0.75], [0.72, 0.8, 1.0], [1.0, 0.95, 0.7], [0.95, 0.78, 1.0]],
    &[[0.95, 0.95, 0.95], [0.7, 0.7, 0.7], [0.5, 0.5, 0.5]],
];

pub const NUM_PALETTES: usize = PALETTES.len();
pub const NUM_BACKGROUNDS: usize = 4;

/// Is `(u, v)` (shape frame, unit radius) inside shape `class`?
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => v >= -0.55 && v <= 1.0 - 3f64.sqrt() * au,
        3 => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
        4 => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        5 => au <= 1.0 && av <= 0.28,
        _ => au / 0.65 + av <= 1.0,
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Style {
    pub palette: usize,
    pub background: usize,
    pub rotation: (f64, f64),
}

fn jitter(c: Rgb, r: &mut Rng, amount: f64) -> Rgb {
    c.map(|x| (x + r.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn background(kind: usize, r: &mut Rng) -> impl Fn(f64, f64) -> Rgb {
    let base = match kind {
        0 => [r.random_range(0.04..0.18); 3],
        1 => [r.random_range(0.78..0.95); 3],
        2 => jitter([0.35, 0.3, 0.25], r, 0.08),
        _ => jitter([0.15, 0.25, 0.4], r, 0.08),
    };
    let tilt = r.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (tilt.cos(), tilt.sin());
    let freq = r.random_range(3.0..5.0);
    move |x: f64, y: f64| {
        let g = 0.06 * (gx * (x - 0.5) + gy * (y - 0.5));
        let t = match kind {
            2 => 0.12 * ((x * gy - y * gx) * freq * std::f64::consts::TAU).sin().signum(),
            3 => 0.1 * ((x * freq * 6.0).sin() * (y * freq * 6.0).sin()),
            _ => 0.0,
        };
        base.map(|c| (c + g + t).clamp(0.0, 1.0))
    }
}

/// Render one antialiased `3 x size x size` image of shape `class`.
pub(crate) fn render(class: usize, size: usize, style: Style, r: &mut Rng) -> Vec<f64> {
    let palette = PALETTES[style.palette % NUM_PALETTES];
    let fg = jitter(palette[r.random_range(0..palette.len())], r, 0.05);
    let bg = background(style.background % NUM_BACKGROUNDS, r);
    let radius = r.random_range(0.26..0.36);
    let cx = 0.5 + r.random_range(-0.1..0.1);
    let cy = 0.5 + r.random_range(-0.1..0.1);
    let (lo, hi) = style.rotation;
    let angle = if hi > lo { r.random_range(lo..hi) } else { lo }.to_radians();
    let (sin, cos) = angle.sin_cos();
    let mut img = vec![0.0; 3 * size * size];
    let inv = 1.0 / (size * SUPERSAMPLE) as f64;
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * inv - cx;
                    let y = cy - ((py * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                    let u = (cos * x + sin * y) / radius;
                    let v = (-sin * x + cos * y) / radius;
                    hits += usize::from(inside(class, u, v));
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let b = bg((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
            for c in 0..3 {
                img[c * plane + py * size + px] = cover * fg[c] + (1.0 - cover) * b[c];
            }
        }
    }
    img
}
