use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Crack thickness range in pixels, inclusive.
    pub min_thickness: f64,
    pub max_thickness: f64,
    /// Crack path length as a multiple of the image side.
    pub length_factor: f64,
    /// Largest heading change per path segment, radians.
    pub max_turn: f64,
    /// Amplitude of the background texture.
    pub texture: f64,
    /// Train and validation shares; the test split gets the remainder.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_thickness: 1.0,
            max_thickness: 4.0,
            length_factor: 1.1,
            max_turn: 0.35,
            texture: 0.18,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

/// Multi-octave lattice noise with smoothstep interpolation, in `[-1, 1]`.
struct ValueNoise {
    octaves: Vec<(usize, Vec<f64>)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let octaves = [4usize, 8, 16]
            .iter()
            .map(|&cells| {
                let n = cells + 2;
                let grid = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                (cells, grid)
            })
            .filter(|(c, _)| *c <= size)
            .collect();
        Self { octaves }
    }

    fn at(&self, x: f64, y: f64, size: usize) -> f64 {
        let mut v = 0.0;
        let mut amp = 0.5;
        let mut norm = 0.0;
        for (cells, grid) in &self.octaves {
            let n = cells + 2;
            let fx = x / size as f64 * *cells as f64;
            let fy = y / size as f64 * *cells as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let s = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (s(fx - ix as f64), s(fy - iy as f64));
            let g = |i: usize, j: usize| grid[j.min(n - 1) * n + i.min(n - 1)];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            v += amp * (top * (1.0 - ty) + bot * ty);
            norm += amp;
            amp *= 0.5;
        }
        if norm > 0.0 {
            v / norm
        } else {
            0.0
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Polyline with a smoothly drifting heading, entering from a random border.
fn crack_path(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let s = size as f64;
    let side = rng.random_range(0..4);
    let u = rng.random_range(0.15 * s..0.85 * s);
    let (start, base) = match side {
        0 => ((u, 0.0), PI / 2.0),
        1 => ((s, u), PI),
        2 => ((u, s), -PI / 2.0),
        _ => ((0.0, u), 0.0),
    };
    let mut heading = base + rng.random_range(-0.5..0.5);
    let step = (s / 16.0).max(2.0);
    let n = ((p.length_factor * s) / step).ceil() as usize;
    let mut pts = vec![start];
    let mut drift = 0.0;
    for _ in 0..n {
        drift = 0.6 * drift + rng.random_range(-p.max_turn..p.max_turn);
        heading += drift;
        let (x, y) = *pts.last().expect("non-empty");
        pts.push((x + step * heading.cos(), y + step * heading.sin()));
    }
    pts
}

/// One sample, fully determined by `seed`.
pub fn synth_sample(id: String, size: usize, seed: u64, p: &SynthParams) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ValueNoise::new(&mut rng, size);
    let base = rng.random_range(0.5..0.75);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let path = crack_path(&mut rng, size, p);
    let half = rng.random_range(p.min_thickness..=p.max_thickness) / 2.0;
    let depth = rng.random_range(0.3..0.45);
    let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.03..0.03)).collect();

    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    let mut mask = vec![0.0; plane];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let d = path.windows(2).map(|w| segment_distance((x, y), w[0], w[1])).fold(f64::INFINITY, f64::min);
            let on_crack = d <= half;
            let rel = (x / size as f64 - 0.5, y / size as f64 - 0.5);
            let mut v = base + p.texture * noise.at(x, y, size) + gx * rel.0 + gy * rel.1 + grain[i * size + j];
            if on_crack {
                v -= depth;
                mask[i * size + j] = 1.0;
            }
            for (ch, t) in tint.iter().enumerate() {
                image[ch * plane + i * size + j] = (v + t).clamp(0.0, 1.0);
            }
        }
    }
    SegSample {
        id,
        image: Tensor::new(image, &[3, size, size]).expect("sized"),
        mask: Tensor::new(mask, &[1, size, size]).expect("sized"),
    }
}

/// Seed of sample `i`, independent of how many samples are generated.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(1)
}

/// Split sizes `(train, val, test)` for `n` samples.
pub fn split_sizes(n: usize, p: &SynthParams) -> (usize, usize, usize) {
    let train = ((n as f64) * p.train_fraction).round() as usize;
    let val = (((n as f64) * p.val_fraction).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

pub fn synth_crack_dataset(n: usize, size: usize, seed: u64, p: &SynthParams) -> Result<Dataset> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("synthetic image size {size} must be a positive multiple of 32")));
    }
    if !(p.min_thickness > 0.0 && p.min_thickness <= p.max_thickness) {
        return Err(Error::Config("crack thickness range is empty".into()));
    }
    if !(p.train_fraction >= 0.0 && p.val_fraction >= 0.0 && p.train_fraction + p.val_fraction <= 1.0) {
        return Err(Error::Config("split fractions must be non-negative and sum to at most 1".into()));
    }
    let samples = par::map_indices(Exec::default(), n, |i| synth_sample(format!("synth_{i:05}"), size, sample_seed(seed, i), p));
    let (tr, va, _) = split_sizes(n, p);
    let mut it = samples.into_iter();
    Ok(Dataset {
        train: it.by_ref().take(tr).collect(),
        val: it.by_ref().take(va).collect(),
        test: it.collect(),
    })
}
