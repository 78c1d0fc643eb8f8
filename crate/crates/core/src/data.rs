//! Procedural training images: linear gradients, stripes, checkerboards and
//! disks, drawn from a seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed set of images `(n, c, s, s)` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
}

impl Dataset {
    pub fn new(images: Tensor) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] == 0 {
            return Err(Error::invalid(format!("expected non-empty (n,c,h,w), got {:?}", images.shape())));
        }
        Ok(Self { images })
    }

    pub fn synthetic(n: usize, size: usize, channels: usize, seed: u64) -> Result<Self> {
        if n == 0 || size == 0 || channels == 0 {
            return Err(Error::invalid("synthetic dataset needs positive n, size and channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * channels * size * size);
        for _ in 0..n {
            data.extend(pattern(&mut rng, size, channels));
        }
        Self::new(Tensor::new(vec![n, channels, size, size], data)?)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let s = self.images.shape();
        let k = self.sample_len();
        Tensor::from_parts(vec![1, s[1], s[2], s[3]], self.images.data()[i * k..(i + 1) * k].to_vec())
    }

    /// Batch for `step`: images `step*bs .. step*bs + bs`, wrapping around.
    pub fn batch(&self, step: usize, bs: usize) -> Tensor {
        let s = self.images.shape();
        let k = self.sample_len();
        let mut data = Vec::with_capacity(bs * k);
        for b in 0..bs {
            let i = (step * bs + b) % self.len();
            data.extend_from_slice(&self.images.data()[i * k..(i + 1) * k]);
        }
        Tensor::from_parts(vec![bs, s[1], s[2], s[3]], data)
    }
}

fn pattern(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Vec<f64> {
    let color = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let a = color(rng);
    let b = color(rng);
    let kind = rng.gen_range(0..4);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let freq: f64 = rng.gen_range(1.0..3.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let cell = [2usize, 4, 8][rng.gen_range(0..3)];
    let (cx, cy, r) = (
        rng.gen_range(0.25..0.75) * size as f64,
        rng.gen_range(0.25..0.75) * size as f64,
        rng.gen_range(0.2..0.45) * size as f64,
    );

    let mut out = vec![0.0; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
            // mixing weight between the two colors, in [0, 1]
            let t = match kind {
                0 => (ct * u + st * v) / std::f64::consts::SQRT_2 + 0.5,
                1 => 0.5 + 0.5 * (std::f64::consts::TAU * freq * (ct * u + st * v) + phase).sin(),
                2 => ((x / cell + y / cell) % 2) as f64,
                _ => {
                    let dist = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    if dist < r {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            for c in 0..channels {
                out[(c * size + y) * size + x] = (a[c] * (1.0 - t) + b[c] * t).clamp(-1.0, 1.0);
            }
        }
    }
    out
}
