//! Synthetic dense-prediction task: coloured axis-aligned rectangles on a
//! noisy background, labelled per pixel.
//!
//! Class 0 is background; class `k >= 1` is a rectangle filled with palette
//! colour `k`. Rectangle corners sit on the 4-pixel grid, so labels at 1/4
//! resolution are exact. Later rectangles paint over earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PALETTE: [[f64; 3]; 7] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.1],
    [0.8, 0.2, 0.8],
    [0.1, 0.8, 0.8],
    [0.9, 0.5, 0.1],
];

#[derive(Clone, Debug)]
pub struct RectangleTask {
    pub image_size: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
}

impl RectangleTask {
    pub fn new(image_size: usize, classes: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("image size {image_size} must be a positive multiple of 32")));
        }
        if !(2..=PALETTE.len() + 1).contains(&classes) {
            return Err(Error::Config(format!("classes must be in 2..={}", PALETTE.len() + 1)));
        }
        Ok(RectangleTask { image_size, classes, seed, noise: 0.05 })
    }

    /// Label grid side: the finest feature scale.
    pub fn label_size(&self) -> usize {
        self.image_size / 4
    }

    /// Images `[batch, 3, s, s]` and row-major labels `[batch, s/4, s/4]` for
    /// a given step. Each sample has its own stream derived from the seed.
    pub fn batch<T: Scalar>(&self, step: u64, batch: usize) -> (Tensor<T>, Vec<usize>) {
        let s = self.image_size;
        let ls = self.label_size();
        let mut pixels = vec![0.0f64; batch * 3 * s * s];
        let mut labels = vec![0usize; batch * ls * ls];
        for b in 0..batch {
            let stream = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step << 20) ^ b as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let lab = &mut labels[b * ls * ls..][..ls * ls];
            for _ in 0..rng.gen_range(1..=3) {
                let class = rng.gen_range(1..self.classes);
                let (y0, x0) = (rng.gen_range(0..ls - 1), rng.gen_range(0..ls - 1));
                let (y1, x1) = (rng.gen_range(y0 + 1..=ls), rng.gen_range(x0 + 1..=ls));
                for y in y0..y1 {
                    lab[y * ls + x0..y * ls + x1].fill(class);
                }
            }
            let img = &mut pixels[b * 3 * s * s..][..3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let class = lab[(y / 4) * ls + x / 4];
                    for c in 0..3 {
                        let base = if class == 0 { 0.4 } else { PALETTE[class - 1][c] };
                        img[(c * s + y) * s + x] = base + rng.gen_range(-self.noise..self.noise);
                    }
                }
            }
        }
        let image = Tensor::new(&[batch, 3, s, s], pixels.into_iter().map(T::of).collect()).expect("batch dims");
        (image, labels)
    }
}
