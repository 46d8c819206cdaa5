//! Synthetic flame / no-flame images.
//!
//! Both classes share a dark uniform-noise background with a few broad, dim
//! glare patches. Flame images add 1–3 small bright Gaussian blobs whose peak
//! reaches at least 0.8; no-flame images are capped at 0.6.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dataset, IMAGE_LEN, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng, TAG_SYNTH};

const NOISE_MAX: f64 = 0.2;
const NEGATIVE_CAP: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    /// Fraction of flame images; the positive count is `round(n · balance)`.
    pub class_balance: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n: 600,
            class_balance: 0.4,
            seed: 42,
        }
    }
}

pub fn synth_dataset(params: &SynthParams) -> Result<Dataset> {
    if params.n < 2 {
        return Err(Error::config("n", "synthetic dataset needs at least 2 samples"));
    }
    if !(0.0..=1.0).contains(&params.class_balance) {
        return Err(Error::config("class_balance", "must be in [0, 1]"));
    }
    let positives = (params.n as f64 * params.class_balance).round() as usize;
    let mut labels: Vec<u8> = (0..params.n).map(|i| (i < positives) as u8).collect();
    labels.shuffle(&mut seeded(derive_seed(params.seed, &[TAG_SYNTH])));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = seeded(derive_seed(params.seed, &[TAG_SYNTH, i as u64 + 1]));
            render(&mut rng, label == 1)
        })
        .collect();
    Dataset::new(images, labels)
}

fn add_blob(img: &mut [f64], cx: f64, cy: f64, sigma: f64, amplitude: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..IMAGE_SIDE {
        let dy = y as f64 - cy;
        for x in 0..IMAGE_SIDE {
            let dx = x as f64 - cx;
            img[y * IMAGE_SIDE + x] += amplitude * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn render(rng: &mut Rng, flame: bool) -> Vec<f32> {
    let mut img: Vec<f64> = (0..IMAGE_LEN).map(|_| rng.gen_range(0.0..NOISE_MAX)).collect();
    for _ in 0..rng.gen_range(0..=2) {
        let (cx, cy) = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
        add_blob(&mut img, cx, cy, rng.gen_range(5.0..10.0), rng.gen_range(0.05..0.15));
    }
    if flame {
        for _ in 0..rng.gen_range(1..=3) {
            // integer centers put the peak exactly on a pixel
            let cx = rng.gen_range(4..60) as f64;
            let cy = rng.gen_range(4..60) as f64;
            add_blob(&mut img, cx, cy, rng.gen_range(2.5..5.0), rng.gen_range(0.8..1.0));
        }
    }
    let cap = if flame { 1.0 } else { NEGATIVE_CAP };
    img.iter().map(|&v| (v as f32).clamp(0.0, cap)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let p = SynthParams { n: 600, class_balance: 0.4, seed: 42 };
        let a = synth_dataset(&p).unwrap();
        assert_eq!(a.class_counts(), (360, 240));
        assert_eq!(a, synth_dataset(&p).unwrap());
        assert_ne!(a, synth_dataset(&SynthParams { seed: 43, ..p }).unwrap());
    }

    #[test]
    fn generator_contract() {
        let ds = synth_dataset(&SynthParams { n: 200, class_balance: 0.5, seed: 7 }).unwrap();
        for i in 0..ds.len() {
            let img = ds.image(i);
            let max = img.iter().copied().fold(0.0f32, f32::max);
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            if ds.label(i) == 1 {
                assert!(max >= 0.8, "positive {i} peaks at {max}");
            } else {
                assert!(max <= 0.6, "negative {i} peaks at {max}");
            }
        }
    }

    #[test]
    fn rejects_tiny() {
        assert!(synth_dataset(&SynthParams { n: 1, class_balance: 0.5, seed: 0 }).is_err());
    }
}
