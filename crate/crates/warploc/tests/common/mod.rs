//! Shared fixtures for the integration and acceptance suites.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_vec_f32(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Smooth low-frequency RGB test image in [0,1]: sinusoid mixture whose
/// second derivatives are small, so bilinear-resampling oracles stay tight.
pub fn smooth_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut freqs = Vec::new();
    for _ in 0..c {
        let fx = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / w as f64;
        let fy = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / h as f64;
        let px = rng.gen_range(0.0..std::f64::consts::TAU);
        let py = rng.gen_range(0.0..std::f64::consts::TAU);
        freqs.push((fx, fy, px, py));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for (fx, fy, px, py) in freqs {
        for i in 0..h {
            for j in 0..w {
                let v = 0.5
                    + 0.25 * (fx * j as f64 + px).sin()
                    + 0.25 * (fy * i as f64 + py).cos();
                data.push(v);
            }
        }
    }
    data
}
