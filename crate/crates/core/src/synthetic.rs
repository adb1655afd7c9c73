//! Deterministic synthetic source pairs for tests, examples and smoke runs.
//!
//! Both images share one scene: a smooth illumination ramp and soft-edged
//! shapes. `a` adds bright compact blobs, as warm targets in a thermal image.
//! `b` adds a fine grating inside one rectangle, as visible-band texture.
//! The modality-specific parts are sparse, so a good fusion can come close to
//! both sources at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

fn soft_step(t: f32) -> f32 {
    1.0 / (1.0 + (-t).exp())
}

/// Two aligned (1, 1, h, w) images with values in [0, 1].
pub fn synthetic_pair(h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 1, h, w);
    let (hf, wf) = (h as f32, w as f32);

    let ramp = (rng.gen_range(-0.15f32..0.15), rng.gen_range(-0.15f32..0.15));
    let shapes: Vec<[f32; 5]> = (0..3)
        .map(|_| {
            let y0 = rng.gen_range(0.0..0.6) * hf;
            let x0 = rng.gen_range(0.0..0.6) * wf;
            [y0, x0, y0 + rng.gen_range(0.2..0.4) * hf, x0 + rng.gen_range(0.2..0.4) * wf, rng.gen_range(0.1..0.25)]
        })
        .collect();
    let scene: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            let mut v = 0.3 + ramp.0 * (y / hf - 0.5) + ramp.1 * (x / wf - 0.5);
            for &[y0, x0, y1, x1, amp] in &shapes {
                let inside = soft_step(y - y0) * soft_step(y1 - y) * soft_step(x - x0) * soft_step(x1 - x);
                v += amp * inside;
            }
            v
        })
        .collect();

    let blobs: Vec<[f32; 4]> = (0..2)
        .map(|_| {
            [
                rng.gen_range(0.2..0.8) * hf,
                rng.gen_range(0.2..0.8) * wf,
                rng.gen_range(0.04..0.07) * hf.min(wf),
                rng.gen_range(0.35..0.5),
            ]
        })
        .collect();
    let a = Tensor::from_fn(shape, |_, _, y, x| {
        let (yf, xf) = (y as f32, x as f32);
        let mut v = scene[y * w + x];
        for &[cy, cx, r, amp] in &blobs {
            v += amp * (-((yf - cy).powi(2) + (xf - cx).powi(2)) / (2.0 * r * r)).exp();
        }
        v.clamp(0.0, 1.0)
    });

    let (ph, pw) = ((h / 4).max(1), (w / 4).max(1));
    let py = rng.gen_range(0..=h - ph);
    let px = rng.gen_range(0..=w - pw);
    let freq = rng.gen_range(0.8f32..1.2);
    let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
    let (s, c) = angle.sin_cos();
    let b = Tensor::from_fn(shape, |_, _, y, x| {
        let mut v = scene[y * w + x];
        if (py..py + ph).contains(&y) && (px..px + pw).contains(&x) {
            v += 0.1 * (freq * (c * x as f32 + s * y as f32)).sin();
        }
        v.clamp(0.0, 1.0)
    });
    (a, b)
}

/// Uniform noise image, shaped (1, 1, h, w).
pub fn noise_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| rng.gen::<f32>())
}
