//! Shared helpers for the integration suites: independent brute-force
//! metric implementations (plain double loops, no summed-area tables or
//! other shortcuts) and deterministic random-input builders.
//!
//! Each integration binary uses its own subset of these helpers.
#![allow(dead_code)]

use fundus_restore::image::{Image, Mask};
use fundus_restore::rng::Pcg32;

/// Brute-force PSNR from the definition. Callers avoid identical inputs;
/// the zero-MSE cap is asserted against the library constant separately.
pub fn naive_psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            for c in 0..a.channels {
                let d = a.get(y, x, c) as f64 - b.get(y, x, c) as f64;
                acc += d * d;
                n += 1;
            }
        }
    }
    10.0 * (peak * peak / (acc / n as f64)).log10()
}

/// Brute-force SSIM: per fully interior window and channel, population
/// moments computed by direct summation, standard stabilized formula,
/// averaged over all windows.
pub fn naive_ssim(a: &Image, b: &Image, window: usize, k1: f64, k2: f64, peak: f64) -> f64 {
    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let n = (window * window) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for y0 in 0..=a.height - window {
            for x0 in 0..=a.width - window {
                let (mut sa, mut sb) = (0.0f64, 0.0f64);
                let (mut qa, mut qb, mut qab) = (0.0f64, 0.0f64, 0.0f64);
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        let va = a.get(y, x, ch) as f64;
                        let vb = b.get(y, x, ch) as f64;
                        sa += va;
                        sb += vb;
                        qa += va * va;
                        qb += vb * vb;
                        qab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = qa / n - ma * ma;
                let vb = qb / n - mb * mb;
                let cov = qab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Brute-force Dice overlap; 1 when both masks are empty.
pub fn naive_dice(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if a.get(y, x) == 1 && b.get(y, x) == 1 {
                inter += 1;
            }
            total += a.get(y, x) as usize + b.get(y, x) as usize;
        }
    }
    if total == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / total as f64
}

/// Uniform-random image with values in [0, 1).
pub fn random_image(height: usize, width: usize, channels: usize, rng: &mut Pcg32) -> Image {
    let data = (0..height * width * channels)
        .map(|_| rng.next_f64() as f32)
        .collect();
    Image::from_vec(height, width, channels, data).unwrap()
}

/// Random binary mask with the given fill probability.
pub fn random_mask(height: usize, width: usize, p_one: f64, rng: &mut Pcg32) -> Mask {
    let data = (0..height * width)
        .map(|_| u8::from(rng.next_f64() < p_one))
        .collect();
    Mask::from_vec(height, width, data).unwrap()
}

/// Filled disc of the given radius centered at (cy, cx).
pub fn disc_mask(height: usize, width: usize, cy: usize, cx: usize, radius: usize) -> Mask {
    let mut m = Mask::zeros(height, width);
    let r2 = (radius * radius) as isize;
    for y in 0..height {
        for x in 0..width {
            let dy = y as isize - cy as isize;
            let dx = x as isize - cx as isize;
            if dy * dy + dx * dx <= r2 {
                m.set(y, x, 1);
            }
        }
    }
    m
}
