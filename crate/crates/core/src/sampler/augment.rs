use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Random view generator. All draws come from the caller's random source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Side of the square crop relative to the shorter image side.
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_prob: f64,
    /// Multiplicative brightness jitter, `1 +- brightness`.
    pub brightness: f64,
    /// Hue rotation range in degrees, applied to 3-channel images only.
    pub hue_degrees: f64,
    /// Replace the image by its 2-channel sobel gradient after all other steps.
    pub sobel: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_min: 0.6,
            crop_max: 1.0,
            flip_prob: 0.5,
            brightness: 0.25,
            hue_degrees: 18.0,
            sobel: false,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_min: 1.0,
            crop_max: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            hue_degrees: 0.0,
            sobel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("augmentation.{k}");
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::config(key("crop_min"), "need 0 < crop_min <= crop_max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(key("flip_prob"), "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::config(key("brightness"), "must lie in [0, 1)"));
        }
        if !(0.0..=180.0).contains(&self.hue_degrees) {
            return Err(Error::config(key("hue_degrees"), "must lie in [0, 180]"));
        }
        Ok(())
    }

    /// Channel count of images produced from `input_channels`-channel inputs.
    pub fn output_channels(&self, input_channels: usize) -> usize {
        if self.sobel {
            2
        } else {
            input_channels
        }
    }

    /// Deterministic part of the policy, applied to evaluation images.
    pub fn preprocess(&self, image: &Image) -> Image {
        if self.sobel {
            sobel(image)
        } else {
            image.clone()
        }
    }
}

/// Crop-and-resize, flip, brightness and hue jitter, then optional sobel.
pub fn augment<R: Rng>(image: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let mut out = random_crop(image, policy, rng);
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        flip_horizontal(&mut out);
    }
    if policy.brightness > 0.0 {
        let factor = 1.0 + rng.random_range(-policy.brightness..=policy.brightness);
        for v in out.data_mut() {
            *v = (*v * factor as f32).clamp(0.0, 1.0);
        }
    }
    if policy.hue_degrees > 0.0 && out.channels() == 3 {
        let shift = rng.random_range(-policy.hue_degrees..=policy.hue_degrees);
        rotate_hue(&mut out, shift);
    }
    if policy.sobel {
        out = sobel(&out);
    }
    out
}

fn random_crop<R: Rng>(image: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let (c, h, w) = image.dims();
    let scale = if policy.crop_max > policy.crop_min {
        rng.random_range(policy.crop_min..=policy.crop_max)
    } else {
        policy.crop_min
    };
    let side = scale * h.min(w) as f64;
    if side >= h.min(w) as f64 && h == w {
        return image.clone();
    }
    let top = rng.random_range(0.0..=(h as f64 - side));
    let left = rng.random_range(0.0..=(w as f64 - side));
    let mut out = Image::zeros(c, h, w);
    let (sy, sx) = (side / h as f64, side / w as f64);
    for i in 0..h {
        let y = (top + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..w {
            let x = (left + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (x - x0 as f64) as f32;
            for ch in 0..c {
                let p = image.plane(ch);
                let top_row = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom_row = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.set(ch, i, j, top_row * (1.0 - fy) + bottom_row * fy);
            }
        }
    }
    out
}

fn flip_horizontal(image: &mut Image) {
    let w = image.width();
    for ch in 0..image.channels() {
        for row in image.plane_mut(ch).chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

fn rotate_hue(image: &mut Image, degrees: f64) {
    let n = image.height() * image.width();
    let data = image.data_mut();
    for i in 0..n {
        let (r, g, b) = (data[i], data[n + i], data[2 * n + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let hue = if max == r {
            60.0 * ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            60.0 * ((b - r) / delta + 2.0)
        } else {
            60.0 * ((r - g) / delta + 4.0)
        };
        let h = (f64::from(hue) + degrees).rem_euclid(360.0) / 60.0;
        let x = delta * (1.0 - ((h % 2.0) - 1.0).abs() as f32);
        let (r1, g1, b1) = match h as usize {
            0 => (delta, x, 0.0),
            1 => (x, delta, 0.0),
            2 => (0.0, delta, x),
            3 => (0.0, x, delta),
            4 => (x, 0.0, delta),
            _ => (delta, 0.0, x),
        };
        data[i] = r1 + min;
        data[n + i] = g1 + min;
        data[2 * n + i] = b1 + min;
    }
}

/// Horizontal and vertical sobel responses of the channel mean, with
/// replicated borders.
pub fn sobel(image: &Image) -> Image {
    let (c, h, w) = image.dims();
    let mut gray = vec![0.0f32; h * w];
    for ch in 0..c {
        for (g, v) in gray.iter_mut().zip(image.plane(ch)) {
            *g += v / c as f32;
        }
    }
    let at = |r: isize, col: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let col = col.clamp(0, w as isize - 1) as usize;
        gray[r * w + col]
    };
    let mut out = Image::zeros(2, h, w);
    for r in 0..h as isize {
        for col in 0..w as isize {
            let gx = (at(r - 1, col + 1) + 2.0 * at(r, col + 1) + at(r + 1, col + 1))
                - (at(r - 1, col - 1) + 2.0 * at(r, col - 1) + at(r + 1, col - 1));
            let gy = (at(r + 1, col - 1) + 2.0 * at(r + 1, col) + at(r + 1, col + 1))
                - (at(r - 1, col - 1) + 2.0 * at(r - 1, col) + at(r - 1, col + 1));
            out.set(0, r as usize, col as usize, gx);
            out.set(1, r as usize, col as usize, gy);
        }
    }
    out
}
