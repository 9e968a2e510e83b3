//! The five-stage stochastic augmentation family: random resized crop,
//! horizontal flip, color jitter, grayscale, Gaussian blur, applied in that
//! fixed order. The crop stage is always applied (degenerate policies realize
//! it as the identity); every other stage fires with its policy probability.
//!
//! Sampling and application are split: [`sample_transform`] realizes all
//! random parameters into a [`TransformInstance`], and [`apply`] is a pure
//! function of (instance, image). Applying the same instance twice gives
//! identical outputs.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{hsv_to_rgb, luma, rgb_to_hsv};
use crate::datapipe::{ImageTensor, LabeledBatch};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, SALT_AUGMENT};

/// Sampling distribution for one augmentation draw.
///
/// `jitter_strength` scales the four color-jitter offsets as
/// (0.8s, 0.8s, 0.8s, 0.2s) for (brightness, contrast, saturation, hue).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop_scale: (f64, f64),
    pub flip_probability: f64,
    pub jitter_probability: f64,
    pub jitter_strength: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.2, 1.0),
            flip_probability: 0.5,
            jitter_probability: 0.8,
            jitter_strength: 0.2,
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose draws are always the identity transform.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            flip_probability: 0.0,
            jitter_probability: 0.0,
            jitter_strength: 0.2,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0,1], got {p}"
                )));
            }
        }
        if !(self.crop_scale.0 > 0.0 && self.crop_scale.0 <= self.crop_scale.1 && self.crop_scale.1 <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "crop_scale must satisfy 0 < low <= high <= 1, got {:?}",
                self.crop_scale
            )));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::InvalidArgument(format!(
                "blur_sigma must satisfy 0 < low <= high, got {:?}",
                self.blur_sigma
            )));
        }
        if self.jitter_strength <= 0.0 {
            return Err(Error::InvalidArgument(
                "jitter_strength must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Crop window in fractions of the source image, so an instance fully
/// determines the output for any input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropRect {
    pub fn full() -> Self {
        CropRect {
            top: 0.0,
            left: 0.0,
            height: 1.0,
            width: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Realized color-jitter parameters: three multiplicative factors, one
/// additive hue offset, applied in the stored (randomized) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitterParams {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// One fully realized draw from the augmentation family.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformInstance {
    pub crop: CropRect,
    pub flip: bool,
    pub jitter: Option<ColorJitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub rng_seed: u64,
}

impl TransformInstance {
    pub fn identity() -> Self {
        TransformInstance {
            crop: CropRect::full(),
            flip: false,
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            rng_seed: 0,
        }
    }
}

const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

/// Draw one transform from the policy. Deterministic per seed.
pub fn sample_transform(policy: &AugmentationPolicy, seed: u64) -> TransformInstance {
    let mut rng = stream_rng(seed, SALT_AUGMENT);

    let mut crop = CropRect::full();
    for _ in 0..CROP_ATTEMPTS {
        let area = if policy.crop_scale.0 == policy.crop_scale.1 {
            policy.crop_scale.0
        } else {
            rng.gen_range(policy.crop_scale.0..policy.crop_scale.1)
        };
        let log_ratio = rng.gen_range(ASPECT_RANGE.0.ln()..ASPECT_RANGE.1.ln());
        let ratio = log_ratio.exp();
        let height = (area / ratio).sqrt();
        let width = (area * ratio).sqrt();
        if height <= 1.0 && width <= 1.0 {
            let top = rng.gen_range(0.0..=(1.0 - height));
            let left = rng.gen_range(0.0..=(1.0 - width));
            crop = CropRect {
                top,
                left,
                height,
                width,
            };
            break;
        }
    }

    let flip = rng.gen::<f64>() < policy.flip_probability;

    let jitter = if rng.gen::<f64>() < policy.jitter_probability {
        let s = policy.jitter_strength;
        let (b, c, sat, h) = (0.8 * s, 0.8 * s, 0.8 * s, 0.2 * s);
        let mut order = [
            JitterOp::Brightness,
            JitterOp::Contrast,
            JitterOp::Saturation,
            JitterOp::Hue,
        ];
        order.shuffle(&mut rng);
        Some(ColorJitterParams {
            order,
            brightness: rng.gen_range((1.0 - b).max(0.0)..1.0 + b),
            contrast: rng.gen_range((1.0 - c).max(0.0)..1.0 + c),
            saturation: rng.gen_range((1.0 - sat).max(0.0)..1.0 + sat),
            hue: rng.gen_range(-h..h),
        })
    } else {
        None
    };

    let grayscale = rng.gen::<f64>() < policy.grayscale_probability;

    let blur_sigma = if rng.gen::<f64>() < policy.blur_probability {
        Some(rng.gen_range(policy.blur_sigma.0..policy.blur_sigma.1))
    } else {
        None
    };

    TransformInstance {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        rng_seed: seed,
    }
}

/// Bilinear sample of the crop window back to the source resolution.
fn crop_resize(src: &Array3<f64>, rect: &CropRect) -> Result<Array3<f64>> {
    let (h, w, _) = src.dim();
    let crop_h = ((rect.height * h as f64).round() as usize).max(1).min(h);
    let crop_w = ((rect.width * w as f64).round() as usize).max(1).min(w);
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::InvalidArgument("degenerate crop rectangle".into()));
    }
    let top = ((rect.top * h as f64).round() as usize).min(h - crop_h);
    let left = ((rect.left * w as f64).round() as usize).min(w - crop_w);

    let sy = crop_h as f64 / h as f64;
    let sx = crop_w as f64 / w as f64;
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(crop_h - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(crop_w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let v00 = src[(top + y0, left + x0, c)];
                let v01 = src[(top + y0, left + x1, c)];
                let v10 = src[(top + y1, left + x0, c)];
                let v11 = src[(top + y1, left + x1, c)];
                out[(y, x, c)] = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
            }
        }
    }
    Ok(out)
}

fn flip_horizontal(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                let tmp = img[(y, x, c)];
                img[(y, x, c)] = img[(y, w - 1 - x, c)];
                img[(y, w - 1 - x, c)] = tmp;
            }
        }
    }
}

fn apply_jitter(img: &mut Array3<f64>, params: &ColorJitterParams) {
    let (h, w, _) = img.dim();
    for op in params.order {
        match op {
            JitterOp::Brightness => {
                img.mapv_inplace(|v| (v * params.brightness).clamp(0.0, 1.0));
            }
            JitterOp::Contrast => {
                let mut mean = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        mean += luma(img[(y, x, 0)], img[(y, x, 1)], img[(y, x, 2)]);
                    }
                }
                mean /= (h * w) as f64;
                let f = params.contrast;
                img.mapv_inplace(|v| (f * v + (1.0 - f) * mean).clamp(0.0, 1.0));
            }
            JitterOp::Saturation => {
                let f = params.saturation;
                for y in 0..h {
                    for x in 0..w {
                        let l = luma(img[(y, x, 0)], img[(y, x, 1)], img[(y, x, 2)]);
                        for c in 0..3 {
                            img[(y, x, c)] = (f * img[(y, x, c)] + (1.0 - f) * l).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            JitterOp::Hue => {
                for y in 0..h {
                    for x in 0..w {
                        let (hh, s, v) =
                            rgb_to_hsv(img[(y, x, 0)], img[(y, x, 1)], img[(y, x, 2)]);
                        let (r, g, b) = hsv_to_rgb(hh + params.hue, s, v);
                        img[(y, x, 0)] = r.clamp(0.0, 1.0);
                        img[(y, x, 1)] = g.clamp(0.0, 1.0);
                        img[(y, x, 2)] = b.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn apply_grayscale(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[(y, x, 0)], img[(y, x, 1)], img[(y, x, 2)]);
            for c in 0..3 {
                img[(y, x, c)] = l;
            }
        }
    }
}

/// Truncated Gaussian blur, radius = ceil(2 sigma), replicated edges,
/// applied as two separable passes.
fn apply_blur(img: &mut Array3<f64>, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as i64;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w, _) = img.dim();
    let src = img.clone();
    // horizontal
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y, sx, c)];
                }
                img[(y, x, c)] = acc;
            }
        }
    }
    let src = img.clone();
    // vertical
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * src[(sy, x, c)];
                }
                img[(y, x, c)] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

/// Apply a realized transform: crop -> flip -> jitter -> grayscale -> blur.
/// Output has the input's height/width and values in [0,1].
pub fn apply(instance: &TransformInstance, image: &ImageTensor) -> Result<ImageTensor> {
    let mut data = crop_resize(image.data(), &instance.crop)?;
    if instance.flip {
        flip_horizontal(&mut data);
    }
    if let Some(jitter) = &instance.jitter {
        apply_jitter(&mut data, jitter);
    }
    if instance.grayscale {
        apply_grayscale(&mut data);
    }
    if let Some(sigma) = instance.blur_sigma {
        apply_blur(&mut data, sigma);
    }
    ImageTensor::new(data)
}

/// Augment every sample of a batch with an independent transform; labels are
/// copied unchanged.
pub fn augment_batch(
    policy: &AugmentationPolicy,
    batch: &LabeledBatch,
    seed: u64,
) -> Result<LabeledBatch> {
    let images: Result<Vec<ImageTensor>> = batch
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let instance = sample_transform(policy, derive_seed(seed, i as u64));
            apply(&instance, img)
        })
        .collect();
    Ok(LabeledBatch {
        images: images?,
        labels: batch.labels.clone(),
        identity_count: batch.identity_count,
    })
}
