//! Random resized crop, horizontal flip and affine color jitter.
//!
//! Crop and flip are expressed as resampling taps over the input pixels, so the
//! bilinear variant is differentiable with respect to the batch.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Taps, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Minimum crop area as a fraction of the image.
    pub min_scale: f64,
    pub flip_prob: f64,
    /// Half-width of the additive brightness shift.
    pub brightness: f64,
    /// Half-width of the multiplicative contrast factor around 1.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { min_scale: 0.5, flip_prob: 0.5, brightness: 0.2, contrast: 0.2 }
    }
}

/// Per-image augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop window in source pixel units: top, left, height, width.
    pub crop: [f64; 4],
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { crop: [0.0, 0.0, h as f64, w as f64], flip: false, brightness: 0.0, contrast: 1.0 }
    }
}

pub fn sample_params(n: usize, h: usize, w: usize, cfg: &AugmentConfig, seed: u64) -> Vec<AugmentParams> {
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| {
            let area = (h * w) as f64;
            let mut crop = [0.0, 0.0, h as f64, w as f64];
            // degenerate windows (larger than the image) are re-drawn
            for _ in 0..10 {
                let s = r.gen_range(cfg.min_scale.min(1.0)..=1.0);
                let log_ratio = r.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
                let ratio = log_ratio.exp();
                let cw = (s * area * ratio).sqrt();
                let ch = (s * area / ratio).sqrt();
                if cw <= w as f64 && ch <= h as f64 && cw >= 1.0 && ch >= 1.0 {
                    let top = r.gen_range(0.0..=(h as f64 - ch));
                    let left = r.gen_range(0.0..=(w as f64 - cw));
                    crop = [top, left, ch, cw];
                    break;
                }
            }
            let flip = r.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
            let brightness = if cfg.brightness > 0.0 { r.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
            let contrast = if cfg.contrast > 0.0 { r.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) } else { 1.0 };
            AugmentParams { crop, flip, brightness, contrast }
        })
        .collect()
}

fn axis_taps(out_len: usize, src_len: usize, start: f64, extent: f64, bilinear: bool) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|o| {
            let s = start + (o as f64 + 0.5) * extent / out_len as f64 - 0.5;
            let s = s.clamp(0.0, (src_len - 1) as f64);
            if bilinear {
                let lo = s.floor() as usize;
                let frac = s - lo as f64;
                if frac == 0.0 || lo + 1 >= src_len {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (lo + 1, frac)]
                }
            } else {
                vec![(s.round() as usize, 1.0)]
            }
        })
        .collect()
}

/// Crop-resize-flip taps for a batch `[N,C,H,W]` (output has the same shape).
pub fn crop_flip_taps(shape: [usize; 4], params: &[AugmentParams], bilinear: bool) -> Taps {
    let [n, c, h, w] = shape;
    assert_eq!(params.len(), n);
    let mut taps = Vec::with_capacity(n * c * h * w);
    for (ni, p) in params.iter().enumerate() {
        let ys = axis_taps(h, h, p.crop[0], p.crop[2], bilinear);
        let xs = axis_taps(w, w, p.crop[1], p.crop[3], bilinear);
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let xo = if p.flip { w - 1 - x } else { x };
                    let mut t = Vec::with_capacity(4);
                    for &(sy, wy) in &ys[y] {
                        for &(sx, wx) in &xs[xo] {
                            t.push(((base + sy * w + sx) as u32, wy * wx));
                        }
                    }
                    taps.push(t);
                }
            }
        }
    }
    Arc::new(taps)
}

/// Applies `params` to `x: [N,C,H,W]` on the graph. Jitter is
/// `(x - 0.5) * contrast + 0.5 + brightness`, clamped to the unit box.
pub fn augment_graph(g: &mut Graph, x: Var, params: &[AugmentParams], bilinear: bool) -> Var {
    let s = g.shape(x).to_vec();
    let shape = [s[0], s[1], s[2], s[3]];
    let taps = crop_flip_taps(shape, params, bilinear);
    let y = g.resample(x, taps, &s);
    let per = s[1] * s[2] * s[3];
    let gain = Tensor::from_fn(&s, |i| params[i / per].contrast);
    let shift = Tensor::from_fn(&s, |i| {
        let p = &params[i / per];
        0.5 - 0.5 * p.contrast + p.brightness
    });
    let gain = g.constant(gain);
    let shift = g.constant(shift);
    let y = g.mul(y, gain);
    let y = g.add(y, shift);
    g.clamp(y, 0.0, 1.0)
}

/// Augmented copy of `batch`. With `differentiable` the crop uses bilinear
/// resampling (the form used inside attack objectives); otherwise nearest
/// neighbour.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, seed: u64, differentiable: bool) -> Tensor {
    let s = batch.shape();
    let params = sample_params(s[0], s[2], s[3], cfg, seed);
    augment_with(batch, &params, differentiable)
}

pub fn augment_with(batch: &Tensor, params: &[AugmentParams], differentiable: bool) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let y = augment_graph(&mut g, x, params, differentiable);
    g.value(y).clone()
}
