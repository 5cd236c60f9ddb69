//! Weak and strong augmentation policies.
//!
//! Images are `(C, H, W)` arrays with values in `[0, 1]`. Every application
//! draws from a ChaCha stream seeded by the caller, so the same `(image, seed)`
//! pair always yields the same output.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_from};

/// Horizontal flip plus random crop from a reflect-padded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakPolicy {
    pub flip_prob: f64,
    pub pad: usize,
}

impl Default for WeakPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 4,
        }
    }
}

/// RandAugment-style operations. Each is the identity at magnitude 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandOp {
    Identity,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Brightness,
    Contrast,
    Color,
    Sharpness,
    Solarize,
    Posterize,
}

impl RandOp {
    pub const ALL: [RandOp; 12] = [
        RandOp::Identity,
        RandOp::Rotate,
        RandOp::ShearX,
        RandOp::ShearY,
        RandOp::TranslateX,
        RandOp::TranslateY,
        RandOp::Brightness,
        RandOp::Contrast,
        RandOp::Color,
        RandOp::Sharpness,
        RandOp::Solarize,
        RandOp::Posterize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongPolicy {
    /// Flip and crop applied before the photometric/geometric ops.
    pub base: WeakPolicy,
    /// Ops sampled (with replacement) per image.
    pub num_ops: usize,
    /// Per-op strength is drawn uniformly from `[0, max_magnitude]`, in `[0, 1]`.
    pub max_magnitude: f64,
    pub ops: Vec<RandOp>,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_scale: (f64, f64),
    pub erase_ratio: (f64, f64),
    pub erase_fill: f32,
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
}

impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            base: WeakPolicy::default(),
            num_ops: 2,
            max_magnitude: 0.5,
            ops: RandOp::ALL.to_vec(),
            erase_prob: 0.25,
            erase_scale: (0.02, 0.33),
            erase_ratio: (0.3, 3.3),
            erase_fill: 0.0,
            jitter_strength: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Weak,
    Strong,
}

/// A configured augmentation policy of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentationPolicy {
    Weak(WeakPolicy),
    Strong(StrongPolicy),
}

impl AugmentationPolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            AugmentationPolicy::Weak(_) => PolicyKind::Weak,
            AugmentationPolicy::Strong(_) => PolicyKind::Strong,
        }
    }

    /// Human-readable op list with parameter ranges, in application order.
    pub fn describe(&self) -> Vec<String> {
        match self {
            AugmentationPolicy::Weak(p) => vec![
                format!("hflip(p={})", p.flip_prob),
                format!("random_crop(reflect_pad={})", p.pad),
            ],
            AugmentationPolicy::Strong(p) => vec![
                format!("hflip(p={})", p.base.flip_prob),
                format!("random_crop(reflect_pad={})", p.base.pad),
                format!(
                    "rand_augment(n={}, magnitude=U[0,{}], ops={:?})",
                    p.num_ops, p.max_magnitude, p.ops
                ),
                format!("color_jitter(strength={})", p.jitter_strength),
                format!(
                    "random_erasing(p={}, scale={:?}, ratio={:?}, fill={})",
                    p.erase_prob, p.erase_scale, p.erase_ratio, p.erase_fill
                ),
            ],
        }
    }

    pub fn apply(&self, image: ArrayView3<'_, f32>, seed: u64) -> Array3<f32> {
        match self {
            AugmentationPolicy::Weak(p) => weak_augment(image, p, seed),
            AugmentationPolicy::Strong(p) => strong_augment(image, p, seed),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Flip and crop with explicit parameters. `(dy, dx)` index into the padded
/// canvas, so `(pad, pad)` is the centered (unshifted) crop.
pub fn flip_and_crop(
    image: ArrayView3<'_, f32>,
    flip: bool,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Array3<f32> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let sx = if flip { w - 1 - x } else { x };
        let yy = reflect(y as isize + dy as isize - pad as isize, h);
        let xx = reflect(sx as isize + dx as isize - pad as isize, w);
        image[[ch, yy, xx]]
    })
}

pub fn weak_augment(image: ArrayView3<'_, f32>, policy: &WeakPolicy, seed: u64) -> Array3<f32> {
    let mut rng = rng_from(&[seed, 0x3EA4]);
    let flip = rng.random_bool(policy.flip_prob.clamp(0.0, 1.0));
    let dy = rng.random_range(0..=2 * policy.pad);
    let dx = rng.random_range(0..=2 * policy.pad);
    flip_and_crop(image, flip, policy.pad, dy, dx)
}

pub fn strong_augment(image: ArrayView3<'_, f32>, policy: &StrongPolicy, seed: u64) -> Array3<f32> {
    let mut img = weak_augment(image, &policy.base, derive_seed(&[seed, 0xBA5E]));
    let mut rng = rng_from(&[seed, 0x57_0116]);
    if !policy.ops.is_empty() {
        for _ in 0..policy.num_ops {
            let op = policy.ops[rng.random_range(0..policy.ops.len())];
            let magnitude = if policy.max_magnitude > 0.0 {
                rng.random_range(0.0..=policy.max_magnitude)
            } else {
                0.0
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            img = apply_op(&img, op, magnitude as f32, sign);
        }
    }
    color_jitter(&mut img, policy.jitter_strength as f32, &mut rng);
    if rng.random_bool(policy.erase_prob.clamp(0.0, 1.0)) {
        if let Some(rect) = sample_erase_rect(img.dim(), policy, &mut rng) {
            erase(&mut img, rect, policy.erase_fill);
        }
    }
    img
}

/// Axis-aligned rectangle `(top, left, height, width)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Overwrites `rect` (clipped to the image) with `fill` in every channel.
pub fn erase(image: &mut Array3<f32>, rect: Rect, fill: f32) {
    let (_, h, w) = image.dim();
    let y1 = (rect.top + rect.height).min(h);
    let x1 = (rect.left + rect.width).min(w);
    for mut plane in image.axis_iter_mut(Axis(0)) {
        for y in rect.top.min(h)..y1 {
            for x in rect.left.min(w)..x1 {
                plane[[y, x]] = fill;
            }
        }
    }
}

fn sample_erase_rect(
    (_, h, w): (usize, usize, usize),
    policy: &StrongPolicy,
    rng: &mut ChaCha8Rng,
) -> Option<Rect> {
    let area = (h * w) as f64;
    let (smin, smax) = policy.erase_scale;
    let (rmin, rmax) = (policy.erase_ratio.0.ln(), policy.erase_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(smin..=smax);
        let ratio = rng.random_range(rmin..=rmax).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            return Some(Rect {
                top: rng.random_range(0..=h - eh),
                left: rng.random_range(0..=w - ew),
                height: eh,
                width: ew,
            });
        }
    }
    None
}

/// `(1 - f) * other + f * img`, clamped. Exactly `img` when `f == 1`.
fn blend(img: &Array3<f32>, other: &Array3<f32>, f: f32) -> Array3<f32> {
    let mut out = img.clone();
    Zip::from(&mut out)
        .and(other)
        .for_each(|o, &d| *o = ((1.0 - f) * d + f * *o).clamp(0.0, 1.0));
    out
}

fn grayscale(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return img.clone();
    }
    let gray = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
    });
    gray.broadcast((3, h, w)).expect("broadcast gray").to_owned()
}

fn mean_gray(img: &Array3<f32>) -> Array3<f32> {
    let m = grayscale(img).mean().unwrap_or(0.0);
    Array3::from_elem(img.dim(), m)
}

fn smoothed(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut out = img.clone();
    for ch in 0..c {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 4.0 * img[[ch, y, x]];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img[[ch, y + dy - 1, x + dx - 1]];
                    }
                }
                out[[ch, y, x]] = acc / 13.0;
            }
        }
    }
    out
}

/// Inverse-maps each output pixel through a 2x2 linear map plus translation
/// about the image center; nearest sampling, gray fill outside.
fn warp(img: &Array3<f32>, m: [[f32; 2]; 2], t: [f32; 2]) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let (u, v) = (x as f32 - cx, y as f32 - cy);
        let sx = m[0][0] * u + m[0][1] * v + cx + t[0];
        let sy = m[1][0] * u + m[1][1] * v + cy + t[1];
        let (ix, iy) = (sx.round(), sy.round());
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
            img[[ch, iy as usize, ix as usize]]
        } else {
            0.5
        }
    })
}

fn apply_op(img: &Array3<f32>, op: RandOp, m: f32, sign: f32) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let s = sign * m;
    match op {
        RandOp::Identity => img.clone(),
        RandOp::Rotate => {
            let a = s * 30f32.to_radians();
            let (ca, sa) = (a.cos(), a.sin());
            warp(img, [[ca, -sa], [sa, ca]], [0.0, 0.0])
        }
        RandOp::ShearX => warp(img, [[1.0, 0.3 * s], [0.0, 1.0]], [0.0, 0.0]),
        RandOp::ShearY => warp(img, [[1.0, 0.0], [0.3 * s, 1.0]], [0.0, 0.0]),
        RandOp::TranslateX => warp(img, [[1.0, 0.0], [0.0, 1.0]], [0.3 * s * w as f32, 0.0]),
        RandOp::TranslateY => warp(img, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.3 * s * h as f32]),
        RandOp::Brightness => blend(img, &Array3::zeros(img.dim()), 1.0 + 0.9 * s),
        RandOp::Contrast => blend(img, &mean_gray(img), 1.0 + 0.9 * s),
        RandOp::Color => blend(img, &grayscale(img), 1.0 + 0.9 * s),
        RandOp::Sharpness => blend(img, &smoothed(img), 1.0 + 0.9 * s),
        RandOp::Solarize => {
            let threshold = 1.0 - m;
            img.mapv(|v| if v > threshold { 1.0 - v } else { v })
        }
        RandOp::Posterize => {
            let bits = (8.0 - 4.0 * m).round() as i32;
            if bits >= 8 {
                img.clone()
            } else {
                let levels = ((1u32 << bits) - 1) as f32;
                img.mapv(|v| (v * levels).floor() / levels)
            }
        }
    }
}

fn color_jitter(img: &mut Array3<f32>, strength: f32, rng: &mut ChaCha8Rng) {
    let mut factor = || {
        if strength > 0.0 {
            rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
        } else {
            1.0
        }
    };
    let (b, c, s) = (factor(), factor(), factor());
    *img = blend(img, &Array3::zeros(img.dim()), b);
    *img = blend(img, &mean_gray(img), c);
    *img = blend(img, &grayscale(img), s);
}
