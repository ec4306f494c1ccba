//! Fill-then-resize preprocessing and train-time augmentation.
//!
//! Frames are never cropped. [`fill_to_aspect`] pads one axis with a
//! constant so the frame reaches the target aspect ratio, then [`resize`]
//! resamples bilinearly with corner alignment: output pixel `y` samples
//! input row `y · (H_in − 1) / (H_out − 1)`, so the four corner pixels are
//! preserved exactly. Train-time flip, colour jitter and grayscale are
//! drawn once per clip and applied identically to every frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub fill_value: [f32; 3],
    pub flip_prob: f64,
    /// Maximum relative change for brightness, contrast and saturation.
    pub jitter_strength: [f32; 3],
    pub grayscale_prob: f64,
    pub enabled: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            target_height: 224,
            target_width: 224,
            fill_value: [0.0; 3],
            flip_prob: 0.5,
            jitter_strength: [0.2, 0.2, 0.2],
            grayscale_prob: 0.2,
            enabled: true,
        }
    }
}

impl AugConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.flip_prob) || !prob_ok(self.grayscale_prob) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.target_height < patch_size || self.target_width < patch_size {
            return Err(Error::Config(format!(
                "target size {}x{} smaller than patch size {patch_size}",
                self.target_height, self.target_width
            )));
        }
        if self.fill_value.iter().any(|v| !(0.0..=1.0).contains(v))
            || self.jitter_strength.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Config("fill and jitter values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Where the original frame sits inside the padded output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContentOffset {
    pub top: usize,
    pub left: usize,
}

/// Pads `frame` symmetrically along exactly one axis (extra pixel to the
/// bottom or right) so that `width / height` reaches `aspect_w / aspect_h`,
/// rounding the padded side up to a whole pixel. Never crops.
pub fn fill_to_aspect(
    frame: &Frame,
    aspect_h: usize,
    aspect_w: usize,
    fill: [f32; 3],
) -> (Frame, ContentOffset) {
    assert!(aspect_h > 0 && aspect_w > 0, "aspect ratio must be positive");
    let (h, w) = (frame.height(), frame.width());
    let lhs = w as u128 * aspect_h as u128;
    let rhs = h as u128 * aspect_w as u128;
    let (new_h, new_w) = if lhs > rhs {
        // Too wide: add rows.
        (lhs.div_ceil(aspect_w as u128) as usize, w)
    } else if lhs < rhs {
        (h, rhs.div_ceil(aspect_h as u128) as usize)
    } else {
        return (frame.clone(), ContentOffset { top: 0, left: 0 });
    };
    let offset = ContentOffset {
        top: (new_h - h) / 2,
        left: (new_w - w) / 2,
    };
    let mut out = Frame::filled(new_h, new_w, fill);
    for y in 0..h {
        let src = &frame.data()[y * w * 3..(y + 1) * w * 3];
        let start = ((y + offset.top) * new_w + offset.left) * 3;
        out.data_mut()[start..start + w * 3].copy_from_slice(src);
    }
    (out, offset)
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Corner-aligned bilinear resampling, clamped to `[0, 1]`.
pub fn resize(frame: &Frame, height: usize, width: usize) -> Frame {
    if frame.height() == height && frame.width() == width {
        return frame.clone();
    }
    let ys: Vec<_> = (0..height).map(|y| source_coord(y, frame.height(), height)).collect();
    let xs: Vec<_> = (0..width).map(|x| source_coord(x, frame.width(), width)).collect();
    let mut out = Frame::filled(height, width, [0.0; 3]);
    for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let (a, b) = (frame.pixel(y0, x0), frame.pixel(y0, x1));
            let (c, d) = (frame.pixel(y1, x0), frame.pixel(y1, x1));
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bottom = c[k] + (d[k] - c[k]) * tx;
                px[k] = (top + (bottom - top) * ty).clamp(0.0, 1.0);
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Fill to the target aspect ratio, then resize to the target size.
pub fn fill_and_resize(frame: &Frame, config: &AugConfig) -> Frame {
    let (padded, _) = fill_to_aspect(
        frame,
        config.target_height,
        config.target_width,
        config.fill_value,
    );
    resize(&padded, config.target_height, config.target_width)
}

/// The evaluation pipeline: fill and resize only.
pub fn preprocess(stack: &FrameStack, config: &AugConfig) -> FrameStack {
    stack.map_frames(|f| fill_and_resize(f, config))
}

/// Per-clip random transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipTransform {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
}

impl ClipTransform {
    pub const IDENTITY: ClipTransform = ClipTransform {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        grayscale: false,
    };

    pub fn draw(config: &AugConfig, rng: &mut impl Rng) -> Self {
        let mut factor = |s: f32| {
            if s > 0.0 {
                rng.gen_range(1.0 - s..=1.0 + s)
            } else {
                1.0
            }
        };
        let brightness = factor(config.jitter_strength[0]);
        let contrast = factor(config.jitter_strength[1]);
        let saturation = factor(config.jitter_strength[2]);
        Self {
            flip: rng.gen_bool(config.flip_prob),
            brightness,
            contrast,
            saturation,
            grayscale: rng.gen_bool(config.grayscale_prob),
        }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let mut out = if self.flip { hflip(frame) } else { frame.clone() };
        if self.brightness != 1.0 {
            for v in out.data_mut() {
                *v = (*v * self.brightness).clamp(0.0, 1.0);
            }
        }
        if self.contrast != 1.0 {
            let n = (out.height() * out.width()) as f32;
            let mean = out.data().chunks_exact(3).map(luma).sum::<f32>() / n;
            for v in out.data_mut() {
                *v = ((*v - mean) * self.contrast + mean).clamp(0.0, 1.0);
            }
        }
        if self.saturation != 1.0 {
            for px in out.data_mut().chunks_exact_mut(3) {
                let g = luma(px);
                for v in px.iter_mut() {
                    *v = ((*v - g) * self.saturation + g).clamp(0.0, 1.0);
                }
            }
        }
        if self.grayscale {
            out = grayscale(&out);
        }
        out
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn hflip(frame: &Frame) -> Frame {
    let (h, w) = (frame.height(), frame.width());
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, frame.pixel(y, w - 1 - x));
        }
    }
    out
}

pub fn grayscale(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let g = luma(px).clamp(0.0, 1.0);
        px.fill(g);
    }
    out
}

/// Fill and resize every frame, then (when enabled) apply one randomly
/// drawn transform to the whole clip.
pub fn apply_train_augs(stack: &FrameStack, config: &AugConfig, rng: &mut impl Rng) -> FrameStack {
    let base = preprocess(stack, config);
    if !config.enabled {
        return base;
    }
    let t = ClipTransform::draw(config, rng);
    base.map_frames(|f| t.apply(f))
}
