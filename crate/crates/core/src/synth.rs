//! Procedural behaviour clips for desk-scale runs.
//!
//! Each category is an archetype: a disc of a characteristic colour and
//! fill pattern moving along a characteristic path over a dark, noisy
//! background. Per-clip variation (start phase, centre, radius, amplitude,
//! noise) comes from a stream seeded by `(seed, clip index)`, so the whole
//! dataset is bit-deterministic.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_categories, write_frame_archive, write_manifest, ClipRecord, Manifest};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::rng::seeded;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub clips_per_category: usize,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub fps: f64,
    /// Standard deviation of the additive per-pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips_per_category: 20,
            height: 24,
            width: 32,
            num_frames: 12,
            fps: 5.0,
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_category == 0 || self.num_frames == 0 {
            return Err(Error::Config("synthetic clip and frame counts must be positive".into()));
        }
        if self.height < 12 || self.width < 12 {
            return Err(Error::Config("synthetic frames must be at least 12x12".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config("invalid synthetic fps or noise".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Gradient,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motion {
    Horizontal,
    Vertical,
    Circular,
    Jitter,
    Static,
    Diagonal,
}

#[derive(Debug, Clone, Copy)]
struct Archetype {
    colour: [f64; 3],
    fill: Fill,
    motion: Motion,
    /// Oscillation cycles per clip.
    cycles: f64,
}

const ARCHETYPES: [Archetype; 6] = [
    Archetype { colour: [0.9, 0.2, 0.2], fill: Fill::Solid, motion: Motion::Horizontal, cycles: 1.0 },
    Archetype { colour: [0.2, 0.4, 0.95], fill: Fill::HorizontalStripes, motion: Motion::Vertical, cycles: 2.0 },
    Archetype { colour: [0.2, 0.85, 0.3], fill: Fill::VerticalStripes, motion: Motion::Circular, cycles: 1.0 },
    Archetype { colour: [0.9, 0.85, 0.2], fill: Fill::Checker, motion: Motion::Jitter, cycles: 0.0 },
    Archetype { colour: [0.85, 0.25, 0.85], fill: Fill::Gradient, motion: Motion::Static, cycles: 0.0 },
    Archetype { colour: [0.2, 0.85, 0.85], fill: Fill::Ring, motion: Motion::Diagonal, cycles: 1.5 },
];

fn fill_intensity(fill: Fill, dy: f64, dx: f64, r: f64) -> f64 {
    let band = |v: f64| ((v + r) / 2.0).floor() as i64 % 2 == 0;
    match fill {
        Fill::Solid => 1.0,
        Fill::HorizontalStripes => if band(dy) { 1.0 } else { 0.3 },
        Fill::VerticalStripes => if band(dx) { 1.0 } else { 0.3 },
        Fill::Checker => if band(dy) == band(dx) { 1.0 } else { 0.3 },
        Fill::Gradient => 0.25 + 0.75 * (dx + r) / (2.0 * r),
        Fill::Ring => if (dy * dy + dx * dx).sqrt() > 0.55 * r { 1.0 } else { 0.25 },
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Renders one clip of the given archetype.
fn render_clip(arch: &Archetype, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let (h, w) = (config.height as f64, config.width as f64);
    let radius = rng.gen_range(0.22..0.28) * h;
    let amp_y = (h / 2.0 - radius - 1.0).max(0.0) * rng.gen_range(0.7..1.0);
    let amp_x = (w / 2.0 - radius - 1.0).max(0.0) * rng.gen_range(0.7..1.0);
    let cy = h / 2.0 + rng.gen_range(-1.0..1.0);
    let cx = w / 2.0 + rng.gen_range(-1.5..1.5);
    let phase = rng.gen_range(0.0..TAU);
    let shade = rng.gen_range(0.85..1.0);
    let background = rng.gen_range(0.05..0.15);
    let n = config.num_frames as f64;

    let mut frames = Vec::with_capacity(config.num_frames);
    for t in 0..config.num_frames {
        let theta = phase + TAU * arch.cycles * t as f64 / n;
        let (oy, ox) = match arch.motion {
            Motion::Horizontal => (0.0, amp_x * theta.sin()),
            Motion::Vertical => (amp_y * theta.sin(), 0.0),
            Motion::Circular => (amp_y * theta.sin(), amp_x * theta.cos()),
            Motion::Jitter => (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            Motion::Static => (0.0, 0.0),
            Motion::Diagonal => (amp_y * theta.sin(), amp_y * theta.sin()),
        };
        let (py, px) = (cy + oy, cx + ox);
        let mut data = Vec::with_capacity(config.height * config.width * 3);
        for y in 0..config.height {
            for x in 0..config.width {
                let dy = y as f64 + 0.5 - py;
                let dx = x as f64 + 0.5 - px;
                let inside = dy * dy + dx * dx <= radius * radius;
                let base = if inside {
                    shade * fill_intensity(arch.fill, dy, dx, radius)
                } else {
                    0.0
                };
                for c in 0..3 {
                    let v = if inside { base * arch.colour[c] } else { background };
                    let v = v + config.noise * gaussian(rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        frames.push(Frame::new(config.height, config.width, data));
    }
    frames
}

/// Renders clip `index` of `category` in memory.
pub fn synth_clip(category: usize, index: usize, config: &SynthConfig, seed: u64) -> Vec<Frame> {
    let global = (category * config.clips_per_category + index) as u64;
    let mut rng = seeded(seed, "synth", global);
    render_clip(&ARCHETYPES[category % ARCHETYPES.len()], config, &mut rng)
}

/// Writes `clips_per_category` clips for each of the six default categories
/// under `out_dir`, then the manifest last so a failure never leaves one
/// pointing at missing frames.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let frames_dir = out_dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let categories = default_categories();
    let mut records = Vec::with_capacity(categories.len() * config.clips_per_category);
    for (c, label) in categories.iter().enumerate() {
        for i in 0..config.clips_per_category {
            let clip_id = format!("{label}-{i:03}");
            let rel = format!("{FRAMES_DIR}/{clip_id}.frames");
            let frames = synth_clip(c, i, config, seed);
            write_frame_archive(&out_dir.join(&rel), &frames)?;
            records.push(ClipRecord {
                clip_id,
                frame_source: rel,
                label: label.clone(),
                num_frames: config.num_frames,
                fps: config.fps,
                camera_id: Some(format!("synth-{}", i % 3)),
                split: None,
            });
        }
    }
    let mut manifest = Manifest::new(records, categories)?;
    manifest.base_dir = Some(out_dir.to_path_buf());
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, read_frames};

    fn small() -> SynthConfig {
        SynthConfig {
            clips_per_category: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn writes_manifest_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&small(), 7, a.path()).unwrap();
        generate_synthetic_dataset(&small(), 7, b.path()).unwrap();
        assert_eq!(m.len(), 24);
        let loaded = load_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.records, m.records);
        for r in &m.records {
            let fa = fs::read(a.path().join(&r.frame_source)).unwrap();
            let fb = fs::read(b.path().join(&r.frame_source)).unwrap();
            assert_eq!(fa, fb);
            let frames = read_frames(&loaded.resolve(r)).unwrap();
            assert_eq!(frames.len(), r.num_frames);
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small();
        assert_ne!(synth_clip(0, 0, &cfg, 1), synth_clip(0, 0, &cfg, 2));
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(generate_synthetic_dataset(&small(), 0, &blocker.join("out")).is_err());
    }

    /// Per-clip mean colour of the brightest pixels: a crude statistic that
    /// should already separate the archetypes by nearest centroid.
    fn clip_stats(frames: &[Frame]) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut count = 0.0;
        for f in frames {
            for px in f.data().chunks_exact(3) {
                if px.iter().copied().fold(0.0f32, f32::max) > 0.45 {
                    for c in 0..3 {
                        sum[c] += f64::from(px[c]);
                    }
                    count += 1.0;
                }
            }
        }
        sum.map(|s| s / count)
    }

    #[test]
    fn archetypes_are_separable_by_nearest_centroid() {
        let cfg = SynthConfig::default();
        let stats: Vec<Vec<[f64; 3]>> = (0..6)
            .map(|c| (0..cfg.clips_per_category).map(|i| clip_stats(&synth_clip(c, i, &cfg, 11))).collect())
            .collect();
        let centroids: Vec<[f64; 3]> = stats
            .iter()
            .map(|s| {
                let mut m = [0.0; 3];
                for v in s {
                    for c in 0..3 {
                        m[c] += v[c] / s.len() as f64;
                    }
                }
                m
            })
            .collect();
        for (truth, clips) in stats.iter().enumerate() {
            for v in clips {
                let dist = |m: &[f64; 3]| (0..3).map(|c| (v[c] - m[c]).powi(2)).sum::<f64>();
                let best = (0..6)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                assert_eq!(best, truth);
            }
        }
        // Pairwise centroid gap well above the noise level.
        for a in 0..6 {
            for b in a + 1..6 {
                let gap: f64 = (0..3).map(|c| (centroids[a][c] - centroids[b][c]).powi(2)).sum::<f64>().sqrt();
                assert!(gap > 0.1, "categories {a} and {b} too close: {gap}");
            }
        }
    }
}
