//! Clip manifests, dataset splitting, frame storage and per-epoch frame
//! sampling.
//!
//! A manifest is JSON Lines: an optional header `{"categories": [...]}`
//! followed by one object per clip. Frame sources are either a raw frame
//! archive (see [`write_frame_archive`]) or a directory of PNG frames read
//! in file-name order. Relative sources resolve against the manifest's
//! directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameStack};
use crate::rng::seeded;

pub const DEFAULT_CATEGORIES: [&str; 6] = [
    "feeding",
    "drinking",
    "standing-self-grooming",
    "standing-ruminating",
    "lying-self-grooming",
    "lying-ruminating",
];

pub fn default_categories() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_source: String,
    pub label: String,
    pub num_frames: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub categories: Vec<String>,
    /// Directory that relative frame sources resolve against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    categories: Vec<String>,
}

impl Manifest {
    pub fn new(records: Vec<ClipRecord>, categories: Vec<String>) -> Result<Self> {
        let m = Self {
            records,
            categories,
            base_dir: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::DuplicateClip(r.clip_id.clone()));
            }
            self.check_record(r)?;
        }
        Ok(())
    }

    fn check_record(&self, r: &ClipRecord) -> Result<()> {
        if !self.categories.contains(&r.label) {
            return Err(Error::UnknownLabel {
                label: r.label.clone(),
                known: self.categories.join(", "),
            });
        }
        if r.num_frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip `{}` has zero frames",
                r.clip_id
            )));
        }
        if !(r.fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip `{}` has non-positive fps",
                r.clip_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .collect()
    }

    pub fn resolve(&self, record: &ClipRecord) -> PathBuf {
        let p = Path::new(&record.frame_source);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({ "categories": self.categories }))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 over the serialised manifest, used as dataset provenance.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut categories = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| parse_err(line_no, e.to_string()))?;
        let is_header = value.get("categories").is_some() && value.get("clip_id").is_none();
        if is_header {
            if categories.is_some() || !records.is_empty() {
                return Err(parse_err(line_no, "header must be the first record".into()));
            }
            let h: Header =
                serde_json::from_value(value).map_err(|e| parse_err(line_no, e.to_string()))?;
            categories = Some(h.categories);
            continue;
        }
        let record: ClipRecord =
            serde_json::from_value(value).map_err(|e| parse_err(line_no, e.to_string()))?;
        records.push((line_no, record));
    }
    let mut manifest = Manifest {
        records: Vec::with_capacity(records.len()),
        categories: categories.unwrap_or_else(default_categories),
        base_dir: path.parent().map(Path::to_path_buf),
    };
    let mut seen = HashSet::new();
    for (line_no, r) in records {
        if !seen.insert(r.clip_id.clone()) {
            return Err(Error::DuplicateClip(r.clip_id));
        }
        manifest.check_record(&r).map_err(|e| match e {
            Error::UnknownLabel { .. } => e,
            other => parse_err(line_no, other.to_string()),
        })?;
        manifest.records.push(r);
    }
    Ok(manifest)
}

/// Writes the manifest through a temporary file so that a failure never
/// leaves a partial manifest behind.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest.to_jsonl()?.as_bytes())
}

/// Writes through a `.partial` sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Shuffles the records by `seed` and assigns `floor(val·N)` to validation,
/// `floor(test·N)` to test and the remainder to training. Not stratified.
pub fn split_dataset(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.val, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {sum}"
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.split.is_some()) {
        return Err(Error::InvalidArgument(format!(
            "clip `{}` already has a split",
            r.clip_id
        )));
    }
    let n = manifest.records.len();
    let portion = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_val = portion(ratios.val);
    let n_test = portion(ratios.test);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, "split", 0));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.records[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(out)
}

/// `k` ascending frame indices. With at least `k` frames they are drawn
/// uniformly without replacement; shorter clips cycle through every frame
/// until `k` indices exist.
pub fn sample_indices(num_frames: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(num_frames >= 1 && k >= 1, "sample_indices needs positive sizes");
    let mut idx = if num_frames >= k {
        index::sample(rng, num_frames, k).into_vec()
    } else {
        (0..k).map(|i| i % num_frames).collect()
    };
    idx.sort_unstable();
    idx
}

pub fn sample_frames(
    manifest: &Manifest,
    clip: &ClipRecord,
    k: usize,
    rng: &mut impl Rng,
    cache: &FrameCache,
) -> Result<FrameStack> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let frames = cache.get(manifest, clip)?;
    let available = frames.len().min(clip.num_frames);
    if available == 0 {
        return Err(Error::InvalidArgument(format!(
            "clip `{}` has no readable frames",
            clip.clip_id
        )));
    }
    let indices = sample_indices(available, k, rng);
    Ok(FrameStack {
        frames: indices.iter().map(|&i| frames[i].clone()).collect(),
        source_indices: indices,
    })
}

/// Lazily loaded, shared decoded frames keyed by resolved source path.
#[derive(Debug, Default)]
pub struct FrameCache {
    inner: Mutex<HashMap<PathBuf, Arc<Vec<Frame>>>>,
}

impl FrameCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, manifest: &Manifest, clip: &ClipRecord) -> Result<Arc<Vec<Frame>>> {
        let path = manifest.resolve(clip);
        if let Some(f) = self.inner.lock().expect("frame cache poisoned").get(&path) {
            return Ok(Arc::clone(f));
        }
        let frames = Arc::new(read_frames(&path)?);
        self.inner
            .lock()
            .expect("frame cache poisoned")
            .insert(path, Arc::clone(&frames));
        Ok(frames)
    }
}

const ARCHIVE_MAGIC: &[u8; 8] = b"CCFRAMES";
const ARCHIVE_VERSION: u32 = 1;

/// Raw frame archive: magic, version, frame count, height, width (all
/// little-endian `u32`), then `count × height × width × 3` bytes.
pub fn encode_frame_archive(frames: &[Frame]) -> Result<Vec<u8>> {
    let (h, w) = frames
        .first()
        .map(|f| (f.height(), f.width()))
        .ok_or_else(|| Error::InvalidArgument("archive needs at least one frame".into()))?;
    let mut out = Vec::with_capacity(24 + frames.len() * h * w * 3);
    out.extend_from_slice(ARCHIVE_MAGIC);
    for v in [ARCHIVE_VERSION, frames.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::InvalidArgument("archive frames differ in size".into()));
        }
        out.extend(f.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_frame_archive(path: &Path, frames: &[Frame]) -> Result<()> {
    let bytes = encode_frame_archive(frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    if path.is_dir() {
        return read_image_dir(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame_archive(&bytes).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })
}

fn decode_frame_archive(bytes: &[u8]) -> std::result::Result<Vec<Frame>, String> {
    if bytes.len() < 24 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err("not a frame archive".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != ARCHIVE_VERSION {
        return Err(format!("unsupported archive version {}", word(0)));
    }
    let (count, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let frame_len = h * w * 3;
    if bytes.len() != 24 + count * frame_len {
        return Err(format!(
            "archive length {} does not match {count} frames of {h}x{w}",
            bytes.len()
        ));
    }
    Ok(bytes[24..]
        .chunks_exact(frame_len.max(1))
        .take(count)
        .map(|chunk| Frame::new(h, w, chunk.iter().map(|&b| f32::from(b) / 255.0).collect()))
        .collect())
}

fn read_image_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| Error::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
            Ok(Frame::new(h as usize, w as usize, data))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, label: &str) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            frame_source: format!("{id}.frames"),
            label: label.into(),
            num_frames: 10,
            fps: 5.0,
            camera_id: None,
            split: None,
        }
    }

    fn manifest_of(n: usize) -> Manifest {
        Manifest::new(
            (0..n).map(|i| record(&format!("c{i}"), DEFAULT_CATEGORIES[i % 6])).collect(),
            default_categories(),
        )
        .unwrap()
    }

    #[test]
    fn load_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let lines: Vec<String> = (0..3)
            .map(|i| serde_json::to_string(&record(&format!("c{i}"), "feeding")).unwrap())
            .collect();
        fs::write(&p, lines.join("\n")).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[2].clip_id, "c2");
        assert_eq!(m.categories, default_categories());
        assert_eq!(m.resolve(&m.records[0]), dir.path().join("c0.frames"));
    }

    #[test]
    fn header_overrides_categories() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let body = format!(
            "{{\"categories\": [\"a\", \"b\"]}}\n{}\n",
            serde_json::to_string(&record("x", "b")).unwrap()
        );
        fs::write(&p, body).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.categories, vec!["a", "b"]);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let a = serde_json::to_string(&record("dup", "feeding")).unwrap();
        fs::write(&p, format!("{a}\n{a}\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateClip(id)) if id == "dup"));

        fs::write(&p, format!("{a}\n{{not json\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));

        let b = serde_json::to_string(&record("x", "sleeping")).unwrap();
        fs::write(&p, b).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::UnknownLabel { .. })));

        fs::write(&p, "").unwrap();
        let empty = load_manifest(&p).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.categories.len(), 6);

        assert!(matches!(
            load_manifest(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = split_dataset(&manifest_of(12), SplitRatios::default(), 3).unwrap();
        write_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn split_sizes() {
        let counts = |m: &Manifest| {
            [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).len())
        };
        let big = split_dataset(&manifest_of(1905), SplitRatios::default(), 0).unwrap();
        assert_eq!(counts(&big), [1143, 381, 381]);
        let small = split_dataset(&manifest_of(10), SplitRatios::default(), 0).unwrap();
        assert_eq!(counts(&small), [6, 2, 2]);
        let again = split_dataset(&manifest_of(10), SplitRatios::default(), 0).unwrap();
        assert_eq!(small, again);
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&manifest_of(10), bad, 0).is_err());
        assert!(split_dataset(&small, SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = seeded(1, "t", 0);
        let idx = sample_indices(50, 8, &mut rng);
        assert_eq!(idx.len(), 8);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 50));
        assert_eq!(sample_indices(8, 8, &mut rng), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_indices(5, 8, &mut rng), vec![0, 0, 1, 1, 2, 2, 3, 4]);
    }

    #[test]
    fn fresh_epoch_streams_differ() {
        let a = sample_indices(50, 8, &mut seeded(1, "frames", 0));
        let b = sample_indices(50, 8, &mut seeded(1, "frames", 1));
        assert_ne!(a, b);
    }

    #[test]
    fn archive_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.frames");
        let frames: Vec<Frame> = (0..3)
            .map(|i| Frame::filled(2, 3, [(i * 51) as f32 / 255.0, 0.0, 1.0]))
            .collect();
        write_frame_archive(&p, &frames).unwrap();
        assert_eq!(read_frames(&p).unwrap(), frames);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_frames(&p).is_err());
    }

    #[test]
    fn image_directory_source() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [0u8, 255].iter().enumerate() {
            let img = image::RgbImage::from_pixel(3, 2, image::Rgb([*v, 0, 0]));
            img.save(dir.path().join(format!("{i:04}.png"))).unwrap();
        }
        let frames = read_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!((frames[0].height(), frames[0].width()), (2, 3));
        assert_eq!(frames[1].pixel(1, 2), [1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..200, seed in any::<u64>()) {
            let m = split_dataset(&manifest_of(n), SplitRatios::default(), seed).unwrap();
            prop_assert!(m.records.iter().all(|r| r.split.is_some()));
            let val = m.split(Split::Val).len();
            let test = m.split(Split::Test).len();
            prop_assert_eq!(val, (0.2 * n as f64 + 1e-9).floor() as usize);
            prop_assert_eq!(test, val);
            prop_assert_eq!(m.split(Split::Train).len(), n - val - test);
        }

        #[test]
        fn sampled_indices_bounded_and_sorted(n in 1usize..80, k in 1usize..20, seed in any::<u64>()) {
            let idx = sample_indices(n, k, &mut seeded(seed, "p", 0));
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.iter().all(|&i| i < n));
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            if n >= k {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
