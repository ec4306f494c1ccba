//! Tracklets to candidate clips, and the three retention rules.
//!
//! Rule 1: every visible cohabitant shares the focal behaviour.
//! Rule 2: the focal box covers at least half of the crop on average.
//! Rule 3: the focal cow is observable for at least two thirds of the clip.
//! Rules 2 and 3 are decided in exact arithmetic so that boundary cases
//! (exactly 1/2, exactly 2/3) never drift with floating-point rounding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, ClipRecord, Manifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0
            && self.y + self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(format!(
                "bbox [{}, {}, {}, {}] outside the unit frame",
                self.x, self.y, self.w, self.h
            ))
        }
    }

    fn right(&self) -> f64 {
        self.x + self.w
    }

    fn bottom(&self) -> f64 {
        self.y + self.h
    }

    fn intersects(&self, other: &BBox) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite coordinate")
}

/// Exact `area(a ∩ b)`.
fn intersection_area(a: &BBox, b: &BBox) -> BigRational {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| {
        let lo = rat(a0).max(rat(b0));
        let hi = (rat(a0) + rat(a1)).min(rat(b0) + rat(b1));
        if hi > lo {
            hi - lo
        } else {
            BigRational::zero()
        }
    };
    overlap(a.x, a.w, b.x, b.w) * overlap(a.y, a.h, b.y, b.h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: u64,
    pub track_id: u64,
    pub bbox: BBox,
    pub behaviour_label: Option<String>,
    pub observable: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    frame_index: u64,
    track_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    behaviour_label: Option<String>,
    #[serde(default)]
    observable: Option<bool>,
}

/// Detections grouped by track, each stream sorted by frame.
pub type Tracklets = BTreeMap<u64, Vec<Detection>>;

pub fn parse_tracklets(text: &str, path: &Path) -> Result<Tracklets> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut tracks: Tracklets = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d: DetectionLine = serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        let bbox = BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]);
        bbox.validate().map_err(|m| err(line_no, m))?;
        let stream = tracks.entry(d.track_id).or_default();
        if stream.iter().any(|x| x.frame_index == d.frame_index) {
            return Err(err(
                line_no,
                format!("duplicate detection for track {} at frame {}", d.track_id, d.frame_index),
            ));
        }
        stream.push(Detection {
            frame_index: d.frame_index,
            track_id: d.track_id,
            bbox,
            behaviour_label: d.behaviour_label,
            observable: d.observable,
        });
    }
    for stream in tracks.values_mut() {
        stream.sort_by_key(|d| d.frame_index);
    }
    Ok(tracks)
}

pub fn ingest_tracklets(path: &Path) -> Result<Tracklets> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tracklets(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohabitantFrame {
    pub frame_index: u64,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCandidate {
    pub track_id: u64,
    pub start_frame: u64,
    pub length: u64,
    pub crop_region: BBox,
    pub central_detections: Vec<Detection>,
    /// Labels of other tracks visible inside the crop, per frame; only
    /// frames with at least one labelled cohabitant appear.
    pub cohabitant_labels: Vec<CohabitantFrame>,
}

impl ClipCandidate {
    pub fn id(&self) -> String {
        format!("track{:04}-f{:06}", self.track_id, self.start_frame)
    }

    /// Most frequent focal label; ties resolve to the smallest label.
    pub fn label(&self) -> Option<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &self.central_detections {
            if let Some(l) = &d.behaviour_label {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(l, _)| l.to_string())
    }
}

/// Union of the boxes, grown by `margin` of its size (half on each side)
/// and clamped to the frame.
pub fn crop_for(boxes: &[BBox], margin: f64) -> BBox {
    let x0 = boxes.iter().map(|b| b.x).fold(f64::INFINITY, f64::min);
    let y0 = boxes.iter().map(|b| b.y).fold(f64::INFINITY, f64::min);
    let x1 = boxes.iter().map(BBox::right).fold(f64::NEG_INFINITY, f64::max);
    let y1 = boxes.iter().map(BBox::bottom).fold(f64::NEG_INFINITY, f64::max);
    let (dx, dy) = ((x1 - x0) * margin / 2.0, (y1 - y0) * margin / 2.0);
    let (x0, y0) = ((x0 - dx).max(0.0), (y0 - dy).max(0.0));
    let (x1, y1) = ((x1 + dx).min(1.0), (y1 + dy).min(1.0));
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Fixed-length windows per track, starting at its first detection and
/// advancing by `stride`; windows without a focal detection are dropped.
pub fn extract_candidates(tracklets: &Tracklets, clip_len: u64, stride: u64, margin: f64) -> Vec<ClipCandidate> {
    assert!(clip_len >= 1 && stride >= 1, "clip_len and stride must be positive");
    let mut by_frame: HashMap<u64, Vec<&Detection>> = HashMap::new();
    for d in tracklets.values().flatten() {
        by_frame.entry(d.frame_index).or_default().push(d);
    }
    let mut out = Vec::new();
    for (&track, stream) in tracklets {
        let (Some(first), Some(last)) = (stream.first(), stream.last()) else { continue };
        let mut start = first.frame_index;
        while start <= last.frame_index {
            let end = start + clip_len;
            let central: Vec<Detection> = stream
                .iter()
                .filter(|d| d.frame_index >= start && d.frame_index < end)
                .cloned()
                .collect();
            if !central.is_empty() {
                let boxes: Vec<BBox> = central.iter().map(|d| d.bbox).collect();
                let crop = crop_for(&boxes, margin);
                let mut cohabitant_labels = Vec::new();
                for f in start..end {
                    let Some(dets) = by_frame.get(&f) else { continue };
                    let mut labels: Vec<String> = dets
                        .iter()
                        .filter(|d| d.track_id != track && d.bbox.intersects(&crop))
                        .filter_map(|d| d.behaviour_label.clone())
                        .collect();
                    if !labels.is_empty() {
                        labels.sort();
                        cohabitant_labels.push(CohabitantFrame {
                            frame_index: f,
                            labels,
                        });
                    }
                }
                out.push(ClipCandidate {
                    track_id: track,
                    start_frame: start,
                    length: clip_len,
                    crop_region: crop,
                    central_detections: central,
                    cohabitant_labels,
                });
            }
            start += stride;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passes(self) -> bool {
        self != Verdict::Fail
    }
}

/// Rule 1. Not applicable without labelled cohabitants.
pub fn check_same_behaviour(c: &ClipCandidate) -> Verdict {
    if c.cohabitant_labels.is_empty() {
        return Verdict::NotApplicable;
    }
    let overall = c.label();
    let ok = c.cohabitant_labels.iter().all(|frame| {
        let focal = c
            .central_detections
            .iter()
            .find(|d| d.frame_index == frame.frame_index)
            .and_then(|d| d.behaviour_label.clone())
            .or_else(|| overall.clone());
        match focal {
            Some(f) => frame.labels.iter().all(|l| *l == f),
            None => false,
        }
    });
    Verdict::from_bool(ok)
}

/// Rule 2 as an exact fraction: mean over frames with a focal detection of
/// `area(focal ∩ crop) / area(crop)`.
pub fn spatial_fraction(c: &ClipCandidate) -> BigRational {
    let crop_area = rat(c.crop_region.w) * rat(c.crop_region.h);
    if c.central_detections.is_empty() || crop_area.is_zero() {
        return BigRational::zero();
    }
    let sum = c
        .central_detections
        .iter()
        .map(|d| intersection_area(&d.bbox, &c.crop_region))
        .fold(BigRational::zero(), |a, b| a + b);
    sum / (crop_area * BigInt::from(c.central_detections.len()))
}

pub fn check_spatial(c: &ClipCandidate) -> (Verdict, f64) {
    let f = spatial_fraction(c);
    let half = BigRational::new(1.into(), 2.into());
    (Verdict::from_bool(f >= half), f.to_f64().unwrap_or(0.0))
}

/// A frame counts as observable when the focal track has a detection there
/// that is not explicitly flagged unobservable.
pub fn observable_frames(c: &ClipCandidate) -> u64 {
    c.central_detections
        .iter()
        .filter(|d| d.observable != Some(false))
        .count() as u64
}

/// Rule 3: `observable / length ≥ 2/3`, in integers.
pub fn check_temporal(c: &ClipCandidate) -> (Verdict, f64) {
    let obs = observable_frames(c);
    let ok = 3 * u128::from(obs) >= 2 * u128::from(c.length);
    (Verdict::from_bool(ok), obs as f64 / c.length as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub candidate_id: String,
    pub track_id: u64,
    pub start_frame: u64,
    pub label: Option<String>,
    pub rule1_same_behaviour: Verdict,
    pub rule2_spatial: Verdict,
    pub rule2_area_fraction: f64,
    pub rule3_temporal: Verdict,
    pub rule3_observable_fraction: f64,
    pub accepted: bool,
}

pub fn evaluate_candidate(c: &ClipCandidate) -> RuleReport {
    let rule1 = check_same_behaviour(c);
    let (rule2, area) = check_spatial(c);
    let (rule3, obs) = check_temporal(c);
    RuleReport {
        candidate_id: c.id(),
        track_id: c.track_id,
        start_frame: c.start_frame,
        label: c.label(),
        rule1_same_behaviour: rule1,
        rule2_spatial: rule2,
        rule2_area_fraction: area,
        rule3_temporal: rule3,
        rule3_observable_fraction: obs,
        accepted: rule1.passes() && rule2.passes() && rule3.passes(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub clip_len: u64,
    /// Window advance; defaults to `clip_len` (non-overlapping).
    pub stride: Option<u64>,
    /// Crop margin as a fraction of the union box size.
    pub crop_margin: f64,
    pub fps: f64,
    /// Directory (relative to the manifest) where cropped clips are expected.
    pub clip_dir: String,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            clip_len: 50,
            stride: None,
            crop_margin: 0.10,
            fps: 5.0,
            clip_dir: "clips".into(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.stride == Some(0) {
            return Err(Error::Config("clip_len and stride must be positive".into()));
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) || !(self.fps > 0.0) {
            return Err(Error::Config("crop_margin must be non-negative and fps positive".into()));
        }
        Ok(())
    }
}

/// Crop metadata for an accepted clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub clip_id: String,
    pub track_id: u64,
    pub start_frame: u64,
    pub length: u64,
    pub crop_region: BBox,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutput {
    pub candidates: Vec<ClipCandidate>,
    pub reports: Vec<RuleReport>,
    pub crops: Vec<CropRecord>,
    /// Accepted candidates that carry a label in `categories`.
    pub manifest: Manifest,
}

/// Extracts candidates, applies the rules, and builds the manifest
/// fragment. Accepted candidates without a usable label stay in the report
/// and crop list but are left out of the manifest.
pub fn curate(tracklets: &Tracklets, config: &CurationConfig, categories: &[String]) -> Result<CurationOutput> {
    config.validate()?;
    let stride = config.stride.unwrap_or(config.clip_len);
    let candidates = extract_candidates(tracklets, config.clip_len, stride, config.crop_margin);
    let reports: Vec<RuleReport> = candidates.iter().map(evaluate_candidate).collect();
    let mut crops = Vec::new();
    let mut records = Vec::new();
    for (c, r) in candidates.iter().zip(&reports) {
        if !r.accepted {
            continue;
        }
        crops.push(CropRecord {
            clip_id: r.candidate_id.clone(),
            track_id: c.track_id,
            start_frame: c.start_frame,
            length: c.length,
            crop_region: c.crop_region,
            label: r.label.clone(),
        });
        if let Some(label) = r.label.as_ref().filter(|l| categories.contains(l)) {
            records.push(ClipRecord {
                clip_id: r.candidate_id.clone(),
                frame_source: format!("{}/{}", config.clip_dir, r.candidate_id),
                label: label.clone(),
                num_frames: c.length as usize,
                fps: config.fps,
                camera_id: None,
                split: None,
            });
        }
    }
    Ok(CurationOutput {
        candidates,
        reports,
        crops,
        manifest: Manifest::new(records, categories.to_vec())?,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `report.jsonl`, `crops.jsonl` and `manifest.jsonl` into `out_dir`.
pub fn write_curation(output: &CurationOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join("report.jsonl"), jsonl(&output.reports)?.as_bytes())?;
    write_atomic(&out_dir.join("crops.jsonl"), jsonl(&output.crops)?.as_bytes())?;
    crate::dataset::write_manifest(&out_dir.join("manifest.jsonl"), &output.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(frame: u64, track: u64, bbox: BBox, label: Option<&str>, observable: Option<bool>) -> Detection {
        Detection {
            frame_index: frame,
            track_id: track,
            bbox,
            behaviour_label: label.map(String::from),
            observable,
        }
    }

    fn candidate(boxes: Vec<BBox>, crop: BBox, length: u64) -> ClipCandidate {
        ClipCandidate {
            track_id: 1,
            start_frame: 0,
            length,
            crop_region: crop,
            central_detections: boxes
                .into_iter()
                .enumerate()
                .map(|(i, b)| det(i as u64, 1, b, Some("feeding"), Some(true)))
                .collect(),
            cohabitant_labels: vec![],
        }
    }

    const UNIT: BBox = BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };

    #[test]
    fn ingest_groups_and_sorts() {
        let text = [
            r#"{"frame_index": 2, "track_id": 7, "bbox": [0.1, 0.1, 0.2, 0.2]}"#,
            r#"{"frame_index": 0, "track_id": 7, "bbox": [0.1, 0.1, 0.2, 0.2], "behaviour_label": "feeding"}"#,
            r#"{"frame_index": 1, "track_id": 3, "bbox": [0.5, 0.5, 0.2, 0.2], "observable": false}"#,
            "",
            r#"{"frame_index": 1, "track_id": 9, "bbox": [0.0, 0.0, 1.0, 1.0]}"#,
        ]
        .join("\n");
        let t = parse_tracklets(&text, Path::new("t.jsonl")).unwrap();
        assert_eq!(t.keys().copied().collect::<Vec<_>>(), vec![3, 7, 9]);
        assert_eq!(t[&7].iter().map(|d| d.frame_index).collect::<Vec<_>>(), vec![0, 2]);
        assert!(parse_tracklets("", Path::new("e")).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_bbox_names_line() {
        let text = "{\"frame_index\": 0, \"track_id\": 1, \"bbox\": [0.1, 0.1, 0.2, 0.2]}\n{\"frame_index\": 1, \"track_id\": 1, \"bbox\": [0.5, 0.0, 0.7, 0.2]}";
        match parse_tracklets(text, Path::new("t")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_tracklets("{oops", Path::new("t")), Err(Error::Parse { line: 1, .. })));
    }

    fn track(frames: std::ops::Range<u64>) -> Tracklets {
        let b = BBox::new(0.2, 0.2, 0.3, 0.3);
        let mut t = Tracklets::new();
        t.insert(1, frames.map(|f| det(f, 1, b, Some("feeding"), None)).collect());
        t
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(extract_candidates(&track(0..100), 50, 50, 0.1).len(), 2);
        assert_eq!(extract_candidates(&track(0..31), 50, 50, 0.1).len(), 1);
        assert!(extract_candidates(&Tracklets::new(), 50, 50, 0.1).is_empty());
    }

    #[test]
    fn crop_is_expanded_union() {
        let c = crop_for(&[BBox::new(0.2, 0.2, 0.2, 0.4)], 0.1);
        assert!((c.x - 0.19).abs() < 1e-12 && (c.w - 0.22).abs() < 1e-12);
        assert!((c.y - 0.18).abs() < 1e-12 && (c.h - 0.44).abs() < 1e-12);
        let edge = crop_for(&[BBox::new(0.0, 0.5, 1.0, 0.5)], 0.1);
        assert_eq!((edge.x, edge.w), (0.0, 1.0));
        assert!(edge.y + edge.h <= 1.0);
    }

    #[test]
    fn spatial_examples() {
        let half = candidate(vec![BBox::new(0.0, 0.0, 0.5, 1.0); 3], UNIT, 3);
        assert_eq!(check_spatial(&half).0, Verdict::Pass);
        let below = candidate(vec![BBox::new(0.0, 0.0, 0.49, 1.0); 3], UNIT, 3);
        assert_eq!(check_spatial(&below).0, Verdict::Fail);
        let full = candidate(vec![UNIT], UNIT, 1);
        assert_eq!(check_spatial(&full), (Verdict::Pass, 1.0));
    }

    #[test]
    fn temporal_examples() {
        let crop = BBox::new(0.0, 0.0, 0.5, 0.5);
        let mk = |obs: usize| {
            let mut c = candidate(vec![crop; 50], crop, 50);
            for d in c.central_detections.iter_mut().skip(obs) {
                d.observable = Some(false);
            }
            c
        };
        assert_eq!(check_temporal(&mk(34)).0, Verdict::Pass);
        assert_eq!(check_temporal(&mk(33)).0, Verdict::Fail);
        assert_eq!(check_temporal(&mk(50)), (Verdict::Pass, 1.0));
        // Missing detections count as unobservable.
        let sparse = candidate(vec![crop; 33], crop, 50);
        assert_eq!(check_temporal(&sparse).0, Verdict::Fail);
    }

    #[test]
    fn same_behaviour_examples() {
        let crop = BBox::new(0.0, 0.0, 0.5, 0.5);
        let mut c = candidate(vec![crop; 4], crop, 4);
        assert_eq!(check_same_behaviour(&c), Verdict::NotApplicable);
        c.cohabitant_labels = (0..4)
            .map(|f| CohabitantFrame {
                frame_index: f,
                labels: vec!["feeding".into(), "feeding".into()],
            })
            .collect();
        assert_eq!(check_same_behaviour(&c), Verdict::Pass);
        c.cohabitant_labels[2].labels[1] = "drinking".into();
        assert_eq!(check_same_behaviour(&c), Verdict::Fail);
    }

    #[test]
    fn cohabitants_inside_crop_are_collected() {
        let mut t = track(0..50);
        t.insert(
            2,
            (0..50)
                .map(|f| det(f, 2, BBox::new(0.3, 0.3, 0.1, 0.1), Some("drinking"), None))
                .collect(),
        );
        t.insert(3, vec![det(0, 3, BBox::new(0.9, 0.9, 0.05, 0.05), Some("drinking"), None)]);
        let cands = extract_candidates(&t, 50, 50, 0.1);
        let focal = cands.iter().find(|c| c.track_id == 1).unwrap();
        assert_eq!(focal.cohabitant_labels.len(), 50);
        assert!(focal.cohabitant_labels.iter().all(|f| f.labels == vec!["drinking".to_string()]));
        assert_eq!(check_same_behaviour(focal), Verdict::Fail);
    }

    #[test]
    fn curate_composes_rules() {
        let mut t = track(0..50);
        // Track 5: tiny box inside a large crop fails rule 2 only.
        let mut stream: Vec<Detection> = (0..50)
            .map(|f| det(f, 5, BBox::new(0.6, 0.6, 0.05, 0.05), Some("drinking"), None))
            .collect();
        stream.push(det(49, 5, BBox::new(0.6, 0.6, 0.35, 0.35), Some("drinking"), None));
        stream.remove(49);
        t.insert(5, stream);
        let cats = crate::dataset::default_categories();
        let out = curate(&t, &CurationConfig::default(), &cats).unwrap();
        assert_eq!(out.reports.len(), out.candidates.len());
        let good = out.reports.iter().find(|r| r.track_id == 1).unwrap();
        assert!(good.accepted);
        let bad = out.reports.iter().find(|r| r.track_id == 5).unwrap();
        assert!(!bad.accepted);
        assert_eq!(bad.rule2_spatial, Verdict::Fail);
        assert_eq!(bad.rule3_temporal, Verdict::Pass);
        assert!(bad.rule2_area_fraction < 0.5);
        assert_eq!(out.manifest.records.len(), 1);
        assert_eq!(out.manifest.records[0].label, "feeding");

        let empty = curate(&Tracklets::new(), &CurationConfig::default(), &cats).unwrap();
        assert!(empty.reports.is_empty() && empty.manifest.is_empty());
    }

    proptest! {
        #[test]
        fn rule3_matches_integer_threshold(len in 1u64..200, obs_frac in 0.0f64..=1.0) {
            let obs = ((len as f64) * obs_frac).floor() as usize;
            let crop = BBox::new(0.0, 0.0, 0.5, 0.5);
            let mut c = candidate(vec![crop; len as usize], crop, len);
            for d in c.central_detections.iter_mut().skip(obs) {
                d.observable = Some(false);
            }
            prop_assert_eq!(check_temporal(&c).0 == Verdict::Pass, 3 * obs as u64 >= 2 * len);
        }

        #[test]
        fn rule2_monotone_in_box_size(w in 0.01f64..0.99, grow in 0.0f64..0.5) {
            let small = candidate(vec![BBox::new(0.0, 0.0, w, 1.0)], UNIT, 1);
            let big_w = (w + grow).min(1.0);
            let big = candidate(vec![BBox::new(0.0, 0.0, big_w, 1.0)], UNIT, 1);
            if check_spatial(&small).0 == Verdict::Pass {
                prop_assert_eq!(check_spatial(&big).0, Verdict::Pass);
            }
        }
    }
}
