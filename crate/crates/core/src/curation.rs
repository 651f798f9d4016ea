//! Shot splitting and single-subject clip filtering over detection logs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{read_detections, BoundingBox, DetectionRecord};

const PROMINENCE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub cut_threshold: f64,
    pub prominence_ratio: f64,
    pub border_margin: f64,
    pub min_clip_frames: usize,
    pub person_class_label: String,
    pub fps: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            cut_threshold: 0.5,
            prominence_ratio: 0.4,
            border_margin: 0.0,
            min_clip_frames: 30,
            person_class_label: "person".into(),
            fps: 30.0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cut_threshold > 0.0) {
            return Err(Error::InvalidInput("cut_threshold must be positive".into()));
        }
        if !(self.prominence_ratio > 0.0 && self.prominence_ratio < 1.0) {
            return Err(Error::InvalidInput("prominence_ratio must lie in (0, 1)".into()));
        }
        if !(self.border_margin >= 0.0) {
            return Err(Error::InvalidInput("border_margin must be non-negative".into()));
        }
        if self.min_clip_frames == 0 {
            return Err(Error::InvalidInput("min_clip_frames must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidInput("fps must be positive".into()));
        }
        Ok(())
    }
}

/// Rejection rules in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    SinglePerson,
    Prominence,
    Truncation,
    Overlap,
    Length,
}

impl Rule {
    pub const ALL: [Rule; 5] = [Rule::SinglePerson, Rule::Prominence, Rule::Truncation, Rule::Overlap, Rule::Length];

    pub fn name(self) -> &'static str {
        match self {
            Rule::SinglePerson => "single-person",
            Rule::Prominence => "prominence",
            Rule::Truncation => "truncation",
            Rule::Overlap => "overlap",
            Rule::Length => "length",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive range of positions into a frame-ordered record list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub first: usize,
    pub last: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Splits before every record whose cut score exceeds `threshold`.
pub fn detect_cuts(records: &[DetectionRecord], threshold: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        if r.content_change_score > threshold {
            out.push(Segment { first: start, last: i - 1 });
            start = i;
        }
    }
    if !records.is_empty() {
        out.push(Segment { first: start, last: records.len() - 1 });
    }
    out
}

fn person_boxes<'a>(r: &'a DetectionRecord, label: &'a str) -> impl Iterator<Item = (usize, &'a BoundingBox)> {
    r.boxes.iter().enumerate().filter(move |(_, b)| b.class_label == label)
}

fn touches_border(b: &BoundingBox, size: (u32, u32), margin: f64) -> bool {
    let (w, h) = (size.0 as f64, size.1 as f64);
    b.x_min <= margin || b.y_min <= margin || b.x_max >= w - margin || b.y_max >= h - margin
}

/// Returns the first rule the segment fails, or `None` when it is accepted.
pub fn apply_subject_filters(frames: &[DetectionRecord], cfg: &CurationConfig) -> Option<Rule> {
    if frames.is_empty() {
        return Some(Rule::Length);
    }
    let label = cfg.person_class_label.as_str();
    if frames.iter().any(|r| person_boxes(r, label).count() != 1) {
        return Some(Rule::SinglePerson);
    }
    let subject = |r: &DetectionRecord| person_boxes(r, label).next().expect("one person box").0;
    let mean_ratio = frames
        .iter()
        .map(|r| r.boxes[subject(r)].height() / r.image_size.1 as f64)
        .sum::<f64>()
        / frames.len() as f64;
    if !(mean_ratio - cfg.prominence_ratio > PROMINENCE_SLACK) {
        return Some(Rule::Prominence);
    }
    if frames.iter().any(|r| touches_border(&r.boxes[subject(r)], r.image_size, cfg.border_margin)) {
        return Some(Rule::Truncation);
    }
    let overlaps = |r: &DetectionRecord| {
        let s = subject(r);
        r.boxes.iter().enumerate().any(|(j, b)| j != s && r.boxes[s].intersection_area(b) > 0.0)
    };
    if frames.iter().any(overlaps) {
        return Some(Rule::Overlap);
    }
    if frames.len() < cfg.min_clip_frames {
        return Some(Rule::Length);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCandidate {
    pub video_id: String,
    pub start_frame: u64,
    pub end_frame: u64,
    pub start_time: f64,
    pub end_time: f64,
    pub rejection: Option<Rule>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub videos: usize,
    pub frames: usize,
    pub segments: usize,
    pub accepted: usize,
    /// Rejections per rule, keyed by rule name; every rule is listed.
    pub rejected: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationOutput {
    pub clips: Vec<ClipCandidate>,
    pub report: CurationReport,
}

impl CurationOutput {
    pub fn accepted(&self) -> impl Iterator<Item = &ClipCandidate> {
        self.clips.iter().filter(|c| c.rejection.is_none())
    }
}

/// Curates each video in the given order. `records` must be frame-ordered.
pub fn curate(videos: &[(String, Vec<DetectionRecord>)], cfg: &CurationConfig) -> Result<CurationOutput> {
    cfg.validate()?;
    let mut out = CurationOutput::default();
    if !videos.is_empty() {
        out.report.rejected = Rule::ALL.iter().map(|r| (r.name().to_string(), 0)).collect();
    }
    for (id, records) in videos {
        if records.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
            return Err(Error::InvalidInput(format!("records of `{id}` are not frame-ordered")));
        }
        out.report.videos += 1;
        out.report.frames += records.len();
        for seg in detect_cuts(records, cfg.cut_threshold) {
            let frames = &records[seg.first..=seg.last];
            let rejection = apply_subject_filters(frames, cfg);
            out.report.segments += 1;
            match rejection {
                Some(r) => *out.report.rejected.get_mut(r.name()).expect("all rules listed") += 1,
                None => out.report.accepted += 1,
            }
            let (a, b) = (frames[0].frame_index, frames[frames.len() - 1].frame_index);
            out.clips.push(ClipCandidate {
                video_id: id.clone(),
                start_frame: a,
                end_frame: b,
                start_time: a as f64 / cfg.fps,
                end_time: (b + 1) as f64 / cfg.fps,
                rejection,
            });
        }
    }
    Ok(out)
}

/// Reads every `<video_id>.jsonl` log in `dir`, sorted by file name.
pub fn read_log_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Vec<DetectionRecord>)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().expect("file name").to_string_lossy().into_owned();
            Ok((id, read_detections(&p)?))
        })
        .collect()
}
