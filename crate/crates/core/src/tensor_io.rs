//! Portable on-disk containers.
//!
//! A tensor file is laid out as
//!
//! ```text
//! "UNISHTC1" | u32 LE header length | JSON header {name, dtype, shape} | payload
//! ```
//!
//! with the payload stored row-major, little-endian. The same bytes are
//! produced on every platform, so golden files can be shared by bindings in
//! other languages. Detection logs are line-delimited JSON, one frame per
//! line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UNISHTC1";
pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Uint8,
    Int64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Uint8 => "uint8",
            DType::Int64 => "int64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" => Ok(DType::Float32),
            "uint8" => Ok(DType::Uint8),
            "int64" => Ok(DType::Int64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint8 => 1,
            DType::Int64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::Float32,
            TensorData::U8(_) => DType::Uint8,
            TensorData::I64(_) => DType::Int64,
        }
    }
}

// Bitwise comparison so NaN payloads round-trip as equal.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

/// A named, typed, row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

impl TensorContainer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let c = Self {
            name: name.into(),
            shape,
            data,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(
            name,
            shape,
            TensorData::F32(values.iter().map(|&v| v as f32).collect()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.len() > MAX_RANK {
            return Err(Error::InvalidContainer(format!(
                "rank {} exceeds {MAX_RANK}",
                self.shape.len()
            )));
        }
        let count: usize = self.shape.iter().product();
        if count != self.data.len() {
            return Err(Error::InvalidContainer(format!(
                "shape {:?} implies {count} elements, data holds {}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// Values widened to f64 regardless of storage type.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn header_bytes(&self) -> Vec<u8> {
        let header = Header {
            name: self.name.clone(),
            dtype: self.dtype().as_str().to_string(),
            shape: self.shape.clone(),
        };
        serde_json::to_vec(&header).expect("header serializes")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = self.header_bytes();
        let mut out =
            Vec::with_capacity(12 + header.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        let dtype = DType::parse(&header.dtype)?;
        if header.shape.len() > MAX_RANK {
            return Err(Error::InvalidContainer(format!(
                "rank {} exceeds {MAX_RANK}",
                header.shape.len()
            )));
        }
        let count: usize = header.shape.iter().product();
        let payload = &bytes[header_end..];
        let expected = count * dtype.size();
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::InvalidContainer(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = match dtype {
            DType::Float32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Uint8 => TensorData::U8(payload.to_vec()),
            DType::Int64 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        TensorContainer::new(header.name, header.shape, data)
    }
}

pub fn write_tensor(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes, path)
}

/// Dense H×W grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "raster {height}x{width} given {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type DepthMap = Raster<f64>;
pub type ConfidenceMap = Raster<f64>;
pub type HumanMask = Raster<bool>;

/// Per-pixel camera-frame 3-D points.
pub type Pointmap = Raster<[f64; 3]>;

fn split_frames(c: &TensorContainer, channels: usize) -> Result<(usize, usize, usize, Vec<f64>)> {
    let s = &c.shape;
    let ok = match channels {
        1 => s.len() == 3,
        _ => s.len() == 4 && s[3] == channels,
    };
    if !ok {
        return Err(Error::ShapeMismatch(format!(
            "`{}` has shape {:?}, expected [N,H,W{}]",
            c.name,
            s,
            if channels == 1 { String::new() } else { format!(",{channels}") }
        )));
    }
    Ok((s[0], s[1], s[2], c.to_f64()))
}

/// Splits an [N,H,W] container into N scalar rasters.
pub fn scalar_rasters(c: &TensorContainer) -> Result<Vec<Raster<f64>>> {
    let (n, h, w, v) = split_frames(c, 1)?;
    Ok((0..n)
        .map(|i| Raster {
            height: h,
            width: w,
            data: v[i * h * w..(i + 1) * h * w].to_vec(),
        })
        .collect())
}

/// Splits an [N,H,W] uint8 container into masks; any nonzero value is foreground.
pub fn mask_rasters(c: &TensorContainer) -> Result<Vec<HumanMask>> {
    Ok(scalar_rasters(c)?
        .into_iter()
        .map(|r| Raster {
            height: r.height,
            width: r.width,
            data: r.data.into_iter().map(|x| x != 0.0).collect(),
        })
        .collect())
}

pub fn pointmap_rasters(c: &TensorContainer) -> Result<Vec<Pointmap>> {
    let (n, h, w, v) = split_frames(c, 3)?;
    Ok((0..n)
        .map(|i| {
            let base = i * h * w * 3;
            Raster {
                height: h,
                width: w,
                data: (0..h * w)
                    .map(|p| {
                        let o = base + 3 * p;
                        [v[o], v[o + 1], v[o + 2]]
                    })
                    .collect(),
            }
        })
        .collect())
}

pub fn stack_scalar(name: &str, frames: &[Raster<f64>]) -> Result<TensorContainer> {
    let (h, w) = frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0));
    let data: Vec<f64> = frames.iter().flat_map(|f| f.data.iter().copied()).collect();
    TensorContainer::from_f64(name, vec![frames.len(), h, w], &data)
}

pub fn stack_masks(name: &str, frames: &[HumanMask]) -> Result<TensorContainer> {
    let (h, w) = frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0));
    let data: Vec<u8> = frames
        .iter()
        .flat_map(|f| f.data.iter().map(|&b| b as u8))
        .collect();
    TensorContainer::new(name, vec![frames.len(), h, w], TensorData::U8(data))
}

pub fn stack_pointmaps(name: &str, frames: &[Pointmap]) -> Result<TensorContainer> {
    let (h, w) = frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0));
    let data: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.data.iter().flat_map(|p| p.iter().copied()))
        .collect();
    TensorContainer::from_f64(name, vec![frames.len(), h, w, 3], &data)
}

// ---------------------------------------------------------------------------
// Detection logs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    #[serde(rename = "cls", deserialize_with = "de_label")]
    pub class_label: String,
    #[serde(rename = "x0")]
    pub x_min: f64,
    #[serde(rename = "y0")]
    pub y_min: f64,
    #[serde(rename = "x1")]
    pub x_max: f64,
    #[serde(rename = "y1")]
    pub y_max: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Area of the intersection with `other`; zero when they only touch.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

fn de_label<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    match v {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("invalid class label {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    pub boxes: Vec<BoundingBox>,
    #[serde(rename = "size")]
    pub image_size: (u32, u32),
    #[serde(rename = "cut_score")]
    pub content_change_score: f64,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::InvalidDetection {
            frame: self.frame_index,
            msg,
        };
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(err(format!("image size {:?} must be positive", self.image_size)));
        }
        if !(self.content_change_score >= 0.0) {
            return Err(err(format!(
                "cut score {} must be non-negative",
                self.content_change_score
            )));
        }
        for b in &self.boxes {
            if !(b.x_min <= b.x_max && b.y_min <= b.y_max) {
                return Err(err(format!(
                    "inverted box ({}, {}, {}, {})",
                    b.x_min, b.y_min, b.x_max, b.y_max
                )));
            }
            if !(0.0..=1.0).contains(&b.score) {
                return Err(err(format!("score {} outside [0, 1]", b.score)));
            }
        }
        Ok(())
    }
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedDetection {
                line: i + 1,
                msg: e.to_string(),
            })?;
        rec.validate()?;
        if !seen.insert(rec.frame_index) {
            return Err(Error::InvalidDetection {
                frame: rec.frame_index,
                msg: "duplicate frame index".into(),
            });
        }
        records.push(rec);
    }
    records.sort_by_key(|r| r.frame_index);
    Ok(records)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

pub fn write_detections(records: &[DetectionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Sequence bundles

/// Per-frame body predictions or labels as stored in a bundle manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyTrack {
    /// Per frame, J axis-angle triples flattened.
    pub pose: Vec<Vec<f64>>,
    /// Per frame shape coefficients.
    pub betas: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub translation: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BundleManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointmaps: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_pointmaps: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmr_tokens: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_tokens: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_poses: Option<Vec<PoseRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_pred: Option<BodyTrack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_gt: Option<BodyTrack>,
    /// Predicted global scale, for evaluating the coarse objective directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Ground-truth-aligned scale, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_opt: Option<f64>,
}

fn default_fps() -> f64 {
    30.0
}

/// Token matrix: rows are tokens, `frame` gives each row's frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub frame: Vec<usize>,
}

/// The backbone outputs for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceBundle {
    pub fps: f64,
    pub pointmaps: Vec<Pointmap>,
    pub confidence: Vec<ConfidenceMap>,
    pub masks: Vec<HumanMask>,
    pub pseudo_depth: Option<Vec<DepthMap>>,
    pub orig_pointmaps: Option<Vec<Pointmap>>,
    pub hmr_tokens: Option<TokenMatrix>,
    pub geo_tokens: Option<TokenMatrix>,
    /// Per frame, J pixel positions.
    pub keypoints2d: Option<Vec<Vec<[f64; 2]>>>,
    pub camera_poses: Option<Vec<PoseRecord>>,
    pub body_pred: Option<BodyTrack>,
    pub body_gt: Option<BodyTrack>,
    pub scale: Option<f64>,
    pub scale_opt: Option<f64>,
}

impl SequenceBundle {
    pub fn frames(&self) -> usize {
        self.pointmaps.len()
    }

    pub fn height(&self) -> usize {
        self.pointmaps.first().map_or(0, |p| p.height)
    }

    pub fn width(&self) -> usize {
        self.pointmaps.first().map_or(0, |p| p.width)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pointmaps.len();
        if n == 0 {
            return Err(Error::InvalidInput("bundle has no frames".into()));
        }
        let (h, w) = (self.height(), self.width());
        let check = |name: &str, count: usize, dims: Vec<(usize, usize)>| {
            if count != n {
                return Err(Error::ShapeMismatch(format!("`{name}` has {count} frames, expected {n}")));
            }
            if dims.into_iter().any(|d| d != (h, w)) {
                return Err(Error::ShapeMismatch(format!("`{name}` frame size differs from {h}x{w}")));
            }
            Ok(())
        };
        check("pointmaps", n, self.pointmaps.iter().map(|r| (r.height, r.width)).collect())?;
        check("confidence", self.confidence.len(), self.confidence.iter().map(|r| (r.height, r.width)).collect())?;
        check("masks", self.masks.len(), self.masks.iter().map(|r| (r.height, r.width)).collect())?;
        if let Some(pd) = &self.pseudo_depth {
            check("pseudo_depth", pd.len(), pd.iter().map(|r| (r.height, r.width)).collect())?;
        }
        if let Some(op) = &self.orig_pointmaps {
            check("orig_pointmaps", op.len(), op.iter().map(|r| (r.height, r.width)).collect())?;
        }
        if let Some(t) = &self.hmr_tokens {
            if t.rows != n {
                return Err(Error::ShapeMismatch(format!(
                    "`hmr_tokens` has {} rows, expected one per frame ({n})",
                    t.rows
                )));
            }
        }
        Ok(())
    }
}

fn load_field(dir: &Path, file: &Option<String>, field: &str) -> Result<Option<TensorContainer>> {
    match file {
        Some(f) => read_tensor(dir.join(f)).map(Some),
        None => {
            let _ = field;
            Ok(None)
        }
    }
}

fn require(dir: &Path, file: &Option<String>, field: &str) -> Result<TensorContainer> {
    load_field(dir, file, field)?.ok_or_else(|| Error::MissingField(field.to_string()))
}

fn tokens_from(c: &TensorContainer) -> Result<TokenMatrix> {
    let v = c.to_f64();
    match c.shape.as_slice() {
        [n, d] => Ok(TokenMatrix {
            rows: *n,
            dim: *d,
            data: v,
            frame: (0..*n).collect(),
        }),
        [n, l, d] => Ok(TokenMatrix {
            rows: n * l,
            dim: *d,
            data: v,
            frame: (0..n * l).map(|r| r / l).collect(),
        }),
        s => Err(Error::ShapeMismatch(format!(
            "`{}` has shape {s:?}, expected [N,D] or [N,L,D]",
            c.name
        ))),
    }
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<SequenceBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: BundleManifest = serde_json::from_str(&text)?;
    let pointmaps = pointmap_rasters(&require(dir, &m.pointmaps, "pointmaps")?)?;
    let confidence = match load_field(dir, &m.confidence, "confidence")? {
        Some(c) => scalar_rasters(&c)?,
        None => pointmaps
            .iter()
            .map(|p| Raster::filled(p.height, p.width, 1.0))
            .collect(),
    };
    let masks = mask_rasters(&require(dir, &m.masks, "masks")?)?;
    let pseudo_depth = load_field(dir, &m.pseudo_depth, "pseudo_depth")?
        .map(|c| scalar_rasters(&c))
        .transpose()?;
    let orig_pointmaps = load_field(dir, &m.orig_pointmaps, "orig_pointmaps")?
        .map(|c| pointmap_rasters(&c))
        .transpose()?;
    let hmr_tokens = load_field(dir, &m.hmr_tokens, "hmr_tokens")?
        .map(|c| tokens_from(&c))
        .transpose()?;
    let geo_tokens = load_field(dir, &m.geo_tokens, "geo_tokens")?
        .map(|c| tokens_from(&c))
        .transpose()?;
    let keypoints2d = match load_field(dir, &m.keypoints2d, "keypoints2d")? {
        Some(c) => {
            let [n, j, 2] = c.shape[..] else {
                return Err(Error::ShapeMismatch(format!(
                    "`keypoints2d` has shape {:?}, expected [N,J,2]",
                    c.shape
                )));
            };
            let v = c.to_f64();
            Some(
                (0..n)
                    .map(|i| (0..j).map(|k| [v[(i * j + k) * 2], v[(i * j + k) * 2 + 1]]).collect())
                    .collect(),
            )
        }
        None => None,
    };
    let bundle = SequenceBundle {
        fps: m.fps,
        pointmaps,
        confidence,
        masks,
        pseudo_depth,
        orig_pointmaps,
        hmr_tokens,
        geo_tokens,
        keypoints2d,
        camera_poses: m.camera_poses,
        body_pred: m.body_pred,
        body_gt: m.body_gt,
        scale: m.scale,
        scale_opt: m.scale_opt,
    };
    if bundle.frames() != m.frames {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares {} frames, pointmaps hold {}",
            m.frames,
            bundle.frames()
        )));
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(bundle: &SequenceBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundle.validate()?;
    let mut m = BundleManifest {
        frames: bundle.frames(),
        height: bundle.height(),
        width: bundle.width(),
        fps: bundle.fps,
        camera_poses: bundle.camera_poses.clone(),
        body_pred: bundle.body_pred.clone(),
        body_gt: bundle.body_gt.clone(),
        scale: bundle.scale,
        scale_opt: bundle.scale_opt,
        ..Default::default()
    };
    let put = |c: TensorContainer| -> Result<String> {
        let file = format!("{}.tc", c.name);
        write_tensor(&c, dir.join(&file))?;
        Ok(file)
    };
    m.pointmaps = Some(put(stack_pointmaps("pointmaps", &bundle.pointmaps)?)?);
    m.confidence = Some(put(stack_scalar("confidence", &bundle.confidence)?)?);
    m.masks = Some(put(stack_masks("masks", &bundle.masks)?)?);
    if let Some(pd) = &bundle.pseudo_depth {
        m.pseudo_depth = Some(put(stack_scalar("pseudo_depth", pd)?)?);
    }
    if let Some(op) = &bundle.orig_pointmaps {
        m.orig_pointmaps = Some(put(stack_pointmaps("orig_pointmaps", op)?)?);
    }
    let token_container = |name: &str, t: &TokenMatrix| {
        let n = bundle.frames();
        if t.rows % n == 0 && t.rows > n {
            TensorContainer::from_f64(name, vec![n, t.rows / n, t.dim], &t.data)
        } else {
            TensorContainer::from_f64(name, vec![t.rows, t.dim], &t.data)
        }
    };
    if let Some(t) = &bundle.hmr_tokens {
        m.hmr_tokens = Some(put(token_container("hmr_tokens", t)?)?);
    }
    if let Some(t) = &bundle.geo_tokens {
        m.geo_tokens = Some(put(token_container("geo_tokens", t)?)?);
    }
    if let Some(k) = &bundle.keypoints2d {
        let j = k.first().map_or(0, |f| f.len());
        let data: Vec<f64> = k.iter().flat_map(|f| f.iter().flat_map(|p| p.iter().copied())).collect();
        m.keypoints2d = Some(put(TensorContainer::from_f64(
            "keypoints2d",
            vec![k.len(), j, 2],
            &data,
        )?)?);
    }
    let path: PathBuf = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
