//! Pinhole camera model, rigid poses and focal recovery from pointmaps.
//!
//! Pixel convention: the center of column `c`, row `r` sits at
//! `(c + 0.5, r + 0.5)`, so the image center of a `W×H` image is `(W/2, H/2)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{ConfidenceMap, DepthMap, Pointmap, Raster};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = sub3(a, b);
    dot3(&d, &d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidInput(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidInput("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Shared focal with the principal point at the center of a `width×height` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn project(&self, x: &Vec3) -> Result<[f64; 2]> {
        if !(x[2] > 0.0) {
            return Err(Error::BehindCamera(x[2]));
        }
        Ok(self.project_unchecked(x))
    }

    #[inline]
    pub fn project_unchecked(&self, x: &Vec3) -> [f64; 2] {
        [self.fx * x[0] / x[2] + self.cx, self.fy * x[1] / x[2] + self.cy]
    }

    #[inline]
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }
}

pub fn project(k: &Intrinsics, x: &Vec3) -> Result<[f64; 2]> {
    k.project(x)
}

/// Lifts a depth map to camera-frame points. Pixels with non-finite depth
/// are treated as invalid and map to NaN points.
pub fn unproject(k: &Intrinsics, depth: &DepthMap) -> Result<Pointmap> {
    let mut out = Vec::with_capacity(depth.len());
    for row in 0..depth.height {
        for col in 0..depth.width {
            let d = *depth.get(row, col);
            if !d.is_finite() {
                out.push([f64::NAN; 3]);
                continue;
            }
            if d <= 0.0 {
                return Err(Error::NonPositiveDepth { u: col, v: row, depth: d });
            }
            out.push(k.unproject_pixel(col as f64 + 0.5, row as f64 + 0.5, d));
        }
    }
    Raster::from_vec(depth.height, depth.width, out)
}

#[inline]
pub fn is_valid_point(p: &Vec3) -> bool {
    p.iter().all(|c| c.is_finite()) && p[2] > 0.0
}

/// Focal length (shared `fx = fy`, principal point at the image center) that
/// best explains the pointmap in the confidence-weighted least-squares sense.
/// Invalid points (non-finite or `z <= 0`) are skipped.
pub fn intrinsics_from_pointmap(
    p: &Pointmap,
    confidence: Option<&ConfidenceMap>,
    image_size: (usize, usize),
) -> Result<Intrinsics> {
    intrinsics_from_pointmap_with(p, confidence, image_size, Accumulation::F64)
}

/// Reduction precision for the closed-form fits. `F32` mimics a float32
/// accumulator for reproducibility studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    F32,
    #[default]
    F64,
}

impl Accumulation {
    pub fn sum<I: IntoIterator<Item = f64>>(self, it: I) -> f64 {
        match self {
            Accumulation::F64 => it.into_iter().sum(),
            Accumulation::F32 => it.into_iter().fold(0f32, |acc, x| acc + x as f32) as f64,
        }
    }
}

pub fn intrinsics_from_pointmap_with(
    p: &Pointmap,
    confidence: Option<&ConfidenceMap>,
    image_size: (usize, usize),
    acc: Accumulation,
) -> Result<Intrinsics> {
    let (width, height) = image_size;
    if let Some(c) = confidence {
        if !c.same_size(p) {
            return Err(Error::ShapeMismatch("confidence map size differs from pointmap".into()));
        }
    }
    if p.width != width || p.height != height {
        return Err(Error::ShapeMismatch(format!(
            "pointmap is {}x{}, image size is {width}x{height}",
            p.width, p.height
        )));
    }
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let mut num = Vec::new();
    let mut den = Vec::new();
    let mut valid = 0usize;
    for row in 0..p.height {
        for col in 0..p.width {
            let x = p.get(row, col);
            if !is_valid_point(x) {
                continue;
            }
            let w = confidence.map_or(1.0, |c| *c.get(row, col));
            if !(w >= 0.0) {
                continue;
            }
            valid += 1;
            let (ax, ay) = (x[0] / x[2], x[1] / x[2]);
            let (bx, by) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
            num.push(w * (ax * bx + ay * by));
            den.push(w * (ax * ax + ay * ay));
        }
    }
    if valid < 2 {
        return Err(Error::NoSolution(format!("{valid} valid pixels, need at least 2")));
    }
    let den = acc.sum(den);
    if !(den > 0.0) {
        return Err(Error::NoSolution("all points lie on the optical axis".into()));
    }
    let f = acc.sum(num) / den;
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::NoSolution(format!("fitted focal {f} is not positive")));
    }
    Intrinsics::new(f, f, cx, cy)
}

/// Residual of the focal fit for a given `f`; used by tests and diagnostics.
pub fn focal_residual(p: &Pointmap, confidence: Option<&ConfidenceMap>, f: f64) -> f64 {
    let cx = p.width as f64 / 2.0;
    let cy = p.height as f64 / 2.0;
    let mut r = 0.0;
    for row in 0..p.height {
        for col in 0..p.width {
            let x = p.get(row, col);
            if !is_valid_point(x) {
                continue;
            }
            let w = confidence.map_or(1.0, |c| *c.get(row, col));
            let ex = f * x[0] / x[2] - (col as f64 + 0.5 - cx);
            let ey = f * x[1] / x[2] - (row as f64 + 0.5 - cy);
            r += w * (ex * ex + ey * ey);
        }
    }
    r
}

/// Sequence-shared intrinsics: mean of the per-frame focal lengths.
pub fn average_intrinsics(per_frame: &[Intrinsics]) -> Result<Intrinsics> {
    let first = per_frame
        .first()
        .ok_or_else(|| Error::InvalidInput("no intrinsics to average".into()))?;
    let n = per_frame.len() as f64;
    let fx = per_frame.iter().map(|k| k.fx).sum::<f64>() / n;
    let fy = per_frame.iter().map(|k| k.fy).sum::<f64>() / n;
    Intrinsics::new(fx, fy, first.cx, first.cy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    WorldToCamera,
    CameraToWorld,
}

/// `[R | T]` mapping world points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(Error::InvalidInput(format!("rotation is not orthonormal ({ortho:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("rotation determinant is {det}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_arrays(r: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(&[
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ]),
            Vector3::from(t),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, x: &Vec3, direction: Direction) -> Vec3 {
        let x = Vector3::from(*x);
        let y = match direction {
            Direction::WorldToCamera => self.rotation * x + self.translation,
            Direction::CameraToWorld => self.rotation.transpose() * (x - self.translation),
        };
        [y.x, y.y, y.z]
    }

    /// Same pose with its translation multiplied by `s` (metric upgrade).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }
}

pub fn pose_transform(e: &CameraPose, x: &Vec3, direction: Direction) -> Vec3 {
    e.transform(x, direction)
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
pub fn rodrigues(w: &Vec3) -> [[f64; 3]; 3] {
    let theta = dot3(w, w).sqrt();
    if theta < 1e-12 {
        // first-order expansion keeps small rotations orthonormal to rounding
        return [[1.0, -w[2], w[1]], [w[2], 1.0, -w[0]], [-w[1], w[0], 1.0]];
    }
    let k = scale3(w, 1.0 / theta);
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

#[inline]
pub fn mat3_vec(m: &[[f64; 3]; 3], v: &Vec3) -> Vec3 {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}
