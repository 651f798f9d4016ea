//! Global motion metrics and human-region depth metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Vec3};

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut y = [0.0; 3];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.scale * (r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2]) + self.translation[i];
        }
        y
    }
}

pub fn squared_residual(t: &Similarity, src: &[Vec3], tgt: &[Vec3]) -> f64 {
    src.iter().zip(tgt).map(|(a, b)| dist2(&t.apply(a), b)).sum()
}

fn centroid(p: &[Vec3]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for x in p {
        c += Vector3::new(x[0], x[1], x[2]);
    }
    c / p.len() as f64
}

/// Closed-form least-squares similarity (or rigid) transform from `src` to `tgt`.
pub fn umeyama_align(src: &[Vec3], tgt: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if src.len() != tgt.len() {
        return Err(Error::ShapeMismatch(format!("{} source vs {} target points", src.len(), tgt.len())));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least 3 points".into()));
    }
    let n = src.len() as f64;
    let (mu_s, mu_t) = (centroid(src), centroid(tgt));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut scatter = Matrix3::zeros();
    for (a, b) in src.iter().zip(tgt) {
        let da = Vector3::new(a[0], a[1], a[2]) - mu_s;
        let db = Vector3::new(b[0], b[1], b[2]) - mu_t;
        cov += db * da.transpose();
        scatter += da * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let sv = scatter.singular_values();
    let tol = 1e-12 * sv[0].max(1e-300);
    if sv.iter().filter(|&&x| x > tol).count() < 2 {
        return Err(Error::Degenerate("source points are collinear or coincident".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        let sigma = svd.singular_values;
        (sigma[0] * d[(0, 0)] + sigma[1] * d[(1, 1)] + sigma[2] * d[(2, 2)]) / var_s
    } else {
        1.0
    };
    let t = mu_t - scale * r * mu_s;
    let mut rotation = [[0.0; 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = r[(i, j)];
        }
    }
    Ok(Similarity { scale, rotation, translation: [t[0], t[1], t[2]] })
}

/// Joint trajectories, `frames × joints` 3-vectors in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub pred: Vec<Vec<Vec3>>,
    pub gt: Vec<Vec<Vec3>>,
}

impl TrajectorySegment {
    pub fn frames(&self) -> usize {
        self.gt.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pred.len() != self.gt.len() {
            return Err(Error::ShapeMismatch(format!("{} predicted vs {} ground-truth frames", self.pred.len(), self.gt.len())));
        }
        if self.gt.len() < 2 {
            return Err(Error::InvalidInput("a segment needs at least 2 frames".into()));
        }
        let j = self.gt[0].len();
        if j == 0 || self.pred.iter().chain(&self.gt).any(|f| f.len() != j) {
            return Err(Error::ShapeMismatch("every frame needs the same nonzero joint count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Similarity (true) or rigid alignment for WA-MPJPE.
    pub wa_with_scale: bool,
    /// Leading frames used to fit the W-MPJPE alignment.
    pub w_frames: usize,
    pub w_with_scale: bool,
    pub rte_with_scale: bool,
    pub root_joint: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { wa_with_scale: true, w_frames: 2, w_with_scale: false, rte_with_scale: false, root_joint: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    /// Millimeters.
    pub wa_mpjpe: f64,
    /// Millimeters.
    pub w_mpjpe: f64,
    /// Percent of the ground-truth path length; `None` when the path has zero length.
    pub rte: Option<f64>,
}

fn mean_error(t: &Similarity, pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            s += dist2(&t.apply(a), b).sqrt();
            n += 1;
        }
    }
    s / n as f64
}

/// Fits on the given frames; for frames whose joints alone are degenerate
/// (e.g. a single joint) falls back to no rotation and a centroid shift.
fn fit(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], with_scale: bool) -> Result<Similarity> {
    let src: Vec<Vec3> = pred.iter().flatten().copied().collect();
    let tgt: Vec<Vec3> = gt.iter().flatten().copied().collect();
    match umeyama_align(&src, &tgt, with_scale) {
        Err(Error::Degenerate(_)) => {
            let (a, b) = (centroid(&src), centroid(&tgt));
            Ok(Similarity { translation: [b[0] - a[0], b[1] - a[1], b[2] - a[2]], ..Similarity::identity() })
        }
        r => r,
    }
}

pub fn motion_metrics(seg: &TrajectorySegment, cfg: &MotionConfig) -> Result<MotionMetrics> {
    seg.validate()?;
    if cfg.root_joint >= seg.gt[0].len() {
        return Err(Error::InvalidInput(format!("root joint {} out of range", cfg.root_joint)));
    }
    if cfg.w_frames == 0 {
        return Err(Error::InvalidInput("w_frames must be positive".into()));
    }
    let wa = fit(&seg.pred, &seg.gt, cfg.wa_with_scale)?;
    let wa_mpjpe = 1000.0 * mean_error(&wa, &seg.pred, &seg.gt);
    let k = cfg.w_frames.min(seg.frames());
    let w = fit(&seg.pred[..k], &seg.gt[..k], cfg.w_with_scale)?;
    let w_mpjpe = 1000.0 * mean_error(&w, &seg.pred, &seg.gt);

    let root = |f: &[Vec<Vec3>]| f.iter().map(|j| vec![j[cfg.root_joint]]).collect::<Vec<_>>();
    let (pr, gr) = (root(&seg.pred), root(&seg.gt));
    let path: f64 = gr.windows(2).map(|w| dist2(&w[0][0], &w[1][0]).sqrt()).sum();
    let rte = if path > 0.0 {
        let t = fit(&pr, &gr, cfg.rte_with_scale)?;
        Some(100.0 * mean_error(&t, &pr, &gr) / path)
    } else {
        None
    };
    Ok(MotionMetrics { wa_mpjpe, w_mpjpe, rte })
}

/// Consecutive non-overlapping segments of `len` frames; a remainder is kept
/// when it has at least 2 frames.
pub fn segment_sequence(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], len: usize) -> Result<Vec<TrajectorySegment>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} ground-truth frames", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::InvalidInput("a sequence needs at least 2 frames".into()));
    }
    if len < 2 {
        return Err(Error::InvalidInput("segment length must be at least 2".into()));
    }
    Ok((0..gt.len())
        .step_by(len)
        .map(|a| (a, (a + len).min(gt.len())))
        .filter(|(a, b)| b - a >= 2)
        .map(|(a, b)| TrajectorySegment { pred: pred[a..b].to_vec(), gt: gt[a..b].to_vec() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMotion {
    pub segments: Vec<MotionMetrics>,
    /// Means over segments; RTE averages the defined values only.
    pub mean: MotionMetrics,
}

pub fn sequence_motion_metrics(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], segment_len: usize, cfg: &MotionConfig) -> Result<SequenceMotion> {
    let segs = segment_sequence(pred, gt, segment_len)?;
    let segments = segs.iter().map(|s| motion_metrics(s, cfg)).collect::<Result<Vec<_>>>()?;
    let n = segments.len() as f64;
    let rtes: Vec<f64> = segments.iter().filter_map(|m| m.rte).collect();
    let mean = MotionMetrics {
        wa_mpjpe: segments.iter().map(|m| m.wa_mpjpe).sum::<f64>() / n,
        w_mpjpe: segments.iter().map(|m| m.w_mpjpe).sum::<f64>() / n,
        rte: (!rtes.is_empty()).then(|| rtes.iter().sum::<f64>() / rtes.len() as f64),
    };
    Ok(SequenceMotion { segments, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    /// Factor applied to the prediction before scoring.
    pub alignment_scale: f64,
    pub pixels: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Abs Rel and δ<1.25 over the masked pixels of all frames. With `align` a
/// single median ratio `median(gt) / median(pred)` rescales the prediction.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], align: bool) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("depth sizes {} / {} / mask {}", pred.len(), gt.len(), mask.len())));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(&i) = idx.iter().find(|&&i| !(gt[i] > 0.0 && gt[i].is_finite())) {
        return Err(Error::InvalidInput(format!("ground-truth depth {} at masked pixel {i} is not positive", gt[i])));
    }
    if let Some(&i) = idx.iter().find(|&&i| !pred[i].is_finite()) {
        return Err(Error::NonFinite(format!("predicted depth at pixel {i}")));
    }
    let alpha = if align {
        let mp = median(idx.iter().map(|&i| pred[i]).collect());
        if !(mp > 0.0) {
            return Err(Error::Degenerate("median predicted depth is not positive".into()));
        }
        median(idx.iter().map(|&i| gt[i]).collect()) / mp
    } else {
        1.0
    };
    let (mut rel, mut good) = (0.0, 0usize);
    for &i in &idx {
        let p = alpha * pred[i];
        rel += (p - gt[i]).abs() / gt[i];
        if (p / gt[i]).max(gt[i] / p) < 1.25 {
            good += 1;
        }
    }
    let n = idx.len();
    Ok(DepthMetrics { abs_rel: rel / n as f64, delta_125: good as f64 / n as f64, alignment_scale: alpha, pixels: n })
}
