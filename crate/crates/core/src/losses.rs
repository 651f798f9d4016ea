//! Training objectives for the three stages and their building blocks.
//!
//! Every loss has a plain evaluator returning a [`LossReport`]. The stages
//! used for training also have tape builders producing the same value as a
//! differentiable scalar.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::body::{BodyOutput, BodyParams};
use crate::chamfer::{chamfer_one_way, nearest_indices};
use crate::error::{Error, Result};
use crate::geometry::{is_valid_point, scale3, Intrinsics, Vec3};
use crate::roe::{solve_scale_shift, Objective, RoeConfig};
use crate::tensor_io::{ConfidenceMap, DepthMap, HumanMask, Pointmap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_preg: f64,
    pub lambda_smpl: f64,
    pub lambda_scale: f64,
    pub lambda_v: f64,
    pub lambda_j3d: f64,
    pub lambda_j2d: f64,
    pub lambda_pose: f64,
    pub lambda_shape: f64,
    pub lambda_trans: f64,
    pub lambda_align: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_preg: 0.1,
            lambda_smpl: 1.0,
            lambda_scale: 0.1,
            lambda_v: 0.1,
            lambda_j3d: 0.1,
            lambda_j2d: 10.0,
            lambda_pose: 0.1,
            lambda_shape: 0.1,
            lambda_trans: 1.0,
            lambda_align: 1.0,
            lambda_depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_h,
            self.lambda_preg,
            self.lambda_smpl,
            self.lambda_scale,
            self.lambda_v,
            self.lambda_j3d,
            self.lambda_j2d,
            self.lambda_pose,
            self.lambda_shape,
            self.lambda_trans,
            self.lambda_align,
            self.lambda_depth,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub anchor_count: usize,
    pub tau: f64,
    pub min_patch_size: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { anchor_count: 64, tau: 0.2, min_patch_size: 3 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_count == 0 || !(self.tau > 0.0) || self.min_patch_size < 2 {
            return Err(Error::InvalidInput("patch spec needs K >= 1, tau > 0, min_patch_size >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
    pub per_frame: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

impl LossReport {
    fn from_terms(terms: Vec<LossTerm>, per_frame: Vec<f64>, flags: Vec<String>) -> Self {
        let total = terms.iter().map(|t| t.weight * t.value).sum();
        Self { total, terms, per_frame, flags }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Σ weight × value over the recorded terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

fn term(name: &str, weight: f64, value: f64) -> LossTerm {
    LossTerm { name: name.into(), weight, value }
}

// ---------------------------------------------------------------------------
// Stage 1: local human depth distillation

/// One anchor's neighborhood and the fitted affine map for it. The fit is
/// held fixed when differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub anchor: usize,
    pub pixels: Vec<usize>,
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub skipped_small: usize,
    pub skipped_degenerate: usize,
}

fn check_same(h: usize, w: usize, others: &[(usize, usize, &str)]) -> Result<()> {
    for &(oh, ow, name) in others {
        if (oh, ow) != (h, w) {
            return Err(Error::ShapeMismatch(format!("`{name}` is {oh}x{ow}, expected {h}x{w}")));
        }
    }
    Ok(())
}

/// Samples anchors, grows radius-τ patches in the lifted pseudo-depth cloud
/// and fits one (s, t) per patch with the exact L1 solver.
pub fn build_patches(
    pred_depth: &DepthMap,
    pred_conf: &ConfidenceMap,
    pseudo_depth: &DepthMap,
    mask: &HumanMask,
    k: &Intrinsics,
    spec: &PatchSpec,
    seed: u64,
) -> Result<PatchSet> {
    spec.validate()?;
    let (h, w) = (pseudo_depth.height, pseudo_depth.width);
    check_same(
        h,
        w,
        &[
            (pred_depth.height, pred_depth.width, "pred_depth"),
            (pred_conf.height, pred_conf.width, "pred_conf"),
            (mask.height, mask.width, "mask"),
        ],
    )?;
    let fg: Vec<usize> = (0..h * w).filter(|&i| mask.data[i]).collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut pts = Vec::with_capacity(fg.len());
    for &i in &fg {
        let d = pseudo_depth.data[i];
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonPositiveDepth { u: i % w, v: i / w, depth: d });
        }
        pts.push(k.unproject_pixel((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = sample(&mut rng, fg.len(), spec.anchor_count.min(fg.len())).into_vec();
    anchors.sort_unstable();
    let tau2 = spec.tau * spec.tau;
    let cfg = RoeConfig::scale_shift(Objective::L1);
    let mut out = PatchSet { patches: Vec::new(), skipped_small: 0, skipped_degenerate: 0 };
    for a in anchors {
        let x = pts[a];
        let members: Vec<usize> = (0..fg.len()).filter(|&j| crate::geometry::dist2(&pts[j], &x) <= tau2).collect();
        if members.len() < spec.min_patch_size {
            out.skipped_small += 1;
            continue;
        }
        let pixels: Vec<usize> = members.iter().map(|&j| fg[j]).collect();
        let p: Vec<f64> = pixels.iter().map(|&i| pred_depth.data[i]).collect();
        let q: Vec<f64> = pixels.iter().map(|&i| pseudo_depth.data[i]).collect();
        let c: Vec<f64> = pixels.iter().map(|&i| pred_conf.data[i]).collect();
        match solve_scale_shift(&p, &q, &c, &cfg) {
            Ok(fit) => out.patches.push(Patch { anchor: fg[a], pixels, scale: fit.scale, shift: fit.shift }),
            Err(_) => out.skipped_degenerate += 1,
        }
    }
    if out.patches.is_empty() {
        return Err(Error::Degenerate("every anchor patch was too small or unsolvable".into()));
    }
    Ok(out)
}

/// Mean over patches of the mean confidence-weighted affine residual.
pub fn patch_loss(patches: &PatchSet, pred_depth: &[f64], pred_conf: &[f64], pseudo_depth: &[f64]) -> f64 {
    let n = patches.patches.len() as f64;
    patches
        .patches
        .iter()
        .map(|p| {
            let s: f64 = p
                .pixels
                .iter()
                .map(|&i| pred_conf[i] * (p.scale * pred_depth[i] + p.shift - pseudo_depth[i]).abs())
                .sum();
            s / p.pixels.len() as f64
        })
        .sum::<f64>()
        / n
}

pub fn local_human_loss(
    pred_depth: &DepthMap,
    pred_conf: &ConfidenceMap,
    pseudo_depth: &DepthMap,
    mask: &HumanMask,
    k: &Intrinsics,
    spec: &PatchSpec,
    seed: u64,
) -> Result<LossReport> {
    let ps = build_patches(pred_depth, pred_conf, pseudo_depth, mask, k, spec, seed)?;
    let v = patch_loss(&ps, &pred_depth.data, &pred_conf.data, &pseudo_depth.data);
    let mut flags = Vec::new();
    if ps.skipped_small > 0 {
        flags.push(format!("skipped {} patches below min_patch_size", ps.skipped_small));
    }
    if ps.skipped_degenerate > 0 {
        flags.push(format!("skipped {} degenerate patches", ps.skipped_degenerate));
    }
    Ok(LossReport::from_terms(vec![term("local_human", 1.0, v)], vec![v], flags))
}

/// Tape form of [`patch_loss`]; `depth` and `conf` are HW×1 columns.
pub fn patch_loss_tape(t: &mut Tape, patches: &PatchSet, depth: Var, conf: Var, pseudo_depth: &[f64]) -> Var {
    let mut per = Vec::with_capacity(patches.patches.len());
    for p in &patches.patches {
        let d = t.gather_rows(depth, &p.pixels);
        let c = t.gather_rows(conf, &p.pixels);
        let q = t.constant(Mat::from_vec(p.pixels.len(), 1, p.pixels.iter().map(|&i| pseudo_depth[i]).collect()).expect("shape"));
        let a = t.scale(d, p.scale);
        let a = t.offset(a, p.shift);
        let r = t.sub(a, q);
        let r = t.abs(r);
        let r = t.mul(c, r);
        per.push(t.mean(r));
    }
    let all = t.concat_rows(&per);
    t.mean(all)
}

#[derive(Debug, Clone)]
pub struct Stage1Frame {
    pub pointmap: Pointmap,
    pub orig_pointmap: Pointmap,
    pub confidence: ConfidenceMap,
    pub pseudo_depth: DepthMap,
    pub mask: HumanMask,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl Stage1Frame {
    pub fn pred_depth(&self) -> DepthMap {
        let p = &self.pointmap;
        DepthMap { height: p.height, width: p.width, data: p.data.iter().map(|x| x[2]).collect() }
    }
}

fn valid_pixels(p: &Pointmap, o: &Pointmap) -> Vec<usize> {
    (0..p.len())
        .filter(|&i| p.data[i].iter().chain(&o.data[i]).all(|x| x.is_finite()))
        .collect()
}

/// Mean absolute per-coordinate deviation over pixels valid in both maps.
pub fn pointmap_regularizer(p: &Pointmap, orig: &Pointmap) -> Result<f64> {
    check_same(p.height, p.width, &[(orig.height, orig.width, "orig_pointmap")])?;
    let valid = valid_pixels(p, orig);
    if valid.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = valid.iter().map(|&i| (0..3).map(|c| (p.data[i][c] - orig.data[i][c]).abs()).sum::<f64>()).sum();
    Ok(s / (3 * valid.len()) as f64)
}

pub fn stage1_loss(frames: &[Stage1Frame], spec: &PatchSpec, w: &LossWeights) -> Result<LossReport> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("stage 1 needs at least one frame".into()));
    }
    let mut lh = 0.0;
    let mut lp = 0.0;
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut flags = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let r = local_human_loss(&f.pred_depth(), &f.confidence, &f.pseudo_depth, &f.mask, &f.intrinsics, spec, f.seed)?;
        let reg = pointmap_regularizer(&f.pointmap, &f.orig_pointmap)?;
        flags.extend(r.flags.iter().map(|m| format!("frame {i}: {m}")));
        per_frame.push(w.lambda_h * r.total + w.lambda_preg * reg);
        lh += r.total;
        lp += reg;
    }
    let n = frames.len() as f64;
    Ok(LossReport::from_terms(
        vec![term("local_human", w.lambda_h, lh / n), term("pointmap_reg", w.lambda_preg, lp / n)],
        per_frame,
        flags,
    ))
}

/// Tape form of the per-frame stage-1 term. `pointmap` is HW×3 and `conf`
/// HW×1; patch fits come from [`build_patches`] on the current values.
pub fn stage1_frame_tape(
    t: &mut Tape,
    frame: &Stage1Frame,
    patches: &PatchSet,
    pointmap: Var,
    conf: Var,
    w: &LossWeights,
) -> Var {
    let depth = t.slice_cols(pointmap, 2, 3);
    let lh = patch_loss_tape(t, patches, depth, conf, &frame.pseudo_depth.data);
    let valid = valid_pixels(&frame.pointmap, &frame.orig_pointmap);
    let lh = t.scale(lh, w.lambda_h);
    if valid.is_empty() {
        return lh;
    }
    let p = t.gather_rows(pointmap, &valid);
    let o = Mat::from_rows3(&valid.iter().map(|&i| frame.orig_pointmap.data[i]).collect::<Vec<_>>());
    let o = t.constant(o);
    let d = t.sub(p, o);
    let reg = t.l1_mean(d);
    let reg = t.scale(reg, w.lambda_preg);
    t.add(lh, reg)
}

// ---------------------------------------------------------------------------
// Stage 2: coarse body supervision

#[derive(Debug, Clone, PartialEq)]
pub struct BodyState {
    pub output: BodyOutput,
    pub params: BodyParams,
}

fn mean_abs_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).abs()).sum::<f64>()).sum();
    s / (3 * a.len().max(1)) as f64
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_bodies(pred: &BodyState, gt: &BodyState) -> Result<()> {
    let ok = pred.output.vertices.len() == gt.output.vertices.len()
        && pred.output.joints3d.len() == gt.output.joints3d.len()
        && pred.params.pose.len() == gt.params.pose.len()
        && pred.params.shape.len() == gt.params.shape.len();
    if !ok {
        return Err(Error::ShapeMismatch("predicted and ground-truth bodies differ in template dimensions".into()));
    }
    Ok(())
}

fn gt_joints2d(gt: &BodyState, k: &Intrinsics) -> Vec<Option<[f64; 2]>> {
    match &gt.output.joints2d {
        Some(j) => j.iter().map(|p| Some(*p)).collect(),
        None => gt.output.joints3d.iter().map(|j| k.project(j).ok()).collect(),
    }
}

/// Six-term body supervision. `pred.output` is the posed body as placed in
/// the scene; the translation term compares `s_opt · pred.params.translation`
/// with the ground truth.
pub fn coarse_smpl_loss(pred: &BodyState, gt: &BodyState, s_opt: f64, k: &Intrinsics, w: &LossWeights) -> Result<LossReport> {
    check_bodies(pred, gt)?;
    if !(s_opt > 0.0) {
        return Err(Error::InvalidInput("s_opt must be positive".into()));
    }
    let lv = mean_abs_diff(&pred.output.vertices, &gt.output.vertices);
    let lj = mean_abs_diff(&pred.output.joints3d, &gt.output.joints3d);
    let gt2 = gt_joints2d(gt, k);
    let mut flags = Vec::new();
    let (mut s2, mut n2) = (0.0, 0usize);
    for (j, (p, g)) in pred.output.joints3d.iter().zip(&gt2).enumerate() {
        match (k.project(p), g) {
            (Ok(u), Some(g)) => {
                s2 += (u[0] - g[0]).abs() + (u[1] - g[1]).abs();
                n2 += 2;
            }
            _ => flags.push(format!("joint {j} behind camera; 2D term skipped")),
        }
    }
    let l2 = if n2 > 0 { s2 / n2 as f64 } else { 0.0 };
    let lpose = sq_diff(&pred.params.flat_pose(), &gt.params.flat_pose());
    let lshape = sq_diff(&pred.params.shape, &gt.params.shape);
    let lt = sq_diff(&scale3(&pred.params.translation, s_opt), &gt.params.translation);
    let r = LossReport::from_terms(
        vec![
            term("vertices", w.lambda_v, lv),
            term("joints3d", w.lambda_j3d, lj),
            term("joints2d", w.lambda_j2d, l2),
            term("pose", w.lambda_pose, lpose),
            term("shape", w.lambda_shape, lshape),
            term("translation", w.lambda_trans, lt),
        ],
        Vec::new(),
        flags,
    );
    Ok(LossReport { per_frame: vec![r.total], ..r })
}

/// Projects the rows of an n×3 variable; rows with non-positive depth in
/// the current value must be excluded by the caller.
pub fn project_tape(t: &mut Tape, pts: Var, k: &Intrinsics) -> Var {
    let x = t.slice_cols(pts, 0, 1);
    let y = t.slice_cols(pts, 1, 2);
    let z = t.slice_cols(pts, 2, 3);
    let u = t.div(x, z);
    let u = t.scale(u, k.fx);
    let u = t.offset(u, k.cx);
    let v = t.div(y, z);
    let v = t.scale(v, k.fy);
    let v = t.offset(v, k.cy);
    t.concat_cols(&[u, v])
}

/// Tape form of [`coarse_smpl_loss`] for a body whose posed, untranslated
/// vertices and joints are constants and whose placement `translation`
/// (1×3, scene frame) is differentiable. `raw_translation` carries the
/// quantity compared by the translation term (`s_opt · t`).
#[allow(clippy::too_many_arguments)]
pub fn coarse_smpl_loss_tape(
    t: &mut Tape,
    posed_vertices: &[Vec3],
    posed_joints: &[Vec3],
    translation: Var,
    pred_params: &BodyParams,
    gt: &BodyState,
    k: &Intrinsics,
    w: &LossWeights,
) -> Var {
    let pv = t.constant(Mat::from_rows3(posed_vertices));
    let pv = t.add_row(pv, translation);
    let gv = t.constant(Mat::from_rows3(&gt.output.vertices));
    let dv = t.sub(pv, gv);
    let lv = t.l1_mean(dv);

    let pj = t.constant(Mat::from_rows3(posed_joints));
    let pj = t.add_row(pj, translation);
    let gj = t.constant(Mat::from_rows3(&gt.output.joints3d));
    let dj = t.sub(pj, gj);
    let lj = t.l1_mean(dj);

    let tv = t.value(translation).data.clone();
    let gt2 = gt_joints2d(gt, k);
    let keep: Vec<usize> = (0..posed_joints.len())
        .filter(|&j| posed_joints[j][2] + tv[2] > 0.0 && gt2[j].is_some())
        .collect();
    let mut total = {
        let a = t.scale(lv, w.lambda_v);
        let b = t.scale(lj, w.lambda_j3d);
        t.add(a, b)
    };
    if !keep.is_empty() {
        let sel = t.gather_rows(pj, &keep);
        let uv = project_tape(t, sel, k);
        let g: Vec<f64> = keep.iter().flat_map(|&j| gt2[j].expect("kept").to_vec()).collect();
        let g = t.constant(Mat::from_vec(keep.len(), 2, g).expect("shape"));
        let d = t.sub(uv, g);
        let l2 = t.l1_mean(d);
        let l2 = t.scale(l2, w.lambda_j2d);
        total = t.add(total, l2);
    }
    let lpose = sq_diff(&pred_params.flat_pose(), &gt.params.flat_pose());
    let lshape = sq_diff(&pred_params.shape, &gt.params.shape);
    let total = t.offset(total, w.lambda_pose * lpose + w.lambda_shape * lshape);
    let tg = t.constant(Mat::row(&gt.params.translation));
    let dt = t.sub(translation, tg);
    let lt = t.sq_l2(dt);
    let lt = t.scale(lt, w.lambda_trans);
    t.add(total, lt)
}

pub fn stage2_loss(frames: &[LossReport], s: f64, s_opt: f64, w: &LossWeights) -> Result<LossReport> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("stage 2 needs at least one frame".into()));
    }
    let per_frame: Vec<f64> = frames.iter().map(|r| r.total).collect();
    let smpl = per_frame.iter().sum::<f64>() / frames.len() as f64;
    let flags = frames
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.flags.iter().map(move |m| format!("frame {i}: {m}")))
        .collect();
    Ok(LossReport::from_terms(
        vec![term("smpl", w.lambda_smpl, smpl), term("scale", w.lambda_scale, (s - s_opt).abs())],
        per_frame,
        flags,
    ))
}

// ---------------------------------------------------------------------------
// Stage 3: fine alignment

/// `(s·P)[M]` in row-major pixel order. Non-finite points are dropped.
pub fn build_target_cloud(p: &Pointmap, s: f64, mask: &HumanMask) -> Result<Vec<Vec3>> {
    check_same(p.height, p.width, &[(mask.height, mask.width, "mask")])?;
    if !(s > 0.0) {
        return Err(Error::InvalidInput("scale must be positive".into()));
    }
    let out: Vec<Vec3> = p
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(x, &m)| m && x.iter().all(|c| c.is_finite()))
        .map(|(x, _)| scale3(x, s))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

fn mean_z(v: &[Vec3]) -> f64 {
    v.iter().map(|p| p[2]).sum::<f64>() / v.len() as f64
}

pub fn depth_order_reg(src: &[Vec3], tgt: &[Vec3]) -> Result<f64> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok((mean_z(tgt) - mean_z(src)).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Frame {
    /// Visible body vertices.
    pub src: Vec<Vec3>,
    pub tgt: Vec<Vec3>,
    pub joints2d_pred: Vec<[f64; 2]>,
    pub joints2d_pseudo: Vec<[f64; 2]>,
}

/// Mean over joints of the per-joint L1 pixel distance.
pub fn joints2d_l1(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch("2D joint counts differ".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn stage3_loss(frames: &[Stage3Frame], w: &LossWeights) -> Result<LossReport> {
    let mut flags = Vec::new();
    let (mut la, mut ld, mut lj) = (0.0, 0.0, 0.0);
    let mut per_frame = Vec::new();
    let mut used = 0usize;
    for (i, f) in frames.iter().enumerate() {
        if f.src.is_empty() {
            flags.push(format!("frame {i}: no visible vertices; skipped"));
            continue;
        }
        let a = chamfer_one_way(&f.src, &f.tgt)?;
        let d = depth_order_reg(&f.src, &f.tgt)?;
        let j = joints2d_l1(&f.joints2d_pred, &f.joints2d_pseudo)?;
        per_frame.push(w.lambda_align * a + w.lambda_depth * d + w.lambda_j2d * j);
        la += a;
        ld += d;
        lj += j;
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptySet);
    }
    let n = used as f64;
    Ok(LossReport::from_terms(
        vec![term("align", w.lambda_align, la / n), term("depth_order", w.lambda_depth, ld / n), term("joints2d", w.lambda_j2d, lj / n)],
        per_frame,
        flags,
    ))
}

/// Differentiable stage-3 term for one frame.
///
/// `src` is the n×3 visible-vertex variable and `tgt` the m×3 target cloud
/// variable; nearest neighbors are found on the current values and then
/// held fixed. `joints` (J×3) are projected and compared with `pseudo2d`.
pub fn stage3_frame_tape(t: &mut Tape, src: Var, tgt: Var, joints: Var, pseudo2d: &[[f64; 2]], k: &Intrinsics, w: &LossWeights) -> Result<Var> {
    let sv = t.value(src).to_rows3();
    let tv = t.value(tgt).to_rows3();
    let nn = nearest_indices(&sv, &tv)?;
    let matched = t.gather_rows(tgt, &nn);
    let d = t.sub(src, matched);
    let align = t.sq_l2(d);

    let sz = t.slice_cols(src, 2, 3);
    let sz = t.mean(sz);
    let tz = t.slice_cols(tgt, 2, 3);
    let tz = t.mean(tz);
    let gap = t.sub(tz, sz);
    let dreg = t.relu(gap);

    let jv = t.value(joints).to_rows3();
    let keep: Vec<usize> = (0..jv.len()).filter(|&j| jv[j][2] > 0.0).collect();
    let a = t.scale(align, w.lambda_align);
    let b = t.scale(dreg, w.lambda_depth);
    let mut total = t.add(a, b);
    if !keep.is_empty() {
        let sel = t.gather_rows(joints, &keep);
        let uv = project_tape(t, sel, k);
        let g: Vec<f64> = keep.iter().flat_map(|&j| pseudo2d[j].to_vec()).collect();
        let g = t.constant(Mat::from_vec(keep.len(), 2, g).expect("shape"));
        let diff = t.sub(uv, g);
        let l = t.l1_mean(diff);
        // l1_mean averages over 2 coordinates per joint
        let l = t.scale(l, 2.0 * w.lambda_j2d);
        total = t.add(total, l);
    }
    Ok(total)
}

pub fn valid_cloud(points: &[Vec3]) -> Vec<Vec3> {
    points.iter().copied().filter(is_valid_point).collect()
}
