//! Single-pass joint reconstruction from a sequence bundle, and its export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignnet::{AlignNet, TokenSequence};
use crate::autodiff::Mat;
use crate::body::{average_shape_with, forward_body, forward_body_with, visible_vertices, BodyOutput, BodyParams, BodyTemplate, DEFAULT_VISIBILITY_EPSILON};
use crate::error::{Error, Result};
use crate::geometry::{intrinsics_from_pointmap, intrinsics_from_pointmap_with, is_valid_point, scale3, Accumulation, CameraPose, Direction, Intrinsics, Vec3};
use crate::losses::{
    build_target_cloud, coarse_smpl_loss, stage1_loss, stage2_loss, stage3_loss, BodyState, LossReport, LossWeights, PatchSpec, Stage1Frame, Stage3Frame,
};
use crate::numfmt;
use crate::tensor_io::{BodyTrack, HumanMask, Pointmap, SequenceBundle, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructOptions {
    pub accumulation: Accumulation,
    pub visibility_epsilon: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { accumulation: Accumulation::F64, visibility_epsilon: DEFAULT_VISIBILITY_EPSILON }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub scale: f64,
    /// Metric camera-frame pointmaps `s·P_i`.
    pub pointmaps: Vec<Pointmap>,
    pub masks: Vec<HumanMask>,
    pub intrinsics: Vec<Intrinsics>,
    /// World-to-camera poses with metric translations, when the bundle has them.
    pub camera_poses: Option<Vec<CameraPose>>,
    /// Shared across frames.
    pub shape: Vec<f64>,
    pub params: Vec<BodyParams>,
    pub bodies: Vec<BodyOutput>,
    pub visibility: Vec<Vec<bool>>,
}

impl Reconstruction {
    pub fn frames(&self) -> usize {
        self.bodies.len()
    }
}

fn token_mat(t: &TokenMatrix) -> Mat {
    Mat { rows: t.rows, cols: t.dim, data: t.data.clone() }
}

/// Assembles AlignNet input from the bundle's token fields.
pub fn bundle_tokens(bundle: &SequenceBundle) -> Result<TokenSequence> {
    let hmr = bundle.hmr_tokens.as_ref().ok_or_else(|| Error::MissingField("hmr_tokens".into()))?;
    let geo = bundle.geo_tokens.as_ref().ok_or_else(|| Error::MissingField("geo_tokens".into()))?;
    if hmr.rows != bundle.frames() {
        return Err(Error::ShapeMismatch(format!("{} hmr tokens for {} frames", hmr.rows, bundle.frames())));
    }
    Ok(TokenSequence { geo: token_mat(geo), geo_frame: geo.frame.clone(), hmr: token_mat(hmr) })
}

pub fn reconstruct(bundle: &SequenceBundle, net: &AlignNet, tmpl: &BodyTemplate, opts: &ReconstructOptions) -> Result<Reconstruction> {
    bundle.validate()?;
    let n = bundle.frames();
    let (w, h) = (bundle.width(), bundle.height());
    let track = bundle.body_pred.as_ref().ok_or_else(|| Error::MissingField("body_pred".into()))?;
    if track.pose.len() != n || track.betas.len() != n {
        return Err(Error::ShapeMismatch(format!("body_pred has {} poses and {} shapes for {n} frames", track.pose.len(), track.betas.len())));
    }
    let tokens = bundle_tokens(bundle)?;
    let acc = opts.accumulation;
    let intrinsics = bundle
        .pointmaps
        .iter()
        .zip(&bundle.confidence)
        .map(|(p, c)| intrinsics_from_pointmap_with(p, Some(c), (w, h), acc))
        .collect::<Result<Vec<_>>>()?;
    let out = net.forward(&tokens)?;
    let s = out.scale;
    log::debug!("{n} frames, predicted scale {s:.6}");
    let shape = average_shape_with(&track.betas, acc)?;
    let mut params = Vec::with_capacity(n);
    let mut bodies = Vec::with_capacity(n);
    let mut visibility = Vec::with_capacity(n);
    for i in 0..n {
        let p = BodyParams::from_flat(&track.pose[i], &shape, out.translations[i])?;
        let b = forward_body_with(tmpl, &p, acc)?.with_projection(&intrinsics[i]);
        visibility.push(visible_vertices(&b.vertices, &tmpl.faces, &intrinsics[i], (w, h), opts.visibility_epsilon)?);
        params.push(p);
        bodies.push(b);
    }
    let pointmaps = bundle
        .pointmaps
        .iter()
        .map(|p| Pointmap { height: p.height, width: p.width, data: p.data.iter().map(|x| [s * x[0], s * x[1], s * x[2]]).collect() })
        .collect();
    let camera_poses = match &bundle.camera_poses {
        Some(poses) => Some(poses.iter().map(|e| CameraPose::from_arrays(e.rotation, e.translation).map(|c| c.scaled(s))).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    Ok(Reconstruction { scale: s, pointmaps, masks: bundle.masks.clone(), intrinsics, camera_poses, shape, params, bodies, visibility })
}

fn bundle_intrinsics(bundle: &SequenceBundle) -> Result<Vec<Intrinsics>> {
    let size = (bundle.width(), bundle.height());
    bundle.pointmaps.iter().zip(&bundle.confidence).map(|(p, c)| intrinsics_from_pointmap(p, Some(c), size)).collect()
}

fn track_params(track: &BodyTrack, name: &str, i: usize, translation: Vec3) -> Result<BodyParams> {
    let pose = track.pose.get(i).ok_or_else(|| Error::ShapeMismatch(format!("`{name}` has no pose for frame {i}")))?;
    let shape = track.betas.get(i).ok_or_else(|| Error::ShapeMismatch(format!("`{name}` has no shape for frame {i}")))?;
    BodyParams::from_flat(pose, shape, translation)
}

fn track_translation(track: &BodyTrack, name: &str, i: usize) -> Result<Vec3> {
    track.translation.get(i).copied().ok_or_else(|| Error::MissingField(format!("{name}.translation")))
}

/// Stage-1 inputs of every frame; frame `i` samples anchors with `seed + i`.
pub fn bundle_stage1_frames(bundle: &SequenceBundle, seed: u64) -> Result<Vec<Stage1Frame>> {
    bundle.validate()?;
    let pseudo = bundle.pseudo_depth.as_ref().ok_or_else(|| Error::MissingField("pseudo_depth".into()))?;
    let orig = bundle.orig_pointmaps.as_ref().ok_or_else(|| Error::MissingField("orig_pointmaps".into()))?;
    let ks = bundle_intrinsics(bundle)?;
    Ok((0..bundle.frames())
        .map(|i| Stage1Frame {
            pointmap: bundle.pointmaps[i].clone(),
            orig_pointmap: orig[i].clone(),
            confidence: bundle.confidence[i].clone(),
            pseudo_depth: pseudo[i].clone(),
            mask: bundle.masks[i].clone(),
            intrinsics: ks[i],
            seed: seed.wrapping_add(i as u64),
        })
        .collect())
}

pub fn bundle_stage1_loss(bundle: &SequenceBundle, spec: &PatchSpec, w: &LossWeights, seed: u64) -> Result<LossReport> {
    stage1_loss(&bundle_stage1_frames(bundle, seed)?, spec, w)
}

/// Stage-2 loss with predictions from `body_pred` (unit-frame translations
/// placed at `scale_opt · t`) against `body_gt` (metric translations).
pub fn bundle_stage2_loss(bundle: &SequenceBundle, tmpl: &BodyTemplate, w: &LossWeights) -> Result<LossReport> {
    bundle.validate()?;
    let pred = bundle.body_pred.as_ref().ok_or_else(|| Error::MissingField("body_pred".into()))?;
    let gt = bundle.body_gt.as_ref().ok_or_else(|| Error::MissingField("body_gt".into()))?;
    let s = bundle.scale.ok_or_else(|| Error::MissingField("scale".into()))?;
    let s_opt = bundle.scale_opt.ok_or_else(|| Error::MissingField("scale_opt".into()))?;
    let ks = bundle_intrinsics(bundle)?;
    let mut reports = Vec::with_capacity(bundle.frames());
    for (i, k) in ks.iter().enumerate() {
        let tp = track_translation(pred, "body_pred", i)?;
        let pp = track_params(pred, "body_pred", i, tp)?;
        let placed = BodyParams { translation: scale3(&tp, s_opt), ..pp.clone() };
        let po = forward_body(tmpl, &placed)?;
        let gp = track_params(gt, "body_gt", i, track_translation(gt, "body_gt", i)?)?;
        let go = forward_body(tmpl, &gp)?;
        let r = coarse_smpl_loss(
            &BodyState { output: po, params: pp },
            &BodyState { output: go, params: gp },
            s_opt,
            k,
            w,
        )?;
        reports.push(r);
    }
    stage2_loss(&reports, s, s_opt, w)
}

/// Stage-3 inputs: bodies from `body_pred` placed at `scale · t`, visible
/// vertices against the masked pointmap scaled by `scale`.
pub fn bundle_stage3_frames(bundle: &SequenceBundle, tmpl: &BodyTemplate, eps: f64) -> Result<(Vec<Stage3Frame>, Vec<String>)> {
    bundle.validate()?;
    let pred = bundle.body_pred.as_ref().ok_or_else(|| Error::MissingField("body_pred".into()))?;
    let kp = bundle.keypoints2d.as_ref().ok_or_else(|| Error::MissingField("keypoints2d".into()))?;
    let s = bundle.scale.ok_or_else(|| Error::MissingField("scale".into()))?;
    let ks = bundle_intrinsics(bundle)?;
    let size = (bundle.width(), bundle.height());
    let mut frames = Vec::with_capacity(bundle.frames());
    let mut flags = Vec::new();
    for (i, k) in ks.iter().enumerate() {
        let t = scale3(&track_translation(pred, "body_pred", i)?, s);
        let out = forward_body(tmpl, &track_params(pred, "body_pred", i, t)?)?;
        let vis = visible_vertices(&out.vertices, &tmpl.faces, k, size, eps)?;
        let src = out.vertices.iter().zip(&vis).filter(|(_, &v)| v).map(|(p, _)| *p).collect();
        let tgt = build_target_cloud(&bundle.pointmaps[i], s, &bundle.masks[i])?;
        let pseudo = kp.get(i).ok_or_else(|| Error::ShapeMismatch(format!("no keypoints for frame {i}")))?;
        if pseudo.len() != out.joints3d.len() {
            return Err(Error::ShapeMismatch(format!("frame {i} has {} keypoints for {} joints", pseudo.len(), out.joints3d.len())));
        }
        let (mut jp, mut jt) = (Vec::new(), Vec::new());
        for (j, (x, y)) in out.joints3d.iter().zip(pseudo).enumerate() {
            match k.project(x) {
                Ok(u) => {
                    jp.push(u);
                    jt.push(*y);
                }
                Err(_) => flags.push(format!("frame {i}: joint {j} behind camera; 2D term skipped")),
            }
        }
        frames.push(Stage3Frame { src, tgt, joints2d_pred: jp, joints2d_pseudo: jt });
    }
    Ok((frames, flags))
}

pub fn bundle_stage3_loss(bundle: &SequenceBundle, tmpl: &BodyTemplate, w: &LossWeights, eps: f64) -> Result<LossReport> {
    let (frames, flags) = bundle_stage3_frames(bundle, tmpl, eps)?;
    let mut r = stage3_loss(&frames, w)?;
    r.flags.extend(flags);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFrame {
    #[default]
    Camera,
    World,
}

#[derive(Debug, Serialize)]
struct FrameEntry {
    index: usize,
    scene: String,
    human: String,
    body: String,
    scene_points: usize,
    human_points: usize,
    visible_vertices: usize,
    intrinsics: Intrinsics,
    #[serde(skip_serializing_if = "Option::is_none")]
    camera_pose: Option<PoseJson>,
    pose: Vec<f64>,
    translation: Vec3,
}

#[derive(Debug, Serialize)]
struct PoseJson {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

#[derive(Debug, Serialize)]
struct ExportManifest {
    frames: usize,
    coordinate_frame: ExportFrame,
    scale: f64,
    shape: Vec<f64>,
    entries: Vec<FrameEntry>,
}

fn ply_header(out: &mut String, vertices: usize, faces: Option<usize>) {
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {vertices}");
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if let Some(f) = faces {
        let _ = writeln!(out, "element face {f}");
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
}

fn push_point(out: &mut String, p: &Vec3) {
    let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
}

pub fn point_cloud_ply(points: &[Vec3]) -> String {
    let mut s = String::new();
    ply_header(&mut s, points.len(), None);
    points.iter().for_each(|p| push_point(&mut s, p));
    s
}

pub fn mesh_ply(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    ply_header(&mut s, vertices.len(), Some(faces.len()));
    vertices.iter().for_each(|p| push_point(&mut s, p));
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Vertex positions of an ASCII PLY written by this module.
pub fn parse_ply_vertices(text: &str) -> Result<Vec<Vec3>> {
    let bad = |m: &str| Error::InvalidInput(format!("ply: {m}"));
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("vertex count"))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    (0..count)
        .map(|_| {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
            let v: Vec<f64> = line.split_whitespace().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("vertex"))?;
            if v.len() != 3 {
                return Err(bad("vertex needs 3 coordinates"));
            }
            Ok([v[0], v[1], v[2]])
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes per-frame scene, human and body PLY files plus `manifest.json`.
pub fn export_reconstruction(rec: &Reconstruction, tmpl: &BodyTemplate, out_dir: impl AsRef<Path>, frame: ExportFrame) -> Result<()> {
    let dir = out_dir.as_ref();
    let poses = match frame {
        ExportFrame::Camera => None,
        ExportFrame::World => Some(
            rec.camera_poses
                .as_ref()
                .ok_or_else(|| Error::MissingField("camera_poses".into()))?,
        ),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(rec.frames());
    for i in 0..rec.frames() {
        let place = |p: &Vec3| match poses {
            Some(e) => e[i].transform(p, Direction::CameraToWorld),
            None => *p,
        };
        let pm = &rec.pointmaps[i];
        let scene: Vec<Vec3> = pm.data.iter().filter(|p| is_valid_point(p)).map(place).collect();
        let human: Vec<Vec3> = pm.data.iter().zip(&rec.masks[i].data).filter(|(p, &m)| m && is_valid_point(p)).map(|(p, _)| place(p)).collect();
        let verts: Vec<Vec3> = rec.bodies[i].vertices.iter().map(place).collect();
        let names = [format!("frame_{i:04}_scene.ply"), format!("frame_{i:04}_human.ply"), format!("frame_{i:04}_body.ply")];
        write(&dir.join(&names[0]), &point_cloud_ply(&scene))?;
        write(&dir.join(&names[1]), &point_cloud_ply(&human))?;
        write(&dir.join(&names[2]), &mesh_ply(&verts, &tmpl.faces))?;
        let [scene_name, human_name, body_name] = names;
        entries.push(FrameEntry {
            index: i,
            scene: scene_name,
            human: human_name,
            body: body_name,
            scene_points: scene.len(),
            human_points: human.len(),
            visible_vertices: rec.visibility[i].iter().filter(|&&v| v).count(),
            intrinsics: rec.intrinsics[i],
            camera_pose: rec.camera_poses.as_ref().map(|e| {
                let r = e[i].rotation();
                let t = e[i].translation();
                PoseJson { rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]], translation: [t.x, t.y, t.z] }
            }),
            pose: rec.params[i].flat_pose(),
            translation: rec.params[i].translation,
        });
    }
    let m = ExportManifest { frames: rec.frames(), coordinate_frame: frame, scale: rec.scale, shape: rec.shape.clone(), entries };
    let mut text = numfmt::to_json(&m)?;
    text.push('\n');
    write(&dir.join("manifest.json"), &text)
}
