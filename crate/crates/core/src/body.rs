//! Parametric body model: shape blendshapes, kinematic chain, linear blend
//! skinning and joint regression, plus vertex visibility.
//!
//! The shipped template is a procedurally generated miniature (capsule limbs
//! on a 15-joint skeleton, ten shape directions). Any template with the same
//! fields can be loaded from disk; none of the downstream math depends on the
//! particular mesh.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add3, cross3, dot3, mat3_vec, rodrigues, scale3, sub3, Accumulation, Intrinsics, Vec3};
use crate::raster;
use crate::tensor_io::{read_tensor, write_tensor, TensorContainer, TensorData};

pub const NUM_BETAS: usize = 10;

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub joints_rest: Vec<Vec3>,
    pub parent: Vec<Option<usize>>,
    /// V rows of J weights.
    pub skinning_weights: Vec<Vec<f64>>,
    /// V × 3 × B, row-major.
    pub shape_dirs: Vec<f64>,
    pub num_betas: usize,
    /// J rows of V weights.
    pub joint_regressor: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Axis-angle per joint; entry 0 is the global orientation.
    pub pose: Vec<Vec3>,
    pub shape: Vec<f64>,
    pub translation: Vec3,
}

impl BodyParams {
    pub fn zero(tmpl: &BodyTemplate) -> Self {
        Self {
            pose: vec![[0.0; 3]; tmpl.num_joints()],
            shape: vec![0.0; tmpl.num_betas],
            translation: [0.0; 3],
        }
    }

    pub fn from_flat(pose: &[f64], shape: &[f64], translation: Vec3) -> Result<Self> {
        if pose.len() % 3 != 0 {
            return Err(Error::ShapeMismatch(format!("pose length {} is not a multiple of 3", pose.len())));
        }
        Ok(Self {
            pose: pose.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            shape: shape.to_vec(),
            translation,
        })
    }

    pub fn flat_pose(&self) -> Vec<f64> {
        self.pose.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyOutput {
    pub vertices: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
    pub joints2d: Option<Vec<[f64; 2]>>,
}

impl BodyOutput {
    /// Fills `joints2d` by projecting with `k`; joints behind the camera get NaN.
    pub fn with_projection(mut self, k: &Intrinsics) -> Self {
        self.joints2d = Some(
            self.joints3d
                .iter()
                .map(|j| k.project(j).unwrap_or([f64::NAN, f64::NAN]))
                .collect(),
        );
        self
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| add3(v, t)).collect(),
            joints3d: self.joints3d.iter().map(|j| add3(j, t)).collect(),
            joints2d: None,
        }
    }
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        add3(&mat3_vec(&self.rotation, x), &self.translation)
    }
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints_rest.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, j, b) = (self.num_vertices(), self.num_joints(), self.num_betas);
        if j == 0 || v == 0 {
            return Err(Error::InvalidInput("template needs at least one vertex and joint".into()));
        }
        if self.parent.len() != j || self.parent[0].is_some() {
            return Err(Error::InvalidInput("parent array must have J entries with joint 0 as root".into()));
        }
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return Err(Error::InvalidInput(format!("joint {i} must have a parent with a smaller index"))),
            }
        }
        if self.faces.iter().flatten().any(|&i| i >= v) {
            return Err(Error::InvalidInput("face references a missing vertex".into()));
        }
        if self.skinning_weights.len() != v || self.skinning_weights.iter().any(|r| r.len() != j) {
            return Err(Error::ShapeMismatch("skinning weights must be V×J".into()));
        }
        for (i, row) in self.skinning_weights.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidInput(format!("skinning row {i} is not a partition of unity (sum {s})")));
            }
        }
        if self.shape_dirs.len() != v * 3 * b {
            return Err(Error::ShapeMismatch("shape directions must be V×3×B".into()));
        }
        if self.joint_regressor.len() != j || self.joint_regressor.iter().any(|r| r.len() != v) {
            return Err(Error::ShapeMismatch("joint regressor must be J×V".into()));
        }
        Ok(())
    }

    pub fn shaped_vertices(&self, shape: &[f64]) -> Vec<Vec3> {
        let b = self.num_betas;
        self.template_vertices
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let mut out = *v;
                for (c, o) in out.iter_mut().enumerate() {
                    let dirs = &self.shape_dirs[(vi * 3 + c) * b..(vi * 3 + c + 1) * b];
                    for (d, beta) in dirs.iter().zip(shape) {
                        *o += d * beta;
                    }
                }
                out
            })
            .collect()
    }

    pub fn regress_joints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.regress_joints_with(vertices, Accumulation::F64)
    }

    pub fn regress_joints_with(&self, vertices: &[Vec3], acc: Accumulation) -> Vec<Vec3> {
        self.joint_regressor
            .iter()
            .map(|row| {
                let mut j = [0.0; 3];
                for (c, o) in j.iter_mut().enumerate() {
                    *o = acc.sum(
                        row.iter()
                            .zip(vertices)
                            .filter(|(w, _)| **w != 0.0)
                            .map(|(w, v)| w * v[c]),
                    );
                }
                j
            })
            .collect()
    }

    /// Height of the rest-shaped body along its longest bounding-box axis.
    pub fn body_scale(&self, shape: &[f64]) -> f64 {
        let v = self.shaped_vertices(shape);
        (0..3)
            .map(|c| {
                let lo = v.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// Per-joint world transforms along the kinematic chain.
pub fn kinematic_chain(parent: &[Option<usize>], joints: &[Vec3], pose: &[Vec3]) -> Vec<Rigid> {
    let mut g: Vec<Rigid> = Vec::with_capacity(joints.len());
    for j in 0..joints.len() {
        let r = rodrigues(&pose[j]);
        let t = match parent[j] {
            None => Rigid { rotation: r, translation: joints[j] },
            Some(p) => {
                let gp = g[p];
                Rigid {
                    rotation: mat_mul(&gp.rotation, &r),
                    translation: add3(&mat3_vec(&gp.rotation, &sub3(&joints[j], &joints[p])), &gp.translation),
                }
            }
        };
        g.push(t);
    }
    g
}

/// Linear blend skinning: each vertex is the weight-blended image of the
/// per-joint transforms.
pub fn linear_blend_skin(vertices: &[Vec3], weights: &[Vec<f64>], transforms: &[Rigid]) -> Vec<Vec3> {
    vertices
        .iter()
        .zip(weights)
        .map(|(v, w)| {
            let mut out = [0.0; 3];
            for (wj, tj) in w.iter().zip(transforms) {
                if *wj == 0.0 {
                    continue;
                }
                let p = tj.apply(v);
                out = add3(&out, &scale3(&p, *wj));
            }
            out
        })
        .collect()
}

pub fn forward_body(tmpl: &BodyTemplate, params: &BodyParams) -> Result<BodyOutput> {
    forward_body_with(tmpl, params, Accumulation::F64)
}

pub fn forward_body_with(tmpl: &BodyTemplate, params: &BodyParams, acc: Accumulation) -> Result<BodyOutput> {
    if params.pose.len() != tmpl.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, template has {}",
            params.pose.len(),
            tmpl.num_joints()
        )));
    }
    if params.shape.len() != tmpl.num_betas {
        return Err(Error::ShapeMismatch(format!(
            "shape has {} coefficients, template has {}",
            params.shape.len(),
            tmpl.num_betas
        )));
    }
    let all_finite = params.pose.iter().flatten().chain(&params.shape).chain(&params.translation).all(|x| x.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("body parameters".into()));
    }
    let shaped = tmpl.shaped_vertices(&params.shape);
    let joints = tmpl.regress_joints_with(&shaped, acc);
    let g = kinematic_chain(&tmpl.parent, &joints, &params.pose);
    let skin: Vec<Rigid> = g
        .iter()
        .zip(&joints)
        .map(|(gj, j)| Rigid {
            rotation: gj.rotation,
            translation: sub3(&gj.translation, &mat3_vec(&gj.rotation, j)),
        })
        .collect();
    let t = params.translation;
    let vertices = linear_blend_skin(&shaped, &tmpl.skinning_weights, &skin)
        .into_iter()
        .map(|v| add3(&v, &t))
        .collect();
    let joints3d = g.iter().map(|gj| add3(&gj.translation, &t)).collect();
    Ok(BodyOutput { vertices, joints3d, joints2d: None })
}

pub fn average_shape(betas: &[Vec<f64>]) -> Result<Vec<f64>> {
    average_shape_with(betas, Accumulation::F64)
}

pub fn average_shape_with(betas: &[Vec<f64>], acc: Accumulation) -> Result<Vec<f64>> {
    let first = betas.first().ok_or_else(|| Error::InvalidInput("no shape vectors to average".into()))?;
    if betas.iter().any(|b| b.len() != first.len()) {
        return Err(Error::ShapeMismatch("shape vectors differ in length".into()));
    }
    let n = betas.len() as f64;
    Ok((0..first.len()).map(|c| acc.sum(betas.iter().map(|b| b[c])) / n).collect())
}

/// Visibility by z-buffer: a vertex is visible iff it lies in front of the
/// camera, projects inside the image and is no deeper than the buffer at its
/// pixel plus `epsilon`. The mask is a selection only; it carries no gradient.
pub fn visible_vertices(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    k: &Intrinsics,
    image_size: (usize, usize),
    epsilon: f64,
) -> Result<Vec<bool>> {
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("zero image size".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("visibility epsilon must be positive".into()));
    }
    let buf = raster::rasterize(vertices, faces, k, w, h);
    Ok(vertices
        .iter()
        .map(|v| {
            if !(v[2] > 0.0) {
                return false;
            }
            let [u, vv] = k.project_unchecked(v);
            if !(u >= 0.0 && vv >= 0.0 && u < w as f64 && vv < h as f64) {
                return false;
            }
            v[2] <= buf.at(u as usize, vv as usize) + epsilon
        })
        .collect())
}

pub const DEFAULT_VISIBILITY_EPSILON: f64 = 1e-3;

pub fn visible_body_vertices(out: &BodyOutput, tmpl: &BodyTemplate, k: &Intrinsics, image_size: (usize, usize), epsilon: f64) -> Result<Vec<bool>> {
    visible_vertices(&out.vertices, &tmpl.faces, k, image_size, epsilon)
}

// ---------------------------------------------------------------------------
// Procedural miniature template

struct Bone {
    from: usize,
    to: usize,
    radius: [f64; 2],
    rings: usize,
}

pub const JOINT_NAMES: [&str; 15] = [
    "pelvis", "chest", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist", "l_hip",
    "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];

const SIDES: usize = 8;

const REST_JOINTS: [Vec3; 15] = [
    [0.0, 0.95, 0.0],
    [0.0, 1.35, 0.0],
    [0.0, 1.68, 0.0],
    [0.19, 1.42, 0.0],
    [0.26, 1.16, 0.0],
    [0.31, 0.90, 0.02],
    [-0.19, 1.42, 0.0],
    [-0.26, 1.16, 0.0],
    [-0.31, 0.90, 0.02],
    [0.10, 0.90, 0.0],
    [0.11, 0.50, 0.01],
    [0.12, 0.08, 0.0],
    [-0.10, 0.90, 0.0],
    [-0.11, 0.50, 0.01],
    [-0.12, 0.08, 0.0],
];

/// Builds the shipped miniature template: y up, front facing +z, feet at y ≈ 0.
pub fn procedural_template() -> BodyTemplate {
    let joints_rest: Vec<Vec3> = REST_JOINTS.to_vec();
    let parent = vec![None, Some(0), Some(1), Some(1), Some(3), Some(4), Some(1), Some(6), Some(7), Some(0), Some(9), Some(10), Some(0), Some(12), Some(13)];
    let bones = [
        Bone { from: 0, to: 1, radius: [0.15, 0.16], rings: 5 },
        Bone { from: 1, to: 2, radius: [0.07, 0.10], rings: 5 },
        Bone { from: 3, to: 4, radius: [0.055, 0.045], rings: 4 },
        Bone { from: 4, to: 5, radius: [0.045, 0.035], rings: 4 },
        Bone { from: 6, to: 7, radius: [0.055, 0.045], rings: 4 },
        Bone { from: 7, to: 8, radius: [0.045, 0.035], rings: 4 },
        Bone { from: 9, to: 10, radius: [0.08, 0.06], rings: 5 },
        Bone { from: 10, to: 11, radius: [0.06, 0.045], rings: 5 },
        Bone { from: 12, to: 13, radius: [0.08, 0.06], rings: 5 },
        Bone { from: 13, to: 14, radius: [0.06, 0.045], rings: 5 },
    ];
    let nj = joints_rest.len();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut weights: Vec<Vec<f64>> = Vec::new();
    // per vertex: (bone index, fraction along bone, radial unit vector)
    let mut meta: Vec<(usize, f64, Vec3)> = Vec::new();
    // joint -> ring vertex indices centered on it
    let mut joint_rings: Vec<Option<Vec<usize>>> = vec![None; nj];

    for (bi, b) in bones.iter().enumerate() {
        let a = joints_rest[b.from];
        let c = joints_rest[b.to];
        let axis = sub3(&c, &a);
        let len = dot3(&axis, &axis).sqrt();
        let dir = scale3(&axis, 1.0 / len);
        let helper = if dir[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let mut e1 = cross3(&helper, &dir);
        let n1 = dot3(&e1, &e1).sqrt();
        e1 = scale3(&e1, 1.0 / n1);
        let e2 = cross3(&dir, &e1);
        let base = vertices.len();
        for ring in 0..b.rings {
            let alpha = ring as f64 / (b.rings - 1) as f64;
            let center = add3(&a, &scale3(&axis, alpha));
            let r = b.radius[0] + (b.radius[1] - b.radius[0]) * alpha;
            let mut ring_idx = Vec::with_capacity(SIDES);
            for s in 0..SIDES {
                let phi = 2.0 * PI * s as f64 / SIDES as f64;
                let radial = add3(&scale3(&e1, phi.cos()), &scale3(&e2, phi.sin()));
                ring_idx.push(vertices.len());
                vertices.push(add3(&center, &scale3(&radial, r)));
                meta.push((bi, alpha, radial));
                weights.push(bone_weights(nj, &parent, b.from, b.to, alpha));
            }
            if ring == 0 && joint_rings[b.from].is_none() {
                joint_rings[b.from] = Some(ring_idx.clone());
            }
            if ring == b.rings - 1 && joint_rings[b.to].is_none() {
                joint_rings[b.to] = Some(ring_idx);
            }
        }
        for ring in 0..b.rings - 1 {
            for s in 0..SIDES {
                let i0 = base + ring * SIDES + s;
                let i1 = base + ring * SIDES + (s + 1) % SIDES;
                let j0 = i0 + SIDES;
                let j1 = i1 + SIDES;
                faces.push([i0, i1, j1]);
                faces.push([i0, j1, j0]);
            }
        }
        // caps
        for (ring, center) in [(0usize, a), (b.rings - 1, c)] {
            let ci = vertices.len();
            vertices.push(center);
            meta.push((bi, if ring == 0 { 0.0 } else { 1.0 }, [0.0; 3]));
            weights.push(bone_weights(nj, &parent, b.from, b.to, if ring == 0 { 0.0 } else { 1.0 }));
            for s in 0..SIDES {
                let i0 = base + ring * SIDES + s;
                let i1 = base + ring * SIDES + (s + 1) % SIDES;
                if ring == 0 {
                    faces.push([ci, i1, i0]);
                } else {
                    faces.push([ci, i0, i1]);
                }
            }
        }
    }

    // every joint is the mean of one ring centered on it
    let nv = vertices.len();
    let mut regressor = vec![vec![0.0; nv]; nj];
    for j in 0..nj {
        let ring = joint_rings[j].clone().unwrap_or_else(|| {
            panic!("joint {} has no ring", JOINT_NAMES[j]);
        });
        for &vi in &ring {
            regressor[j][vi] = 1.0 / ring.len() as f64;
        }
    }

    let b = NUM_BETAS;
    let mut shape_dirs = vec![0.0; nv * 3 * b];
    for (vi, &(bi, alpha, radial)) in meta.iter().enumerate() {
        let v = vertices[vi];
        let mut dirs: [Vec3; NUM_BETAS] = [[0.0; 3]; NUM_BETAS];
        // stature: uniform scaling about the origin on the ground plane
        dirs[0] = scale3(&v, 0.05);
        // girth
        dirs[1] = scale3(&radial, 0.02);
        // torso girth
        if bi <= 1 {
            dirs[2] = scale3(&radial, 0.03);
        }
        // arm length
        if (2..=5).contains(&bi) {
            let shoulder = if bi <= 3 { joints_rest[3] } else { joints_rest[6] };
            dirs[3] = scale3(&sub3(&v, &shoulder), 0.06);
        }
        // leg length: move vertices along the limb away from the hip
        if bi >= 6 {
            let hip = if bi <= 7 { joints_rest[9] } else { joints_rest[12] };
            dirs[4] = scale3(&sub3(&v, &hip), 0.06);
        }
        // shoulder width
        if (2..=5).contains(&bi) {
            dirs[5] = [0.02 * v[0].signum(), 0.0, 0.0];
        }
        // hip width
        if bi >= 6 {
            dirs[6] = [0.015 * v[0].signum(), 0.0, 0.0];
        }
        // head size
        if bi == 1 {
            dirs[7] = scale3(&radial, 0.015 * alpha);
        }
        // low-frequency surface fields
        dirs[8] = scale3(&radial, 0.008 * (3.0 * v[1]).sin());
        dirs[9] = scale3(&radial, 0.008 * (2.0 * v[1] + 1.0).cos() * (alpha - 0.5));
        for (bj, d) in dirs.iter().enumerate() {
            for c in 0..3 {
                shape_dirs[(vi * 3 + c) * b + bj] = d[c];
            }
        }
    }

    let mut tmpl = BodyTemplate {
        template_vertices: vertices,
        faces,
        joints_rest: Vec::new(),
        parent,
        skinning_weights: weights,
        shape_dirs,
        num_betas: b,
        joint_regressor: regressor,
    };
    tmpl.joints_rest = tmpl.regress_joints(&tmpl.template_vertices);
    tmpl
}

/// Weights for a vertex at fraction `alpha` along the bone `from → to`:
/// driven by `from`, blended toward the parent of `from` near the start and
/// toward `to` near the end.
fn bone_weights(nj: usize, parent: &[Option<usize>], from: usize, to: usize, alpha: f64) -> Vec<f64> {
    let mut w = vec![0.0; nj];
    let toward_end = if alpha > 0.75 { 0.5 * (alpha - 0.75) / 0.25 } else { 0.0 };
    let toward_parent = match parent[from] {
        Some(_) if alpha < 0.25 => 0.5 * (0.25 - alpha) / 0.25,
        _ => 0.0,
    };
    w[from] = 1.0 - toward_end - toward_parent;
    w[to] += toward_end;
    if let Some(p) = parent[from] {
        w[p] += toward_parent;
    }
    w
}

// ---------------------------------------------------------------------------
// Serialization: a directory of tensor containers plus manifest.json

#[derive(Debug, Serialize, Deserialize)]
struct TemplateManifest {
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "J")]
    j: usize,
    #[serde(rename = "B")]
    b: usize,
    parent: Vec<i64>,
    faces: String,
    template_vertices: String,
    joints_rest: String,
    skinning_weights: String,
    shape_dirs: String,
    joint_regressor: String,
}

pub fn save_template(tmpl: &BodyTemplate, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (v, j, b) = (tmpl.num_vertices(), tmpl.num_joints(), tmpl.num_betas);
    let flat = |rows: &[Vec3]| rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>();
    let put = |c: TensorContainer| -> Result<String> {
        let file = format!("{}.tc", c.name);
        write_tensor(&c, dir.join(&file))?;
        Ok(file)
    };
    let manifest = TemplateManifest {
        v,
        j,
        b,
        parent: tmpl.parent.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
        faces: put(TensorContainer::new(
            "faces",
            vec![tmpl.faces.len(), 3],
            TensorData::I64(tmpl.faces.iter().flat_map(|f| f.iter().map(|&i| i as i64)).collect()),
        )?)?,
        template_vertices: put(TensorContainer::from_f64("template_vertices", vec![v, 3], &flat(&tmpl.template_vertices))?)?,
        joints_rest: put(TensorContainer::from_f64("joints_rest", vec![j, 3], &flat(&tmpl.joints_rest))?)?,
        skinning_weights: put(TensorContainer::from_f64(
            "skinning_weights",
            vec![v, j],
            &tmpl.skinning_weights.concat(),
        )?)?,
        shape_dirs: put(TensorContainer::from_f64("shape_dirs", vec![v, 3, b], &tmpl.shape_dirs)?)?,
        joint_regressor: put(TensorContainer::from_f64("joint_regressor", vec![j, v], &tmpl.joint_regressor.concat())?)?,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Loads a template directory. Stored weights are float32, so skinning and
/// regressor rows are renormalized in f64 after loading.
pub fn load_template(dir: impl AsRef<Path>) -> Result<BodyTemplate> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: TemplateManifest = serde_json::from_str(&text)?;
    let expect = |c: &TensorContainer, shape: &[usize]| -> Result<Vec<f64>> {
        if c.shape != shape {
            return Err(Error::ShapeMismatch(format!("`{}` has shape {:?}, expected {:?}", c.name, c.shape, shape)));
        }
        Ok(c.to_f64())
    };
    let rows3 = |v: Vec<f64>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let faces_c = read_tensor(dir.join(&m.faces))?;
    let nf = faces_c.shape.first().copied().unwrap_or(0);
    let faces: Vec<[usize; 3]> = match &faces_c.data {
        TensorData::I64(d) if faces_c.shape == [nf, 3] => d
            .chunks_exact(3)
            .map(|c| {
                let ok = c.iter().all(|&i| i >= 0);
                if ok {
                    Ok([c[0] as usize, c[1] as usize, c[2] as usize])
                } else {
                    Err(Error::InvalidInput("negative face index".into()))
                }
            })
            .collect::<Result<_>>()?,
        _ => return Err(Error::InvalidInput("faces must be an int64 [F,3] tensor".into())),
    };
    let normalize = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                if s > 0.0 {
                    r.iter().map(|w| w / s).collect()
                } else {
                    r
                }
            })
            .collect()
    };
    let skin = expect(&read_tensor(dir.join(&m.skinning_weights))?, &[m.v, m.j])?;
    let reg = expect(&read_tensor(dir.join(&m.joint_regressor))?, &[m.j, m.v])?;
    let tmpl = BodyTemplate {
        template_vertices: rows3(expect(&read_tensor(dir.join(&m.template_vertices))?, &[m.v, 3])?),
        faces,
        joints_rest: rows3(expect(&read_tensor(dir.join(&m.joints_rest))?, &[m.j, 3])?),
        parent: m.parent.iter().map(|&p| (p >= 0).then_some(p as usize)).collect(),
        skinning_weights: normalize(skin.chunks_exact(m.j.max(1)).map(|c| c.iter().map(|w| w.max(0.0)).collect()).collect()),
        shape_dirs: expect(&read_tensor(dir.join(&m.shape_dirs))?, &[m.v, 3, m.b])?,
        num_betas: m.b,
        joint_regressor: normalize(reg.chunks_exact(m.v.max(1)).map(|c| c.to_vec()).collect()),
    };
    tmpl.validate()?;
    Ok(tmpl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn procedural_template_is_valid() {
        let t = procedural_template();
        t.validate().unwrap();
        assert_eq!(t.num_betas, 10);
        assert_eq!(t.num_joints(), 15);
        assert!(t.num_vertices() > 300);
        for (j, r) in t.joints_rest.iter().zip(REST_JOINTS.iter()) {
            assert!(dist2(j, r).sqrt() < 1e-12);
        }
    }

    #[test]
    fn rest_pose_identity() {
        let t = procedural_template();
        let out = forward_body(&t, &BodyParams::zero(&t)).unwrap();
        for (a, b) in out.vertices.iter().zip(&t.template_vertices) {
            assert!(dist2(a, b).sqrt() <= 1e-12);
        }
    }

    #[test]
    fn pure_translation() {
        let t = procedural_template();
        let mut p = BodyParams::zero(&t);
        p.translation = [1.0, 2.0, 3.0];
        let out = forward_body(&t, &p).unwrap();
        for (a, b) in out.vertices.iter().zip(&t.template_vertices) {
            assert!(dist2(a, &add3(b, &[1.0, 2.0, 3.0])).sqrt() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_about_root_is_rigid() {
        let t = procedural_template();
        let mut p = BodyParams::zero(&t);
        p.pose[0] = [0.0, 0.0, PI / 2.0];
        let out = forward_body(&t, &p).unwrap();
        let root = t.joints_rest[0];
        let r = rodrigues(&p.pose[0]);
        for (a, b) in out.vertices.iter().zip(&t.template_vertices) {
            let expect = add3(&mat3_vec(&r, &sub3(b, &root)), &root);
            assert!(dist2(a, &expect).sqrt() < 1e-12);
        }
        for i in (0..t.num_vertices()).step_by(7) {
            for j in (0..t.num_vertices()).step_by(11) {
                let d0 = dist2(&t.template_vertices[i], &t.template_vertices[j]).sqrt();
                let d1 = dist2(&out.vertices[i], &out.vertices[j]).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    fn chain_template() -> BodyTemplate {
        // three joints along +x, one vertex block per segment
        let joints = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let verts = vec![
            [0.0, 0.1, 0.0],
            [0.0, -0.1, 0.0],
            [0.5, 0.1, 0.0],
            [1.0, 0.1, 0.0],
            [1.0, -0.1, 0.0],
            [1.5, 0.1, 0.2],
            [2.0, 0.1, 0.0],
            [2.0, -0.1, 0.0],
        ];
        let weights = vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ];
        let mut reg = vec![vec![0.0; 8]; 3];
        reg[0][0] = 0.5;
        reg[0][1] = 0.5;
        reg[1][3] = 0.5;
        reg[1][4] = 0.5;
        reg[2][6] = 0.5;
        reg[2][7] = 0.5;
        let t = BodyTemplate {
            template_vertices: verts,
            faces: vec![[0, 2, 1]],
            joints_rest: joints,
            parent: vec![None, Some(0), Some(1)],
            skinning_weights: weights,
            shape_dirs: vec![0.0; 8 * 3],
            num_betas: 1,
            joint_regressor: reg,
        };
        t.validate().unwrap();
        t
    }

    #[test]
    fn elbow_bend_matches_hand_rotation() {
        let t = chain_template();
        let mut p = BodyParams::zero(&t);
        p.pose[1] = [0.0, 0.0, PI / 4.0];
        let out = forward_body(&t, &p).unwrap();
        let (c, s) = ((PI / 4.0).cos(), (PI / 4.0).sin());
        // rotation about z through joint 1 at (1, 0, 0)
        let rot = |v: Vec3| [1.0 + c * (v[0] - 1.0) - s * v[1], s * (v[0] - 1.0) + c * v[1], v[2]];
        for i in 3..6 {
            assert!(dist2(&out.vertices[i], &rot(t.template_vertices[i])).sqrt() < 1e-9);
        }
        for i in 0..3 {
            assert!(dist2(&out.vertices[i], &t.template_vertices[i]).sqrt() < 1e-12);
        }
        // the child joint rides along with the bent segment
        assert!(dist2(&out.joints3d[2], &[1.0 + c, s, 0.0]).sqrt() < 1e-9);
        assert!(dist2(&out.vertices[6], &rot(t.template_vertices[6])).sqrt() < 1e-9);
    }

    #[test]
    fn partition_of_unity_transports_rigidly() {
        let t = procedural_template();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let g = Rigid { rotation: rodrigues(&w), translation: [0.3, -0.7, 2.0] };
        let all = vec![g; t.num_joints()];
        let out = linear_blend_skin(&t.template_vertices, &t.skinning_weights, &all);
        for (a, v) in out.iter().zip(&t.template_vertices) {
            assert!(dist2(a, &g.apply(v)).sqrt() < 1e-9);
        }
    }

    #[test]
    fn shape_changes_joints() {
        let t = procedural_template();
        let mut p = BodyParams::zero(&t);
        p.shape[0] = 2.0;
        let out = forward_body(&t, &p).unwrap();
        // stature direction scales everything by 1.1 about the origin
        assert!((out.joints3d[2][1] - t.joints_rest[2][1] * 1.1).abs() < 1e-9);
    }

    #[test]
    fn average_shape_cases() {
        let b = vec![0.5, -1.0, 2.0];
        assert_eq!(average_shape(&[b.clone(), b.clone()]).unwrap(), b);
        let neg: Vec<f64> = b.iter().map(|x| -x).collect();
        assert!(average_shape(&[b.clone(), neg]).unwrap().iter().all(|&x| x == 0.0));
        assert!(average_shape(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let betas: Vec<Vec<f64>> = (0..5).map(|_| (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let avg = average_shape(&betas).unwrap();
        for c in 0..10 {
            // Kahan summation as an independent reference
            let (mut s, mut comp) = (0.0f64, 0.0f64);
            for b in &betas {
                let y = b[c] - comp;
                let t = s + y;
                comp = (t - s) - y;
                s = t;
            }
            assert!((avg[c] - s / 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn visibility_front_triangle() {
        let k = Intrinsics::centered(50.0, 64, 64).unwrap();
        let v = vec![[-0.5, -0.5, 3.0], [0.5, -0.5, 3.0], [0.0, 0.5, 3.0]];
        let m = visible_vertices(&v, &[[0, 1, 2]], &k, (64, 64), 1e-3).unwrap();
        assert_eq!(m, vec![true; 3]);
    }

    #[test]
    fn visibility_occlusion() {
        let k = Intrinsics::centered(50.0, 64, 64).unwrap();
        let v = vec![
            [-0.5, -0.5, 2.0],
            [0.5, -0.5, 2.0],
            [0.0, 0.5, 2.0],
            [-0.2, -0.2, 4.0],
            [0.2, -0.2, 4.0],
            [0.0, 0.2, 4.0],
        ];
        let m = visible_vertices(&v, &[[0, 1, 2], [3, 4, 5]], &k, (64, 64), 1e-3).unwrap();
        assert_eq!(m, vec![true, true, true, false, false, false]);
    }

    #[test]
    fn visibility_behind_camera_and_errors() {
        let k = Intrinsics::centered(50.0, 64, 64).unwrap();
        let v = vec![[0.0, 0.0, -1.0], [0.1, 0.0, 2.0], [0.0, 0.1, 2.0]];
        let m = visible_vertices(&v, &[[0, 1, 2]], &k, (64, 64), 1e-3).unwrap();
        assert!(!m[0]);
        assert!(visible_vertices(&v, &[], &k, (0, 64), 1e-3).is_err());
    }

    #[test]
    fn template_roundtrip_through_disk() {
        let t = procedural_template();
        let dir = tempfile::tempdir().unwrap();
        save_template(&t, dir.path()).unwrap();
        let back = load_template(dir.path()).unwrap();
        assert_eq!(back.faces, t.faces);
        assert_eq!(back.parent, t.parent);
        for (a, b) in back.template_vertices.iter().zip(&t.template_vertices) {
            assert!(dist2(a, b).sqrt() < 1e-6);
        }
    }
}
