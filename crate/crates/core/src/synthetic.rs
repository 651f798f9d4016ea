//! Procedural oracle worlds for exercising the alignment stages.
//!
//! A world is a short clip of a posed body standing in front of a wall on a
//! floor plane. Ground truth is known exactly: the metric scene scale s*
//! (median metric depth), per-frame body parameters and translations. The
//! stored pointmaps are at unit scale (`metric / s*`), and the backbone
//! tokens are fixed random linear encodings of the ground-truth state.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignnet::{AlignOutput, TokenSequence};
use crate::autodiff::Mat;
use crate::body::{forward_body, BodyOutput, BodyParams, BodyTemplate};
use crate::error::{Error, Result};
use crate::geometry::{unproject, Intrinsics, Vec3};
use crate::losses::BodyState;
use crate::raster::{rasterize, NO_FACE};
use crate::tensor_io::{BodyTrack, DepthMap, HumanMask, Pointmap, Raster, SequenceBundle, TokenMatrix};

/// Seed of the encoder shared by all simulated worlds.
pub const SIM_ENCODER_SEED: u64 = 0x51_4d_45_4e;

const GEO_FEATURES: usize = 7;
const HMR_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub geo_tokens_per_frame: usize,
    pub geo_dim: usize,
    pub hmr_dim: usize,
    pub token_noise: f64,
    pub keypoint_noise_px: f64,
    pub pose_noise: f64,
    pub shape_noise: f64,
    /// Relative size of the encoder perturbation in the real domain.
    pub domain_gap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 6,
            width: 80,
            height: 60,
            geo_tokens_per_frame: 8,
            geo_dim: 16,
            hmr_dim: 16,
            token_noise: 0.02,
            keypoint_noise_px: 1.0,
            pose_noise: 0.03,
            shape_noise: 0.05,
            domain_gap: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sim,
    Real,
}

/// Fixed linear maps from ground-truth state to tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// One `geo_dim × GEO_FEATURES` map per token slot.
    pub geo: Vec<Mat>,
    pub hmr: Mat,
}

fn gauss_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Mat {
    let n = Normal::new(0.0, std).expect("valid std");
    Mat { rows: r, cols: c, data: (0..r * c).map(|_| n.sample(rng)).collect() }
}

impl Encoder {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = (0..cfg.geo_tokens_per_frame)
            .map(|_| gauss_mat(&mut rng, cfg.geo_dim, GEO_FEATURES, 1.0 / (GEO_FEATURES as f64).sqrt()))
            .collect();
        let hmr = gauss_mat(&mut rng, cfg.hmr_dim, HMR_FEATURES, 1.0 / (HMR_FEATURES as f64).sqrt());
        Self { geo, hmr }
    }

    pub fn sim(cfg: &WorldConfig) -> Self {
        Self::new(cfg, SIM_ENCODER_SEED)
    }

    /// The simulated encoder with every entry perturbed by `amount` relative noise.
    pub fn perturbed(&self, amount: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |m: &Mat| {
            let d = gauss_mat(&mut rng, m.rows, m.cols, amount / (m.cols as f64).sqrt());
            Mat { rows: m.rows, cols: m.cols, data: m.data.iter().zip(&d.data).map(|(a, b)| a + b).collect() }
        };
        Self { geo: self.geo.iter().map(&mut jitter).collect(), hmr: jitter(&self.hmr) }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    /// Metric ground truth, placed in the camera frame.
    pub gt: BodyState,
    /// Body-branch estimate: pose and averaged shape, zero translation.
    pub pred_params: BodyParams,
    /// The estimate posed at the origin.
    pub pred_posed: BodyOutput,
    /// Unit-scale pointmap.
    pub pointmap: Pointmap,
    pub mask: HumanMask,
    /// Noisy 2D keypoints standing in for pseudo-annotations.
    pub keypoints2d: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub domain: Domain,
    pub scale: f64,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<SyntheticFrame>,
    pub tokens: TokenSequence,
    pub body_scale: f64,
    pub camera_height: f64,
    pub wall_depth: f64,
}

impl SyntheticWorld {
    pub fn gt_translations(&self) -> Vec<Vec3> {
        self.frames.iter().map(|f| f.gt.params.translation).collect()
    }
}

fn walking_pose(rng: &mut ChaCha8Rng, tmpl: &BodyTemplate, phase: f64, jitter: &[Vec3]) -> Vec<Vec3> {
    let mut pose = vec![[0.0; 3]; tmpl.num_joints()];
    pose[0] = [PI + jitter[0][0] * 0.2, jitter[0][1] * 0.3, jitter[0][2] * 0.1];
    let swing = 0.35 * phase.sin();
    // hips and shoulders swing in opposition about the lateral axis
    pose[9] = [swing, 0.0, 0.0];
    pose[12] = [-swing, 0.0, 0.0];
    pose[10] = [-0.2 - 0.2 * phase.cos().max(0.0), 0.0, 0.0];
    pose[13] = [-0.2 - 0.2 * (-phase.cos()).max(0.0), 0.0, 0.0];
    pose[3] = [-swing, 0.0, 0.25];
    pose[6] = [swing, 0.0, -0.25];
    pose[4] = [0.3, 0.0, 0.0];
    pose[7] = [0.3, 0.0, 0.0];
    for (j, p) in pose.iter_mut().enumerate().skip(1) {
        for c in 0..3 {
            p[c] += jitter[j][c] * 0.1 + rng.random_range(-0.02..0.02);
        }
    }
    pose
}

fn background_depth(k: &Intrinsics, row: usize, wall: f64, camera_height: f64) -> f64 {
    let dy = (row as f64 + 0.5 - k.cy) / k.fy;
    let floor = if dy > 1e-9 { camera_height / dy } else { f64::INFINITY };
    wall.min(floor)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn geo_features(s: f64, t: &Vec3, wall: f64, cam_h: f64) -> [f64; GEO_FEATURES] {
    [s.ln(), t[2] / s, t[0] / s, t[1] / s, wall / s, cam_h / s, 1.0]
}

fn hmr_features(t: &Vec3, pose: &[Vec3]) -> [f64; HMR_FEATURES] {
    [t[0] / t[2], t[1] / t[2], t[2].ln(), pose[9][0], 1.0]
}

fn encode(m: &Mat, f: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m.rows)
        .map(|r| (0..m.cols).map(|c| m.at(r, c) * f[c]).sum::<f64>() + noise.sample(rng))
        .collect()
}

/// Builds the world for `seed`. `encoder` supplies the token maps; the sim
/// and real domains differ only in which encoder is passed.
pub fn generate_world(tmpl: &BodyTemplate, cfg: &WorldConfig, seed: u64, domain: Domain, encoder: &Encoder) -> Result<SyntheticWorld> {
    if cfg.frames == 0 || cfg.width < 8 || cfg.height < 8 || cfg.geo_tokens_per_frame == 0 {
        return Err(Error::InvalidInput("world needs frames, tokens and an image of at least 8x8".into()));
    }
    if encoder.geo.len() != cfg.geo_tokens_per_frame || encoder.hmr.rows != cfg.hmr_dim {
        return Err(Error::ShapeMismatch("encoder does not match the world configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let focal = rng.random_range(60.0..90.0) * w as f64 / 80.0;
    let k = Intrinsics::centered(focal, w, h)?;
    let cam_h = rng.random_range(1.2..1.6);
    let shape: Vec<f64> = (0..tmpl.num_betas).map(|_| rng.random_range(-1.0..1.0)).collect();
    let jitter: Vec<Vec3> = (0..tmpl.num_joints())
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let z0 = rng.random_range(3.0..5.0);
    let x0 = rng.random_range(-0.15..0.15) * z0;
    let vel = [rng.random_range(-0.08..0.08), 0.0, rng.random_range(-0.1..0.1)];
    let phase0 = rng.random_range(0.0..2.0 * PI);
    // the posed feet sit about 1.82 below the pelvis after the upright flip
    let base_y = cam_h - 1.82 - 0.02 * shape[0];
    let last_z = z0 + vel[2] * (cfg.frames - 1) as f64;
    let wall = z0.max(last_z) + rng.random_range(1.5..4.0);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pred_shape: Vec<f64> = shape.iter().map(|b| b + cfg.shape_noise * normal.sample(&mut rng)).collect();

    struct Raw {
        gt: BodyState,
        pred_params: BodyParams,
        pred_posed: BodyOutput,
        depth: DepthMap,
        mask: HumanMask,
        keypoints2d: Vec<[f64; 2]>,
    }
    let mut raws = Vec::with_capacity(cfg.frames);
    let mut all_depths = Vec::with_capacity(cfg.frames * w * h);
    for i in 0..cfg.frames {
        let fi = i as f64;
        let t = [x0 + vel[0] * fi, base_y, z0 + vel[2] * fi];
        let pose = walking_pose(&mut rng, tmpl, phase0 + 0.6 * fi, &jitter);
        let gp = BodyParams { pose, shape: shape.clone(), translation: t };
        let out = forward_body(tmpl, &gp)?.with_projection(&k);
        let buf = rasterize(&out.vertices, &tmpl.faces, &k, w, h);
        let mut depth = Raster::filled(h, w, 0.0);
        let mut mask = Raster::filled(h, w, false);
        for row in 0..h {
            for col in 0..w {
                let bg = background_depth(&k, row, wall, cam_h);
                let b = buf.at(col, row);
                let human = buf.face[row * w + col] != NO_FACE && b < bg;
                *depth.get_mut(row, col) = if human { b } else { bg };
                *mask.get_mut(row, col) = human;
            }
        }
        all_depths.extend_from_slice(&depth.data);
        let mut pp = gp.clone();
        pp.translation = [0.0; 3];
        pp.shape = pred_shape.clone();
        for p in pp.pose.iter_mut().skip(1) {
            for c in p.iter_mut() {
                *c += cfg.pose_noise * normal.sample(&mut rng);
            }
        }
        let pred_posed = forward_body(tmpl, &pp)?;
        let keypoints2d = out
            .joints2d
            .clone()
            .expect("projected")
            .iter()
            .map(|j| [j[0] + cfg.keypoint_noise_px * normal.sample(&mut rng), j[1] + cfg.keypoint_noise_px * normal.sample(&mut rng)])
            .collect();
        raws.push(Raw { gt: BodyState { output: out, params: gp }, pred_params: pp, pred_posed, depth, mask, keypoints2d });
    }
    let scale = median(&mut all_depths);

    let noise = Normal::new(0.0, cfg.token_noise.max(0.0)).map_err(|_| Error::InvalidInput("token noise".into()))?;
    let l = cfg.geo_tokens_per_frame;
    let mut geo = Mat::zeros(cfg.frames * l, cfg.geo_dim);
    let mut hmr = Mat::zeros(cfg.frames, cfg.hmr_dim);
    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, r) in raws.into_iter().enumerate() {
        let t = r.gt.params.translation;
        let gf = geo_features(scale, &t, wall, cam_h);
        for (slot, m) in encoder.geo.iter().enumerate() {
            let row = encode(m, &gf, &noise, &mut rng);
            geo.data[(i * l + slot) * cfg.geo_dim..(i * l + slot + 1) * cfg.geo_dim].copy_from_slice(&row);
        }
        let hf = hmr_features(&t, &r.gt.params.pose);
        let row = encode(&encoder.hmr, &hf, &noise, &mut rng);
        hmr.data[i * cfg.hmr_dim..(i + 1) * cfg.hmr_dim].copy_from_slice(&row);
        let mut pm = unproject(&k, &r.depth)?;
        pm.data.iter_mut().for_each(|p| *p = [p[0] / scale, p[1] / scale, p[2] / scale]);
        frames.push(SyntheticFrame {
            gt: r.gt,
            pred_params: r.pred_params,
            pred_posed: r.pred_posed,
            pointmap: pm,
            mask: r.mask,
            keypoints2d: r.keypoints2d,
        });
    }
    let tokens = TokenSequence { geo, geo_frame: (0..cfg.frames * l).map(|r| r / l).collect(), hmr };
    Ok(SyntheticWorld {
        seed,
        domain,
        scale,
        intrinsics: k,
        width: w,
        height: h,
        frames,
        tokens,
        body_scale: tmpl.body_scale(&shape),
        camera_height: cam_h,
        wall_depth: wall,
    })
}

/// Simulated worlds for coarse training, derived from `seed`.
pub fn sim_pool(tmpl: &BodyTemplate, cfg: &WorldConfig, seed: u64, count: usize) -> Result<Vec<SyntheticWorld>> {
    let enc = Encoder::sim(cfg);
    (0..count)
        .map(|j| generate_world(tmpl, cfg, seed.wrapping_mul(1_000_003).wrapping_add(j as u64 + 1), Domain::Sim, &enc))
        .collect()
}

/// The unlabeled target world for fine alignment: a fresh clip whose tokens
/// come from a perturbed encoder.
pub fn real_world(tmpl: &BodyTemplate, cfg: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    let enc = Encoder::sim(cfg).perturbed(cfg.domain_gap, seed ^ 0xdead_beef);
    generate_world(tmpl, cfg, seed.wrapping_mul(7_919).wrapping_add(0x9e37), Domain::Real, &enc)
}

fn track(params: &[&BodyParams], with_translation: bool) -> BodyTrack {
    BodyTrack {
        pose: params.iter().map(|p| p.flat_pose()).collect(),
        betas: params.iter().map(|p| p.shape.clone()).collect(),
        translation: if with_translation { params.iter().map(|p| p.translation).collect() } else { Vec::new() },
    }
}

/// Records an alignment result in the bundle: the predicted scale and the
/// unit-frame translations of `body_pred`.
pub fn attach_alignment(bundle: &mut SequenceBundle, out: &AlignOutput) {
    bundle.scale = Some(out.scale);
    if let Some(t) = bundle.body_pred.as_mut() {
        t.translation = out.raw_translations.clone();
    }
}

/// Packs the world as a sequence bundle the way the backbones would emit it.
/// Predicted translations and scale are left empty; see [`attach_alignment`].
pub fn world_to_bundle(world: &SyntheticWorld) -> SequenceBundle {
    let n = world.frames.len();
    let depth_of = |p: &Pointmap| DepthMap { height: p.height, width: p.width, data: p.data.iter().map(|x| x[2]).collect() };
    let pseudo: Vec<DepthMap> = world
        .frames
        .iter()
        .map(|f| {
            // affine-scrambled depth stands in for a relative-depth expert
            let mut d = depth_of(&f.pointmap);
            d.data.iter_mut().for_each(|x| *x = 0.5 * *x + 0.3);
            d
        })
        .collect();
    let l = world.tokens.geo.rows / n;
    SequenceBundle {
        fps: 30.0,
        pointmaps: world.frames.iter().map(|f| f.pointmap.clone()).collect(),
        confidence: world.frames.iter().map(|f| Raster::filled(f.pointmap.height, f.pointmap.width, 1.0)).collect(),
        masks: world.frames.iter().map(|f| f.mask.clone()).collect(),
        pseudo_depth: Some(pseudo),
        orig_pointmaps: Some(world.frames.iter().map(|f| f.pointmap.clone()).collect()),
        hmr_tokens: Some(TokenMatrix {
            rows: n,
            dim: world.tokens.hmr.cols,
            data: world.tokens.hmr.data.clone(),
            frame: (0..n).collect(),
        }),
        geo_tokens: Some(TokenMatrix {
            rows: world.tokens.geo.rows,
            dim: world.tokens.geo.cols,
            data: world.tokens.geo.data.clone(),
            frame: (0..world.tokens.geo.rows).map(|r| r / l).collect(),
        }),
        keypoints2d: Some(world.frames.iter().map(|f| f.keypoints2d.clone()).collect()),
        camera_poses: None,
        body_pred: Some(track(&world.frames.iter().map(|f| &f.pred_params).collect::<Vec<_>>(), false)),
        body_gt: Some(track(&world.frames.iter().map(|f| &f.gt.params).collect::<Vec<_>>(), true)),
        scale: None,
        scale_opt: Some(world.scale),
    }
}
