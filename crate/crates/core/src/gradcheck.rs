//! Finite-difference checks of the training objectives on synthetic worlds.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignnet::{AlignNet, AlignNetConfig};
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Mat, ParamStore, Tape};
use crate::body::{procedural_template, visible_vertices, BodyTemplate, DEFAULT_VISIBILITY_EPSILON};
use crate::error::{Error, Result};
use crate::geometry::{add3, Vec3};
use crate::losses::{build_patches, build_target_cloud, coarse_smpl_loss_tape, stage1_frame_tape, LossWeights, PatchSpec};
use crate::pipeline::bundle_stage1_frames;
use crate::synthetic::{generate_world, world_to_bundle, Domain, Encoder, SyntheticWorld, WorldConfig};
use crate::train::{coarse_world_tape, fine_world_tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradTarget {
    /// Stage-1 loss with respect to the pointmap and confidence.
    Stage1,
    /// Stage-2 body loss with respect to the body translation.
    Stage2,
    /// Stage-3 loss with respect to the body translation.
    Stage3,
    /// Stage-2 objective with respect to every AlignNet weight.
    AlignnetStage2,
    /// Stage-3 objective with respect to every AlignNet weight.
    AlignnetStage3,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [GradTarget::Stage1, GradTarget::Stage2, GradTarget::Stage3, GradTarget::AlignnetStage2, GradTarget::AlignnetStage3];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Stage1 => "stage1",
            GradTarget::Stage2 => "stage2",
            GradTarget::Stage3 => "stage3",
            GradTarget::AlignnetStage2 => "alignnet-stage2",
            GradTarget::AlignnetStage3 => "alignnet-stage3",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown gradcheck target `{s}`")))
    }
}

fn small_world(tmpl: &BodyTemplate, seed: u64, frames: usize) -> Result<SyntheticWorld> {
    let cfg = WorldConfig { frames, ..WorldConfig::default() };
    generate_world(tmpl, &cfg, seed, Domain::Sim, &Encoder::sim(&cfg))
}

fn net_for(world: &SyntheticWorld, seed: u64) -> Result<AlignNet> {
    AlignNet::new(AlignNetConfig::desk(world.tokens.geo.cols, world.tokens.hmr.cols), seed)
}

/// Shrinks the output heads and sets their biases so the predictions sit
/// near the ground truth of `world`, keeping the body in view.
fn anchor_heads(net: &mut AlignNet, world: &SyntheticWorld) {
    let t = world.gt_translations();
    let n = t.len() as f64;
    let mean = t.iter().fold([0.0; 3], |a, b| add3(&a, b)).map(|x| x / n);
    let s = world.scale;
    let inv_softplus = |y: f64| (y.exp() - 1.0).ln();
    let set = |net: &mut AlignNet, name: &str, f: &dyn Fn(usize, f64) -> f64| {
        let id = net.params.find(name).expect("head parameter");
        let p = net.params.get_mut(id);
        for (k, x) in p.value.data.iter_mut().enumerate() {
            *x = f(k, *x);
        }
    };
    set(net, "translation_head.weight", &|_, x| 0.02 * x);
    set(net, "scale_head.weight", &|_, x| 0.02 * x);
    let bias = [mean[0] / mean[2], mean[1] / mean[2], inv_softplus(mean[2] / s)];
    set(net, "translation_head.bias", &|k, _| bias[k]);
    set(net, "scale_head.bias", &|_, _| inv_softplus(s));
}

pub fn run_gradcheck(target: GradTarget, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let tmpl = procedural_template();
    let w = LossWeights::default();
    let cfg = GradCheckConfig { seed, ..*cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    match target {
        GradTarget::Stage1 => {
            let world = small_world(&tmpl, seed, 1)?;
            let mut f = bundle_stage1_frames(&world_to_bundle(&world), seed)?.remove(0);
            for p in f.pointmap.data.iter_mut().filter(|p| p[2].is_finite()) {
                for c in p.iter_mut() {
                    *c += 0.01 * noise.sample(&mut rng);
                }
            }
            let spec = PatchSpec::default();
            let patches = build_patches(&f.pred_depth(), &f.confidence, &f.pseudo_depth, &f.mask, &f.intrinsics, &spec, f.seed)?;
            let mut store = ParamStore::new();
            let pm = store.add("pointmap", Mat::from_rows3(&f.pointmap.data));
            let cf = store.add("confidence", Mat::from_vec(f.confidence.len(), 1, f.confidence.data.clone())?);
            let f = &f;
            let patches = &patches;
            grad_check(
                &store,
                |t: &mut Tape, s: &ParamStore| {
                    let p = t.param(s, pm);
                    let c = t.param(s, cf);
                    Ok(stage1_frame_tape(t, f, patches, p, c, &w))
                },
                &GradCheckConfig { max_coords_per_param: cfg.max_coords_per_param.or(Some(64)), ..cfg },
            )
        }
        GradTarget::Stage2 => {
            let world = small_world(&tmpl, seed, 1)?;
            let f = &world.frames[0];
            let t0: Vec3 = f.gt.params.translation.map(|x| x + 0.05 * noise.sample(&mut rng));
            let mut store = ParamStore::new();
            let tid = store.add("translation", Mat::row(&t0));
            let k = world.intrinsics;
            grad_check(
                &store,
                |t: &mut Tape, s: &ParamStore| {
                    let tv = t.param(s, tid);
                    Ok(coarse_smpl_loss_tape(t, &f.pred_posed.vertices, &f.pred_posed.joints3d, tv, &f.pred_params, &f.gt, &k, &w))
                },
                &cfg,
            )
        }
        GradTarget::Stage3 => {
            let world = small_world(&tmpl, seed, 1)?;
            let f = &world.frames[0];
            let t0: Vec3 = f.gt.params.translation.map(|x| x + 0.02 * noise.sample(&mut rng));
            let placed: Vec<Vec3> = f.pred_posed.vertices.iter().map(|v| add3(v, &t0)).collect();
            let vis = visible_vertices(&placed, &tmpl.faces, &world.intrinsics, (world.width, world.height), DEFAULT_VISIBILITY_EPSILON)?;
            let src: Vec<Vec3> = f.pred_posed.vertices.iter().zip(&vis).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let cloud = build_target_cloud(&f.pointmap, world.scale, &f.mask)?;
            let mut store = ParamStore::new();
            let tid = store.add("translation", Mat::row(&t0));
            let k = world.intrinsics;
            grad_check(
                &store,
                |t: &mut Tape, s: &ParamStore| {
                    let tv = t.param(s, tid);
                    let a = t.constant(Mat::from_rows3(&src));
                    let a = t.add_row(a, tv);
                    let b = t.constant(Mat::from_rows3(&cloud));
                    let j = t.constant(Mat::from_rows3(&f.pred_posed.joints3d));
                    let j = t.add_row(j, tv);
                    crate::losses::stage3_frame_tape(t, a, b, j, &f.keypoints2d, &k, &w)
                },
                &cfg,
            )
        }
        GradTarget::AlignnetStage2 => {
            let world = small_world(&tmpl, seed, 2)?;
            let net = net_for(&world, seed)?;
            grad_check(
                &net.params,
                |t: &mut Tape, s: &ParamStore| coarse_world_tape(&net, s, t, &world, &w),
                &GradCheckConfig { max_coords_per_param: cfg.max_coords_per_param.or(Some(2)), ..cfg },
            )
        }
        GradTarget::AlignnetStage3 => {
            let world = small_world(&tmpl, seed, 2)?;
            let mut net = net_for(&world, seed)?;
            anchor_heads(&mut net, &world);
            grad_check(
                &net.params,
                |t: &mut Tape, s: &ParamStore| {
                    fine_world_tape(&net, s, t, &world, &tmpl, &w, DEFAULT_VISIBILITY_EPSILON, &mut Vec::new())?
                        .ok_or_else(|| Error::Degenerate("no visible body geometry at the check point".into()))
                },
                &GradCheckConfig { max_coords_per_param: cfg.max_coords_per_param.or(Some(2)), ..cfg },
            )
        }
    }
}
