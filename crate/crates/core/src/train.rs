//! Coarse and fine alignment training on synthetic worlds.
//!
//! The coarse stage supervises AlignNet with ground-truth body state on a
//! pool of simulated worlds. The fine stage then adapts it to a single
//! target world (tokens from a perturbed encoder) using only the masked
//! pointmap and pseudo 2D keypoints.

use serde::{Deserialize, Serialize};

use crate::alignnet::{AlignNet, AlignNetConfig};
use crate::autodiff::{adamw_step, cosine_lr, AdamW, Mat, ParamStore, Tape, Var};
use crate::body::{visible_vertices, BodyTemplate, DEFAULT_VISIBILITY_EPSILON};
use crate::error::{Error, Result};
use crate::geometry::{dist2, Vec3};
use crate::losses::{build_target_cloud, coarse_smpl_loss_tape, stage3_frame_tape, LossWeights};
use crate::synthetic::{real_world, sim_pool, SyntheticWorld, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub world: WorldConfig,
    pub net: AlignNetConfig,
    pub weights: LossWeights,
    pub optimizer: AdamW,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub pool_size: usize,
    pub batch: usize,
    /// Run the fine stage from random weights instead of a coarse stage.
    pub fine_only: bool,
    pub visibility_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            world,
            net: AlignNetConfig::desk(world.geo_dim, world.hmr_dim),
            weights: LossWeights::default(),
            optimizer: AdamW::default(),
            lr: 3e-3,
            warmup: 20,
            clip: 1.0,
            coarse_steps: 600,
            fine_steps: 300,
            pool_size: 24,
            batch: 4,
            fine_only: false,
            visibility_epsilon: DEFAULT_VISIBILITY_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.net.geo_dim != self.world.geo_dim || self.net.hmr_dim != self.world.hmr_dim {
            return Err(Error::ShapeMismatch("network token widths differ from the world encoder".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::InvalidInput("learning rate and clip norm must be positive".into()));
        }
        if self.pool_size == 0 || self.batch == 0 {
            return Err(Error::InvalidInput("pool size and batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scale_pred: f64,
    pub scale_gt: f64,
    pub scale_rel_error: f64,
    /// Mean over frames of ‖s·t_raw − t*‖.
    pub mean_translation_error: f64,
    pub body_scale: f64,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub seed: u64,
    pub steps: usize,
    pub coarse_initialized: bool,
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    #[serde(flatten)]
    pub eval: Evaluation,
    pub diverged: bool,
    pub flags: Vec<String>,
}

pub const RECOVERY_SCALE_TOL: f64 = 0.05;
pub const RECOVERY_TRANSLATION_FRAC: f64 = 0.1;

pub fn evaluate(net: &AlignNet, world: &SyntheticWorld) -> Result<Evaluation> {
    let out = net.forward(&world.tokens)?;
    let rel = (out.scale - world.scale).abs() / world.scale;
    let gt = world.gt_translations();
    let err = out.translations.iter().zip(&gt).map(|(p, g)| dist2(p, g).sqrt()).sum::<f64>() / gt.len() as f64;
    Ok(Evaluation {
        scale_pred: out.scale,
        scale_gt: world.scale,
        scale_rel_error: rel,
        mean_translation_error: err,
        body_scale: world.body_scale,
        recovered: rel < RECOVERY_SCALE_TOL && err < RECOVERY_TRANSLATION_FRAC * world.body_scale,
    })
}

/// Stage-2 objective of one world: mean per-frame body loss with the
/// placement `s*·t_raw`, plus the scale term.
pub fn coarse_world_tape(net: &AlignNet, store: &ParamStore, t: &mut Tape, world: &SyntheticWorld, w: &LossWeights) -> Result<Var> {
    let v = net.forward_tape(t, store, &world.tokens)?;
    let n = world.frames.len();
    let mut acc: Option<Var> = None;
    for (i, f) in world.frames.iter().enumerate() {
        let ti = t.slice_rows(v.raw_translations, i, i + 1);
        let place = t.scale(ti, world.scale);
        let li = coarse_smpl_loss_tape(
            t,
            &f.pred_posed.vertices,
            &f.pred_posed.joints3d,
            place,
            &f.pred_params,
            &f.gt,
            &world.intrinsics,
            w,
        );
        acc = Some(match acc {
            Some(a) => t.add(a, li),
            None => li,
        });
    }
    let smpl = t.scale(acc.expect("world has frames"), w.lambda_smpl / n as f64);
    let ds = t.offset(v.scale, -world.scale);
    let ds = t.abs(ds);
    let ds = t.scale(ds, w.lambda_scale);
    Ok(t.add(smpl, ds))
}

/// Stage-3 objective of one world. Visibility and nearest neighbors come
/// from the current values. Frames with no visible vertex or an empty mask
/// are skipped and named in `flags`.
#[allow(clippy::too_many_arguments)]
pub fn fine_world_tape(
    net: &AlignNet,
    store: &ParamStore,
    t: &mut Tape,
    world: &SyntheticWorld,
    tmpl: &BodyTemplate,
    w: &LossWeights,
    eps: f64,
    flags: &mut Vec<String>,
) -> Result<Option<Var>> {
    let v = net.forward_tape(t, store, &world.tokens)?;
    let s_val = t.scalar_value(v.scale);
    let raw = t.value(v.raw_translations).to_rows3();
    let mut acc: Option<Var> = None;
    let mut used = 0usize;
    for (i, f) in world.frames.iter().enumerate() {
        let place_val: Vec3 = [raw[i][0] * s_val, raw[i][1] * s_val, raw[i][2] * s_val];
        let placed: Vec<Vec3> = f.pred_posed.vertices.iter().map(|p| [p[0] + place_val[0], p[1] + place_val[1], p[2] + place_val[2]]).collect();
        let vis = visible_vertices(&placed, &tmpl.faces, &world.intrinsics, (world.width, world.height), eps)?;
        let src_rows: Vec<Vec3> = f.pred_posed.vertices.iter().zip(&vis).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let cloud = build_target_cloud(&f.pointmap, 1.0, &f.mask)?;
        if src_rows.is_empty() || cloud.is_empty() {
            flags.push(format!("frame {i}: no visible vertices or empty target; skipped"));
            continue;
        }
        let ti = t.slice_rows(v.raw_translations, i, i + 1);
        let place = t.mul_scalar(ti, v.scale);
        let src = t.constant(Mat::from_rows3(&src_rows));
        let src = t.add_row(src, place);
        let tgt = t.constant(Mat::from_rows3(&cloud));
        let tgt = t.mul_scalar(tgt, v.scale);
        let joints = t.constant(Mat::from_rows3(&f.pred_posed.joints3d));
        let joints = t.add_row(joints, place);
        let li = stage3_frame_tape(t, src, tgt, joints, &f.keypoints2d, &world.intrinsics, w)?;
        acc = Some(match acc {
            Some(a) => t.add(a, li),
            None => li,
        });
        used += 1;
    }
    Ok(acc.map(|a| t.scale(a, 1.0 / used as f64)))
}

fn reset_moments(net: &mut AlignNet) {
    for p in &mut net.params.params {
        p.m.data.iter_mut().for_each(|x| *x = 0.0);
        p.v.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

struct Loop {
    losses: Vec<f64>,
    diverged: Option<(usize, f64)>,
}

/// Runs `steps` optimizer updates. `step_loss` builds the objective on a
/// fresh tape for update `k`; `None` means nothing to optimize this step.
fn optimize<F>(net: &mut AlignNet, cfg: &TrainConfig, steps: usize, mut step_loss: F) -> Result<Loop>
where
    F: FnMut(&AlignNet, &mut Tape, usize) -> Result<Option<Var>>,
{
    reset_moments(net);
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut t = Tape::new();
        let Some(root) = step_loss(net, &mut t, k)? else {
            losses.push(f64::NAN);
            return Ok(Loop { losses, diverged: Some((k, f64::NAN)) });
        };
        let loss = t.scalar_value(root);
        losses.push(loss);
        if k % 50 == 0 || k + 1 == steps {
            log::debug!("step {k}/{steps} loss {loss:.6e}");
        }
        if !loss.is_finite() {
            log::warn!("non-finite loss at step {k}");
            return Ok(Loop { losses, diverged: Some((k, loss)) });
        }
        net.params.zero_grad();
        t.backward(root, &mut net.params)?;
        net.params.clip_grad_norm(cfg.clip);
        let lr = cosine_lr(cfg.lr, k, steps, cfg.warmup.min(steps / 4), 0.0);
        adamw_step(&mut net.params, lr, &cfg.optimizer, k as u64 + 1)?;
    }
    Ok(Loop { losses, diverged: None })
}

/// Coarse training over `pool`, cycling through it `batch` worlds per step.
pub fn train_coarse(net: &mut AlignNet, pool: &[SyntheticWorld], cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("coarse training needs at least one world".into()));
    }
    let w = cfg.weights;
    let b = cfg.batch.min(pool.len());
    let lp = optimize(net, cfg, steps, |net, t, k| {
        let mut acc: Option<Var> = None;
        for j in 0..b {
            let world = &pool[(k * b + j) % pool.len()];
            let l = coarse_world_tape(net, &net.params, t, world, &w)?;
            acc = Some(match acc {
                Some(a) => t.add(a, l),
                None => l,
            });
        }
        Ok(acc.map(|a| t.scale(a, 1.0 / b as f64)))
    })?;
    match lp.diverged {
        Some((step, loss)) => Err(Error::Diverged { step, loss }),
        None => Ok(lp.losses),
    }
}

fn coarse_objective(net: &AlignNet, pool: &[SyntheticWorld], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for world in pool {
        let mut t = Tape::new();
        let v = coarse_world_tape(net, &net.params, &mut t, world, w)?;
        total += t.scalar_value(v);
    }
    Ok(total / pool.len() as f64)
}

fn fine_objective(net: &AlignNet, world: &SyntheticWorld, tmpl: &BodyTemplate, cfg: &TrainConfig, flags: &mut Vec<String>) -> Result<f64> {
    let mut t = Tape::new();
    match fine_world_tape(net, &net.params, &mut t, world, tmpl, &cfg.weights, cfg.visibility_epsilon, flags)? {
        Some(v) => Ok(t.scalar_value(v)),
        None => Ok(f64::NAN),
    }
}

fn net_seed(seed: u64) -> u64 {
    seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407)
}

pub fn held_out_sim(tmpl: &BodyTemplate, cfg: &TrainConfig, seed: u64) -> Result<SyntheticWorld> {
    let pool = sim_pool(tmpl, &cfg.world, seed ^ 0x00ff_00ff, 1)?;
    Ok(pool.into_iter().next().expect("one world"))
}

/// Coarse stage on the simulated pool for `seed`; returns the trained
/// network alongside its report, evaluated on a held-out simulated world.
pub fn run_coarse(tmpl: &BodyTemplate, cfg: &TrainConfig, seed: u64, steps: usize) -> Result<(AlignNet, TrainReport)> {
    cfg.validate()?;
    let mut net = AlignNet::new(cfg.net, net_seed(seed))?;
    let pool = sim_pool(tmpl, &cfg.world, seed, cfg.pool_size)?;
    let initial = coarse_objective(&net, &pool, &cfg.weights)?;
    let (losses, diverged, mut flags) = match train_coarse(&mut net, &pool, cfg, steps) {
        Ok(l) => (l, false, Vec::new()),
        Err(Error::Diverged { step, loss }) => (Vec::new(), true, vec![format!("diverged at step {step}: loss {loss}")]),
        Err(e) => return Err(e),
    };
    let final_loss = if diverged { f64::NAN } else { coarse_objective(&net, &pool, &cfg.weights)? };
    let eval = evaluate(&net, &held_out_sim(tmpl, cfg, seed)?).or_else(|e| {
        flags.push(format!("evaluation failed: {e}"));
        Ok::<_, Error>(Evaluation {
            scale_pred: f64::NAN,
            scale_gt: f64::NAN,
            scale_rel_error: f64::NAN,
            mean_translation_error: f64::NAN,
            body_scale: f64::NAN,
            recovered: false,
        })
    })?;
    let report = TrainReport {
        stage: Stage::Coarse,
        seed,
        steps,
        coarse_initialized: false,
        losses,
        initial_loss: initial,
        final_loss,
        eval,
        diverged,
        flags,
    };
    Ok((net, report))
}

/// Fine stage on the target world for `seed`, starting from `init`, or from
/// random weights when `init` is `None`.
pub fn run_fine(tmpl: &BodyTemplate, cfg: &TrainConfig, seed: u64, steps: usize, init: Option<AlignNet>) -> Result<(AlignNet, TrainReport)> {
    cfg.validate()?;
    let coarse_initialized = init.is_some();
    let mut net = match init {
        Some(n) => n,
        None => AlignNet::new(cfg.net, net_seed(seed))?,
    };
    let world = real_world(tmpl, &cfg.world, seed)?;
    let mut flags = Vec::new();
    if !coarse_initialized {
        flags.push("fine-only: no coarse initialization".to_string());
    }
    let initial = fine_objective(&net, &world, tmpl, cfg, &mut Vec::new())?;
    let w = cfg.weights;
    let eps = cfg.visibility_epsilon;
    let mut step_flags = Vec::new();
    let lp = optimize(&mut net, cfg, steps, |net, t, _| fine_world_tape(net, &net.params, t, &world, tmpl, &w, eps, &mut step_flags))?;
    let skipped = step_flags.len();
    if skipped > 0 {
        flags.push(format!("{skipped} frame evaluations skipped for lack of visible geometry"));
    }
    let diverged = lp.diverged.is_some();
    if let Some((step, loss)) = lp.diverged {
        flags.push(format!("diverged at step {step}: loss {loss}"));
    }
    let final_loss = if diverged { f64::NAN } else { fine_objective(&net, &world, tmpl, cfg, &mut Vec::new())? };
    let eval = evaluate(&net, &world)?;
    let report = TrainReport {
        stage: Stage::Fine,
        seed,
        steps,
        coarse_initialized,
        losses: lp.losses,
        initial_loss: initial,
        final_loss,
        eval: Evaluation { recovered: eval.recovered && !diverged, ..eval },
        diverged,
        flags,
    };
    Ok((net, report))
}

/// One-call entry point. For the fine stage the coarse stage runs first
/// with `cfg.coarse_steps` unless `cfg.fine_only` is set.
pub fn train_synthetic(tmpl: &BodyTemplate, cfg: &TrainConfig, seed: u64, stage: Stage, steps: usize) -> Result<(AlignNet, TrainReport)> {
    match stage {
        Stage::Coarse => run_coarse(tmpl, cfg, seed, steps),
        Stage::Fine => {
            let init = if cfg.fine_only { None } else { Some(run_coarse(tmpl, cfg, seed, cfg.coarse_steps)?.0) };
            run_fine(tmpl, cfg, seed, steps, init)
        }
    }
}
