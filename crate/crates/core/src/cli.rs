//! The `hsrecon` command-line front end.
//!
//! Every subcommand prints JSON on stdout with numbers rounded to nine
//! significant digits. Exit codes: 0 success, 1 domain error (reported as
//! JSON on stderr), 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::alignnet::AlignNet;
use crate::autodiff::GradCheckConfig;
use crate::body::{load_template, procedural_template, BodyTemplate};
use crate::config::GlobalConfig;
use crate::curation::{curate, read_log_dir};
use crate::error::{Error, Result};
use crate::eval::{depth_metrics, sequence_motion_metrics, MotionConfig};
use crate::geometry::{Accumulation, Vec3};
use crate::gradcheck::{run_gradcheck, GradTarget};
use crate::losses::LossWeights;
use crate::numfmt;
use crate::pipeline::{bundle_stage1_loss, bundle_stage2_loss, bundle_stage3_loss, export_reconstruction, reconstruct, ExportFrame, ReconstructOptions};
use crate::roe::{solve, AlignMode, Objective, RoeConfig};
use crate::tensor_io::{read_bundle, read_tensor};
use crate::train::{train_synthetic, Stage};

#[derive(Debug, Parser)]
#[command(name = "hsrecon", version, about = "Metric-scale human and scene alignment toolkit")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with loss weights, patch, curation, network and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossStage {
    Stage1,
    Stage2,
    Stage3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Scale,
    ScaleShift,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    L1,
    Truncated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FrameArg {
    Camera,
    World,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AccumArg {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Robust scale or scale-shift fit of a JSON array of {pred, target, weight}.
    Roe {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "scale-shift")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "l1")]
        objective: ObjectiveArg,
        /// Truncation threshold; defaults to 0.2 × median |target|.
        #[arg(long)]
        truncation: Option<f64>,
    },
    /// Evaluates one stage objective on a sequence bundle.
    Loss {
        #[arg(value_enum)]
        stage: LossStage,
        #[arg(long)]
        bundle: PathBuf,
        /// LossWeights JSON; overrides the config file's weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Body template directory; the built-in template when absent.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Trains AlignNet on synthetic worlds and writes a report.
    TrainAlign {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for the trained weights.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        /// Skip the coarse stage before a fine run.
        #[arg(long)]
        fine_only: bool,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Compares analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_parser = parse_target)]
        target: GradTarget,
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Splits detection logs into shots and filters subject clips.
    Curate {
        /// Directory of `<video_id>.jsonl` detection logs.
        #[arg(long)]
        logs: PathBuf,
        /// Output file for the accepted clips.
        #[arg(long)]
        out: PathBuf,
    },
    /// World-grounded motion metrics between two joint trajectories.
    EvalMotion {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frames per evaluation segment; the whole sequence when absent.
        #[arg(long)]
        segment_len: Option<usize>,
        /// Rigid instead of similarity alignment for WA-MPJPE.
        #[arg(long)]
        wa_rigid: bool,
        #[arg(long, default_value_t = 2)]
        w_frames: usize,
        #[arg(long)]
        w_with_scale: bool,
        #[arg(long)]
        rte_with_scale: bool,
        #[arg(long, default_value_t = 0)]
        root_joint: usize,
    },
    /// Abs Rel and δ<1.25 between two depth containers.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Mask container; nonzero entries are evaluated. Defaults to gt > 0.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Evaluate raw depth without median scale alignment.
        #[arg(long)]
        no_align: bool,
    },
    /// Runs the full reconstruction on a bundle and exports PLY files.
    Reconstruct {
        #[arg(long)]
        bundle: PathBuf,
        /// AlignNet weights directory (or its manifest.json).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "camera")]
        frame: FrameArg,
        #[arg(long, value_enum, default_value = "f64")]
        accumulate: AccumArg,
    },
}

fn parse_target(s: &str) -> std::result::Result<GradTarget, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Deserialize)]
struct RoeSample {
    pred: f64,
    target: f64,
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize)]
struct RoeOutput {
    scale: f64,
    shift: f64,
    objective: f64,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ReconstructSummary {
    frames: usize,
    scale: f64,
    translations: Vec<Vec3>,
    shape: Vec<f64>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::InvalidContainer(_) | Error::BadMagic(_) | Error::Truncated { .. } | Error::UnknownDtype(_) => "container",
        Error::MalformedDetection { .. } | Error::InvalidDetection { .. } => "detection",
        Error::Json(_) => "json",
        Error::BehindCamera(_) | Error::NonPositiveDepth { .. } => "geometry",
        Error::NoSolution(_) | Error::Unsolvable(_) => "unsolvable",
        Error::InvalidInput(_) => "invalid_input",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::EmptyMask => "empty_mask",
        Error::EmptySet => "empty_set",
        Error::Degenerate(_) => "degenerate",
        Error::MissingField(_) => "missing_field",
        Error::NonScalarRoot(..) => "autodiff",
        Error::NonFinite(_) => "non_finite",
        Error::Diverged { .. } => "diverged",
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn template(path: Option<&Path>) -> Result<BodyTemplate> {
    match path {
        Some(p) => load_template(p),
        None => Ok(procedural_template()),
    }
}

fn weights_dir(path: &Path) -> &Path {
    match path.file_name() {
        Some(n) if n == "manifest.json" => path.parent().unwrap_or(Path::new(".")),
        _ => path,
    }
}

/// Joint trajectories as `[frame][joint][xyz]`, optionally wrapped in `{"joints": ...}`.
fn read_trajectory(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Traj {
        Plain(Vec<Vec<Vec3>>),
        Wrapped { joints: Vec<Vec<Vec3>> },
    }
    Ok(match read_json::<Traj>(path)? {
        Traj::Plain(j) | Traj::Wrapped { joints: j } => j,
    })
}

fn execute(cli: Cli) -> Result<String> {
    let cfg = match &cli.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::default(),
    };
    let seed = cli.seed;
    let json = match cli.command {
        Command::Roe { input, mode, objective, truncation } => {
            let samples: Vec<RoeSample> = read_json(&input)?;
            let pred: Vec<f64> = samples.iter().map(|s| s.pred).collect();
            let target: Vec<f64> = samples.iter().map(|s| s.target).collect();
            let weight: Vec<f64> = samples.iter().map(|s| s.weight).collect();
            let objective = match objective {
                ObjectiveArg::L1 => Objective::L1,
                ObjectiveArg::Truncated => Objective::TruncatedL1(truncation),
            };
            let mode = match mode {
                ModeArg::Scale => AlignMode::ScaleOnly,
                ModeArg::ScaleShift => AlignMode::ScaleShift,
            };
            let r = solve(&pred, &target, &weight, &RoeConfig { mode, objective, ..RoeConfig::default() })?;
            numfmt::to_json(&RoeOutput { scale: r.scale, shift: r.shift, objective: r.objective })?
        }
        Command::Loss { stage, bundle, weights, template: tpath } => {
            let b = read_bundle(&bundle)?;
            let w = match weights {
                Some(p) => {
                    let w: LossWeights = read_json(&p)?;
                    w.validate()?;
                    w
                }
                None => cfg.loss_weights,
            };
            let report = match stage {
                LossStage::Stage1 => bundle_stage1_loss(&b, &cfg.patch, &w, seed)?,
                LossStage::Stage2 => bundle_stage2_loss(&b, &template(tpath.as_deref())?, &w)?,
                LossStage::Stage3 => {
                    let eps = cfg.train_config().visibility_epsilon;
                    bundle_stage3_loss(&b, &template(tpath.as_deref())?, &w, eps)?
                }
            };
            numfmt::to_json(&report)?
        }
        Command::TrainAlign { stage, steps, out, save_weights, fine_only, lr } => {
            let mut tc = cfg.train_config();
            if let Some(lr) = lr {
                tc.lr = lr;
            }
            tc.fine_only |= fine_only;
            tc.validate()?;
            let stage = match stage {
                StageArg::Coarse => Stage::Coarse,
                StageArg::Fine => Stage::Fine,
            };
            let steps = steps.unwrap_or(match stage {
                Stage::Coarse => tc.coarse_steps,
                Stage::Fine => tc.fine_steps,
            });
            let (net, report) = train_synthetic(&procedural_template(), &tc, seed, stage, steps)?;
            if let Some(dir) = save_weights {
                net.save(dir)?;
            }
            let text = numfmt::to_json(&report)?;
            write_file(&out, &format!("{text}\n"))?;
            text
        }
        Command::Gradcheck { target, max_coords, tol } => {
            let mut gc = GradCheckConfig::default();
            if max_coords.is_some() {
                gc.max_coords_per_param = max_coords;
            }
            if let Some(t) = tol {
                gc.tol = t;
            }
            numfmt::to_json(&run_gradcheck(target, seed, &gc)?)?
        }
        Command::Curate { logs, out } => {
            let videos = read_log_dir(&logs)?;
            let result = curate(&videos, &cfg.curation)?;
            let accepted: Vec<_> = result.accepted().collect();
            write_file(&out, &format!("{}\n", numfmt::to_json(&accepted)?))?;
            numfmt::to_json(&result)?
        }
        Command::EvalMotion { pred, gt, segment_len, wa_rigid, w_frames, w_with_scale, rte_with_scale, root_joint } => {
            let p = read_trajectory(&pred)?;
            let g = read_trajectory(&gt)?;
            let mc = MotionConfig { wa_with_scale: !wa_rigid, w_frames, w_with_scale, rte_with_scale, root_joint };
            let len = segment_len.unwrap_or(g.len().max(1));
            numfmt::to_json(&sequence_motion_metrics(&p, &g, len, &mc)?)?
        }
        Command::EvalDepth { pred, gt, mask, no_align } => {
            let p = read_tensor(&pred)?;
            let g = read_tensor(&gt)?;
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch(format!("pred {:?} vs gt {:?}", p.shape, g.shape)));
            }
            let (p, g) = (p.to_f64(), g.to_f64());
            let m: Vec<bool> = match mask {
                Some(path) => read_tensor(&path)?.to_f64().iter().map(|&x| x != 0.0).collect(),
                None => g.iter().map(|&x| x > 0.0).collect(),
            };
            numfmt::to_json(&depth_metrics(&p, &g, &m, !no_align)?)?
        }
        Command::Reconstruct { bundle, weights, template: tpath, out, frame, accumulate } => {
            let b = read_bundle(&bundle)?;
            let net = AlignNet::load(weights_dir(&weights))?;
            let tmpl = load_template(&tpath)?;
            let opts = ReconstructOptions {
                accumulation: match accumulate {
                    AccumArg::F32 => Accumulation::F32,
                    AccumArg::F64 => Accumulation::F64,
                },
                ..ReconstructOptions::default()
            };
            let rec = reconstruct(&b, &net, &tmpl, &opts)?;
            let frame = match frame {
                FrameArg::Camera => ExportFrame::Camera,
                FrameArg::World => ExportFrame::World,
            };
            export_reconstruction(&rec, &tmpl, &out, frame)?;
            numfmt::to_json(&ReconstructSummary {
                frames: rec.frames(),
                scale: rec.scale,
                translations: rec.params.iter().map(|p| p.translation).collect(),
                shape: rec.shape.clone(),
            })?
        }
    };
    Ok(json)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Debug).target(env_logger::Target::Stderr).try_init();
    }
    match execute(cli) {
        Ok(json) => {
            let _ = writeln!(stdout, "{json}");
            0
        }
        Err(e) => {
            let body = ErrorBody { error: ErrorDetail { kind: error_kind(&e), message: e.to_string() } };
            let text = serde_json::to_string(&body).unwrap_or_else(|_| format!("{{\"error\":{{\"message\":{:?}}}}}", e.to_string()));
            let _ = writeln!(stderr, "{text}");
            1
        }
    }
}
