//! Exact robust scale and scale-shift alignment.
//!
//! Both solvers minimize `Σ w_j ρ(s·pred_j [+ t] − target_j)` with `ρ` the
//! absolute value or the absolute value truncated at `τ`. The objective is
//! piecewise linear, so its minimum over `s > 0` is attained at a breakpoint:
//! a ratio `target_j / pred_j` (or a truncation point `ρ = τ`) for the scale
//! problem, and the intersection of two such breakpoint lines for the
//! scale-shift problem. The solvers enumerate those candidates, which is
//! affordable for patch-sized inputs and deterministic. When the infimum
//! lies on the open boundary `s → 0⁺` the solvers return a vanishing
//! positive scale instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    ScaleOnly,
    ScaleShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    L1,
    /// L1 truncated at the given threshold. `None` picks `0.2 × median |target|`.
    TruncatedL1(Option<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoeConfig {
    pub mode: AlignMode,
    pub objective: Objective,
    pub min_samples: usize,
}

impl Default for RoeConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::ScaleShift,
            objective: Objective::L1,
            min_samples: 2,
        }
    }
}

impl RoeConfig {
    pub fn scale_only(objective: Objective) -> Self {
        Self {
            mode: AlignMode::ScaleOnly,
            objective,
            min_samples: 2,
        }
    }

    pub fn scale_shift(objective: Objective) -> Self {
        Self {
            mode: AlignMode::ScaleShift,
            objective,
            min_samples: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub scale: f64,
    pub shift: f64,
    pub objective: f64,
    /// Samples whose residual lies within the truncation threshold (all
    /// positively weighted samples for plain L1).
    pub inlier_count: usize,
}

/// Relative tolerance under which two objective values count as tied.
const TIE_EPS: f64 = 1e-12;
const BOUNDARY_EPS: f64 = 1e-12;

/// A positive scale small enough that `s·pred` is negligible next to the
/// targets. Stands in for the open boundary `s → 0⁺`.
fn boundary_scale(pred: &[f64], target: &[f64], weights: &[f64], tau: f64) -> f64 {
    let active = || pred.iter().zip(target).zip(weights).filter(|(_, &w)| w > 0.0);
    let pmax = active().fold(0.0f64, |m, ((p, _), _)| m.max(p.abs()));
    let qmax = active().fold(0.0f64, |m, ((_, q), _)| m.max(q.abs()));
    BOUNDARY_EPS * (qmax + tau + 1.0) / pmax.max(f64::MIN_POSITIVE)
}

fn check_inputs(pred: &[f64], target: &[f64], weights: &[f64], cfg: &RoeConfig) -> Result<()> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred/target/weights lengths {}/{}/{}",
            pred.len(),
            target.len(),
            weights.len()
        )));
    }
    if pred.len() < cfg.min_samples.max(1) {
        return Err(Error::Unsolvable(format!(
            "{} samples, need at least {}",
            pred.len(),
            cfg.min_samples
        )));
    }
    if pred.iter().chain(target).chain(weights).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidInput("negative weight".into()));
    }
    Ok(())
}

/// Truncation threshold for `cfg` on this target set.
pub fn truncation(objective: Objective, target: &[f64]) -> Option<f64> {
    match objective {
        Objective::L1 => None,
        Objective::TruncatedL1(Some(t)) => Some(t),
        Objective::TruncatedL1(None) => {
            let mut abs: Vec<f64> = target.iter().map(|t| t.abs()).collect();
            abs.sort_by(|a, b| a.total_cmp(b));
            let m = abs.len();
            let med = if m == 0 {
                0.0
            } else if m % 2 == 1 {
                abs[m / 2]
            } else {
                0.5 * (abs[m / 2 - 1] + abs[m / 2])
            };
            Some(if med > 0.0 { 0.2 * med } else { 1e-6 })
        }
    }
}

/// `Σ w ρ(s·p + t − q)` evaluated directly.
pub fn objective_value(pred: &[f64], target: &[f64], weights: &[f64], scale: f64, shift: f64, trunc: Option<f64>) -> f64 {
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &q), &w)| {
            let r = (scale * p + shift - q).abs();
            w * trunc.map_or(r, |tau| r.min(tau))
        })
        .sum()
}

fn inliers(pred: &[f64], target: &[f64], weights: &[f64], scale: f64, shift: f64, trunc: Option<f64>) -> usize {
    pred.iter()
        .zip(target)
        .zip(weights)
        .filter(|((&p, &q), &w)| w > 0.0 && trunc.map_or(true, |tau| (scale * p + shift - q).abs() <= tau))
        .count()
}

struct Best {
    scale: f64,
    shift: f64,
    objective: f64,
}

impl Best {
    fn offer(best: &mut Option<Best>, scale: f64, shift: f64, objective: f64) {
        if !(scale > 0.0) || !scale.is_finite() || !shift.is_finite() {
            return;
        }
        let replace = match best {
            None => true,
            Some(b) => {
                let tol = TIE_EPS * b.objective.abs().max(objective.abs()).max(1.0);
                if objective < b.objective - tol {
                    true
                } else if objective <= b.objective + tol {
                    (shift.abs(), scale) < (b.shift.abs(), b.scale)
                } else {
                    false
                }
            }
        };
        if replace {
            *best = Some(Best { scale, shift, objective });
        }
    }
}

/// Robust scale-only fit `target ≈ s·pred` with `s > 0`.
pub fn solve_scale(pred: &[f64], target: &[f64], weights: &[f64], cfg: &RoeConfig) -> Result<AlignmentResult> {
    check_inputs(pred, target, weights, cfg)?;
    if !pred.iter().zip(weights).any(|(&p, &w)| p != 0.0 && w > 0.0) {
        return Err(Error::Unsolvable("no nonzero prediction with positive weight".into()));
    }
    let trunc = truncation(cfg.objective, target);
    let mut candidates = Vec::new();
    for ((&p, &q), &w) in pred.iter().zip(target).zip(weights) {
        if p == 0.0 || w <= 0.0 {
            continue;
        }
        candidates.push(q / p);
        if let Some(tau) = trunc {
            candidates.push((q + tau) / p);
            candidates.push((q - tau) / p);
        }
    }
    candidates.push(boundary_scale(pred, target, weights, trunc.unwrap_or(0.0)));
    let mut best = None;
    for &s in &candidates {
        Best::offer(&mut best, s, 0.0, objective_value(pred, target, weights, s, 0.0, trunc));
    }
    let b = best.ok_or_else(|| Error::Unsolvable("no positive scale candidate".into()))?;
    Ok(AlignmentResult {
        scale: b.scale,
        shift: 0.0,
        objective: b.objective,
        inlier_count: inliers(pred, target, weights, b.scale, 0.0, trunc),
    })
}

/// Robust affine fit `target ≈ s·pred + t` with `s > 0`.
pub fn solve_scale_shift(pred: &[f64], target: &[f64], weights: &[f64], cfg: &RoeConfig) -> Result<AlignmentResult> {
    check_inputs(pred, target, weights, cfg)?;
    let active: Vec<usize> = (0..pred.len()).filter(|&j| weights[j] > 0.0).collect();
    if active.len() < 2 {
        return Err(Error::Unsolvable("fewer than two positively weighted samples".into()));
    }
    let p0 = pred[active[0]];
    if active.iter().all(|&j| pred[j] == p0) {
        return Err(Error::Unsolvable("constant prediction leaves the scale unidentifiable".into()));
    }
    let trunc = truncation(cfg.objective, target);
    let offsets: &[f64] = match trunc {
        None => &[0.0],
        Some(_) => &[0.0, 1.0, -1.0],
    };
    let tau = trunc.unwrap_or(0.0);
    let mut best = None;
    // every breakpoint line is  s·p_j + t = q_j + o·τ  with o ∈ offsets
    for (ai, &j) in active.iter().enumerate() {
        for &k in &active[ai + 1..] {
            let dp = pred[j] - pred[k];
            if dp == 0.0 {
                continue;
            }
            for &oj in offsets {
                for &ok in offsets {
                    let qj = target[j] + oj * tau;
                    let qk = target[k] + ok * tau;
                    let s = (qj - qk) / dp;
                    let t = qj - s * pred[j];
                    if s > 0.0 {
                        let obj = objective_value(pred, target, weights, s, t, trunc);
                        Best::offer(&mut best, s, t, obj);
                    }
                }
            }
        }
    }
    let s0 = boundary_scale(pred, target, weights, tau);
    for &j in &active {
        for &o in offsets {
            let t = target[j] + o * tau - s0 * pred[j];
            Best::offer(&mut best, s0, t, objective_value(pred, target, weights, s0, t, trunc));
        }
    }
    let b = best.ok_or_else(|| Error::Unsolvable("no positive-scale affine fit".into()))?;
    Ok(AlignmentResult {
        scale: b.scale,
        shift: b.shift,
        objective: b.objective,
        inlier_count: inliers(pred, target, weights, b.scale, b.shift, trunc),
    })
}

pub fn solve(pred: &[f64], target: &[f64], weights: &[f64], cfg: &RoeConfig) -> Result<AlignmentResult> {
    match cfg.mode {
        AlignMode::ScaleOnly => solve_scale(pred, target, weights, cfg),
        AlignMode::ScaleShift => solve_scale_shift(pred, target, weights, cfg),
    }
}
