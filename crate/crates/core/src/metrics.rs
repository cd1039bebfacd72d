//! Error metrics against ground truth, after removing the gauge.
//!
//! Estimates live in the anchor frame, truth in the world frame. Every step
//! the estimated beacon constellation is aligned to the true one by the
//! rigid motion (rotation, translation and optionally a mirror) with the
//! smallest squared error; the robot is carried by the same motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, rotation, NodeId, Pose2, Vec2};

/// Steps at the start of a run left out of every average.
pub const DEFAULT_SKIP_STEPS: usize = 50;

/// One step of a pose stream, estimated or true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub step: usize,
    pub time: f64,
    pub robot: Pose2,
    pub beacons: Vec<(NodeId, Vec2)>,
}

impl PoseRecord {
    pub fn beacon(&self, id: NodeId) -> Option<Vec2> {
        self.beacons.iter().find(|b| b.0 == id).map(|b| b.1)
    }
}

/// `p ↦ R(rotation)·(M p − from) + to`, where `M` mirrors y when `reflection`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: f64,
    pub reflection: bool,
    pub from: Vec2,
    pub to: Vec2,
}

impl Alignment {
    fn mirror(&self, p: &Vec2) -> Vec2 {
        if self.reflection {
            Vec2::new(p.x, -p.y)
        } else {
            *p
        }
    }

    pub fn apply(&self, p: &Vec2) -> Vec2 {
        rotation(self.rotation) * (self.mirror(p) - self.from) + self.to
    }

    pub fn apply_heading(&self, theta: f64) -> f64 {
        let t = if self.reflection { -theta } else { theta };
        normalize_angle(t + self.rotation)
    }
}

/// Least-squares rigid alignment of `est` onto `truth`, mirror allowed.
/// Needs at least two point pairs; ties prefer no mirror.
pub fn align(est: &[Vec2], truth: &[Vec2]) -> Option<Alignment> {
    if est.len() != truth.len() || est.len() < 2 {
        return None;
    }
    let n = est.len() as f64;
    let t_mean = truth.iter().sum::<Vec2>() / n;
    let solve = |reflection: bool| {
        let m = |p: &Vec2| if reflection { Vec2::new(p.x, -p.y) } else { *p };
        let e_mean = est.iter().map(m).sum::<Vec2>() / n;
        let (mut dot, mut cross) = (0.0, 0.0);
        for (e, t) in est.iter().zip(truth) {
            let a = m(e) - e_mean;
            let b = t - t_mean;
            dot += a.dot(&b);
            cross += a.x * b.y - a.y * b.x;
        }
        let al = Alignment {
            rotation: cross.atan2(dot),
            reflection,
            from: e_mean,
            to: t_mean,
        };
        let sse: f64 = est.iter().zip(truth).map(|(e, t)| (al.apply(e) - t).norm_squared()).sum();
        (al, sse)
    };
    let (plain, e0) = solve(false);
    let (mirrored, e1) = solve(true);
    // relative slack so that exact ties do not flip on rounding
    Some(if e1 < e0 - 1e-12 * (1.0 + e0) { mirrored } else { plain })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepErrors {
    pub step: usize,
    pub beacons: Vec<(NodeId, f64)>,
    pub robot: f64,
    pub alignment: Alignment,
}

/// Aligns each estimate to the truth record of the same step. Steps with
/// fewer than two beacons known to both sides are skipped.
pub fn per_step_errors(estimates: &[PoseRecord], truth: &[PoseRecord]) -> Vec<StepErrors> {
    let mut out = Vec::with_capacity(estimates.len());
    let mut k = 0;
    for est in estimates {
        while k < truth.len() && truth[k].step < est.step {
            k += 1;
        }
        let Some(tr) = truth.get(k).filter(|t| t.step == est.step) else {
            continue;
        };
        let pairs: Vec<(NodeId, Vec2, Vec2)> =
            est.beacons.iter().filter_map(|(id, p)| tr.beacon(*id).map(|q| (*id, *p, q))).collect();
        let e: Vec<Vec2> = pairs.iter().map(|p| p.1).collect();
        let t: Vec<Vec2> = pairs.iter().map(|p| p.2).collect();
        let Some(al) = align(&e, &t) else {
            continue;
        };
        out.push(StepErrors {
            step: est.step,
            beacons: pairs.iter().map(|(id, p, q)| (*id, (al.apply(p) - q).norm())).collect(),
            robot: (al.apply(&est.robot.position()) - tr.robot.position()).norm(),
            alignment: al,
        });
    }
    out
}

/// Summary of per-step wall-clock cost, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingSummary {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut v = ms.to_vec();
        v.sort_by(f64::total_cmp);
        let p95 = v[((v.len() as f64 * 0.95).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Self {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p95_ms: p95,
            max_ms: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Beacon position error averaged over steps and beacons.
    pub beacon_err_mean: f64,
    /// Standard deviation of the same samples.
    pub beacon_err_std: f64,
    pub robot_ate_rmse: f64,
    /// Robot position error at the last step.
    pub final_pose_err: f64,
    /// Straight-line distance between the first and last robot estimate of
    /// the window, in the estimate frame.
    pub corridor_length_est: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

/// Metrics over the steps numbered `skip` and later.
pub fn compute_metrics(estimates: &[PoseRecord], truth: &[PoseRecord], skip: usize) -> Result<MetricsReport> {
    let errors: Vec<StepErrors> = per_step_errors(estimates, truth).into_iter().filter(|e| e.step >= skip).collect();
    if errors.is_empty() {
        return Err(Error::EmptyStream);
    }
    let samples: Vec<f64> = errors.iter().flat_map(|e| e.beacons.iter().map(|b| b.1)).collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e.robot * e.robot).sum::<f64>() / errors.len() as f64).sqrt();

    let window: Vec<&PoseRecord> = estimates.iter().filter(|e| e.step >= skip).collect();
    let length = match (window.first(), window.last()) {
        (Some(a), Some(b)) => (b.robot.position() - a.robot.position()).norm(),
        _ => 0.0,
    };
    Ok(MetricsReport {
        beacon_err_mean: mean,
        beacon_err_std: var.sqrt(),
        robot_ate_rmse: rmse,
        final_pose_err: errors.last().unwrap().robot,
        corridor_length_est: length,
        steps: errors.len(),
        timing: None,
    })
}
