//! Evaluation metrics: anisotropic RMSE/MAE on Euler angles and
//! translation, isotropic rotation/translation errors, point-wise RMSE
//! under the estimated motion, correspondence precision/accuracy/recall,
//! inlier ratio, and failure rate.

use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::matching::MatchSet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot aggregate over zero cases")]
    Empty,
    #[error("matrix is not a rotation: {0}")]
    NotRotation(String),
}

const ROTATION_TOL: f64 = 1e-6;

fn check_rotation(r: &Matrix3<f64>) -> Result<(), MetricsError> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
        return Err(MetricsError::NotRotation(format!(
            "orthonormality deviation {dev:.3e}, det {}",
            r.determinant()
        )));
    }
    Ok(())
}

/// Intrinsic ZYX Euler angles (yaw, pitch, roll) in degrees.
fn euler_zyx_deg(r: &Matrix3<f64>) -> [f64; 3] {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let (yaw, roll) = if pitch.cos().abs() > 1e-9 {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    } else {
        // gimbal lock: fold roll into yaw
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    };
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

fn wrap_deg(x: f64) -> f64 {
    let mut v = (x + 180.0) % 360.0;
    if v < 0.0 {
        v += 360.0;
    }
    v - 180.0
}

/// Per-axis absolute Euler-angle errors (degrees, ZYX intrinsic, wrapped
/// to [-180, 180]) and the isotropic geodesic rotation error in degrees.
pub fn rotation_errors(
    r_est: &Matrix3<f64>,
    r_gt: &Matrix3<f64>,
) -> Result<([f64; 3], f64), MetricsError> {
    check_rotation(r_est)?;
    check_rotation(r_gt)?;
    let est = euler_zyx_deg(r_est);
    let gt = euler_zyx_deg(r_gt);
    let aniso = [
        wrap_deg(est[0] - gt[0]).abs(),
        wrap_deg(est[1] - gt[1]).abs(),
        wrap_deg(est[2] - gt[2]).abs(),
    ];
    let c = (((r_gt.transpose() * r_est).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok((aniso, c.acos().to_degrees()))
}

/// RMSE and MAE of a flat list of error values (one entry per case, or
/// per case-axis for anisotropic metrics).
pub fn rmse_mae(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mae = values.iter().map(|v| v.abs()).sum::<f64>() / n;
    Ok((rmse, mae))
}

/// Point-wise RMSE between the ground-truth and estimated motion applied
/// to the same source cloud.
pub fn l_rmse(source: &[Point3<f64>], t_est: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    assert!(!source.is_empty(), "l_rmse needs a nonempty source");
    let sum: f64 = source
        .iter()
        .map(|p| (t_gt.apply_point(p) - t_est.apply_point(p)).norm_squared())
        .sum();
    (sum / source.len() as f64).sqrt()
}

/// Full per-case registration error summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseErrors {
    pub euler_abs_deg: [f64; 3],
    pub trans_abs: [f64; 3],
    pub l_r_deg: f64,
    pub l_t: f64,
    pub l_rmse: f64,
}

pub fn case_errors(
    source: &[Point3<f64>],
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
) -> Result<CaseErrors, MetricsError> {
    let (euler_abs_deg, l_r_deg) = rotation_errors(&t_est.rotation, &t_gt.rotation)?;
    let dt = t_gt.translation - t_est.translation;
    Ok(CaseErrors {
        euler_abs_deg,
        trans_abs: [dt[0].abs(), dt[1].abs(), dt[2].abs()],
        l_r_deg,
        l_t: dt.norm(),
        l_rmse: l_rmse(source, t_est, t_gt),
    })
}

/// Aggregate registration metrics over a set of cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub rmse_r_deg: f64,
    pub mae_r_deg: f64,
    pub rmse_t: f64,
    pub mae_t: f64,
    pub l_r_deg: f64,
    pub l_t: f64,
    pub l_rmse: f64,
    pub failure_rate: f64,
    pub cases: Vec<CaseErrors>,
}

/// Thresholds for declaring a case failed.
#[derive(Debug, Clone, Copy)]
pub struct FailureThresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        Self {
            rot_deg: 5.0,
            trans: 1.0,
        }
    }
}

pub fn aggregate(
    cases: Vec<CaseErrors>,
    fail: FailureThresholds,
) -> Result<RegistrationReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let euler: Vec<f64> = cases.iter().flat_map(|c| c.euler_abs_deg).collect();
    let trans: Vec<f64> = cases.iter().flat_map(|c| c.trans_abs).collect();
    let (rmse_r_deg, mae_r_deg) = rmse_mae(&euler)?;
    let (rmse_t, mae_t) = rmse_mae(&trans)?;
    let n = cases.len() as f64;
    Ok(RegistrationReport {
        rmse_r_deg,
        mae_r_deg,
        rmse_t,
        mae_t,
        l_r_deg: cases.iter().map(|c| c.l_r_deg).sum::<f64>() / n,
        l_t: cases.iter().map(|c| c.l_t).sum::<f64>() / n,
        l_rmse: cases.iter().map(|c| c.l_rmse).sum::<f64>() / n,
        failure_rate: failure_rate(&cases, fail)?,
        cases,
    })
}

/// Fraction of cases whose isotropic errors exceed either threshold.
pub fn failure_rate(cases: &[CaseErrors], fail: FailureThresholds) -> Result<f64, MetricsError> {
    assert!(fail.rot_deg > 0.0 && fail.trans > 0.0, "thresholds must be positive");
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let failed = cases
        .iter()
        .filter(|c| c.l_r_deg > fail.rot_deg || c.l_t > fail.trans)
        .count();
    Ok(failed as f64 / cases.len() as f64)
}

/// Correspondence quality: precision, accuracy, recall, inlier ratio,
/// plus the underlying confusion counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingReport {
    pub precision: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub inlier_ratio: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Scores a predicted match set against ground truth. A predicted pair
/// (i, j) is a true positive when the ground-truth motion carries source
/// point i within `dist_threshold` of target point j. Recall is counted
/// over ground-truth-matchable source points; true negatives are source
/// points that are correctly left unmatched.
pub fn matching_par(
    matches: &MatchSet,
    gt_correspondence: &[Option<usize>],
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    t_gt: &RigidTransform,
    dist_threshold: f64,
) -> MatchingReport {
    assert!(dist_threshold > 0.0, "threshold must be positive");
    assert_eq!(gt_correspondence.len(), source.len());
    let mut predicted = vec![false; source.len()];
    let mut tp = 0usize;
    for &(i, j) in &matches.pairs {
        predicted[i] = true;
        if (t_gt.apply_point(&source[i]) - target[j]).norm() < dist_threshold {
            tp += 1;
        }
    }
    let fp = matches.pairs.len() - tp;
    let matchable = gt_correspondence.iter().filter(|c| c.is_some()).count();
    let fn_ = matchable.saturating_sub(tp);
    let tn = gt_correspondence
        .iter()
        .zip(&predicted)
        .filter(|(gt, &pred)| gt.is_none() && !pred)
        .count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    MatchingReport {
        precision: ratio(tp, tp + fp),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        recall: ratio(tp, tp + fn_),
        inlier_ratio: ratio(tp, matches.pairs.len()),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
    }
}
