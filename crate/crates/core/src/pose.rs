//! Rigid pose estimation from correspondences: weighted Kabsch, the
//! farthest-sampling robust estimator that scores subsets by inlier count,
//! and a minimal-sample RANSAC baseline.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{fps, GeometryError, PointCloud, RigidTransform};

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("source/target length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate correspondence geometry (rank-deficient cross-covariance)")]
    DegenerateGeometry,
    #[error("weights must be non-negative with positive sum")]
    BadWeights,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Matched point pairs: `source[i]` corresponds to `target[i]`.
#[derive(Debug, Clone)]
pub struct PairedPoints {
    pub source: Vec<Point3<f64>>,
    pub target: Vec<Point3<f64>>,
}

impl PairedPoints {
    pub fn new(source: Vec<Point3<f64>>, target: Vec<Point3<f64>>) -> Result<Self, PoseError> {
        if source.len() != target.len() {
            return Err(PoseError::LengthMismatch(source.len(), target.len()));
        }
        Ok(Self { source, target })
    }

    pub fn from_matches(
        source: &PointCloud,
        target: &PointCloud,
        pairs: &[(usize, usize)],
    ) -> Self {
        Self {
            source: pairs.iter().map(|&(i, _)| source.point(i)).collect(),
            target: pairs.iter().map(|&(_, j)| target.point(j)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PairedPoints {
        PairedPoints {
            source: idx.iter().map(|&i| self.source[i]).collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
        }
    }
}

/// Least-squares rigid transform taking source points onto target points
/// (optionally weighted): SVD of the weighted cross-covariance with a
/// determinant correction so the result is a proper rotation.
pub fn kabsch(pairs: &PairedPoints, weights: Option<&[f64]>) -> Result<RigidTransform, PoseError> {
    let n = pairs.len();
    if n < 3 {
        return Err(PoseError::TooFewCorrespondences(n));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(PoseError::LengthMismatch(w.len(), n));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(PoseError::BadWeights);
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    let mut cx = Vector3::zeros();
    let mut cy = Vector3::zeros();
    for i in 0..n {
        cx += w[i] * pairs.source[i].coords;
        cy += w[i] * pairs.target[i].coords;
    }
    cx /= wsum;
    cy /= wsum;

    let mut h = Matrix3::zeros();
    for i in 0..n {
        let x = pairs.source[i].coords - cx;
        let y = pairs.target[i].coords - cy;
        h += w[i] * x * y.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    // y ~ R x needs R = V U^T, with the sign of V's last column flipped when
    // the raw product would reflect.
    let v = vt.transpose();
    let det = (v * u.transpose()).determinant();
    let mut v_fixed = v;
    if det < 0.0 {
        let col = -v_fixed.column(2);
        v_fixed.set_column(2, &col);
    }
    let r = v_fixed * u.transpose();
    // Rank-deficient H (collinear support) makes the rotation ill-defined.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(PoseError::DegenerateGeometry);
    }
    let t = cy - r * cx;
    RigidTransform::new(r, t).map_err(|_| PoseError::DegenerateGeometry)
}

const REFIT_ROUNDS: usize = 20;

fn inliers(pairs: &PairedPoints, t: &RigidTransform, threshold: f64) -> Vec<usize> {
    (0..pairs.len())
        .filter(|&i| {
            (t.apply_point(&pairs.source[i]) - pairs.target[i]).norm() < threshold
        })
        .collect()
}

/// Farthest-sampling robust registration.
#[derive(Debug, Clone)]
pub struct FsrConfig {
    /// Candidate hypotheses.
    pub iterations: usize,
    /// Correspondences per subset (capped at the available count).
    pub subset_size: usize,
    /// Inlier residual threshold in target units.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for FsrConfig {
    fn default() -> Self {
        Self {
            iterations: 64,
            subset_size: 24,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

/// Estimate of a robust fit: the pose, the surviving inlier indices into the
/// input pairs, and the hypothesis count evaluated.
#[derive(Debug, Clone)]
pub struct RobustEstimate {
    pub transform: RigidTransform,
    pub inliers: Vec<usize>,
    pub hypotheses: usize,
}

/// Robust estimation over putative correspondences: each hypothesis fits
/// Kabsch on a farthest-point-sampled subset of the source side (a fresh
/// seeded start point per iteration), keeps the hypothesis with the most
/// inliers, then refits on those inliers.
pub fn fsr(pairs: &PairedPoints, cfg: &FsrConfig) -> Result<RobustEstimate, PoseError> {
    let n = pairs.len();
    if n < 3 {
        return Err(PoseError::TooFewCorrespondences(n));
    }
    let subset = cfg.subset_size.min(n);
    let src_cloud = PointCloud::new(pairs.source.clone()).map_err(PoseError::Geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(Vec<usize>, RigidTransform)> = None;
    for _ in 0..cfg.iterations {
        let start = rng.gen_range(0..n);
        let idx = fps(&src_cloud, subset, start)?;
        let sub = pairs.select(&idx);
        let Ok(t) = kabsch(&sub, None) else {
            continue;
        };
        let inl = inliers(pairs, &t, cfg.inlier_threshold);
        if best.as_ref().map_or(true, |(b, _)| inl.len() > b.len()) {
            best = Some((inl, t));
        }
    }
    let (raw_inliers, raw_transform) = best.ok_or(PoseError::DegenerateGeometry)?;
    // Consensus polishing: trimmed refits starting at the median residual
    // and annealing down to the inlier threshold. A best-of-N subset fit is
    // typically a few degrees off — too coarse to collect its consensus at
    // tau directly — but refitting on the closer half of the pairs contracts
    // onto the true pose in a handful of rounds. The polished transform is
    // kept only when it does not lose inliers against the raw hypothesis.
    let mut transform = raw_transform;
    let mut previous: Vec<usize> = Vec::new();
    for _ in 0..REFIT_ROUNDS {
        let mut residuals: Vec<f64> = (0..pairs.len())
            .map(|i| (transform.apply_point(&pairs.source[i]) - pairs.target[i]).norm())
            .collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let threshold = cfg.inlier_threshold.max(median);
        let mut selected: Vec<usize> = (0..pairs.len())
            .filter(|&i| residuals[i] < threshold)
            .collect();
        if selected.len() < 3 {
            // fall back to the three closest pairs
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.sort_by(|&a, &b| residuals[a].partial_cmp(&residuals[b]).unwrap().then(a.cmp(&b)));
            selected = order[..3].to_vec();
        }
        if selected == previous {
            break;
        }
        let Ok(refit) = kabsch(&pairs.select(&selected), None) else {
            break;
        };
        transform = refit;
        previous = selected;
        residuals.clear();
    }
    let polished_inliers = inliers(pairs, &transform, cfg.inlier_threshold);
    let (transform, inl) = if polished_inliers.len() >= raw_inliers.len() {
        (transform, polished_inliers)
    } else {
        (raw_transform, raw_inliers)
    };
    if inl.len() < 3 {
        return Err(PoseError::DegenerateGeometry);
    }
    Ok(RobustEstimate {
        transform,
        inliers: inl,
        hypotheses: cfg.iterations,
    })
}

/// Classic 3-point RANSAC over the same putative correspondences.
#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

pub fn ransac(pairs: &PairedPoints, cfg: &RansacConfig) -> Result<RobustEstimate, PoseError> {
    let n = pairs.len();
    if n < 3 {
        return Err(PoseError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..cfg.iterations {
        let mut idx = [0usize; 3];
        loop {
            for v in &mut idx {
                *v = rng.gen_range(0..n);
            }
            if idx[0] != idx[1] && idx[0] != idx[2] && idx[1] != idx[2] {
                break;
            }
        }
        let Ok(t) = kabsch(&pairs.select(&idx), None) else {
            continue;
        };
        let inl = inliers(pairs, &t, cfg.inlier_threshold);
        if best.as_ref().map_or(true, |b| inl.len() > b.len()) {
            best = Some(inl);
        }
    }
    let inl = best.ok_or(PoseError::DegenerateGeometry)?;
    if inl.len() < 3 {
        return Err(PoseError::DegenerateGeometry);
    }
    let transform = kabsch(&pairs.select(&inl), None)?;
    let inliers = inliers(pairs, &transform, cfg.inlier_threshold);
    Ok(RobustEstimate {
        transform,
        inliers,
        hypotheses: cfg.iterations,
    })
}
