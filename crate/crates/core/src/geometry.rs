//! Point cloud primitives: containers, nearest-neighbor search, covariance
//! eigen-analysis, local reference frames, triangle-fan normal estimation,
//! rigid transforms and farthest point sampling.
//!
//! Everything here runs in f64; the tolerances of the rigid-invariance
//! checks downstream are not reachable in f32.

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("degenerate neighborhood: {0} points, need at least 3")]
    DegenerateNeighborhood(usize),
    #[error("negative eigenvalue {0} beyond tolerance")]
    NegativeEigenvalue(f64),
    #[error("sample count {requested} exceeds cloud size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("not a rigid transform: {0}")]
    NotRigid(String),
}

/// An ordered set of 3D points at model scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinite(i));
            }
        }
        Ok(Self { points })
    }

    pub fn from_coords(coords: &[[f64; 3]]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum: Vector3<f64> = self.points.iter().map(|p| p.coords).sum();
        Point3::from(sum / self.points.len() as f64)
    }

    /// Returns a copy translated so its centroid is at the origin, plus the
    /// removed centroid.
    pub fn centered(&self) -> (PointCloud, Vector3<f64>) {
        let c = self.centroid().coords;
        let pts = self.points.iter().map(|p| Point3::from(p.coords - c)).collect();
        (PointCloud { points: pts }, c)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Rotation + translation in SE(3). The rotation is validated to be a
/// proper orthogonal matrix on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const ORTHONORMALITY_TOL: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let rtr = rotation.transpose() * rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > Self::ORTHONORMALITY_TOL {
            return Err(GeometryError::NotRigid(format!(
                "R^T R deviates from identity by {dev:.3e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMALITY_TOL {
            return Err(GeometryError::NotRigid(format!("det(R) = {det}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle,
        )
        .into_inner();
        Self { rotation, translation }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// self ∘ other: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic rotation angle of this transform, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.rotation[(r, c)];
            }
            m[r][3] = self.translation[r];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn from_homogeneous(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::from_fn(|r, c| m[r][c]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

// ---------------------------------------------------------------------------
// kd-tree
// ---------------------------------------------------------------------------

/// Immutable kd-tree over a cloud, supporting k-nearest and radius-bounded
/// queries. Queries return indices sorted ascending by distance, with index
/// order breaking exact ties so results are deterministic.
#[derive(Debug)]
pub struct NeighborhoodIndex {
    points: Vec<Point3<f64>>,
    // Flattened tree: node i splits `order[lo..hi]` at its median.
    order: Vec<u32>,
}

struct HeapEntry {
    dist2: f64,
    index: u32,
}

impl NeighborhoodIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points = cloud.points.clone();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_rec(&points, &mut order, 0);
        Self { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// k nearest neighbors of `query`, optionally bounded by `radius_cap`
    /// and optionally excluding one index (self-exclusion). Returns at most
    /// k indices; fewer if the cloud or radius does not supply them.
    pub fn knn(
        &self,
        query: &Point3<f64>,
        k: usize,
        radius_cap: Option<f64>,
        exclude: Option<usize>,
    ) -> Result<Vec<usize>, GeometryError> {
        if self.points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        assert!(k >= 1, "k must be at least 1");
        if let Some(r) = radius_cap {
            assert!(r > 0.0, "radius_cap must be positive");
        }
        let cap2 = radius_cap.map(|r| r * r).unwrap_or(f64::INFINITY);
        // best: worst-first list of (dist2, index), at most k entries.
        let mut best: Vec<HeapEntry> = Vec::with_capacity(k + 1);
        self.search(query, k, cap2, exclude, 0, self.points.len(), 0, &mut best);
        best.sort_by(|a, b| {
            a.dist2
                .partial_cmp(&b.dist2)
                .unwrap()
                .then(a.index.cmp(&b.index))
        });
        Ok(best.iter().map(|e| e.index as usize).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        query: &Point3<f64>,
        k: usize,
        cap2: f64,
        exclude: Option<usize>,
        lo: usize,
        hi: usize,
        axis: usize,
        best: &mut Vec<HeapEntry>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d2 = (p - query).norm_squared();
        if Some(idx) != exclude && d2 <= cap2 {
            let worse = |e: &HeapEntry| {
                e.dist2 > d2 || (e.dist2 == d2 && e.index as usize > idx)
            };
            if best.len() < k || worse(best.last().unwrap()) {
                let pos = best.partition_point(|e| !worse(e));
                best.insert(
                    pos,
                    HeapEntry {
                        dist2: d2,
                        index: idx as u32,
                    },
                );
                if best.len() > k {
                    best.pop();
                }
            }
        }
        let delta = query[axis] - p[axis];
        let next_axis = (axis + 1) % 3;
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(query, k, cap2, exclude, near.0, near.1, next_axis, best);
        let plane2 = delta * delta;
        let need = best.len() < k || plane2 <= best.last().unwrap().dist2;
        if need && plane2 <= cap2 {
            self.search(query, k, cap2, exclude, far.0, far.1, next_axis, best);
        }
    }
}

fn build_rec(points: &[Point3<f64>], order: &mut [u32], axis: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let (left, right) = order.split_at_mut(mid);
    build_rec(points, left, (axis + 1) % 3);
    build_rec(points, &mut right[1..], (axis + 1) % 3);
}

// ---------------------------------------------------------------------------
// Covariance analysis, A/P/O, LRF, normals
// ---------------------------------------------------------------------------

/// Per-point geometric summary: covariance eigenvalues, the derived
/// anisotropy/planarity/omnivariance scalars, the local reference frame and
/// the triangle-fan surface normal.
#[derive(Debug, Clone)]
pub struct LocalGeometry {
    pub anisotropy: f64,
    pub planarity: f64,
    pub omnivariance: f64,
    /// Columns are the sign-disambiguated eigenvectors (u, v, w), det = +1.
    pub lrf: Matrix3<f64>,
    pub normal: Vector3<f64>,
    /// Sorted descending.
    pub eigenvalues: [f64; 3],
}

/// Eigen-decomposition of the 3x3 covariance of mean-centered `neighbors`.
/// Eigenvalues are sorted descending, eigenvectors returned as the matching
/// columns.
pub fn covariance_eigen(
    neighbors: &[Point3<f64>],
) -> Result<(Vector3<f64>, Matrix3<f64>), GeometryError> {
    if neighbors.len() < 3 {
        return Err(GeometryError::DegenerateNeighborhood(neighbors.len()));
    }
    let n = neighbors.len() as f64;
    let mean: Vector3<f64> = neighbors.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    if cov.abs().max() == 0.0 {
        // All points coincident: zero spectrum, canonical identity basis.
        return Ok((Vector3::zeros(), Matrix3::identity()));
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vals = Vector3::new(
        eig.eigenvalues[idx[0]].max(0.0),
        eig.eigenvalues[idx[1]].max(0.0),
        eig.eigenvalues[idx[2]].max(0.0),
    );
    let vecs = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    Ok((vals, vecs))
}

/// Anisotropy, planarity and omnivariance from sorted eigenvalues.
/// A fully degenerate spectrum (λ1 = 0) maps to (0, 0, 0).
pub fn compute_apo(eigenvalues: &[f64; 3]) -> Result<(f64, f64, f64), GeometryError> {
    let mut l = *eigenvalues;
    for v in &mut l {
        if *v < -1e-12 {
            return Err(GeometryError::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0);
    }
    debug_assert!(l[0] >= l[1] && l[1] >= l[2], "eigenvalues must be sorted descending");
    if l[0] == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let a = (l[0] - l[2]) / l[0];
    let p = (l[1] - l[2]) / l[0];
    let o = (l[0] * l[1] * l[2]).cbrt();
    Ok((a, p, o))
}

const SIGN_TOL: f64 = 1e-12;

fn disambiguate(v: Vector3<f64>, toward: &Vector3<f64>) -> Vector3<f64> {
    let d = v.dot(toward);
    if d.abs() >= SIGN_TOL {
        return if d >= 0.0 { v } else { -v };
    }
    // Fall back to the sign of the largest-magnitude component (lowest
    // index on exact magnitude ties) so the choice is deterministic.
    let mut arg = 0;
    for i in 1..3 {
        if v[i].abs() > v[arg].abs() {
            arg = i;
        }
    }
    if v[arg] >= 0.0 {
        v
    } else {
        -v
    }
}

/// Builds the local reference frame from covariance eigenvectors: u and w
/// get their signs fixed toward (point - centroid), v closes a right-handed
/// basis.
pub fn compute_lrf(
    eigenvectors: &Matrix3<f64>,
    point: &Point3<f64>,
    neighborhood_centroid: &Point3<f64>,
) -> Matrix3<f64> {
    let toward = point.coords - neighborhood_centroid.coords;
    let u = disambiguate(eigenvectors.column(0).into_owned(), &toward);
    let w = disambiguate(eigenvectors.column(2).into_owned(), &toward);
    let v = w.cross(&u);
    Matrix3::from_columns(&[u, v, w])
}

const DEGENERATE_TRIANGLE_AREA: f64 = 1e-14;

/// Surface normal from the fan of k-1 triangles over azimuth-sorted
/// neighbors, weighted by a softmax over triangle areas. Degenerate
/// triangles contribute a zero normal and enter the softmax with area 0;
/// if every triangle is degenerate the provisional axis is returned.
pub fn estimate_normal(
    point: &Point3<f64>,
    neighbors: &[Point3<f64>],
    provisional_axis: &Vector3<f64>,
) -> Result<Vector3<f64>, GeometryError> {
    if neighbors.len() < 3 {
        return Err(GeometryError::DegenerateNeighborhood(neighbors.len()));
    }
    let axis = provisional_axis.normalize();
    // Tangent basis anchored on the data so the azimuthal ordering rotates
    // with the neighborhood: azimuth zero points at the first neighbor whose
    // tangent-plane projection is non-degenerate.
    let mut e1 = Vector3::zeros();
    for nb in neighbors {
        let d = nb.coords - point.coords;
        let proj = d - axis * d.dot(&axis);
        if proj.norm() > SIGN_TOL {
            e1 = proj.normalize();
            break;
        }
    }
    if e1.norm() == 0.0 {
        // Every neighbor sits on the axis line: no fan exists.
        return Ok(axis);
    }
    let e2 = axis.cross(&e1);

    let mut sorted: Vec<(f64, usize)> = neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let d = nb.coords - point.coords;
            (d.dot(&e2).atan2(d.dot(&e1)), i)
        })
        .collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut tri_normals = Vec::with_capacity(neighbors.len() - 1);
    let mut areas = Vec::with_capacity(neighbors.len() - 1);
    for pair in sorted.windows(2) {
        let a = neighbors[pair[0].1].coords - point.coords;
        let b = neighbors[pair[1].1].coords - point.coords;
        let cross = a.cross(&b);
        let area = cross.norm() / 2.0;
        if area < DEGENERATE_TRIANGLE_AREA {
            tri_normals.push(Vector3::zeros());
            areas.push(0.0);
        } else {
            let mut z = cross / cross.norm();
            if z.dot(&axis) < 0.0 {
                z = -z;
            }
            tri_normals.push(z);
            areas.push(area);
        }
    }
    if tri_normals.iter().all(|z| z.norm() == 0.0) {
        return Ok(axis);
    }
    let max_area = areas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = areas.iter().map(|&a| (a - max_area).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut n = Vector3::zeros();
    for (z, e) in tri_normals.iter().zip(&exps) {
        n += z * (e / total);
    }
    if n.norm() == 0.0 {
        return Ok(axis);
    }
    Ok(n.normalize())
}

/// Greedy farthest point sampling: `start` first, then each pick maximizes
/// the minimum distance to the already-selected set. Deterministic; exact
/// ties resolved toward the lowest index.
pub fn fps(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>, GeometryError> {
    let n = cloud.len();
    if k > n {
        return Err(GeometryError::SampleTooLarge {
            requested: k,
            available: n,
        });
    }
    assert!(start < n, "start index out of range");
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..k {
        let cp = cloud.points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..n {
            let d2 = (cloud.points[i] - cp).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 && !selected.contains(&i) {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}
