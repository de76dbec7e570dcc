//! LoGDesc assembly: handcrafted geometric feature vectors (f0, f1, f2),
//! LRF-projected neighbor normals, the shared-weight CNN with max-pool
//! aggregation, and rotary-encoded self-attention producing the per-point
//! descriptor.
//!
//! Coordinates are consumed mean-centered: raw positions in f0 would make
//! the descriptor translation-sensitive, so callers center each cloud and
//! compose the offset back into the estimated pose.

use std::rc::Rc;

use nalgebra::{Point3, Vector3};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

use crate::geometry::{
    compute_apo, compute_lrf, covariance_eigen, estimate_normal, GeometryError, LocalGeometry,
    NeighborhoodIndex, PointCloud,
};
use crate::nn::{BoundParams, Element, Graph, NnError, ParamSet, TensorId};

pub const F0_DIM: usize = 6;
pub const F1_DIM: usize = 12;
pub const F2_DIM: usize = 15;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("feature dimension {d} must be divisible by 6 (rotary blocks) and by {groups} groups")]
    BadDimension { d: usize, groups: usize },
    #[error("cloud has {size} points but k = {k}; choose a smaller k")]
    CloudSmallerThanK { size: usize, k: usize },
    #[error("attention heads must divide d into 6-divisible chunks: d = {d}, heads = {heads}")]
    BadHeadCount { d: usize, heads: usize },
}

/// Descriptor hyper-parameters; defaults follow the evaluation protocol
/// (k = 30, d = 132, 4 attention layers, 128-neighbor PCA capped at radius
/// 0.3).
#[derive(Debug, Clone)]
pub struct DescriptorConfig {
    pub k: usize,
    pub d: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub use_a: bool,
    pub use_p: bool,
    pub use_o: bool,
    pub use_n: bool,
    pub pca_max_neighbors: usize,
    pub pca_radius: f64,
    pub groups: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            k: 30,
            d: 132,
            attention_layers: 4,
            attention_heads: 1,
            use_a: true,
            use_p: true,
            use_o: true,
            use_n: true,
            pca_max_neighbors: 128,
            pca_radius: 0.3,
            groups: 4,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.d % 6 != 0 || self.d % self.groups != 0 {
            return Err(DescriptorError::BadDimension {
                d: self.d,
                groups: self.groups,
            });
        }
        if self.d % self.attention_heads != 0 || (self.d / self.attention_heads) % 6 != 0 {
            return Err(DescriptorError::BadHeadCount {
                d: self.d,
                heads: self.attention_heads,
            });
        }
        Ok(())
    }

    /// Channel plan of the shared pointwise CNN: 15 widening to d.
    pub fn cnn_channels(&self) -> [usize; 4] {
        [F2_DIM, 32.min(self.d), 64.min(self.d), self.d]
    }
}

/// Per-point A/P/O, LRF and triangle-fan normal for a whole cloud.
///
/// The PCA neighborhood collects up to `pca_max_neighbors` points within
/// `pca_radius` (the query point included); when the radius starves it
/// below 3 points the three unbounded nearest neighbors are used instead.
/// The triangle fan uses the k nearest neighbors excluding the point.
pub fn compute_local_geometry(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    cfg: &DescriptorConfig,
) -> Result<Vec<LocalGeometry>, DescriptorError> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let mut pca_idx = index.knn(&p, cfg.pca_max_neighbors, Some(cfg.pca_radius), None)?;
        if pca_idx.len() < 3 {
            pca_idx = index.knn(&p, 3, None, None)?;
        }
        let pca_pts: Vec<Point3<f64>> = pca_idx.iter().map(|&j| cloud.point(j)).collect();
        let (vals, vecs) = covariance_eigen(&pca_pts)?;
        let (anisotropy, planarity, omnivariance) =
            compute_apo(&[vals[0], vals[1], vals[2]])?;
        let centroid = Point3::from(
            pca_pts.iter().map(|q| q.coords).sum::<Vector3<f64>>() / pca_pts.len() as f64,
        );
        let lrf = compute_lrf(&vecs, &p, &centroid);
        let axis = lrf.column(2).into_owned();

        let tri_idx = index.knn(&p, cfg.k, None, Some(i))?;
        let normal = if tri_idx.len() < 3 {
            axis
        } else {
            let tri_pts: Vec<Point3<f64>> = tri_idx.iter().map(|&j| cloud.point(j)).collect();
            estimate_normal(&p, &tri_pts, &axis)?
        };
        out.push(LocalGeometry {
            anisotropy,
            planarity,
            omnivariance,
            lrf,
            normal,
            eigenvalues: [vals[0], vals[1], vals[2]],
        });
    }
    Ok(out)
}

/// k neighbor indices per point (self excluded), padded by repeating the
/// farthest available neighbor so downstream tensors keep a fixed k.
pub fn neighbor_indices(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    k: usize,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mut nbrs = index.knn(&cloud.point(i), k, None, Some(i))?;
        if let Some(&last) = nbrs.last() {
            while nbrs.len() < k {
                nbrs.push(last);
            }
        } else {
            // single-point cloud: fall back to self
            nbrs = vec![i; k];
        }
        out.push(nbrs);
    }
    Ok(out)
}

/// f0_i = [x_i, A_i, P_i, O_i]; ablated channels are zeroed in place so the
/// dimension stays 6.
pub fn build_f0(
    cloud: &PointCloud,
    geometry: &[LocalGeometry],
    cfg: &DescriptorConfig,
) -> Array2<f64> {
    let n = cloud.len();
    let mut f0 = Array2::zeros((n, F0_DIM));
    for i in 0..n {
        let p = cloud.point(i);
        f0[[i, 0]] = p.x;
        f0[[i, 1]] = p.y;
        f0[[i, 2]] = p.z;
        f0[[i, 3]] = if cfg.use_a { geometry[i].anisotropy } else { 0.0 };
        f0[[i, 4]] = if cfg.use_p { geometry[i].planarity } else { 0.0 };
        f0[[i, 5]] = if cfg.use_o { geometry[i].omnivariance } else { 0.0 };
    }
    f0
}

/// Edge features: row (i, j) is [f0_i, f0_j - f0_i].
pub fn build_f1(f0: &Array2<f64>, neighbors: &[Vec<usize>]) -> Array3<f64> {
    let n = f0.shape()[0];
    let k = neighbors.first().map_or(0, Vec::len);
    let mut f1 = Array3::zeros((n, k, F1_DIM));
    for i in 0..n {
        for (jj, &j) in neighbors[i].iter().enumerate() {
            for c in 0..F0_DIM {
                f1[[i, jj, c]] = f0[[i, c]];
                f1[[i, jj, F0_DIM + c]] = f0[[j, c]] - f0[[i, c]];
            }
        }
    }
    f1
}

/// Neighbor normals expressed in the center point's LRF (dot products with
/// the frame axes, which keeps the rows unit-norm and rotation-invariant up
/// to the LRF sign rule).
pub fn project_neighbor_normals(
    geometry: &[LocalGeometry],
    neighbors: &[Vec<usize>],
) -> Array3<f64> {
    let n = geometry.len();
    let k = neighbors.first().map_or(0, Vec::len);
    let mut out = Array3::zeros((n, k, 3));
    for i in 0..n {
        let lrf_t = geometry[i].lrf.transpose();
        for (jj, &j) in neighbors[i].iter().enumerate() {
            let projected = lrf_t * geometry[j].normal;
            out[[i, jj, 0]] = projected.x;
            out[[i, jj, 1]] = projected.y;
            out[[i, jj, 2]] = projected.z;
        }
    }
    out
}

/// f2 = [f1 (12), n_lrf (3)] per neighbor row; `use_n = false` zeroes the
/// normal channels.
pub fn build_f2(f1: &Array3<f64>, projected_normals: &Array3<f64>, use_n: bool) -> Array3<f64> {
    let (n, k, _) = f1.dim();
    let mut f2 = Array3::zeros((n, k, F2_DIM));
    for i in 0..n {
        for jj in 0..k {
            for c in 0..F1_DIM {
                f2[[i, jj, c]] = f1[[i, jj, c]];
            }
            if use_n {
                for c in 0..3 {
                    f2[[i, jj, F1_DIM + c]] = projected_normals[[i, jj, c]];
                }
            }
        }
    }
    f2
}

/// Handcrafted 15-dim descriptor: max over the k rows of f2. Used when no
/// trained weights are supplied.
pub fn geometric_descriptor(f2: &Array3<f64>) -> Array2<f64> {
    let (n, k, c) = f2.dim();
    let mut out = Array2::from_elem((n, c), f64::NEG_INFINITY);
    for i in 0..n {
        for jj in 0..k {
            for cc in 0..c {
                if f2[[i, jj, cc]] > out[[i, cc]] {
                    out[[i, cc]] = f2[[i, jj, cc]];
                }
            }
        }
    }
    out
}

/// Per-pair rotation angle tables for the rotary position encoding:
/// block j of six dimensions rotates its three coordinate pairs by
/// (x θ_j, y θ_j, z θ_j) with θ_j = 10000^(-6 (j - 1) / d).
pub fn rotary_tables<E: Element>(
    positions: &[Point3<f64>],
    d: usize,
) -> Result<(Rc<Array2<E>>, Rc<Array2<E>>), DescriptorError> {
    if d % 6 != 0 {
        return Err(DescriptorError::BadDimension { d, groups: 1 });
    }
    let n = positions.len();
    let half = d / 2;
    let mut cos = Array2::<E>::zeros((n, half));
    let mut sin = Array2::<E>::zeros((n, half));
    for (i, p) in positions.iter().enumerate() {
        for pair in 0..half {
            let block = pair / 3;
            let coord = match pair % 3 {
                0 => p.x,
                1 => p.y,
                _ => p.z,
            };
            let theta = 10000f64.powf(-6.0 * block as f64 / d as f64);
            let angle = coord * theta;
            cos[[i, pair]] = E::from_f64(angle.cos());
            sin[[i, pair]] = E::from_f64(angle.sin());
        }
    }
    Ok((Rc::new(cos), Rc::new(sin)))
}

/// Applies the block-diagonal rotary rotation to plain data (no tape);
/// useful for direct property checks of the encoding.
pub fn rotary_apply(position: &Point3<f64>, d: usize, v: &[f64]) -> Result<Vec<f64>, DescriptorError> {
    let (cos, sin) = rotary_tables::<f64>(&[*position], d)?;
    let mut out = v.to_vec();
    for p in 0..d / 2 {
        let (c, s) = (cos[[0, p]], sin[[0, p]]);
        out[2 * p] = c * v[2 * p] - s * v[2 * p + 1];
        out[2 * p + 1] = s * v[2 * p] + c * v[2 * p + 1];
    }
    Ok(out)
}

fn cast_const<E: Element>(g: &mut Graph<E>, a: &ArrayD<f64>) -> TensorId {
    g.constant(a.mapv(E::from_f64))
}

/// Shared pointwise linear map: [n, k, c_in] x [c_in, c_out] + bias.
pub fn pointwise_linear<E: Element>(
    g: &mut Graph<E>,
    x: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId, NnError> {
    let shape = g.shape(x).to_vec();
    let (n, k, c_in) = (shape[0], shape[1], shape[2]);
    let c_out = g.shape(weight)[1];
    let flat = g.reshape(x, vec![n * k, c_in])?;
    let y = g.matmul(flat, weight)?;
    let y = g.add_broadcast(y, bias)?;
    g.reshape(y, vec![n, k, c_out])
}

/// One residual rotary self-attention layer (single set of parameters,
/// optionally split into heads whose width stays 6-divisible).
#[allow(clippy::too_many_arguments)]
fn rotary_attention_layer<E: Element>(
    g: &mut Graph<E>,
    f: TensorId,
    bound: &BoundParams,
    prefix: &str,
    cos: &Rc<Array2<E>>,
    sin: &Rc<Array2<E>>,
    d: usize,
    heads: usize,
) -> Result<TensorId, NnError> {
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let mut rotated_queries = Vec::with_capacity(heads);
    let mut messages = Vec::with_capacity(heads);
    for h in 0..heads {
        let suffix = if heads == 1 { String::new() } else { format!(".h{h}") };
        let wq = bound.id(&format!("{prefix}.wq{suffix}"))?;
        let wk = bound.id(&format!("{prefix}.wk{suffix}"))?;
        let wv = bound.id(&format!("{prefix}.wv{suffix}"))?;
        let q = g.matmul(f, wq)?;
        let qr = g.rotary(q, cos.clone(), sin.clone())?;
        let k = g.matmul(f, wk)?;
        let kr = g.rotary(k, cos.clone(), sin.clone())?;
        let v = g.matmul(f, wv)?;
        let vr = g.rotary(v, cos.clone(), sin.clone())?;
        let kt = g.transpose(kr);
        let scores = g.matmul(qr, kt)?;
        let scores = g.scale(scores, scale);
        let alpha = g.softmax(scores, 1);
        let msg = g.matmul(alpha, vr)?;
        rotated_queries.push(qr);
        messages.push(msg);
    }
    let mut qcat = rotated_queries[0];
    let mut mcat = messages[0];
    for h in 1..heads {
        qcat = g.concat(qcat, rotated_queries[h], 1)?;
        mcat = g.concat(mcat, messages[h], 1)?;
    }
    let cat = g.concat(qcat, mcat, 1)?;
    let update = mlp(g, cat, bound, &format!("{prefix}.mlp"))?;
    g.add(f, update)
}

/// Two-layer MLP: linear, ReLU, linear.
pub fn mlp<E: Element>(
    g: &mut Graph<E>,
    x: TensorId,
    bound: &BoundParams,
    prefix: &str,
) -> Result<TensorId, NnError> {
    let w1 = bound.id(&format!("{prefix}.w1"))?;
    let b1 = bound.id(&format!("{prefix}.b1"))?;
    let w2 = bound.id(&format!("{prefix}.w2"))?;
    let b2 = bound.id(&format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_broadcast(h, b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, w2)?;
    g.add_broadcast(y, b2)
}

/// The learned half of the descriptor on an existing tape: three
/// pointwise-conv + group-norm + ReLU stages, max-pool over the k
/// neighbors, then the stack of rotary self-attention layers.
///
/// Returns the [n, d] descriptor tensor id.
pub fn descriptor_forward<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    f2: &Array3<f64>,
    positions: &[Point3<f64>],
    cfg: &DescriptorConfig,
) -> Result<TensorId, DescriptorError> {
    cfg.validate()?;
    let mut x = cast_const(g, &f2.clone().into_dyn());
    for stage in 0..3 {
        let w = bound.id(&format!("desc.cnn{stage}.weight"))?;
        let b = bound.id(&format!("desc.cnn{stage}.bias"))?;
        let gain = bound.id(&format!("desc.cnn{stage}.gain"))?;
        let offset = bound.id(&format!("desc.cnn{stage}.offset"))?;
        x = pointwise_linear(g, x, w, b)?;
        x = g.group_norm(x, gain, offset, cfg.groups)?;
        x = g.relu(x);
    }
    let mut f = g.max_axis(x, 1); // [n, d]

    let d_head = cfg.d / cfg.attention_heads;
    let (cos, sin) = rotary_tables::<E>(positions, d_head)?;
    for layer in 0..cfg.attention_layers {
        f = rotary_attention_layer(
            g,
            f,
            bound,
            &format!("desc.attn{layer}"),
            &cos,
            &sin,
            cfg.d,
            cfg.attention_heads,
        )?;
    }
    Ok(f)
}

/// Output of the full handcrafted + learned extraction for one cloud.
pub struct Extraction {
    /// [n, d] learned descriptors (f for the source, h for the target).
    pub descriptors: Array2<f32>,
    pub geometry: Vec<LocalGeometry>,
    /// Mean-centered copy the features were computed on.
    pub centered: PointCloud,
    /// Centroid removed from the input cloud.
    pub centroid: Vector3<f64>,
    /// The handcrafted [n, k, 15] tensor, reusable for training tapes.
    pub f2: Array3<f64>,
}

/// Handcrafted feature stages for a (centered) cloud.
pub fn handcrafted_features(
    centered: &PointCloud,
    cfg: &DescriptorConfig,
) -> Result<(Array3<f64>, Vec<LocalGeometry>), DescriptorError> {
    let index = NeighborhoodIndex::build(centered);
    let geometry = compute_local_geometry(centered, &index, cfg)?;
    let neighbors = neighbor_indices(centered, &index, cfg.k)?;
    let f0 = build_f0(centered, &geometry, cfg);
    let f1 = build_f1(&f0, &neighbors);
    let projected = project_neighbor_normals(&geometry, &neighbors);
    let f2 = build_f2(&f1, &projected, cfg.use_n);
    Ok((f2, geometry))
}

/// Full pipeline for one cloud: center, neighborhoods, geometry, feature
/// stages, CNN + max-pool + rotary self-attention.
pub fn extract_logdesc(
    cloud: &PointCloud,
    cfg: &DescriptorConfig,
    params: &ParamSet,
) -> Result<Extraction, DescriptorError> {
    cfg.validate()?;
    if cloud.len() < cfg.k {
        return Err(DescriptorError::CloudSmallerThanK {
            size: cloud.len(),
            k: cfg.k,
        });
    }
    let (centered, centroid) = cloud.centered();
    let (f2, geometry) = handcrafted_features(&centered, cfg)?;

    let mut g = Graph::<f32>::new();
    let bound = crate::nn::bind_params(&mut g, params);
    let out = descriptor_forward(&mut g, &bound, &f2, centered.points(), cfg)?;
    g.check_finite()?;
    let value = g.value(out);
    let n = cloud.len();
    let descriptors =
        Array2::from_shape_vec((n, cfg.d), value.iter().copied().collect()).expect("shape");
    Ok(Extraction {
        descriptors,
        geometry,
        centered,
        centroid,
        f2,
    })
}

/// Cast helper for putting f64 feature tensors on an f32 tape.
pub fn constant_from_f64<E: Element>(g: &mut Graph<E>, a: &Array2<f64>) -> TensorId {
    let dynd: ArrayD<f64> = a.clone().into_dyn();
    g.constant(dynd.mapv(E::from_f64))
}

/// Zero-dim helper.
pub fn scalar_const<E: Element>(g: &mut Graph<E>, v: f64) -> TensorId {
    g.constant(ArrayD::from_elem(IxDyn(&[]), E::from_f64(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> DescriptorConfig {
        DescriptorConfig {
            k: 8,
            d: 12,
            attention_layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn f0_layout_and_ablation() {
        let cloud = random_cloud(60, 5);
        let cfg = DescriptorConfig::default();
        let index = NeighborhoodIndex::build(&cloud);
        let geometry = compute_local_geometry(&cloud, &index, &cfg).unwrap();
        let f0 = build_f0(&cloud, &geometry, &cfg);
        assert_eq!(f0.dim(), (60, 6));
        for i in 0..60 {
            assert_eq!(f0[[i, 0]], cloud.point(i).x);
            assert_eq!(f0[[i, 3]], geometry[i].anisotropy);
        }
        let ablated = build_f0(
            &cloud,
            &geometry,
            &DescriptorConfig {
                use_a: false,
                ..cfg
            },
        );
        for i in 0..60 {
            assert_eq!(ablated[[i, 3]], 0.0);
            assert_eq!(ablated[[i, 4]], f0[[i, 4]]);
        }
    }

    #[test]
    fn f0_plane_has_high_planarity_low_omnivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = PointCloud::new(
            (0..300)
                .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0))
                .collect(),
        )
        .unwrap();
        let cfg = DescriptorConfig::default();
        let index = NeighborhoodIndex::build(&cloud);
        let geometry = compute_local_geometry(&cloud, &index, &cfg).unwrap();
        let f0 = build_f0(&cloud, &geometry, &cfg);
        for i in 0..cloud.len() {
            // lambda_3 = 0 on a plane: anisotropy is exactly 1, omnivariance 0;
            // planarity stays well away from 0 even for clipped edge patches.
            assert!((f0[[i, 3]] - 1.0).abs() < 1e-9, "anisotropy {} at {i}", f0[[i, 3]]);
            assert!(f0[[i, 4]] > 0.15, "planarity {} at {i}", f0[[i, 4]]);
            assert!(f0[[i, 5]] < 1e-6, "omnivariance {} at {i}", f0[[i, 5]]);
        }
    }

    #[test]
    fn f1_construction() {
        let f0 = Array2::from_shape_vec(
            (2, 6),
            vec![
                1.0, 2.0, 3.0, 0.1, 0.2, 0.3, //
                4.0, 5.0, 6.0, 0.4, 0.5, 0.6,
            ],
        )
        .unwrap();
        let neighbors = vec![vec![1usize, 0], vec![0, 1]];
        let f1 = build_f1(&f0, &neighbors);
        assert_eq!(f1.dim(), (2, 2, 12));
        // first half repeats f0_i
        for c in 0..6 {
            assert_eq!(f1[[0, 0, c]], f0[[0, c]]);
            assert_eq!(f1[[0, 1, c]], f0[[0, c]]);
        }
        // difference half, neighbor 0 of point 0 is point 1
        for c in 0..6 {
            assert_relative_eq!(f1[[0, 0, 6 + c]], f0[[1, c]] - f0[[0, c]]);
        }
        // self as neighbor: zero difference
        for c in 0..6 {
            assert_eq!(f1[[0, 1, 6 + c]], 0.0);
        }
    }

    #[test]
    fn projected_normals_identity_lrf_and_axis_alignment() {
        use nalgebra::Matrix3;
        let geometry = vec![
            LocalGeometry {
                anisotropy: 0.0,
                planarity: 0.0,
                omnivariance: 0.0,
                lrf: Matrix3::identity(),
                normal: Vector3::new(0.6, 0.8, 0.0),
                eigenvalues: [1.0, 1.0, 1.0],
            },
            LocalGeometry {
                anisotropy: 0.0,
                planarity: 0.0,
                omnivariance: 0.0,
                lrf: Matrix3::identity(),
                normal: Vector3::z(),
                eigenvalues: [1.0, 1.0, 1.0],
            },
        ];
        let neighbors = vec![vec![1usize], vec![0usize]];
        let out = project_neighbor_normals(&geometry, &neighbors);
        // identity LRF leaves normals unchanged
        assert_relative_eq!(out[[0, 0, 2]], 1.0);
        assert_relative_eq!(out[[1, 0, 0]], 0.6);
        // normal parallel to the third LRF axis maps to (0, 0, +-1)
        assert_relative_eq!(out[[0, 0, 0]], 0.0);
        assert_relative_eq!(out[[0, 0, 1]], 0.0);
    }

    /// Sign margin of the LRF disambiguation rule for every point: the
    /// smaller of |u . (p - c)| and |w . (p - c)| over the PCA neighborhood.
    /// Points below the margin fall back to the world-frame component rule,
    /// which is deterministic but not rotation covariant.
    fn sign_margins(cloud: &PointCloud, cfg: &DescriptorConfig) -> Vec<f64> {
        let index = NeighborhoodIndex::build(cloud);
        (0..cloud.len())
            .map(|i| {
                let p = cloud.point(i);
                let mut nbrs = index
                    .knn(&p, cfg.pca_max_neighbors, Some(cfg.pca_radius), None)
                    .unwrap();
                if nbrs.len() < 3 {
                    nbrs = index.knn(&p, 3, None, None).unwrap();
                }
                let pts: Vec<Point3<f64>> = nbrs.iter().map(|&j| cloud.point(j)).collect();
                let (_, vecs) = crate::geometry::covariance_eigen(&pts).unwrap();
                let c = pts.iter().map(|q| q.coords).sum::<Vector3<f64>>() / pts.len() as f64;
                let toward = p.coords - c;
                vecs.column(0)
                    .dot(&toward)
                    .abs()
                    .min(vecs.column(2).dot(&toward).abs())
            })
            .collect()
    }

    #[test]
    fn projected_normals_rigid_invariance_on_stable_neighborhoods() {
        // Noise-free curved surface: curvature gives the sign rule a real
        // margin at most points, unlike volumetric noise clouds.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = PointCloud::new(
            (0..300)
                .map(|_| {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let y: f64 = rng.gen_range(-1.0..1.0);
                    Point3::new(x, y, 0.3 * (2.0 * x).sin() * (2.0 * y).cos())
                })
                .collect(),
        )
        .unwrap();
        let cfg = DescriptorConfig {
            k: 10,
            ..Default::default()
        };
        let index = NeighborhoodIndex::build(&cloud);
        let geometry = compute_local_geometry(&cloud, &index, &cfg).unwrap();
        let neighbors = neighbor_indices(&cloud, &index, cfg.k).unwrap();
        let base = project_neighbor_normals(&geometry, &neighbors);
        let margins = sign_margins(&cloud, &cfg);

        let t = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, -0.8, 0.5),
            1.1,
            Vector3::new(0.2, 0.0, -0.4),
        );
        let moved = crate::geometry::apply_transform(&cloud, &t);
        let mindex = NeighborhoodIndex::build(&moved);
        let mgeometry = compute_local_geometry(&moved, &mindex, &cfg).unwrap();
        let mneighbors = neighbor_indices(&moved, &mindex, cfg.k).unwrap();
        assert_eq!(neighbors, mneighbors);
        let rotated = project_neighbor_normals(&mgeometry, &mneighbors);

        const MARGIN: f64 = 1e-6;
        let mut tested = 0usize;
        for i in 0..cloud.len() {
            // the projection at i mixes i's LRF and the neighbors' normals,
            // so every involved sign decision must be stable
            if margins[i] < MARGIN || neighbors[i].iter().any(|&j| margins[j] < MARGIN) {
                continue;
            }
            tested += 1;
            for jj in 0..cfg.k {
                for c in 0..3 {
                    let delta = (base[[i, jj, c]] - rotated[[i, jj, c]]).abs();
                    assert!(delta < 1e-6, "point {i} nbr {jj} comp {c}: delta {delta}");
                }
            }
        }
        assert!(tested >= cloud.len() / 2, "only {tested} testable points");
    }

    #[test]
    fn f2_concat_and_ablation() {
        let f1 = Array3::from_elem((3, 4, 12), 2.0);
        let nlrf = Array3::from_elem((3, 4, 3), 0.5);
        let f2 = build_f2(&f1, &nlrf, true);
        assert_eq!(f2.dim(), (3, 4, 15));
        assert_eq!(f2[[0, 0, 0]], 2.0);
        assert_eq!(f2[[0, 0, 12]], 0.5);
        let off = build_f2(&f1, &nlrf, false);
        assert_eq!(off[[0, 0, 12]], 0.0);
        assert_eq!(off[[0, 0, 11]], 2.0);
    }

    #[test]
    fn rotary_zero_position_is_identity() {
        let v: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let out = rotary_apply(&Point3::origin(), 12, &v).unwrap();
        for (a, b) in v.iter().zip(&out) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn rotary_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = rotary_apply(&p, 12, &v).unwrap();
            let n1: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n2: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n1 - n2).abs() < 1e-5 * n1.max(1.0));
        }
    }

    #[test]
    fn rotary_relative_property() {
        // <R(p) q, R(p + delta) k> == <R(0) q, R(delta) k>
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..100 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let delta = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let q: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a1 = rotary_apply(&p, 12, &q).unwrap();
            let b1 = rotary_apply(&Point3::from(p.coords + delta), 12, &k).unwrap();
            let a2 = rotary_apply(&Point3::origin(), 12, &q).unwrap();
            let b2 = rotary_apply(&Point3::from(delta), 12, &k).unwrap();
            let dot1: f64 = a1.iter().zip(&b1).map(|(x, y)| x * y).sum();
            let dot2: f64 = a2.iter().zip(&b2).map(|(x, y)| x * y).sum();
            assert!((dot1 - dot2).abs() < 1e-4, "{dot1} vs {dot2}");
        }
    }

    #[test]
    fn rotary_dimension_must_divide_by_six() {
        assert!(rotary_tables::<f64>(&[Point3::origin()], 8).is_err());
    }

    #[test]
    fn cnn_output_shape_and_maxpool_symmetry() {
        let cfg = small_cfg();
        let cloud = random_cloud(20, 41);
        let params = crate::model::init_params(&cfg, 0, 7).unwrap();
        let ex = extract_logdesc(&cloud, &cfg, &params).unwrap();
        assert_eq!(ex.descriptors.dim(), (20, cfg.d));

        // permuting the k rows of one point's f2 leaves its descriptor alone
        let mut f2 = ex.f2.clone();
        let k = cfg.k;
        for jj in 0..k / 2 {
            for c in 0..F2_DIM {
                let a = f2[[3, jj, c]];
                f2[[3, jj, c]] = f2[[3, k - 1 - jj, c]];
                f2[[3, k - 1 - jj, c]] = a;
            }
        }
        let mut g = Graph::<f32>::new();
        let bound = crate::nn::bind_params(&mut g, &params);
        let out = descriptor_forward(&mut g, &bound, &f2, ex.centered.points(), &cfg).unwrap();
        let permuted = g.value(out);
        // exact invariance up to f32 accumulation-order noise
        for (a, b) in ex.descriptors.iter().zip(permuted.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = small_cfg();
        let cloud = random_cloud(25, 47);
        let params = crate::model::init_params(&cfg, 0, 3).unwrap();
        let a = extract_logdesc(&cloud, &cfg, &params).unwrap();
        let b = extract_logdesc(&cloud, &cfg, &params).unwrap();
        assert_eq!(a.descriptors, b.descriptors);
    }

    #[test]
    fn translation_invariance_of_descriptor() {
        let cfg = small_cfg();
        let cloud = random_cloud(25, 51);
        let params = crate::model::init_params(&cfg, 0, 5).unwrap();
        let a = extract_logdesc(&cloud, &cfg, &params).unwrap();
        let t = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(10.0, -3.0, 0.7),
        )
        .unwrap();
        let moved = crate::geometry::apply_transform(&cloud, &t);
        let b = extract_logdesc(&moved, &cfg, &params).unwrap();
        for (x, y) in a.descriptors.iter().zip(b.descriptors.iter()) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn cloud_smaller_than_k_is_rejected() {
        let cfg = DescriptorConfig::default();
        let cloud = random_cloud(10, 53);
        let params = crate::model::init_params(&cfg, 0, 1).unwrap();
        match extract_logdesc(&cloud, &cfg, &params) {
            Err(DescriptorError::CloudSmallerThanK { size, k }) => {
                assert_eq!((size, k), (10, 30));
            }
            other => panic!("expected CloudSmallerThanK, got {:?}", other.map(|_| ())),
        }
    }
}
