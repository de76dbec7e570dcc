//! Normal-conditioned feature refinement: alternating self- and
//! cross-attention over the two clouds' descriptors, where self-attention
//! keys are biased by a sinusoidal embedding of the angle between the
//! endpoints' surface normals.

use std::rc::Rc;

use nalgebra::Vector3;
use ndarray::Array3;

use crate::geometry::LocalGeometry;
use crate::nn::{BoundParams, Element, Graph, NnError, TensorId};

/// Frequency base of the angle embedding.
pub const ANGLE_EMBED_BASE: f64 = 10000.0;
/// Angle scale: 15 degrees in radians.
pub const ANGLE_EMBED_SIGMA: f64 = 15.0 * std::f64::consts::PI / 180.0;

/// Unsigned angle between two directions in [0, pi], computed via atan2 for
/// stability near 0 and pi.
pub fn normal_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// d-dim sinusoidal embedding of one angle: slot 2p holds
/// sin(angle / (sigma * base^(2p / d))), slot 2p + 1 the matching cosine.
pub fn embed_angle(angle: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for p in 0..d / 2 {
        let denom = ANGLE_EMBED_SIGMA * ANGLE_EMBED_BASE.powf(2.0 * p as f64 / d as f64);
        let t = angle / denom;
        out[2 * p] = t.sin();
        out[2 * p + 1] = t.cos();
    }
    out
}

/// [n, n, d] table of pairwise normal-angle embeddings for one cloud,
/// shared across layers of one forward pass.
pub fn angle_embedding_table<E: Element>(
    geometry: &[LocalGeometry],
    d: usize,
) -> Rc<Array3<E>> {
    let n = geometry.len();
    let mut table = Array3::<E>::zeros((n, n, d));
    for i in 0..n {
        for j in 0..n {
            let angle = normal_angle(&geometry[i].normal, &geometry[j].normal);
            for (c, v) in embed_angle(angle, d).into_iter().enumerate() {
                table[[i, j, c]] = E::from_f64(v);
            }
        }
    }
    Rc::new(table)
}

/// Self-attention with the additive key bias W_r r_ij:
/// score(i, j) = q_i . k_j + q_i . (W_r r_ij), residual MLP update.
fn conditioned_self_layer<E: Element>(
    g: &mut Graph<E>,
    f: TensorId,
    bound: &BoundParams,
    prefix: &str,
    table: &Rc<Array3<E>>,
    d: usize,
) -> Result<TensorId, NnError> {
    let wq = bound.id(&format!("{prefix}.wq"))?;
    let wk = bound.id(&format!("{prefix}.wk"))?;
    let wv = bound.id(&format!("{prefix}.wv"))?;
    let wr = bound.id(&format!("{prefix}.wr"))?;
    let q = g.matmul(f, wq)?;
    let k = g.matmul(f, wk)?;
    let v = g.matmul(f, wv)?;
    let kt = g.transpose(k);
    let qk = g.matmul(q, kt)?;
    // q_i^T W_r r_ij contracted as (q W_r) . r_ij per pair
    let qr = g.matmul(q, wr)?;
    let bias = g.pairwise_bias(qr, table.clone())?;
    let scores = g.add(qk, bias)?;
    let scores = g.scale(scores, E::from_f64(1.0 / (d as f64).sqrt()));
    let alpha = g.softmax(scores, 1);
    let msg = g.matmul(alpha, v)?;
    let cat = g.concat(q, msg, 1)?;
    let update = crate::descriptor::mlp(g, cat, bound, &format!("{prefix}.mlp"))?;
    g.add(f, update)
}

/// Cross-attention from `x` (queries) into `y` (keys/values); parameters are
/// shared between the two directions of a layer.
fn cross_layer<E: Element>(
    g: &mut Graph<E>,
    x: TensorId,
    y: TensorId,
    bound: &BoundParams,
    prefix: &str,
    d: usize,
) -> Result<TensorId, NnError> {
    let wq = bound.id(&format!("{prefix}.wq"))?;
    let wk = bound.id(&format!("{prefix}.wk"))?;
    let wv = bound.id(&format!("{prefix}.wv"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(y, wk)?;
    let v = g.matmul(y, wv)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, E::from_f64(1.0 / (d as f64).sqrt()));
    let alpha = g.softmax(scores, 1);
    let msg = g.matmul(alpha, v)?;
    let cat = g.concat(q, msg, 1)?;
    let update = crate::descriptor::mlp(g, cat, bound, &format!("{prefix}.mlp"))?;
    g.add(x, update)
}

/// Runs `layers` self/cross pairs over both clouds' descriptors. The two
/// clouds share every parameter (siamese conditioning); each cloud uses its
/// own normal-angle table for the self step.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_attention<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    f: TensorId,
    h: TensorId,
    table_f: &Rc<Array3<E>>,
    table_h: &Rc<Array3<E>>,
    layers: usize,
    d: usize,
) -> Result<(TensorId, TensorId), NnError> {
    let mut f = f;
    let mut h = h;
    for l in 0..layers {
        let self_prefix = format!("cond{l}.self");
        f = conditioned_self_layer(g, f, bound, &self_prefix, table_f, d)?;
        h = conditioned_self_layer(g, h, bound, &self_prefix, table_h, d)?;
        let cross_prefix = format!("cond{l}.cross");
        let f2 = cross_layer(g, f, h, bound, &cross_prefix, d)?;
        let h2 = cross_layer(g, h, f, bound, &cross_prefix, d)?;
        f = f2;
        h = h2;
    }
    Ok((f, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn angle_is_symmetric_and_bounded() {
        let a = Vector3::new(1.0, 0.2, -0.3).normalize();
        let b = Vector3::new(-0.4, 1.0, 0.8).normalize();
        let t1 = normal_angle(&a, &b);
        let t2 = normal_angle(&b, &a);
        assert_relative_eq!(t1, t2, epsilon = 1e-12);
        assert!((0.0..=std::f64::consts::PI).contains(&t1));
    }

    #[test]
    fn known_angles() {
        let x = Vector3::x();
        let y = Vector3::y();
        assert_relative_eq!(normal_angle(&x, &y), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(normal_angle(&x, &x), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            normal_angle(&x, &(-x)),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn embedding_layout_matches_closed_form() {
        let d = 8;
        let angle = 0.9;
        let e = embed_angle(angle, d);
        for p in 0..d / 2 {
            let denom = ANGLE_EMBED_SIGMA * ANGLE_EMBED_BASE.powf(2.0 * p as f64 / d as f64);
            assert_relative_eq!(e[2 * p], (angle / denom).sin(), epsilon = 1e-12);
            assert_relative_eq!(e[2 * p + 1], (angle / denom).cos(), epsilon = 1e-12);
        }
        // unit norm per sin/cos pair
        for p in 0..d / 2 {
            assert_relative_eq!(
                e[2 * p] * e[2 * p] + e[2 * p + 1] * e[2 * p + 1],
                1.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_angle_embedding_is_alternating_zero_one() {
        let e = embed_angle(0.0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn table_is_symmetric_in_ij() {
        use nalgebra::Matrix3;
        let mk = |n: Vector3<f64>| LocalGeometry {
            anisotropy: 0.0,
            planarity: 0.0,
            omnivariance: 0.0,
            lrf: Matrix3::identity(),
            normal: n.normalize(),
            eigenvalues: [1.0, 1.0, 1.0],
        };
        let geo = vec![
            mk(Vector3::new(1.0, 0.0, 0.0)),
            mk(Vector3::new(0.3, 0.9, -0.2)),
            mk(Vector3::new(-0.5, 0.1, 1.0)),
        ];
        let table = angle_embedding_table::<f64>(&geo, 6);
        for i in 0..3 {
            for j in 0..3 {
                for c in 0..6 {
                    assert_relative_eq!(table[[i, j, c]], table[[j, i, c]], epsilon = 1e-12);
                }
            }
        }
    }
}
