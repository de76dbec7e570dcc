//! Descriptor similarity, optimal-transport assignment with a dustbin for
//! unmatched points, and mutual-best correspondence extraction.
//!
//! Sinkhorn runs in the log domain throughout; the plan is augmented with a
//! dustbin row/column so partially overlapping clouds can leave points
//! unassigned. Marginals follow the augmented convention: every real point
//! carries unit mass and each dustbin absorbs the other side's total.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::nn::{Element, Graph, NnError, TensorId};

pub const SINKHORN_ITERATIONS: usize = 50;

/// One-to-one correspondences between a source and target cloud, with the
/// transport confidence per pair.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    /// (source index, target index), sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    /// Transport plan mass of each pair, same order.
    pub confidence: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Similarity scores between descriptor rows, scaled by 1/sqrt(d):
/// S[i, j] = <f_i, h_j> / sqrt(d).
pub fn similarity(f: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    let d = f.shape()[1] as f64;
    f.dot(&h.t()) / d.sqrt()
}

fn log_marginals(m: usize, n: usize) -> (Array1<f64>, Array1<f64>) {
    // Row i < m and column j < n carry mass 1; the dustbin row absorbs the
    // n unmatched targets and the dustbin column the m unmatched sources.
    let mut mu = Array1::zeros(m + 1);
    let mut nu = Array1::zeros(n + 1);
    mu[m] = (n as f64).ln();
    nu[n] = (m as f64).ln();
    (mu, nu)
}

fn logsumexp_slice(v: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = v.collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + vals.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn over dustbin-augmented scores. `scores` is the raw
/// [m, n] similarity matrix; the returned [m + 1, n + 1] log-plan has rows
/// 0..m summing to 1 (and symmetric column behavior) after `iterations`
/// row/column balancing sweeps.
pub fn sinkhorn_log(scores: &Array2<f64>, dustbin: f64, iterations: usize) -> Array2<f64> {
    let (m, n) = scores.dim();
    let mut z = Array2::from_elem((m + 1, n + 1), dustbin);
    z.slice_mut(ndarray::s![..m, ..n]).assign(scores);
    let (mu, nu) = log_marginals(m, n);

    let mut u = Array1::<f64>::zeros(m + 1);
    let mut v = Array1::<f64>::zeros(n + 1);
    for _ in 0..iterations {
        for i in 0..m + 1 {
            u[i] = mu[i] - logsumexp_slice((0..n + 1).map(|j| z[[i, j]] + v[j]));
        }
        for j in 0..n + 1 {
            v[j] = nu[j] - logsumexp_slice((0..m + 1).map(|i| z[[i, j]] + u[i]));
        }
    }
    let mut out = z;
    for i in 0..m + 1 {
        for j in 0..n + 1 {
            out[[i, j]] += u[i] + v[j];
        }
    }
    out
}

/// Same balancing on a tape so the plan is differentiable. `f` and `h` are
/// [m, d] / [n, d] descriptor tensors; `dustbin` is the learned scalar.
/// Returns the [m + 1, n + 1] log-plan tensor.
pub fn sinkhorn_on_tape<E: Element>(
    g: &mut Graph<E>,
    f: TensorId,
    h: TensorId,
    dustbin: TensorId,
    iterations: usize,
) -> Result<TensorId, NnError> {
    let d = g.shape(f)[1];
    let m = g.shape(f)[0];
    let n = g.shape(h)[0];
    let ht = g.transpose(h);
    let s = g.matmul(f, ht)?;
    let s = g.scale(s, E::from_f64(1.0 / (d as f64).sqrt()));
    let z = g.augment_scores(s, dustbin)?;

    let (mu, nu) = log_marginals(m, n);
    let mu = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[m + 1, 1]), mu.to_vec()).unwrap().mapv(E::from_f64),
    );
    let nu = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, n + 1]), nu.to_vec()).unwrap().mapv(E::from_f64),
    );
    let mut u = g.constant(ArrayD::zeros(IxDyn(&[m + 1, 1])));
    let mut v = g.constant(ArrayD::zeros(IxDyn(&[1, n + 1])));
    for _ in 0..iterations {
        let zv = g.add_broadcast(z, v)?;
        let lse_rows = g.logsumexp(zv, 1); // [m + 1, 1]
        u = g.sub(mu, lse_rows)?;
        let zu = g.add_broadcast(z, u)?;
        let lse_cols = g.logsumexp(zu, 0); // [1, n + 1]
        v = g.sub(nu, lse_cols)?;
    }
    let zu = g.add_broadcast(z, u)?;
    g.add_broadcast(zu, v)
}

/// Mutual-best extraction from a dustbin-augmented log-plan: (i, j) is kept
/// when j is i's best real column, i is j's best real row, and neither
/// prefers its dustbin. Exact ties resolve to the smallest index.
pub fn mutual_best(log_plan: &Array2<f64>) -> MatchSet {
    let (mp1, np1) = log_plan.dim();
    let (m, n) = (mp1 - 1, np1 - 1);
    let row_best: Vec<usize> = (0..m)
        .map(|i| {
            let mut best = 0usize;
            for j in 1..np1 {
                if log_plan[[i, j]] > log_plan[[i, best]] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let col_best: Vec<usize> = (0..n)
        .map(|j| {
            let mut best = 0usize;
            for i in 1..mp1 {
                if log_plan[[i, j]] > log_plan[[best, j]] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut out = MatchSet::default();
    for i in 0..m {
        let j = row_best[i];
        if j < n && col_best[j] == i {
            out.pairs.push((i, j));
            out.confidence.push(log_plan[[i, j]].exp());
        }
    }
    out
}

/// Total transported mass per real row of an exponentiated log-plan
/// restricted to the real block; used to sanity-check convergence.
pub fn real_block_mass(log_plan: &Array2<f64>) -> f64 {
    let (mp1, np1) = log_plan.dim();
    log_plan
        .slice(ndarray::s![..mp1 - 1, ..np1 - 1])
        .iter()
        .map(|&l| l.exp())
        .sum()
}

/// Row and column marginal residuals of the exponentiated plan against the
/// augmented target marginals; max-norm.
pub fn marginal_residual(log_plan: &Array2<f64>) -> f64 {
    let (mp1, np1) = log_plan.dim();
    let (m, n) = (mp1 - 1, np1 - 1);
    let plan = log_plan.mapv(f64::exp);
    let mut worst = 0.0f64;
    for i in 0..mp1 {
        let target = if i < m { 1.0 } else { n as f64 };
        let got: f64 = plan.index_axis(Axis(0), i).sum();
        worst = worst.max((got - target).abs());
    }
    for j in 0..np1 {
        let target = if j < n { 1.0 } else { m as f64 };
        let got: f64 = plan.index_axis(Axis(1), j).sum();
        worst = worst.max((got - target).abs());
    }
    worst
}

/// Convenience: tape-free matching of two descriptor matrices.
pub fn match_descriptors(
    f: &Array2<f64>,
    h: &Array2<f64>,
    dustbin: f64,
    iterations: usize,
) -> MatchSet {
    let s = similarity(f, h);
    let plan = sinkhorn_log(&s, dustbin, iterations);
    mutual_best(&plan)
}

/// Dense [n, n, d] tables are the transformer's per-cloud conditioning
/// payload; re-exported here for the model to cache.
pub type PairTable<E> = std::rc::Rc<Array3<E>>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_scores(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn similarity_scale() {
        let f = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let h = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = similarity(&f, &h);
        approx::assert_relative_eq!(s[[0, 0]], 2.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sinkhorn_marginals_converge() {
        for seed in 0..20 {
            let s = random_scores(12, 9, seed);
            let plan = sinkhorn_log(&s, 0.5, SINKHORN_ITERATIONS);
            assert!(
                marginal_residual(&plan) < 1e-6,
                "seed {seed}: residual {}",
                marginal_residual(&plan)
            );
        }
    }

    #[test]
    fn strong_diagonal_recovers_identity_matches() {
        let n = 8;
        let mut s = Array2::from_elem((n, n), -5.0);
        for i in 0..n {
            s[[i, i]] = 5.0;
        }
        let plan = sinkhorn_log(&s, -2.0, SINKHORN_ITERATIONS);
        let ms = mutual_best(&plan);
        assert_eq!(ms.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        for &c in &ms.confidence {
            assert!(c > 0.9, "confidence {c}");
        }
    }

    #[test]
    fn unmatched_points_fall_in_dustbin() {
        // 3 sources, 2 targets; source 2 matches nothing.
        let mut s = Array2::from_elem((3, 2), -6.0);
        s[[0, 0]] = 6.0;
        s[[1, 1]] = 6.0;
        let plan = sinkhorn_log(&s, 0.0, SINKHORN_ITERATIONS);
        let ms = mutual_best(&plan);
        assert_eq!(ms.pairs, vec![(0, 0), (1, 1)]);
        // source 2's mass sits in the dustbin column
        assert!(plan[[2, 2]].exp() > 0.8);
    }

    #[test]
    fn tape_sinkhorn_matches_plain_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 6;
        let n = 5;
        let d = 4;
        let f = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let dustbin = 0.3;
        let plain = sinkhorn_log(&similarity(&f, &h), dustbin, 20);

        let mut g = Graph::<f64>::new();
        let ft = g.constant(f.into_dyn());
        let ht = g.constant(h.into_dyn());
        let z = g.constant(ArrayD::from_elem(IxDyn(&[]), dustbin));
        let plan = sinkhorn_on_tape(&mut g, ft, ht, z, 20).unwrap();
        let taped = g.value(plan);
        for (a, b) in plain.iter().zip(taped.iter()) {
            approx::assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn tape_sinkhorn_gradient_flows_to_descriptors_and_dustbin() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.3]).unwrap());
        let h = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.4, 0.4, -0.6, 0.2]).unwrap());
        let z = g.leaf(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let plan = sinkhorn_on_tape(&mut g, f, h, z, 10).unwrap();
        let loss = g.nll_selected(plan, vec![(0, 0), (1, 1), (2, 2)]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads[f.0].is_some());
        assert!(grads[h.0].is_some());
        let zg = grads[z.0].as_ref().unwrap();
        assert!(zg.iter().next().unwrap().abs() > 0.0);
    }

    #[test]
    fn mutual_best_tie_prefers_smallest_index() {
        // two identical rows competing for one column
        let mut plan = Array2::from_elem((3, 3), -10.0);
        plan[[0, 0]] = -0.5;
        plan[[1, 0]] = -0.5; // tie on column 0; row 0 wins
        let ms = mutual_best(&plan);
        assert_eq!(ms.pairs, vec![(0, 0)]);
    }
}
