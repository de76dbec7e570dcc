//! Central finite-difference gradient verification.
//!
//! The loss closure is replayed in f64: f32 forward noise at epsilon 1e-5
//! would drown the 1e-4 relative tolerance.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamSet};

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub worst_relative_error: f64,
    pub checked_elements: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }
}

/// Gradients below this magnitude are compared absolutely: central
/// differences at epsilon 1e-5 carry ~1e-9 of absolute noise from f64
/// forward-pass roundoff, which would swamp a pure ratio.
const RELATIVE_FLOOR: f64 = 1e-3;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `loss_and_grads` evaluates the model in f64 from a parameter set (the
/// same f32 master copies each call, with one element nudged) and returns
/// the scalar loss plus analytic gradients per parameter. Up to
/// `samples_per_param` elements of every parameter are probed, chosen by a
/// seeded generator so runs are reproducible.
pub fn check_gradients<F>(
    params: &ParamSet,
    samples_per_param: usize,
    seed: u64,
    mut loss_and_grads: F,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&ParamSet, bool) -> Result<(f64, Vec<(String, ArrayD<f64>)>), NnError>,
{
    let (_, analytic) = loss_and_grads(params, true)?;
    let analytic: std::collections::HashMap<String, ArrayD<f64>> =
        analytic.into_iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (name, tensor) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| NnError::MissingGradient(name.to_string()))?;
        let n = tensor.len();
        let count = samples_per_param.min(n);
        let mut picks: Vec<usize> = (0..n).collect();
        picks.shuffle(&mut rng);
        picks.truncate(count);
        picks.sort_unstable();

        let mut worst = 0.0f64;
        for &flat in &picks {
            let base = tensor.as_slice().expect("contiguous")[flat] as f64;
            // The master copies are f32, so the step that actually lands in
            // the parameter is the rounded one; divide by that, not by the
            // requested epsilon.
            let mut probe = |delta: f64| -> Result<(f64, f64), NnError> {
                let stored = (base + delta) as f32;
                let mut nudged = params.clone();
                nudged.get_mut(name)?.as_slice_mut().unwrap()[flat] = stored;
                Ok((loss_and_grads(&nudged, false)?.0, stored as f64))
            };
            let (fp, xp) = probe(FD_EPSILON)?;
            let (fm, xm) = probe(-FD_EPSILON)?;
            let fd = (fp - fm) / (xp - xm);
            // gradients may be non-contiguous (e.g. transpose backward)
            let an = grad.iter().nth(flat).copied().expect("index in range");
            worst = worst.max(relative_error(fd, an));
        }
        layers.push(LayerCheck {
            name: name.to_string(),
            worst_relative_error: worst,
            checked_elements: count,
            passed: worst < FD_TOLERANCE,
        });
    }
    Ok(GradCheckReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_params, Graph};
    use ndarray::IxDyn;

    #[test]
    fn quadratic_gradient_passes() {
        let mut ps = ParamSet::new();
        ps.insert("w", ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3f32, -0.7, 1.2]).unwrap())
            .unwrap();
        let report = check_gradients(&ps, 3, 0, |p, _| {
            let mut g = Graph::<f64>::new();
            let bound = bind_params(&mut g, p);
            let w = bound.id("w")?;
            let sq = g.mul(w, w)?;
            let loss = g.sum(sq);
            let grads = g.backward(loss)?;
            let lv = g.value(loss).iter().next().copied().unwrap();
            let wg = grads[w.0].clone().unwrap();
            Ok((lv, vec![("w".to_string(), wg)]))
        })
        .unwrap();
        assert!(report.all_passed(), "{:?}", report.layers);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut ps = ParamSet::new();
        ps.insert("w", ArrayD::from_elem(IxDyn(&[2]), 0.5f32)).unwrap();
        let report = check_gradients(&ps, 2, 0, |p, _| {
            let mut g = Graph::<f64>::new();
            let bound = bind_params(&mut g, p);
            let w = bound.id("w")?;
            let sq = g.mul(w, w)?;
            let loss = g.sum(sq);
            let grads = g.backward(loss)?;
            let lv = g.value(loss).iter().next().copied().unwrap();
            // deliberately wrong: scale the true gradient
            let wg = grads[w.0].clone().unwrap() * 1.5;
            Ok((lv, vec![("w".to_string(), wg)]))
        })
        .unwrap();
        assert!(!report.all_passed());
    }
}
