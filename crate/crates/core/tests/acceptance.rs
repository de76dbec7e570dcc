//! Release acceptance suite. Each test covers one numbered criterion and
//! prints a single pass/fail line; a failing criterion also fails the test.

use std::time::Instant;

use nalgebra::{Matrix3, Point3, Vector3};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use logdesc::datagen::{make_case, sample_shape, ProtocolConfig, ShapeKind, ALL_SHAPES};
use logdesc::descriptor::{
    extract_logdesc, rotary_apply, DescriptorConfig, F0_DIM, F1_DIM, F2_DIM,
};
use logdesc::geometry::{
    compute_apo, compute_lrf, covariance_eigen, estimate_normal, PointCloud, RigidTransform,
};
use logdesc::matching::{marginal_residual, sinkhorn_log};
use logdesc::metrics::FailureThresholds;
use logdesc::model::{init_params, ModelConfig};
use logdesc::pipeline::{evaluate_cases, run_gradcheck, toy_fixture, toy_model_config, train_toy, Estimator};
use logdesc::pose::{fsr, kabsch, FsrConfig, PairedPoints};

fn report(number: usize, name: &str, result: Result<(), String>) {
    match result {
        Ok(()) => println!("criterion {number} ({name}): PASS"),
        Err(msg) => {
            println!("criterion {number} ({name}): FAIL - {msg}");
            panic!("criterion {number} ({name}) failed: {msg}");
        }
    }
}

fn check(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0f64),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    RigidTransform::from_axis_angle(
        &if axis.norm() < 1e-9 { Vector3::z() } else { axis },
        rng.gen_range(0.0..std::f64::consts::PI),
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ),
    )
}

fn random_neighborhood(rng: &mut ChaCha8Rng, count: usize) -> (Point3<f64>, Vec<Point3<f64>>) {
    let center = Point3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let neighbors = (0..count)
        .map(|_| {
            Point3::from(
                center.coords
                    + Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ),
            )
        })
        .collect();
    (center, neighbors)
}

#[test]
fn criterion_1_geometric_invariance() {
    let start = Instant::now();
    let result = (|| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut stable_checked = 0usize;
        for trial in 0..1000 {
            let (center, neighbors) = random_neighborhood(&mut rng, 12);
            let t = random_rigid(&mut rng);
            let center_t = t.apply_point(&center);
            let neighbors_t: Vec<Point3<f64>> =
                neighbors.iter().map(|p| t.apply_point(p)).collect();

            // A/P/O are functions of the covariance spectrum only
            let mut all = neighbors.clone();
            all.push(center);
            let mut all_t = neighbors_t.clone();
            all_t.push(center_t);
            let (vals, vecs) = covariance_eigen(&all).map_err(|e| e.to_string())?;
            let (vals_t, vecs_t) = covariance_eigen(&all_t).map_err(|e| e.to_string())?;
            let apo = compute_apo(&[vals[0], vals[1], vals[2]]).map_err(|e| e.to_string())?;
            let apo_t =
                compute_apo(&[vals_t[0], vals_t[1], vals_t[2]]).map_err(|e| e.to_string())?;
            for (a, b) in [apo.0, apo.1, apo.2].iter().zip([apo_t.0, apo_t.1, apo_t.2]) {
                check((a - b).abs() < 1e-9, || {
                    format!("trial {trial}: A/P/O drift {:.3e}", (a - b).abs())
                })?;
            }

            // triangle-fan equivariance with an explicitly equivariant axis
            let centroid = Point3::from(
                all.iter().map(|p| p.coords).sum::<Vector3<f64>>() / all.len() as f64,
            );
            let lrf = compute_lrf(&vecs, &center, &centroid);
            let axis = lrf.column(2).into_owned();
            let axis_t = t.rotation * axis;
            let n = estimate_normal(&center, &neighbors, &axis).map_err(|e| e.to_string())?;
            let n_t =
                estimate_normal(&center_t, &neighbors_t, &axis_t).map_err(|e| e.to_string())?;
            let angle = (t.rotation * n).dot(&n_t).clamp(-1.0, 1.0).acos();
            check(angle < 1e-6, || {
                format!("trial {trial}: fan normal angle {angle:.3e} rad")
            })?;

            // LRF projection invariance, restricted to neighborhoods where
            // every sign-disambiguation margin is comfortably resolved
            let margin = |vecs: &Matrix3<f64>, p: &Point3<f64>, c: &Point3<f64>| -> f64 {
                let toward = p.coords - c.coords;
                vecs.column(0)
                    .dot(&toward)
                    .abs()
                    .min(vecs.column(2).dot(&toward).abs())
            };
            let centroid_t = Point3::from(
                all_t.iter().map(|p| p.coords).sum::<Vector3<f64>>() / all_t.len() as f64,
            );
            if margin(&vecs, &center, &centroid) > 1e-6 {
                stable_checked += 1;
                let lrf_t = compute_lrf(&vecs_t, &center_t, &centroid_t);
                let proj = lrf.transpose() * n;
                let proj_t = lrf_t.transpose() * n_t;
                for c in 0..3 {
                    check((proj[c] - proj_t[c]).abs() < 1e-6, || {
                        format!(
                            "trial {trial}: projected normal drift {:.3e}",
                            (proj[c] - proj_t[c]).abs()
                        )
                    })?;
                }
            }
        }
        check(stable_checked > 500, || {
            format!("only {stable_checked} sign-stable neighborhoods")
        })?;
        check(start.elapsed().as_secs() < 60, || {
            format!("took {:?} (limit 1 min)", start.elapsed())
        })
    })();
    report(1, "geometric invariance", result);
}

#[test]
fn criterion_2_feature_shapes() {
    let result = (|| -> Result<(), String> {
        let cfg = DescriptorConfig::default();
        check(cfg.k == 30, || "default k is not 30".to_string())?;
        check(cfg.d == 132, || "default d is not 132".to_string())?;
        let cloud = sample_shape(ShapeKind::Torus, 64, 0).map_err(|e| e.to_string())?;
        let params = init_params(&cfg, 0, 0).map_err(|e| e.to_string())?;
        let extraction = extract_logdesc(&cloud, &cfg, &params).map_err(|e| e.to_string())?;
        check(F0_DIM == 6, || "f0 dimension is not 6".to_string())?;
        check(F1_DIM == 12, || "f1 dimension is not 12".to_string())?;
        check(F2_DIM == 15, || "f2 dimension is not 15".to_string())?;
        check(extraction.f2.shape() == [64, 30, 15], || {
            format!("f2 shape {:?}", extraction.f2.shape())
        })?;
        check(extraction.descriptors.shape() == [64, 132], || {
            format!("descriptor shape {:?}", extraction.descriptors.shape())
        })
    })();
    report(2, "feature shapes", result);
}

#[test]
fn criterion_3_rotary_encoding() {
    let result = (|| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let d = 132;
        // orthogonality: the block rotation preserves norms and inner
        // products at every position
        for trial in 0..100_000 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let rx = rotary_apply(&p, d, &x).map_err(|e| e.to_string())?;
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nrx: f64 = rx.iter().map(|v| v * v).sum::<f64>().sqrt();
            check((nx - nrx).abs() / nx.max(1e-9) < 1e-5, || {
                format!("trial {trial}: norm drift {:.3e}", (nx - nrx).abs())
            })?;
        }
        // relative property: <R(p)x, R(q)y> depends only on p - q
        for trial in 0..2000 {
            let p = Point3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen());
            let q = Point3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen());
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let rx = rotary_apply(&p, d, &x).map_err(|e| e.to_string())?;
            let ry = rotary_apply(&q, d, &y).map_err(|e| e.to_string())?;
            let lhs: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
            let rel = Point3::from(q.coords - p.coords);
            let ry_rel = rotary_apply(&rel, d, &y).map_err(|e| e.to_string())?;
            let rhs: f64 = x.iter().zip(&ry_rel).map(|(a, b)| a * b).sum();
            check((lhs - rhs).abs() < 1e-4, || {
                format!("trial {trial}: relative dot drift {:.3e}", (lhs - rhs).abs())
            })?;
        }
        // full-descriptor translation invariance via the centering step
        let cfg = DescriptorConfig {
            k: 8,
            d: 24,
            attention_layers: 1,
            ..DescriptorConfig::default()
        };
        let cloud = sample_shape(ShapeKind::Torus, 60, 1).map_err(|e| e.to_string())?;
        let shift = Vector3::new(3.1, -2.4, 0.9);
        let shifted = PointCloud::new(
            cloud
                .points()
                .iter()
                .map(|p| Point3::from(p.coords + shift))
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let params = init_params(&cfg, 0, 0).map_err(|e| e.to_string())?;
        let a = extract_logdesc(&cloud, &cfg, &params).map_err(|e| e.to_string())?;
        let b = extract_logdesc(&shifted, &cfg, &params).map_err(|e| e.to_string())?;
        let drift = a
            .descriptors
            .iter()
            .zip(b.descriptors.iter())
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max);
        check(drift < 1e-3, || format!("descriptor translation drift {drift:.3e}"))
    })();
    report(3, "rotary encoding", result);
}

/// Exact linear assignment by exhaustive search (oracle for small m):
/// every permutation with its total score, best first.
fn ranked_permutations(scores: &Array2<f64>) -> Vec<(f64, Vec<usize>)> {
    let m = scores.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut out = Vec::new();
    // Heap's algorithm
    fn heaps(
        k: usize,
        arr: &mut Vec<usize>,
        scores: &Array2<f64>,
        out: &mut Vec<(f64, Vec<usize>)>,
    ) {
        if k == 1 {
            let total: f64 = arr.iter().enumerate().map(|(i, &j)| scores[[i, j]]).sum();
            out.push((total, arr.clone()));
            return;
        }
        for i in 0..k {
            heaps(k - 1, arr, scores, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }
    heaps(m, &mut perm, scores, &mut out);
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    out
}

#[test]
fn criterion_4_sinkhorn() {
    let result = (|| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for trial in 0..1000 {
            let m = rng.gen_range(3..12);
            let n = rng.gen_range(3..12);
            let scores = Array2::from_shape_fn((m, n), |_| rng.gen_range(-2.0..2.0));
            let plan = sinkhorn_log(&scores, rng.gen_range(-1.0..1.0), 50);
            let residual = marginal_residual(&plan);
            check(residual < 1e-6, || {
                format!("trial {trial}: marginal residual {residual:.3e}")
            })?;
        }
        for trial in 0..100 {
            let scores = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
            let ranked = ranked_permutations(&scores);
            // "low temperature" relative to the instance: well below the gap
            // between the best and second-best permutation, so the entropic
            // optimum concentrates on the assignment optimum
            let gap = ranked[0].0 - ranked[1].0;
            let tau = (gap / 25.0).min(0.002);
            let plan = sinkhorn_log(&scores.mapv(|v| v / tau), -1e9, 20_000);
            let mass: f64 = ranked[0]
                .1
                .iter()
                .enumerate()
                .map(|(i, &j)| plan[[i, j]].exp())
                .sum::<f64>()
                / 5.0;
            check(mass > 0.95, || {
                format!("trial {trial}: mass on optimal permutation {mass:.4}")
            })?;
        }
        Ok(())
    })();
    report(4, "sinkhorn transport", result);
}

#[test]
fn criterion_5_gradient_check() {
    let start = Instant::now();
    let result = (|| -> Result<(), String> {
        let report = run_gradcheck(0, 3).map_err(|e| e.to_string())?;
        check(!report.layers.is_empty(), || "no layers checked".to_string())?;
        for layer in &report.layers {
            check(layer.passed, || {
                format!(
                    "layer {} worst relative error {:.3e}",
                    layer.name, layer.worst_relative_error
                )
            })?;
        }
        check(start.elapsed().as_secs() < 300, || {
            format!("took {:?} (limit 5 min)", start.elapsed())
        })
    })();
    report(5, "gradient check", result);
}

#[test]
fn criterion_6_pose_estimation() {
    let start = Instant::now();
    let result = (|| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(600);
        // Kabsch exact recovery
        for trial in 0..20 {
            let gt = random_rigid(&mut rng);
            let source: Vec<Point3<f64>> = (0..40)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let target: Vec<Point3<f64>> = source.iter().map(|p| gt.apply_point(p)).collect();
            let pairs = PairedPoints::new(source, target).map_err(|e| e.to_string())?;
            let est = kabsch(&pairs, None).map_err(|e| e.to_string())?;
            let rot_err = (est.rotation - gt.rotation).abs().max();
            let t_err = (est.translation - gt.translation).norm();
            check(rot_err < 1e-10 && t_err < 1e-10, || {
                format!("trial {trial}: kabsch errors {rot_err:.3e}/{t_err:.3e}")
            })?;
        }
        // FSR at 40% outliers, C=500, unit scale, default configuration
        let mut successes = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(6000 + trial);
            let gt = random_rigid(&mut rng);
            let source: Vec<Point3<f64>> = (0..500)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let target: Vec<Point3<f64>> = source
                .iter()
                .map(|p| {
                    if rng.gen::<f64>() < 0.4 {
                        Point3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        )
                    } else {
                        gt.apply_point(p)
                    }
                })
                .collect();
            let pairs = PairedPoints::new(source, target).map_err(|e| e.to_string())?;
            let est = match fsr(&pairs, &FsrConfig { seed: trial, ..FsrConfig::default() }) {
                Ok(e) => e,
                Err(_) => continue,
            };
            let angle = (est.transform.rotation.transpose() * gt.rotation).trace();
            let angle = ((angle - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
            let t_err = (est.transform.translation - gt.translation).norm();
            if angle < 0.5 && t_err < 0.01 {
                successes += 1;
            }
        }
        check(successes >= 95, || {
            format!("FSR succeeded in only {successes}/100 trials")
        })?;
        check(start.elapsed().as_secs() < 120, || {
            format!("took {:?} (limit 2 min)", start.elapsed())
        })
    })();
    report(6, "pose estimation", result);
}

#[test]
fn criterion_7_toy_overfit() {
    let start = Instant::now();
    let result = (|| -> Result<(), String> {
        let model = toy_model_config();
        let cases = toy_fixture(20, 700).map_err(|e| e.to_string())?;
        let mut params =
            init_params(&model.descriptor, model.conditioning_layers, 700).map_err(|e| e.to_string())?;
        let evaluate = |params: &logdesc::nn::ParamSet| -> Result<(f64, f64), String> {
            let summary = evaluate_cases(
                &cases,
                &model,
                Some(params),
                Estimator::Fsr,
                0,
                0.05,
                FailureThresholds::default(),
                false,
            )
            .map_err(|e| e.to_string())?;
            Ok((summary.matching.precision, summary.registration.rmse_r_deg))
        };
        let mut epochs_done = 0usize;
        let chunk = 25usize;
        let mut last = evaluate(&params)?;
        while epochs_done < 300 {
            train_toy(&mut params, &model, &cases, chunk, 1e-4, |_, _| {})
                .map_err(|e| e.to_string())?;
            epochs_done += chunk;
            last = evaluate(&params)?;
            if last.0 >= 0.90 && last.1 <= 5.0 {
                break;
            }
        }
        check(last.0 >= 0.90, || {
            format!(
                "precision {:.4} after {epochs_done} epochs (need 0.90)",
                last.0
            )
        })?;
        check(last.1 <= 5.0, || {
            format!("RMSE(R) {:.3} deg after {epochs_done} epochs (need 5)", last.1)
        })?;
        check(start.elapsed().as_secs() < 1800, || {
            format!("took {:?} (limit 30 min)", start.elapsed())
        })
    })();
    report(7, "toy overfit", result);
}

#[test]
fn criterion_8_protocol_conformance() {
    let result = (|| -> Result<(), String> {
        let clouds: Vec<_> = ALL_SHAPES
            .iter()
            .enumerate()
            .map(|(i, &kind)| sample_shape(kind, 1200, 800 + i as u64).unwrap())
            .collect();
        for case_idx in 0..1000u64 {
            let cloud = &clouds[(case_idx % 6) as usize];
            let partial = case_idx % 3 != 0;
            let noise = case_idx % 2 == 0;
            let cfg = ProtocolConfig {
                seed: case_idx,
                noise,
                partial: if partial { Some(768) } else { None },
                ..ProtocolConfig::default()
            };
            let case = make_case(cloud, &cfg).map_err(|e| e.to_string())?;
            check(
                case.ground_truth.rotation_angle() <= 45f64.to_radians() + 1e-12,
                || format!("case {case_idx}: rotation exceeds 45 deg"),
            )?;
            for c in 0..3 {
                check(case.ground_truth.translation[c].abs() <= 0.5, || {
                    format!("case {case_idx}: translation out of range")
                })?;
            }
            let expected = if partial { 768 } else { 1024 };
            check(
                case.source.len() == expected && case.target.len() == expected,
                || format!("case {case_idx}: wrong side sizes"),
            )?;
            // injectivity of the correspondence
            let mut seen = vec![false; case.target.len()];
            for c in case.correspondence.iter().flatten() {
                check(!seen[*c], || format!("case {case_idx}: duplicate target index"))?;
                seen[*c] = true;
            }
            // noise bound: each side clips at 0.05 per coordinate, so the
            // residual against the ground-truth motion is at most the two
            // clipped vectors combined (one of them rotated)
            let bound = if noise { 2.0 * 0.05 * 3f64.sqrt() + 1e-12 } else { 1e-12 };
            for (i, c) in case.correspondence.iter().enumerate() {
                if let Some(j) = c {
                    let delta = (case.ground_truth.apply_point(&case.source.point(i))
                        - case.target.point(*j))
                    .norm();
                    check(delta <= bound, || {
                        format!("case {case_idx}: residual {delta:.4} exceeds noise bound")
                    })?;
                }
            }
        }
        Ok(())
    })();
    report(8, "protocol conformance", result);
}

#[test]
fn criterion_9_ablation_harness() {
    let result = (|| -> Result<(), String> {
        // paired seeds: identical cases and identical (briefly trained)
        // weights; one input channel disabled at a time at inference.
        // Training amplifies the channels enough that each one influences
        // the match set; handcrafted-only matching is dominated by the
        // coordinate channels and would not register the omnivariance flag.
        let model = toy_model_config();
        let cases = toy_fixture(6, 901).map_err(|e| e.to_string())?;
        let mut params = init_params(&model.descriptor, model.conditioning_layers, 901)
            .map_err(|e| e.to_string())?;
        train_toy(&mut params, &model, &cases, 30, 1e-3, |_, _| {})
            .map_err(|e| e.to_string())?;
        let run = |flags: (bool, bool, bool, bool)| -> Result<(f64, f64, f64), String> {
            let mut ablated = model.clone();
            ablated.descriptor.use_a = flags.0;
            ablated.descriptor.use_p = flags.1;
            ablated.descriptor.use_o = flags.2;
            ablated.descriptor.use_n = flags.3;
            let s = evaluate_cases(
                &cases,
                &ablated,
                Some(&params),
                Estimator::Fsr,
                0,
                0.05,
                FailureThresholds::default(),
                true,
            )
            .map_err(|e| e.to_string())?;
            Ok((s.matching.precision, s.matching.accuracy, s.matching.recall))
        };
        let baseline = run((true, true, true, true))?;
        for (name, flags) in [
            ("A", (false, true, true, true)),
            ("P", (true, false, true, true)),
            ("O", (true, true, false, true)),
            ("N", (true, true, true, false)),
        ] {
            let ablated = run(flags)?;
            check(ablated != baseline, || {
                format!("disabling {name} left P/A/R unchanged: {baseline:?}")
            })?;
        }
        Ok(())
    })();
    report(9, "ablation harness", result);
}

#[test]
fn criterion_10_determinism_and_serialization() {
    let result = (|| -> Result<(), String> {
        // checkpoint round trip at full default size is bit-exact
        let cfg = DescriptorConfig::default();
        let params = init_params(&cfg, 4, 0).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path_a = dir.path().join("a.ckpt");
        let path_b = dir.path().join("b.ckpt");
        logdesc::io::write_checkpoint(&path_a, &params).map_err(|e| e.to_string())?;
        logdesc::io::write_checkpoint(&path_b, &params).map_err(|e| e.to_string())?;
        let bytes_a = std::fs::read(&path_a).map_err(|e| e.to_string())?;
        let bytes_b = std::fs::read(&path_b).map_err(|e| e.to_string())?;
        check(bytes_a == bytes_b, || "checkpoint writer not deterministic".to_string())?;
        let back = logdesc::io::read_checkpoint(&path_a).map_err(|e| e.to_string())?;
        for ((na, ta), (nb, tb)) in params.iter().zip(back.iter()) {
            check(na == nb && ta.shape() == tb.shape(), || "layout drift".to_string())?;
            for (x, y) in ta.iter().zip(tb.iter()) {
                check(x.to_bits() == y.to_bits(), || {
                    format!("parameter {na} not bit-exact after round trip")
                })?;
            }
        }
        // seeded end-to-end runs repeat exactly in deterministic mode
        let model = ModelConfig {
            descriptor: DescriptorConfig {
                k: 8,
                d: 24,
                attention_layers: 1,
                ..DescriptorConfig::default()
            },
            conditioning_layers: 1,
            sinkhorn_iterations: 20,
        };
        let small = init_params(&model.descriptor, 1, 5).map_err(|e| e.to_string())?;
        let cloud = sample_shape(ShapeKind::Cube, 100, 10).map_err(|e| e.to_string())?;
        let case = make_case(
            &cloud,
            &ProtocolConfig {
                points_kept: 64,
                partial: None,
                seed: 11,
                ..ProtocolConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let run = || {
            evaluate_cases(
                &[case.clone()],
                &model,
                Some(&small),
                Estimator::Fsr,
                3,
                0.05,
                FailureThresholds::default(),
                true,
            )
            .map_err(|e| e.to_string())
        };
        let a = run()?;
        let b = run()?;
        check(
            a.registration.rmse_r_deg.to_bits() == b.registration.rmse_r_deg.to_bits()
                && a.matching.precision.to_bits() == b.matching.precision.to_bits(),
            || "repeated deterministic runs diverged".to_string(),
        )
    })();
    report(10, "determinism and serialization", result);
}
