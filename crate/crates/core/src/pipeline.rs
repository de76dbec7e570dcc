//! End-to-end orchestration: extract descriptors for a cloud pair, match
//! them, estimate the rigid motion, run benchmark protocols over synthetic
//! cases, train the toy fixture, and drive the gradient-check suite.

use ndarray::{Array2, ArrayD, Ix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    make_case, sample_shape, DatagenError, ProtocolConfig, RegistrationCase, ALL_SHAPES,
};
use crate::descriptor::{geometric_descriptor, DescriptorConfig, DescriptorError};
use crate::geometry::{GeometryError, PointCloud, RigidTransform};
use crate::matching::{mutual_best, sinkhorn_log, MatchSet, SINKHORN_ITERATIONS};
use crate::metrics::{
    aggregate, case_errors, matching_par, FailureThresholds, MatchingReport, MetricsError,
    RegistrationReport,
};
use crate::model::{assignment_loss, init_params, pair_forward, CloudInputs, ModelConfig};
use crate::nn::{
    bind_params, check_gradients, Adam, AdamConfig, GradCheckReport, Graph, NnError,
    ParamSet,
};
use crate::pose::{fsr, kabsch, ransac, FsrConfig, PoseError, RansacConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error("registration is degenerate: only {0} matches (need at least 3)")]
    DegenerateMatches(usize),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Fsr,
    Ransac,
    Svd,
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "fsr" => Self::Fsr,
            "ransac" => Self::Ransac,
            "svd" => Self::Svd,
            other => return Err(format!("unknown estimator: {other} (use fsr|ransac|svd)")),
        })
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fsr => "fsr",
            Self::Ransac => "ransac",
            Self::Svd => "svd",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub matches: MatchSet,
}

const GEOMETRIC_TEMPERATURE: f64 = 0.05;
const GEOMETRIC_DUSTBIN: f64 = 1.0;

fn normalize_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    a
}

fn learned_log_plan(
    params: &ParamSet,
    cfg: &ModelConfig,
    source: &CloudInputs,
    target: &CloudInputs,
) -> Result<Array2<f64>, PipelineError> {
    let mut g = Graph::<f32>::new();
    let bound = bind_params(&mut g, params);
    let fwd = pair_forward(&mut g, &bound, cfg, source, target)?;
    g.check_finite()?;
    let plan = g
        .value(fwd.log_plan)
        .mapv(|v| v as f64)
        .into_dimensionality::<Ix2>()
        .expect("log plan is 2-D");
    Ok(plan)
}

/// Matches two mean-centered clouds. With parameters, runs the learned
/// pipeline; without, falls back to the handcrafted 15-dim max-pooled
/// descriptor through the same Sinkhorn + mutual-best matcher.
pub fn match_pair(
    source: &CloudInputs,
    target: &CloudInputs,
    cfg: &ModelConfig,
    params: Option<&ParamSet>,
) -> Result<MatchSet, PipelineError> {
    match params {
        Some(p) => {
            let plan = learned_log_plan(p, cfg, source, target)?;
            Ok(mutual_best(&plan))
        }
        None => {
            let f = normalize_rows(geometric_descriptor(&source.f2));
            let h = normalize_rows(geometric_descriptor(&target.f2));
            // cosine similarity needs a low temperature: handcrafted
            // descriptors of nearby points are nearly parallel
            let scores = f.dot(&h.t()) / GEOMETRIC_TEMPERATURE;
            let plan = sinkhorn_log(&scores, GEOMETRIC_DUSTBIN, SINKHORN_ITERATIONS);
            Ok(mutual_best(&plan))
        }
    }
}

/// Registers `source` onto `target`: centering, descriptor matching, and
/// robust pose estimation, with the estimate composed back into the
/// original (uncentered) frames.
pub fn register_pair(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &ModelConfig,
    params: Option<&ParamSet>,
    estimator: Estimator,
    seed: u64,
) -> Result<RegistrationResult, PipelineError> {
    cfg.descriptor.validate()?;
    for cloud in [source, target] {
        if cloud.len() < cfg.descriptor.k {
            return Err(DescriptorError::CloudSmallerThanK {
                size: cloud.len(),
                k: cfg.descriptor.k,
            }
            .into());
        }
    }
    let (src_c, c_src) = source.centered();
    let (tgt_c, c_tgt) = target.centered();
    let src_in = CloudInputs::from_centered(&src_c, &cfg.descriptor)?;
    let tgt_in = CloudInputs::from_centered(&tgt_c, &cfg.descriptor)?;
    let matches = match_pair(&src_in, &tgt_in, cfg, params)?;
    if matches.len() < 3 {
        return Err(PipelineError::DegenerateMatches(matches.len()));
    }
    let paired = crate::pose::PairedPoints::from_matches(&src_c, &tgt_c, &matches.pairs);
    let centered_estimate = match estimator {
        Estimator::Svd => kabsch(&paired, Some(&matches.confidence))?,
        Estimator::Fsr => {
            fsr(
                &paired,
                &FsrConfig {
                    seed,
                    ..FsrConfig::default()
                },
            )?
            .transform
        }
        Estimator::Ransac => {
            ransac(
                &paired,
                &RansacConfig {
                    seed,
                    ..RansacConfig::default()
                },
            )?
            .transform
        }
    };
    // undo the centering: T = shift(+c_tgt) ∘ T_centered ∘ shift(-c_src)
    let pre = RigidTransform {
        rotation: nalgebra::Matrix3::identity(),
        translation: -c_src,
    };
    let post = RigidTransform {
        rotation: nalgebra::Matrix3::identity(),
        translation: c_tgt,
    };
    let transform = post.compose(&centered_estimate.compose(&pre));
    Ok(RegistrationResult { transform, matches })
}

/// One evaluated case: pose errors plus correspondence quality. A case
/// whose registration degenerates is scored against the identity estimate
/// so it surfaces as a failure rather than aborting the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub errors: crate::metrics::CaseErrors,
    pub matching: MatchingReport,
    pub degenerate: bool,
}

fn evaluate_case(
    case: &RegistrationCase,
    cfg: &ModelConfig,
    params: Option<&ParamSet>,
    estimator: Estimator,
    seed: u64,
    match_threshold: f64,
) -> Result<CaseOutcome, PipelineError> {
    let result = register_pair(&case.source, &case.target, cfg, params, estimator, seed);
    let (transform, matches, degenerate) = match result {
        Ok(r) => (r.transform, r.matches, false),
        Err(PipelineError::DegenerateMatches(_)) | Err(PipelineError::Pose(_)) => (
            RigidTransform::identity(),
            MatchSet {
                pairs: vec![],
                confidence: vec![],
            },
            true,
        ),
        Err(e) => return Err(e),
    };
    let errors = case_errors(case.source.points(), &transform, &case.ground_truth)?;
    let matching = matching_par(
        &matches,
        &case.correspondence,
        case.source.points(),
        case.target.points(),
        &case.ground_truth,
        match_threshold,
    );
    Ok(CaseOutcome {
        errors,
        matching,
        degenerate,
    })
}

/// Mean correspondence metrics over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingSummary {
    pub precision: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub inlier_ratio: f64,
}

fn summarize_matching(outcomes: &[CaseOutcome]) -> MatchingSummary {
    let n = outcomes.len() as f64;
    MatchingSummary {
        precision: outcomes.iter().map(|o| o.matching.precision).sum::<f64>() / n,
        accuracy: outcomes.iter().map(|o| o.matching.accuracy).sum::<f64>() / n,
        recall: outcomes.iter().map(|o| o.matching.recall).sum::<f64>() / n,
        inlier_ratio: outcomes.iter().map(|o| o.matching.inlier_ratio).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub registration: RegistrationReport,
    pub matching: MatchingSummary,
    pub degenerate_cases: usize,
    pub cases_evaluated: usize,
}

/// Evaluates prepared cases, optionally in parallel. Results are reduced
/// in case order, so parallel and sequential runs agree.
pub fn evaluate_cases(
    cases: &[RegistrationCase],
    cfg: &ModelConfig,
    params: Option<&ParamSet>,
    estimator: Estimator,
    base_seed: u64,
    match_threshold: f64,
    fail: FailureThresholds,
    deterministic: bool,
) -> Result<EvaluationSummary, PipelineError> {
    let run = |(i, case): (usize, &RegistrationCase)| {
        evaluate_case(
            case,
            cfg,
            params,
            estimator,
            base_seed.wrapping_add(i as u64),
            match_threshold,
        )
    };
    let outcomes: Vec<CaseOutcome> = if deterministic {
        cases
            .iter()
            .enumerate()
            .map(run)
            .collect::<Result<_, _>>()?
    } else {
        cases
            .par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_, _>>()?
    };
    let registration = aggregate(outcomes.iter().map(|o| o.errors.clone()).collect(), fail)?;
    Ok(EvaluationSummary {
        matching: summarize_matching(&outcomes),
        degenerate_cases: outcomes.iter().filter(|o| o.degenerate).count(),
        cases_evaluated: outcomes.len(),
        registration,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub protocol: ProtocolConfig,
    pub pairs: usize,
    /// Points sampled per base shape before the protocol subsamples.
    pub shape_points: usize,
    pub estimator: Estimator,
    pub match_threshold: f64,
    pub failure: FailureThresholds,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            pairs: 10,
            shape_points: 2048,
            estimator: Estimator::Fsr,
            match_threshold: 0.05,
            failure: FailureThresholds::default(),
            deterministic: false,
            seed: 0,
        }
    }
}

/// Generates the seeded case list for a benchmark run, cycling through
/// the shape families.
pub fn benchmark_cases(cfg: &BenchmarkConfig) -> Result<Vec<RegistrationCase>, PipelineError> {
    (0..cfg.pairs)
        .map(|i| {
            let kind = ALL_SHAPES[i % ALL_SHAPES.len()];
            let cloud = sample_shape(kind, cfg.shape_points, cfg.seed.wrapping_add(7919 + i as u64))?;
            let proto = ProtocolConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.protocol.clone()
            };
            Ok(make_case(&cloud, &proto)?)
        })
        .collect()
}

pub fn run_benchmark(
    cfg: &BenchmarkConfig,
    model: &ModelConfig,
    params: Option<&ParamSet>,
) -> Result<EvaluationSummary, PipelineError> {
    let cases = benchmark_cases(cfg)?;
    evaluate_cases(
        &cases,
        model,
        params,
        cfg.estimator,
        cfg.seed,
        cfg.match_threshold,
        cfg.failure,
        cfg.deterministic,
    )
}

/// Desk-scale training fixture: small partial-noisy pairs. The protocol
/// structure (permute, subsample, per-side noise, per-side crop) is kept,
/// with sizes and noise scaled down so correspondence supervision at the
/// 0.05 distance threshold stays meaningful.
pub fn toy_fixture(pairs: usize, seed: u64) -> Result<Vec<RegistrationCase>, PipelineError> {
    let protocol = ProtocolConfig {
        points_kept: 128,
        partial: Some(96),
        noise: true,
        noise_std: 0.01,
        noise_clip: 0.05,
        seed,
        ..ProtocolConfig::default()
    };
    (0..pairs)
        .map(|i| {
            let kind = ALL_SHAPES[i % ALL_SHAPES.len()];
            let cloud = sample_shape(kind, 256, seed.wrapping_add(31 + i as u64))?;
            let proto = ProtocolConfig {
                seed: seed.wrapping_add(i as u64),
                ..protocol.clone()
            };
            Ok(make_case(&cloud, &proto)?)
        })
        .collect()
}

/// Model sized for the toy fixture (smaller d and k than the full
/// defaults, same architecture).
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        descriptor: DescriptorConfig {
            k: 12,
            d: 48,
            attention_layers: 2,
            ..DescriptorConfig::default()
        },
        conditioning_layers: 2,
        sinkhorn_iterations: 20,
    }
}

pub struct TrainOutcome {
    /// Mean assignment NLL per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the full pipeline on prepared cases with the assignment NLL.
/// One optimizer step per pair per epoch. Handcrafted inputs are computed
/// once and reused across epochs.
pub fn train_toy(
    params: &mut ParamSet,
    model: &ModelConfig,
    cases: &[RegistrationCase],
    epochs: usize,
    learning_rate: f32,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome, PipelineError> {
    assert!(epochs >= 1, "need at least one epoch");
    let inputs: Vec<(CloudInputs, CloudInputs)> = cases
        .iter()
        .map(|case| {
            let (src_c, _) = case.source.centered();
            let (tgt_c, _) = case.target.centered();
            Ok((
                CloudInputs::from_centered(&src_c, &model.descriptor)?,
                CloudInputs::from_centered(&tgt_c, &model.descriptor)?,
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate,
        ..AdamConfig::default()
    });
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0f64;
        for (case, (src_in, tgt_in)) in cases.iter().zip(&inputs) {
            let mut g = Graph::<f32>::new();
            let bound = bind_params(&mut g, params);
            let fwd = pair_forward(&mut g, &bound, model, src_in, tgt_in)?;
            let loss = assignment_loss(&mut g, fwd.log_plan, &case.correspondence, case.target.len())?;
            let loss_value = g.value(loss).iter().next().copied().unwrap() as f64;
            if !loss_value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch: epoch + 1 });
            }
            total += loss_value;
            let grads = g.backward(loss)?;
            let grads = bound.collect_grads(&grads)?;
            adam.step(params, &grads)?;
        }
        let mean = total / cases.len() as f64;
        on_epoch(epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { epoch_losses })
}

/// Gradient-check driver: a tiny model replayed in f64 through the whole
/// pair pipeline (descriptor CNN, rotary attention, conditioning, Sinkhorn,
/// NLL loss), so every parameterized layer is exercised by one loss.
pub fn run_gradcheck(seed: u64, samples_per_param: usize) -> Result<GradCheckReport, PipelineError> {
    let model = ModelConfig {
        descriptor: DescriptorConfig {
            k: 4,
            d: 12,
            attention_layers: 1,
            pca_max_neighbors: 6,
            ..DescriptorConfig::default()
        },
        conditioning_layers: 1,
        sinkhorn_iterations: 5,
    };
    let params = init_params(&model.descriptor, model.conditioning_layers, seed)?;
    let cloud = sample_shape(crate::datagen::ShapeKind::Torus, 10, seed)?;
    let case = make_case(
        &cloud,
        &ProtocolConfig {
            points_kept: 8,
            partial: Some(6),
            noise: false,
            seed,
            ..ProtocolConfig::default()
        },
    )?;
    let (src_c, _) = case.source.centered();
    let (tgt_c, _) = case.target.centered();
    let src_in = CloudInputs::from_centered(&src_c, &model.descriptor)?;
    let tgt_in = CloudInputs::from_centered(&tgt_c, &model.descriptor)?;

    let report = check_gradients(&params, samples_per_param, seed, |p, _| {
        let mut g = Graph::<f64>::new();
        let bound = bind_params(&mut g, p);
        let fwd = pair_forward(&mut g, &bound, &model, &src_in, &tgt_in)
            .map_err(|_| NnError::NonFinite("pair forward"))?;
        let loss = assignment_loss(&mut g, fwd.log_plan, &case.correspondence, case.target.len())?;
        let loss_value = g.value(loss).iter().next().copied().unwrap();
        let grads = g.backward(loss)?;
        let analytic = bound
            .iter()
            .map(|(name, id)| {
                let grad = grads[id.0]
                    .clone()
                    .ok_or_else(|| NnError::MissingGradient(name.to_string()))?;
                Ok((name.to_string(), grad))
            })
            .collect::<Result<Vec<(String, ArrayD<f64>)>, NnError>>()?;
        Ok((loss_value, analytic))
    })?;
    Ok(report)
}
