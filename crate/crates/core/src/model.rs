//! End-to-end model assembly: parameter registry and initialization, the
//! descriptor + conditioning + transport forward pass for a cloud pair, and
//! the assignment negative log-likelihood used for training.

use nalgebra::Point3;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::descriptor::{DescriptorConfig, DescriptorError};
use crate::geometry::LocalGeometry;
use crate::matching::{sinkhorn_on_tape, SINKHORN_ITERATIONS};
use crate::nn::{BoundParams, Element, Graph, NnError, ParamSet, TensorId};
use crate::transformer::{angle_embedding_table, conditioned_attention};

/// Hyper-parameters of the full registration model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub descriptor: DescriptorConfig,
    /// Self/cross attention pairs in the normal-conditioned refinement.
    pub conditioning_layers: usize,
    pub sinkhorn_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            conditioning_layers: 4,
            sinkhorn_iterations: SINKHORN_ITERATIONS,
        }
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn insert_linear(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), NnError> {
    ps.insert(name, kaiming_uniform(rng, fan_in, &[fan_in, fan_out]))
}

fn insert_mlp(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) -> Result<(), NnError> {
    insert_linear(ps, rng, &format!("{prefix}.w1"), 2 * d, 2 * d)?;
    ps.insert(&format!("{prefix}.b1"), ArrayD::zeros(IxDyn(&[2 * d])))?;
    // zero-init the second layer so every residual branch starts as the
    // identity; the stack then sharpens from a well-scaled starting point
    ps.insert(&format!("{prefix}.w2"), ArrayD::zeros(IxDyn(&[2 * d, d])))?;
    ps.insert(&format!("{prefix}.b2"), ArrayD::zeros(IxDyn(&[d])))
}

/// Registers and initializes every parameter: descriptor CNN stages, rotary
/// self-attention layers, `conditioning_layers` self/cross pairs and the
/// transport dustbin scalar. Weights are fan-in-scaled uniform, biases and
/// norm offsets zero, norm gains one, dustbin 1.
pub fn init_params(
    cfg: &DescriptorConfig,
    conditioning_layers: usize,
    seed: u64,
) -> Result<ParamSet, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let d = cfg.d;
    let channels = cfg.cnn_channels();
    for stage in 0..3 {
        let (cin, cout) = (channels[stage], channels[stage + 1]);
        insert_linear(&mut ps, &mut rng, &format!("desc.cnn{stage}.weight"), cin, cout)?;
        ps.insert(&format!("desc.cnn{stage}.bias"), ArrayD::zeros(IxDyn(&[cout])))?;
        ps.insert(&format!("desc.cnn{stage}.gain"), ArrayD::from_elem(IxDyn(&[cout]), 1.0))?;
        ps.insert(&format!("desc.cnn{stage}.offset"), ArrayD::zeros(IxDyn(&[cout])))?;
    }
    let dh = d / cfg.attention_heads;
    for layer in 0..cfg.attention_layers {
        let prefix = format!("desc.attn{layer}");
        for h in 0..cfg.attention_heads {
            let suffix = if cfg.attention_heads == 1 {
                String::new()
            } else {
                format!(".h{h}")
            };
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wq{suffix}"), d, dh)?;
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wk{suffix}"), d, dh)?;
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wv{suffix}"), d, dh)?;
        }
        insert_mlp(&mut ps, &mut rng, &format!("{prefix}.mlp"), d)?;
    }
    for layer in 0..conditioning_layers {
        for kind in ["self", "cross"] {
            let prefix = format!("cond{layer}.{kind}");
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wq"), d, d)?;
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wk"), d, d)?;
            insert_linear(&mut ps, &mut rng, &format!("{prefix}.wv"), d, d)?;
            if kind == "self" {
                insert_linear(&mut ps, &mut rng, &format!("{prefix}.wr"), d, d)?;
            }
            insert_mlp(&mut ps, &mut rng, &format!("{prefix}.mlp"), d)?;
        }
    }
    ps.insert("match.dustbin", ArrayD::from_elem(IxDyn(&[]), 1.0))?;
    // shared normalization of the final descriptors: without it the
    // residual stack leaves unbounded magnitudes and the initial transport
    // plan is saturated (confidently wrong), which stalls training
    ps.insert("match.norm.gain", ArrayD::from_elem(IxDyn(&[d]), 1.0))?;
    ps.insert("match.norm.offset", ArrayD::zeros(IxDyn(&[d])))?;
    Ok(ps)
}

/// Precomputed per-cloud inputs to the learned forward pass (mean-centered
/// positions, handcrafted features, per-point geometry).
pub struct CloudInputs {
    pub positions: Vec<Point3<f64>>,
    pub f2: Array3<f64>,
    pub geometry: Vec<LocalGeometry>,
}

impl CloudInputs {
    pub fn from_centered(
        centered: &crate::geometry::PointCloud,
        cfg: &DescriptorConfig,
    ) -> Result<Self, DescriptorError> {
        let (f2, geometry) = crate::descriptor::handcrafted_features(centered, cfg)?;
        Ok(Self {
            positions: centered.points().to_vec(),
            f2,
            geometry,
        })
    }
}

/// Tensor ids of the pair forward: refined descriptors for both clouds and
/// the dustbin-augmented log transport plan.
pub struct PairForward {
    pub source_descriptors: TensorId,
    pub target_descriptors: TensorId,
    pub log_plan: TensorId,
}

/// Builds the whole pair pipeline on `g`: shared-weight descriptor for each
/// cloud, normal-conditioned attention, Sinkhorn transport.
pub fn pair_forward<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    source: &CloudInputs,
    target: &CloudInputs,
) -> Result<PairForward, DescriptorError> {
    let dcfg = &cfg.descriptor;
    let f = crate::descriptor::descriptor_forward(g, bound, &source.f2, &source.positions, dcfg)?;
    let h = crate::descriptor::descriptor_forward(g, bound, &target.f2, &target.positions, dcfg)?;
    let (f, h) = if cfg.conditioning_layers > 0 {
        let table_f = angle_embedding_table::<E>(&source.geometry, dcfg.d);
        let table_h = angle_embedding_table::<E>(&target.geometry, dcfg.d);
        conditioned_attention(g, bound, f, h, &table_f, &table_h, cfg.conditioning_layers, dcfg.d)?
    } else {
        (f, h)
    };
    let f = normalize_descriptors(g, bound, f, dcfg.d)?;
    let h = normalize_descriptors(g, bound, h, dcfg.d)?;
    let dustbin = bound.id("match.dustbin")?;
    let log_plan = sinkhorn_on_tape(g, f, h, dustbin, cfg.sinkhorn_iterations)?;
    Ok(PairForward {
        source_descriptors: f,
        target_descriptors: h,
        log_plan,
    })
}

/// Per-point layer normalization of [n, d] descriptors with the shared
/// `match.norm` gain/offset, keeping the transport logits well-scaled.
fn normalize_descriptors<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    x: TensorId,
    d: usize,
) -> Result<TensorId, NnError> {
    let n = g.shape(x)[0];
    let gain = bound.id("match.norm.gain")?;
    let offset = bound.id("match.norm.offset")?;
    let x3 = g.reshape(x, vec![n, 1, d])?;
    let y = g.group_norm(x3, gain, offset, 1)?;
    g.reshape(y, vec![n, d])
}

/// Ground-truth assignment targets for the NLL loss: matched pairs plus
/// dustbin entries for unmatched sources (column n) and targets (row m).
pub fn assignment_targets(
    correspondence: &[Option<usize>],
    target_len: usize,
) -> Vec<(usize, usize)> {
    let m = correspondence.len();
    let n = target_len;
    let mut matched_targets = vec![false; n];
    let mut targets = Vec::new();
    for (i, c) in correspondence.iter().enumerate() {
        match c {
            Some(j) => {
                targets.push((i, *j));
                matched_targets[*j] = true;
            }
            None => targets.push((i, n)),
        }
    }
    for (j, hit) in matched_targets.iter().enumerate() {
        if !hit {
            targets.push((m, j));
        }
    }
    targets
}

/// Mean NLL of the ground-truth assignment under the log transport plan.
pub fn assignment_loss<E: Element>(
    g: &mut Graph<E>,
    log_plan: TensorId,
    correspondence: &[Option<usize>],
    target_len: usize,
) -> Result<TensorId, NnError> {
    g.nll_selected(log_plan, assignment_targets(correspondence, target_len))
}
