//! Command-line entry point: registration of cloud pairs, synthetic
//! benchmark runs, toy training, and gradient checking.
//!
//! Exit codes: 0 success, 2 I/O or input error, 3 degenerate registration,
//! 4 non-finite values during training/inference, 5 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use logdesc::datagen::ProtocolConfig;
use logdesc::descriptor::DescriptorConfig;
use logdesc::io::{read_checkpoint, read_cloud, write_checkpoint, CloudFormat, TransformRecord};
use logdesc::metrics::FailureThresholds;
use logdesc::model::{init_params, ModelConfig};
use logdesc::nn::ParamSet;
use logdesc::pipeline::{
    run_benchmark, run_gradcheck, toy_fixture, toy_model_config, train_toy, BenchmarkConfig,
    Estimator, PipelineError,
};

const EXIT_IO: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_NONFINITE: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "logdesc",
    about = "Point cloud registration with hybrid geometric descriptors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Base random seed for all stochastic stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Force sequential execution for byte-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Per-epoch / per-case progress on standard error.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Neighborhood size for the handcrafted features.
    #[arg(long, default_value_t = 30)]
    k: usize,
    /// Descriptor dimension (must be divisible by 6 and the group count).
    #[arg(long, default_value_t = 132)]
    d: usize,
    /// Rotary self-attention layers in the descriptor stage.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Normal-conditioned self/cross attention layers.
    #[arg(long, default_value_t = 4)]
    conditioning_layers: usize,
    /// Drop the anisotropy channel.
    #[arg(long = "no-A")]
    no_a: bool,
    /// Drop the planarity channel.
    #[arg(long = "no-P")]
    no_p: bool,
    /// Drop the omnivariance channel.
    #[arg(long = "no-O")]
    no_o: bool,
    /// Drop the projected-normal channels.
    #[arg(long = "no-N")]
    no_n: bool,
}

impl ModelArgs {
    fn to_model(&self) -> ModelConfig {
        ModelConfig {
            descriptor: DescriptorConfig {
                k: self.k,
                d: self.d,
                attention_layers: self.layers,
                use_a: !self.no_a,
                use_p: !self.no_p,
                use_o: !self.no_o,
                use_n: !self.no_n,
                ..DescriptorConfig::default()
            },
            conditioning_layers: self.conditioning_layers,
            sinkhorn_iterations: logdesc::matching::SINKHORN_ITERATIONS,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Checkpoint with trained weights; omit for the handcrafted
        /// geometric-only descriptor.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "fsr")]
        estimator: Estimator,
        /// Write the transform record (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the synthetic corruption-protocol benchmark.
    Benchmark {
        #[arg(long, default_value = "partial-noisy")]
        protocol: String,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        /// Points kept per side before any partial crop.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "fsr")]
        estimator: Estimator,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Overfit the model on a small synthetic fixture and save weights.
    TrainToy {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        /// Resume from an existing checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every parameterized layer.
    Gradcheck {
        /// Elements probed per parameter tensor.
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<logdesc::io::IoError> for Failure {
    fn from(e: logdesc::io::IoError) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::DegenerateMatches(_) | PipelineError::Pose(_) => EXIT_DEGENERATE,
            PipelineError::NonFiniteLoss { .. } => EXIT_NONFINITE,
            PipelineError::Nn(logdesc::nn::NnError::NonFinite(_)) => EXIT_NONFINITE,
            _ => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

fn load_weights(path: &Option<PathBuf>) -> Result<Option<ParamSet>, Failure> {
    match path {
        Some(p) => Ok(Some(read_checkpoint(p)?)),
        None => Ok(None),
    }
}

fn cap_threads(deterministic: bool) {
    let threads = if deterministic {
        Some(1)
    } else {
        std::env::var("LOGDESC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    };
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn cmd_register(
    cli: &Cli,
    source: &PathBuf,
    target: &PathBuf,
    weights: &Option<PathBuf>,
    estimator: Estimator,
    out: &Option<PathBuf>,
    model_args: &ModelArgs,
) -> Result<(), Failure> {
    let src = read_cloud(source, CloudFormat::Auto)?;
    let tgt = read_cloud(target, CloudFormat::Auto)?;
    let params = load_weights(weights)?;
    let model = model_args.to_model();
    let result = logdesc::pipeline::register_pair(
        &src,
        &tgt,
        &model,
        params.as_ref(),
        estimator,
        cli.seed,
    )?;
    let angle = result.transform.rotation_angle().to_degrees();
    let t_norm = result.transform.translation.norm();
    println!(
        "matches: {}  rotation: {:.4} deg  translation: {:.6}",
        result.matches.len(),
        angle,
        t_norm
    );
    if let Some(path) = out {
        let record = TransformRecord::new(
            &result.transform,
            &estimator.to_string(),
            serde_json::json!({
                "matches": result.matches.len(),
                "rotation_deg": angle,
                "translation_norm": t_norm,
            }),
            cli.seed,
            serde_json::json!({
                "k": model.descriptor.k,
                "d": model.descriptor.d,
                "layers": model.descriptor.attention_layers,
                "conditioning_layers": model.conditioning_layers,
                "weights": weights.as_ref().map(|p| p.display().to_string()),
            }),
        );
        record.write(path)?;
        if cli.verbose {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    cli: &Cli,
    protocol: &str,
    pairs: usize,
    points: Option<usize>,
    weights: &Option<PathBuf>,
    estimator: Estimator,
    out: &Option<PathBuf>,
    model_args: &ModelArgs,
) -> Result<(), Failure> {
    if pairs == 0 {
        return Err(Failure::new(EXIT_IO, "--pairs must be at least 1"));
    }
    let mut proto = ProtocolConfig::preset(protocol, cli.seed).ok_or_else(|| {
        Failure::new(
            EXIT_IO,
            format!("unknown protocol: {protocol} (use clean|full-noisy|partial-noisy)"),
        )
    })?;
    if let Some(p) = points {
        // keep the 1024:768 crop ratio when scaling down
        proto.partial = proto.partial.map(|_| p * 3 / 4);
        proto.points_kept = p;
    }
    let shape_points = proto.points_kept * 2;
    let params = load_weights(weights)?;
    let cfg = BenchmarkConfig {
        protocol: proto,
        pairs,
        shape_points,
        estimator,
        match_threshold: 0.05,
        failure: FailureThresholds::default(),
        deterministic: cli.deterministic,
        seed: cli.seed,
    };
    let model = model_args.to_model();
    let summary = run_benchmark(&cfg, &model, params.as_ref())?;
    let r = &summary.registration;
    println!("cases: {}  degenerate: {}", summary.cases_evaluated, summary.degenerate_cases);
    println!(
        "rmse_R: {:.4} deg  mae_R: {:.4} deg  rmse_t: {:.6}  mae_t: {:.6}",
        r.rmse_r_deg, r.mae_r_deg, r.rmse_t, r.mae_t
    );
    println!(
        "L_R: {:.4} deg  L_t: {:.6}  L_RMSE: {:.6}  FR: {:.1}%",
        r.l_r_deg,
        r.l_t,
        r.l_rmse,
        100.0 * r.failure_rate
    );
    let m = &summary.matching;
    println!(
        "precision: {:.4}  accuracy: {:.4}  recall: {:.4}  IR: {:.1}%",
        m.precision,
        m.accuracy,
        m.recall,
        100.0 * m.inlier_ratio
    );
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
        logdesc::io::atomic_write(path, format!("{json}\n").as_bytes())?;
        if cli.verbose {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_train_toy(
    cli: &Cli,
    pairs: usize,
    epochs: usize,
    lr: f32,
    resume: &Option<PathBuf>,
    out: &PathBuf,
) -> Result<(), Failure> {
    if epochs == 0 {
        return Err(Failure::new(EXIT_IO, "--epochs must be at least 1"));
    }
    let model = toy_model_config();
    let cases = toy_fixture(pairs, cli.seed)?;
    let mut params = match resume {
        Some(p) => read_checkpoint(p)?,
        None => init_params(&model.descriptor, model.conditioning_layers, cli.seed)
            .map_err(PipelineError::from)?,
    };
    let verbose = cli.verbose;
    let outcome = train_toy(&mut params, &model, &cases, epochs, lr, |epoch, loss| {
        if verbose || epoch == 1 || epoch % 10 == 0 {
            eprintln!("epoch {epoch}: loss {loss:.6}");
        }
    })?;
    write_checkpoint(out, &params)?;
    println!(
        "trained {} epochs on {} pairs; final loss {:.6}; wrote {}",
        epochs,
        cases.len(),
        outcome.epoch_losses.last().unwrap(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, samples: usize) -> Result<(), Failure> {
    let report = run_gradcheck(cli.seed, samples)?;
    for layer in &report.layers {
        println!(
            "{}  worst relative error {:.3e}  ({} elements)  {}",
            layer.name,
            layer.worst_relative_error,
            layer.checked_elements,
            if layer.passed { "ok" } else { "FAIL" }
        );
    }
    if report.all_passed() {
        println!("gradient check passed: {} layers", report.layers.len());
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .layers
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name.as_str())
            .collect();
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!("gradient check failed for: {}", failing.join(", ")),
        ))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    cap_threads(cli.deterministic);
    match &cli.command {
        Command::Register {
            source,
            target,
            weights,
            estimator,
            out,
            model,
        } => cmd_register(cli, source, target, weights, *estimator, out, model),
        Command::Benchmark {
            protocol,
            pairs,
            points,
            weights,
            estimator,
            out,
            model,
        } => cmd_benchmark(cli, protocol, *pairs, *points, weights, *estimator, out, model),
        Command::TrainToy {
            pairs,
            epochs,
            lr,
            resume,
            out,
        } => cmd_train_toy(cli, *pairs, *epochs, *lr, resume, out),
        Command::Gradcheck { samples } => cmd_gradcheck(cli, *samples),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
