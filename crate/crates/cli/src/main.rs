//! `crowdmlp` command-line interface.
//!
//! Machine-readable results go to stdout as one JSON object per line; aligned
//! tables and progress notes go to stderr. Exit status is 0 on success, 1 when
//! a check runs but fails its tolerance, and 2 on usage, configuration or I/O
//! errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdmlp::checkpoint::load_checkpoint;
use crowdmlp::data::{export_synthetic, load_manifest, ResizePolicy, SynthConfig};
use crowdmlp::eval::{evaluate_records, export_embeddings};
use crowdmlp::gradcheck::{check_split_counting, GradcheckOptions};
use crowdmlp::split_counting::{uniform_samples, verify_decomposition};
use crowdmlp::tokenizer::StreamKind;
use crowdmlp::train::{ablation_configs, train, DataSource, TrainConfig};
use crowdmlp::{CrowdMlp, Error, Rng};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "crowdmlp", version, about = "Weakly supervised crowd counting with multi-granularity MLP tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with exact counts plus a manifest.
    Synth(SynthArgs),
    /// Train with the split-counting objective.
    Train(TrainArgs),
    /// Sliding-window evaluation of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck(GradcheckArgs),
    /// Brute-force check of the ensemble error decomposition.
    VerifyIdentity(IdentityArgs),
    /// Build and briefly train every single-stream removal.
    Ablate(AblateArgs),
    /// Write per-image counts and pooled embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 20)]
    min_objects: usize,
    #[arg(long, default_value_t = 80)]
    max_objects: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// desk, full or tiny.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Train on a manifest instead of generated scenes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on the count loss alone.
    #[arg(long)]
    no_proxy: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Drop a token stream: raw, feat4, feat8 or feat16. Repeatable.
    #[arg(long = "without")]
    without: Vec<String>,
    /// Initialize the frontend from another checkpoint.
    #[arg(long)]
    frontend_weights: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ResizeArgs {
    #[arg(long, default_value_t = 1024)]
    long_side: usize,
    #[arg(long, default_value_t = 768)]
    short_side: usize,
}

impl ResizeArgs {
    fn policy(&self) -> ResizePolicy {
        ResizePolicy {
            long_side: self.long_side,
            short_side: self.short_side,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    resize: ResizeArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    profile: String,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct IdentityArgs {
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 1000.0)]
    max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "tiny")]
    profile: String,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    resize: ResizeArgs,
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<crowdmlp::checkpoint::CheckpointError> for Failure {
    fn from(e: crowdmlp::checkpoint::CheckpointError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn profile(name: &str) -> Result<TrainConfig, Failure> {
    TrainConfig::profile(name)
        .ok_or_else(|| Failure::Usage(format!("unknown profile {name:?} (expected desk, full or tiny)")))
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        count_min: a.min_objects,
        count_max: a.max_objects,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = export_synthetic(&a.out, &cfg, a.count)?;
    emit(&serde_json::json!({ "manifest": manifest, "images": a.count }));
    eprintln!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = profile(&a.profile)?;
    if let Some(path) = a.manifest {
        cfg.data = DataSource::Manifest { path };
    } else if let Some(n) = a.scenes {
        if let DataSource::Synthetic { scenes, .. } = &mut cfg.data {
            *scenes = n;
        }
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        if let DataSource::Synthetic { config, .. } = &mut cfg.data {
            config.seed = seed;
        }
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = a.max_steps.or(cfg.max_steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.proxy &= !a.no_proxy;
    cfg.augment &= !a.no_augment;
    cfg.grad_clip = a.grad_clip.or(cfg.grad_clip);
    for tag in &a.without {
        let kind = StreamKind::from_tag(tag)
            .ok_or_else(|| Failure::Usage(format!("unknown stream {tag:?}")))?;
        cfg.model.streams = cfg.model.streams.without(kind);
    }
    cfg.model.frontend.weights_path = a.frontend_weights;
    cfg.log_path = a.log;
    cfg.checkpoint_path = a.checkpoint;

    let out = train(&cfg)?;
    for entry in &out.log {
        emit(entry);
    }
    let summary = serde_json::json!({
        "steps": out.steps,
        "parameters": out.model.num_parameters(),
        "best_val_mae": out.best_val.map(|b| b.0),
        "best_epoch": out.best_val.map(|b| b.1),
    });
    emit(&summary);
    if let Some(last) = out.log.last() {
        eprintln!(
            "{} steps, final epoch L_C {:.4} (first step {:.4})",
            out.steps, last.losses.l_c, out.first_step.l_c
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<CrowdMlp, Failure> {
    Ok(load_checkpoint(path)?.to_model()?)
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    let records = load_manifest(&a.manifest)?;
    let (_, report) = evaluate_records(&model, &records, &a.resize.policy())?;
    emit(&report);
    eprint!("{}", report.table());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = profile(&a.profile)?;
    let opts = GradcheckOptions {
        coords_per_tensor: a.coords,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let report = check_split_counting(&cfg.model, a.batch, &opts)?;
    let pass = report.max_rel_error < a.tolerance && report.nonzero > 0;
    emit(&serde_json::json!({
        "max_rel_error": report.max_rel_error,
        "worst_param": report.worst.0,
        "worst_index": report.worst.1,
        "tensors": report.tensors,
        "coords": report.coords,
        "offenders": report.offenders.len(),
        "refined": report.refined,
        "kinked": report.kinked,
        "nonzero": report.nonzero,
        "tolerance": a.tolerance,
        "pass": pass,
    }));
    eprintln!(
        "max relative error {:.3e} over {} coordinates in {} tensors ({} refined, {} on a switch)",
        report.max_rel_error, report.coords, report.tensors, report.refined, report.kinked
    );
    for o in &report.offenders {
        eprintln!(
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}",
            o.param, o.index, o.analytic, o.numeric
        );
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient error {:.3e} at {}[{}] (tolerance {:.0e}, {} nonzero coordinates)",
            report.max_rel_error, report.worst.0, report.worst.1, a.tolerance, report.nonzero
        )))
    }
}

fn verify_identity(a: IdentityArgs) -> CmdResult {
    if a.max <= 0.0 || !a.max.is_finite() {
        return Err(Failure::Usage("--max must be positive".into()));
    }
    let samples = uniform_samples(a.samples, a.max, &mut Rng::new(a.seed));
    let report = verify_decomposition(&samples)?;
    let pass = report.max_residual < a.tolerance && report.ensemble_not_worse == report.samples;
    emit(&serde_json::json!({
        "samples": report.samples,
        "max_residual": report.max_residual,
        "ensemble_not_worse": report.ensemble_not_worse,
        "pass": pass,
    }));
    eprintln!(
        "max residual {:.3e}; ensemble not worse on {}/{}",
        report.max_residual, report.ensemble_not_worse, report.samples
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Check("decomposition identity violated".into()))
    }
}

#[derive(Serialize)]
struct AblationRow {
    config: String,
    parameters: usize,
    tokens: usize,
    steps: usize,
    l_c: f64,
}

fn ablate(a: AblateArgs) -> CmdResult {
    let base = profile(&a.profile)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, model) in ablation_configs(&base.model) {
        let cfg = TrainConfig {
            model,
            seed: a.seed,
            epochs: 1,
            max_steps: Some(a.steps),
            val_fraction: 0.0,
            recalibrate_bn: false,
            log_path: None,
            checkpoint_path: None,
            ..base.clone()
        };
        let out = train(&cfg)?;
        let row = AblationRow {
            config: name,
            parameters: out.model.num_parameters(),
            tokens: cfg.model.total_tokens(),
            steps: out.steps,
            l_c: out.first_step.l_c,
        };
        emit(&row);
        rows.push(row);
    }
    eprintln!("{:<16}{:>12}{:>8}{:>12}", "config", "params", "tokens", "L_C");
    for r in &rows {
        eprintln!("{:<16}{:>12}{:>8}{:>12.4}", r.config, r.parameters, r.tokens, r.l_c);
    }
    let full = rows[0].parameters;
    match rows[1..].iter().find(|r| r.parameters >= full || r.steps == 0) {
        Some(r) => Err(Failure::Check(format!(
            "{} has {} parameters, full model {}",
            r.config, r.parameters, full
        ))),
        None => Ok(()),
    }
}

fn export(a: ExportArgs) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    let records = load_manifest(&a.manifest)?;
    export_embeddings(&model, &records, &a.resize.policy(), &a.out)?;
    emit(&serde_json::json!({ "out": a.out, "rows": records.len() }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::VerifyIdentity(a) => verify_identity(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportEmbeddings(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
