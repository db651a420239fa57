//! Experiment driver for the `wsnorm` library.
//!
//! Every subcommand resolves its settings the same way: defaults, overridden
//! by a config file (`--config`), overridden by flags. The effective config
//! is archived as `config.ini` in the run directory together with a code
//! version string, so a run directory alone reconstructs the run. Exit
//! codes map error categories: 0 ok, 1 verification failed, 2 usage,
//! 3 I/O, 4 checkpoint, 5 numerical abort, 6 contract violation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use wsnorm::checkpoint::{load_trainer, save_trainer};
use wsnorm::config::Config;
use wsnorm::data::{self, Dataset};
use wsnorm::error::{Error, Result};
use wsnorm::metrics::{self, MetricsWriter};
use wsnorm::model::{build_model, Arch, ModelSpec};
use wsnorm::norm::NormKind;
use wsnorm::reparam::ReparamKind;
use wsnorm::train::{
    run_singularity_grid, run_statdiff_experiment, sample_epoch_statdiff, DiagCollector,
    TrainConfig, Trainer,
};
use wsnorm::verify;
use wsnorm::Precision;

const OUT_ROOT_ENV: &str = "WSNORM_OUT_ROOT";
const CIFAR_DIR_ENV: &str = "WSNORM_CIFAR10_DIR";

#[derive(Parser)]
#[command(name = "wsnorm", version, about = "Weight standardization and batch-channel normalization experiments", long_about = None)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics, checkpoints, and a final report.
    Train(TrainArgs),
    /// Check every op's tape gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Verify the two gradient-decomposition identities on every step of a
    /// short ConvNet4+GN+WS run.
    Lipschitz(LipschitzArgs),
    /// Verify projected-Hessian zero sums and the Frobenius-norm bound.
    Hessian(HessianArgs),
    /// Sweep fixed-statistics perturbations over a (σ_μ, σ_σ) grid.
    SingularityGrid(GridArgs),
    /// Track activation-statistics spread for GN/LN with and without WS.
    Statdiff(StatdiffArgs),
    /// Convert a metrics file between CSV and JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to $WSNORM_OUT_ROOT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name under the output root (default: derived from the
    /// subcommand and seed; suffixed if taken).
    #[arg(long)]
    run_id: Option<String>,
    /// Base seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Architecture: convnet4 | resnet8 | resnet14 | resnet20.
    #[arg(long)]
    arch: Option<String>,
    /// Normalizer: none | bn | gn | ln | in | fixed-stats | bcn | bcn-micro.
    #[arg(long)]
    norm: Option<String>,
    /// Channel-group count for the grouped normalizers (default: automatic).
    #[arg(long)]
    groups: Option<usize>,
    /// Standardize conv weights (shorthand for --reparam ws).
    #[arg(long)]
    ws: bool,
    /// Weight reparameterization: none | mean-only | ws | wn | cwn.
    #[arg(long)]
    reparam: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Samples per micro-batch (one forward/backward).
    #[arg(long)]
    batch: Option<usize>,
    /// Micro-batches averaged into one optimizer step.
    #[arg(long)]
    iteration_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs at which the learning rate decays, e.g. "30,60".
    #[arg(long)]
    decay_epochs: Option<String>,
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Element precision: f32 (default) | f64.
    #[arg(long)]
    precision: Option<String>,
    /// Dataset: blobs (default) | cifar10.
    #[arg(long)]
    data: Option<String>,
    /// CIFAR-10 binary batch directory; defaults to $WSNORM_CIFAR10_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    /// Synthetic dataset class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Disable flip/shift augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Record per-step gradient identities and per-epoch StatDiff.
    #[arg(long)]
    diagnostics: bool,
    /// Checkpoint every N epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an identical config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    seeds_per_op: usize,
    /// Only run ops whose name contains this substring.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Args)]
struct LipschitzArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Maximum allowed relative residual for either identity.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args)]
struct HessianArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random small networks beside the analytic toy case.
    #[arg(long, default_value_t = 5)]
    random_cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated σ_μ values; must include 0.
    #[arg(long)]
    sigma_mu: Option<String>,
    /// Comma-separated σ_σ values; must include 0.
    #[arg(long)]
    sigma_sigma: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct StatdiffArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Architecture (default resnet8).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    /// Source metrics file (.csv or .json).
    #[arg(long)]
    input: PathBuf,
    /// Destination metrics file (.csv or .json).
    #[arg(long)]
    output: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            std::process::exit(match e.category() {
                "usage" => 2,
                "io" => 3,
                "checkpoint" => 4,
                "numerical" => 5,
                _ => 6,
            });
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Lipschitz(a) => cmd_lipschitz(a),
        Cmd::Hessian(a) => cmd_hessian(a),
        Cmd::SingularityGrid(a) => cmd_grid(a),
        Cmd::Statdiff(a) => cmd_statdiff(a),
        Cmd::Export(a) => cmd_export(a),
    }
}

// ---------------------------------------------------------------------------
// Settings resolution and run directories

/// Loads the config file (if any) and applies flag overrides through
/// [`Config::set`], so the archived config is the effective one.
fn base_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::new(),
    };
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    // The seed is load-bearing for reproduction; pin it even when defaulted.
    if cfg.get("run.seed").is_none() {
        cfg.set("run.seed", "0")?;
    }
    Ok(cfg)
}

fn set_if<T: ToString>(cfg: &mut Config, key: &str, v: &Option<T>) -> Result<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn set_flag(cfg: &mut Config, key: &str, on: bool, value: &str) -> Result<()> {
    if on {
        cfg.set(key, value)?;
    }
    Ok(())
}

/// Creates `<out_root>/<run_id>`, suffixing the name rather than touching an
/// existing directory, and archives the effective config and code version.
fn make_run_dir(common: &CommonArgs, default_id: &str, cfg: &Config) -> Result<PathBuf> {
    let root = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let id = common.run_id.clone().unwrap_or_else(|| default_id.to_string());
    let mut dir = root.join(&id);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{id}-{n}"));
    }
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.ini"))?;
    std::fs::write(
        dir.join("version.txt"),
        format!("wsnorm {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("report.json"), text + "\n")?;
    Ok(())
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{what}: {p:?} is not a number")))
        })
        .collect()
}

/// Reads the `[train]` section into a `TrainConfig`.
fn train_config(cfg: &Config, seed: u64, precision: Precision) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr: cfg.get_f64("train.lr")?.unwrap_or(d.lr),
        decay_epochs: cfg
            .get_usize_list("train.decay_epochs")?
            .unwrap_or_default(),
        decay_factor: cfg.get_f64("train.decay_factor")?.unwrap_or(d.decay_factor),
        momentum: cfg.get_f64("train.momentum")?.unwrap_or(d.momentum),
        weight_decay: cfg
            .get_f64("train.weight_decay")?
            .unwrap_or(d.weight_decay),
        batch_size: cfg.get_usize("train.batch_size")?.unwrap_or(d.batch_size),
        iteration_size: cfg
            .get_usize("train.iteration_size")?
            .unwrap_or(d.iteration_size),
        epochs: cfg.get_usize("train.epochs")?.unwrap_or(d.epochs),
        seed,
        precision,
        augment: cfg.get_bool("train.augment")?.unwrap_or(true),
        freeze_norm_affine: cfg.get_bool("train.freeze_affine")?.unwrap_or(false),
    })
}

/// Reads the `[model]` section into a `ModelSpec`.
fn model_spec(cfg: &Config, classes: usize) -> Result<ModelSpec> {
    let arch = Arch::parse(cfg.get("model.arch").unwrap_or("convnet4"))?;
    let mut norm = NormKind::parse(cfg.get("model.norm").unwrap_or("bn"))?;
    if let Some(g) = cfg.get_usize("model.groups")? {
        norm = match norm {
            NormKind::Cn { .. } => NormKind::Cn { groups: Some(g) },
            NormKind::BcnLarge { .. } => NormKind::BcnLarge { groups: Some(g) },
            NormKind::BcnMicro { .. } => NormKind::BcnMicro { groups: Some(g) },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "model.groups does not apply to norm {:?}",
                    other.name()
                )))
            }
        };
    }
    let reparam = match cfg.get("model.reparam").unwrap_or("none") {
        "none" => ReparamKind::None,
        "mean-only" => ReparamKind::MeanOnly,
        "ws" => ReparamKind::Ws,
        "wn" => ReparamKind::Wn,
        "cwn" => ReparamKind::Cwn,
        other => {
            return Err(Error::Parse(format!(
                "unknown reparameterization {other:?}"
            )))
        }
    };
    let mut spec = ModelSpec::new(arch, norm, reparam);
    spec.classes = classes;
    Ok(spec)
}

/// Loads the train/val split named by `[data]`, standardized by train-split
/// channel moments.
fn load_data(cfg: &Config, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_train = cfg.get_usize("data.n_train")?.unwrap_or(512);
    let n_val = cfg.get_usize("data.n_val")?.unwrap_or(256);
    let (mut train, mut val) = match cfg.get("data.kind").unwrap_or("blobs") {
        "blobs" => {
            let classes = cfg.get_usize("data.classes")?.unwrap_or(10);
            let train = data::synth_blobs_range(seed, 0, n_train, classes)?;
            let val = data::synth_blobs_range(seed, n_train, n_val, classes)?;
            (train, val)
        }
        "cifar10" => {
            let dir = cfg
                .get("data.dir")
                .map(PathBuf::from)
                .or_else(|| std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "data.kind = cifar10 needs data.dir, --data-dir, or ${CIFAR_DIR_ENV}"
                    ))
                })?;
            data::load_cifar10_subset(&dir, n_train, n_val)?
        }
        other => {
            return Err(Error::Parse(format!("unknown data.kind {other:?}")))
        }
    };
    let moments = train.channel_moments()?;
    train.standardize(&moments);
    val.standardize(&moments);
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    set_if(&mut cfg, "model.arch", &a.arch)?;
    set_if(&mut cfg, "model.norm", &a.norm)?;
    set_if(&mut cfg, "model.groups", &a.groups)?;
    set_if(&mut cfg, "model.reparam", &a.reparam)?;
    set_flag(&mut cfg, "model.reparam", a.ws, "ws")?;
    set_if(&mut cfg, "train.lr", &a.lr)?;
    set_if(&mut cfg, "train.momentum", &a.momentum)?;
    set_if(&mut cfg, "train.weight_decay", &a.weight_decay)?;
    set_if(&mut cfg, "train.batch_size", &a.batch)?;
    set_if(&mut cfg, "train.iteration_size", &a.iteration_size)?;
    set_if(&mut cfg, "train.epochs", &a.epochs)?;
    set_if(&mut cfg, "train.decay_epochs", &a.decay_epochs)?;
    set_if(&mut cfg, "train.decay_factor", &a.decay_factor)?;
    set_if(&mut cfg, "run.precision", &a.precision)?;
    set_if(&mut cfg, "data.kind", &a.data)?;
    set_if(
        &mut cfg,
        "data.dir",
        &a.data_dir.as_ref().map(|p| p.display().to_string()),
    )?;
    set_if(&mut cfg, "data.n_train", &a.n_train)?;
    set_if(&mut cfg, "data.n_val", &a.n_val)?;
    set_if(&mut cfg, "data.classes", &a.classes)?;
    set_flag(&mut cfg, "train.augment", a.no_augment, "false")?;
    set_flag(&mut cfg, "train.diagnostics", a.diagnostics, "true")?;
    set_if(&mut cfg, "train.checkpoint_every", &a.checkpoint_every)?;

    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let precision = Precision::parse(cfg.get("run.precision").unwrap_or("f32"))?;
    let classes = cfg.get_usize("data.classes")?.unwrap_or(10);
    let spec = model_spec(&cfg, classes)?;
    let tc = train_config(&cfg, seed, precision)?;
    let diagnostics = cfg.get_bool("train.diagnostics")?.unwrap_or(false);
    let checkpoint_every = cfg.get_usize("train.checkpoint_every")?.unwrap_or(0);

    let default_id = format!(
        "train-{}-{}{}-seed{}",
        spec.arch.name(),
        spec.norm.name(),
        if spec.reparam == ReparamKind::Ws {
            "+ws"
        } else {
            ""
        },
        seed
    );
    let dir = make_run_dir(&a.common, &default_id, &cfg)?;
    let (train_ds, val_ds) = load_data(&cfg, seed)?;

    let started = Instant::now();
    let mut trainer = match &a.resume {
        Some(path) => load_trainer(build_model(&spec, seed)?, tc.clone(), path)?,
        None => Trainer::new(build_model(&spec, seed)?, tc.clone())?,
    };
    let mut writer = MetricsWriter::create(&dir, &default_id)?;
    let mut collector = if diagnostics {
        let mut c = DiagCollector::new();
        if trainer.epoch == 0 {
            sample_epoch_statdiff(&mut c, &mut trainer.model, &train_ds, precision, 0)?;
        }
        Some(c)
    } else {
        None
    };

    let mut recorded_rows = 0;
    let mut last = None;
    while trainer.epoch < tc.epochs {
        let mut stats = trainer.run_epoch(&train_ds, collector.as_mut())?;
        stats.val_err = Some(trainer.evaluate(&val_ds)?);
        let e = stats.epoch as u64;
        let step = trainer.step as u64;
        writer.push(e, step, "lr", "", stats.lr)?;
        writer.push(e, step, "train_loss", "", stats.train_loss)?;
        writer.push(e, step, "train_err", "", stats.train_err)?;
        writer.push(e, step, "val_err", "", stats.val_err.unwrap())?;
        if let Some(c) = collector.as_mut() {
            c.sample_statdiff(trainer.epoch)?;
            if let Some(s) = c.statdiff_series.last() {
                writer.push(e, step, "statdiff_mean", "", s.mean)?;
                for (i, v) in s.per_layer.iter().enumerate() {
                    writer.push(e, step, "statdiff", &format!("layer{i}"), *v)?;
                }
            }
            // Per-step identity rows accumulated during the epoch.
            for r in &c.records[recorded_rows..] {
                let scope = format!("layer{}", r.layer);
                writer.push(e, r.step as u64, "r1_rel", &scope, r.r1_rel)?;
                writer.push(e, r.step as u64, "r2_rel", &scope, r.r2_rel)?;
                writer.push(e, r.step as u64, "term_ws", &scope, r.term_ws)?;
                writer.push(e, r.step as u64, "term_mean", &scope, r.term_mean)?;
                writer.push(e, r.step as u64, "term_total", &scope, r.term_total)?;
            }
            recorded_rows = c.records.len();
        }
        writer.flush()?;
        if checkpoint_every > 0 && trainer.epoch % checkpoint_every == 0 {
            save_trainer(&trainer, &dir.join(format!("epoch{:04}.ckpt", trainer.epoch)))?;
        }
        println!(
            "epoch {:3}  lr {:.4}  loss {:.4}  train_err {:.4}  val_err {:.4}",
            stats.epoch,
            stats.lr,
            stats.train_loss,
            stats.train_err,
            stats.val_err.unwrap()
        );
        last = Some(stats);
    }

    save_trainer(&trainer, &dir.join("final.ckpt"))?;
    let rows = writer.finalize()?;
    let last = last.ok_or_else(|| Error::InvalidArgument("no epochs to run".into()))?;
    write_report(
        &dir,
        &serde_json::json!({
            "run": default_id,
            "epochs": trainer.epoch,
            "steps": trainer.step,
            "final_train_loss": last.train_loss,
            "final_train_err": last.train_err,
            "final_val_err": last.val_err,
            "metrics_rows": rows.len(),
            "wall_s": started.elapsed().as_secs_f64(),
        }),
    )?;
    println!("run directory: {}", dir.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = base_config(&a.common)?;
    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let dir = make_run_dir(&a.common, &format!("gradcheck-seed{seed}"), &cfg)?;

    let report = verify::run_gradcheck_filtered(seed, a.seeds_per_op, a.only.as_deref())?;
    if report.entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no op matches filter {:?}",
            a.only.unwrap_or_default()
        )));
    }

    let mut writer = MetricsWriter::create(&dir, "gradcheck")?;
    for e in &report.entries {
        println!(
            "{:32} max_rel_err {:10.3e}  {}",
            e.op,
            e.max_rel_err,
            if e.max_rel_err < report.tolerance {
                "ok"
            } else {
                "FAIL"
            }
        );
        writer.push(0, 0, "max_rel_err", &e.op, e.max_rel_err)?;
    }
    writer.finalize()?;
    let pass = report.pass();
    let worst = report.worst().expect("at least one op");
    write_report(
        &dir,
        &serde_json::json!({
            "ops": report.entries.len(),
            "seeds_per_op": a.seeds_per_op,
            "tolerance": report.tolerance,
            "worst_op": worst.op,
            "worst_rel_err": worst.max_rel_err,
            "pass": pass,
        }),
    )?;
    println!(
        "{} ops, worst {} at {:.3e} ({})",
        report.entries.len(),
        worst.op,
        worst.max_rel_err,
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// lipschitz

fn cmd_lipschitz(a: LipschitzArgs) -> Result<i32> {
    let cfg = base_config(&a.common)?;
    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let dir = make_run_dir(&a.common, &format!("lipschitz-seed{seed}"), &cfg)?;

    let report = verify::run_lipschitz(seed, a.epochs, a.n_train, a.batch)?;
    let mut writer = MetricsWriter::create(&dir, "lipschitz")?;
    for r in &report.records {
        let scope = format!("layer{}", r.layer);
        writer.push(0, r.step as u64, "r1_rel", &scope, r.r1_rel)?;
        writer.push(0, r.step as u64, "r2_rel", &scope, r.r2_rel)?;
        writer.push(0, r.step as u64, "term_ws", &scope, r.term_ws)?;
        writer.push(0, r.step as u64, "term_mean", &scope, r.term_mean)?;
        writer.push(0, r.step as u64, "term_total", &scope, r.term_total)?;
    }
    writer.finalize()?;
    let pass = report.max_r1_rel < a.tol && report.max_r2_rel < a.tol;
    write_report(
        &dir,
        &serde_json::json!({
            "steps": report.steps,
            "rows": report.rows,
            "max_r1_rel": report.max_r1_rel,
            "max_r2_rel": report.max_r2_rel,
            "mean_fraction_ws": report.mean_fraction_ws,
            "tolerance": a.tol,
            "pass": pass,
        }),
    )?;
    println!(
        "{} steps  max r1 {:.3e}  max r2 {:.3e}  mean ⟨ŵ,∇⟩ fraction {:.4}  ({})",
        report.steps,
        report.max_r1_rel,
        report.max_r2_rel,
        report.mean_fraction_ws,
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// hessian

fn cmd_hessian(a: HessianArgs) -> Result<i32> {
    let cfg = base_config(&a.common)?;
    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let dir = make_run_dir(&a.common, &format!("hessian-seed{seed}"), &cfg)?;

    let cases = verify::run_hessian_suite(seed, a.random_cases)?;
    let mut writer = MetricsWriter::create(&dir, "hessian")?;
    let mut all_ok = true;
    let mut rows = Vec::new();
    for c in &cases {
        let zero_ok = c.report.zero_sum_ok(a.tol);
        let ineq_ok = c.report.inequality_ok(a.tol);
        let exact_ok = match c.exact_frob {
            Some(f) => (c.report.frob_h_sq - f).abs() < a.tol,
            None => true,
        };
        all_ok &= zero_ok && ineq_ok && exact_ok;
        println!(
            "{:16} sums {:9.2e}  ‖H‖²_F {:9.4}  bound {:9.4}  {}",
            c.name,
            c.report.sum_h.abs(),
            c.report.frob_h_sq,
            c.report.bound,
            if zero_ok && ineq_ok && exact_ok {
                "ok"
            } else {
                "FAIL"
            }
        );
        writer.push(0, 0, "sum_h", &c.name, c.report.sum_h)?;
        writer.push(0, 0, "frob_h_sq", &c.name, c.report.frob_h_sq)?;
        writer.push(0, 0, "frob_bound", &c.name, c.report.bound)?;
        rows.push(serde_json::json!({
            "case": c.name,
            "zero_sum_ok": zero_ok,
            "inequality_ok": ineq_ok,
            "exact_frob_ok": exact_ok,
        }));
    }
    writer.finalize()?;
    write_report(
        &dir,
        &serde_json::json!({"tolerance": a.tol, "cases": rows, "pass": all_ok}),
    )?;
    Ok(if all_ok { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// singularity-grid

fn cmd_grid(a: GridArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    set_if(&mut cfg, "grid.sigma_mu", &a.sigma_mu)?;
    set_if(&mut cfg, "grid.sigma_sigma", &a.sigma_sigma)?;
    set_if(&mut cfg, "train.epochs", &a.epochs)?;
    set_if(&mut cfg, "data.n_train", &a.n_train)?;
    set_if(&mut cfg, "data.n_val", &a.n_val)?;
    set_if(&mut cfg, "train.batch_size", &a.batch)?;
    set_if(&mut cfg, "train.lr", &a.lr)?;

    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let sigma_mu = parse_f64_list(cfg.get("grid.sigma_mu").unwrap_or("0,0.5,1"), "grid.sigma_mu")?;
    let sigma_sigma = parse_f64_list(
        cfg.get("grid.sigma_sigma").unwrap_or("0,0.5,1"),
        "grid.sigma_sigma",
    )?;
    let dir = make_run_dir(&a.common, &format!("grid-seed{seed}"), &cfg)?;
    let (train_ds, val_ds) = load_data(&cfg, seed)?;
    let mut tc = train_config(&cfg, seed, Precision::F32)?;
    if a.epochs.is_none() && cfg.get_usize("train.epochs")?.is_none() {
        tc.epochs = 4;
    }

    let grid = run_singularity_grid(&train_ds, &val_ds, &sigma_mu, &sigma_sigma, &tc)?;

    // Per-cell CSV: one row per (σ_μ, σ_σ).
    let mut csv = String::from("sigma_mu,sigma_sigma,accuracy,failed\n");
    let mut writer = MetricsWriter::create(&dir, "grid")?;
    for cell in &grid.cells {
        let acc = cell.accuracy.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cell.sigma_mu, cell.sigma_sigma, acc, cell.failed
        ));
        if let Some(acc) = cell.accuracy {
            let scope = format!("mu{}-sigma{}", cell.sigma_mu, cell.sigma_sigma);
            writer.push(0, 0, "accuracy", &scope, acc)?;
        }
    }
    std::fs::write(dir.join("grid.csv"), csv)?;
    writer.finalize()?;

    let zero = grid.cell(
        sigma_mu.iter().position(|&v| v == 0.0).unwrap(),
        sigma_sigma.iter().position(|&v| v == 0.0).unwrap(),
    );
    let largest = grid.cell(sigma_mu.len() - 1, sigma_sigma.len() - 1);
    write_report(
        &dir,
        &serde_json::json!({
            "sigma_mu": sigma_mu,
            "sigma_sigma": sigma_sigma,
            "zero_cell_accuracy": zero.accuracy,
            "largest_cell_accuracy": largest.accuracy,
            "failed_cells": grid.cells.iter().filter(|c| c.failed).count(),
            "threshold": grid.threshold,
        }),
    )?;
    for cell in &grid.cells {
        println!(
            "σ_μ {:4}  σ_σ {:4}  accuracy {}",
            cell.sigma_mu,
            cell.sigma_sigma,
            cell.accuracy
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "failed".into())
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// statdiff

fn cmd_statdiff(a: StatdiffArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    set_if(&mut cfg, "model.arch", &a.arch)?;
    set_if(&mut cfg, "train.epochs", &a.epochs)?;
    set_if(&mut cfg, "data.n_train", &a.n_train)?;
    set_if(&mut cfg, "data.n_val", &a.n_val)?;
    set_if(&mut cfg, "train.batch_size", &a.batch)?;
    set_if(&mut cfg, "train.lr", &a.lr)?;

    let seed = cfg.get_u64("run.seed")?.unwrap_or(0);
    let arch = Arch::parse(cfg.get("model.arch").unwrap_or("resnet8"))?;
    let dir = make_run_dir(&a.common, &format!("statdiff-seed{seed}"), &cfg)?;
    let (train_ds, val_ds) = load_data(&cfg, seed)?;
    let tc = train_config(&cfg, seed, Precision::F32)?;

    let runs = run_statdiff_experiment(arch, &train_ds, Some(&val_ds), &tc)?;
    let mut writer = MetricsWriter::create(&dir, "statdiff")?;
    let mut summary = Vec::new();
    for run in &runs {
        let label = if run.ws {
            format!("{}+ws", run.norm)
        } else {
            run.norm.clone()
        };
        for s in &run.series {
            writer.push(s.epoch as u64, 0, "statdiff_mean", &label, s.mean)?;
        }
        let final_mean = run.series.last().map(|s| s.mean);
        println!(
            "{label:8} final statdiff {}  val_err {}",
            final_mean.map(|v| format!("{v:.5}")).unwrap_or_default(),
            run.final_val_err
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default()
        );
        summary.push(serde_json::json!({
            "config": label,
            "final_statdiff_mean": final_mean,
            "final_val_err": run.final_val_err,
        }));
    }
    writer.finalize()?;

    let final_of = |norm: &str, ws: bool| {
        runs.iter()
            .find(|r| r.norm == norm && r.ws == ws)
            .and_then(|r| r.series.last())
            .map(|s| s.mean)
    };
    let gn_ordering = match (final_of("gn", true), final_of("gn", false)) {
        (Some(w), Some(p)) => Some(w < p),
        _ => None,
    };
    let ln_ordering = match (final_of("ln", true), final_of("ln", false)) {
        (Some(w), Some(p)) => Some(w < p),
        _ => None,
    };
    write_report(
        &dir,
        &serde_json::json!({
            "arch": arch.name(),
            "runs": summary,
            "gn_ws_below_gn": gn_ordering,
            "ln_ws_below_ln": ln_ordering,
        }),
    )?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// export

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let rows = match extension(&a.input)? {
        "csv" => metrics::read_csv(&a.input)?,
        "json" => metrics::read_json(&a.input)?,
        _ => unreachable!(),
    };
    match extension(&a.output)? {
        "csv" => metrics::write_csv(&a.output, &rows)?,
        "json" => metrics::write_json(&a.output, &rows)?,
        _ => unreachable!(),
    }
    println!("{} rows -> {}", rows.len(), a.output.display());
    Ok(0)
}

fn extension(path: &Path) -> Result<&'static str> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok("csv"),
        Some("json") => Ok("json"),
        _ => Err(Error::InvalidArgument(format!(
            "{}: expected a .csv or .json path",
            path.display()
        ))),
    }
}
