//! `coar`: synthesize data, train, evaluate and export attention maps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use coar_core::backbone::{BackboneConfig, CnnConfig, VitConfig};
use coar_core::config::{RunConfig, RUN_FILE};
use coar_core::datamodel::{generate_synthetic, AttributeSemanticsMode, Dataset, Split, SynthSpec};
use coar_core::eval::{evaluate, EvalMode, MetricsReport};
use coar_core::export::export_attention;
use coar_core::losses::PeakThreshold;
use coar_core::parallel::thread_count;
use coar_core::prototype::PrototypeVariant;
use coar_core::trainer::{train, Checkpoint};
use coar_core::{Error, Result};

#[derive(Parser)]
#[command(name = "coar", version, about = "Zero-shot learning with contrastive attribute prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic compositional-attribute dataset.
    Synth(SynthArgs),
    /// Train a model and write a run directory.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint (ZSL, GZSL or both).
    Eval(EvalArgs),
    /// Write per-attribute attention PNGs and raw peaks for selected images.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seen: usize,
    #[arg(long)]
    unseen: usize,
    #[arg(long = "K")]
    k: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.2)]
    seen_test_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    semantics_jitter: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneKind {
    Cnn,
    Vit,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    t_hard: Option<f64>,
    /// A fixed value such as `9`, or `quantile:0.9`.
    #[arg(long)]
    peak_threshold: Option<PeakThreshold>,
    #[arg(long)]
    lambda_attp: Option<f64>,
    #[arg(long)]
    lambda_attf: Option<f64>,
    #[arg(long)]
    lambda_sem: Option<f64>,
    #[arg(long)]
    no_hard_selection: bool,
    #[arg(long, value_enum)]
    backbone: Option<BackboneKind>,
    /// CNN stage widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    cnn_channels: Option<Vec<usize>>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    variant: Option<PrototypeVariant>,
    #[arg(long)]
    no_class_norm: bool,
    #[arg(long)]
    attribute_semantics: Option<AttributeSemanticsMode>,
    #[arg(long)]
    freeze_backbone: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Zsl,
    Gzsl,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the dataset recorded in the run directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Defaults to `<ckpt>/metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sample indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    index: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportAttention(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        image_size: a.image_size,
        noise_std: a.noise,
        channels: a.channels,
        seen_test_fraction: a.seen_test_fraction,
        semantics_jitter: a.semantics_jitter,
        ..SynthSpec::new(a.seen, a.unseen, a.k, a.per_class)
    };
    let ds = generate_synthetic(&spec)?;
    ds.save(&a.out)?;
    println!(
        "M={} K={} seen={} unseen={} train={} test={} samples={}",
        ds.num_classes(),
        ds.num_attributes(),
        ds.seen_classes.len(),
        ds.unseen_classes.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Test).len(),
        ds.samples.len()
    );
    Ok(())
}

fn apply_flags(rc: &mut RunConfig, a: &TrainArgs) {
    if let Some(d) = &a.dataset {
        rc.dataset = Some(d.clone());
        rc.synth = None;
    }
    if let Some(o) = &a.out {
        rc.output_dir = Some(o.clone());
    }
    let t = &mut rc.train;
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { t.$($field).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        n_way => n_way,
        k_shot => k_shot,
        lr => base_lr,
        momentum => momentum,
        weight_decay => weight_decay,
        lr_decay_every => lr_decay_every,
        lr_decay_factor => lr_decay_factor,
        seed => seed,
        alpha => loss.alpha,
        beta => loss.beta,
        tau => loss.tau,
        t_hard => loss.t_hard,
        peak_threshold => loss.peak_threshold,
        lambda_attp => loss.lambda_attp,
        lambda_attf => loss.lambda_attf,
        lambda_sem => loss.lambda_sem,
        hidden_size => model.hidden_size,
        variant => model.variant,
        attribute_semantics => semantics,
    );
    if a.episodes_per_epoch.is_some() {
        t.episodes_per_epoch = a.episodes_per_epoch;
    }
    if a.no_hard_selection {
        t.loss.hard_selection = false;
    }
    if a.no_class_norm {
        t.model.class_norm = false;
    }
    if a.freeze_backbone {
        t.freeze_backbone = true;
    }
    match a.backbone {
        Some(BackboneKind::Cnn) if !matches!(t.model.backbone, BackboneConfig::Cnn(_)) => {
            t.model.backbone = BackboneConfig::Cnn(CnnConfig::default());
        }
        Some(BackboneKind::Vit) if !matches!(t.model.backbone, BackboneConfig::Vit(_)) => {
            t.model.backbone = BackboneConfig::Vit(VitConfig::default());
        }
        _ => {}
    }
    match &mut t.model.backbone {
        BackboneConfig::Cnn(c) => {
            if let Some(ch) = &a.cnn_channels {
                c.channels = ch.clone();
            }
        }
        BackboneConfig::Vit(v) => {
            if let Some(q) = a.patch_size {
                v.patch_size = q;
            }
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut rc, &a);
    rc.validate()?;
    let ds = rc.load_dataset()?;
    let out = rc.output_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let run_path = out.join(RUN_FILE);
    fs::write(&run_path, serde_json::to_vec_pretty(&rc)?)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", run_path.display())))?;
    let outcome = train(rc.train.clone(), &ds, &out, a.resume.as_deref())?;
    let last = outcome.checkpoint.meta.history.last();
    println!(
        "trained {} epochs ({} steps); final mean loss {}; checkpoint {}",
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.meta.step,
        last.map_or("n/a".to_string(), |h| format!("{:.4}", h.mean_total)),
        outcome.checkpoint_dir.display()
    );
    Ok(())
}

/// Dataset named on the command line, else the one recorded next to the checkpoint.
fn dataset_for(ckpt: &Path, explicit: Option<&Path>) -> Result<Dataset> {
    if let Some(d) = explicit {
        return Dataset::load(d);
    }
    let run = ckpt
        .parent()
        .map(|p| p.join(RUN_FILE))
        .filter(|p| p.exists())
        .ok_or_else(|| Error::Config("no --dataset given and no run.json beside the checkpoint".into()))?;
    RunConfig::from_file(&run)?.load_dataset()
}

fn load_compatible(ckpt: &Path, dataset: &Dataset) -> Result<Checkpoint> {
    let ck = Checkpoint::load(ckpt)?;
    ck.check_dataset(dataset)?;
    Ok(ck)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    checkpoint: String,
    config_hash: &'a str,
    reports: Vec<MetricsReport>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = dataset_for(&a.ckpt, a.dataset.as_deref())?;
    let ck = load_compatible(&a.ckpt, &ds)?;
    let model = ck.model()?;
    let modes: &[EvalMode] = match a.mode {
        ModeArg::Zsl => &[EvalMode::Zsl],
        ModeArg::Gzsl => &[EvalMode::Gzsl],
        ModeArg::Both => &[EvalMode::Zsl, EvalMode::Gzsl],
    };
    let threads = thread_count();
    let reports = modes
        .iter()
        .map(|&m| evaluate(&model, &ck.params, &ds, m, threads))
        .collect::<Result<Vec<_>>>()?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("{:<6} {:>8} {:>8} {:>8} {:>8}", "mode", "T1", "Acc_U", "Acc_S", "Acc_H");
    for r in &reports {
        println!(
            "{:<6} {:>8} {:>8} {:>8} {:>8}",
            r.mode.to_string(),
            fmt(r.t1),
            fmt(r.acc_u),
            fmt(r.acc_s),
            fmt(r.acc_h)
        );
    }
    let out = a.out.unwrap_or_else(|| a.ckpt.join("metrics.json"));
    let file = MetricsFile {
        checkpoint: a.ckpt.display().to_string(),
        config_hash: &ck.meta.config_hash,
        reports,
    };
    fs::write(&out, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::Config(format!("cannot write {}: {e}", out.display())))
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ds = dataset_for(&a.ckpt, a.dataset.as_deref())?;
    let ck = load_compatible(&a.ckpt, &ds)?;
    let model = ck.model()?;
    for &i in &a.index {
        let r = export_attention(&model, &ck.params, &ds, i, &a.out)?;
        println!("image {i} (class {}): {} maps written", r.label, r.images.len());
    }
    Ok(())
}
