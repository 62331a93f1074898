//! Seeded episodic SGD training with per-epoch checkpoints and resumable state.
//!
//! A run directory holds `config.json`, `log.jsonl` (one line per step) and one
//! `ckpt_epoch_<n>/` per completed epoch. Resuming from a checkpoint replays the
//! exact trajectory of an uninterrupted run when training single-threaded.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::InputSpec;
use crate::datamodel::{attribute_semantics, readout_targets, AttributeSemanticsMode, Dataset, EpisodeBatch, EpisodeSampler};
use crate::error::{Error, Result};
use crate::losses::{all_peaks, quantile, LossConfig, LossParts, PeakThreshold};
use crate::model::{Model, ModelConfig, StepLoss, TrainBatch};
use crate::parallel::thread_count;
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const META_FILE: &str = "meta.json";
const ATTRIBUTE_SEMANTICS_FILE: &str = "attribute_semantics.coar";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `ceil(train samples / (n_way * k_shot))`.
    pub episodes_per_epoch: Option<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub semantics: AttributeSemanticsMode,
    /// Keeps every backbone parameter fixed.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            episodes_per_epoch: None,
            n_way: 16,
            k_shot: 2,
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            semantics: AttributeSemanticsMode::OneHot,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n_way == 0 || self.k_shot == 0 {
            return fail("n_way and k_shot must be positive");
        }
        if self.episodes_per_epoch == Some(0) {
            return fail("episodes_per_epoch must be positive");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail("lr_decay_factor must be positive");
        }
        self.loss.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    /// `base_lr · factor^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Sub-seed for a named purpose: the first 8 bytes (LE) of `SHA-256(root LE ‖ label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossParts,
    pub mean_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub episodes_per_epoch: usize,
    pub rng: RngState,
    pub peak_threshold: f64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub input: InputSpec,
    pub seen_classes: Vec<usize>,
    pub sub_seeds: std::collections::BTreeMap<String, u64>,
    pub history: Vec<EpochSummary>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub attribute_semantics: Array2<f64>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save_dir(&dir.join("params"))?;
        self.momentum.save_dir(&dir.join("momentum"))?;
        write_tensor(
            dir.join(ATTRIBUTE_SEMANTICS_FILE),
            &Tensor::F64(self.attribute_semantics.clone().into_dyn()),
        )?;
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join(META_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&text)?;
        if meta.format_version != 1 {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", meta.format_version)));
        }
        let params = ParamStore::load_dir(&dir.join("params"))?;
        let momentum = ParamStore::load_dir(&dir.join("momentum"))?;
        let attribute_semantics = read_tensor(dir.join(ATTRIBUTE_SEMANTICS_FILE))?
            .into_f64()?
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("attribute semantics: {e}")))?;
        let ckpt = Checkpoint {
            meta,
            params,
            momentum,
            attribute_semantics,
        };
        let model = ckpt.model()?;
        let reference = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        reference.check_layout(&ckpt.params)?;
        reference.check_layout(&ckpt.momentum)?;
        Ok(ckpt)
    }

    /// Errors unless `dataset` has this checkpoint's input shape and seen classes.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let i = self.meta.input;
        let shape = dataset.image_shape();
        if shape != Some((i.height, i.width, i.channels))
            || dataset.num_attributes() != i.num_attributes
            || dataset.seen_classes != self.meta.seen_classes
        {
            return Err(Error::Checkpoint("checkpoint does not match the dataset".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.meta.config.model.clone(), self.meta.input, self.attribute_semantics.clone())
    }
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_epoch_{epoch}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_attp")]
    pub l_attp: f64,
    #[serde(rename = "L_attf")]
    pub l_attf: f64,
    #[serde(rename = "L_sem")]
    pub l_sem: f64,
    pub total: f64,
    pub lr: f64,
    pub eligible: usize,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mutable optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub step: u64,
}

/// One SGD-with-momentum update: `v ← μv + g + wd·θ` (decayed kinds only), `θ ← θ − lr·v`.
/// Names in `frozen` (prefix match) are left untouched.
pub fn sgd_update(state: &mut TrainState, grads: &ParamStore, lr: f64, momentum: f64, weight_decay: f64, frozen: Option<&str>) {
    let TrainState { params, momentum: buf, .. } = state;
    for (name, p) in params.iter_mut() {
        if frozen.is_some_and(|f| name.starts_with(f)) {
            continue;
        }
        let g = &grads[name];
        let v = buf.get_mut(name);
        let wd = if p.kind.decays() { weight_decay } else { 0.0 };
        for ((theta, vi), gi) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *vi = momentum * *vi + (gi + wd * *theta);
            *theta -= lr * *vi;
        }
    }
}

/// Everything derived from the dataset that a training step needs.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub model: Model,
    pub config: TrainConfig,
    pub sampler: EpisodeSampler,
    /// Seen-class semantics rows, in `dataset.seen_classes` order.
    pub seen_semantics: Array2<f64>,
    /// Readout targets of every class (`M × K`).
    pub targets: Array2<f64>,
    pub threads: usize,
}

impl<'a> TrainContext<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<TrainContext<'a>> {
        config.validate()?;
        dataset.validate()?;
        let (h, w, c) = dataset
            .image_shape()
            .ok_or_else(|| Error::Dataset("dataset has no samples".into()))?;
        let k = dataset.num_attributes();
        let input = InputSpec {
            height: h,
            width: w,
            channels: c,
            num_attributes: k,
        };
        let mut sem_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "semantics"));
        let attr = attribute_semantics(k, config.semantics, &mut sem_rng);
        let model = Model::new(config.model.clone(), input, attr)?;
        let sampler = EpisodeSampler::new(dataset);
        sampler.check(config.n_way, config.k_shot)?;
        let cs = &dataset.semantics.class_semantics;
        Ok(TrainContext {
            seen_semantics: dataset.semantics.class_rows(&dataset.seen_classes),
            targets: readout_targets(cs, &dataset.seen_classes),
            dataset,
            model,
            config,
            sampler,
            threads: thread_count(),
        })
    }

    pub fn episodes_per_epoch(&self) -> usize {
        let batch = self.config.n_way * self.config.k_shot;
        self.config
            .episodes_per_epoch
            .unwrap_or_else(|| self.sampler.num_train_samples().div_ceil(batch).max(1))
    }

    pub fn initial_state(&self) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "init"));
        let params = self.model.init_params(&mut rng);
        TrainState {
            momentum: params.zeros_like(),
            params,
            step: 0,
        }
    }

    pub fn batch(&self, episode: &EpisodeBatch) -> Result<TrainBatch<'_>> {
        let k = self.dataset.num_attributes();
        let mut targets = Array2::zeros((episode.len(), k));
        let mut labels = Vec::with_capacity(episode.len());
        let mut images: Vec<ArrayView3<f32>> = Vec::with_capacity(episode.len());
        for (row, (&idx, &class)) in episode.indices.iter().zip(&episode.labels).enumerate() {
            let pos = self
                .dataset
                .seen_classes
                .iter()
                .position(|&c| c == class)
                .ok_or_else(|| Error::Sampling(format!("episode class {class} is not a seen class")))?;
            labels.push(pos);
            targets.row_mut(row).assign(&self.targets.row(class));
            images.push(self.dataset.samples[idx].image.view());
        }
        Ok(TrainBatch {
            images,
            labels,
            class_semantics: self.seen_semantics.view(),
            readout_targets: targets,
        })
    }

    /// Resolves the peak threshold; a quantile is taken over the raw peaks of one
    /// warm-up episode under `params`, drawn from its own random stream.
    pub fn resolve_peak_threshold(&self, params: &ParamStore) -> Result<f64> {
        match self.config.loss.peak_threshold {
            PeakThreshold::Fixed(t) => Ok(t),
            PeakThreshold::WarmupQuantile(q) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "warmup"));
                let ep = self.sampler.sample(self.config.n_way, self.config.k_shot, &mut rng)?;
                let batch = self.batch(&ep)?;
                let bundles: Vec<_> = self
                    .model
                    .forward_batch(params, &batch.images, self.threads)?
                    .into_iter()
                    .map(|(b, _)| b)
                    .collect();
                Ok(quantile(&all_peaks(&bundles), q))
            }
        }
    }

    /// Loss, gradient and update for one episode.
    pub fn train_step(&self, state: &mut TrainState, episode: &EpisodeBatch, lr: f64, peak_threshold: f64) -> Result<StepLoss> {
        let batch = self.batch(episode)?;
        let frozen = self.config.freeze_backbone;
        let (loss, grads) = self.model.loss_and_grad(
            &state.params,
            &batch,
            &self.config.loss,
            peak_threshold,
            !frozen,
            self.threads,
        )?;
        if !loss.parts.all_finite() || !loss.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                parts: format!(
                    "L_cls={} L_attp={} L_attf={} L_sem={} total={}",
                    loss.parts.cls, loss.parts.attp, loss.parts.attf, loss.parts.sem, loss.total
                ),
            });
        }
        sgd_update(
            state,
            &grads,
            lr,
            self.config.momentum,
            self.config.weight_decay,
            frozen.then_some("backbone."),
        );
        state.step += 1;
        Ok(loss)
    }

    fn sub_seeds(&self) -> std::collections::BTreeMap<String, u64> {
        ["init", "episodes", "semantics", "warmup"]
            .iter()
            .map(|l| (l.to_string(), derive_seed(self.config.seed, l)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_dir: PathBuf,
    pub log: Vec<LogRecord>,
}

/// Runs (or resumes) training, writing the run directory.
pub fn train(config: TrainConfig, dataset: &Dataset, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let ctx = TrainContext::new(config, dataset)?;
    let cfg = &ctx.config;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    let episodes = ctx.episodes_per_epoch();
    let log_path = run_dir.join(LOG_FILE);

    let (mut state, mut rng, threshold, start_epoch, mut history) = match resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let mut expected = ck.meta.config.clone();
            expected.epochs = cfg.epochs;
            if &expected != cfg {
                return Err(Error::Checkpoint(
                    "checkpoint was trained with a different configuration (only epochs may change)".into(),
                ));
            }
            ck.check_dataset(dataset)?;
            truncate_log(&log_path, ck.meta.step)?;
            let state = TrainState {
                params: ck.params,
                momentum: ck.momentum,
                step: ck.meta.step,
            };
            (state, ck.meta.rng.restore()?, ck.meta.peak_threshold, ck.meta.epoch, ck.meta.history)
        }
        None => {
            let state = ctx.initial_state();
            let threshold = ctx.resolve_peak_threshold(&state.params)?;
            log::info!("peak threshold {threshold}");
            let _ = fs::remove_file(&log_path);
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "episodes"));
            (state, rng, threshold, 0, Vec::new())
        }
    };

    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    let make_ckpt = |state: &TrainState, rng: &ChaCha8Rng, epoch: usize, history: &[EpochSummary]| Checkpoint {
        meta: CheckpointMeta {
            format_version: 1,
            epoch,
            step: state.step,
            episodes_per_epoch: episodes,
            rng: RngState::capture(rng),
            peak_threshold: threshold,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            input: ctx.model.input(),
            seen_classes: dataset.seen_classes.clone(),
            sub_seeds: ctx.sub_seeds(),
            history: history.to_vec(),
        },
        params: state.params.clone(),
        momentum: state.momentum.clone(),
        attribute_semantics: ctx.model.attribute_semantics.clone(),
    };

    let mut last = (make_ckpt(&state, &rng, start_epoch, &history), checkpoint_dir(run_dir, start_epoch));
    if cfg.epochs == 0 {
        last.0.save(&last.1)?;
    }
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut sum = LossParts::default();
        let mut sum_total = 0.0;
        for _ in 0..episodes {
            let episode = ctx.sampler.sample(cfg.n_way, cfg.k_shot, &mut rng)?;
            let step = state.step;
            let loss = match ctx.train_step(&mut state, &episode, lr, threshold) {
                Ok(l) => l,
                Err(e @ Error::NonFinite { .. }) | Err(e @ Error::ZeroNorm(_)) => {
                    write_diagnostic(run_dir, step, epoch, lr, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = LogRecord {
                step,
                epoch,
                l_cls: loss.parts.cls,
                l_attp: loss.parts.attp,
                l_attf: loss.parts.attf,
                l_sem: loss.parts.sem,
                total: loss.total,
                lr,
                eligible: loss.num_eligible,
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
            sum.cls += loss.parts.cls;
            sum.attp += loss.parts.attp;
            sum.attf += loss.parts.attf;
            sum.sem += loss.parts.sem;
            sum_total += loss.total;
            records.push(rec);
        }
        let n = episodes as f64;
        history.push(EpochSummary {
            epoch,
            mean: LossParts {
                cls: sum.cls / n,
                attp: sum.attp / n,
                attf: sum.attf / n,
                sem: sum.sem / n,
            },
            mean_total: sum_total / n,
        });
        log::info!(
            "epoch {} lr {lr:.6} mean L_cls {:.4} total {:.4}",
            epoch + 1,
            sum.cls / n,
            sum_total / n
        );
        last = (make_ckpt(&state, &rng, epoch + 1, &history), checkpoint_dir(run_dir, epoch + 1));
        last.0.save(&last.1)?;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: last.0,
        checkpoint_dir: last.1,
        log: records,
    })
}

/// Keeps only log lines with `step < keep_below`.
fn truncate_log(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LogRecord> = read_log(path)?.into_iter().filter(|r| r.step < keep_below).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_diagnostic(run_dir: &Path, step: u64, epoch: usize, lr: f64, err: &Error) -> Result<()> {
    let path = run_dir.join(DIAGNOSTIC_FILE);
    let body = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "error": err.to_string(),
    });
    fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))
}
