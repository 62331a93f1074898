//! C ABI over `coar-core`.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every entry point returns a [`CoarStatus`]; on failure the message
//! is available from [`coar_last_error_message`] on the same thread. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use coar_core::config::RunConfig;
use coar_core::datamodel::{generate_synthetic, Dataset, Image, SynthSpec};
use coar_core::eval::{build_eval_prototypes, candidate_classes, evaluate, harmonic_mean, predict, EvalMode};
use coar_core::model::Model;
use coar_core::parallel::thread_count;
use coar_core::trainer::{train, Checkpoint};
use coar_core::Error;

/// Scores unseen classes only.
pub const COAR_MODE_ZSL: c_int = 0;
/// Scores seen and unseen classes jointly.
pub const COAR_MODE_GZSL: c_int = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Dataset = 5,
    Checkpoint = 6,
    Numerical = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Loaded dataset.
pub struct CoarDataset {
    inner: Dataset,
}

/// Trained model with its parameters.
pub struct CoarModel {
    checkpoint: Checkpoint,
    model: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoarDatasetInfo {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Per-class mean accuracies. Fields not produced by the mode are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoarMetrics {
    pub t1: f64,
    pub acc_u: f64,
    pub acc_s: f64,
    pub acc_h: f64,
    pub num_samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (CoarStatus, String);

fn fail<T>(status: CoarStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err((status, msg.into()))
}

fn from_core(e: Error) -> Failure {
    let status = match &e {
        _ if e.is_numerical() => CoarStatus::Numerical,
        Error::Io { .. } => CoarStatus::Io,
        Error::Config(_) | Error::Synth(_) | Error::Json(_) => CoarStatus::Config,
        Error::Checkpoint(_) => CoarStatus::Checkpoint,
        Error::Shape(_) => CoarStatus::InvalidArgument,
        _ => CoarStatus::Dataset,
    };
    (status, e.to_string())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CoarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CoarStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CoarStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(CoarStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(CoarStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| (CoarStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| (CoarStatus::NullPointer, format!("{name} is null")))
}

fn mode_arg(mode: c_int) -> Result<EvalMode, Failure> {
    match mode {
        COAR_MODE_ZSL => Ok(EvalMode::Zsl),
        COAR_MODE_GZSL => Ok(EvalMode::Gzsl),
        m => fail(CoarStatus::InvalidArgument, format!("unknown mode {m}")),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn coar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// `2·u·s / (u + s)`, and 0 when both are 0.
#[no_mangle]
pub extern "C" fn coar_harmonic_mean(acc_u: f64, acc_s: f64) -> f64 {
    harmonic_mean(acc_u, acc_s)
}

/// Generates a synthetic dataset from a JSON spec and writes it to `out_dir`.
///
/// # Safety
/// Both arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn coar_synthesize(spec_json: *const c_char, out_dir: *const c_char) -> CoarStatus {
    guard(|| {
        let json = str_arg(spec_json, "spec_json")?;
        let out = str_arg(out_dir, "out_dir")?;
        let spec: SynthSpec = serde_json::from_str(json).map_err(|e| (CoarStatus::Config, e.to_string()))?;
        generate_synthetic(&spec).and_then(|ds| ds.save(&PathBuf::from(out))).map_err(from_core)
    })
}

/// # Safety
/// `dir` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coar_dataset_open(dir: *const c_char, out: *mut *mut CoarDataset) -> CoarStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let inner = Dataset::load(&PathBuf::from(dir)).map_err(from_core)?;
        *out = Box::into_raw(Box::new(CoarDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from [`coar_dataset_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn coar_dataset_free(dataset: *mut CoarDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coar_dataset_info(dataset: *const CoarDataset, info: *mut CoarDatasetInfo) -> CoarStatus {
    guard(|| {
        let ds = &ref_arg(dataset, "dataset")?.inner;
        let info = out_arg(info, "info")?;
        let (height, width, channels) = ds.image_shape().unwrap_or((0, 0, 0));
        *info = CoarDatasetInfo {
            num_samples: ds.samples.len(),
            num_classes: ds.num_classes(),
            num_attributes: ds.num_attributes(),
            num_seen: ds.seen_classes.len(),
            num_unseen: ds.unseen_classes.len(),
            height,
            width,
            channels,
        };
        Ok(())
    })
}

/// Copies sample `index` (channels-last `H·W·C` floats) into `buf` and its class into `label`.
///
/// # Safety
/// `buf` must hold `len` floats; `label` may be null.
#[no_mangle]
pub unsafe extern "C" fn coar_dataset_sample(
    dataset: *const CoarDataset,
    index: usize,
    buf: *mut f32,
    len: usize,
    label: *mut usize,
) -> CoarStatus {
    guard(|| {
        let ds = &ref_arg(dataset, "dataset")?.inner;
        let s = ds.samples.get(index).ok_or_else(|| {
            (CoarStatus::InvalidArgument, format!("index {index} out of range"))
        })?;
        let img = s.image.as_standard_layout();
        let data = img.as_slice().expect("standard layout");
        if buf.is_null() {
            return fail(CoarStatus::NullPointer, "buf is null");
        }
        if len < data.len() {
            return fail(CoarStatus::BufferTooSmall, format!("need {} floats", data.len()));
        }
        std::slice::from_raw_parts_mut(buf, data.len()).copy_from_slice(data);
        if let Some(l) = label.as_mut() {
            *l = s.label;
        }
        Ok(())
    })
}

/// # Safety
/// `ckpt_dir` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coar_model_load(ckpt_dir: *const c_char, out: *mut *mut CoarModel) -> CoarStatus {
    guard(|| {
        let dir = str_arg(ckpt_dir, "ckpt_dir")?;
        let out = out_arg(out, "out")?;
        let checkpoint = Checkpoint::load(&PathBuf::from(dir)).map_err(from_core)?;
        let model = checkpoint.model().map_err(from_core)?;
        *out = Box::into_raw(Box::new(CoarModel { checkpoint, model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`coar_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn coar_model_free(model: *mut CoarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the class feature.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coar_model_feature_dim(model: *const CoarModel, out: *mut usize) -> CoarStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.model.backbone.feature_dim();
        Ok(())
    })
}

unsafe fn image_arg(m: &CoarModel, pixels: *const f32, len: usize) -> Result<Image, Failure> {
    let i = m.model.input();
    let need = i.height * i.width * i.channels;
    if pixels.is_null() {
        return fail(CoarStatus::NullPointer, "pixels is null");
    }
    if len != need {
        return fail(
            CoarStatus::InvalidArgument,
            format!("image has {len} values, model expects {}x{}x{} = {need}", i.height, i.width, i.channels),
        );
    }
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(Image::from_shape_vec((i.height, i.width, i.channels), data).expect("length checked"))
}

/// Writes the class feature of a channels-last image into `out` (`out_len` ≥ feature dim).
///
/// # Safety
/// `pixels` must hold `len` floats and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn coar_model_extract(
    model: *const CoarModel,
    pixels: *const f32,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> CoarStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let img = image_arg(m, pixels, len)?;
        let bundle = m.model.extract(&m.checkpoint.params, img.view()).map_err(from_core)?;
        let cf = bundle.class_feature;
        if out.is_null() {
            return fail(CoarStatus::NullPointer, "out is null");
        }
        if out_len < cf.len() {
            return fail(CoarStatus::BufferTooSmall, format!("need {} doubles", cf.len()));
        }
        std::slice::from_raw_parts_mut(out, cf.len()).copy_from_slice(cf.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Predicts the global class id of an image among the classes of `mode`.
///
/// # Safety
/// Handles must be live; `pixels` must hold `len` floats; `class_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn coar_model_predict(
    model: *const CoarModel,
    dataset: *const CoarDataset,
    pixels: *const f32,
    len: usize,
    mode: c_int,
    class_out: *mut usize,
) -> CoarStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = &ref_arg(dataset, "dataset")?.inner;
        let mode = mode_arg(mode)?;
        let out = out_arg(class_out, "class_out")?;
        m.checkpoint.check_dataset(ds).map_err(from_core)?;
        let img = image_arg(m, pixels, len)?;
        let classes = candidate_classes(ds, mode);
        let cp = build_eval_prototypes(&m.model, &m.checkpoint.params, ds, &classes).map_err(from_core)?;
        let bundle = m.model.extract(&m.checkpoint.params, img.view()).map_err(from_core)?;
        let pos = predict(bundle.class_feature.view(), cp.view()).map_err(from_core)?;
        *out = classes[pos];
        Ok(())
    })
}

/// # Safety
/// Handles must be live and `metrics` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coar_model_evaluate(
    model: *const CoarModel,
    dataset: *const CoarDataset,
    mode: c_int,
    metrics: *mut CoarMetrics,
) -> CoarStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = &ref_arg(dataset, "dataset")?.inner;
        let mode = mode_arg(mode)?;
        let out = out_arg(metrics, "metrics")?;
        m.checkpoint.check_dataset(ds).map_err(from_core)?;
        let r = evaluate(&m.model, &m.checkpoint.params, ds, mode, thread_count()).map_err(from_core)?;
        *out = CoarMetrics {
            t1: r.t1.unwrap_or(f64::NAN),
            acc_u: r.acc_u.unwrap_or(f64::NAN),
            acc_s: r.acc_s.unwrap_or(f64::NAN),
            acc_h: r.acc_h.unwrap_or(f64::NAN),
            num_samples: r.num_samples,
        };
        Ok(())
    })
}

/// Trains from a JSON run configuration (same schema as the CLI's `--config`).
/// When `ckpt_out` is non-null the final checkpoint directory is written there
/// as a NUL-terminated string; `BUFFER_TOO_SMALL` means training finished but
/// the path did not fit in `ckpt_cap` bytes.
///
/// # Safety
/// `config_json` must be a valid string; `ckpt_out` must be null or hold `ckpt_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn coar_train(config_json: *const c_char, ckpt_out: *mut c_char, ckpt_cap: usize) -> CoarStatus {
    guard(|| {
        let json = str_arg(config_json, "config_json")?;
        let rc = RunConfig::from_json(json.as_bytes()).map_err(from_core)?;
        rc.validate().map_err(from_core)?;
        let ds = rc.load_dataset().map_err(from_core)?;
        let out_dir = rc.output_dir().map_err(from_core)?;
        let outcome = train(rc.train.clone(), &ds, out_dir, None).map_err(from_core)?;
        if !ckpt_out.is_null() {
            let path = outcome.checkpoint_dir.to_string_lossy().into_owned();
            if path.len() + 1 > ckpt_cap {
                return fail(CoarStatus::BufferTooSmall, format!("checkpoint path needs {} bytes", path.len() + 1));
            }
            let dst = std::slice::from_raw_parts_mut(ckpt_out as *mut u8, path.len() + 1);
            dst[..path.len()].copy_from_slice(path.as_bytes());
            dst[path.len()] = 0;
        }
        Ok(())
    })
}
