use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use coar_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = coar_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

const SPEC: &str = r#"{"n_seen": 4, "n_unseen": 2, "num_attributes": 4, "images_per_class": 5, "image_size": 16, "seed": 7}"#;

fn synth(dir: &Path) {
    let out = cstr(dir.to_str().unwrap());
    assert_eq!(unsafe { coar_synthesize(cstr(SPEC).as_ptr(), out.as_ptr()) }, CoarStatus::Ok);
}

fn train_tiny(data: &Path, run: &Path) -> String {
    let cfg = serde_json::json!({
        "dataset": data,
        "output_dir": run,
        "train": {
            "epochs": 1,
            "episodes_per_epoch": 2,
            "n_way": 4,
            "k_shot": 2,
            "model": {"backbone": {"kind": "cnn", "channels": [4, 6]}, "hidden_size": 8}
        }
    });
    let mut buf = vec![0 as std::ffi::c_char; 4096];
    let json = cstr(&cfg.to_string());
    let st = unsafe { coar_train(json.as_ptr(), buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, CoarStatus::Ok, "{}", if st == CoarStatus::Ok { String::new() } else { last_error() });
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

#[test]
fn harmonic_mean_matches_reported_rows() {
    assert!((coar_harmonic_mean(0.709, 0.773) - 0.740).abs() < 5e-4);
    assert!((coar_harmonic_mean(0.681, 0.791) - 0.732).abs() < 5e-4);
    assert_eq!(coar_harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn null_arguments_report_errors() {
    let mut ds: *mut CoarDataset = ptr::null_mut();
    assert_eq!(unsafe { coar_dataset_open(ptr::null(), &mut ds) }, CoarStatus::NullPointer);
    assert!(last_error().contains("dir"));
    assert!(ds.is_null());
    let mut info = CoarDatasetInfo::default();
    assert_eq!(unsafe { coar_dataset_info(ptr::null(), &mut info) }, CoarStatus::NullPointer);
    unsafe {
        coar_dataset_free(ptr::null_mut());
        coar_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(dir.path().to_str().unwrap());
    let bad = cstr(r#"{"n_seen": 20, "n_unseen": 5, "num_attributes": 2, "images_per_class": 3}"#);
    assert_eq!(unsafe { coar_synthesize(bad.as_ptr(), out.as_ptr()) }, CoarStatus::Config);
    assert!(last_error().contains("subsets"));
    let mut ds: *mut CoarDataset = ptr::null_mut();
    let missing = cstr(dir.path().join("nope").to_str().unwrap());
    assert_eq!(unsafe { coar_dataset_open(missing.as_ptr(), &mut ds) }, CoarStatus::Io);
    let mut m: *mut CoarModel = ptr::null_mut();
    assert_ne!(unsafe { coar_model_load(missing.as_ptr(), &mut m) }, CoarStatus::Ok);
    assert_eq!(unsafe { coar_train(cstr("{\"bogus\": 1}").as_ptr(), ptr::null_mut(), 0) }, CoarStatus::Config);
}

#[test]
fn dataset_handle_exposes_counts_and_pixels() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut ds: *mut CoarDataset = ptr::null_mut();
    let path = cstr(dir.path().to_str().unwrap());
    assert_eq!(unsafe { coar_dataset_open(path.as_ptr(), &mut ds) }, CoarStatus::Ok);
    let mut info = CoarDatasetInfo::default();
    assert_eq!(unsafe { coar_dataset_info(ds, &mut info) }, CoarStatus::Ok);
    assert_eq!(
        info,
        CoarDatasetInfo {
            num_samples: 30,
            num_classes: 6,
            num_attributes: 4,
            num_seen: 4,
            num_unseen: 2,
            height: 16,
            width: 16,
            channels: 3,
        }
    );
    let rust = coar_core::datamodel::Dataset::load(dir.path()).unwrap();
    let mut buf = vec![0f32; 16 * 16 * 3];
    let mut label = usize::MAX;
    assert_eq!(unsafe { coar_dataset_sample(ds, 7, buf.as_mut_ptr(), buf.len(), &mut label) }, CoarStatus::Ok);
    assert_eq!(label, rust.samples[7].label);
    assert_eq!(buf, rust.samples[7].image.iter().copied().collect::<Vec<_>>());
    assert_eq!(
        unsafe { coar_dataset_sample(ds, 7, buf.as_mut_ptr(), 10, ptr::null_mut()) },
        CoarStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { coar_dataset_sample(ds, 30, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) },
        CoarStatus::InvalidArgument
    );
    unsafe { coar_dataset_free(ds) };
}

#[test]
fn train_load_predict_and_evaluate() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let run = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(data.path(), run.path());
    assert!(ckpt.ends_with("ckpt_epoch_1"));

    let mut ds: *mut CoarDataset = ptr::null_mut();
    let dpath = cstr(data.path().to_str().unwrap());
    assert_eq!(unsafe { coar_dataset_open(dpath.as_ptr(), &mut ds) }, CoarStatus::Ok);
    let mut m: *mut CoarModel = ptr::null_mut();
    assert_eq!(unsafe { coar_model_load(cstr(&ckpt).as_ptr(), &mut m) }, CoarStatus::Ok);
    let mut dim = 0usize;
    assert_eq!(unsafe { coar_model_feature_dim(m, &mut dim) }, CoarStatus::Ok);
    assert_eq!(dim, 6);

    let rust_ds = coar_core::datamodel::Dataset::load(data.path()).unwrap();
    let ck = coar_core::trainer::Checkpoint::load(Path::new(&ckpt)).unwrap();
    let model = ck.model().unwrap();
    let mut img = vec![0f32; 16 * 16 * 3];
    let mut cf = vec![0f64; dim];
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, s) in rust_ds.samples.iter().enumerate() {
        unsafe { coar_dataset_sample(ds, i, img.as_mut_ptr(), img.len(), ptr::null_mut()) };
        assert_eq!(unsafe { coar_model_extract(m, img.as_ptr(), img.len(), cf.as_mut_ptr(), cf.len()) }, CoarStatus::Ok);
        let direct = model.extract(&ck.params, s.image.view()).unwrap().class_feature;
        assert_eq!(cf, direct.to_vec());
        if rust_ds.unseen_classes.contains(&s.label) {
            let mut class = usize::MAX;
            let st = unsafe { coar_model_predict(m, ds, img.as_ptr(), img.len(), COAR_MODE_ZSL, &mut class) };
            assert_eq!(st, CoarStatus::Ok);
            assert!(rust_ds.unseen_classes.contains(&class));
            let e = hits.entry(s.label).or_default();
            e.0 += (class == s.label) as usize;
            e.1 += 1;
        }
    }
    let t1_by_predict = hits.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hits.len() as f64;

    let mut zsl = CoarMetrics::default();
    assert_eq!(unsafe { coar_model_evaluate(m, ds, COAR_MODE_ZSL, &mut zsl) }, CoarStatus::Ok);
    assert!((zsl.t1 - t1_by_predict).abs() < 1e-12);
    assert!(zsl.acc_h.is_nan());
    let mut gzsl = CoarMetrics::default();
    assert_eq!(unsafe { coar_model_evaluate(m, ds, COAR_MODE_GZSL, &mut gzsl) }, CoarStatus::Ok);
    assert!(gzsl.t1.is_nan());
    assert!((gzsl.acc_h - coar_harmonic_mean(gzsl.acc_u, gzsl.acc_s)).abs() < 1e-12);
    assert_eq!(unsafe { coar_model_evaluate(m, ds, 7, &mut gzsl) }, CoarStatus::InvalidArgument);
    assert_eq!(
        unsafe { coar_model_extract(m, img.as_ptr(), 5, cf.as_mut_ptr(), cf.len()) },
        CoarStatus::InvalidArgument
    );
    unsafe {
        coar_model_free(m);
        coar_dataset_free(ds);
    }
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let run = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(data.path(), run.path());
    let other = tempfile::tempdir().unwrap();
    let spec = cstr(r#"{"n_seen": 5, "n_unseen": 1, "num_attributes": 4, "images_per_class": 3, "image_size": 16}"#);
    let opath = cstr(other.path().to_str().unwrap());
    assert_eq!(unsafe { coar_synthesize(spec.as_ptr(), opath.as_ptr()) }, CoarStatus::Ok);
    let mut ds: *mut CoarDataset = ptr::null_mut();
    assert_eq!(unsafe { coar_dataset_open(opath.as_ptr(), &mut ds) }, CoarStatus::Ok);
    let mut m: *mut CoarModel = ptr::null_mut();
    assert_eq!(unsafe { coar_model_load(cstr(&ckpt).as_ptr(), &mut m) }, CoarStatus::Ok);
    let mut metrics = CoarMetrics::default();
    assert_eq!(unsafe { coar_model_evaluate(m, ds, COAR_MODE_ZSL, &mut metrics) }, CoarStatus::Checkpoint);
    unsafe {
        coar_model_free(m);
        coar_dataset_free(ds);
    }
}

#[test]
fn short_checkpoint_buffer_is_reported() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let run = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "dataset": data.path(),
        "output_dir": run.path(),
        "train": {"epochs": 0, "n_way": 4, "model": {"backbone": {"kind": "cnn", "channels": [4]}, "hidden_size": 4}}
    });
    let mut buf = [0 as std::ffi::c_char; 4];
    let st = unsafe { coar_train(cstr(&cfg.to_string()).as_ptr(), buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, CoarStatus::BufferTooSmall);
    assert!(run.path().join("ckpt_epoch_0").join("meta.json").exists());
}

#[test]
fn header_declares_every_exported_symbol() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/coar.h")).unwrap();
    let src = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let mut n = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            n += 1;
        }
    }
    assert!(n >= 14, "{n}");
    for ty in ["typedef struct CoarDataset CoarDataset;", "typedef struct CoarModel CoarModel;", "COAR_STATUS_OK = 0"] {
        assert!(header.contains(ty), "{ty}");
    }
}
