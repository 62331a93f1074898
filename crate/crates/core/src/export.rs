//! Per-attribute attention images for visual inspection.
//!
//! Each of the `K` softmaxed maps is resized bilinearly to the image resolution
//! and min-max rescaled to 0..=255. A constant map becomes all zeros.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::resize_map;
use crate::backbone::FeatureBundle;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeaksReport {
    pub index: usize,
    pub label: usize,
    /// Attention grid `(height, width)`.
    pub grid: (usize, usize),
    /// Raw (pre-softmax) maximum of every attention channel.
    pub peaks: Vec<f64>,
    /// PNG file names, one per attribute.
    pub images: Vec<String>,
}

/// 8-bit rendering of attention channel `j` at `size = (height, width)`.
pub fn attention_image(bundle: &FeatureBundle, j: usize, size: (usize, usize)) -> Array2<u8> {
    let (gh, gw) = bundle.grid;
    let map = bundle
        .attention_weights
        .column(j)
        .to_owned()
        .into_shape_with_order((gh, gw))
        .expect("grid matches positions");
    let up = resize_map(map.view(), size);
    let lo = up.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = up.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = hi - lo;
    up.mapv(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
}

pub fn peaks_file(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join(format!("image_{index}_peaks.json"))
}

/// Writes `image_<index>_attr_<j>.png` for every attribute and `image_<index>_peaks.json`.
pub fn export_attention(model: &Model, params: &ParamStore, dataset: &Dataset, index: usize, out_dir: &Path) -> Result<PeaksReport> {
    let sample = dataset.samples.get(index).ok_or_else(|| {
        Error::Config(format!(
            "image index {index} is out of range (dataset has {} samples)",
            dataset.samples.len()
        ))
    })?;
    let bundle = model.extract(params, sample.image.view())?;
    let (h, w, _) = sample.image.dim();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let k = bundle.attention.ncols();
    let mut images = Vec::with_capacity(k);
    for j in 0..k {
        let pixels = attention_image(&bundle, j, (h, w));
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([pixels[[y as usize, x as usize]]]));
        let name = format!("image_{index}_attr_{j}.png");
        img.save(out_dir.join(&name))?;
        images.push(name);
    }
    let report = PeaksReport {
        index,
        label: sample.label,
        grid: bundle.grid,
        peaks: crate::backbone::attention::raw_peaks(bundle.attention.view()).to_vec(),
        images,
    };
    let path = peaks_file(out_dir, index);
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, CnnConfig, InputSpec};
    use crate::datamodel::{generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Dataset, Model, ParamStore) {
        let spec = SynthSpec {
            image_size: 16,
            ..SynthSpec::new(4, 2, 4, 2)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let input = InputSpec {
            height: 16,
            width: 16,
            channels: 3,
            num_attributes: 4,
        };
        let cfg = ModelConfig {
            backbone: BackboneConfig::Cnn(CnnConfig { channels: vec![4, 6] }),
            hidden_size: 8,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, input, Array2::eye(4)).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        (ds, m, p)
    }

    #[test]
    fn writes_one_png_per_attribute_and_peaks() {
        let (ds, m, p) = setup();
        let dir = tempfile::tempdir().unwrap();
        let r = export_attention(&m, &p, &ds, 3, dir.path()).unwrap();
        assert_eq!(r.images.len(), 4);
        for name in &r.images {
            let img = image::open(dir.path().join(name)).unwrap().to_luma8();
            assert_eq!(img.dimensions(), (16, 16));
            let max = img.pixels().map(|p| p.0[0]).max().unwrap();
            let min = img.pixels().map(|p| p.0[0]).min().unwrap();
            assert!(max == 255 && min == 0 || max == 0);
        }
        let bundle = m.extract(&p, ds.samples[3].image.view()).unwrap();
        for (j, &peak) in r.peaks.iter().enumerate() {
            let direct = bundle.attention.column(j).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(peak, direct);
        }
        let back: PeaksReport = serde_json::from_slice(&fs::read(peaks_file(dir.path(), 3)).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let (ds, m, p) = setup();
        let dir = tempfile::tempdir().unwrap();
        assert!(export_attention(&m, &p, &ds, ds.samples.len(), dir.path()).is_err());
    }
}
