use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Ix3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::semantics::{validate_class_semantics, SemanticsTable};
use super::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Channels-last image, values in [0, 1].
pub type Image = Array3<f32>;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASS_SEMANTICS_FILE: &str = "class_semantics.csv";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub split: Split,
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub semantics: SemanticsTable,
    /// Where each attribute is drawn, when the dataset is synthetic.
    pub attribute_regions: Option<Vec<Region>>,
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    num_attributes: usize,
    image_shape: [usize; 3],
    seen_classes: Vec<usize>,
    unseen_classes: Vec<usize>,
    class_semantics: String,
    samples: Vec<ManifestSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attribute_regions: Option<Vec<Region>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    file: String,
    label: usize,
    split: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.semantics.num_classes()
    }

    pub fn num_attributes(&self) -> usize {
        self.semantics.num_attributes()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.seen_classes.iter().chain(&self.unseen_classes).copied().collect();
        all.sort_unstable();
        all
    }

    /// `(height, width, channels)` shared by every sample.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.image.dim())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn test_indices_for(&self, classes: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Split::Test && set.contains(&self.samples[i].label))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_class_semantics(&self.semantics.class_semantics)?;
        let m = self.num_classes();
        let seen: BTreeSet<usize> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(Error::Dataset("duplicate class in split lists".into()));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Dataset(format!("class {c} is both seen and unseen")));
        }
        if let Some(&c) = seen.union(&unseen).find(|&&c| c >= m) {
            return Err(Error::Dataset(format!("class {c} out of range (M = {m})")));
        }
        let shape = self.image_shape();
        for (i, s) in self.samples.iter().enumerate() {
            if !seen.contains(&s.label) && !unseen.contains(&s.label) {
                return Err(Error::Dataset(format!(
                    "sample {i} label {} is in neither split",
                    s.label
                )));
            }
            if s.split == Split::Train && !seen.contains(&s.label) {
                return Err(Error::Dataset(format!(
                    "training sample {i} has unseen label {}",
                    s.label
                )));
            }
            if Some(s.image.dim()) != shape {
                return Err(Error::Dataset(format!("sample {i} has a different image shape")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let sample_dir = dir.join("samples");
        fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
        let (h, w, c) = self.image_shape().unwrap_or((0, 0, 0));
        let mut samples = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("samples/{i:06}.coar");
            write_tensor(dir.join(&file), &Tensor::F32(s.image.clone().into_dyn()))?;
            samples.push(ManifestSample {
                file,
                label: s.label,
                split: s.split,
            });
        }
        write_class_semantics(&dir.join(CLASS_SEMANTICS_FILE), &self.semantics.class_semantics)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            num_classes: self.num_classes(),
            num_attributes: self.num_attributes(),
            image_shape: [h, w, c],
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            class_semantics: CLASS_SEMANTICS_FILE.into(),
            samples,
            attribute_regions: self.attribute_regions.clone(),
            synth: self.synth.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let cs = read_class_semantics(&dir.join(&manifest.class_semantics))?;
        if cs.dim() != (manifest.num_classes, manifest.num_attributes) {
            return Err(Error::Dataset(format!(
                "class semantics is {:?}, manifest says {}x{}",
                cs.dim(),
                manifest.num_classes,
                manifest.num_attributes
            )));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let image = read_tensor(dir.join(&s.file))?
                .into_f32()?
                .into_dimensionality::<Ix3>()
                .map_err(|e| Error::Dataset(format!("{}: {e}", s.file)))?;
            samples.push(Sample {
                image,
                label: s.label,
                split: s.split,
            });
        }
        let ds = Dataset {
            samples,
            seen_classes: manifest.seen_classes,
            unseen_classes: manifest.unseen_classes,
            semantics: SemanticsTable::one_hot(cs)?,
            attribute_regions: manifest.attribute_regions,
            synth: manifest.synth,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 over the manifest bytes of a saved dataset directory.
    pub fn manifest_hash(dir: &Path) -> Result<String> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

pub fn write_class_semantics(path: &Path, cs: &Array2<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| map_csv(path, e))?;
    for row in cs.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_class_semantics(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| map_csv(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("class semantics value {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Dataset("ragged class semantics rows".into()));
    }
    let m = rows.len();
    Array2::from_shape_vec((m, k), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Dataset(e.to_string()))
}

fn map_csv(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        let cs = array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.25, 0.0, 1.0]];
        let img = |v: f32| Array3::from_elem((4, 4, 3), v);
        Dataset {
            samples: vec![
                Sample { image: img(0.1), label: 0, split: Split::Train },
                Sample { image: img(0.2), label: 1, split: Split::Test },
                Sample { image: img(0.3), label: 2, split: Split::Test },
            ],
            seen_classes: vec![0, 1],
            unseen_classes: vec![2],
            semantics: SemanticsTable::one_hot(cs).unwrap(),
            attribute_regions: None,
            synth: None,
        }
    }

    #[test]
    fn directory_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = tiny();
        ds.unseen_classes.push(1);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn unseen_training_sample_rejected() {
        let mut ds = tiny();
        ds.samples[2].split = Split::Train;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn uncovered_label_rejected() {
        let mut ds = tiny();
        ds.unseen_classes.clear();
        assert!(ds.validate().is_err());
    }
}
