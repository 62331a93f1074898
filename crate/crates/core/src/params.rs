//! Named parameter storage shared by every trainable component.
//!
//! Gradients and optimizer buffers use the same container with the same keys,
//! so optimizer updates, checkpointing and finite-difference checks all walk a
//! single ordered map.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Index;
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Gains/offsets of normalization layers and learned embeddings.
    Norm,
}

impl ParamKind {
    /// Only dense weights are subject to weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

impl Param {
    pub fn zeros(shape: &[usize], kind: ParamKind) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            kind,
        }
    }

    pub fn filled(shape: &[usize], kind: ParamKind, value: f64) -> Self {
        let mut p = Param::zeros(shape, kind);
        p.data.fill(value);
        p
    }

    /// He-uniform on `fan_in`: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut p = Param::zeros(shape, ParamKind::Weight);
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        p
    }

    /// LeCun-uniform on `fan_in`: U(-sqrt(3/fan_in), sqrt(3/fan_in)).
    pub fn lecun_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let mut p = Param::zeros(shape, ParamKind::Weight);
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        p
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], kind: ParamKind, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut p = Param::zeros(shape, kind);
        p.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        p
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("rank-2 parameter")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("rank-2 parameter")
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            other => panic!("expected rank-2 parameter, got shape {other:?}"),
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::F64(ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).expect("shape"))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), param);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param::zeros(&p.shape, p.kind)))
                .collect(),
        }
    }

    /// `self += other`, key by key. Both stores must share the same layout.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (name, p) in self.entries.iter_mut() {
            let q = other.get(name).unwrap_or_else(|| panic!("missing {name}"));
            p.data.iter_mut().zip(&q.data).for_each(|(a, b)| *a += b);
        }
    }

    /// Adds `delta` (same element count, row-major) into the named entry.
    pub fn accumulate<'a>(&mut self, name: &str, delta: impl IntoIterator<Item = &'a f64>) {
        let p = self.get_mut(name);
        let mut n = 0;
        for (a, b) in p.data.iter_mut().zip(delta) {
            *a += b;
            n += 1;
        }
        assert_eq!(n, p.data.len(), "gradient size mismatch for {name}");
    }

    pub fn scale(&mut self, s: f64) {
        self.entries
            .values_mut()
            .for_each(|p| p.data.iter_mut().for_each(|v| *v *= s));
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bit-level equality of every entry.
    pub fn bits_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, p)| {
                other.get(k).is_some_and(|q| {
                    p.shape == q.shape
                        && p.data.len() == q.data.len()
                        && p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }

    /// Writes one tensor file per entry plus `kinds.json` describing decay classes.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kinds = BTreeMap::new();
        for (name, p) in &self.entries {
            write_tensor(dir.join(format!("{name}.coar")), &p.to_tensor())?;
            kinds.insert(name.clone(), p.kind);
        }
        let path = dir.join("kinds.json");
        fs::write(&path, serde_json::to_vec_pretty(&kinds)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<ParamStore> {
        let path = dir.join("kinds.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let kinds: BTreeMap<String, ParamKind> = serde_json::from_slice(&text)?;
        let mut store = ParamStore::new();
        for (name, kind) in kinds {
            let arr = read_tensor(dir.join(format!("{name}.coar")))?.into_f64()?;
            store.insert(
                name,
                Param {
                    shape: arr.shape().to_vec(),
                    data: arr.iter().copied().collect(),
                    kind,
                },
            );
        }
        Ok(store)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.entries {
            match other.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(q) if q.shape != p.shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        p.shape, q.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

impl Index<&str> for ParamStore {
    type Output = Param;

    fn index(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a.w", Param::he_uniform(&[3, 4], 3, &mut rng));
        store.insert("a.b", Param::filled(&[4], ParamKind::Bias, -0.0));
        store.insert("n.g", Param::filled(&[2], ParamKind::Norm, 1.0));
        let dir = tempfile::tempdir().unwrap();
        store.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path()).unwrap();
        assert!(back.bits_eq(&store));
        assert_eq!(back["a.b"].kind, ParamKind::Bias);
        store.check_layout(&back).unwrap();
    }

    #[test]
    fn layout_mismatch_detected() {
        let mut a = ParamStore::new();
        a.insert("x", Param::zeros(&[2], ParamKind::Bias));
        let mut b = ParamStore::new();
        b.insert("x", Param::zeros(&[3], ParamKind::Bias));
        assert!(a.check_layout(&b).is_err());
        assert!(a.check_layout(&ParamStore::new()).is_err());
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Param::he_uniform(&[10, 10], 6, &mut rng);
        assert!(p.data.iter().all(|v| v.abs() <= 1.0));
    }
}
