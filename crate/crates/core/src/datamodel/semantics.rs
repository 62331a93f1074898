use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-attribute input vectors of the prototype network are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeSemanticsMode {
    #[default]
    OneHot,
    Random,
    RandomOrthogonal,
}

impl std::str::FromStr for AttributeSemanticsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" => Ok(Self::OneHot),
            "random" => Ok(Self::Random),
            "random-orthogonal" => Ok(Self::RandomOrthogonal),
            other => Err(Error::Config(format!("unknown attribute semantics mode {other:?}"))),
        }
    }
}

/// Optional preprocessing of class-semantics rows before they enter the
/// prototype network. Real attribute annotations come with dataset-specific
/// scaling, so this is left to the run configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticsNormalization {
    #[default]
    None,
    /// Each row divided by its L2 norm.
    RowL2,
    /// Each column divided by its maximum over all classes.
    ColumnMax,
}

impl SemanticsNormalization {
    pub fn apply(self, cs: &Array2<f64>) -> Array2<f64> {
        match self {
            SemanticsNormalization::None => cs.clone(),
            SemanticsNormalization::RowL2 => {
                let mut out = cs.clone();
                for mut row in out.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    if n > 0.0 {
                        row /= n;
                    }
                }
                out
            }
            SemanticsNormalization::ColumnMax => {
                let mut out = cs.clone();
                for mut col in out.columns_mut() {
                    let m = col.fold(0.0f64, |a, &b| a.max(b));
                    if m > 0.0 {
                        col /= m;
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticsTable {
    /// M×K attribute strengths, non-negative, no all-zero row.
    pub class_semantics: Array2<f64>,
    /// K×K attribute input vectors.
    pub attribute_semantics: Array2<f64>,
    pub mode: AttributeSemanticsMode,
}

impl SemanticsTable {
    pub fn new<R: Rng + ?Sized>(
        class_semantics: Array2<f64>,
        mode: AttributeSemanticsMode,
        rng: &mut R,
    ) -> Result<Self> {
        validate_class_semantics(&class_semantics)?;
        let k = class_semantics.ncols();
        Ok(SemanticsTable {
            attribute_semantics: attribute_semantics(k, mode, rng),
            class_semantics,
            mode,
        })
    }

    pub fn one_hot(class_semantics: Array2<f64>) -> Result<Self> {
        validate_class_semantics(&class_semantics)?;
        let k = class_semantics.ncols();
        Ok(SemanticsTable {
            attribute_semantics: Array2::eye(k),
            class_semantics,
            mode: AttributeSemanticsMode::OneHot,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_semantics.nrows()
    }

    pub fn num_attributes(&self) -> usize {
        self.class_semantics.ncols()
    }

    pub fn class_rows(&self, classes: &[usize]) -> Array2<f64> {
        self.class_semantics.select(Axis(0), classes)
    }
}

pub fn validate_class_semantics(cs: &Array2<f64>) -> Result<()> {
    if cs.ncols() == 0 || cs.nrows() == 0 {
        return Err(Error::Dataset("class semantics matrix is empty".into()));
    }
    for (i, row) in cs.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Dataset(format!(
                "class {i} semantics must be finite and non-negative"
            )));
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Dataset(format!("class {i} has no active attribute")));
        }
    }
    Ok(())
}

pub fn attribute_semantics<R: Rng + ?Sized>(
    k: usize,
    mode: AttributeSemanticsMode,
    rng: &mut R,
) -> Array2<f64> {
    match mode {
        AttributeSemanticsMode::OneHot => Array2::eye(k),
        AttributeSemanticsMode::Random => {
            Array2::from_shape_simple_fn((k, k), || StandardNormal.sample(rng))
        }
        AttributeSemanticsMode::RandomOrthogonal => {
            let mut m: Array2<f64> = Array2::from_shape_simple_fn((k, k), || StandardNormal.sample(rng));
            // Modified Gram-Schmidt over rows.
            for i in 0..k {
                for j in 0..i {
                    let proj = m.row(i).dot(&m.row(j));
                    let rj = m.row(j).to_owned();
                    m.row_mut(i).scaled_add(-proj, &rj);
                }
                let n = m.row(i).dot(&m.row(i)).sqrt();
                m.row_mut(i).mapv_inplace(|v| v / n);
            }
            m
        }
    }
}

/// Ground-truth targets for the semantic-readout loss: each attribute column
/// min-max rescaled to [0, 1] using the statistics of the `seen` rows only.
/// Constant columns are clamped to [0, 1] instead.
pub fn readout_targets(cs: &Array2<f64>, seen: &[usize]) -> Array2<f64> {
    let mut out = cs.clone();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let seen_vals: Array1<f64> = seen.iter().map(|&i| cs[[i, j]]).collect();
        let lo = seen_vals.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = seen_vals.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if hi > lo {
            col.mapv_inplace(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
        } else {
            col.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_is_identity_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = attribute_semantics(6, AttributeSemanticsMode::OneHot, &mut rng);
        for ((i, j), &v) in a.indexed_iter() {
            assert_eq!(v != 0.0, i == j);
        }
    }

    #[test]
    fn random_orthogonal_gram_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [4, 12, 31] {
            let a = attribute_semantics(k, AttributeSemanticsMode::RandomOrthogonal, &mut rng);
            let g = a.dot(&a.t());
            for ((i, j), &v) in g.indexed_iter() {
                if i != j {
                    assert!(v.abs() < 1e-6, "off-diagonal {v}");
                }
            }
        }
    }

    #[test]
    fn zero_row_rejected() {
        let cs = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(SemanticsTable::one_hot(cs).is_err());
    }

    #[test]
    fn readout_targets_rescale_over_seen() {
        let cs = array![[0.2, 1.0], [0.6, 1.0], [1.0, 0.5]];
        let t = readout_targets(&cs, &[0, 1]);
        assert!((t[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((t[[1, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(t[[2, 0]], 1.0);
        assert_eq!(t[[0, 1]], 1.0);
        assert_eq!(t[[2, 1]], 0.5);
    }

    #[test]
    fn row_l2_normalization() {
        let cs = array![[3.0, 4.0]];
        let n = SemanticsNormalization::RowL2.apply(&cs);
        assert!((n[[0, 0]] - 0.6).abs() < 1e-12);
    }
}
