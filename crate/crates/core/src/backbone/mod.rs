//! Feature extractors producing class features, attribute features and attention maps.

pub mod attention;
mod cnn;
pub mod layers;
mod vit;

use ndarray::{Array1, Array2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub use cnn::{CnnBackbone, CnnCache, CnnConfig};
pub use vit::{VitBackbone, VitCache, VitConfig};

use attention::{attribute_pool_backward, pool_with_weights, softmax2d};

/// Shape of the images and attribute vocabulary a backbone is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_attributes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Cnn(CnnConfig),
    Vit(VitConfig),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Cnn(CnnConfig::default())
    }
}

/// Per-image outputs. Spatial tensors are flattened position-major (`HW × ·`).
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub grid: (usize, usize),
    /// `F`, `HW × C`.
    pub features: Array2<f64>,
    /// Raw attention maps `AM`, `HW × K`.
    pub attention: Array2<f64>,
    /// Per-channel softmax of `attention`.
    pub attention_weights: Array2<f64>,
    pub class_feature: Array1<f64>,
    /// `AF`, `K × C`.
    pub attribute_features: Array2<f64>,
}

impl FeatureBundle {
    pub(crate) fn assemble(
        grid: (usize, usize),
        features: Array2<f64>,
        attention: Array2<f64>,
        class_feature: Array1<f64>,
    ) -> FeatureBundle {
        let attention_weights = softmax2d(attention.view());
        let attribute_features = pool_with_weights(features.view(), attention_weights.view());
        FeatureBundle {
            grid,
            features,
            attention,
            attention_weights,
            class_feature,
            attribute_features,
        }
    }

    /// Backward through attribute pooling: `(d_features, d_attention)` excluding the class-feature path.
    pub(crate) fn pool_backward(&self, grad: &BundleGrad) -> (Array2<f64>, Array2<f64>) {
        let (d_f, mut d_am) = attribute_pool_backward(
            self.features.view(),
            self.attention_weights.view(),
            grad.attribute_features.view(),
        );
        d_am += &grad.attention;
        (d_f, d_am)
    }

    pub fn all_finite(&self) -> bool {
        self.features.iter().all(|v| v.is_finite())
            && self.attention.iter().all(|v| v.is_finite())
            && self.class_feature.iter().all(|v| v.is_finite())
    }
}

/// Upstream gradients on a [`FeatureBundle`].
#[derive(Clone, Debug)]
pub struct BundleGrad {
    pub class_feature: Array1<f64>,
    pub attribute_features: Array2<f64>,
    /// Direct gradient on the raw attention maps (semantic readout path).
    pub attention: Array2<f64>,
}

impl BundleGrad {
    pub fn zeros(bundle: &FeatureBundle) -> BundleGrad {
        BundleGrad {
            class_feature: Array1::zeros(bundle.class_feature.len()),
            attribute_features: Array2::zeros(bundle.attribute_features.raw_dim()),
            attention: Array2::zeros(bundle.attention.raw_dim()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Cnn(CnnBackbone),
    Vit(VitBackbone),
}

#[derive(Clone, Debug)]
pub enum BackboneCache {
    Cnn(CnnCache),
    Vit(VitCache),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, input: InputSpec) -> Result<Backbone> {
        if input.num_attributes == 0 || input.channels == 0 {
            return Err(Error::Config("backbone needs at least one attribute and one channel".into()));
        }
        Ok(match config {
            BackboneConfig::Cnn(c) => Backbone::Cnn(CnnBackbone::new(c.clone(), input)?),
            BackboneConfig::Vit(c) => Backbone::Vit(VitBackbone::new(c.clone(), input)?),
        })
    }

    pub fn input(&self) -> InputSpec {
        match self {
            Backbone::Cnn(b) => b.input(),
            Backbone::Vit(b) => b.input(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Cnn(b) => b.feature_dim(),
            Backbone::Vit(b) => b.feature_dim(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            Backbone::Cnn(b) => b.grid(),
            Backbone::Vit(b) => b.grid(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Backbone::Cnn(b) => b.init_params(store, rng),
            Backbone::Vit(b) => b.init_params(store, rng),
        }
    }

    pub fn forward(&self, params: &ParamStore, image: ArrayView3<f32>) -> Result<(FeatureBundle, BackboneCache)> {
        self.check_image(image)?;
        Ok(match self {
            Backbone::Cnn(b) => {
                let (bundle, cache) = b.forward(params, image);
                (bundle, BackboneCache::Cnn(cache))
            }
            Backbone::Vit(b) => {
                let (bundle, cache) = b.forward(params, image);
                (bundle, BackboneCache::Vit(cache))
            }
        })
    }

    pub fn extract(&self, params: &ParamStore, image: ArrayView3<f32>) -> Result<FeatureBundle> {
        Ok(self.forward(params, image)?.0)
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn backward(
        &self,
        params: &ParamStore,
        bundle: &FeatureBundle,
        cache: &BackboneCache,
        grad: &BundleGrad,
        grads: &mut ParamStore,
    ) {
        match (self, cache) {
            (Backbone::Cnn(b), BackboneCache::Cnn(c)) => b.backward(params, bundle, c, grad, grads),
            (Backbone::Vit(b), BackboneCache::Vit(c)) => b.backward(params, bundle, c, grad, grads),
            _ => panic!("backbone cache does not match backbone kind"),
        }
    }

    fn check_image(&self, image: ArrayView3<f32>) -> Result<()> {
        let s = self.input();
        if image.dim() != (s.height, s.width, s.channels) {
            return Err(Error::Shape(format!(
                "image is {:?}, backbone expects {:?}",
                image.dim(),
                (s.height, s.width, s.channels)
            )));
        }
        Ok(())
    }
}
