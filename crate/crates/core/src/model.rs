//! Backbone plus prototype network: the complete trainable model.

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, FeatureBundle, InputSpec};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, BatchTargets, LossConfig, LossParts};
use crate::parallel::map_ordered;
use crate::params::ParamStore;
use crate::prototype::{PrototypeNet, PrototypeNetConfig, PrototypeVariant, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden width of the prototype network.
    pub hidden_size: usize,
    pub variant: PrototypeVariant,
    pub class_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            hidden_size: 1024,
            variant: PrototypeVariant::SharedBranched,
            class_norm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub prototypes: PrototypeNet,
    /// `K × K` attribute semantics fed to the attribute branch.
    pub attribute_semantics: Array2<f64>,
}

/// One training batch in model terms.
pub struct TrainBatch<'a> {
    pub images: Vec<ArrayView3<'a, f32>>,
    /// Row indices into `class_semantics`.
    pub labels: Vec<usize>,
    pub class_semantics: ArrayView2<'a, f64>,
    /// Readout target of each image, `B × K`.
    pub readout_targets: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub parts: LossParts,
    pub total: f64,
    pub num_eligible: usize,
}

impl Model {
    pub fn new(config: ModelConfig, input: InputSpec, attribute_semantics: Array2<f64>) -> Result<Model> {
        let k = input.num_attributes;
        if attribute_semantics.dim() != (k, k) {
            return Err(Error::Shape(format!(
                "attribute semantics are {:?}, expected {k}x{k}",
                attribute_semantics.dim()
            )));
        }
        if config.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        let backbone = Backbone::new(&config.backbone, input)?;
        let prototypes = PrototypeNet::new(PrototypeNetConfig {
            semantic_dim: k,
            hidden_size: config.hidden_size,
            output_dim: backbone.feature_dim(),
            variant: config.variant,
            class_norm: config.class_norm,
        });
        Ok(Model {
            config,
            backbone,
            prototypes,
            attribute_semantics,
        })
    }

    pub fn input(&self) -> InputSpec {
        self.backbone.input()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone.init_params(&mut store, rng);
        self.prototypes.init_params(&mut store, rng);
        store
    }

    pub fn extract(&self, params: &ParamStore, image: ArrayView3<f32>) -> Result<FeatureBundle> {
        self.backbone.extract(params, image)
    }

    /// Class prototypes for the given semantics rows (class normalization over exactly these rows).
    pub fn class_prototypes(&self, params: &ParamStore, class_semantics: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.prototypes.forward_role(params, Role::Class, class_semantics)
    }

    pub fn attribute_prototypes(&self, params: &ParamStore) -> Result<Array2<f64>> {
        self.prototypes
            .forward_role(params, Role::Attribute, self.attribute_semantics.view())
    }

    /// Forward passes for a batch of images, in input order.
    pub fn forward_batch(
        &self,
        params: &ParamStore,
        images: &[ArrayView3<f32>],
        threads: usize,
    ) -> Result<Vec<(FeatureBundle, BackboneCache)>> {
        map_ordered(images, threads, |img| self.backbone.forward(params, *img))
            .into_iter()
            .collect()
    }

    /// Weighted objective and its gradient w.r.t. every parameter. With
    /// `backbone_grads == false` the backbone entries of the gradient stay zero.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        batch: &TrainBatch<'_>,
        loss: &LossConfig,
        peak_threshold: f64,
        backbone_grads: bool,
        threads: usize,
    ) -> Result<(StepLoss, ParamStore)> {
        let (protos, pcache) = self.prototypes.forward(
            params,
            batch.class_semantics,
            self.attribute_semantics.view(),
        )?;
        let forwards = self.forward_batch(params, &batch.images, threads)?;
        let (bundles, caches): (Vec<_>, Vec<_>) = forwards.into_iter().unzip();
        let targets = BatchTargets {
            labels: &batch.labels,
            class_prototypes: protos.class_prototypes.view(),
            attribute_prototypes: protos.attribute_prototypes.view(),
            readout_targets: batch.readout_targets.view(),
        };
        let out = batch_objective(&bundles, &targets, loss, peak_threshold)?;
        let mut grads = params.zeros_like();
        self.prototypes.backward(
            params,
            &pcache,
            out.grads.class_prototypes.view(),
            out.grads.attribute_prototypes.view(),
            &mut grads,
        );
        if backbone_grads {
            let jobs: Vec<usize> = (0..bundles.len()).collect();
            let partials = map_ordered(&jobs, threads, |&i| {
                let mut g = params.zeros_like();
                self.backbone
                    .backward(params, &bundles[i], &caches[i], &out.grads.bundles[i], &mut g);
                g
            });
            for g in &partials {
                grads.add_assign(g);
            }
        }
        Ok((
            StepLoss {
                parts: out.parts,
                total: out.total,
                num_eligible: out.num_eligible,
            },
            grads,
        ))
    }
}
