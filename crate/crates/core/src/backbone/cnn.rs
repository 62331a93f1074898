//! Convolutional backbone with multi-scale attention projections.
//!
//! Stage `s` is conv3×3 → ReLU, followed by 2×2 average pooling on every stage
//! except the last. Each stage output is projected to `K` attention channels by
//! a 1×1 convolution, resized bilinearly to the last stage's grid and summed.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, conv3x3_weight_grads, resize_operator};
use super::{BundleGrad, FeatureBundle, InputSpec};
use crate::error::{Error, Result};
use crate::params::{Param, ParamKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    /// Output channels of each stage.
    pub channels: Vec<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: vec![16, 32, 48, 64],
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    in_channels: usize,
    out_channels: usize,
    /// Spatial size of the stage output.
    out_hw: (usize, usize),
    pool: bool,
    /// Resize from this stage's grid to the final grid; `None` when they coincide.
    resize: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct CnnBackbone {
    config: CnnConfig,
    input: InputSpec,
    stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
struct StageCache {
    input: Array3<f64>,
    act: Array3<f64>,
    pooled: Option<Array3<f64>>,
}

impl StageCache {
    fn output(&self) -> &Array3<f64> {
        self.pooled.as_ref().unwrap_or(&self.act)
    }
}

#[derive(Clone, Debug)]
pub struct CnnCache {
    stages: Vec<StageCache>,
}

fn name(stage: usize, part: &str) -> String {
    format!("backbone.stage{stage}.{part}")
}

impl CnnBackbone {
    pub fn new(config: CnnConfig, input: InputSpec) -> Result<CnnBackbone> {
        let n = config.channels.len();
        if n == 0 || config.channels.contains(&0) {
            return Err(Error::Config("cnn needs at least one stage and nonzero channel counts".into()));
        }
        let factor = 1usize << (n - 1);
        if input.height % factor != 0 || input.width % factor != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by {factor} for {n} stages",
                input.height, input.width
            )));
        }
        let grid = (input.height / factor, input.width / factor);
        let mut stages = Vec::with_capacity(n);
        let (mut h, mut w, mut cin) = (input.height, input.width, input.channels);
        for (i, &cout) in config.channels.iter().enumerate() {
            let pool = i + 1 < n;
            if pool {
                h /= 2;
                w /= 2;
            }
            stages.push(Stage {
                in_channels: cin,
                out_channels: cout,
                out_hw: (h, w),
                pool,
                resize: ((h, w) != grid).then(|| resize_operator((h, w), grid)),
            });
            cin = cout;
        }
        Ok(CnnBackbone { config, input, stages })
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.channels.last().expect("nonempty")
    }

    pub fn grid(&self) -> (usize, usize) {
        self.stages.last().expect("nonempty").out_hw
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let k = self.input.num_attributes;
        for (i, s) in self.stages.iter().enumerate() {
            let fan = 9 * s.in_channels;
            store.insert(name(i, "conv.w"), Param::he_uniform(&[fan, s.out_channels], fan, rng));
            store.insert(name(i, "conv.b"), Param::zeros(&[s.out_channels], ParamKind::Bias));
            store.insert(
                name(i, "attn.w"),
                Param::lecun_uniform(&[s.out_channels, k], s.out_channels, rng),
            );
            store.insert(name(i, "attn.b"), Param::zeros(&[k], ParamKind::Bias));
        }
    }

    pub fn forward(&self, params: &ParamStore, image: ArrayView3<f32>) -> (FeatureBundle, CnnCache) {
        let grid = self.grid();
        let k = self.input.num_attributes;
        let mut am = Array2::<f64>::zeros((grid.0 * grid.1, k));
        let mut x = image.mapv(f64::from);
        let mut caches = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let mut act = conv3x3(
                x.view(),
                params[&*name(i, "conv.w")].view2(),
                params[&*name(i, "conv.b")].view1(),
            );
            act.mapv_inplace(|v| v.max(0.0));
            let pooled = s.pool.then(|| avg_pool2(act.view()));
            let cache = StageCache { input: x, act, pooled };
            let out = cache.output();
            let flat = out.view().into_shape_with_order((s.out_hw.0 * s.out_hw.1, s.out_channels)).expect("contiguous");
            let mut proj = flat.dot(&params[&*name(i, "attn.w")].view2());
            proj += &params[&*name(i, "attn.b")].view1();
            match &s.resize {
                Some(r) => am += &r.dot(&proj),
                None => am += &proj,
            }
            x = out.clone();
            caches.push(cache);
        }
        let features = x
            .into_shape_with_order((grid.0 * grid.1, self.feature_dim()))
            .expect("contiguous");
        let cf = features.mean_axis(Axis(0)).expect("nonempty grid");
        (FeatureBundle::assemble(grid, features, am, cf), CnnCache { stages: caches })
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        bundle: &FeatureBundle,
        cache: &CnnCache,
        grad: &BundleGrad,
        grads: &mut ParamStore,
    ) {
        let (mut d_f, d_am) = bundle.pool_backward(grad);
        let hw = d_f.nrows() as f64;
        d_f += &(&grad.class_feature / hw);
        let last = self.stages.len() - 1;
        let mut d_out: Array3<f64> = d_f
            .into_shape_with_order((self.grid().0, self.grid().1, self.feature_dim()))
            .expect("contiguous");
        for i in (0..=last).rev() {
            let s = &self.stages[i];
            let c = &cache.stages[i];
            let (oh, ow) = s.out_hw;
            let out = c.output().view().into_shape_with_order((oh * ow, s.out_channels)).expect("contiguous");
            let d_proj = match &s.resize {
                Some(r) => r.t().dot(&d_am),
                None => d_am.clone(),
            };
            grads.accumulate(&name(i, "attn.w"), out.t().dot(&d_proj).iter());
            grads.accumulate(&name(i, "attn.b"), d_proj.sum_axis(Axis(0)).iter());
            let d_from_proj = d_proj.dot(&params[&*name(i, "attn.w")].view2().t());
            d_out += &d_from_proj.into_shape_with_order((oh, ow, s.out_channels)).expect("contiguous");
            let (ah, aw, _) = c.act.dim();
            let mut d_act = if s.pool {
                avg_pool2_backward(d_out.view(), ah, aw)
            } else {
                d_out
            };
            d_act.zip_mut_with(&c.act, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            if i == 0 {
                let (dw, db) = conv3x3_weight_grads(c.input.view(), d_act.view());
                grads.accumulate(&name(i, "conv.w"), dw.iter());
                grads.accumulate(&name(i, "conv.b"), db.iter());
                break;
            }
            let (dx, dw, db) = conv3x3_backward(c.input.view(), params[&*name(i, "conv.w")].view2(), d_act.view());
            grads.accumulate(&name(i, "conv.w"), dw.iter());
            grads.accumulate(&name(i, "conv.b"), db.iter());
            d_out = dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_backbone_fd, random_image};
    use super::super::{Backbone, BackboneConfig};
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(channels: Vec<usize>, size: usize, k: usize, seed: u64) -> (Backbone, ParamStore) {
        let input = InputSpec {
            height: size,
            width: size,
            channels: 3,
            num_attributes: k,
        };
        let b = Backbone::new(&BackboneConfig::Cnn(CnnConfig { channels }), input).unwrap();
        let mut p = ParamStore::new();
        b.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (b, p)
    }

    #[test]
    fn default_toy_shapes() {
        let (b, p) = build(vec![16, 32, 48, 64], 64, 12, 0);
        let out = b.extract(&p, random_image(64, 64, 3, 1).view()).unwrap();
        assert_eq!(out.grid, (8, 8));
        assert_eq!(out.features.dim(), (64, 64));
        assert_eq!(out.attention.dim(), (64, 12));
        assert_eq!(out.class_feature.len(), 64);
        assert_eq!(out.attribute_features.dim(), (12, 64));
        assert!(out.all_finite());
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_class_feature() {
        let (b, p) = build(vec![4, 6], 8, 3, 2);
        let out = b.extract(&p, Array3::<f32>::zeros((8, 8, 3)).view()).unwrap();
        assert!(out.class_feature.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let (b, p) = build(vec![4, 6], 8, 3, 2);
        assert!(b.extract(&p, Array3::<f32>::zeros((8, 4, 3)).view()).is_err());
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let input = InputSpec {
            height: 20,
            width: 20,
            channels: 3,
            num_attributes: 2,
        };
        assert!(CnnBackbone::new(CnnConfig::default(), input).is_err());
    }

    #[test]
    fn attribute_row_depends_only_on_its_channel() {
        let (b, mut p) = build(vec![3, 4], 8, 3, 5);
        let img = random_image(8, 8, 3, 6);
        let before = b.extract(&p, img.view()).unwrap();
        // Perturb only the projection column of attribute 1.
        let w = p.get_mut("backbone.stage1.attn.w");
        for r in 0..4 {
            w.data[r * 3 + 1] += 0.3;
        }
        let after = b.extract(&p, img.view()).unwrap();
        assert_eq!(before.attribute_features.row(0), after.attribute_features.row(0));
        assert_eq!(before.attribute_features.row(2), after.attribute_features.row(2));
        assert_ne!(before.attribute_features.row(1), after.attribute_features.row(1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..2 {
            let (b, mut p) = build(vec![3, 4, 5], 8, 3, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (_, q) in p.iter_mut().filter(|(_, q)| q.kind == ParamKind::Bias) {
                q.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
            check_backbone_fd(&b, &p, &random_image(8, 8, 3, 20 + seed), 30 + seed);
        }
    }
}
