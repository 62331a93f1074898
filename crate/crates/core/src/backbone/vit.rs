//! Pre-norm transformer backbone over non-overlapping patches.
//!
//! Tokens are `[CLS]` followed by the `P` patch embeddings in row-major grid
//! order. The final `[CLS]` token is the class feature; the patch tokens form
//! the feature grid, and a position-wise linear map gives the `K` attention maps.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BundleGrad, FeatureBundle, InputSpec};
use crate::error::{Error, Result};
use crate::ops::linear;
use crate::params::{Param, ParamKind, ParamStore};
use crate::prototype::linear_step;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    /// Patch side `Q`.
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VitBackbone {
    config: VitConfig,
    input: InputSpec,
    grid: (usize, usize),
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    a: Array2<f64>,
    ln1: LnCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    m: Array2<f64>,
    ln2: LnCache,
    u: Array2<f64>,
    h: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct VitCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
}

fn layer_norm(x: ArrayView2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / n;
    let centered = &x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let mut y = &xhat * &g;
    y += &b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)`.
fn layer_norm_backward(c: &LnCache, g: ArrayView1<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dg = (&dy * &c.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = &dy * &g;
    let n = dy.ncols() as f64;
    let mean_d = (dxhat.sum_axis(Axis(1)) / n).insert_axis(Axis(1));
    let mean_dx = ((&dxhat * &c.xhat).sum_axis(Axis(1)) / n).insert_axis(Axis(1));
    let dx = (dxhat - &mean_d - &(&c.xhat * &mean_dx)) * &c.inv_std.view().insert_axis(Axis(1));
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

fn dense(params: &ParamStore, layer: &str, x: ArrayView2<f64>) -> Array2<f64> {
    linear(
        x,
        params[&*format!("{layer}.w")].view2(),
        params[&*format!("{layer}.b")].view1(),
    )
}

fn block_name(l: usize, part: &str) -> String {
    format!("backbone.block{l}.{part}")
}

/// Splits an `H × W × C` image into `Q × Q` patches: row `gy * gw + gx`, column `(py * Q + px) * C + c`.
pub fn patchify(image: ArrayView3<f64>, q: usize) -> Array2<f64> {
    let (h, w, c) = image.dim();
    let (gh, gw) = (h / q, w / q);
    let mut out = Array2::zeros((gh * gw, q * q * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            for py in 0..q {
                for px in 0..q {
                    for ch in 0..c {
                        row[(py * q + px) * c + ch] = image[[gy * q + py, gx * q + px, ch]];
                    }
                }
            }
        }
    }
    out
}

impl VitBackbone {
    pub fn new(config: VitConfig, input: InputSpec) -> Result<VitBackbone> {
        let q = config.patch_size;
        if q == 0 || input.height % q != 0 || input.width % q != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {q}",
                input.height, input.width
            )));
        }
        if config.dim == 0 || config.depth == 0 || config.mlp_ratio == 0 {
            return Err(Error::Config("vit dim, depth and mlp_ratio must be positive".into()));
        }
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "vit dim {} is not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let grid = (input.height / q, input.width / q);
        Ok(VitBackbone { config, input, grid })
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Number of patch tokens `P` (excluding `[CLS]`).
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.config.dim;
        let hidden = c * self.config.mlp_ratio;
        let pd = self.config.patch_size * self.config.patch_size * self.input.channels;
        let k = self.input.num_attributes;
        let t = self.num_patches() + 1;
        store.insert("backbone.patch.w", Param::lecun_uniform(&[pd, c], pd, rng));
        store.insert("backbone.patch.b", Param::zeros(&[c], ParamKind::Bias));
        store.insert("backbone.cls", Param::normal(&[c], ParamKind::Norm, 0.02, rng));
        store.insert("backbone.pos", Param::normal(&[t, c], ParamKind::Norm, 0.02, rng));
        for l in 0..self.config.depth {
            for ln in ["ln1", "ln2"] {
                store.insert(block_name(l, &format!("{ln}.g")), Param::filled(&[c], ParamKind::Norm, 1.0));
                store.insert(block_name(l, &format!("{ln}.b")), Param::zeros(&[c], ParamKind::Norm));
            }
            let layers = [("attn.qkv", c, 3 * c), ("attn.out", c, c), ("mlp.fc1", c, hidden), ("mlp.fc2", hidden, c)];
            for (layer, fan_in, fan_out) in layers {
                store.insert(block_name(l, &format!("{layer}.w")), Param::lecun_uniform(&[fan_in, fan_out], fan_in, rng));
                store.insert(block_name(l, &format!("{layer}.b")), Param::zeros(&[fan_out], ParamKind::Bias));
            }
        }
        store.insert("backbone.attn_map.w", Param::lecun_uniform(&[c, k], c, rng));
        store.insert("backbone.attn_map.b", Param::zeros(&[k], ParamKind::Bias));
    }

    fn block_forward(&self, params: &ParamStore, l: usize, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let c = self.config.dim;
        let heads = self.config.heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = layer_norm(
            x.view(),
            params[&*block_name(l, "ln1.g")].view1(),
            params[&*block_name(l, "ln1.b")].view1(),
        );
        let qkv = dense(params, &block_name(l, "attn.qkv"), a.view());
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![.., c + hd * dh..c + (hd + 1) * dh]);
            let v = qkv.slice(s![.., 2 * c + hd * dh..2 * c + (hd + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            softmax_rows(&mut p);
            ctx.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let x1 = x + dense(params, &block_name(l, "attn.out"), ctx.view());
        let (m, ln2) = layer_norm(
            x1.view(),
            params[&*block_name(l, "ln2.g")].view1(),
            params[&*block_name(l, "ln2.b")].view1(),
        );
        let u = dense(params, &block_name(l, "mlp.fc1"), m.view());
        let h = u.mapv(gelu);
        let x2 = &x1 + &dense(params, &block_name(l, "mlp.fc2"), h.view());
        (
            x2,
            BlockCache {
                a,
                ln1,
                qkv,
                probs,
                ctx,
                m,
                ln2,
                u,
                h,
            },
        )
    }

    fn block_backward(&self, params: &ParamStore, l: usize, c: &BlockCache, d_x2: Array2<f64>, grads: &mut ParamStore) -> Array2<f64> {
        let dim = self.config.dim;
        let dh = dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut d_x1 = d_x2.clone();
        let d_h = linear_step(params, grads, &block_name(l, "mlp.fc2"), c.h.view(), d_x2.view());
        let mut d_u = d_h;
        d_u.zip_mut_with(&c.u, |d, &u| *d *= gelu_grad(u));
        let d_m = linear_step(params, grads, &block_name(l, "mlp.fc1"), c.m.view(), d_u.view());
        let (d_ln2, dg, db) = layer_norm_backward(&c.ln2, params[&*block_name(l, "ln2.g")].view1(), d_m.view());
        grads.accumulate(&block_name(l, "ln2.g"), dg.iter());
        grads.accumulate(&block_name(l, "ln2.b"), db.iter());
        d_x1 += &d_ln2;

        let d_ctx = linear_step(params, grads, &block_name(l, "attn.out"), c.ctx.view(), d_x1.view());
        let mut d_qkv = Array2::zeros(c.qkv.raw_dim());
        for (hd, p) in c.probs.iter().enumerate() {
            let (qs, ks, vs) = (hd * dh, dim + hd * dh, 2 * dim + hd * dh);
            let q = c.qkv.slice(s![.., qs..qs + dh]);
            let k = c.qkv.slice(s![.., ks..ks + dh]);
            let v = c.qkv.slice(s![.., vs..vs + dh]);
            let d_o = d_ctx.slice(s![.., hd * dh..(hd + 1) * dh]);
            let d_p = d_o.dot(&v.t());
            d_qkv.slice_mut(s![.., vs..vs + dh]).assign(&p.t().dot(&d_o));
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_s = (d_p - &row_dot) * p * scale;
            d_qkv.slice_mut(s![.., qs..qs + dh]).assign(&d_s.dot(&k));
            d_qkv.slice_mut(s![.., ks..ks + dh]).assign(&d_s.t().dot(&q));
        }
        let d_a = linear_step(params, grads, &block_name(l, "attn.qkv"), c.a.view(), d_qkv.view());
        let (d_ln1, dg, db) = layer_norm_backward(&c.ln1, params[&*block_name(l, "ln1.g")].view1(), d_a.view());
        grads.accumulate(&block_name(l, "ln1.g"), dg.iter());
        grads.accumulate(&block_name(l, "ln1.b"), db.iter());
        d_x1 + d_ln1
    }

    /// Token matrix `[CLS; patch embeddings] + positions` before the first block.
    fn embed(&self, params: &ParamStore, patches: ArrayView2<f64>) -> Array2<f64> {
        let e = dense(params, "backbone.patch", patches);
        let mut x = Array2::zeros((e.nrows() + 1, self.config.dim));
        x.row_mut(0).assign(&params["backbone.cls"].view1());
        x.slice_mut(s![1.., ..]).assign(&e);
        x += &params["backbone.pos"].view2();
        x
    }

    pub fn forward(&self, params: &ParamStore, image: ArrayView3<f32>) -> (FeatureBundle, VitCache) {
        let patches = patchify(image.mapv(f64::from).view(), self.config.patch_size);
        let mut x = self.embed(params, patches.view());
        let mut blocks = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            let (next, cache) = self.block_forward(params, l, x);
            x = next;
            blocks.push(cache);
        }
        let cf = x.row(0).to_owned();
        let features = x.slice(s![1.., ..]).to_owned();
        let am = dense(params, "backbone.attn_map", features.view());
        (
            FeatureBundle::assemble(self.grid, features, am, cf),
            VitCache { patches, blocks },
        )
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        bundle: &FeatureBundle,
        cache: &VitCache,
        grad: &BundleGrad,
        grads: &mut ParamStore,
    ) {
        let (mut d_f, d_am) = bundle.pool_backward(grad);
        d_f += &linear_step(params, grads, "backbone.attn_map", bundle.features.view(), d_am.view());
        let mut d_x = Array2::zeros((d_f.nrows() + 1, self.config.dim));
        d_x.row_mut(0).assign(&grad.class_feature);
        d_x.slice_mut(s![1.., ..]).assign(&d_f);
        for l in (0..self.config.depth).rev() {
            d_x = self.block_backward(params, l, &cache.blocks[l], d_x, grads);
        }
        grads.accumulate("backbone.pos", d_x.iter());
        grads.accumulate("backbone.cls", d_x.row(0).iter());
        let d_e = d_x.slice(s![1.., ..]);
        grads.accumulate("backbone.patch.w", cache.patches.t().dot(&d_e).iter());
        grads.accumulate("backbone.patch.b", d_e.sum_axis(Axis(0)).iter());
    }
}
