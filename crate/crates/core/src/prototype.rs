//! Prototype generation: maps class semantics (M×K) and attribute semantics
//! (K×K) to visual-space prototypes (M×C and K×C).
//!
//! Shared trunk: FC → ReLU → FC. Each branch: CN → CN → ReLU → FC → ReLU,
//! where CN standardizes every column over the rows of the current input
//! (no affine transform, no running statistics).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{linear, linear_backward, relu, relu_backward};
use crate::params::{Param, ParamKind, ParamStore};

pub const CN_EPS: f64 = 1e-5;

/// Structural variants of the prototype module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeVariant {
    /// Shared trunk, separate class and attribute branches.
    #[default]
    SharedBranched,
    /// Two independent trunk+branch stacks.
    FullySeparate,
    /// One trunk and one branch used for both inputs.
    FullyShared,
}

impl std::str::FromStr for PrototypeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-branched" => Ok(Self::SharedBranched),
            "fully-separate" => Ok(Self::FullySeparate),
            "fully-shared" => Ok(Self::FullyShared),
            other => Err(Error::Config(format!("unknown prototype variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeNetConfig {
    pub semantic_dim: usize,
    pub hidden_size: usize,
    pub output_dim: usize,
    pub variant: PrototypeVariant,
    pub class_norm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// M×C.
    pub class_prototypes: Array2<f64>,
    /// K×C.
    pub attribute_prototypes: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Class,
    Attribute,
}

/// Column standardization over rows with population variance.
pub fn class_normalize(x: ArrayView2<f64>) -> Array2<f64> {
    ClassNorm::forward(x).y
}

#[derive(Clone, Debug)]
pub struct ClassNorm {
    pub y: Array2<f64>,
    inv_std: Array1<f64>,
}

impl ClassNorm {
    pub fn forward(x: ArrayView2<f64>) -> ClassNorm {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + CN_EPS).sqrt());
        ClassNorm {
            y: centered * &inv_std,
            inv_std,
        }
    }

    /// dx = inv_std * (dy - mean(dy) - y * mean(dy * y)), column-wise.
    pub fn backward(&self, dy: ArrayView2<f64>) -> Array2<f64> {
        let n = dy.nrows() as f64;
        let mean_dy = dy.sum_axis(Axis(0)) / n;
        let mean_dy_y = (&dy * &self.y).sum_axis(Axis(0)) / n;
        let mut dx = &dy - &mean_dy;
        dx -= &(&self.y * &mean_dy_y);
        dx * &self.inv_std
    }
}

#[derive(Clone, Debug)]
pub struct StackCache {
    x: Array2<f64>,
    h1: Array2<f64>,
    norms: Vec<ClassNorm>,
    r: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct PrototypeCache {
    class: StackCache,
    attribute: StackCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeNet {
    pub config: PrototypeNetConfig,
    prefix: String,
}

impl PrototypeNet {
    pub fn new(config: PrototypeNetConfig) -> Self {
        PrototypeNet {
            config,
            prefix: "proto".into(),
        }
    }

    fn trunk(&self, role: Role) -> String {
        match (self.config.variant, role) {
            (PrototypeVariant::FullySeparate, Role::Class) => format!("{}.class_trunk", self.prefix),
            (PrototypeVariant::FullySeparate, Role::Attribute) => format!("{}.attr_trunk", self.prefix),
            _ => format!("{}.trunk", self.prefix),
        }
    }

    fn branch(&self, role: Role) -> String {
        match (self.config.variant, role) {
            (PrototypeVariant::FullyShared, _) => format!("{}.branch", self.prefix),
            (_, Role::Class) => format!("{}.class_branch", self.prefix),
            (_, Role::Attribute) => format!("{}.attr_branch", self.prefix),
        }
    }

    fn stacks(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for role in [Role::Class, Role::Attribute] {
            let pair = (self.trunk(role), self.branch(role));
            if !out.contains(&pair) {
                out.push(pair);
            }
        }
        out
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let PrototypeNetConfig {
            semantic_dim: k,
            hidden_size: h,
            output_dim: c,
            ..
        } = self.config;
        let mut trunks = Vec::new();
        let mut branches = Vec::new();
        for (t, b) in self.stacks() {
            if !trunks.contains(&t) {
                store.insert(format!("{t}.fc1.w"), Param::he_uniform(&[k, h], k, rng));
                store.insert(format!("{t}.fc1.b"), Param::zeros(&[h], ParamKind::Bias));
                store.insert(format!("{t}.fc2.w"), Param::he_uniform(&[h, h], h, rng));
                store.insert(format!("{t}.fc2.b"), Param::zeros(&[h], ParamKind::Bias));
                trunks.push(t);
            }
            if !branches.contains(&b) {
                store.insert(format!("{b}.fc.w"), Param::he_uniform(&[h, c], h, rng));
                store.insert(format!("{b}.fc.b"), Param::zeros(&[c], ParamKind::Bias));
                branches.push(b);
            }
        }
    }

    fn forward_stack(&self, params: &ParamStore, role: Role, x: ArrayView2<f64>) -> Result<StackCache> {
        if x.ncols() != self.config.semantic_dim {
            return Err(Error::Shape(format!(
                "semantics have {} columns, prototype net expects {}",
                x.ncols(),
                self.config.semantic_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty semantics batch".into()));
        }
        let t = self.trunk(role);
        let b = self.branch(role);
        let h1 = relu(&linear(
            x,
            params[&*format!("{t}.fc1.w")].view2(),
            params[&*format!("{t}.fc1.b")].view1(),
        ));
        let mut z = linear(
            h1.view(),
            params[&*format!("{t}.fc2.w")].view2(),
            params[&*format!("{t}.fc2.b")].view1(),
        );
        let mut norms = Vec::new();
        if self.config.class_norm {
            for _ in 0..2 {
                let cn = ClassNorm::forward(z.view());
                z = cn.y.clone();
                norms.push(cn);
            }
        }
        let r = relu(&z);
        let out = relu(&linear(
            r.view(),
            params[&*format!("{b}.fc.w")].view2(),
            params[&*format!("{b}.fc.b")].view1(),
        ));
        Ok(StackCache {
            x: x.to_owned(),
            h1,
            norms,
            r,
            out,
        })
    }

    fn backward_stack(&self, params: &ParamStore, role: Role, cache: &StackCache, d_out: ArrayView2<f64>, grads: &mut ParamStore) {
        let t = self.trunk(role);
        let b = self.branch(role);
        let d_a3 = relu_backward(&cache.out, &d_out.to_owned());
        let d_r = linear_step(params, grads, &format!("{b}.fc"), cache.r.view(), d_a3.view());
        let mut d_z = relu_backward(&cache.r, &d_r);
        for cn in cache.norms.iter().rev() {
            d_z = cn.backward(d_z.view());
        }
        let d_h1 = linear_step(params, grads, &format!("{t}.fc2"), cache.h1.view(), d_z.view());
        let d_a1 = relu_backward(&cache.h1, &d_h1);
        linear_step(params, grads, &format!("{t}.fc1"), cache.x.view(), d_a1.view());
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        class_semantics: ArrayView2<f64>,
        attribute_semantics: ArrayView2<f64>,
    ) -> Result<(PrototypeSet, PrototypeCache)> {
        let class = self.forward_stack(params, Role::Class, class_semantics)?;
        let attribute = self.forward_stack(params, Role::Attribute, attribute_semantics)?;
        let set = PrototypeSet {
            class_prototypes: class.out.clone(),
            attribute_prototypes: attribute.out.clone(),
        };
        Ok((set, PrototypeCache { class, attribute }))
    }

    /// Forward pass for one role only (e.g. evaluation prototypes).
    pub fn forward_role(&self, params: &ParamStore, role: Role, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_stack(params, role, input)?.out)
    }

    /// Accumulates parameter gradients for upstream gradients on CP and AP.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &PrototypeCache,
        d_class: ArrayView2<f64>,
        d_attribute: ArrayView2<f64>,
        grads: &mut ParamStore,
    ) {
        self.backward_stack(params, Role::Class, &cache.class, d_class, grads);
        self.backward_stack(params, Role::Attribute, &cache.attribute, d_attribute, grads);
    }
}

/// Backward through `{layer}.w` / `{layer}.b`, accumulating into `grads`.
pub(crate) fn linear_step(
    params: &ParamStore,
    grads: &mut ParamStore,
    layer: &str,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let w = format!("{layer}.w");
    let (dx, dw, db) = linear_backward(x, params[&*w].view2(), dy);
    grads.accumulate(&w, dw.iter());
    grads.accumulate(&format!("{layer}.b"), db.iter());
    dx
}
