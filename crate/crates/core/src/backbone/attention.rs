//! Attention-based attribute localization.
//!
//! Attention maps are stored position-major: an `HW × K` matrix whose column
//! `j` is the flattened map of attribute `j`. Features are `HW × C`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Softmax of every column over the `HW` positions.
pub fn softmax2d(am: ArrayView2<f64>) -> Array2<f64> {
    let mut out = am.to_owned();
    for mut col in out.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col /= s;
    }
    out
}

/// Backward of [`softmax2d`] given its output `w` and upstream `d_w`.
pub fn softmax2d_backward(w: ArrayView2<f64>, d_w: ArrayView2<f64>) -> Array2<f64> {
    let dots = (&w * &d_w).sum_axis(Axis(0));
    let mut out = d_w.to_owned();
    out -= &dots;
    out * &w
}

/// `af_j = GAP(softmax(am_j) ⊙ F)`: the attention-weighted sum of feature
/// rows divided by `HW`. Returns `K × C`.
pub fn attribute_pool(f: ArrayView2<f64>, am: ArrayView2<f64>) -> Array2<f64> {
    let w = softmax2d(am);
    pool_with_weights(f, w.view())
}

pub fn pool_with_weights(f: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let hw = f.nrows() as f64;
    w.t().dot(&f) / hw
}

/// Backward of [`attribute_pool`] given the softmaxed weights. Returns `(d_f, d_am)`.
pub fn attribute_pool_backward(
    f: ArrayView2<f64>,
    w: ArrayView2<f64>,
    d_af: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let hw = f.nrows() as f64;
    let d_f = w.dot(&d_af) / hw;
    let d_w = f.dot(&d_af.t()) / hw;
    let d_am = softmax2d_backward(w, d_w.view());
    (d_f, d_am)
}

/// `cs^e_j = max over positions of softmax(am_j)`.
pub fn semantic_readout(am: ArrayView2<f64>) -> Array1<f64> {
    readout_from_weights(softmax2d(am).view())
}

pub fn readout_from_weights(w: ArrayView2<f64>) -> Array1<f64> {
    w.columns().into_iter().map(|c| c.fold(0.0f64, |a, &b| a.max(b))).collect()
}

/// Backward of [`semantic_readout`]; the max routes to its first arg-max position.
pub fn semantic_readout_backward(w: ArrayView2<f64>, d_cs: ArrayView1<f64>) -> Array2<f64> {
    let mut d_w = Array2::zeros(w.raw_dim());
    for (j, col) in w.columns().into_iter().enumerate() {
        d_w[[argmax(col), j]] = d_cs[j];
    }
    softmax2d_backward(w, d_w.view())
}

/// Raw (pre-softmax) maximum of every attention channel.
pub fn raw_peaks(am: ArrayView2<f64>) -> Array1<f64> {
    am.columns()
        .into_iter()
        .map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect()
}

/// First index of the maximum.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
