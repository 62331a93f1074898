//! Small dense-math helpers shared by the networks and the losses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

/// Norm floor used by every cosine in the crate.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn is_zero(v: ArrayView1<f64>) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Cosine similarity with each norm floored at [`NORM_FLOOR`].
pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu = norm(u).max(NORM_FLOOR);
    let nv = norm(v).max(NORM_FLOOR);
    u.dot(&v) / (nu * nv)
}

/// Accumulates `g * d cos(u, v) / du` into `du` and `g * d cos / dv` into `dv`.
pub fn cosine_backward(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    g: f64,
    mut du: ArrayViewMut1<f64>,
    mut dv: ArrayViewMut1<f64>,
) {
    if g == 0.0 {
        return;
    }
    let (du_, dv_) = cosine_grads(u, v);
    du.scaled_add(g, &du_);
    dv.scaled_add(g, &dv_);
}

/// Returns `(d cos / du, d cos / dv)`.
pub fn cosine_grads(u: ArrayView1<f64>, v: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let nu_raw = norm(u);
    let nv_raw = norm(v);
    let nu = nu_raw.max(NORM_FLOOR);
    let nv = nv_raw.max(NORM_FLOOR);
    let c = u.dot(&v) / (nu * nv);
    // Below the floor the norm is a constant, so its derivative vanishes.
    let su = if nu_raw > NORM_FLOOR { c / (nu * nu) } else { 0.0 };
    let sv = if nv_raw > NORM_FLOOR { c / (nv * nv) } else { 0.0 };
    let du = &v / (nu * nv) - &(&u * su);
    let dv = &u / (nu * nv) - &(&v * sv);
    (du, dv)
}

/// Row-wise cosine similarity between `a` (n×d) and `b` (m×d): an n×m matrix.
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na: Array1<f64> = a.rows().into_iter().map(|r| norm(r).max(NORM_FLOOR)).collect();
    let nb: Array1<f64> = b.rows().into_iter().map(|r| norm(r).max(NORM_FLOOR)).collect();
    let mut dots = a.dot(&b.t());
    for ((i, j), v) in dots.indexed_iter_mut() {
        *v /= na[i] * nb[j];
    }
    dots
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let m = xs.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = xs.mapv(|x| (x - m).exp());
    let s = e.sum();
    e /= s;
    e
}

/// `x W + b` for row-major batches; `w` is `in × out`.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Backward of [`linear`]: returns `(dx, dw, db)`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(&dy), dy.sum_axis(Axis(0)))
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a rectifier given its *output*.
pub fn relu_backward(out: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_grads_match_finite_differences() {
        let u = array![0.3, -1.2, 0.7];
        let v = array![1.1, 0.4, -0.5];
        let (du, dv) = cosine_grads(u.view(), v.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (cosine(up.view(), v.view()) - cosine(um.view(), v.view())) / (2.0 * h);
            assert!((fd - du[i]).abs() < 1e-8);
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let fd = (cosine(u.view(), vp.view()) - cosine(u.view(), vm.view())) / (2.0 * h);
            assert!((fd - dv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let z = array![0.0, 0.0];
        let v = array![1.0, 2.0];
        assert_eq!(cosine(z.view(), v.view()), 0.0);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
