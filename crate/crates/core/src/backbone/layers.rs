//! Convolution, pooling and resizing on channels-last `H × W × C` maps.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

/// 3×3 patches with zero padding: `HW × 9C`, column `(ky * 3 + kx) * C + c`.
pub fn im2col3x3(x: ArrayView3<f64>) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0; h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * 9 * c..][..9 * c];
            for (ky, sy) in window(y, h) {
                for (kx, sx) in window(xx, w) {
                    let base = (ky * 3 + kx) * c;
                    let from = (sy * w + sx) * c;
                    row[base..base + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((h * w, 9 * c), cols).expect("shape")
}

/// In-bounds `(kernel offset, source index)` pairs of a 3-tap window centred at `i`.
fn window(i: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).filter_map(move |k| {
        let s = (i + k).checked_sub(1)?;
        (s < n).then_some((k, s))
    })
}

/// Scatter-add inverse of [`im2col3x3`].
pub fn col2im3x3(cols: ArrayView2<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &src[(y * w + xx) * 9 * c..][..9 * c];
            for (ky, sy) in window(y, h) {
                for (kx, sx) in window(xx, w) {
                    let base = (ky * 3 + kx) * c;
                    let to = (sy * w + sx) * c;
                    out[to..to + c].iter_mut().zip(&row[base..base + c]).for_each(|(o, v)| *o += v);
                }
            }
        }
    }
    Array3::from_shape_vec((h, w, c), out).expect("shape")
}

/// Same-padded 3×3 convolution; `w` is `9·Cin × Cout`.
pub fn conv3x3(x: ArrayView3<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    let (h, wd, _) = x.dim();
    let mut y = im2col3x3(x).dot(&w);
    y += &b;
    y.into_shape_with_order((h, wd, b.len())).expect("contiguous")
}

/// Returns `(dx, dw, db)`.
pub fn conv3x3_backward(
    x: ArrayView3<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView3<f64>,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (h, wd, c) = x.dim();
    let cout = dy.dim().2;
    let dy2 = dy.to_shape((h * wd, cout)).expect("reshape");
    let cols = im2col3x3(x);
    let dw = cols.t().dot(&dy2);
    let db = dy2.sum_axis(Axis(0));
    let dcols = dy2.dot(&w.t());
    (col2im3x3(dcols.view(), h, wd, c), dw, db)
}

/// Parameter gradients only, for a first layer whose input needs none.
pub fn conv3x3_weight_grads(x: ArrayView3<f64>, dy: ArrayView3<f64>) -> (Array2<f64>, Array1<f64>) {
    let (h, wd, _) = x.dim();
    let dy2 = dy.to_shape((h * wd, dy.dim().2)).expect("reshape");
    (im2col3x3(x).t().dot(&dy2), dy2.sum_axis(Axis(0)))
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2(x: ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for y in 0..oh {
        for xx in 0..ow {
            let mut dst = out.slice_mut(ndarray::s![y, xx, ..]);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dst += &x.slice(ndarray::s![2 * y + dy, 2 * xx + dx, ..]);
            }
            dst *= 0.25;
        }
    }
    out
}

pub fn avg_pool2_backward(dy: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow, c) = dy.dim();
    let mut dx = Array3::<f64>::zeros((h, w, c));
    for y in 0..oh {
        for xx in 0..ow {
            let g = dy.slice(ndarray::s![y, xx, ..]).mapv(|v| 0.25 * v);
            for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dx.slice_mut(ndarray::s![2 * y + oy, 2 * xx + ox, ..]).assign(&g);
            }
        }
    }
    dx
}

/// 1-D bilinear interpolation weights (`dst × src`), half-pixel centres.
pub fn interp_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Dense operator resizing a flattened `src_h·src_w` map to `dst_h·dst_w`.
pub fn resize_operator(src: (usize, usize), dst: (usize, usize)) -> Array2<f64> {
    let rh = interp_matrix(src.0, dst.0);
    let rw = interp_matrix(src.1, dst.1);
    let mut op = Array2::<f64>::zeros((dst.0 * dst.1, src.0 * src.1));
    for (ty, row_h) in rh.rows().into_iter().enumerate() {
        for (tx, row_w) in rw.rows().into_iter().enumerate() {
            let mut out = op.row_mut(ty * dst.1 + tx);
            for (sy, &a) in row_h.iter().enumerate().filter(|(_, a)| **a != 0.0) {
                for (sx, &b) in row_w.iter().enumerate().filter(|(_, b)| **b != 0.0) {
                    out[sy * src.1 + sx] += a * b;
                }
            }
        }
    }
    op
}

/// Bilinear resize of one flattened single-channel map to an image grid.
pub fn resize_map(map: ArrayView2<f64>, dst: (usize, usize)) -> Array2<f64> {
    let op = resize_operator(map.dim(), dst);
    let flat = map.to_shape(map.len()).expect("reshape");
    op.dot(&flat).into_shape_with_order(dst).expect("contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand3(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, c), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = rand3(5, 4, 2, 1);
        let wt = rand3(18, 3, 1, 2).into_shape_with_order((18, 3)).unwrap();
        let b = Array1::from(vec![0.1, -0.2, 0.3]);
        let y = conv3x3(x.view(), wt.view(), b.view());
        for oy in 0..5 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = b[co];
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (oy as i32 + ky - 1, ox as i32 + kx - 1);
                            if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[sy as usize, sx as usize, ci]] * wt[[((ky * 3 + kx) * 2) as usize + ci, co]];
                            }
                        }
                    }
                    assert!((acc - y[[oy, ox, co]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = rand3(4, 3, 2, 3);
        let wt = rand3(18, 2, 1, 4).into_shape_with_order((18, 2)).unwrap();
        let b = Array1::from(vec![0.05, -0.1]);
        let up = rand3(4, 3, 2, 5);
        let obj = |x: &Array3<f64>, w: &Array2<f64>| (conv3x3(x.view(), w.view(), b.view()) * &up).sum();
        let (dx, dw, db) = conv3x3_backward(x.view(), wt.view(), up.view());
        assert!((db[0] - up.index_axis(Axis(2), 0).sum()).abs() < 1e-12);
        let h = 1e-6;
        for (idx, _) in x.indexed_iter() {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (obj(&p, &wt) - obj(&m, &wt)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for (idx, _) in wt.indexed_iter() {
            let mut p = wt.clone();
            p[idx] += h;
            let mut m = wt.clone();
            m[idx] -= h;
            let fd = (obj(&x, &p) - obj(&x, &m)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let x = rand3(4, 6, 3, 6);
        let dy = rand3(2, 3, 3, 7);
        let lhs = (avg_pool2(x.view()) * &dy).sum();
        let rhs = (avg_pool2_backward(dy.view(), 4, 6) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn interp_rows_sum_to_one_and_identity_when_equal() {
        for (s, d) in [(32, 8), (8, 8), (4, 16), (5, 3)] {
            let m = interp_matrix(s, d);
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(interp_matrix(6, 6), Array2::<f64>::eye(6));
    }

    #[test]
    fn downsample_by_four_averages_centre_pixels() {
        // 8 -> 2: output i samples position 4i + 1.5.
        let m = interp_matrix(8, 2);
        assert_eq!(m[[0, 1]], 0.5);
        assert_eq!(m[[0, 2]], 0.5);
        assert_eq!(m[[1, 5]], 0.5);
        assert_eq!(m[[1, 6]], 0.5);
    }

    #[test]
    fn resize_constant_map_stays_constant() {
        let map = Array2::from_elem((4, 4), 0.3);
        let up = resize_map(map.view(), (16, 16));
        assert!(up.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
