//! Forward and backward kernels for the layers used by the networks.
//!
//! Activations are `[B, C, T]` (`Array3`) or `[B, D]` (`Array2`), always in
//! standard layout. Every backward routine accumulates into the gradient
//! buffers it is given.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng as _, SeedableRng};

use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Cached im2col matrix `[Cin*K, B*T]` of a convolution input.
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

/// 1-D convolution producing the same temporal length as its input.
///
/// `y[b,o,t] = bias[o] + Σ_i Σ_k w[o,i,k] · x[b, i, t - pad_left + k·dilation]`
/// with zeros outside `[0, T)`. Same padding uses `pad_left = (K-1)/2`,
/// causal convolution uses `pad_left = (K-1)·dilation`.
pub fn conv1d_forward(
    x: ArrayView3<f64>,
    w: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    dilation: usize,
    pad_left: usize,
) -> (Array3<f64>, ConvCache) {
    let (b, cin, t) = x.dim();
    let bt = b * t;
    let mut cols = Array2::<f64>::zeros((cin * k, bt));
    {
        let cs = cols.as_slice_mut().expect("standard layout");
        for bi in 0..b {
            for i in 0..cin {
                let lane = x.slice(ndarray::s![bi, i, ..]);
                for kk in 0..k {
                    let row = &mut cs[(i * k + kk) * bt + bi * t..(i * k + kk) * bt + bi * t + t];
                    let off = (kk * dilation) as isize - pad_left as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                    for tt in lo..hi {
                        row[tt] = lane[(tt as isize + off) as usize];
                    }
                }
            }
        }
    }
    let wm = ArrayView2::from_shape((cout, cin * k), w).expect("weight shape");
    let mut ym = Array2::<f64>::zeros((cout, bt));
    general_mat_mul(1.0, &wm, &cols, 0.0, &mut ym);
    let mut y = Array3::<f64>::zeros((b, cout, t));
    for bi in 0..b {
        for o in 0..cout {
            let src = ym.slice(ndarray::s![o, bi * t..bi * t + t]);
            let bo = bias[o];
            y.slice_mut(ndarray::s![bi, o, ..])
                .zip_mut_with(&src, |d, &s| *d = s + bo);
        }
    }
    (
        y,
        ConvCache {
            cols,
            in_dim: (b, cin, t),
        },
    )
}

/// Returns `dx`; accumulates into `dw` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    cache: &ConvCache,
    dy: ArrayView3<f64>,
    w: &[f64],
    dw: &mut [f64],
    dbias: &mut [f64],
    k: usize,
    dilation: usize,
    pad_left: usize,
    need_dx: bool,
) -> Option<Array3<f64>> {
    let (b, cin, t) = cache.in_dim;
    let cout = dy.dim().1;
    let bt = b * t;
    let mut dym = Array2::<f64>::zeros((cout, bt));
    for bi in 0..b {
        for o in 0..cout {
            dym.slice_mut(ndarray::s![o, bi * t..bi * t + t])
                .assign(&dy.slice(ndarray::s![bi, o, ..]));
        }
    }
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dym.row(o).sum();
    }
    {
        let mut dwm = ndarray::ArrayViewMut2::from_shape((cout, cin * k), dw).expect("weight shape");
        general_mat_mul(1.0, &dym, &cache.cols.t(), 1.0, &mut dwm);
    }
    if !need_dx {
        return None;
    }
    let wm = ArrayView2::from_shape((cout, cin * k), w).expect("weight shape");
    let mut dcols = Array2::<f64>::zeros((cin * k, bt));
    general_mat_mul(1.0, &wm.t(), &dym, 0.0, &mut dcols);
    let mut dx = Array3::<f64>::zeros((b, cin, t));
    let dcs = dcols.as_slice().expect("standard layout");
    for bi in 0..b {
        for i in 0..cin {
            let mut lane = dx.slice_mut(ndarray::s![bi, i, ..]);
            for kk in 0..k {
                let row = &dcs[(i * k + kk) * bt + bi * t..(i * k + kk) * bt + bi * t + t];
                let off = (kk * dilation) as isize - pad_left as isize;
                let lo = (-off).max(0) as usize;
                let hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                for tt in lo..hi {
                    lane[(tt as isize + off) as usize] += row[tt];
                }
            }
        }
    }
    Some(dx)
}

pub struct BatchNormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Batch statistics observed during a training-mode forward pass, to be
/// folded into the running buffers by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Per-channel batch normalization over the batch and time axes.
///
/// With `running = Some((mean, var))` the running statistics are used
/// (inference); otherwise batch statistics.
pub fn batchnorm_forward(
    x: ArrayView3<f64>,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Array3<f64>, BatchNormCache, Option<BatchStats>) {
    let (b, c, t) = x.dim();
    let count = (b * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let stats = match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
            None
        }
        None => {
            for ch in 0..c {
                let lane = x.index_axis(Axis(1), ch);
                let mu = lane.sum() / count;
                let v = lane.fold(0.0, |acc, &u| acc + (u - mu) * (u - mu)) / count;
                mean[ch] = mu;
                var[ch] = v;
            }
            let unbiased = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            Some(BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            })
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.to_owned();
    for (ch, mut lane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
        let (mu, is) = (mean[ch], inv_std[ch]);
        lane.mapv_inplace(|u| (u - mu) * is);
    }
    let mut y = xhat.clone();
    for (ch, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let (g, be) = (gamma[ch], beta[ch]);
        lane.mapv_inplace(|u| g * u + be);
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        },
        stats,
    )
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    dy: ArrayView3<f64>,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array3<f64> {
    let (b, c, t) = dy.dim();
    let count = (b * t) as f64;
    let mut dx = Array3::<f64>::zeros((b, c, t));
    for ch in 0..c {
        let dy_c = dy.index_axis(Axis(1), ch);
        let xh_c = cache.xhat.index_axis(Axis(1), ch);
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        ndarray::Zip::from(&dy_c).and(&xh_c).for_each(|&d, &h| {
            sum_dy += d;
            sum_dy_xh += d * h;
        });
        dgamma[ch] += sum_dy_xh;
        dbeta[ch] += sum_dy;
        let g = gamma[ch];
        let is = cache.inv_std[ch];
        let mut dx_c = dx.index_axis_mut(Axis(1), ch);
        if cache.batch_stats {
            // dxhat = g·dy;  dx = is/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let (s1, s2) = (g * sum_dy, g * sum_dy_xh);
            ndarray::Zip::from(&mut dx_c).and(&dy_c).and(&xh_c).for_each(|o, &d, &h| {
                *o = is / count * (count * g * d - s1 - h * s2);
            });
        } else {
            ndarray::Zip::from(&mut dx_c).and(&dy_c).for_each(|o, &d| *o = g * is * d);
        }
    }
    dx
}

pub fn relu_forward(x: Array3<f64>) -> Array3<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward(y: &Array3<f64>, mut dy: Array3<f64>) -> Array3<f64> {
    dy.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dy
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_len: usize,
}

pub fn pool_out_len(t: usize, size: usize, stride: usize) -> usize {
    if t < size {
        0
    } else {
        (t - size) / stride + 1
    }
}

pub fn maxpool_forward(x: ArrayView3<f64>, size: usize, stride: usize) -> (Array3<f64>, MaxPoolCache) {
    let (b, c, t) = x.dim();
    let tout = pool_out_len(t, size, stride);
    let mut y = Array3::<f64>::zeros((b, c, tout));
    let mut argmax = Vec::with_capacity(b * c * tout);
    for bi in 0..b {
        for ch in 0..c {
            let lane = x.slice(ndarray::s![bi, ch, ..]);
            for o in 0..tout {
                let start = o * stride;
                let mut best = start;
                for s in start + 1..start + size {
                    if lane[s] > lane[best] {
                        best = s;
                    }
                }
                y[[bi, ch, o]] = lane[best];
                argmax.push(best);
            }
        }
    }
    (y, MaxPoolCache { argmax, in_len: t })
}

pub fn maxpool_backward(cache: &MaxPoolCache, dy: ArrayView3<f64>) -> Array3<f64> {
    let (b, c, tout) = dy.dim();
    let mut dx = Array3::<f64>::zeros((b, c, cache.in_len));
    let mut it = cache.argmax.iter();
    for bi in 0..b {
        for ch in 0..c {
            for o in 0..tout {
                let src = *it.next().expect("argmax per output");
                dx[[bi, ch, src]] += dy[[bi, ch, o]];
            }
        }
    }
    dx
}

/// Inverted dropout mask (entries `0` or `1/(1-p)`), drawn from `seed`.
pub fn dropout_mask(dim: (usize, usize, usize), p: f64, seed: u64) -> Array3<f64> {
    let mut r = Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    Array3::from_shape_simple_fn(dim, || if r.random::<f64>() < p { 0.0 } else { keep })
}

/// `y = x Wᵀ + b` with `W` of shape `[dout, din]`.
pub fn linear_forward(x: ArrayView2<f64>, w: &[f64], bias: &[f64], dout: usize) -> Array2<f64> {
    let din = x.dim().1;
    let wm = ArrayView2::from_shape((dout, din), w).expect("weight shape");
    let mut y = Array2::<f64>::zeros((x.dim().0, dout));
    general_mat_mul(1.0, &x, &wm.t(), 0.0, &mut y);
    for mut row in y.rows_mut() {
        row.zip_mut_with(&ndarray::aview1(bias), |v, &b| *v += b);
    }
    y
}

pub fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    w: &[f64],
    dw: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Option<Array2<f64>> {
    let (dout, din) = (dy.dim().1, x.dim().1);
    {
        let mut dwm = ndarray::ArrayViewMut2::from_shape((dout, din), dw).expect("weight shape");
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut dwm);
    }
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dy.column(o).sum();
    }
    if !need_dx {
        return None;
    }
    let wm = ArrayView2::from_shape((dout, din), w).expect("weight shape");
    let mut dx = Array2::<f64>::zeros((x.dim().0, din));
    general_mat_mul(1.0, &dy, &wm, 0.0, &mut dx);
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    /// Direct-summation convolution, the definition the im2col path must match.
    fn conv_naive(x: &Array3<f64>, w: &[f64], cout: usize, k: usize, d: usize, pad: usize) -> Array3<f64> {
        let (b, cin, t) = x.dim();
        Array3::from_shape_fn((b, cout, t), |(bi, o, tt)| {
            let mut acc = 0.0;
            for i in 0..cin {
                for kk in 0..k {
                    let s = tt as isize - pad as isize + (kk * d) as isize;
                    if s >= 0 && (s as usize) < t {
                        acc += w[(o * cin + i) * k + kk] * x[[bi, i, s as usize]];
                    }
                }
            }
            acc
        })
    }

    fn sample(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(dim, || r.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = sample((2, 3, 11), 1);
        let w: Vec<f64> = sample((4, 3, 5), 2).into_raw_vec_and_offset().0;
        for &(d, pad) in &[(1, 2), (2, 8), (3, 12), (1, 0)] {
            let (y, _) = conv1d_forward(x.view(), &w, &[0.0; 4], 4, 5, d, pad);
            let r = conv_naive(&x, &w, 4, 5, d, pad);
            assert!(y.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = sample((2, 2, 7), 3);
        let w: Vec<f64> = sample((3, 2, 3), 4).into_raw_vec_and_offset().0;
        let bias = vec![0.1, -0.2, 0.3];
        let upstream = sample((2, 3, 7), 5);
        let f = |x: &Array3<f64>, w: &[f64]| {
            let (y, _) = conv1d_forward(x.view(), w, &bias, 3, 3, 2, 4);
            (&y * &upstream).sum()
        };
        let (_, cache) = conv1d_forward(x.view(), &w, &bias, 3, 3, 2, 4);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv1d_backward(&cache, upstream.view(), &w, &mut dw, &mut db, 3, 2, 4, true).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            assert!(((f(&x, &wp) - f(&x, &wm)) / (2.0 * h) - dw[i]).abs() < 1e-6);
        }
        for idx in [(0, 0, 0), (1, 1, 6), (0, 1, 3)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            assert!(((f(&xp, &w) - f(&xm, &w)) / (2.0 * h) - dx[idx]).abs() < 1e-6);
        }
        assert!((db[1] - upstream.index_axis(Axis(1), 1).sum()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let x = sample((3, 2, 4), 7);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.4];
        let upstream = sample((3, 2, 4), 8);
        let f = |x: &Array3<f64>| (&batchnorm_forward(x.view(), &gamma, &beta, None).0 * &upstream).sum();
        let (_, cache, _) = batchnorm_forward(x.view(), &gamma, &beta, None);
        let (mut dg, mut db) = ([0.0; 2], [0.0; 2]);
        let dx = batchnorm_backward(&cache, upstream.view(), &gamma, &mut dg, &mut db);
        let h = 1e-6;
        for idx in [(0, 0, 0), (2, 1, 3), (1, 0, 2)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            assert!(((f(&xp) - f(&xm)) / (2.0 * h) - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_linear_shapes() {
        let x = array![[[1.0, 3.0, 2.0, 5.0, 4.0]]];
        let (y, cache) = maxpool_forward(x.view(), 2, 2);
        assert_eq!(y, array![[[3.0, 5.0]]]);
        let dx = maxpool_backward(&cache, array![[[1.0, 2.0]]].view());
        assert_eq!(dx, array![[[0.0, 1.0, 0.0, 2.0, 0.0]]]);

        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let w = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = linear_forward(x.view(), &w, &[0.0, 0.0, 1.0], 3);
        assert_eq!(y.row(1).to_owned(), Array1::from(vec![3.0, 4.0, 8.0]));
    }
}
