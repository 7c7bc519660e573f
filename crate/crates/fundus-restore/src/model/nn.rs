//! Network building blocks with explicit forward caches and hand-written
//! backward passes. Convolution lowers to im2col plus GEMM; everything
//! is generic over the scalar type so the finite-difference gradient
//! check can run the identical code in f64.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

use crate::model::scalar::Scalar;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

// ---------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------

pub struct ConvCache<S: Scalar> {
    cols: Vec<Array2<S>>, // one (C_in*k*k, OH*OW) matrix per batch item
    in_shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
}

fn im2col<S: Scalar>(
    x: &Array4<S>,
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (_, c_in, h, w) = x.dim();
    let mut col = Array2::zeros((c_in * kernel * kernel, oh * ow));
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[n, c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_accumulate<S: Scalar>(
    dcol: &Array2<S>,
    dx: &mut Array4<S>,
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (_, c_in, h, w) = dx.dim();
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dx[[n, c, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

/// 2-D convolution. `w` has shape (C_out, C_in, k, k), `b` shape (C_out).
pub fn conv2d_forward<S: Scalar>(
    x: &Array4<S>,
    w: &ArrayD<S>,
    b: &ArrayD<S>,
    stride: usize,
    pad: usize,
) -> (Array4<S>, ConvCache<S>) {
    let (n, c_in, h, width) = x.dim();
    let wv = w.view().into_dimensionality::<Ix4>().expect("conv weight");
    let (c_out, wc_in, k, k2) = wv.dim();
    assert_eq!(k, k2);
    assert_eq!(c_in, wc_in, "conv input channels");
    let bv = b.view().into_dimensionality::<Ix1>().expect("conv bias");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(width, k, stride, pad);
    let w_mat = wv
        .to_shape((c_out, c_in * k * k))
        .expect("conv weight reshape")
        .to_owned();
    let mut y = Array4::zeros((n, c_out, oh, ow));
    let mut cols = Vec::with_capacity(n);
    for item in 0..n {
        let col = im2col(x, item, k, stride, pad, oh, ow);
        let out = w_mat.dot(&col); // (C_out, OH*OW)
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[[item, co, oy, ox]] = out[[co, oy * ow + ox]] + bv[co];
                }
            }
        }
        cols.push(col);
    }
    let cache = ConvCache {
        cols,
        in_shape: (n, c_in, h, width),
        kernel: k,
        stride,
        pad,
    };
    (y, cache)
}

/// Returns (dx, dw, db).
pub fn conv2d_backward<S: Scalar>(
    dy: &Array4<S>,
    w: &ArrayD<S>,
    cache: &ConvCache<S>,
) -> (Array4<S>, ArrayD<S>, ArrayD<S>) {
    let (n, c_out, oh, ow) = dy.dim();
    let wv = w.view().into_dimensionality::<Ix4>().expect("conv weight");
    let (_, c_in, k, _) = wv.dim();
    let w_mat = wv
        .to_shape((c_out, c_in * k * k))
        .expect("conv weight reshape")
        .to_owned();
    let mut dw_mat = Array2::<S>::zeros((c_out, c_in * k * k));
    let mut db = Array1::<S>::zeros(c_out);
    let mut dx = Array4::zeros(cache.in_shape);
    for item in 0..n {
        let mut dy_mat = Array2::zeros((c_out, oh * ow));
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[item, co, oy, ox]];
                    dy_mat[[co, oy * ow + ox]] = g;
                    db[co] += g;
                }
            }
        }
        dw_mat = dw_mat + dy_mat.dot(&cache.cols[item].t());
        let dcol = w_mat.t().dot(&dy_mat);
        col2im_accumulate(
            &dcol,
            &mut dx,
            item,
            cache.kernel,
            cache.stride,
            cache.pad,
            oh,
            ow,
        );
    }
    let dw = dw_mat
        .into_shape_with_order((c_out, c_in, k, k))
        .expect("dw reshape")
        .into_dyn();
    (dx, dw, db.into_dyn())
}

// ---------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------

const GN_EPS: f64 = 1e-5;

/// Largest divisor of `channels` not exceeding 8 — the group count used
/// throughout (8 whenever the width is a multiple of 8, fewer for the
/// narrow toy configs).
pub fn groups_for(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub struct GroupNormCache<S: Scalar> {
    x_hat: Array4<S>,
    inv_std: Array2<S>, // (N, groups)
    groups: usize,
}

/// gamma/beta have shape (C).
pub fn groupnorm_forward<S: Scalar>(
    x: &Array4<S>,
    gamma: &ArrayD<S>,
    beta: &ArrayD<S>,
) -> (Array4<S>, GroupNormCache<S>) {
    let (n, c, h, w) = x.dim();
    let groups = groups_for(c);
    let per = c / groups;
    let m = S::from_usize(per * h * w).unwrap();
    let gv = gamma.view().into_dimensionality::<Ix1>().expect("gamma");
    let bv = beta.view().into_dimensionality::<Ix1>().expect("beta");
    let mut y = Array4::zeros((n, c, h, w));
    let mut x_hat = Array4::zeros((n, c, h, w));
    let mut inv_std = Array2::zeros((n, groups));
    let eps = S::from_f64_exact(GN_EPS);
    for item in 0..n {
        for g in 0..groups {
            let c0 = g * per;
            let mut mean = S::zero();
            for c in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        mean += x[[item, c, yy, xx]];
                    }
                }
            }
            mean = mean / m;
            let mut var = S::zero();
            for c in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = x[[item, c, yy, xx]] - mean;
                        var += d * d;
                    }
                }
            }
            var = var / m;
            let istd = (var + eps).sqrt().recip();
            inv_std[[item, g]] = istd;
            for c in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let xh = (x[[item, c, yy, xx]] - mean) * istd;
                        x_hat[[item, c, yy, xx]] = xh;
                        y[[item, c, yy, xx]] = gv[c] * xh + bv[c];
                    }
                }
            }
        }
    }
    (
        y,
        GroupNormCache {
            x_hat,
            inv_std,
            groups,
        },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn groupnorm_backward<S: Scalar>(
    dy: &Array4<S>,
    gamma: &ArrayD<S>,
    cache: &GroupNormCache<S>,
) -> (Array4<S>, ArrayD<S>, ArrayD<S>) {
    let (n, c, h, w) = dy.dim();
    let groups = cache.groups;
    let per = c / groups;
    let m = S::from_usize(per * h * w).unwrap();
    let gv = gamma.view().into_dimensionality::<Ix1>().expect("gamma");
    let mut dgamma = Array1::<S>::zeros(c);
    let mut dbeta = Array1::<S>::zeros(c);
    let mut dx = Array4::zeros((n, c, h, w));
    for item in 0..n {
        for g in 0..groups {
            let c0 = g * per;
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for c in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let gy = dy[[item, c, yy, xx]];
                        let xh = cache.x_hat[[item, c, yy, xx]];
                        dgamma[c] += gy * xh;
                        dbeta[c] += gy;
                        let dxh = gy * gv[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                }
            }
            let istd = cache.inv_std[[item, g]];
            for c in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let dxh = dy[[item, c, yy, xx]] * gv[c];
                        let xh = cache.x_hat[[item, c, yy, xx]];
                        dx[[item, c, yy, xx]] =
                            istd * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / m);
                    }
                }
            }
        }
    }
    (dx, dgamma.into_dyn(), dbeta.into_dyn())
}

// ---------------------------------------------------------------------
// SiLU (sigmoid-weighted linear unit)
// ---------------------------------------------------------------------

pub struct SiluCache<S: Scalar> {
    x: ArrayD<S>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    (S::one() + (-x).exp()).recip()
}

pub fn silu_forward<S: Scalar>(x: &ArrayD<S>) -> (ArrayD<S>, SiluCache<S>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, SiluCache { x: x.clone() })
}

pub fn silu_backward<S: Scalar>(dy: &ArrayD<S>, cache: &SiluCache<S>) -> ArrayD<S> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(&cache.x).for_each(|d, &x| {
        let s = sigmoid(x);
        *d = *d * (s * (S::one() + x * (S::one() - s)));
    });
    dx
}

// ---------------------------------------------------------------------
// Dense (fully connected)
// ---------------------------------------------------------------------

pub struct DenseCache<S: Scalar> {
    x: Array2<S>,
}

/// `w` has shape (out, in); x is (N, in); returns (N, out).
pub fn dense_forward<S: Scalar>(
    x: &Array2<S>,
    w: &ArrayD<S>,
    b: &ArrayD<S>,
) -> (Array2<S>, DenseCache<S>) {
    let wv = w.view().into_dimensionality::<Ix2>().expect("dense weight");
    let bv = b.view().into_dimensionality::<Ix1>().expect("dense bias");
    let mut y = x.dot(&wv.t());
    for mut row in y.axis_iter_mut(Axis(0)) {
        row += &bv;
    }
    (y, DenseCache { x: x.clone() })
}

/// Returns (dx, dw, db).
pub fn dense_backward<S: Scalar>(
    dy: &Array2<S>,
    w: &ArrayD<S>,
    cache: &DenseCache<S>,
) -> (Array2<S>, ArrayD<S>, ArrayD<S>) {
    let wv = w.view().into_dimensionality::<Ix2>().expect("dense weight");
    let dw = dy.t().dot(&cache.x);
    let db = dy.sum_axis(Axis(0));
    let dx = dy.dot(&wv);
    (dx, dw.into_dyn(), db.into_dyn())
}

// ---------------------------------------------------------------------
// Pooling / resampling / concatenation
// ---------------------------------------------------------------------

/// Global average pool (N, C, H, W) -> (N, C).
pub fn gap_forward<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let m = S::from_usize(h * w).unwrap();
    let mut y = Array2::zeros((n, c));
    for item in 0..n {
        for ch in 0..c {
            let mut acc = S::zero();
            for yy in 0..h {
                for xx in 0..w {
                    acc += x[[item, ch, yy, xx]];
                }
            }
            y[[item, ch]] = acc / m;
        }
    }
    y
}

pub fn gap_backward<S: Scalar>(dy: &Array2<S>, h: usize, w: usize) -> Array4<S> {
    let (n, c) = dy.dim();
    let m = S::from_usize(h * w).unwrap();
    let mut dx = Array4::zeros((n, c, h, w));
    for item in 0..n {
        for ch in 0..c {
            let g = dy[[item, ch]] / m;
            for yy in 0..h {
                for xx in 0..w {
                    dx[[item, ch, yy, xx]] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2_forward<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h * 2, w * 2));
    for item in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[item, ch, yy, xx]];
                    y[[item, ch, 2 * yy, 2 * xx]] = v;
                    y[[item, ch, 2 * yy + 1, 2 * xx]] = v;
                    y[[item, ch, 2 * yy, 2 * xx + 1]] = v;
                    y[[item, ch, 2 * yy + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Array4<S>) -> Array4<S> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for item in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    dx[[item, ch, yy, xx]] = dy[[item, ch, 2 * yy, 2 * xx]]
                        + dy[[item, ch, 2 * yy + 1, 2 * xx]]
                        + dy[[item, ch, 2 * yy, 2 * xx + 1]]
                        + dy[[item, ch, 2 * yy + 1, 2 * xx + 1]];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes")
}

/// Split a channel-concatenated gradient back into the two parts.
pub fn split_channels<S: Scalar>(dy: &Array4<S>, c_first: usize) -> (Array4<S>, Array4<S>) {
    let da = dy.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let db = dy.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (da, db)
}

/// Add a per-channel bias vector (N, C) onto feature maps (N, C, H, W).
pub fn add_channel_bias<S: Scalar>(x: &mut Array4<S>, bias: &Array2<S>) {
    let (n, c, h, w) = x.dim();
    for item in 0..n {
        for ch in 0..c {
            let v = bias[[item, ch]];
            for yy in 0..h {
                for xx in 0..w {
                    x[[item, ch, yy, xx]] += v;
                }
            }
        }
    }
}

/// Reduce a feature-map gradient to the per-channel bias gradient (N, C).
pub fn channel_bias_grad<S: Scalar>(dy: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = dy.dim();
    let mut g = Array2::zeros((n, c));
    for item in 0..n {
        for ch in 0..c {
            let mut acc = S::zero();
            for yy in 0..h {
                for xx in 0..w {
                    acc += dy[[item, ch, yy, xx]];
                }
            }
            g[[item, ch]] = acc;
        }
    }
    g
}

// ---------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------

/// Sinusoidal position embedding of a timestep: the first half of the
/// vector holds sines, the second half cosines, over geometrically spaced
/// frequencies from 1 down to 1/10000.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Array2<S> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = (-exponent * (10000.0f64).ln()).exp();
            let arg = t as f64 * freq;
            out[[row, i]] = S::from_f64_exact(arg.sin());
            out[[row, half + i]] = S::from_f64_exact(arg.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use ndarray::{ArrayD, IxDyn};

    fn randn(shape: &[usize], rng: &mut Pcg32) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.next_gaussian();
        }
        a
    }

    fn randn4(shape: (usize, usize, usize, usize), rng: &mut Pcg32) -> Array4<f64> {
        randn(&[shape.0, shape.1, shape.2, shape.3], rng)
            .into_dimensionality::<Ix4>()
            .unwrap()
    }

    /// Central finite difference of a scalar functional of one tensor.
    fn fd_grad<F: FnMut(&ArrayD<f64>) -> f64>(x: &ArrayD<f64>, mut f: F) -> ArrayD<f64> {
        let h = 1e-5;
        let mut g = ArrayD::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64, what: &str) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "{what}: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = Pcg32::new(1, 1);
        let x = randn4((2, 3, 5, 5), &mut rng);
        // 1x1 kernel, identity across channels.
        let mut w = ArrayD::zeros(IxDyn(&[3, 3, 1, 1]));
        for c in 0..3 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let b = ArrayD::zeros(IxDyn(&[3]));
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_known_sum_with_padding() {
        // All-ones 3x3 kernel on a 3x3 all-ones image, pad 1: the center
        // output sees all nine pixels, corners see four.
        let x = Array4::from_elem((1, 1, 3, 3), 1.0f64);
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
        let b = ArrayD::zeros(IxDyn(&[1]));
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn conv_strided_output_dims() {
        let x = Array4::<f64>::zeros((1, 2, 8, 8));
        let w = ArrayD::zeros(IxDyn(&[4, 2, 3, 3]));
        let b = ArrayD::zeros(IxDyn(&[4]));
        let (y, _) = conv2d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.dim(), (1, 4, 4, 4));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Pcg32::new(2, 7);
        let x = randn4((2, 2, 4, 4), &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        // Scalar functional: weighted sum of outputs with fixed weights.
        let probe = randn(&[2, 3, 2, 2], &mut rng); // stride 2, pad 1 -> 2x2
        let loss = |xx: &Array4<f64>, ww: &ArrayD<f64>, bb: &ArrayD<f64>| {
            let (y, _) = conv2d_forward(xx, ww, bb, 2, 1);
            (y.into_dyn() * &probe).sum()
        };
        let (y, cache) = conv2d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.dim(), (2, 3, 2, 2));
        let dy = probe.clone().into_dimensionality::<Ix4>().unwrap();
        let (dx, dw, db) = conv2d_backward(&dy, &w, &cache);

        let fd_dx = fd_grad(&x.clone().into_dyn(), |v| {
            loss(&v.clone().into_dimensionality::<Ix4>().unwrap(), &w, &b)
        });
        let fd_dw = fd_grad(&w, |v| loss(&x, v, &b));
        let fd_db = fd_grad(&b, |v| loss(&x, &w, v));
        assert_close(&dx.into_dyn(), &fd_dx, 1e-6, "conv dx");
        assert_close(&dw, &fd_dw, 1e-6, "conv dw");
        assert_close(&db, &fd_db, 1e-6, "conv db");
    }

    #[test]
    fn groupnorm_normalizes_and_matches_finite_differences() {
        let mut rng = Pcg32::new(3, 5);
        let x = randn4((2, 4, 3, 3), &mut rng);
        let gamma = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let beta = ArrayD::zeros(IxDyn(&[4]));
        let (y, _) = groupnorm_forward(&x, &gamma, &beta);
        // groups_for(4) = 4, so each channel normalizes alone over 3x3.
        assert_eq!(groups_for(4), 4);
        for item in 0..2 {
            for c in 0..4 {
                let mut mean = 0.0;
                for yy in 0..3 {
                    for xx in 0..3 {
                        mean += y[[item, c, yy, xx]];
                    }
                }
                assert!((mean / 9.0).abs() < 1e-10);
            }
        }

        let gamma = randn(&[4], &mut rng);
        let beta = randn(&[4], &mut rng);
        let probe = randn(&[2, 4, 3, 3], &mut rng);
        let loss = |xx: &Array4<f64>, gg: &ArrayD<f64>, bb: &ArrayD<f64>| {
            let (y, _) = groupnorm_forward(xx, gg, bb);
            (y.into_dyn() * &probe).sum()
        };
        let (_, cache) = groupnorm_forward(&x, &gamma, &beta);
        let dy = probe.clone().into_dimensionality::<Ix4>().unwrap();
        let (dx, dgamma, dbeta) = groupnorm_backward(&dy, &gamma, &cache);
        let fd_dx = fd_grad(&x.clone().into_dyn(), |v| {
            loss(&v.clone().into_dimensionality::<Ix4>().unwrap(), &gamma, &beta)
        });
        let fd_dgamma = fd_grad(&gamma, |v| loss(&x, v, &beta));
        let fd_dbeta = fd_grad(&beta, |v| loss(&x, &gamma, v));
        assert_close(&dx.into_dyn(), &fd_dx, 1e-5, "gn dx");
        assert_close(&dgamma, &fd_dgamma, 1e-6, "gn dgamma");
        assert_close(&dbeta, &fd_dbeta, 1e-6, "gn dbeta");
    }

    #[test]
    fn groups_for_prefers_eight() {
        assert_eq!(groups_for(16), 8);
        assert_eq!(groups_for(8), 8);
        assert_eq!(groups_for(4), 4);
        assert_eq!(groups_for(6), 6);
        assert_eq!(groups_for(3), 3);
        assert_eq!(groups_for(7), 7);
        assert_eq!(groups_for(1), 1);
    }

    #[test]
    fn silu_values_and_gradient() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.0, 3.0]).unwrap();
        let (y, cache) = silu_forward(&x);
        assert!((y[[0]] - (-2.0 / (1.0 + 2.0f64.exp()))).abs() < 1e-12);
        assert_eq!(y[[1]], 0.0);
        assert!((y[[2]] - 3.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
        let dy = ArrayD::from_elem(IxDyn(&[3]), 1.0);
        let dx = silu_backward(&dy, &cache);
        let fd = fd_grad(&x, |v| silu_forward(v).0.sum());
        assert_close(&dx, &fd, 1e-6, "silu dx");
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = Pcg32::new(4, 4);
        let x = randn(&[3, 5], &mut rng).into_dimensionality::<Ix2>().unwrap();
        let w = randn(&[2, 5], &mut rng);
        let b = randn(&[2], &mut rng);
        let probe = randn(&[3, 2], &mut rng).into_dimensionality::<Ix2>().unwrap();
        let loss = |xx: &Array2<f64>, ww: &ArrayD<f64>, bb: &ArrayD<f64>| {
            let (y, _) = dense_forward(xx, ww, bb);
            (y * &probe).sum()
        };
        let (_, cache) = dense_forward(&x, &w, &b);
        let (dx, dw, db) = dense_backward(&probe, &w, &cache);
        let fd_dx = fd_grad(&x.clone().into_dyn(), |v| {
            loss(&v.clone().into_dimensionality::<Ix2>().unwrap(), &w, &b)
        });
        let fd_dw = fd_grad(&w, |v| loss(&x, v, &b));
        let fd_db = fd_grad(&b, |v| loss(&x, &w, v));
        assert_close(&dx.into_dyn(), &fd_dx, 1e-6, "dense dx");
        assert_close(&dw, &fd_dw, 1e-6, "dense dw");
        assert_close(&db, &fd_db, 1e-6, "dense db");
    }

    #[test]
    fn gap_and_upsample_round_trip_gradients() {
        let mut rng = Pcg32::new(5, 2);
        let x = randn4((2, 3, 4, 4), &mut rng);
        let y = gap_forward(&x);
        assert_eq!(y.dim(), (2, 3));
        let mut hand = 0.0;
        for yy in 0..4 {
            for xx in 0..4 {
                hand += x[[0, 1, yy, xx]];
            }
        }
        assert!((y[[0, 1]] - hand / 16.0).abs() < 1e-12);
        let dy = Array2::from_elem((2, 3), 1.0f64);
        let dx = gap_backward(&dy, 4, 4);
        assert!((dx[[0, 0, 0, 0]] - 1.0 / 16.0).abs() < 1e-12);

        let up = upsample2_forward(&x);
        assert_eq!(up.dim(), (2, 3, 8, 8));
        assert_eq!(up[[0, 0, 5, 3]], x[[0, 0, 2, 1]]);
        let down = upsample2_backward(&up);
        // Backward of forward sums each replicated value four times.
        assert!((down[[0, 0, 2, 1]] - 4.0 * x[[0, 0, 2, 1]]).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = Pcg32::new(6, 3);
        let a = randn4((1, 2, 3, 3), &mut rng);
        let b = randn4((1, 4, 3, 3), &mut rng);
        let y = concat_channels(&a, &b);
        assert_eq!(y.dim(), (1, 6, 3, 3));
        let (da, db) = split_channels(&y, 2);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }

    #[test]
    fn channel_bias_forward_backward_agree() {
        let mut rng = Pcg32::new(7, 1);
        let mut x = randn4((2, 3, 2, 2), &mut rng);
        let before = x.clone();
        let bias = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        add_channel_bias(&mut x, &bias);
        assert!((x[[1, 2, 0, 1]] - (before[[1, 2, 0, 1]] + 3.0)).abs() < 1e-12);
        let dy = Array4::from_elem((2, 3, 2, 2), 1.0);
        let g = channel_bias_grad(&dy);
        assert_eq!(g[[0, 0]], 4.0); // 2x2 spatial positions
    }

    #[test]
    fn timestep_embeddings_are_bounded_and_distinct() {
        let emb: Array2<f64> = timestep_embedding(&[0, 1, 50, 199], 64);
        assert_eq!(emb.dim(), (4, 64));
        for v in emb.iter() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
        // t = 0: all sines 0, all cosines 1.
        for i in 0..32 {
            assert_eq!(emb[[0, i]], 0.0);
            assert_eq!(emb[[0, 32 + i]], 1.0);
        }
        for row in 1..4 {
            let diff: f64 = (0..64)
                .map(|i| (emb[[row, i]] - emb[[row - 1, i]]).powi(2))
                .sum();
            assert!(diff > 1e-3, "rows {row} and {} too close", row - 1);
        }
    }

    #[test]
    fn conv_out_dim_formula() {
        assert_eq!(conv_out_dim(64, 3, 1, 1), 64);
        assert_eq!(conv_out_dim(64, 3, 2, 1), 32);
        assert_eq!(conv_out_dim(1, 3, 2, 1), 1);
        assert_eq!(conv_out_dim(8, 3, 2, 1), 4);
    }
}
