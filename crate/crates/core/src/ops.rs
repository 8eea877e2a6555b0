//! Forward and backward kernels for the primitives the network needs.
//!
//! Everything here is pure: kernels take tensors and return fresh tensors
//! or gradient buffers. Recording on a tape and gradient bookkeeping live
//! in [`crate::tape`]. Convolution is cross-correlation (no kernel flip)
//! with zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Output height/width for a cross-correlation with zero padding.
pub fn conv2d_out_shape(
    input: Shape,
    weight: Shape,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Shape> {
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 {
        return Err(Error::ZeroStride(sh, sw));
    }
    // weight is [cout, cin, kh, kw]
    let (cin, kh, kw) = (weight.c, weight.h, weight.w);
    if input.c != cin {
        return Err(Error::DimMismatch {
            dim: "input channels (Cin)",
            expected: cin,
            got: input.c,
        });
    }
    let padded_h = input.h + 2 * ph;
    let padded_w = input.w + 2 * pw;
    if kh > padded_h || kw > padded_w {
        return Err(Error::KernelTooLarge {
            kernel: kh,
            kernel_w: kw,
            padded_h,
            padded_w,
        });
    }
    let out_h = (padded_h - kh) / sh + 1;
    let out_w = (padded_w - kw) / sw + 1;
    if out_h < 1 || out_w < 1 {
        return Err(Error::DegenerateOutput {
            out_h: out_h as isize,
            out_w: out_w as isize,
            in_h: input.h,
            in_w: input.w,
            kh,
            kw,
            sh,
            sw,
        });
    }
    Shape::new(input.n, weight.n, out_h, out_w)
}

/// Range of output positions whose receptive field stays inside the input,
/// for one kernel offset `k`. Returns an inclusive range.
#[inline]
fn valid_out_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_size: usize,
    out_size: usize,
) -> Option<(usize, usize)> {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_size - 1 + pad;
    if hi_num < k {
        return None;
    }
    let hi = ((hi_num - k) / stride).min(out_size - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<S>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let out_shape = conv2d_out_shape(ishape, wshape, stride, padding)?;
    let (cout, cin, kh, kw) = (wshape.n, wshape.c, wshape.h, wshape.w);
    if bias.numel() != cout {
        return Err(Error::DimMismatch {
            dim: "bias channels (Cout)",
            expected: cout,
            got: bias.numel(),
        });
    }
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (in_h, in_w) = (ishape.h, ishape.w);
    let (out_h, out_w) = (out_shape.h, out_shape.w);
    let wdata = weight.data();
    let bdata = bias.data();

    let mut out = vec![S::zero(); out_shape.numel()];
    for n in 0..ishape.n {
        for co in 0..cout {
            let plane_start = (n * cout + co) * out_h * out_w;
            let out_plane = &mut out[plane_start..plane_start + out_h * out_w];
            out_plane.fill(bdata[co]);
            for ci in 0..cin {
                let in_plane = input.plane(n, ci);
                for ki in 0..kh {
                    let Some((oh_lo, oh_hi)) = valid_out_range(ki, ph, sh, in_h, out_h) else {
                        continue;
                    };
                    for kj in 0..kw {
                        let wv = wdata[((co * cin + ci) * kh + ki) * kw + kj];
                        if wv == S::zero() {
                            continue;
                        }
                        let Some((ow_lo, ow_hi)) = valid_out_range(kj, pw, sw, in_w, out_w)
                        else {
                            continue;
                        };
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * sh + ki - ph;
                            let in_row = &in_plane[ih * in_w..(ih + 1) * in_w];
                            let out_row = &mut out_plane[oh * out_w..(oh + 1) * out_w];
                            if sw == 1 {
                                let iw_lo = ow_lo + kj - pw;
                                for (o, iv) in out_row[ow_lo..=ow_hi]
                                    .iter_mut()
                                    .zip(in_row[iw_lo..].iter())
                                {
                                    *o = *o + wv * *iv;
                                }
                            } else {
                                for ow in ow_lo..=ow_hi {
                                    let iw = ow * sw + kj - pw;
                                    out_row[ow] = out_row[ow] + wv * in_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub struct Conv2dGrads<S> {
    pub d_input: Option<Vec<S>>,
    pub d_weight: Option<Vec<S>>,
    pub d_bias: Option<Vec<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    stride: (usize, usize),
    padding: (usize, usize),
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Conv2dGrads<S> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let out_shape =
        conv2d_out_shape(ishape, wshape, stride, padding).expect("validated during forward");
    let (cout, cin, kh, kw) = (wshape.n, wshape.c, wshape.h, wshape.w);
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (in_h, in_w) = (ishape.h, ishape.w);
    let (out_h, out_w) = (out_shape.h, out_shape.w);
    let out_hw = out_h * out_w;
    let wdata = weight.data();
    let g_plane = |n: usize, co: usize| -> &[S] {
        let start = (n * cout + co) * out_hw;
        &grad_out[start..start + out_hw]
    };

    let d_input = need_input.then(|| {
        let mut di = vec![S::zero(); ishape.numel()];
        for n in 0..ishape.n {
            for ci in 0..cin {
                let plane_start = (n * cin + ci) * in_h * in_w;
                let d_plane = &mut di[plane_start..plane_start + in_h * in_w];
                for co in 0..cout {
                    let g = g_plane(n, co);
                    for ki in 0..kh {
                        let Some((oh_lo, oh_hi)) = valid_out_range(ki, ph, sh, in_h, out_h)
                        else {
                            continue;
                        };
                        for kj in 0..kw {
                            let wv = wdata[((co * cin + ci) * kh + ki) * kw + kj];
                            if wv == S::zero() {
                                continue;
                            }
                            let Some((ow_lo, ow_hi)) = valid_out_range(kj, pw, sw, in_w, out_w)
                            else {
                                continue;
                            };
                            for oh in oh_lo..=oh_hi {
                                let ih = oh * sh + ki - ph;
                                let d_row = &mut d_plane[ih * in_w..(ih + 1) * in_w];
                                let g_row = &g[oh * out_w..(oh + 1) * out_w];
                                if sw == 1 {
                                    let iw_lo = ow_lo + kj - pw;
                                    for (d, gv) in d_row[iw_lo..]
                                        .iter_mut()
                                        .zip(g_row[ow_lo..=ow_hi].iter())
                                    {
                                        *d = *d + wv * *gv;
                                    }
                                } else {
                                    for ow in ow_lo..=ow_hi {
                                        let iw = ow * sw + kj - pw;
                                        d_row[iw] = d_row[iw] + wv * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        di
    });

    let d_weight = need_weight.then(|| {
        let mut dw = vec![S::zero(); wshape.numel()];
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    let Some((oh_lo, oh_hi)) = valid_out_range(ki, ph, sh, in_h, out_h) else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ow_lo, ow_hi)) = valid_out_range(kj, pw, sw, in_w, out_w)
                        else {
                            continue;
                        };
                        let mut acc = S::zero();
                        for n in 0..ishape.n {
                            let g = g_plane(n, co);
                            let in_plane = input.plane(n, ci);
                            for oh in oh_lo..=oh_hi {
                                let ih = oh * sh + ki - ph;
                                let in_row = &in_plane[ih * in_w..(ih + 1) * in_w];
                                let g_row = &g[oh * out_w..(oh + 1) * out_w];
                                if sw == 1 {
                                    let iw_lo = ow_lo + kj - pw;
                                    for (gv, iv) in
                                        g_row[ow_lo..=ow_hi].iter().zip(in_row[iw_lo..].iter())
                                    {
                                        acc = acc + *gv * *iv;
                                    }
                                } else {
                                    for ow in ow_lo..=ow_hi {
                                        let iw = ow * sw + kj - pw;
                                        acc = acc + g_row[ow] * in_row[iw];
                                    }
                                }
                            }
                        }
                        dw[((co * cin + ci) * kh + ki) * kw + kj] = acc;
                    }
                }
            }
        }
        dw
    });

    let d_bias = need_bias.then(|| {
        let mut db = vec![S::zero(); cout];
        for co in 0..cout {
            let mut acc = S::zero();
            for n in 0..ishape.n {
                for g in g_plane(n, co) {
                    acc = acc + *g;
                }
            }
            db[co] = acc;
        }
        db
    });

    Conv2dGrads {
        d_input,
        d_weight,
        d_bias,
    }
}

/// Channel-to-space rearrangement:
/// `out(n, c, r*h + a, r*w + b) = in(n, c*r^2 + a*r + b, h, w)`.
pub fn pixel_shuffle_forward<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let s = input.shape();
    let rsq = r * r;
    if r == 0 || s.c % rsq != 0 {
        return Err(Error::ChannelsNotDivisible {
            channels: s.c,
            rsq: rsq.max(1),
        });
    }
    let out_shape = Shape::new(s.n, s.c / rsq, s.h * r, s.w * r)?;
    let mut out = vec![S::zero(); out_shape.numel()];
    let data = input.data();
    let (oh, ow) = (out_shape.h, out_shape.w);
    for n in 0..s.n {
        for co in 0..out_shape.c {
            for a in 0..r {
                for b in 0..r {
                    let ci = co * rsq + a * r + b;
                    for h in 0..s.h {
                        let in_row = (n * s.c + ci) * s.h * s.w + h * s.w;
                        let out_row = (n * out_shape.c + co) * oh * ow + (r * h + a) * ow + b;
                        for w in 0..s.w {
                            out[out_row + r * w] = data[in_row + w];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Backward of pixel shuffle: the inverse gather (space-to-depth).
pub fn pixel_shuffle_backward<S: Scalar>(grad_out: &[S], in_shape: Shape, r: usize) -> Vec<S> {
    let rsq = r * r;
    let out_c = in_shape.c / rsq;
    let (oh, ow) = (in_shape.h * r, in_shape.w * r);
    let mut di = vec![S::zero(); in_shape.numel()];
    for n in 0..in_shape.n {
        for co in 0..out_c {
            for a in 0..r {
                for b in 0..r {
                    let ci = co * rsq + a * r + b;
                    for h in 0..in_shape.h {
                        let in_row = (n * in_shape.c + ci) * in_shape.h * in_shape.w + h * in_shape.w;
                        let out_row = (n * out_c + co) * oh * ow + (r * h + a) * ow + b;
                        for w in 0..in_shape.w {
                            di[in_row + w] = grad_out[out_row + r * w];
                        }
                    }
                }
            }
        }
    }
    di
}

/// Numerically careful logistic function.
#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let data = input.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::from_vec(input.shape(), data).expect("shape preserved")
}

/// d/dx sigmoid = y * (1 - y), evaluated from the saved output.
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, grad_out: &[S]) -> Vec<S> {
    output
        .data()
        .iter()
        .zip(grad_out.iter())
        .map(|(&y, &g)| g * y * (S::one() - y))
        .collect()
}

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let z = S::zero();
    let data = input.data().iter().map(|&x| if x > z { x } else { z }).collect();
    Tensor::from_vec(input.shape(), data).expect("shape preserved")
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &[S]) -> Vec<S> {
    let z = S::zero();
    input
        .data()
        .iter()
        .zip(grad_out.iter())
        .map(|(&x, &g)| if x > z { g } else { z })
        .collect()
}

pub fn add_forward<S: Scalar>(lhs: &Tensor<S>, rhs: &Tensor<S>) -> Result<Tensor<S>> {
    if lhs.shape() != rhs.shape() {
        return Err(Error::BroadcastMismatch {
            a: lhs.shape(),
            b: rhs.shape(),
        });
    }
    let data = lhs
        .data()
        .iter()
        .zip(rhs.data().iter())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::from_vec(lhs.shape(), data)
}

/// `out[n,c,h,w] = features[n,c,h,w] * map[n,0,h,w]` — a single-channel map
/// broadcast across the channel dimension.
pub fn mul_broadcast_forward<S: Scalar>(
    features: &Tensor<S>,
    map: &Tensor<S>,
) -> Result<Tensor<S>> {
    let fs = features.shape();
    let ms = map.shape();
    if ms.c != 1 || ms.n != fs.n || ms.h != fs.h || ms.w != fs.w {
        return Err(Error::BroadcastMismatch { a: fs, b: ms });
    }
    let hw = fs.h * fs.w;
    let mut out = Vec::with_capacity(fs.numel());
    for n in 0..fs.n {
        let m = map.plane(n, 0);
        for c in 0..fs.c {
            let f = features.plane(n, c);
            for i in 0..hw {
                out.push(f[i] * m[i]);
            }
        }
    }
    Tensor::from_vec(fs, out)
}

pub fn mul_broadcast_backward<S: Scalar>(
    features: &Tensor<S>,
    map: &Tensor<S>,
    grad_out: &[S],
    need_features: bool,
    need_map: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let fs = features.shape();
    let hw = fs.h * fs.w;
    let d_features = need_features.then(|| {
        let mut df = Vec::with_capacity(fs.numel());
        for n in 0..fs.n {
            let m = map.plane(n, 0);
            for c in 0..fs.c {
                let g = &grad_out[(n * fs.c + c) * hw..(n * fs.c + c + 1) * hw];
                for i in 0..hw {
                    df.push(g[i] * m[i]);
                }
            }
        }
        df
    });
    let d_map = need_map.then(|| {
        let mut dm = vec![S::zero(); map.shape().numel()];
        for n in 0..fs.n {
            let dm_plane = &mut dm[n * hw..(n + 1) * hw];
            for c in 0..fs.c {
                let f = features.plane(n, c);
                let g = &grad_out[(n * fs.c + c) * hw..(n * fs.c + c + 1) * hw];
                for i in 0..hw {
                    dm_plane[i] = dm_plane[i] + g[i] * f[i];
                }
            }
        }
        dm
    });
    (d_features, d_map)
}

pub fn concat_channels_forward<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts.first().ok_or(Error::ConcatEmpty)?;
    let fs = first.shape();
    let mut total_c = 0;
    for (i, p) in parts.iter().enumerate() {
        let ps = p.shape();
        if ps.n != fs.n || ps.h != fs.h || ps.w != fs.w {
            return Err(Error::ConcatMismatch {
                index: i,
                expected: fs,
                got: ps,
            });
        }
        total_c += ps.c;
    }
    let out_shape = Shape::new(fs.n, total_c, fs.h, fs.w)?;
    let hw = fs.h * fs.w;
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..fs.n {
        for p in parts {
            for c in 0..p.shape().c {
                out.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Split the upstream gradient back into per-part buffers.
pub fn concat_channels_backward<S: Scalar>(parts: &[Tensor<S>], grad_out: &[S]) -> Vec<Vec<S>> {
    let fs = parts[0].shape();
    let hw = fs.h * fs.w;
    let total_c: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut grads: Vec<Vec<S>> = parts
        .iter()
        .map(|p| Vec::with_capacity(p.shape().numel()))
        .collect();
    for n in 0..fs.n {
        let mut c_off = 0;
        for (pi, p) in parts.iter().enumerate() {
            let pc = p.shape().c;
            let start = (n * total_c + c_off) * hw;
            grads[pi].extend_from_slice(&grad_out[start..start + pc * hw]);
            c_off += pc;
        }
    }
    grads
}

/// Slice a contiguous channel range out of a tensor (test and dump utility;
/// the inverse view of [`concat_channels_forward`]).
pub fn slice_channels<S: Scalar>(t: &Tensor<S>, from: usize, to: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if from >= to || to > s.c {
        return Err(Error::DimMismatch {
            dim: "channel slice",
            expected: s.c,
            got: to,
        });
    }
    let out_shape = Shape::new(s.n, to - from, s.h, s.w)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in from..to {
            out.extend_from_slice(t.plane(n, c));
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Sum of all elements, accumulated in f64.
pub fn sum_all<S: Scalar>(input: &Tensor<S>) -> S {
    S::from_f64(input.data().iter().map(|v| v.to_f64_lossy()).sum())
}

pub fn mean_all<S: Scalar>(input: &Tensor<S>) -> S {
    S::from_f64(
        input.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / input.numel() as f64,
    )
}

/// Mean squared difference (the L2 loss term).
pub fn sq_diff_mean<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> S {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&p, &t)| {
            let d = (p - t).to_f64_lossy();
            d * d
        })
        .sum();
    S::from_f64(sum / pred.numel() as f64)
}

/// Mean absolute difference (the L1 loss term).
pub fn abs_diff_mean<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> S {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&p, &t)| (p - t).abs().to_f64_lossy())
        .sum();
    S::from_f64(sum / pred.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Independent direct cross-correlation, element by element.
    fn conv2d_oracle(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: &[f64],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor<f64> {
        let is = input.shape();
        let ws = weight.shape();
        let out_h = (is.h + 2 * padding.0 - ws.h) / stride.0 + 1;
        let out_w = (is.w + 2 * padding.1 - ws.w) / stride.1 + 1;
        Tensor::from_fn(Shape::new(is.n, ws.n, out_h, out_w).unwrap(), |n, co, oh, ow| {
            let mut acc = bias[co];
            for ci in 0..is.c {
                for ki in 0..ws.h {
                    for kj in 0..ws.w {
                        let ih = (oh * stride.0 + ki) as isize - padding.0 as isize;
                        let iw = (ow * stride.1 + kj) as isize - padding.1 as isize;
                        if ih >= 0 && (ih as usize) < is.h && iw >= 0 && (iw as usize) < is.w {
                            acc += input.at(n, ci, ih as usize, iw as usize)
                                * weight.at(co, ci, ki, kj);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scaling_identity() {
        // all-ones 1x1x3x3 through a single 1x1 kernel of value 2 -> all twos
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 3, 3).unwrap(), 1.0);
        let w = Tensor::<f64>::filled(Shape::new(1, 1, 1, 1).unwrap(), 2.0);
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        let y = conv2d_forward(&x, &w, &b, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3).unwrap());
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_strided_output_shape() {
        let x = rng_tensor(Shape::new(1, 1, 4, 4).unwrap(), 3);
        let w = rng_tensor(Shape::new(1, 1, 2, 2).unwrap(), 4);
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        let y = conv2d_forward(&x, &w, &b, (2, 2), (0, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2).unwrap());
    }

    #[test]
    fn conv_matches_direct_oracle() {
        // the 9x1 shape with (4,0) padding used by the attention module
        let x = rng_tensor(Shape::new(1, 2, 5, 5).unwrap(), 7);
        let w = rng_tensor(Shape::new(3, 2, 9, 1).unwrap(), 8);
        let b = Tensor::<f64>::from_vec(
            Shape::new(1, 3, 1, 1).unwrap(),
            vec![0.25, -0.5, 1.0],
        )
        .unwrap();
        let y = conv2d_forward(&x, &w, &b, (1, 1), (4, 0)).unwrap();
        let want = conv2d_oracle(&x, &w, b.data(), (1, 1), (4, 0));
        assert_eq!(y.shape(), want.shape());
        assert!(y.max_abs_diff(&want) < 1e-6, "diff {}", y.max_abs_diff(&want));
    }

    #[test]
    fn conv_matches_oracle_across_shapes() {
        let cases: &[(Shape, Shape, (usize, usize), (usize, usize))] = &[
            (Shape::new(2, 3, 6, 5).unwrap(), Shape::new(4, 3, 3, 3).unwrap(), (1, 1), (1, 1)),
            (Shape::new(1, 2, 6, 6).unwrap(), Shape::new(2, 2, 2, 2).unwrap(), (2, 2), (0, 0)),
            (Shape::new(1, 2, 7, 7).unwrap(), Shape::new(2, 2, 1, 9).unwrap(), (1, 1), (0, 4)),
            (Shape::new(2, 1, 5, 8).unwrap(), Shape::new(3, 1, 3, 3).unwrap(), (2, 1), (1, 2)),
        ];
        for (i, &(is, ws, stride, pad)) in cases.iter().enumerate() {
            let x = rng_tensor(is, 100 + i as u64);
            let w = rng_tensor(ws, 200 + i as u64);
            let b = rng_tensor(Shape::new(1, ws.n, 1, 1).unwrap(), 300 + i as u64);
            let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv2d_oracle(&x, &w, b.data(), stride, pad);
            assert!(y.max_abs_diff(&want) < 1e-9, "case {i}");
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = rng_tensor(Shape::new(1, 3, 4, 4).unwrap(), 11);
        let w = Tensor::<f64>::from_fn(Shape::new(3, 3, 1, 1).unwrap(), |co, ci, _, _| {
            if co == ci {
                1.0
            } else {
                0.0
            }
        });
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1).unwrap());
        let y = conv2d_forward(&x, &w, &b, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3).unwrap());
        let w = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1).unwrap());
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        match conv2d_forward(&x, &w, &b, (1, 1), (0, 0)) {
            Err(Error::DimMismatch { dim, expected, got }) => {
                assert_eq!(dim, "input channels (Cin)");
                assert_eq!((expected, got), (3, 2));
            }
            other => panic!("expected channel mismatch, got {other:?}"),
        }
        // kernel larger than padded input is an error, not a clamp
        let w = Tensor::<f64>::zeros(Shape::new(1, 2, 5, 1).unwrap());
        assert!(matches!(
            conv2d_forward(&x, &w, &b, (1, 1), (0, 0)),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn pixel_shuffle_cell_pattern() {
        // channel k constant k, r=2 -> every 2x2 cell is [[0,1],[2,3]]
        let x = Tensor::<f64>::from_fn(Shape::new(1, 4, 2, 2).unwrap(), |_, c, _, _| c as f64);
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4).unwrap());
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(y.at(0, 0, h, w), ((h % 2) * 2 + (w % 2)) as f64);
            }
        }
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let x = rng_tensor(Shape::new(2, 3, 2, 5).unwrap(), 13);
        let y = pixel_shuffle_forward(&x, 1).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn pixel_shuffle_inverse_roundtrip() {
        let x = rng_tensor(Shape::new(2, 8, 3, 3).unwrap(), 17);
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        // independent inverse rearrangement straight from the index formula
        let mut back = vec![0.0; x.numel()];
        let s = x.shape();
        for n in 0..2 {
            for c in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        for h in 0..3 {
                            for w in 0..3 {
                                back[s.index(n, c * 4 + a * 2 + b, h, w)] =
                                    y.at(n, c, 2 * h + a, 2 * w + b);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(back.as_slice(), x.data());
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2).unwrap());
        assert!(matches!(
            pixel_shuffle_forward(&x, 2),
            Err(Error::ChannelsNotDivisible { channels: 6, rsq: 4 })
        ));
    }

    #[test]
    fn elementwise_analytic_values() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 1, 3).unwrap(),
            vec![0.0, -3.0, 3.0],
        )
        .unwrap();
        let s = sigmoid_forward(&x);
        assert_eq!(s.data()[0], 0.5);
        let r = relu_forward(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn mul_broadcast_halves_with_constant_map() {
        let x = rng_tensor(Shape::new(1, 4, 2, 2).unwrap(), 19);
        let m = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2).unwrap(), 0.5);
        let y = mul_broadcast_forward(&x, &m).unwrap();
        for (a, b) in x.data().iter().zip(y.data().iter()) {
            assert_eq!(*b, a * 0.5);
        }
    }

    #[test]
    fn mul_broadcast_rejects_multichannel_map() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2).unwrap());
        let m = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2).unwrap());
        assert!(matches!(
            mul_broadcast_forward(&x, &m),
            Err(Error::BroadcastMismatch { .. })
        ));
    }

    #[test]
    fn add_requires_identical_shapes() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3).unwrap());
        assert!(add_forward(&a, &b).is_err());
    }

    #[test]
    fn concat_shapes_and_slice_recovery() {
        let a = rng_tensor(Shape::new(1, 2, 2, 2).unwrap(), 23);
        let b = rng_tensor(Shape::new(1, 3, 2, 2).unwrap(), 29);
        let y = concat_channels_forward(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 2, 2).unwrap());
        // channel blocks appear in argument order; slicing recovers part 0 bitwise
        let a2 = slice_channels(&y, 0, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        let b2 = slice_channels(&y, 2, 5).unwrap();
        assert_eq!(b2.data(), b.data());
        // single-part concat is the identity
        let only = concat_channels_forward(&[a.clone()]).unwrap();
        assert_eq!(only.data(), a.data());
    }

    #[test]
    fn concat_rejects_mismatched_spatial() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2).unwrap());
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 2).unwrap());
        match concat_channels_forward(&[a, b]) {
            Err(Error::ConcatMismatch { index: 1, .. }) => {}
            other => panic!("expected mismatch on part 1, got {other:?}"),
        }
    }

    #[test]
    fn loss_terms_trivial_values() {
        let p = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2).unwrap(), 0.7);
        assert_eq!(sq_diff_mean(&p, &p), 0.0);
        assert_eq!(abs_diff_mean(&p, &p), 0.0);
        let t = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2).unwrap(), -1.3);
        // pred - target == 2 everywhere -> (4, 2)
        assert!((sq_diff_mean(&p, &t) - 4.0).abs() < 1e-15);
        assert!((abs_diff_mean(&p, &t) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_terms_match_direct_summation_oracle() {
        let p = rng_tensor(Shape::new(1, 1, 4, 4).unwrap(), 31);
        let t = rng_tensor(Shape::new(1, 1, 4, 4).unwrap(), 37);
        let mut l2 = 0.0;
        let mut l1 = 0.0;
        for (a, b) in p.data().iter().zip(t.data().iter()) {
            l2 += (a - b) * (a - b);
            l1 += (a - b).abs();
        }
        l2 /= 16.0;
        l1 /= 16.0;
        assert!((sq_diff_mean(&p, &t) - l2).abs() < 1e-12);
        assert!((abs_diff_mean(&p, &t) - l1).abs() < 1e-12);
        // symmetric in sign: swapping pred and target changes nothing
        assert_eq!(sq_diff_mean(&p, &t), sq_diff_mean(&t, &p));
        assert_eq!(abs_diff_mean(&p, &t), abs_diff_mean(&t, &p));
    }
}
