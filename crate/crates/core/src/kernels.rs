//! Raw compute kernels behind the recorded tensor primitives.
//!
//! Shapes are validated by the callers in [`crate::tape`]; these loops assume
//! `[batch, channels, height, width]` layout and consistent operands.

use alloc::vec;
use num_traits::Float;

use crate::tensor::Tensor;

pub(crate) fn conv2d_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Cross-correlation of `input [N,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`
/// plus broadcast `bias [Cout]`, zero padding.
pub(crate) fn conv2d_fwd<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (n, cin, h, w) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let oh = conv2d_out_extent(h, kh, stride, padding);
    let ow = conv2d_out_extent(w, kw, stride, padding);

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];

    let mut o = 0usize;
    for ni in 0..n {
        for co in 0..cout {
            let kc = co * cin * kh * kw;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - padding as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - padding as isize;
                    let mut acc = b[co];
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * h * w;
                        let kbase = kc + ci * kh * kw;
                        for dy in 0..kh {
                            let iy = iy0 + dy as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let krow = kbase + dy * kw;
                            for dx in 0..kw {
                                let ix = ix0 + dx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + x[xrow + ix as usize] * k[krow + dx];
                            }
                        }
                    }
                    out[o] = acc;
                    o += 1;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, kernel and bias.
/// The input gradient is skipped when `need_input_grad` is false.
pub(crate) fn conv2d_bwd<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, w) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let (_, _, oh, ow) = dims4(upstream);

    let x = input.data();
    let k = kernel.data();
    let go = upstream.data();

    let mut gx = if need_input_grad {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); cout];

    let mut o = 0usize;
    for ni in 0..n {
        for co in 0..cout {
            let kc = co * cin * kh * kw;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - padding as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - padding as isize;
                    let g = go[o];
                    o += 1;
                    gb[co] = gb[co] + g;
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * h * w;
                        let kbase = kc + ci * kh * kw;
                        for dy in 0..kh {
                            let iy = iy0 + dy as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let krow = kbase + dy * kw;
                            for dx in 0..kw {
                                let ix = ix0 + dx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = xrow + ix as usize;
                                gk[krow + dx] = gk[krow + dx] + g * x[xi];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] = gx[xi] + g * k[krow + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    (
        gx.map(|v| Tensor::from_vec(input.shape(), v).unwrap()),
        Tensor::from_vec(kernel.shape(), gk).unwrap(),
        Tensor::from_vec(&[cout], gb).unwrap(),
    )
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub(crate) fn upsample2x_fwd<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(input);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let irow = ibase + (y / 2) * w;
            let orow = obase + y * ow;
            for xo in 0..ow {
                out[orow + xo] = x[irow + xo / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).unwrap()
}

/// Backward of 2x upsampling: sums each 2x2 block into its parent pixel.
pub(crate) fn upsample2x_bwd<T: Float>(upstream: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dims4(upstream);
    let (h, w) = (oh / 2, ow / 2);
    let go = upstream.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let irow = ibase + (y / 2) * w;
            let orow = obase + y * ow;
            for xo in 0..ow {
                let i = irow + xo / 2;
                gx[i] = gx[i] + go[orow + xo];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], gx).unwrap()
}

/// Concatenates along the channel axis.
pub(crate) fn concat_channels_fwd<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = dims4(a);
    let (_, cb, _, _) = dims4(b);
    let plane = h * w;
    let mut out = vec![T::zero(); n * (ca + cb) * plane];
    for ni in 0..n {
        let dst = ni * (ca + cb) * plane;
        out[dst..dst + ca * plane].copy_from_slice(&a.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        out[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out).unwrap()
}

/// Splits an upstream gradient back into the two concatenated operands.
pub(crate) fn concat_channels_bwd<T: Float>(
    upstream: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, _, h, w) = dims4(upstream);
    let plane = h * w;
    let go = upstream.data();
    let mut ga = vec![T::zero(); n * ca * plane];
    let mut gb = vec![T::zero(); n * cb * plane];
    for ni in 0..n {
        let src = ni * (ca + cb) * plane;
        ga[ni * ca * plane..(ni + 1) * ca * plane]
            .copy_from_slice(&go[src..src + ca * plane]);
        gb[ni * cb * plane..(ni + 1) * cb * plane]
            .copy_from_slice(&go[src + ca * plane..src + (ca + cb) * plane]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], ga).unwrap(),
        Tensor::from_vec(&[n, cb, h, w], gb).unwrap(),
    )
}

pub(crate) fn dims4<T>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected a rank-4 tensor");
    (s[0], s[1], s[2], s[3])
}
