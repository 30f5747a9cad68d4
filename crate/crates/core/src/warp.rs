//! Differentiable spatial transformer and label-safe warping.
//!
//! A deformation field stores one displacement vector (dx, dy) per pixel, in
//! pixels. Warping samples the moving image at `p + field(p)`: bilinear
//! interpolation for intensities, nearest-neighbor for integer label maps.
//! Sample positions outside the image are clamped to the border.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::kernels::dims4;
use crate::tensor::Tensor;

/// Per-pixel displacement map `[2, H, W]`; channel 0 is dx (columns),
/// channel 1 is dy (rows), both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField<T> {
    data: Tensor<T>,
}

impl<T: Float> DeformationField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "DeformationField::new",
                expected: vec![2, 0, 0],
                got: data.shape().to_vec(),
            });
        }
        if !data.all_finite() {
            return Err(CoreError::NonFinite {
                op: "DeformationField::new",
            });
        }
        Ok(DeformationField { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DeformationField {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn dx(&self) -> &[T] {
        &self.data.data()[..self.height() * self.width()]
    }

    pub fn dy(&self) -> &[T] {
        &self.data.data()[self.height() * self.width()..]
    }

    /// Mean Euclidean displacement magnitude over all pixels.
    pub fn mean_magnitude(&self) -> T {
        let plane = self.height() * self.width();
        if plane == 0 {
            return T::zero();
        }
        let (dx, dy) = (self.dx(), self.dy());
        let mut acc = T::zero();
        for i in 0..plane {
            acc = acc + (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
        }
        acc / T::from(plane).unwrap()
    }

    pub fn max_magnitude(&self) -> T {
        let plane = self.height() * self.width();
        let (dx, dy) = (self.dx(), self.dy());
        let mut m = T::zero();
        for i in 0..plane {
            m = m.max((dx[i] * dx[i] + dy[i] * dy[i]).sqrt());
        }
        m
    }
}

/// Integer-labelled segmentation map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::ShapeMismatch {
                op: "LabelMap::new",
                expected: vec![height * width],
                got: vec![data.len()],
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Distinct labels present in the map.
    pub fn label_set(&self) -> BTreeSet<u32> {
        self.data.iter().copied().collect()
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

/// Resamples `image [1,C,H,W]` at positions displaced by `field`.
pub fn warp_bilinear<T: Float>(image: &Tensor<T>, field: &DeformationField<T>) -> Result<Tensor<T>> {
    let batched = field_as_batch(field);
    validate_warp_shapes(image, &batched)?;
    if image.shape()[0] != 1 {
        return Err(CoreError::Contract("warp_bilinear expects a single-image batch"));
    }
    if !image.all_finite() {
        return Err(CoreError::NonFinite { op: "warp_bilinear" });
    }
    Ok(warp_bilinear_fwd(image, &batched))
}

/// Propagates labels along `field` with nearest-neighbor sampling; the output
/// label set is always a subset of the input's.
pub fn warp_nearest<T: Float>(labels: &LabelMap, field: &DeformationField<T>) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if field.height() != h || field.width() != w {
        return Err(CoreError::ShapeMismatch {
            op: "warp_nearest",
            expected: vec![2, h, w],
            got: field.tensor().shape().to_vec(),
        });
    }
    let (dx, dy) = (field.dx(), field.dy());
    let mut out = vec![0u32; h * w];
    let half = T::from(0.5).unwrap();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::from(x).unwrap() + dx[i];
            let sy = T::from(y).unwrap() + dy[i];
            // round half away from zero, then clamp to bounds
            let rx = (sx + sx.signum() * half).trunc();
            let ry = (sy + sy.signum() * half).trunc();
            let cx = clamp_index(rx, w);
            let cy = clamp_index(ry, h);
            out[i] = labels.get(cy, cx);
        }
    }
    LabelMap::new(h, w, out)
}

/// Forward finite differences of a field, `[2,H,W] -> [2,2,H,W]`, ordered
/// (component, axis) with axis 0 = d/dx and axis 1 = d/dy. The difference at
/// the last column/row is zero (replicate boundary).
pub fn field_gradient<T: Float>(field: &DeformationField<T>) -> Tensor<T> {
    let batched = field_as_batch(field);
    let g = field_gradient_fwd(&batched);
    let (h, w) = (field.height(), field.width());
    g.reshape(&[2, 2, h, w]).unwrap()
}

fn clamp_index<T: Float>(v: T, extent: usize) -> usize {
    let max = T::from(extent - 1).unwrap();
    let c = v.max(T::zero()).min(max);
    c.to_usize().unwrap()
}

fn field_as_batch<T: Float>(field: &DeformationField<T>) -> Tensor<T> {
    let (h, w) = (field.height(), field.width());
    field.tensor().clone().reshape(&[1, 2, h, w]).unwrap()
}

pub(crate) fn validate_warp_shapes<T: Float>(image: &Tensor<T>, field: &Tensor<T>) -> Result<()> {
    if image.shape().len() != 4 || field.shape().len() != 4 {
        return Err(CoreError::Contract("warp expects rank-4 image and field"));
    }
    let (n, _, h, w) = dims4(image);
    let (fn_, fc, fh, fw) = dims4(field);
    if fc != 2 || (n, h, w) != (fn_, fh, fw) {
        return Err(CoreError::ShapeMismatch {
            op: "warp_bilinear",
            expected: vec![n, 2, h, w],
            got: field.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn warp_bilinear_fwd<T: Float>(image: &Tensor<T>, field: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(image);
    let img = image.data();
    let fld = field.data();
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];

    for ni in 0..n {
        let fbase = ni * 2 * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = sample_coords(fld, fbase, p, x, y, h, w);
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let v00 = img[base + s.y0 * w + s.x0];
                    let v01 = img[base + s.y0 * w + s.x1];
                    let v10 = img[base + s.y1 * w + s.x0];
                    let v11 = img[base + s.y1 * w + s.x1];
                    let top = (T::one() - s.fx) * v00 + s.fx * v01;
                    let bot = (T::one() - s.fx) * v10 + s.fx * v11;
                    out[base + p] = (T::one() - s.fy) * top + s.fy * bot;
                }
            }
        }
    }
    Tensor::from_vec(image.shape(), out).unwrap()
}

/// Gradients of the bilinear warp w.r.t. image (optional) and field.
/// At sample positions pinned by the border clamp the coordinate gradient is
/// zero; exactly-integer coordinates use the right-continuous sub-gradient.
pub(crate) fn warp_bilinear_bwd<T: Float>(
    image: &Tensor<T>,
    field: &Tensor<T>,
    upstream: &Tensor<T>,
    need_image_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, w) = dims4(image);
    let img = image.data();
    let fld = field.data();
    let go = upstream.data();
    let plane = h * w;

    let mut gi = if need_image_grad {
        Some(vec![T::zero(); img.len()])
    } else {
        None
    };
    let mut gf = vec![T::zero(); fld.len()];

    for ni in 0..n {
        let fbase = ni * 2 * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = sample_coords(fld, fbase, p, x, y, h, w);
                let mut acc_dx = T::zero();
                let mut acc_dy = T::zero();
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let g = go[base + p];
                    let v00 = img[base + s.y0 * w + s.x0];
                    let v01 = img[base + s.y0 * w + s.x1];
                    let v10 = img[base + s.y1 * w + s.x0];
                    let v11 = img[base + s.y1 * w + s.x1];
                    if let Some(gi) = gi.as_mut() {
                        gi[base + s.y0 * w + s.x0] =
                            gi[base + s.y0 * w + s.x0] + g * (T::one() - s.fx) * (T::one() - s.fy);
                        gi[base + s.y0 * w + s.x1] =
                            gi[base + s.y0 * w + s.x1] + g * s.fx * (T::one() - s.fy);
                        gi[base + s.y1 * w + s.x0] =
                            gi[base + s.y1 * w + s.x0] + g * (T::one() - s.fx) * s.fy;
                        gi[base + s.y1 * w + s.x1] = gi[base + s.y1 * w + s.x1] + g * s.fx * s.fy;
                    }
                    let d_sx = (T::one() - s.fy) * (v01 - v00) + s.fy * (v11 - v10);
                    let d_sy = (T::one() - s.fx) * (v10 - v00) + s.fx * (v11 - v01);
                    acc_dx = acc_dx + g * d_sx;
                    acc_dy = acc_dy + g * d_sy;
                }
                if !s.clamped_x {
                    gf[fbase + p] = gf[fbase + p] + acc_dx;
                }
                if !s.clamped_y {
                    gf[fbase + plane + p] = gf[fbase + plane + p] + acc_dy;
                }
            }
        }
    }
    (
        gi.map(|v| Tensor::from_vec(image.shape(), v).unwrap()),
        Tensor::from_vec(field.shape(), gf).unwrap(),
    )
}

struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    clamped_x: bool,
    clamped_y: bool,
}

#[inline]
fn sample_coords<T: Float>(
    fld: &[T],
    fbase: usize,
    p: usize,
    x: usize,
    y: usize,
    h: usize,
    w: usize,
) -> Sample<T> {
    let plane = h * w;
    let sx = T::from(x).unwrap() + fld[fbase + p];
    let sy = T::from(y).unwrap() + fld[fbase + plane + p];
    let max_x = T::from(w - 1).unwrap();
    let max_y = T::from(h - 1).unwrap();
    let clamped_x = sx < T::zero() || sx > max_x;
    let clamped_y = sy < T::zero() || sy > max_y;
    let cx = sx.max(T::zero()).min(max_x);
    let cy = sy.max(T::zero()).min(max_y);
    let x0f = cx.floor();
    let y0f = cy.floor();
    let x0 = x0f.to_usize().unwrap();
    let y0 = y0f.to_usize().unwrap();
    Sample {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: cx - x0f,
        fy: cy - y0f,
        clamped_x,
        clamped_y,
    }
}

pub(crate) fn field_gradient_fwd<T: Float>(field: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = dims4(field);
    let fld = field.data();
    let plane = h * w;
    let mut out = vec![T::zero(); n * 4 * plane];
    for ni in 0..n {
        for comp in 0..2 {
            let src = (ni * 2 + comp) * plane;
            let ddx = (ni * 4 + comp * 2) * plane;
            let ddy = ddx + plane;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if x + 1 < w {
                        out[ddx + p] = fld[src + p + 1] - fld[src + p];
                    }
                    if y + 1 < h {
                        out[ddy + p] = fld[src + p + w] - fld[src + p];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, 4, h, w], out).unwrap()
}

pub(crate) fn field_gradient_bwd<T: Float>(upstream: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = dims4(upstream);
    let go = upstream.data();
    let plane = h * w;
    let mut gf = vec![T::zero(); n * 2 * plane];
    for ni in 0..n {
        for comp in 0..2 {
            let dst = (ni * 2 + comp) * plane;
            let ddx = (ni * 4 + comp * 2) * plane;
            let ddy = ddx + plane;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if x + 1 < w {
                        let g = go[ddx + p];
                        gf[dst + p + 1] = gf[dst + p + 1] + g;
                        gf[dst + p] = gf[dst + p] - g;
                    }
                    if y + 1 < h {
                        let g = go[ddy + p];
                        gf[dst + p + w] = gf[dst + p + w] + g;
                        gf[dst + p] = gf[dst + p] - g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, 2, h, w], gf).unwrap()
}
