//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] is an append-only arena of tensor nodes. Forward methods
//! record the primitive that produced each node; [`Tape::backward`] walks the
//! arena in reverse (which is a reverse topological order, since an operation
//! can only reference earlier nodes) and accumulates gradients additively
//! into every node that requires them. One tape services one forward/backward
//! pass; independent tapes share no state and may run concurrently.
//!
//! Every primitive verifies that its output is finite, so NaNs surface as
//! errors at the operation that produced them instead of propagating.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::tensor::Tensor;
use crate::warp as warp_kernels;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    MinReduce(usize),
    MaxReduce(usize),
    LeakyRelu { x: usize, slope: T },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Upsample2x(usize),
    ConcatChannels(usize, usize),
    WarpBilinear { image: usize, field: usize },
    FieldGradient(usize),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording arena for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_fault: bool,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_fault: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Verification hook: corrupts one backward rule (the negative branch of
    /// leaky ReLU) so gradient checks can prove they detect faults.
    pub fn inject_backward_fault(&mut self, enabled: bool) {
        self.backward_fault = enabled;
    }

    /// Records a non-trainable leaf (network input, constant kernel, ...).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Val> {
        self.leaf(value, false)
    }

    /// Records a trainable leaf; `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Val> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Val> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: "tape leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Val) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` target w.r.t. `v`. `None` means the
    /// value was not on the differentiated path (gradient identically zero).
    pub fn grad(&self, v: Val) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn grad_or_zeros(&self, v: Val) -> Tensor<T> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Val {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Val(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Val> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Val,
        b: Val,
        make: impl Fn(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Val> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: name,
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .unwrap();
        let rg = self.needs(&[a.0, b.0]);
        self.record(name, out, rg, make(a.0, b.0))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Val, c: T) -> Result<Val> {
        let out = self.nodes[x.0].value.scale(c);
        let rg = self.needs(&[x.0]);
        self.record("scale", out, rg, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Val, c: T) -> Result<Val> {
        let out = self.nodes[x.0].value.map(|v| v + c);
        let rg = self.needs(&[x.0]);
        self.record("add_scalar", out, rg, Op::AddScalar(x.0))
    }

    pub fn square(&mut self, x: Val) -> Result<Val> {
        let out = self.nodes[x.0].value.map(|v| v * v);
        let rg = self.needs(&[x.0]);
        self.record("square", out, rg, Op::Square(x.0))
    }

    pub fn sqrt(&mut self, x: Val) -> Result<Val> {
        let out = self.nodes[x.0].value.map(|v| v.sqrt());
        let rg = self.needs(&[x.0]);
        self.record("sqrt", out, rg, Op::Sqrt(x.0))
    }

    pub fn sum(&mut self, x: Val) -> Result<Val> {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.needs(&[x.0]);
        self.record("sum", out, rg, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Val) -> Result<Val> {
        if self.nodes[x.0].value.is_empty() {
            return Err(CoreError::Empty("mean"));
        }
        let out = Tensor::scalar(self.nodes[x.0].value.mean());
        let rg = self.needs(&[x.0]);
        self.record("mean", out, rg, Op::Mean(x.0))
    }

    pub fn min_reduce(&mut self, x: Val) -> Result<Val> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(CoreError::Empty("min_reduce"));
        }
        let m = v.data().iter().fold(T::infinity(), |acc, &e| acc.min(e));
        let rg = self.needs(&[x.0]);
        self.record("min_reduce", Tensor::scalar(m), rg, Op::MinReduce(x.0))
    }

    pub fn max_reduce(&mut self, x: Val) -> Result<Val> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(CoreError::Empty("max_reduce"));
        }
        let m = v.data().iter().fold(T::neg_infinity(), |acc, &e| acc.max(e));
        let rg = self.needs(&[x.0]);
        self.record("max_reduce", Tensor::scalar(m), rg, Op::MaxReduce(x.0))
    }

    /// Elementwise `y = x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Val, slope: T) -> Result<Val> {
        if slope <= T::zero() || slope >= T::one() {
            return Err(CoreError::Config(alloc::format!(
                "leaky_relu slope must be in (0,1), got {:?}",
                slope.to_f64()
            )));
        }
        let out = self.nodes[x.0]
            .value
            .map(|v| if v >= T::zero() { v } else { slope * v });
        let rg = self.needs(&[x.0]);
        self.record("leaky_relu", out, rg, Op::LeakyRelu { x: x.0, slope })
    }

    /// 2-D cross-correlation with zero padding and broadcast bias.
    pub fn conv2d(
        &mut self,
        input: Val,
        kernel: Val,
        bias: Val,
        stride: usize,
        padding: usize,
    ) -> Result<Val> {
        let xin = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        if xin.shape().len() != 4 || k.shape().len() != 4 {
            return Err(CoreError::Contract("conv2d expects rank-4 input and kernel"));
        }
        let (_, cin, h, w) = kernels::dims4(xin);
        let (cout, kcin, kh, kw) = kernels::dims4(k);
        if cin != kcin {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, kh, kw],
                got: k.shape().to_vec(),
            });
        }
        if b.shape() != [cout] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![cout],
                got: b.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(CoreError::Config(alloc::format!(
                "conv2d: invalid stride/padding for {}x{} input with {}x{} kernel",
                h, w, kh, kw
            )));
        }
        let out = kernels::conv2d_fwd(xin, k, b, stride, padding);
        let rg = self.needs(&[input.0, kernel.0, bias.0]);
        self.record(
            "conv2d",
            out,
            rg,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
                padding,
            },
        )
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2x_nearest(&mut self, x: Val) -> Result<Val> {
        if self.nodes[x.0].value.shape().len() != 4 {
            return Err(CoreError::Contract("upsample2x_nearest expects a rank-4 tensor"));
        }
        let out = kernels::upsample2x_fwd(&self.nodes[x.0].value);
        let rg = self.needs(&[x.0]);
        self.record("upsample2x_nearest", out, rg, Op::Upsample2x(x.0))
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(&mut self, a: Val, b: Val) -> Result<Val> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 4 || vb.shape().len() != 4 {
            return Err(CoreError::Contract("concat_channels expects rank-4 tensors"));
        }
        let (na, _, ha, wa) = kernels::dims4(va);
        let (nb, _, hb, wb) = kernels::dims4(vb);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(CoreError::ShapeMismatch {
                op: "concat_channels",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let out = kernels::concat_channels_fwd(va, vb);
        let rg = self.needs(&[a.0, b.0]);
        self.record("concat_channels", out, rg, Op::ConcatChannels(a.0, b.0))
    }

    /// Bilinear warp of `image [N,C,H,W]` by displacement `field [N,2,H,W]`,
    /// differentiable in both arguments.
    pub fn warp_bilinear(&mut self, image: Val, field: Val) -> Result<Val> {
        let (img, fld) = (&self.nodes[image.0].value, &self.nodes[field.0].value);
        warp_kernels::validate_warp_shapes(img, fld)?;
        let out = warp_kernels::warp_bilinear_fwd(img, fld);
        let rg = self.needs(&[image.0, field.0]);
        self.record(
            "warp_bilinear",
            out,
            rg,
            Op::WarpBilinear {
                image: image.0,
                field: field.0,
            },
        )
    }

    /// Forward finite differences of a displacement field `[N,2,H,W]`,
    /// producing `[N,4,H,W]` ordered (dx/dx, dx/dy, dy/dx, dy/dy).
    pub fn field_gradient(&mut self, field: Val) -> Result<Val> {
        let fld = &self.nodes[field.0].value;
        if fld.shape().len() != 4 || fld.shape()[1] != 2 {
            return Err(CoreError::Contract("field_gradient expects a [N,2,H,W] tensor"));
        }
        let out = warp_kernels::field_gradient_fwd(fld);
        let rg = self.needs(&[field.0]);
        self.record("field_gradient", out, rg, Op::FieldGradient(field.0))
    }

    /// Backpropagates from a scalar loss, filling gradients for every node on
    /// the path that requires them.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Contract("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, go: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, go.clone());
                self.accumulate(grads, b, go.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, go.clone());
                self.accumulate(grads, b, go.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.accumulate(grads, a, go.mul(vb).unwrap());
                self.accumulate(grads, b, go.mul(va).unwrap());
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let ga = Tensor::from_vec(
                    go.shape(),
                    go.data().iter().zip(vb.data()).map(|(&g, &y)| g / y).collect(),
                )
                .unwrap();
                let gb = Tensor::from_vec(
                    go.shape(),
                    go.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Scale(x, c) => self.accumulate(grads, x, go.scale(c)),
            Op::AddScalar(x) => self.accumulate(grads, x, go.clone()),
            Op::Square(x) => {
                let vx = &self.nodes[x].value;
                let g = Tensor::from_vec(
                    vx.shape(),
                    vx.data()
                        .iter()
                        .zip(go.data())
                        .map(|(&v, &g)| (T::one() + T::one()) * v * g)
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, x, g);
            }
            Op::Sqrt(x) => {
                let out = &node.value;
                let g = Tensor::from_vec(
                    out.shape(),
                    out.data()
                        .iter()
                        .zip(go.data())
                        .map(|(&o, &g)| g / ((T::one() + T::one()) * o))
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.nodes[x].value.shape(), go.item());
                self.accumulate(grads, x, g);
            }
            Op::Mean(x) => {
                let n = T::from(self.nodes[x].value.len()).unwrap();
                let g = Tensor::full(self.nodes[x].value.shape(), go.item() / n);
                self.accumulate(grads, x, g);
            }
            Op::MinReduce(x) => {
                self.accumulate(grads, x, extremum_grad(&self.nodes[x].value, go.item(), true));
            }
            Op::MaxReduce(x) => {
                self.accumulate(grads, x, extremum_grad(&self.nodes[x].value, go.item(), false));
            }
            Op::LeakyRelu { x, slope } => {
                // Fault hook: overstate the negative-branch slope so the
                // gradient checker has something real to catch.
                let s = if self.backward_fault {
                    slope + slope / (T::one() + T::one())
                } else {
                    slope
                };
                let vx = &self.nodes[x].value;
                let g = Tensor::from_vec(
                    vx.shape(),
                    vx.data()
                        .iter()
                        .zip(go.data())
                        .map(|(&v, &g)| if v >= T::zero() { g } else { s * g })
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, x, g);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let need_input = self.nodes[input].requires_grad;
                let (gx, gk, gb) = kernels::conv2d_bwd(
                    &self.nodes[input].value,
                    &self.nodes[kernel].value,
                    go,
                    stride,
                    padding,
                    need_input,
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, input, gx);
                }
                self.accumulate(grads, kernel, gk);
                self.accumulate(grads, bias, gb);
            }
            Op::Upsample2x(x) => {
                self.accumulate(grads, x, kernels::upsample2x_bwd(go));
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a].value.shape()[1];
                let cb = self.nodes[b].value.shape()[1];
                let (ga, gb) = kernels::concat_channels_bwd(go, ca, cb);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::WarpBilinear { image, field } => {
                let need_image = self.nodes[image].requires_grad;
                let (gi, gf) = warp_kernels::warp_bilinear_bwd(
                    &self.nodes[image].value,
                    &self.nodes[field].value,
                    go,
                    need_image,
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, image, gi);
                }
                self.accumulate(grads, field, gf);
            }
            Op::FieldGradient(x) => {
                self.accumulate(grads, x, warp_kernels::field_gradient_bwd(go));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, contribution: Tensor<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => {
                g.axpy(T::one(), &contribution).unwrap();
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn extremum_grad<T: Float>(input: &Tensor<T>, go: T, minimum: bool) -> Tensor<T> {
    let data = input.data();
    let mut best = 0usize;
    for (i, &v) in data.iter().enumerate() {
        let better = if minimum { v < data[best] } else { v > data[best] };
        if better {
            best = i;
        }
    }
    let mut g = Tensor::zeros(input.shape());
    g.data_mut()[best] = go;
    g
}

/// Compares analytic gradients against central finite differences.
///
/// `f` rebuilds the scalar loss on a fresh tape from leaf values in the order
/// of `params`. At most `max_coords` coordinates per parameter are probed
/// (all of them when the parameter is small), chosen by the seeded rng.
/// Returns the maximum of `|analytic - fd| / max(1, |fd|)` over all probes.
pub fn grad_check<T, F>(
    f: &mut F,
    params: &[Tensor<T>],
    eps: T,
    max_coords: usize,
    seed: u64,
) -> Result<T>
where
    T: Float,
    F: FnMut(&mut Tape<T>, &[Val]) -> Result<Val>,
{
    let lo = T::from(1e-7).unwrap();
    let hi = T::from(1e-4).unwrap();
    if eps < lo || eps > hi {
        return Err(CoreError::Config(alloc::format!(
            "grad_check eps must lie in [1e-7, 1e-4], got {:?}",
            eps.to_f64()
        )));
    }

    let mut tape = Tape::new();
    let vals: Vec<Val> = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &vals)?;
    if !tape.value(loss).is_scalar() {
        return Err(CoreError::Contract("grad_check requires a scalar loss"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vals.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut eval = |probe: &[Tensor<T>]| -> Result<T> {
        let mut t = Tape::new();
        let vs: Vec<Val> = probe
            .iter()
            .map(|p| t.param(p.clone()))
            .collect::<Result<_>>()?;
        let l = f(&mut t, &vs)?;
        let out = t.scalar_value(l);
        if !out.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check probe" });
        }
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel = T::zero();
    let two = T::one() + T::one();

    for (pi, p) in params.iter().enumerate() {
        let coords = sample_coords(p.len(), max_coords, &mut rng);
        for ci in coords {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let fd = (up - down) / (two * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - fd).abs() / T::one().max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn sample_coords(len: usize, max_coords: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    // Partial Fisher-Yates over the index set.
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..max_coords {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(max_coords);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_scalar_and_shape_formula() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 1, 1], vec![5.0f64]).unwrap()).unwrap();
        let k = tape.input(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        // 4x4 input, 3x3 kernel, stride 2, pad 1 -> 2x2
        let x = tape.input(Tensor::<f64>::zeros(&[1, 1, 4, 4])).unwrap();
        let k = tape.input(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_all_ones_hand_summed() {
        // all-ones 3x3 input and kernel, pad 1: center sees 9 pixels,
        // corners see 4, edges see 6.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0f64)).unwrap();
        let k = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let want = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(tape.value(y).data(), &want);
    }

    #[test]
    fn conv_identity_center_kernel_is_identity_map() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[2, 1, 5, 6], |i| (i as f64) * 0.37 - 3.0);
        let x = tape.input(img.clone()).unwrap();
        let mut kdata = vec![0.0f64; 9];
        kdata[4] = 1.0;
        let k = tape.input(Tensor::from_vec(&[1, 1, 3, 3], kdata).unwrap()).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), img.data());
    }

    #[test]
    fn conv_channel_mismatch_and_nan_input_are_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[1, 2, 4, 4])).unwrap();
        let k = tape.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            tape.conv2d(x, k, b, 1, 1),
            Err(CoreError::ShapeMismatch { .. })
        ));

        let mut bad = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(tape.input(bad), Err(CoreError::NonFinite { .. })));
    }

    #[test]
    fn leaky_relu_values_and_slope_domain() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::from_vec(&[2], vec![2.0f64, -1.0]).unwrap())
            .unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.2]);
        assert!(tape.leaky_relu(x, 0.0).is_err());
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn upsample_replicates_and_backward_sums_blocks() {
        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = tape.upsample2x_nearest(x).unwrap();
        let want = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(tape.value(y).data(), &want);

        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn concat_shapes_zero_channel_identity_and_exact_grad_split() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64)).unwrap();
        let b = tape.param(Tensor::from_fn(&[1, 3, 2, 2], |i| -(i as f64))).unwrap();
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 2, 2]);

        let empty = tape.input(Tensor::<f64>::zeros(&[1, 0, 2, 2])).unwrap();
        let same = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());

        // weight the concat so each operand's gradient slice is recognizable
        let w = tape
            .input(Tensor::from_fn(&[1, 5, 2, 2], |i| (i + 1) as f64))
            .unwrap();
        let prod = tape.mul(c, w).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        for i in 0..8 {
            assert_eq!(ga.data()[i], (i + 1) as f64);
        }
        for i in 0..12 {
            assert_eq!(gb.data()[i], (i + 9) as f64);
        }

        let bad = tape.input(Tensor::<f64>::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn backward_power_rule_and_constant_loss() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let sq = tape.square(theta).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(theta).unwrap().data(), &[6.0]);

        // a loss that never touches theta leaves its gradient zero
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let c = tape.input(Tensor::scalar(7.0)).unwrap();
        let loss = tape.mul(c, c).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(theta).is_none());
        assert_eq!(tape.grad_or_zeros(theta).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[3])).unwrap();
        assert!(matches!(tape.backward(x), Err(CoreError::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // loss = x*x + x -> dloss/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.add(sq, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn div_and_reductions_have_correct_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(&[2], vec![1.0f64, 4.0]).unwrap()).unwrap();
        let b = tape.param(Tensor::from_vec(&[2], vec![2.0f64, 8.0]).unwrap()).unwrap();
        let q = tape.div(a, b).unwrap();
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.5, 0.125]);
        assert_eq!(tape.grad(b).unwrap().data(), &[-0.25, -0.0625]);

        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::from_vec(&[4], vec![3.0f64, 1.0, 2.0, 1.0]).unwrap())
            .unwrap();
        let m = tape.min_reduce(x).unwrap();
        assert_eq!(tape.scalar_value(m), 1.0);
        tape.backward(m).unwrap();
        // gradient routed to the first minimum
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::from_vec(&[3], vec![3.0f64, 5.0, 5.0]).unwrap())
            .unwrap();
        let m = tape.max_reduce(x).unwrap();
        assert_eq!(tape.scalar_value(m), 5.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn division_by_zero_surfaces_as_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(1.0f64)).unwrap();
        let b = tape.input(Tensor::scalar(0.0f64)).unwrap();
        assert!(matches!(tape.div(a, b), Err(CoreError::NonFinite { .. })));
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .param(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64) * 0.3 - 2.0))
                .unwrap();
            let k = tape
                .param(Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7) % 5) as f64 * 0.1))
                .unwrap();
            let b = tape.param(Tensor::zeros(&[2])).unwrap();
            let y = tape.conv2d(x, k, b, 1, 1).unwrap();
            let r = tape.leaky_relu(y, 0.2).unwrap();
            let loss = tape.mean(r).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                tape.grad(k).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_quadratic_is_exact_to_roundoff() {
        let params = [Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let err = grad_check(
            &mut |tape, vals| {
                let sq = tape.square(vals[0])?;
                tape.sum(sq)
            },
            &params,
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic grad check error {err}");
    }

    #[test]
    fn grad_check_validates_eps_range() {
        let params = [Tensor::scalar(1.0f64)];
        let mut f = |tape: &mut Tape<f64>, vals: &[Val]| tape.square(vals[0]);
        assert!(grad_check(&mut f, &params, 1e-8, 4, 0).is_err());
        assert!(grad_check(&mut f, &params, 1e-3, 4, 0).is_err());
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let params = [Tensor::from_fn(&[8], |i| (i as f64) * 0.4 - 1.5)];
        let mut f = |fault: bool| {
            let mut probe = move |tape: &mut Tape<f64>, vals: &[Val]| {
                tape.inject_backward_fault(fault);
                let r = tape.leaky_relu(vals[0], 0.2)?;
                let sq = tape.square(r)?;
                tape.sum(sq)
            };
            grad_check(&mut probe, &params, 1e-5, 8, 1).unwrap()
        };
        assert!(f(false) < 1e-9);
        assert!(f(true) > 1e-2, "fault not detected: {}", f(true));
    }
}
