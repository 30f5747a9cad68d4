//! The unsupervised registration objective:
//! similarity(fixed, warped moving) + lambda * field smoothness + weight decay.
//!
//! Similarity is either plain MSE or the negative squared local
//! cross-correlation computed over zero-padded square windows. Weight decay
//! is an explicit loss term so the injected gradient noise sees it like any
//! other contribution.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Stabilizer added to the local correlation denominator on flat patches.
pub const EPS_CC: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    NegLcc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T> {
    pub similarity: Similarity,
    pub lambda: T,
    pub lcc_window: usize,
    pub weight_decay: T,
}

impl<T: Float> LossConfig<T> {
    /// MSE similarity with the given smoothness weight and weight decay.
    pub fn mse(lambda: T, weight_decay: T) -> Self {
        LossConfig {
            similarity: Similarity::Mse,
            lambda,
            lcc_window: 9,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < T::zero() {
            return Err(CoreError::Config("lambda must be >= 0".into()));
        }
        if self.weight_decay < T::zero() {
            return Err(CoreError::Config("weight decay must be >= 0".into()));
        }
        if self.similarity == Similarity::NegLcc
            && (self.lcc_window % 2 == 0 || self.lcc_window < 3)
        {
            return Err(CoreError::Config(format!(
                "LCC window must be odd and >= 3, got {}",
                self.lcc_window
            )));
        }
        Ok(())
    }
}

/// Mean squared error as a plain value (evaluation path).
pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "mse",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(CoreError::Empty("mse"));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc = acc + d * d;
    }
    Ok(acc / T::from(a.len()).unwrap())
}

/// Recorded mean squared error.
pub fn mse_on<T: Float>(tape: &mut Tape<T>, a: Val, b: Val) -> Result<Val> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Recorded negative squared local cross-correlation over `window x window`
/// zero-padded neighborhoods of `[B,1,H,W]` images. Perfectly (affinely)
/// correlated non-constant images score -1; flat patches contribute 0.
pub fn neg_lcc_on<T: Float>(tape: &mut Tape<T>, a: Val, b: Val, window: usize) -> Result<Val> {
    if window % 2 == 0 || window < 3 {
        return Err(CoreError::Config(format!(
            "LCC window must be odd and >= 3, got {window}"
        )));
    }
    let shape = tape.value(a).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(CoreError::Contract("neg_lcc expects [B,1,H,W] images"));
    }
    let pad = (window - 1) / 2;
    let ones = tape.input(Tensor::full(&[1, 1, window, window], T::one()))?;
    let zero_bias = tape.input(Tensor::zeros(&[1]))?;
    let boxsum = |tape: &mut Tape<T>, x: Val| tape.conv2d(x, ones, zero_bias, 1, pad);

    // Per-position reciprocal of the in-bounds window pixel count, so border
    // statistics run over real pixels only and constant images stay
    // zero-variance everywhere.
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    let ones_img = Tensor::full(&[1, 1, h, w], T::one());
    let ones_win = Tensor::full(&[1, 1, window, window], T::one());
    let counts = crate::kernels::conv2d_fwd(&ones_img, &ones_win, &Tensor::zeros(&[1]), 1, pad);
    let mut inv_data = Vec::with_capacity(batch * h * w);
    for _ in 0..batch {
        inv_data.extend(counts.data().iter().map(|&c| T::one() / c));
    }
    let inv_k = tape.input(Tensor::from_vec(&[batch, 1, h, w], inv_data)?)?;

    let ab = tape.mul(a, b)?;
    let a2 = tape.square(a)?;
    let b2 = tape.square(b)?;
    let sum_a = boxsum(tape, a)?;
    let sum_b = boxsum(tape, b)?;
    let sum_ab = boxsum(tape, ab)?;
    let sum_a2 = boxsum(tape, a2)?;
    let sum_b2 = boxsum(tape, b2)?;

    // cross = sum_ab - sum_a*sum_b/k; var = sum_x2 - sum_x^2/k
    let prod = tape.mul(sum_a, sum_b)?;
    let prod = tape.mul(prod, inv_k)?;
    let cross = tape.sub(sum_ab, prod)?;
    let sa2 = tape.square(sum_a)?;
    let sa2 = tape.mul(sa2, inv_k)?;
    let var_a = tape.sub(sum_a2, sa2)?;
    let sb2 = tape.square(sum_b)?;
    let sb2 = tape.mul(sb2, inv_k)?;
    let var_b = tape.sub(sum_b2, sb2)?;

    let cross2 = tape.square(cross)?;
    let denom = tape.mul(var_a, var_b)?;
    let denom = tape.add_scalar(denom, T::from(EPS_CC).unwrap())?;
    let cc = tape.div(cross2, denom)?;
    let mean_cc = tape.mean(cc)?;
    tape.scale(mean_cc, -T::one())
}

/// Recorded smoothness regularizer: mean squared forward difference of the
/// field over both components and both axes.
pub fn smoothness_on<T: Float>(tape: &mut Tape<T>, field: Val) -> Result<Val> {
    let g = tape.field_gradient(field)?;
    let sq = tape.square(g)?;
    tape.mean(sq)
}

/// Records the full objective for a batch already on the tape and returns
/// the scalar loss value. `moving` and `fixed` are `[B,1,H,W]`.
pub fn total_loss_on<T: Float>(
    tape: &mut Tape<T>,
    net: &UNet<T>,
    param_vals: &[Val],
    moving: Val,
    fixed: Val,
    cfg: &LossConfig<T>,
) -> Result<Val> {
    cfg.validate()?;
    let field = net.forward_on_tape(tape, param_vals, moving, fixed)?;
    let warped = tape.warp_bilinear(moving, field)?;
    let mut total = match cfg.similarity {
        Similarity::Mse => mse_on(tape, warped, fixed)?,
        Similarity::NegLcc => neg_lcc_on(tape, warped, fixed, cfg.lcc_window)?,
    };
    if cfg.lambda > T::zero() {
        let reg = smoothness_on(tape, field)?;
        let reg = tape.scale(reg, cfg.lambda)?;
        total = tape.add(total, reg)?;
    }
    if cfg.weight_decay > T::zero() {
        let mut acc: Option<Val> = None;
        for &p in param_vals {
            let sq = tape.square(p)?;
            let s = tape.sum(sq)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, s)?,
                None => s,
            });
        }
        if let Some(acc) = acc {
            let wd = tape.scale(acc, cfg.weight_decay)?;
            total = tape.add(total, wd)?;
        }
    }
    Ok(total)
}

/// Loss value for a batch without recording gradients (validation curves,
/// quick probes).
pub fn total_loss<T: Float>(
    net: &UNet<T>,
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let mv = tape.input(moving.clone())?;
    let fv = tape.input(fixed.clone())?;
    let pvals: Vec<Val> = net
        .params
        .iter()
        .map(|p| tape.input(p.value.clone()))
        .collect::<Result<_>>()?;
    let loss = total_loss_on(&mut tape, net, &pvals, mv, fv, cfg)?;
    Ok(tape.scalar_value(loss))
}
