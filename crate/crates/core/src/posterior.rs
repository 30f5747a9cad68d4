//! Posterior statistics over retained weight snapshots: evaluate each
//! snapshot on a new image pair, average the predicted deformation fields
//! (the registration estimate), and report their per-pixel standard
//! deviation (the uncertainty estimate). The moving image is warped once,
//! with the mean field.

use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::unet::{UNet, WeightSnapshot};
use crate::warp::{warp_bilinear, DeformationField};

/// Per-pixel mean and standard deviation of the sampled deformations.
#[derive(Debug, Clone)]
pub struct PosteriorEstimate<T> {
    pub mean_field: DeformationField<T>,
    /// `[2,H,W]`, unbiased (n-1) standard deviation; zero for a single sample.
    pub std_field: Tensor<T>,
    pub sample_count: usize,
}

/// Feed-forwards the pair through every snapshot, in order.
/// The network is used as scratch space; it ends up holding the last
/// snapshot's weights.
pub fn sample_fields<T: Float>(
    net: &mut UNet<T>,
    snapshots: &[WeightSnapshot<T>],
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
) -> Result<Vec<DeformationField<T>>> {
    if snapshots.is_empty() {
        return Err(CoreError::Empty("sample_fields: no snapshots"));
    }
    snapshots
        .iter()
        .map(|snap| {
            net.load_weights(snap)?;
            net.forward(moving, fixed)
        })
        .collect()
}

/// Elementwise arithmetic mean of the sampled fields.
pub fn posterior_mean<T: Float>(fields: &[DeformationField<T>]) -> Result<DeformationField<T>> {
    let first = fields.first().ok_or(CoreError::Empty("posterior_mean"))?;
    let mut acc = Tensor::zeros(first.tensor().shape());
    for f in fields {
        acc.axpy(T::one(), f.tensor())?;
    }
    DeformationField::new(acc.scale(T::one() / T::from(fields.len()).unwrap()))
}

/// Elementwise sample standard deviation (n-1 divisor) of the fields.
pub fn posterior_std<T: Float>(fields: &[DeformationField<T>]) -> Result<Tensor<T>> {
    let first = fields.first().ok_or(CoreError::Empty("posterior_std"))?;
    let shape = first.tensor().shape().to_vec();
    if fields.len() == 1 {
        return Ok(Tensor::zeros(&shape));
    }
    let mean = posterior_mean(fields)?;
    let mut acc = Tensor::zeros(&shape);
    for f in fields {
        let d = f.tensor().sub(mean.tensor())?;
        let d2 = d.mul(&d)?;
        acc.axpy(T::one(), &d2)?;
    }
    let denom = T::from(fields.len() - 1).unwrap();
    Ok(acc.map(|v| (v / denom).sqrt()))
}

/// The full inference path: sample fields from all snapshots, average them,
/// and warp the moving image under the mean field.
pub fn register<T: Float>(
    net: &mut UNet<T>,
    snapshots: &[WeightSnapshot<T>],
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
) -> Result<(Tensor<T>, PosteriorEstimate<T>)> {
    let fields = sample_fields(net, snapshots, moving, fixed)?;
    let mean_field = posterior_mean(&fields)?;
    let std_field = posterior_std(&fields)?;
    let registered = warp_bilinear(moving, &mean_field)?;
    Ok((
        registered,
        PosteriorEstimate {
            mean_field,
            std_field,
            sample_count: fields.len(),
        },
    ))
}
