//! The deformation-predicting UNet.
//!
//! Two input channels (moving and fixed image), four strided encoder convs,
//! six decoder convs with nearest-neighbor upsampling, skip connections from
//! the encoder into the first three decoder layers and from the raw input
//! into the fifth, then a final 2-channel convolution that emits the
//! displacement field at full resolution. The final layer is zero-initialized
//! so an untrained network predicts the identity deformation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Val};
use crate::tensor::{Parameter, Tensor};
use crate::warp::DeformationField;

/// Architecture hyperparameters. Channel widths can be scaled down by a
/// rational factor for fast tests; depth and wiring are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub input_channels: usize,
    pub output_channels: usize,
    /// (numerator, denominator) width multiplier applied to hidden layers.
    pub channel_scale: (u32, u32),
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            encoder_channels: vec![32, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 32, 32, 16],
            kernel_size: 3,
            leaky_slope: 0.2,
            input_channels: 2,
            output_channels: 2,
            channel_scale: (1, 1),
        }
    }
}

impl UNetConfig {
    /// Default widths scaled by `num/den` (e.g. 1/4 for desk-scale tests).
    pub fn scaled(num: u32, den: u32) -> Self {
        UNetConfig {
            channel_scale: (num, den),
            ..UNetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 4 || self.decoder_channels.len() != 6 {
            return Err(CoreError::Config(format!(
                "wiring requires 4 encoder and 6 decoder layers, got {}/{}",
                self.encoder_channels.len(),
                self.decoder_channels.len()
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(CoreError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.leaky_slope <= 0.0 || self.leaky_slope >= 1.0 {
            return Err(CoreError::Config(format!(
                "leaky slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        let (num, den) = self.channel_scale;
        if num == 0 || den == 0 {
            return Err(CoreError::Config("channel scale must be positive".into()));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(CoreError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        let (num, den) = self.channel_scale;
        ((base * num as usize) / den as usize).max(1)
    }

    /// Spatial extents must be divisible by this (one halving per encoder layer).
    pub fn extent_divisor(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// One convolution in the execution plan (strides live in the wiring:
/// 2 for encoder layers, 1 everywhere else).
struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
}

fn layer_plan(cfg: &UNetConfig) -> Vec<ConvSpec> {
    let e: Vec<usize> = cfg.encoder_channels.iter().map(|&c| cfg.width(c)).collect();
    let d: Vec<usize> = cfg.decoder_channels.iter().map(|&c| cfg.width(c)).collect();
    let cin = cfg.input_channels;
    vec![
        ConvSpec { name: "enc1", cin, cout: e[0] },
        ConvSpec { name: "enc2", cin: e[0], cout: e[1] },
        ConvSpec { name: "enc3", cin: e[1], cout: e[2] },
        ConvSpec { name: "enc4", cin: e[2], cout: e[3] },
        ConvSpec { name: "dec1", cin: e[3] + e[2], cout: d[0] },
        ConvSpec { name: "dec2", cin: d[0] + e[1], cout: d[1] },
        ConvSpec { name: "dec3", cin: d[1] + e[0], cout: d[2] },
        ConvSpec { name: "dec4", cin: d[2], cout: d[3] },
        ConvSpec { name: "dec5", cin: d[3] + cin, cout: d[4] },
        ConvSpec { name: "dec6", cin: d[4], cout: d[5] },
        ConvSpec { name: "field", cin: d[5], cout: cfg.output_channels },
    ]
}

/// Number of trainable scalars implied by a configuration.
pub fn parameter_count(cfg: &UNetConfig) -> usize {
    let k = cfg.kernel_size * cfg.kernel_size;
    layer_plan(cfg)
        .iter()
        .map(|l| l.cout * l.cin * k + l.cout)
        .sum()
}

/// A complete set of network weights captured at one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot<T> {
    pub iteration: u64,
    pub params: Vec<(String, Tensor<T>)>,
}

/// The network: a configuration plus its parameters in stable order
/// (`enc1.weight, enc1.bias, ..., field.weight, field.bias`).
pub struct UNet<T> {
    config: UNetConfig,
    pub params: Vec<Parameter<T>>,
}

impl<T: Float> UNet<T> {
    /// Deterministically initializes a network from a seed: uniform
    /// fan-scaled weights for hidden convolutions, zeros for the final
    /// field layer so the initial prediction is the identity deformation.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in layer_plan(config) {
            let wshape = [layer.cout, layer.cin, k, k];
            let weight = if layer.name == "field" {
                Tensor::zeros(&wshape)
            } else {
                let fan_in = (layer.cin * k * k) as f64;
                let fan_out = (layer.cout * k * k) as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                Tensor::from_fn(&wshape, |_| {
                    T::from(rng.random_range(-limit..limit)).unwrap()
                })
            };
            params.push(Parameter::new(format!("{}.weight", layer.name), weight));
            params.push(Parameter::new(
                format!("{}.bias", layer.name),
                Tensor::zeros(&[layer.cout]),
            ));
        }
        Ok(UNet {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies all current parameter values onto `tape` as trainable leaves.
    pub fn push_params(&self, tape: &mut Tape<T>) -> Result<Vec<Val>> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    /// Runs the network on tensors already recorded on `tape`. `moving` and
    /// `fixed` are `[B,1,H,W]`; the result is the displacement field
    /// `[B,2,H,W]`. `param_vals` must come from [`UNet::push_params`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        param_vals: &[Val],
        moving: Val,
        fixed: Val,
    ) -> Result<Val> {
        if param_vals.len() != self.params.len() {
            return Err(CoreError::Contract("parameter value list does not match network"));
        }
        let mshape = tape.value(moving).shape().to_vec();
        let fshape = tape.value(fixed).shape().to_vec();
        if mshape != fshape {
            return Err(CoreError::ShapeMismatch {
                op: "unet forward",
                expected: mshape,
                got: fshape,
            });
        }
        if mshape.len() != 4 || mshape[1] != 1 {
            return Err(CoreError::Contract("unet forward expects [B,1,H,W] inputs"));
        }
        let div = self.config.extent_divisor();
        if mshape[2] % div != 0 || mshape[3] % div != 0 {
            return Err(CoreError::Config(format!(
                "image extents {}x{} must be divisible by {}",
                mshape[2], mshape[3], div
            )));
        }

        let slope = T::from(self.config.leaky_slope).unwrap();
        let pad = (self.config.kernel_size - 1) / 2;
        let conv = |tape: &mut Tape<T>, layer: usize, x: Val, stride: usize| -> Result<Val> {
            tape.conv2d(
                x,
                param_vals[2 * layer],
                param_vals[2 * layer + 1],
                stride,
                pad,
            )
        };

        let x0 = tape.concat_channels(moving, fixed)?;

        let mut enc = Vec::with_capacity(4);
        let mut x = x0;
        for layer in 0..4 {
            x = conv(tape, layer, x, 2)?;
            x = tape.leaky_relu(x, slope)?;
            enc.push(x);
        }

        // dec1..dec3: upsample, concat encoder skip, conv
        for (i, &skip) in [enc[2], enc[1], enc[0]].iter().enumerate() {
            x = tape.upsample2x_nearest(x)?;
            x = tape.concat_channels(x, skip)?;
            x = conv(tape, 4 + i, x, 1)?;
            x = tape.leaky_relu(x, slope)?;
        }
        // dec4: plain conv at half resolution
        x = conv(tape, 7, x, 1)?;
        x = tape.leaky_relu(x, slope)?;
        // dec5: back to full resolution, concat the raw 2-channel input
        x = tape.upsample2x_nearest(x)?;
        x = tape.concat_channels(x, x0)?;
        x = conv(tape, 8, x, 1)?;
        x = tape.leaky_relu(x, slope)?;
        // dec6 and the final field conv (no activation)
        x = conv(tape, 9, x, 1)?;
        x = tape.leaky_relu(x, slope)?;
        conv(tape, 10, x, 1)
    }

    /// Predicts the deformation field for one image pair.
    pub fn forward(&self, moving: &Tensor<T>, fixed: &Tensor<T>) -> Result<DeformationField<T>> {
        let mut tape = Tape::new();
        let mv = tape.input(moving.clone())?;
        let fv = tape.input(fixed.clone())?;
        let pvals: Vec<Val> = self
            .params
            .iter()
            .map(|p| tape.input(p.value.clone()))
            .collect::<Result<_>>()?;
        let out = self.forward_on_tape(&mut tape, &pvals, mv, fv)?;
        let field = tape.value(out);
        let (h, w) = (field.shape()[2], field.shape()[3]);
        DeformationField::new(field.clone().reshape(&[2, h, w])?)
    }

    /// Captures the current weights.
    pub fn snapshot(&self, iteration: u64) -> WeightSnapshot<T> {
        WeightSnapshot {
            iteration,
            params: self
                .params
                .iter()
                .map(|p| (p.id.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Replaces the current weights with a snapshot's, validating that ids
    /// and shapes agree.
    pub fn load_weights(&mut self, snapshot: &WeightSnapshot<T>) -> Result<()> {
        if snapshot.params.len() != self.params.len() {
            return Err(CoreError::Integrity(format!(
                "snapshot has {} parameters, network has {}",
                snapshot.params.len(),
                self.params.len()
            )));
        }
        for (param, (id, value)) in self.params.iter().zip(&snapshot.params) {
            if &param.id != id {
                return Err(CoreError::Integrity(format!(
                    "snapshot parameter `{id}` does not match network parameter `{}`",
                    param.id
                )));
            }
            if param.value.shape() != value.shape() {
                return Err(CoreError::Integrity(format!(
                    "snapshot parameter `{id}` has shape {:?}, expected {:?}",
                    value.shape(),
                    param.value.shape()
                )));
            }
        }
        for (param, (_, value)) in self.params.iter_mut().zip(&snapshot.params) {
            param.value = value.clone();
        }
        Ok(())
    }
}
