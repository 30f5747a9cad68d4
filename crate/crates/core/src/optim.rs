//! Adam with adaptive Langevin noise injection, the snapshot schedule, and
//! the training loop.
//!
//! Each iteration draws a minibatch, computes clean gradients of the
//! registration objective, adds zero-mean Gaussian noise whose per-element
//! variance is the current adaptive step size divided by `alpha`, and applies
//! the Adam update to the noisy gradients. With `alpha` infinite no noise is
//! drawn and the update is exactly standard Adam (the comparison baseline).
//! Weights reached after the burn-in iteration are retained as posterior
//! samples.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ImagePair;
use crate::error::{CoreError, Result};
use crate::losses::{total_loss, total_loss_on, LossConfig};
use crate::tape::Tape;
use crate::tensor::{Parameter, Tensor};
use crate::unet::{UNet, UNetConfig, WeightSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSgldConfig<T> {
    pub eta: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    /// Noise-scale divisor; `T::infinity()` disables injection entirely.
    pub alpha: T,
}

impl<T: Float> AdamSgldConfig<T> {
    pub fn with_alpha(alpha: f64) -> Self {
        AdamSgldConfig {
            alpha: T::from(alpha).unwrap(),
            ..Self::default()
        }
    }

    pub fn noise_disabled(&self) -> bool {
        self.alpha.is_infinite()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= T::zero() || !self.eta.is_finite() {
            return Err(CoreError::Config("eta must be positive and finite".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if b < T::zero() || b >= T::one() {
                return Err(CoreError::Config(format!("{name} must lie in [0,1)")));
            }
        }
        if self.epsilon <= T::zero() {
            return Err(CoreError::Config("epsilon must be positive".into()));
        }
        if self.alpha <= T::zero() || self.alpha.is_nan() {
            return Err(CoreError::Config("alpha must be positive (infinity allowed)".into()));
        }
        Ok(())
    }
}

impl<T: Float> Default for AdamSgldConfig<T> {
    fn default() -> Self {
        AdamSgldConfig {
            eta: T::from(1e-3).unwrap(),
            beta1: T::from(0.9).unwrap(),
            beta2: T::from(0.999).unwrap(),
            epsilon: T::from(1e-8).unwrap(),
            alpha: T::from(100.0).unwrap(),
        }
    }
}

/// Optimizer state: first/second moment accumulators, the iteration counter
/// and the seeded noise stream.
pub struct AdamSgldState<T> {
    pub cfg: AdamSgldConfig<T>,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Float> AdamSgldState<T> {
    pub fn new(cfg: AdamSgldConfig<T>, params: &[Parameter<T>], seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamSgldState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Current per-element adaptive step size `eta / sqrt(v_hat + epsilon)`.
    /// Before the first update (`v = 0`) this is `eta / sqrt(epsilon)`.
    pub fn step_size(&self) -> Vec<Tensor<T>> {
        let te = self.t.max(1);
        let bc2 = T::one() - self.cfg.beta2.powi(te as i32);
        self.v
            .iter()
            .map(|v| {
                v.map(|vi| self.cfg.eta / (vi / bc2 + self.cfg.epsilon).sqrt())
            })
            .collect()
    }

    /// Returns `g + N(0, s/alpha)` drawn elementwise; the clean gradients are
    /// left untouched. Disabled noise (`alpha` infinite) draws nothing.
    pub fn inject_noise(&mut self, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if grads.len() != self.m.len() {
            return Err(CoreError::Contract("gradient list does not match optimizer state"));
        }
        if self.cfg.noise_disabled() {
            return Ok(grads.to_vec());
        }
        let steps = self.step_size();
        let mut noisy = Vec::with_capacity(grads.len());
        for (g, s) in grads.iter().zip(&steps) {
            let mut out = g.clone();
            for (o, &si) in out.data_mut().iter_mut().zip(s.data()) {
                let z: f64 = self.rng.sample(StandardNormal);
                let std = (si / self.cfg.alpha).sqrt();
                *o = *o + std * T::from(z).unwrap();
            }
            noisy.push(out);
        }
        Ok(noisy)
    }

    /// One Adam step on the (noisy) gradients:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
    /// `theta <- theta - eta / sqrt(v_hat + eps) * m_hat`.
    pub fn adam_update(&mut self, params: &mut [Parameter<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::Contract("parameter/gradient lists do not match state"));
        }
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.cfg.beta1.powi(self.t as i32);
        let bc2 = one - self.cfg.beta2.powi(self.t as i32);

        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = params[i].value.data_mut();
            for j in 0..g.len() {
                m[j] = self.cfg.beta1 * m[j] + (one - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (one - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let step = self.cfg.eta / (v_hat + self.cfg.epsilon).sqrt();
                let updated = theta[j] - step * m_hat;
                if !updated.is_finite() {
                    return Err(CoreError::NonFinite { op: "adam_update" });
                }
                theta[j] = updated;
            }
        }
        Ok(())
    }
}

/// Which training iterations are kept as posterior weight samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotSchedule {
    pub total_iterations: u64,
    pub burn_in: u64,
    pub thinning: u64,
}

impl SnapshotSchedule {
    pub fn new(total_iterations: u64, burn_in: u64, thinning: u64) -> Result<Self> {
        let s = SnapshotSchedule {
            total_iterations,
            burn_in,
            thinning,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 || self.burn_in >= self.total_iterations {
            return Err(CoreError::Config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.total_iterations
            )));
        }
        if self.thinning == 0 {
            return Err(CoreError::Config("thinning must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retains(&self, iteration: u64) -> bool {
        iteration > self.burn_in
            && iteration <= self.total_iterations
            && (iteration - self.burn_in - 1) % self.thinning == 0
    }

    pub fn retained_count(&self) -> u64 {
        let span = self.total_iterations - self.burn_in;
        (span + self.thinning - 1) / self.thinning
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord<T> {
    pub iteration: u64,
    pub train_loss: T,
    pub val_loss: Option<T>,
}

pub struct TrainOutput<T> {
    pub net: UNet<T>,
    pub snapshots: Vec<WeightSnapshot<T>>,
    pub history: Vec<TrainRecord<T>>,
}

impl<T: Float> TrainOutput<T> {
    /// Mean and standard deviation of the training loss over the trailing
    /// `window` iterations — the diagnostic used to pick the burn-in cutoff.
    pub fn trailing_loss_stats(&self, window: usize) -> Option<(T, T)> {
        if self.history.is_empty() || window == 0 {
            return None;
        }
        let tail = &self.history[self.history.len().saturating_sub(window)..];
        let n = T::from(tail.len()).unwrap();
        let mean = tail.iter().fold(T::zero(), |a, r| a + r.train_loss) / n;
        let var = tail
            .iter()
            .fold(T::zero(), |a, r| a + (r.train_loss - mean) * (r.train_loss - mean))
            / n;
        Some((mean, var.sqrt()))
    }
}

/// Trains a freshly initialized network. All randomness (weight init, batch
/// sampling, noise injection) derives from `seed`; identical inputs produce a
/// bitwise-identical snapshot sequence. The validation loss is evaluated on
/// `val_pairs` every iteration when non-empty.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Float>(
    train_pairs: &[ImagePair<T>],
    val_pairs: &[ImagePair<T>],
    unet_cfg: &UNetConfig,
    loss_cfg: &LossConfig<T>,
    optim_cfg: &AdamSgldConfig<T>,
    schedule: &SnapshotSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutput<T>> {
    if train_pairs.is_empty() {
        return Err(CoreError::Empty("train: no training pairs"));
    }
    if batch_size == 0 {
        return Err(CoreError::Config("batch size must be >= 1".into()));
    }
    schedule.validate()?;
    loss_cfg.validate()?;

    let mut net = UNet::build(unet_cfg, seed)?;
    let mut state = AdamSgldState::new(optim_cfg.clone(), &net.params, seed.wrapping_add(1))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));

    let val_batch = if val_pairs.is_empty() {
        None
    } else {
        Some(stack_pairs(val_pairs)?)
    };

    let mut snapshots = Vec::with_capacity(schedule.retained_count() as usize);
    let mut history = Vec::with_capacity(schedule.total_iterations as usize);

    for t in 1..=schedule.total_iterations {
        let batch: Vec<&ImagePair<T>> = if train_pairs.len() <= batch_size {
            train_pairs.iter().collect()
        } else {
            (0..batch_size)
                .map(|_| &train_pairs[batch_rng.random_range(0..train_pairs.len())])
                .collect()
        };
        let (moving, fixed) = stack_refs(&batch)?;

        let step = || -> Result<T> {
            let mut tape = Tape::new();
            let pvals = net.push_params(&mut tape)?;
            let mv = tape.input(moving)?;
            let fv = tape.input(fixed)?;
            let loss = total_loss_on(&mut tape, &net, &pvals, mv, fv, loss_cfg)?;
            let loss_value = tape.scalar_value(loss);
            tape.backward(loss)?;
            let clean: Vec<Tensor<T>> = pvals.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            drop(tape);
            let noisy = state.inject_noise(&clean)?;
            state.adam_update(&mut net.params, &noisy)?;
            Ok(loss_value)
        };
        let train_loss = match step() {
            Ok(v) => v,
            Err(CoreError::NonFinite { .. }) => return Err(CoreError::Diverged { iteration: t }),
            Err(e) => return Err(e),
        };

        let val_loss = match &val_batch {
            Some((vm, vf)) => Some(total_loss(&net, vm, vf, loss_cfg)?),
            None => None,
        };
        history.push(TrainRecord {
            iteration: t,
            train_loss,
            val_loss,
        });

        if schedule.retains(t) {
            snapshots.push(net.snapshot(t));
        }
    }

    Ok(TrainOutput {
        net,
        snapshots,
        history,
    })
}

/// Stacks pairs into `[B,1,H,W]` moving/fixed batch tensors.
fn stack_pairs<T: Float>(pairs: &[ImagePair<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let refs: Vec<&ImagePair<T>> = pairs.iter().collect();
    stack_refs(&refs)
}

fn stack_refs<T: Float>(pairs: &[&ImagePair<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = pairs.first().ok_or(CoreError::Empty("stack_pairs"))?;
    let shape = first.moving.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(CoreError::Contract("pairs must hold [1,1,H,W] images"));
    }
    let plane = shape[2] * shape[3];
    let mut moving = Vec::with_capacity(pairs.len() * plane);
    let mut fixed = Vec::with_capacity(pairs.len() * plane);
    for p in pairs {
        if p.moving.shape() != shape.as_slice() || p.fixed.shape() != shape.as_slice() {
            return Err(CoreError::ShapeMismatch {
                op: "stack_pairs",
                expected: shape.clone(),
                got: p.moving.shape().to_vec(),
            });
        }
        moving.extend_from_slice(p.moving.data());
        fixed.extend_from_slice(p.fixed.data());
    }
    Ok((
        Tensor::from_vec(&[pairs.len(), 1, shape[2], shape[3]], moving)?,
        Tensor::from_vec(&[pairs.len(), 1, shape[2], shape[3]], fixed)?,
    ))
}
