use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::loss::{masked_loss_logits, LossOutput};
use super::network::UNet;
use super::params::ModelParameters;
use super::sampling::PatchSample;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Gradient descent with heavy-ball momentum: `v = μv + g; θ -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: Option<ModelParameters>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, velocity: None }
    }

    /// Forget accumulated momentum.
    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters) {
        let OptimizerConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        for (name, p) in params.tensors.iter_mut() {
            let g = grads.get(name);
            let v = velocity.get_mut(name);
            for ((w, vel), &gr) in p.values.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = momentum * *vel + gr + weight_decay * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Loss and gradients for one batch without touching the parameters.
pub fn batch_gradients(
    cfg: &NetworkConfig,
    params: &ModelParameters,
    batch: &[PatchSample],
) -> Result<(LossOutput, ModelParameters)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let net = UNet::new(cfg, params)?;
    let mut tapes = Vec::with_capacity(batch.len());
    let mut diffs = Vec::new();
    let mut labels = Vec::new();
    let mut sizes = Vec::with_capacity(batch.len());
    for sample in batch {
        let (logits, tape) = net.forward_train(net.input_tensor(&sample.image)?);
        diffs.extend(
            logits
                .channel(0)
                .iter()
                .zip(logits.channel(1))
                .map(|(&z0, &z1)| (z1 - z0) as f64),
        );
        labels.extend(sample.labels.as_standard_layout().iter().copied());
        sizes.push(logits.dims);
        tapes.push(tape);
    }
    let loss = masked_loss_logits(&diffs, &labels)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFiniteLoss(loss.value));
    }
    let mut grads = params.zeros_like();
    let mut offset = 0;
    for (tape, dims) in tapes.into_iter().zip(sizes) {
        let n: usize = dims.iter().product();
        let g = &loss.grad[offset..offset + n];
        let mut data = Vec::with_capacity(2 * n);
        data.extend(g.iter().map(|&v| -v as f32));
        data.extend(g.iter().map(|&v| v as f32));
        net.backward(tape, &Tensor::from_vec(2, dims, data)?, &mut grads);
        offset += n;
    }
    Ok((loss, grads))
}

/// One optimisation step on a batch; returns the batch loss.
///
/// A non-finite loss or gradient leaves parameters and optimiser untouched
/// and is reported as [`Error::NonFiniteLoss`].
pub fn train_step(
    cfg: &NetworkConfig,
    params: &mut ModelParameters,
    optimizer: &mut Sgd,
    batch: &[PatchSample],
) -> Result<f64> {
    let (loss, grads) = batch_gradients(cfg, params, batch)?;
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss(loss.value));
    }
    optimizer.step(params, &grads);
    Ok(loss.value)
}
