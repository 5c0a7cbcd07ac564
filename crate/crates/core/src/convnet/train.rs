use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{Network, WarpHook};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("learning rate {} invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training accuracy over the epoch, measured on the fly.
    pub accuracy: f64,
}

/// Source of per-batch warp hooks; `batch_index` counts batches across epochs.
pub trait BatchHook {
    fn hook_for_batch(&self, batch_index: usize) -> Result<Option<WarpHook>>;
}

/// Mini-batch SGD with momentum on softmax cross-entropy. The shuffle order is
/// drawn from `config.seed`, so a config fully determines the result.
///
/// A learning rate of exactly zero leaves the weights untouched.
pub fn train(
    net: &Network<f32>,
    samples: &[(Image, usize)],
    config: &TrainConfig,
    hook: Option<&dyn BatchHook>,
) -> Result<(Network<f32>, Vec<EpochStats>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let classes = net.spec().class_count;
    if let Some((_, bad)) = samples.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut net = net.clone();
    let mut velocity = net.weights().zeros_like();
    let mut rng = seeding::rng(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let lr = config.learning_rate as f32;
    let momentum = config.momentum as f32;
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch_index = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let warp = match hook {
                Some(h) => h.hook_for_batch(batch_index)?,
                None => None,
            };
            batch_index += 1;
            let mut grad = net.weights().zeros_like();
            for &i in batch {
                let (image, label) = &samples[i];
                let (loss, g, predicted) = net.backward_image(image, *label, warp.as_ref())?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, loss });
                }
                loss_sum += loss;
                if predicted == *label {
                    correct += 1;
                }
                grad.add_scaled(1.0, &g);
            }
            let scale = 1.0 / batch.len() as f32;
            for (v, g) in velocity.tensors.iter_mut().zip(&grad.tensors) {
                for (vv, &gg) in v.data.iter_mut().zip(&g.data) {
                    *vv = momentum * *vv - lr * scale * gg;
                }
            }
            net.weights_mut().add_scaled(1.0, &velocity);
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() || !net.weights().all_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        history.push(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok((net, history))
}

pub fn accuracy(net: &Network<f32>, samples: &[(Image, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut correct = 0;
    for (image, label) in samples {
        if net.predict(image)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
