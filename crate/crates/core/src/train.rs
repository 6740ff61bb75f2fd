//! The training loop: association masks from the training labels, K-means
//! codebook initialization, full- or mini-batch Adam with the stepwise decay
//! schedule, optional per-sample augmentation, and evaluation.
//!
//! Every random choice comes from a stream derived from (seed, purpose), so
//! runs are bit-reproducible and training in chunks matches one long run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::config::{AugmentSpec, ModelConfig};
use crate::decoder::{build_assoc_masks, sigmoid, AssociationMasks};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{forward, loss_and_backward, ModelParams};
use crate::numerics::dropout_mask;
use crate::optim::{adam_step, lr_schedule, AdamState};
use crate::synth::{augment, sample_descriptors, Dataset};
use crate::vlad::kmeans_init;
use crate::SeededRng;

const KMEANS_DESCRIPTOR_LIMIT: usize = 4096;
const KMEANS_MAX_ITERS: usize = 50;

const STREAM_PARAMS: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

fn stream(seed: u64, purpose: u64) -> SeededRng {
    // splitmix64 over (seed, purpose) keeps the streams decoupled.
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    SeededRng::seed_from_u64(z ^ (z >> 31))
}

/// Loss and learning rate of one completed epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Owns the parameters, optimizer state and epoch counter of one training
/// run.
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub masks: AssociationMasks,
    adam: Vec<AdamState>,
    pub epoch: usize,
    augment_spec: Option<AugmentSpec>,
}

impl Trainer {
    /// Builds association masks from the training labels, initializes the
    /// codebook with K-means over sampled training descriptors, and seeds
    /// every remaining parameter.
    pub fn new(
        config: &ModelConfig,
        train_data: &Dataset,
        augment_spec: Option<AugmentSpec>,
    ) -> Result<Self> {
        config.validate()?;
        if train_data.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        if train_data.activities() != config.activities {
            return Err(Error::ShapeMismatch {
                op: "trainer",
                left: vec![train_data.activities()],
                right: vec![config.activities],
            });
        }
        let sample_shape = train_data.features[0].shape().to_vec();
        match &augment_spec {
            None => {
                if sample_shape != config.input_shape() {
                    return Err(Error::ShapeMismatch {
                        op: "trainer",
                        left: sample_shape,
                        right: config.input_shape().to_vec(),
                    });
                }
            }
            Some(spec) => {
                if spec.window != config.frames
                    || spec.crop_w != config.grid_w
                    || spec.crop_h != config.grid_h
                    || sample_shape[3] != config.channels
                {
                    return Err(Error::config(format!(
                        "augmentation yields [{}, {}, {}, {}], model expects {:?}",
                        spec.window, spec.crop_w, spec.crop_h, sample_shape[3],
                        config.input_shape()
                    )));
                }
                // The worst-case phase must still leave enough frames.
                let worst = sample_shape[0]
                    .saturating_sub(spec.downsample_factor - 1)
                    .div_ceil(spec.downsample_factor);
                if worst < spec.window {
                    return Err(Error::config(format!(
                        "window {} cannot be cut from {} frames at factor {}",
                        spec.window, sample_shape[0], spec.downsample_factor
                    )));
                }
            }
        }

        let masks = build_assoc_masks(&train_data.labels, config.activities)?;
        let mut params = ModelParams::init(config, &mut stream(config.seed, STREAM_PARAMS))?;
        if config.use_clustering {
            let descriptors =
                sample_descriptors(train_data, KMEANS_DESCRIPTOR_LIMIT, config.seed)?;
            params.codebook = Some(kmeans_init(
                &descriptors,
                config.clusters,
                config.seed,
                KMEANS_MAX_ITERS,
                1.0,
            )?);
        }
        let adam = params
            .groups()
            .iter()
            .map(|(_, t)| AdamState::new(t.numel()))
            .collect();
        Ok(Trainer {
            config: config.clone(),
            params,
            masks,
            adam,
            epoch: 0,
            augment_spec,
        })
    }

    /// Runs `epochs` more epochs and returns their stats. Resumable: two
    /// calls of `n` epochs match one call of `2n` bit for bit.
    pub fn run_epochs(&mut self, data: &Dataset, epochs: usize) -> Result<Vec<EpochStats>> {
        let n = data.len();
        let batch = if self.config.batch_size == 0 {
            n
        } else {
            self.config.batch_size.min(n)
        };
        let out_dim = self.config.out_dim();
        let a = self.config.activities;
        let mut stats = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = self.epoch;
            let lr = lr_schedule(epoch, self.config.base_lr);
            let mut rng = stream(self.config.seed, STREAM_EPOCH_BASE + epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for chunk in order.chunks(batch) {
                self.params.zero_grads();
                let scale = 1.0 / chunk.len() as f64;
                for &idx in chunk {
                    let fm;
                    let fm_ref = match &self.augment_spec {
                        Some(spec) => {
                            fm = augment(&data.features[idx], spec, rng.random())?;
                            &fm
                        }
                        None => &data.features[idx],
                    };
                    let mask = if self.config.dropout_rate > 0.0 {
                        Some(dropout_mask(
                            &[a, out_dim],
                            self.config.dropout_rate,
                            &mut rng,
                        )?)
                    } else {
                        None
                    };
                    let loss = loss_and_backward(
                        &self.config,
                        &mut self.params,
                        &self.masks,
                        fm_ref,
                        &data.labels[idx],
                        mask.as_ref(),
                        scale,
                    )?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss at epoch {epoch}, sample {idx}"
                        )));
                    }
                    loss_sum += loss;
                }
                for ((name, t), state) in
                    self.params.groups_mut().into_iter().zip(&mut self.adam)
                {
                    let grad = t.grad().expect("backward filled every group").to_vec();
                    adam_step(name, t.data_mut(), &grad, state, lr).map_err(|e| {
                        match e {
                            Error::NonFinite(msg) => {
                                Error::NonFinite(format!("{msg} (epoch {epoch})"))
                            }
                            other => other,
                        }
                    })?;
                }
            }
            stats.push(EpochStats {
                epoch,
                lr,
                loss: loss_sum / n as f64,
            });
            self.epoch += 1;
        }
        Ok(stats)
    }

    pub fn evaluate(&self, data: &Dataset, threshold: f64) -> Result<Metrics> {
        evaluate_model(&self.config, &self.params, &self.masks, data, threshold)
    }
}

/// Scores every sample (dropout off) and computes the metrics record.
pub fn evaluate_model(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
    data: &Dataset,
    threshold: f64,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut scores = Vec::with_capacity(data.len());
    for fm in &data.features {
        let logits = forward(config, params, masks, fm, None)?;
        scores.push(logits.data().iter().map(|&z| sigmoid(z)).collect());
    }
    compute_metrics(&scores, &data.labels, threshold)
}
