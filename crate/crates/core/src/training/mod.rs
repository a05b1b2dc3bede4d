//! Multi-label training, checkpoint averaging and evaluation.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{gap_at_k, top_k_predictions, GapResult, PredictionRecord};
use crate::model::{backward, forward, FrameFeatures, Mode, ModelConfig, ModelWeights, Params, Scalar, BN_MOMENTUM};

pub use checkpoint::{average_checkpoints, write_run, Checkpoint, RunManifest};
pub use optim::{Optimizer, OptimizerState};

const PROB_CLIP: f64 = 1e-6;

/// Mean binary cross-entropy over classes, probabilities clipped to
/// `[1e-6, 1 - 1e-6]`.
pub fn bce_loss<S: Scalar>(probs: &[S], labels: &[S]) -> S {
    let lo = S::from_f64(PROB_CLIP);
    let hi = S::one() - lo;
    let total: S = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (S::one() - y) * (S::one() - p).ln())
        })
        .sum();
    total / S::from_f64(probs.len() as f64)
}

/// Derivative of [`bce_loss`] with respect to each probability; zero where
/// the clip is active.
pub fn bce_grad<S: Scalar>(probs: &[S], labels: &[S]) -> Vec<S> {
    let lo = S::from_f64(PROB_CLIP);
    let hi = S::one() - lo;
    let n = S::from_f64(probs.len() as f64);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                S::zero()
            } else {
                (-y / p + (S::one() - y) / (S::one() - p)) / n
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 32,
            total_steps: 1000,
            checkpoint_interval: 100,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Validation("learning rate, batch size and checkpoint interval must be positive".into()));
        }
        if self.total_steps > 0 && self.checkpoint_interval > self.total_steps {
            return Err(Error::Validation(format!(
                "checkpoint interval {} exceeds total steps {}",
                self.checkpoint_interval, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Checkpoints in step order plus the per-step training loss.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// `(step, loss)` where the loss is the batch loss before that step's update.
    pub losses: Vec<(u64, f32)>,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run always has a checkpoint")
    }
}

fn check_dataset(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    if ds.d_video != cfg.d_video || ds.d_audio != cfg.d_audio || ds.num_classes != cfg.vocab {
        return Err(Error::Shape(format!(
            "dataset (d_video={}, d_audio={}, classes={}) does not fit the model config",
            ds.d_video, ds.d_audio, ds.num_classes
        )));
    }
    Ok(())
}

/// Initial weights drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params<f32> {
    Params::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Trains in single precision. The run is a pure function of the configs,
/// the seed and the dataset.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainRun> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    check_dataset(model_cfg, dataset)?;

    let mut params = init_params(model_cfg, train_cfg.seed);
    let trainable: Vec<bool> = crate::model::layout(model_cfg).iter().map(|s| s.role.trainable()).collect();
    let mut opt = OptimizerState::new(train_cfg.optimizer, &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let labels: Vec<Vec<f32>> = (0..dataset.len()).map(|i| dataset.dense_labels(i)).collect();
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(train_cfg.total_steps as usize);
    if train_cfg.total_steps == 0 {
        checkpoints.push(Checkpoint::new(0, model_cfg.clone(), ModelWeights::from_params(model_cfg, &params)));
    }

    for step in 1..=train_cfg.total_steps {
        let mut batch_idx = Vec::with_capacity(train_cfg.batch_size);
        while batch_idx.len() < train_cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let feats: Vec<&FrameFeatures> = batch_idx.iter().map(|&i| &dataset.videos[i].features).collect();
        let ys: Vec<Vec<f32>> = batch_idx.iter().map(|&i| labels[i].clone()).collect();
        let g = backward(model_cfg, &params, &feats, &ys, Mode::Train)?;
        if !g.loss.is_finite() {
            return Err(Error::Divergence { step, loss: g.loss });
        }
        losses.push((step, g.loss));
        opt.step(&mut params, &g.grads, &trainable, train_cfg.learning_rate);
        if let Some(stats) = &g.batch_stats {
            let m = BN_MOMENTUM;
            for (mm, &bm) in params.bn_moving_mean.iter_mut().zip(&stats.mean) {
                *mm = m * *mm + (1.0 - m) * bm as f32;
            }
            for (mv, &bv) in params.bn_moving_var.iter_mut().zip(&stats.var) {
                *mv = m * *mv + (1.0 - m) * bv as f32;
            }
        }
        if params.buffers().iter().any(|b| b.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { step, loss: g.loss });
        }
        if step % train_cfg.checkpoint_interval == 0 || step == train_cfg.total_steps {
            checkpoints.push(Checkpoint::new(step, model_cfg.clone(), ModelWeights::from_params(model_cfg, &params)));
        }
    }
    Ok(TrainRun { checkpoints, losses })
}

/// Mean loss of `params` over the whole dataset in inference mode.
pub fn dataset_loss(cfg: &ModelConfig, params: &Params<f32>, dataset: &Dataset) -> Result<f64> {
    check_dataset(cfg, dataset)?;
    let total = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let p = forward(cfg, params, &dataset.videos[i].features, Mode::Inference)?;
            Ok(bce_loss(&p, &dataset.dense_labels(i)) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(total.iter().sum::<f64>() / dataset.len() as f64)
}

/// Top-`k` predictions for every video, in dataset order.
pub fn predict_records(cfg: &ModelConfig, params: &Params<f32>, dataset: &Dataset, k: usize) -> Result<Vec<PredictionRecord>> {
    check_dataset(cfg, dataset)?;
    let per_video = dataset
        .videos
        .par_iter()
        .map(|v| forward(cfg, params, &v.features, Mode::Inference).map(|p| top_k_predictions(&p, &v.video_id, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

/// GAP@k of the model on `dataset`, forward passes in inference mode.
pub fn evaluate(cfg: &ModelConfig, weights: &ModelWeights, dataset: &Dataset, k: usize) -> Result<GapResult> {
    let params = weights.params::<f32>(cfg)?;
    let records = predict_records(cfg, &params, dataset, k)?;
    gap_at_k(&records, &dataset.truth())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_exact_targets_hits_clip_floor() {
        let l = bce_loss(&[1.0f64, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        assert!((l - (-(1.0f64 - 1e-6).ln())).abs() < 1e-15);
    }

    #[test]
    fn loss_at_one_half() {
        let l = bce_loss(&[0.5f64; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_hand_value() {
        let l = bce_loss(&[0.9f64, 0.2], &[1.0, 0.0]);
        assert!((l - 0.164252033486018).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_difference() {
        let p = [0.3f64, 0.8, 0.55];
        let y = [1.0, 0.0, 0.4];
        let g = bce_grad(&p, &y);
        for i in 0..3 {
            let (mut a, mut b) = (p, p);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (bce_loss(&a, &y) - bce_loss(&b, &y)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig { total_steps: 10, checkpoint_interval: 20, ..Default::default() };
        assert!(c.validate().is_err());
        c.checkpoint_interval = 5;
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
