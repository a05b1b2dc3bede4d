use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainRun};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{read_bundle_file, write_bundle_file, Tensor, TensorBundle};

pub const META_STEP: &str = "step";
pub const META_CONFIG_HASH: &str = "config-hash";
pub const META_MODEL_CONFIG: &str = "model-config";

/// Weights at a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Checkpoint {
    pub fn new(step: u64, config: ModelConfig, weights: ModelWeights) -> Self {
        Self { step, config, weights }
    }

    /// The weights bundle with step, config hash and config JSON as metadata.
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = self.weights.bundle().clone();
        b.set_metadata(META_STEP, self.step.to_string());
        b.set_metadata(META_CONFIG_HASH, self.config.hash());
        b.set_metadata(META_MODEL_CONFIG, serde_json::to_string(&self.config).expect("config serializes"));
        b
    }

    pub fn from_bundle(mut bundle: TensorBundle) -> Result<Self> {
        let step = bundle
            .meta(META_STEP)
            .ok_or_else(|| Error::Validation("checkpoint has no `step` metadata".into()))?
            .parse()
            .map_err(|_| Error::Validation("checkpoint step is not an integer".into()))?;
        let config: ModelConfig = serde_json::from_str(
            bundle
                .meta(META_MODEL_CONFIG)
                .ok_or_else(|| Error::Validation("checkpoint has no `model-config` metadata".into()))?,
        )?;
        if let Some(h) = bundle.meta(META_CONFIG_HASH) {
            if h != config.hash() {
                return Err(Error::Validation(format!("config hash {h} does not match the stored config")));
            }
        }
        bundle.take_metadata();
        let weights = ModelWeights::from_bundle(&config, bundle)?;
        Ok(Self { step, config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bundle_file(&self.to_bundle(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(read_bundle_file(path)?)
    }

    pub fn file_name(&self) -> String {
        format!("ckpt-{}.tb", self.step)
    }
}

/// Elementwise arithmetic mean of all tensors, moving statistics included.
/// The result is single precision and carries the largest member step.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Input("nothing to average".into()))?;
    let hash = first.config.hash();
    for c in &checkpoints[1..] {
        if c.config.hash() != hash {
            return Err(Error::Incompatible(format!(
                "checkpoint at step {} has config {} but step {} has {hash}",
                c.step,
                c.config.hash(),
                first.step
            )));
        }
    }
    let k = checkpoints.len() as f64;
    let mut out = TensorBundle::new();
    for t in first.weights.bundle().tensors() {
        let mut acc = vec![0.0f64; t.len()];
        for c in checkpoints {
            let other = c
                .weights
                .bundle()
                .get(t.name())
                .filter(|o| o.shape() == t.shape())
                .ok_or_else(|| Error::Incompatible(format!("tensor `{}` differs at step {}", t.name(), c.step)))?;
            for (a, v) in acc.iter_mut().zip(other.to_f32_vec()) {
                *a += v as f64;
            }
        }
        let mean = acc.into_iter().map(|s| (s / k) as f32).collect();
        out.insert(Tensor::single(t.name(), t.shape().to_vec(), mean)?)?;
    }
    let step = checkpoints.iter().map(|c| c.step).max().unwrap_or(0);
    Ok(Checkpoint { step, config: first.config.clone(), weights: ModelWeights::from_bundle(&first.config, out)? })
}

/// `run.json` written next to the checkpoints of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub checkpoints: Vec<String>,
    pub loss_csv: String,
    pub final_loss: Option<f32>,
}

/// Writes `ckpt-<step>.tb` files, `loss.csv` and `run.json` into `dir`.
pub fn write_run(dir: impl AsRef<Path>, run: &TrainRun, train_cfg: &TrainConfig) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for c in &run.checkpoints {
        let p = dir.join(c.file_name());
        c.save(&p)?;
        paths.push(p);
    }
    let mut csv = String::from("step,loss\n");
    for (s, l) in &run.losses {
        csv.push_str(&format!("{s},{l}\n"));
    }
    fs::write(dir.join("loss.csv"), csv)?;
    let model_config = run.final_checkpoint().config.clone();
    let manifest = RunManifest {
        model_config,
        train_config: train_cfg.clone(),
        seed: train_cfg.seed,
        checkpoints: run.checkpoints.iter().map(Checkpoint::file_name).collect(),
        loss_csv: "loss.csv".into(),
        final_loss: run.losses.last().map(|l| l.1),
    };
    let mut f = fs::File::create(dir.join("run.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(paths)
}
