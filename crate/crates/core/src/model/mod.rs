//! Gated NetVLAD: NetVLAD pooling of the video and audio streams, a two
//! layer fully connected block, context gating, a mixture of experts and a
//! final context gate over the label vocabulary.

mod network;
pub mod ops;
pub mod params;

use std::fmt::Debug;
use std::iter::Sum;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use network::{backward, fc_forward, forward, forward_batch, BatchStats, Gradients};
pub use params::{layout, ModelWeights, Params, TensorRole, TensorSpec, VladParams, BIG4};

/// Batch normalisation momentum for moving statistics.
pub const BN_MOMENTUM: f32 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

/// Numeric type the model is evaluated in. Production code runs in `f32`;
/// `f64` exists so gradients can be checked against finite differences.
pub trait Scalar:
    num_traits::Float + Default + Send + Sync + Debug + Sum + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Batch normalisation behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the stored moving statistics.
    Inference,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// NetVLAD clusters for the video stream.
    pub k_video: usize,
    /// NetVLAD clusters for the audio stream.
    pub k_audio: usize,
    /// Width of the first fully connected layer; the block outputs `2 * hidden`.
    pub hidden: usize,
    /// Label vocabulary size.
    pub vocab: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub num_experts: usize,
    pub use_dummy_expert: bool,
    pub normalize_vlad: bool,
}

impl ModelConfig {
    /// Config with the audio stream using half as many clusters as video.
    pub fn new(k: usize, hidden: usize, vocab: usize, d_video: usize, d_audio: usize) -> Self {
        Self {
            k_video: k,
            k_audio: (k / 2).max(1),
            hidden,
            vocab,
            d_video,
            d_audio,
            num_experts: 5,
            use_dummy_expert: true,
            normalize_vlad: true,
        }
    }

    /// Feature dimensions of the original frame-level features.
    pub fn paper_scale(k: usize, hidden: usize) -> Self {
        Self::new(k, hidden, 3862, 1024, 128)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("k_video", self.k_video),
            ("k_audio", self.k_audio),
            ("hidden", self.hidden),
            ("vocab", self.vocab),
            ("d_video", self.d_video),
            ("d_audio", self.d_audio),
            ("num_experts", self.num_experts),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn vlad_dim(&self) -> usize {
        self.k_video * self.d_video + self.k_audio * self.d_audio
    }

    pub fn fc_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn gate_columns(&self) -> usize {
        self.num_experts + usize::from(self.use_dummy_expert)
    }

    /// Short content hash identifying compatible weights.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Frame-level features of one video, both matrices row-major with one row
/// per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frames: usize,
    pub video: Vec<f32>,
    pub audio: Vec<f32>,
}

impl FrameFeatures {
    pub fn new(frames: usize, video: Vec<f32>, audio: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Shape("a video needs at least one frame".into()));
        }
        if !video.len().is_multiple_of(frames) || !audio.len().is_multiple_of(frames) {
            return Err(Error::Shape(format!(
                "feature buffers ({}, {}) are not multiples of the frame count {frames}",
                video.len(),
                audio.len()
            )));
        }
        Ok(Self { frames, video, audio })
    }

    pub fn d_video(&self) -> usize {
        self.video.len() / self.frames
    }

    pub fn d_audio(&self) -> usize {
        self.audio.len() / self.frames
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.frames == 0
            || self.video.len() != self.frames * cfg.d_video
            || self.audio.len() != self.frames * cfg.d_audio
        {
            return Err(Error::Shape(format!(
                "features with {} frames and buffers ({}, {}) do not fit d_video={} d_audio={}",
                self.frames,
                self.video.len(),
                self.audio.len(),
                cfg.d_video,
                cfg.d_audio
            )));
        }
        Ok(())
    }
}
