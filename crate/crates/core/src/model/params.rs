use rand::Rng;

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor, TensorBundle};

pub const VIDEO_ASSIGN_WEIGHTS: &str = "tower/video_vlad/cluster_weights";
pub const VIDEO_ASSIGN_BIAS: &str = "tower/video_vlad/cluster_biases";
pub const VIDEO_CENTROIDS: &str = "tower/video_vlad/centroids";
pub const AUDIO_ASSIGN_WEIGHTS: &str = "tower/audio_vlad/cluster_weights";
pub const AUDIO_ASSIGN_BIAS: &str = "tower/audio_vlad/cluster_biases";
pub const AUDIO_CENTROIDS: &str = "tower/audio_vlad/centroids";
pub const HIDDEN1_WEIGHTS: &str = "tower/hidden1_weights/hidden1_weights";
pub const BN_GAMMA: &str = "tower/hidden1_bn/gamma";
pub const BN_BETA: &str = "tower/hidden1_bn/beta";
pub const BN_MOVING_MEAN: &str = "tower/hidden1_bn/moving_mean";
pub const BN_MOVING_VAR: &str = "tower/hidden1_bn/moving_variance";
pub const HIDDEN2_WEIGHTS: &str = "tower/hidden2_weights/hidden2_weights";
pub const HIDDEN2_BIAS: &str = "tower/hidden2_weights/biases";
pub const HIDDEN_GATE_WEIGHTS: &str = "tower/gating_weights";
pub const HIDDEN_GATE_BIAS: &str = "tower/gating_biases";
pub const GATES_WEIGHTS: &str = "tower/gates/weights";
pub const EXPERTS_WEIGHTS: &str = "tower/experts/weights";
pub const EXPERTS_BIAS: &str = "tower/experts/biases";
pub const OUTPUT_GATE_WEIGHTS: &str = "tower/gating_prob_weights";
pub const OUTPUT_GATE_BIAS: &str = "tower/gating_prob_biases";

/// The four largest tensors of the architecture, the ones cast to half
/// precision for storage.
pub const BIG4: [&str; 4] = [EXPERTS_WEIGHTS, GATES_WEIGHTS, OUTPUT_GATE_WEIGHTS, HIDDEN1_WEIGHTS];

/// How a tensor is initialised and whether it is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Xavier-uniform initialised matrix.
    Matrix,
    /// Zero-initialised bias.
    Bias,
    BnGamma,
    BnBeta,
    /// Moving statistics are updated during training but never differentiated.
    MovingMean,
    MovingVariance,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::MovingMean | TensorRole::MovingVariance)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

/// Canonical tensor inventory of a model, in field order of [`Params`].
pub fn layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    use TensorRole::*;
    let two_h = cfg.fc_dim();
    let v = cfg.vocab;
    let spec = |name, shape: Vec<usize>, role| TensorSpec { name, shape, role };
    vec![
        spec(VIDEO_ASSIGN_WEIGHTS, vec![cfg.d_video, cfg.k_video], Matrix),
        spec(VIDEO_ASSIGN_BIAS, vec![cfg.k_video], Bias),
        spec(VIDEO_CENTROIDS, vec![cfg.k_video, cfg.d_video], Matrix),
        spec(AUDIO_ASSIGN_WEIGHTS, vec![cfg.d_audio, cfg.k_audio], Matrix),
        spec(AUDIO_ASSIGN_BIAS, vec![cfg.k_audio], Bias),
        spec(AUDIO_CENTROIDS, vec![cfg.k_audio, cfg.d_audio], Matrix),
        spec(HIDDEN1_WEIGHTS, vec![cfg.vlad_dim(), cfg.hidden], Matrix),
        spec(BN_GAMMA, vec![cfg.hidden], BnGamma),
        spec(BN_BETA, vec![cfg.hidden], BnBeta),
        spec(BN_MOVING_MEAN, vec![cfg.hidden], MovingMean),
        spec(BN_MOVING_VAR, vec![cfg.hidden], MovingVariance),
        spec(HIDDEN2_WEIGHTS, vec![cfg.hidden, two_h], Matrix),
        spec(HIDDEN2_BIAS, vec![two_h], Bias),
        spec(HIDDEN_GATE_WEIGHTS, vec![two_h, two_h], Matrix),
        spec(HIDDEN_GATE_BIAS, vec![two_h], Bias),
        spec(GATES_WEIGHTS, vec![two_h, v * cfg.gate_columns()], Matrix),
        spec(EXPERTS_WEIGHTS, vec![two_h, v * cfg.num_experts], Matrix),
        spec(EXPERTS_BIAS, vec![v * cfg.num_experts], Bias),
        spec(OUTPUT_GATE_WEIGHTS, vec![v, v], Matrix),
        spec(OUTPUT_GATE_BIAS, vec![v], Bias),
    ]
}

/// NetVLAD parameters for one stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VladParams<S> {
    /// `D x K`, row-major.
    pub assign_weights: Vec<S>,
    pub assign_bias: Vec<S>,
    /// `K x D`, row-major.
    pub centroids: Vec<S>,
}

/// All model tensors as flat row-major buffers. Matrices are stored
/// `inputs x outputs` and applied to row vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<S> {
    pub video: VladParams<S>,
    pub audio: VladParams<S>,
    pub hidden1: Vec<S>,
    pub bn_gamma: Vec<S>,
    pub bn_beta: Vec<S>,
    pub bn_moving_mean: Vec<S>,
    pub bn_moving_var: Vec<S>,
    pub hidden2: Vec<S>,
    pub hidden2_bias: Vec<S>,
    pub hidden_gate: Vec<S>,
    pub hidden_gate_bias: Vec<S>,
    pub gates: Vec<S>,
    pub experts: Vec<S>,
    pub experts_bias: Vec<S>,
    pub output_gate: Vec<S>,
    pub output_gate_bias: Vec<S>,
}

impl<S: Scalar> Params<S> {
    /// Buffers in [`layout`] order.
    pub fn buffers(&self) -> [&Vec<S>; 20] {
        [
            &self.video.assign_weights,
            &self.video.assign_bias,
            &self.video.centroids,
            &self.audio.assign_weights,
            &self.audio.assign_bias,
            &self.audio.centroids,
            &self.hidden1,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_moving_mean,
            &self.bn_moving_var,
            &self.hidden2,
            &self.hidden2_bias,
            &self.hidden_gate,
            &self.hidden_gate_bias,
            &self.gates,
            &self.experts,
            &self.experts_bias,
            &self.output_gate,
            &self.output_gate_bias,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<S>; 20] {
        [
            &mut self.video.assign_weights,
            &mut self.video.assign_bias,
            &mut self.video.centroids,
            &mut self.audio.assign_weights,
            &mut self.audio.assign_bias,
            &mut self.audio.centroids,
            &mut self.hidden1,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.bn_moving_mean,
            &mut self.bn_moving_var,
            &mut self.hidden2,
            &mut self.hidden2_bias,
            &mut self.hidden_gate,
            &mut self.hidden_gate_bias,
            &mut self.gates,
            &mut self.experts,
            &mut self.experts_bias,
            &mut self.output_gate,
            &mut self.output_gate_bias,
        ]
    }

    fn filled(cfg: &ModelConfig, value: impl Fn(&TensorSpec) -> S) -> Self {
        let mut p = Self::default();
        for (spec, buf) in layout(cfg).iter().zip(p.buffers_mut()) {
            *buf = vec![value(spec); spec.shape.iter().product()];
        }
        p
    }

    /// Every tensor zero except the moving variance, which is one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, |s| match s.role {
            TensorRole::MovingVariance => S::one(),
            _ => S::zero(),
        })
    }

    /// Zero buffers of the right shapes, including moving statistics.
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, |_| S::zero())
    }

    /// Xavier-uniform matrices, zero biases, unit BN scale and variance.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        for (spec, buf) in layout(cfg).iter().zip(p.buffers_mut()) {
            match spec.role {
                TensorRole::Matrix => {
                    let (fan_in, fan_out) = (spec.shape[0] as f64, spec.shape[1] as f64);
                    let limit = (6.0 / (fan_in + fan_out)).sqrt();
                    for x in buf.iter_mut() {
                        *x = S::from_f64(rng.random_range(-limit..limit));
                    }
                }
                TensorRole::BnGamma | TensorRole::MovingVariance => buf.fill(S::one()),
                TensorRole::Bias | TensorRole::BnBeta | TensorRole::MovingMean => buf.fill(S::zero()),
            }
        }
        p
    }

    /// Reads the named tensors of a bundle, widening half-precision storage.
    pub fn from_bundle(cfg: &ModelConfig, bundle: &TensorBundle) -> Result<Self> {
        let mut p = Self::default();
        for (spec, buf) in layout(cfg).iter().zip(p.buffers_mut()) {
            let t = bundle
                .get(spec.name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            *buf = t.to_f32_vec().into_iter().map(S::from_f32).collect();
        }
        Ok(p)
    }

    /// Single-precision bundle with the canonical names.
    pub fn to_bundle(&self, cfg: &ModelConfig) -> TensorBundle {
        let mut b = TensorBundle::new();
        for (spec, buf) in layout(cfg).into_iter().zip(self.buffers()) {
            let t = Tensor::single(spec.name, spec.shape, buf.iter().map(|x| x.as_f32()).collect())
                .expect("buffer matches layout");
            b.insert(t).expect("layout names are unique");
        }
        b
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        let mut out = Params::<T>::default();
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.iter().map(|x| T::from_f64(x.as_f64())).collect();
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}

/// Model weights stored as a tensor bundle with the canonical names of
/// [`layout`]. Tensors may be stored in either precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    bundle: TensorBundle,
}

impl ModelWeights {
    /// Validates that `bundle` holds exactly the tensors `cfg` implies.
    pub fn from_bundle(cfg: &ModelConfig, bundle: TensorBundle) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        for spec in &specs {
            match bundle.get(spec.name) {
                None => return Err(Error::Shape(format!("missing tensor `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "tensor `{}` has shape {:?}, config expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if bundle.len() != specs.len() {
            let extra: Vec<_> = bundle.names().filter(|n| !specs.iter().any(|s| s.name == *n)).collect();
            return Err(Error::Shape(format!("unexpected tensors {extra:?}")));
        }
        if let Some(t) = bundle.get(BN_MOVING_VAR) {
            if t.to_f32_vec().iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Validation("moving variance must be positive".into()));
            }
        }
        Ok(Self { bundle })
    }

    pub fn from_params<S: Scalar>(cfg: &ModelConfig, params: &Params<S>) -> Self {
        Self { bundle: params.to_bundle(cfg) }
    }

    pub fn params<S: Scalar>(&self, cfg: &ModelConfig) -> Result<Params<S>> {
        Params::from_bundle(cfg, &self.bundle)
    }

    pub fn bundle(&self) -> &TensorBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> TensorBundle {
        self.bundle
    }

    pub fn is_single_precision(&self) -> bool {
        self.bundle.tensors().all(|t| t.precision() == Precision::Single)
    }
}
