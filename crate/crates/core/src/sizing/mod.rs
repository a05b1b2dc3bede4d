//! Byte-exact size accounting, selective half-precision compression and
//! storage what-if calculators.

mod analysis;
mod calibrate;
mod compress;
mod fixtures;

use serde::{Deserialize, Serialize};

use crate::model::{params as names, ModelConfig, BIG4};
use crate::tensor::{Precision, TensorBundle};

pub use analysis::{quantization_rate, sparse_compression_rate, SparseScheme};
pub use calibrate::{calibrate_size_model, candidate_flags, Calibration, CalibrationRow};
pub use compress::{float16_compress, CompressionReport, Selection};
pub use fixtures::{table1, table2, Table1Row, Table2Row};

pub const MB: f64 = 1e6;

/// Extra tensors of experts with a hidden layer; the trainable model never
/// creates them.
pub const EXPERTS_HIDDEN_BIAS: &str = "tower/experts/hidden_biases";
pub const EXPERTS_OUTPUT_WEIGHTS: &str = "tower/experts/output_weights";

/// Which tensors exist beyond the fixed architecture skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingFlags {
    /// Audio clusters as a fraction of video clusters.
    pub audio_cluster_ratio: f64,
    pub use_dummy_expert: bool,
    /// Context gate between the fully connected block and the experts.
    pub include_hidden_gate: bool,
    /// Hidden width inside each expert; 0 means plain affine experts.
    pub expert_hidden_width: usize,
    pub count_biases: bool,
    pub count_bn_stats: bool,
}

impl Default for AccountingFlags {
    fn default() -> Self {
        Self {
            audio_cluster_ratio: 0.5,
            use_dummy_expert: true,
            include_hidden_gate: true,
            expert_hidden_width: 0,
            count_biases: true,
            count_bn_stats: true,
        }
    }
}

/// A model config together with accounting flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeModelConfig {
    pub model: ModelConfig,
    pub flags: AccountingFlags,
}

impl SizeModelConfig {
    /// Applies the flags to `model`: the audio cluster count is
    /// `max(1, floor(k_video * ratio))` and the dummy expert follows the flag.
    pub fn new(mut model: ModelConfig, flags: AccountingFlags) -> Self {
        model.k_audio = ((model.k_video as f64 * flags.audio_cluster_ratio).floor() as usize).max(1);
        model.use_dummy_expert = flags.use_dummy_expert;
        Self { model, flags }
    }

    /// Flags describing exactly the tensors [`crate::model::layout`] creates
    /// for `model`.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            model: model.clone(),
            flags: AccountingFlags {
                audio_cluster_ratio: model.k_audio as f64 / model.k_video as f64,
                use_dummy_expert: model.use_dummy_expert,
                ..AccountingFlags::default()
            },
        }
    }

    /// Full vocabulary (3862 classes) and feature sizes (1024 video, 128 audio)
    /// for a `K<k>-H<h>` model.
    pub fn paper_scale(k: usize, hidden: usize, flags: AccountingFlags) -> Self {
        Self::new(ModelConfig::paper_scale(k, hidden), flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub entries: Vec<SizeEntry>,
    pub total_bytes: u64,
    pub total_mb: f64,
    /// Fraction of bytes held by the four big tensors.
    pub big4_share: f64,
}

impl SizeReport {
    pub fn from_entries(entries: Vec<SizeEntry>) -> Self {
        let total_bytes: u64 = entries.iter().map(|e| e.bytes).sum();
        let big4: u64 = entries.iter().filter(|e| BIG4.contains(&e.name.as_str())).map(|e| e.bytes).sum();
        let big4_share = if total_bytes == 0 { 0.0 } else { big4 as f64 / total_bytes as f64 };
        Self { entries, total_bytes, total_mb: total_bytes as f64 / MB, big4_share }
    }

    /// Sizes of the tensors actually stored in `bundle`, at their stored
    /// precision.
    pub fn from_bundle(bundle: &TensorBundle) -> Self {
        Self::from_entries(
            bundle
                .tensors()
                .map(|t| SizeEntry {
                    name: t.name().to_owned(),
                    shape: t.shape().to_vec(),
                    params: t.len() as u64,
                    bytes: t.size_bytes() as u64,
                })
                .collect(),
        )
    }

    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    /// Bytes after storing the big-4 tensors in half precision.
    pub fn half_compressed_bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| if BIG4.contains(&e.name.as_str()) { e.params * Precision::Half.bytes_per_element() as u64 } else { e.bytes })
            .sum()
    }

    pub fn half_compressed_mb(&self) -> f64 {
        self.half_compressed_bytes() as f64 / MB
    }

    /// `1 - compressed / original` for big-4 half-precision storage.
    pub fn half_compression_rate(&self) -> f64 {
        if self.total_bytes == 0 {
            return 0.0;
        }
        1.0 - self.half_compressed_bytes() as f64 / self.total_bytes as f64
    }

    /// Human readable table: name, shape, params, MB, cumulative share.
    pub fn to_table(&self) -> String {
        let mut sorted: Vec<&SizeEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| b.bytes.cmp(&a.bytes).then(a.name.cmp(&b.name)));
        let mut out = format!("{:<42} {:>18} {:>12} {:>10} {:>8}\n", "tensor", "shape", "params", "MB", "cum%");
        let mut cum = 0u64;
        for e in sorted {
            cum += e.bytes;
            let shape = format!("{:?}", e.shape);
            out.push_str(&format!(
                "{:<42} {:>18} {:>12} {:>10.3} {:>7.2}%\n",
                e.name,
                shape,
                e.params,
                e.bytes as f64 / MB,
                100.0 * cum as f64 / self.total_bytes.max(1) as f64
            ));
        }
        out.push_str(&format!(
            "total {:.2} MB ({} params), big-4 share {:.4}, big-4 half precision {:.2} MB\n",
            self.total_mb,
            self.param_count(),
            self.big4_share,
            self.half_compressed_mb()
        ));
        out
    }
}

/// Lists every tensor of the architecture under the accounting flags, all in
/// single precision.
pub fn enumerate_tensors(cfg: &SizeModelConfig) -> SizeReport {
    let m = &cfg.model;
    let f = &cfg.flags;
    let two_h = 2 * m.hidden;
    let v = m.vocab;
    let e = m.num_experts;
    let gate_cols = e + usize::from(m.use_dummy_expert);

    let mut shapes: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut add = |name, shape: Vec<usize>| shapes.push((name, shape));
    for (w, b, c, d, k) in [
        (names::VIDEO_ASSIGN_WEIGHTS, names::VIDEO_ASSIGN_BIAS, names::VIDEO_CENTROIDS, m.d_video, m.k_video),
        (names::AUDIO_ASSIGN_WEIGHTS, names::AUDIO_ASSIGN_BIAS, names::AUDIO_CENTROIDS, m.d_audio, m.k_audio),
    ] {
        add(w, vec![d, k]);
        if f.count_biases {
            add(b, vec![k]);
        }
        add(c, vec![k, d]);
    }
    add(names::HIDDEN1_WEIGHTS, vec![m.k_video * m.d_video + m.k_audio * m.d_audio, m.hidden]);
    add(names::BN_GAMMA, vec![m.hidden]);
    add(names::BN_BETA, vec![m.hidden]);
    if f.count_bn_stats {
        add(names::BN_MOVING_MEAN, vec![m.hidden]);
        add(names::BN_MOVING_VAR, vec![m.hidden]);
    }
    add(names::HIDDEN2_WEIGHTS, vec![m.hidden, two_h]);
    if f.count_biases {
        add(names::HIDDEN2_BIAS, vec![two_h]);
    }
    if f.include_hidden_gate {
        add(names::HIDDEN_GATE_WEIGHTS, vec![two_h, two_h]);
        if f.count_biases {
            add(names::HIDDEN_GATE_BIAS, vec![two_h]);
        }
    }
    add(names::GATES_WEIGHTS, vec![two_h, v * gate_cols]);
    if f.expert_hidden_width == 0 {
        add(names::EXPERTS_WEIGHTS, vec![two_h, v * e]);
    } else {
        let w = f.expert_hidden_width;
        add(names::EXPERTS_WEIGHTS, vec![two_h, e * w]);
        if f.count_biases {
            add(EXPERTS_HIDDEN_BIAS, vec![e * w]);
        }
        add(EXPERTS_OUTPUT_WEIGHTS, vec![w, v * e]);
    }
    if f.count_biases {
        add(names::EXPERTS_BIAS, vec![v * e]);
    }
    add(names::OUTPUT_GATE_WEIGHTS, vec![v, v]);
    if f.count_biases {
        add(names::OUTPUT_GATE_BIAS, vec![v]);
    }

    let entries = shapes
        .into_iter()
        .map(|(name, shape)| {
            let params = shape.iter().map(|&d| d as u64).product::<u64>();
            SizeEntry { name: name.to_owned(), shape, params, bytes: params * Precision::Single.bytes_per_element() as u64 }
        })
        .collect();
    SizeReport::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelWeights, Params};
    use crate::tensor::bundle_size_bytes;

    fn toy() -> SizeModelConfig {
        let mut m = ModelConfig::new(2, 4, 5, 8, 2);
        m.k_audio = 1;
        SizeModelConfig::for_model(&m)
    }

    #[test]
    fn toy_count_matches_hand_enumeration() {
        // V=5, Kv=2, Ka=1, H=4, Dv=8, Da=2, 5 plain experts + dummy
        let video = 8 * 2 + 2 + 2 * 8;
        let audio = 2 + 1 + 2;
        let hidden1 = (2 * 8 + 1 * 2) * 4;
        let bn = 4 * 4;
        let hidden2 = 4 * 8 + 8;
        let hidden_gate = 8 * 8 + 8;
        let gates = 8 * 5 * 6;
        let experts = 8 * 25 + 25;
        let out_gate = 25 + 5;
        let expected = video + audio + hidden1 + bn + hidden2 + hidden_gate + gates + experts + out_gate;
        let r = enumerate_tensors(&toy());
        assert_eq!(r.param_count(), expected as u64);
        assert_eq!(r.total_bytes, 4 * expected as u64);
    }

    #[test]
    fn matches_instantiated_weights() {
        let cfg = toy();
        let w = ModelWeights::from_params(&cfg.model, &Params::<f32>::zeros(&cfg.model));
        let r = enumerate_tensors(&cfg);
        assert_eq!(r.total_bytes, bundle_size_bytes(w.bundle()));
        for e in &r.entries {
            assert_eq!(w.bundle().get(&e.name).unwrap().shape(), e.shape.as_slice());
        }
        assert_eq!(r.entries.len(), w.bundle().len());
    }

    #[test]
    fn hidden_size_is_monotone() {
        let flags = AccountingFlags::default();
        let a = enumerate_tensors(&SizeModelConfig::paper_scale(24, 720, flags));
        let b = enumerate_tensors(&SizeModelConfig::paper_scale(24, 1440, flags));
        assert!(b.total_bytes > a.total_bytes);
    }

    #[test]
    fn compression_rate_is_half_the_big4_share() {
        let r = enumerate_tensors(&SizeModelConfig::paper_scale(16, 512, AccountingFlags::default()));
        assert!((r.half_compression_rate() - r.big4_share / 2.0).abs() < 1e-12);
    }
}
