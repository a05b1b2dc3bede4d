//! Weighted blends of independently trained models under a byte budget.
//!
//! Every member stores its four large tensors in half precision and the rest
//! in single precision. Arithmetic always runs in single precision: stored
//! half values are widened once when the member is assembled.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{gap_at_k, top_k_predictions, GapResult, PredictionRecord, Truth};
use crate::model::{forward, FrameFeatures, Mode, ModelConfig, ModelWeights, Params};
use crate::sizing::{float16_compress, Selection, SizeReport};
use crate::training::Checkpoint;

pub const DEFAULT_BUDGET_BYTES: u64 = 1 << 30;
const COEFFICIENT_SUM_TOLERANCE: f64 = 1e-6;
const MAX_TUNED_MEMBERS: usize = 7;

fn default_budget() -> u64 {
    DEFAULT_BUDGET_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    /// Single precision checkpoint written by training.
    pub path: PathBuf,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
    #[serde(default = "default_budget")]
    pub budget_bytes: u64,
    /// Accept coefficients that do not sum to one; predictions are then
    /// clipped to `[0, 1]`.
    #[serde(default)]
    pub allow_unnormalized: bool,
}

impl EnsembleSpec {
    pub fn new(members: Vec<MemberSpec>) -> Self {
        Self { members, budget_bytes: DEFAULT_BUDGET_BYTES, allow_unnormalized: false }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub config: ModelConfig,
    /// Stored weights, big-4 in half precision.
    pub weights: ModelWeights,
    pub coefficient: f64,
    pub size: SizeReport,
    pub source: Option<PathBuf>,
    compute: Params<f32>,
}

impl EnsembleMember {
    /// Compresses single precision `weights` and prepares them for compute.
    pub fn new(config: ModelConfig, weights: &ModelWeights, coefficient: f64) -> Result<Self> {
        let (bundle, _) = float16_compress(weights.bundle(), &Selection::default(), false)?;
        let weights = ModelWeights::from_bundle(&config, bundle)?;
        let compute = weights.params::<f32>(&config)?;
        let size = SizeReport::from_bundle(weights.bundle());
        Ok(Self { config, weights, coefficient, size, source: None, compute })
    }

    pub fn predict(&self, features: &FrameFeatures) -> Result<Vec<f32>> {
        forward(&self.config, &self.compute, features, Mode::Inference)
    }

    pub fn bytes(&self) -> u64 {
        self.size.total_bytes
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub total_bytes: u64,
    pub budget_bytes: u64,
    pub allow_unnormalized: bool,
}

fn validate_coefficients(coeffs: &[f64], allow_unnormalized: bool) -> Result<()> {
    if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::Validation(format!("coefficients must be finite and non-negative, got {coeffs:?}")));
    }
    let sum: f64 = coeffs.iter().sum();
    if !allow_unnormalized && (sum - 1.0).abs() > COEFFICIENT_SUM_TOLERANCE {
        return Err(Error::Validation(format!("coefficients sum to {sum}, expected 1")));
    }
    Ok(())
}

impl EnsembleModel {
    pub fn from_members(members: Vec<EnsembleMember>, budget_bytes: u64, allow_unnormalized: bool) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Input("an ensemble needs at least one member".into()))?;
        let (v, dv, da) = (first.config.vocab, first.config.d_video, first.config.d_audio);
        for (i, m) in members.iter().enumerate() {
            if (m.config.vocab, m.config.d_video, m.config.d_audio) != (v, dv, da) {
                return Err(Error::Incompatible(format!(
                    "member {i} has vocab={} d_video={} d_audio={}, member 0 has {v}, {dv}, {da}",
                    m.config.vocab, m.config.d_video, m.config.d_audio
                )));
            }
        }
        validate_coefficients(&members.iter().map(|m| m.coefficient).collect::<Vec<_>>(), allow_unnormalized)?;
        let total_bytes = members.iter().map(EnsembleMember::bytes).sum();
        Ok(Self { members, total_bytes, budget_bytes, allow_unnormalized })
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.coefficient).collect()
    }

    /// Replaces the blend coefficients, keeping the member weights.
    pub fn set_coefficients(&mut self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.members.len() {
            return Err(Error::Input(format!("{} coefficients for {} members", coeffs.len(), self.members.len())));
        }
        validate_coefficients(coeffs, self.allow_unnormalized)?;
        for (m, &c) in self.members.iter_mut().zip(coeffs) {
            m.coefficient = c;
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.members[0].config.vocab
    }

    /// Forward pass of every member for one video, in member order.
    pub fn member_predictions(&self, features: &FrameFeatures) -> Result<Vec<Vec<f32>>> {
        self.members.par_iter().map(|m| m.predict(features)).collect()
    }
}

/// Loads each member checkpoint and assembles the ensemble.
pub fn build_ensemble(spec: &EnsembleSpec) -> Result<EnsembleModel> {
    let members = spec
        .members
        .iter()
        .map(|ms| {
            let ckpt = Checkpoint::load(&ms.path)?;
            let mut m = EnsembleMember::new(ckpt.config, &ckpt.weights, ms.coefficient)?;
            m.source = Some(ms.path.clone());
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::from_members(members, spec.budget_bytes, spec.allow_unnormalized)
}

/// `Σ c_i p_i` accumulated in member order, clipped to `[0, 1]` when `clip`.
pub fn blend(predictions: &[Vec<f32>], coeffs: &[f64], clip: bool) -> Vec<f32> {
    let v = predictions.first().map_or(0, Vec::len);
    (0..v)
        .map(|j| {
            let s: f64 = predictions.iter().zip(coeffs).map(|(p, &c)| c * p[j] as f64).sum();
            let s = s as f32;
            if clip {
                s.clamp(0.0, 1.0)
            } else {
                s
            }
        })
        .collect()
}

pub fn ensemble_predict(model: &EnsembleModel, features: &FrameFeatures) -> Result<Vec<f32>> {
    let preds = model.member_predictions(features)?;
    Ok(blend(&preds, &model.coefficients(), model.allow_unnormalized))
}

/// Top-`k` ensemble predictions for every video, in dataset order.
pub fn ensemble_records(model: &EnsembleModel, dataset: &Dataset, k: usize) -> Result<Vec<PredictionRecord>> {
    let per_video = dataset
        .videos
        .par_iter()
        .map(|v| ensemble_predict(model, &v.features).map(|p| top_k_predictions(&p, &v.video_id, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn evaluate_ensemble(model: &EnsembleModel, dataset: &Dataset, k: usize) -> Result<GapResult> {
    gap_at_k(&ensemble_records(model, dataset, k)?, &dataset.truth())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetVerdict {
    pub pass: bool,
    pub total_bytes: u64,
    pub budget_bytes: u64,
    /// `budget - total`, negative when over budget.
    pub headroom_bytes: i64,
}

pub fn budget_check(model: &EnsembleModel) -> BudgetVerdict {
    BudgetVerdict {
        pass: model.total_bytes <= model.budget_bytes,
        total_bytes: model.total_bytes,
        budget_bytes: model.budget_bytes,
        headroom_bytes: model.budget_bytes as i64 - model.total_bytes as i64,
    }
}

/// All points of the `members`-simplex with spacing `step`, in
/// lexicographically descending order.
pub fn simplex_lattice(members: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    let n = (1.0 / step).round();
    if members == 0 || !(step > 0.0) || n < 1.0 || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("grid step {step} does not divide 1 evenly")));
    }
    let n = n as usize;
    let mut out = Vec::new();
    let mut counts = vec![0usize; members];
    fn rec(i: usize, left: usize, n: usize, counts: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if i + 1 == counts.len() {
            counts[i] = left;
            out.push(counts.iter().map(|&c| c as f64 / n as f64).collect());
            return;
        }
        for c in (0..=left).rev() {
            counts[i] = c;
            rec(i + 1, left - c, n, counts, out);
        }
    }
    rec(0, n, n, &mut counts, &mut out);
    Ok(out)
}

/// Coefficients found by [`tune_from_predictions`] and their score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedCoefficients {
    pub coefficients: Vec<f64>,
    pub gap: GapResult,
    pub lattice_points: usize,
}

/// Exhaustive lattice search over precomputed predictions indexed
/// `[member][video][class]`. The first lattice point with the highest GAP
/// wins, so ties go to the lexicographically largest point.
pub fn tune_from_predictions(
    predictions: &[Vec<Vec<f32>>],
    video_ids: &[String],
    truth: &Truth,
    step: f64,
    k: usize,
) -> Result<TunedCoefficients> {
    let m = predictions.len();
    if !(2..=MAX_TUNED_MEMBERS).contains(&m) {
        return Err(Error::Input(format!("tuning needs 2 to {MAX_TUNED_MEMBERS} members, got {m}")));
    }
    if video_ids.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if predictions.iter().any(|p| p.len() != video_ids.len()) {
        return Err(Error::Shape("every member needs one prediction per video".into()));
    }
    let lattice = simplex_lattice(m, step)?;
    let scores = lattice
        .par_iter()
        .map(|coeffs| {
            let mut records = Vec::with_capacity(video_ids.len() * k);
            let mut member_preds = Vec::with_capacity(m);
            for (v, id) in video_ids.iter().enumerate() {
                member_preds.clear();
                member_preds.extend(predictions.iter().map(|p| p[v].clone()));
                records.extend(top_k_predictions(&blend(&member_preds, coeffs, false), id, k));
            }
            gap_at_k(&records, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.gap > scores[best].gap {
            best = i;
        }
    }
    Ok(TunedCoefficients { coefficients: lattice[best].clone(), gap: scores[best], lattice_points: lattice.len() })
}

/// Tunes the blend coefficients of `model` on `dataset` and returns them
/// without modifying the model.
pub fn tune_coefficients(model: &EnsembleModel, dataset: &Dataset, step: f64, k: usize) -> Result<TunedCoefficients> {
    if dataset.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let per_video = dataset
        .videos
        .par_iter()
        .map(|v| model.member_predictions(&v.features))
        .collect::<Result<Vec<_>>>()?;
    let m = model.members.len();
    let mut by_member: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(dataset.len()); m];
    for preds in per_video {
        for (dst, p) in by_member.iter_mut().zip(preds) {
            dst.push(p);
        }
    }
    let ids: Vec<String> = dataset.videos.iter().map(|v| v.video_id.clone()).collect();
    tune_from_predictions(&by_member, &ids, &dataset.truth(), step, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub path: PathBuf,
    pub coefficient: f64,
    pub config: ModelConfig,
    pub bytes: u64,
}

/// On-disk description of a built ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<ManifestMember>,
    pub budget_bytes: u64,
    pub total_bytes: u64,
    pub allow_unnormalized: bool,
}

impl EnsembleManifest {
    pub fn from_model(model: &EnsembleModel) -> Result<Self> {
        let members = model
            .members
            .iter()
            .map(|m| {
                let path = m
                    .source
                    .clone()
                    .ok_or_else(|| Error::Input("in-memory members have no checkpoint path".into()))?;
                Ok(ManifestMember { path, coefficient: m.coefficient, config: m.config.clone(), bytes: m.bytes() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            budget_bytes: model.budget_bytes,
            total_bytes: model.total_bytes,
            allow_unnormalized: model.allow_unnormalized,
        })
    }

    pub fn spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            members: self.members.iter().map(|m| MemberSpec { path: m.path.clone(), coefficient: m.coefficient }).collect(),
            budget_bytes: self.budget_bytes,
            allow_unnormalized: self.allow_unnormalized,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Rebuilds the model from the member checkpoints and checks that their
    /// configs still match the recorded ones.
    pub fn build(&self) -> Result<EnsembleModel> {
        let model = build_ensemble(&self.spec())?;
        for (i, (m, rec)) in model.members.iter().zip(&self.members).enumerate() {
            if m.config != rec.config {
                return Err(Error::Incompatible(format!("member {i} checkpoint no longer matches the manifest config")));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use crate::training::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, h: usize) -> ModelConfig {
        ModelConfig::new(k, h, 6, 4, 2)
    }

    fn member(k: usize, h: usize, seed: u64, c: f64) -> EnsembleMember {
        let cfg = cfg(k, h);
        EnsembleMember::new(cfg.clone(), &ModelWeights::from_params(&cfg, &init_params(&cfg, seed)), c).unwrap()
    }

    fn features(seed: u64) -> FrameFeatures {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        FrameFeatures::new(n, (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect(), (0..n * 2).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn members_store_big4_in_half_precision() {
        let m = member(2, 3, 0, 1.0);
        for t in m.weights.bundle().tensors() {
            let expected = if crate::model::BIG4.contains(&t.name()) { Precision::Half } else { Precision::Single };
            assert_eq!(t.precision(), expected, "{}", t.name());
        }
    }

    #[test]
    fn single_member_equals_its_own_prediction() {
        let e = EnsembleModel::from_members(vec![member(2, 3, 1, 1.0)], DEFAULT_BUDGET_BYTES, false).unwrap();
        let f = features(9);
        assert_eq!(ensemble_predict(&e, &f).unwrap(), e.members[0].predict(&f).unwrap());
    }

    #[test]
    fn identical_members_blend_to_themselves() {
        let e = EnsembleModel::from_members(vec![member(2, 3, 1, 0.3), member(2, 3, 1, 0.7)], DEFAULT_BUDGET_BYTES, false).unwrap();
        let f = features(2);
        let single = e.members[0].predict(&f).unwrap();
        for (a, b) in ensemble_predict(&e, &f).unwrap().iter().zip(&single) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn four_members_match_member_by_member_oracle() {
        let coeffs = [0.39, 0.26, 0.21, 0.14];
        let members: Vec<_> = [(2, 3), (3, 2), (1, 4), (2, 2)]
            .iter()
            .zip(coeffs)
            .enumerate()
            .map(|(i, (&(k, h), c))| member(k, h, i as u64 + 10, c))
            .collect();
        let e = EnsembleModel::from_members(members, DEFAULT_BUDGET_BYTES, false).unwrap();
        let f = features(3);
        let mut oracle = vec![0.0f64; 6];
        for (m, c) in e.members.iter().zip(coeffs) {
            let p = m.predict(&f).unwrap();
            for j in 0..6 {
                oracle[j] += c * p[j] as f64;
            }
        }
        for (a, b) in ensemble_predict(&e, &f).unwrap().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn blend_arithmetic() {
        let p = vec![vec![0.2f32, 0.8], vec![0.6, 0.4]];
        assert_eq!(blend(&p, &[0.25, 0.75], false), vec![0.5, 0.5]);
        assert_eq!(blend(&p, &[1.0, 0.0], false), p[0]);
        assert_eq!(blend(&p, &[2.0, 2.0], true), vec![1.0, 1.0]);
    }

    #[test]
    fn blend_is_linear_in_coefficients() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<Vec<f32>> = (0..3).map(|_| (0..5).map(|_| r.random()).collect()).collect();
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.1, 0.3];
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        let (pa, pb, pm) = (blend(&p, &a, false), blend(&p, &b, false), blend(&p, &mix, false));
        for j in 0..5 {
            assert!((0.5 * pa[j] + 0.5 * pb[j] - pm[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_coefficients_and_mismatched_members() {
        assert!(matches!(
            EnsembleModel::from_members(vec![member(2, 3, 0, 0.5), member(2, 3, 1, 0.4)], DEFAULT_BUDGET_BYTES, false),
            Err(Error::Validation(_))
        ));
        assert!(EnsembleModel::from_members(vec![member(2, 3, 0, 0.5), member(2, 3, 1, 0.4)], DEFAULT_BUDGET_BYTES, true).is_ok());
        let other = ModelConfig::new(2, 3, 7, 4, 2);
        let m2 = EnsembleMember::new(other.clone(), &ModelWeights::from_params(&other, &init_params(&other, 0)), 0.5).unwrap();
        assert!(matches!(
            EnsembleModel::from_members(vec![member(2, 3, 0, 0.5), m2], DEFAULT_BUDGET_BYTES, false),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn total_bytes_is_sum_of_compressed_members() {
        let e = EnsembleModel::from_members(vec![member(2, 3, 0, 0.5), member(3, 2, 1, 0.5)], DEFAULT_BUDGET_BYTES, false).unwrap();
        let sum: u64 = e.members.iter().map(|m| crate::tensor::bundle_size_bytes(m.weights.bundle())).sum();
        assert_eq!(e.total_bytes, sum);
        let v = budget_check(&e);
        assert!(v.pass);
        assert_eq!(v.headroom_bytes, DEFAULT_BUDGET_BYTES as i64 - sum as i64);
        let tight = EnsembleModel { budget_bytes: 1, ..e };
        assert!(!budget_check(&tight).pass);
    }

    #[test]
    fn lattice_enumeration() {
        assert_eq!(simplex_lattice(2, 0.5).unwrap(), vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(simplex_lattice(3, 0.25).unwrap().len(), 15);
        assert_eq!(simplex_lattice(4, 0.01).unwrap().len(), 176_851);
        assert!(simplex_lattice(2, 0.3).is_err());
        for p in simplex_lattice(3, 0.1).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn planted() -> (Vec<Vec<Vec<f32>>>, Vec<String>, Truth) {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<String> = (0..40).map(|i| format!("v{i}")).collect();
        let mut truth = Truth::new();
        let mut good = Vec::new();
        for id in &ids {
            let label = r.random_range(0..4u32);
            truth.insert(id.clone(), [label].into());
            good.push((0..4).map(|j| if j == label { 0.55 } else { 0.45 }).collect());
        }
        let noise = |r: &mut ChaCha8Rng| -> Vec<Vec<f32>> { (0..40).map(|_| (0..4).map(|_| r.random()).collect()).collect() };
        let n1 = noise(&mut r);
        let n2 = noise(&mut r);
        (vec![n1, good, n2], ids, truth)
    }

    #[test]
    fn tuning_finds_the_dominant_member() {
        let (preds, ids, truth) = planted();
        let t = tune_from_predictions(&preds, &ids, &truth, 0.25, 3).unwrap();
        let mut best = (f64::MIN, vec![]);
        for c in simplex_lattice(3, 0.25).unwrap() {
            let recs: Vec<_> = ids
                .iter()
                .enumerate()
                .flat_map(|(v, id)| {
                    let p: Vec<Vec<f32>> = preds.iter().map(|m| m[v].clone()).collect();
                    top_k_predictions(&blend(&p, &c, false), id, 3)
                })
                .collect();
            let g = gap_at_k(&recs, &truth).unwrap().gap;
            if g > best.0 {
                best = (g, c);
            }
        }
        assert_eq!(t.coefficients, best.1);
        assert_eq!(t.gap.gap, best.0);
        assert_eq!(t.gap.gap, 1.0);
        assert_eq!(t.coefficients, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn identical_members_tie_to_first_vertex() {
        let (preds, ids, truth) = planted();
        let two = vec![preds[1].clone(), preds[1].clone()];
        let t = tune_from_predictions(&two, &ids, &truth, 0.1, 3).unwrap();
        assert_eq!(t.coefficients, vec![1.0, 0.0]);
    }

    #[test]
    fn tuning_preconditions() {
        let (preds, ids, truth) = planted();
        assert!(tune_from_predictions(&preds[..1], &ids, &truth, 0.5, 3).is_err());
        let empty: Vec<Vec<Vec<f32>>> = vec![vec![], vec![]];
        assert!(tune_from_predictions(&empty, &[], &truth, 0.5, 3).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut specs = Vec::new();
        for (i, c) in [0.6, 0.4].into_iter().enumerate() {
            let cfg = cfg(2, 3);
            let ck = Checkpoint::new(i as u64, cfg.clone(), ModelWeights::from_params(&cfg, &init_params(&cfg, i as u64)));
            let p = dir.path().join(ck.file_name());
            ck.save(&p).unwrap();
            specs.push(MemberSpec { path: p, coefficient: c });
        }
        let e = build_ensemble(&EnsembleSpec::new(specs)).unwrap();
        let man = EnsembleManifest::from_model(&e).unwrap();
        let path = dir.path().join("ensemble.json");
        man.save(&path).unwrap();
        let back = EnsembleManifest::load(&path).unwrap();
        assert_eq!(back, man);
        let e2 = back.build().unwrap();
        let f = features(1);
        assert_eq!(ensemble_predict(&e, &f).unwrap(), ensemble_predict(&e2, &f).unwrap());
    }
}
