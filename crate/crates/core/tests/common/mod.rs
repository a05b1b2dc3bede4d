//! Oracles and random generators shared by the integration tests. The
//! oracles recompute everything with plain loops and no library helpers.

#![allow(dead_code)]

use std::collections::BTreeMap;

use gatedvlad::metrics::{PredictionRecord, Truth};
use gatedvlad::model::{forward_batch, layout, FrameFeatures, Mode, ModelConfig, Params};
use gatedvlad::training::bce_loss;
use rand::Rng;

pub fn random_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let mut cfg = ModelConfig::new(
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=3),
    );
    cfg.k_audio = rng.random_range(1..=2);
    cfg.num_experts = rng.random_range(1..=3);
    cfg.use_dummy_expert = rng.random_bool(0.5);
    cfg.normalize_vlad = rng.random_bool(0.7);
    cfg
}

/// Every buffer filled with random values, moving variance kept positive.
pub fn random_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Params<f64> {
    let mut p = Params::<f64>::init(cfg, rng);
    let specs = layout(cfg);
    for (spec, buf) in specs.iter().zip(p.buffers_mut()) {
        use gatedvlad::model::TensorRole::*;
        match spec.role {
            Matrix => {}
            Bias | BnBeta | MovingMean => buf.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
            BnGamma => buf.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            MovingVariance => buf.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0)),
        }
    }
    p
}

pub fn random_features<R: Rng>(cfg: &ModelConfig, rng: &mut R, frames: usize) -> FrameFeatures {
    let video = (0..frames * cfg.d_video).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let audio = (0..frames * cfg.d_audio).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FrameFeatures::new(frames, video, audio).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn l2(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().max(1e-12).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn vlad(x: &[f32], d: usize, w: &[f64], b: &[f64], c: &[f64], k: usize, normalize: bool) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; k * d];
    for i in 0..n {
        let xi: Vec<f64> = x[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
        let logits: Vec<f64> = (0..k).map(|cl| b[cl] + (0..d).map(|j| xi[j] * w[j * k + cl]).sum::<f64>()).collect();
        let a = softmax(&logits);
        for cl in 0..k {
            for j in 0..d {
                out[cl * d + j] += a[cl] * (xi[j] - c[cl * d + j]);
            }
        }
    }
    if normalize {
        for row in out.chunks_mut(d) {
            l2(row);
        }
        l2(&mut out);
    }
    out
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|o| b.map_or(0.0, |b| b[o]) + x.iter().enumerate().map(|(i, &xi)| xi * w[i * cols + o]).sum::<f64>())
        .collect()
}

/// Batch-normalised first hidden layer before the ReLU, one row per video.
pub fn oracle_preactivations(cfg: &ModelConfig, p: &Params<f64>, batch: &[&FrameFeatures], mode: Mode) -> Vec<Vec<f64>> {
    let h = cfg.hidden;
    let z: Vec<Vec<f64>> = batch
        .iter()
        .map(|f| {
            let mut x0 = vlad(&f.video, cfg.d_video, &p.video.assign_weights, &p.video.assign_bias, &p.video.centroids, cfg.k_video, cfg.normalize_vlad);
            x0.extend(vlad(&f.audio, cfg.d_audio, &p.audio.assign_weights, &p.audio.assign_bias, &p.audio.centroids, cfg.k_audio, cfg.normalize_vlad));
            affine(&x0, &p.hidden1, None, h)
        })
        .collect();
    let (mean, var) = match mode {
        Mode::Inference => (p.bn_moving_mean.clone(), p.bn_moving_var.clone()),
        Mode::Train => {
            let b = z.len() as f64;
            let mean: Vec<f64> = (0..h).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / b).collect();
            let var = (0..h).map(|j| z.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / b).collect();
            (mean, var)
        }
    };
    z.iter()
        .map(|zr| (0..h).map(|j| p.bn_gamma[j] * (zr[j] - mean[j]) / (var[j] + 1e-5).sqrt() + p.bn_beta[j]).collect())
        .collect()
}

/// Straight-line forward pass over a batch.
pub fn oracle_forward(cfg: &ModelConfig, p: &Params<f64>, batch: &[&FrameFeatures], mode: Mode) -> Vec<Vec<f64>> {
    let h = cfg.hidden;
    let e = cfg.num_experts;
    let g = e + usize::from(cfg.use_dummy_expert);
    oracle_preactivations(cfg, p, batch, mode)
        .iter()
        .map(|y| {
            let h1: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
            let h2 = affine(&h1, &p.hidden2, Some(&p.hidden2_bias), 2 * h);
            let gate = affine(&h2, &p.hidden_gate, Some(&p.hidden_gate_bias), 2 * h);
            let m: Vec<f64> = h2.iter().zip(&gate).map(|(x, gv)| x * sigmoid(*gv)).collect();
            let gl = affine(&m, &p.gates, None, cfg.vocab * g);
            let el = affine(&m, &p.experts, Some(&p.experts_bias), cfg.vocab * e);
            let probs: Vec<f64> = (0..cfg.vocab)
                .map(|c| {
                    let gd = softmax(&gl[c * g..(c + 1) * g]);
                    (0..e).map(|i| gd[i] * sigmoid(el[c * e + i])).sum()
                })
                .collect();
            let og = affine(&probs, &p.output_gate, Some(&p.output_gate_bias), cfg.vocab);
            probs.iter().zip(&og).map(|(x, o)| x * sigmoid(*o)).collect()
        })
        .collect()
}

fn relu_pattern(cfg: &ModelConfig, p: &Params<f64>, batch: &[&FrameFeatures], mode: Mode) -> Vec<bool> {
    oracle_preactivations(cfg, p, batch, mode).into_iter().flatten().map(|v| v > 0.0).collect()
}

fn batch_loss(cfg: &ModelConfig, p: &Params<f64>, batch: &[&FrameFeatures], labels: &[Vec<f64>], mode: Mode) -> f64 {
    let (out, _) = forward_batch(cfg, p, batch, mode).unwrap();
    out.iter().zip(labels).map(|(o, y)| bce_loss(o, y)).sum::<f64>() / batch.len() as f64
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub failures: Vec<String>,
    /// Coordinates whose stencil crosses a ReLU kink, where the central
    /// difference is not a derivative.
    pub skipped_kinks: usize,
    /// Largest analytic magnitude seen per tensor.
    pub coverage: BTreeMap<&'static str, f64>,
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn fd_check(
    cfg: &ModelConfig,
    p: &Params<f64>,
    batch: &[&FrameFeatures],
    labels: &[Vec<f64>],
    mode: Mode,
    report: &mut FdReport,
) {
    let analytic = gatedvlad::model::backward(cfg, p, batch, labels, mode).unwrap();
    let specs = layout(cfg);
    let centre = relu_pattern(cfg, p, batch, mode);
    for (t, spec) in specs.iter().enumerate() {
        if !spec.role.trainable() {
            continue;
        }
        let grads = analytic.grads.buffers()[t].clone();
        for i in 0..grads.len() {
            let mut plus = p.clone();
            plus.buffers_mut()[t][i] += FD_EPS;
            let mut minus = p.clone();
            minus.buffers_mut()[t][i] -= FD_EPS;
            if relu_pattern(cfg, &plus, batch, mode) != centre || relu_pattern(cfg, &minus, batch, mode) != centre {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (batch_loss(cfg, &plus, batch, labels, mode) - batch_loss(cfg, &minus, batch, labels, mode)) / (2.0 * FD_EPS);
            let a = grads[i];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            let entry = report.coverage.entry(spec.name).or_insert(0.0);
            *entry = entry.max(a.abs());
            if diff > FD_ABS_FLOOR {
                report.worst_relative = report.worst_relative.max(rel);
                if rel > FD_REL_TOL {
                    report.failures.push(format!("{}[{i}] analytic {a:e} numeric {numeric:e} ({mode:?})", spec.name));
                }
            }
        }
    }
}

/// GAP by explicit rank counting: each record's rank is one plus the number
/// of records that outrank it.
pub fn gap_oracle(records: &[PredictionRecord], truth: &Truth) -> f64 {
    let outranks = |a: &PredictionRecord, b: &PredictionRecord| {
        a.confidence > b.confidence
            || (a.confidence == b.confidence
                && (a.video_id < b.video_id || (a.video_id == b.video_id && a.label_id < b.label_id)))
    };
    let n = records.len();
    let mut by_rank: Vec<Option<usize>> = vec![None; n];
    for (i, r) in records.iter().enumerate() {
        let mut rank = 0;
        for (j, s) in records.iter().enumerate() {
            if i != j && (outranks(s, r) || (s == r && j < i)) {
                rank += 1;
            }
        }
        by_rank[rank] = Some(i);
    }
    let positives: usize = truth.values().map(|s| s.len()).sum();
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (rank, idx) in by_rank.iter().enumerate() {
        let r = &records[idx.expect("ranks are a permutation")];
        if truth[&r.video_id].contains(&r.label_id) {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    acc / positives as f64
}
