//! Full forward pass and analytic backward pass over a batch.

use super::ops::{
    add_assign, context_gate_backward, context_gate_forward, moe_backward, moe_forward, outer_acc, vec_mat,
    vec_mat_t, vlad_backward, vlad_forward, MoeCache, MoeShape, VladCache,
};
use super::{FrameFeatures, Mode, ModelConfig, Params, Scalar, BN_EPSILON};
use crate::error::{Error, Result};
use crate::tensor::TensorBundle;
use crate::training::{bce_grad, bce_loss};

/// Per-feature batch statistics of the first hidden layer, produced in
/// train mode for the moving-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct ExampleCache<S> {
    video: VladCache<S>,
    audio: VladCache<S>,
    video_x: Vec<S>,
    audio_x: Vec<S>,
    x0: Vec<S>,
    relu_mask: Vec<bool>,
    h1: Vec<S>,
    h2: Vec<S>,
    hidden_gate: Vec<S>,
    moe_in: Vec<S>,
    moe: MoeCache<S>,
    output_gate: Vec<S>,
    out: Vec<S>,
}

struct BnCache<S> {
    xhat: Vec<Vec<S>>,
    inv_std: Vec<S>,
}

fn moe_shape(cfg: &ModelConfig) -> MoeShape {
    MoeShape { vocab: cfg.vocab, num_experts: cfg.num_experts, dummy_expert: cfg.use_dummy_expert }
}

fn check_params<S: Scalar>(cfg: &ModelConfig, p: &Params<S>) -> Result<()> {
    for (spec, buf) in super::layout(cfg).iter().zip(p.buffers()) {
        if buf.len() != spec.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "parameter `{}` has {} values, config expects shape {:?}",
                spec.name,
                buf.len(),
                spec.shape
            )));
        }
    }
    Ok(())
}

fn widen<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::from_f32(x)).collect()
}

/// NetVLAD descriptors of both streams.
fn pooled<S: Scalar>(cfg: &ModelConfig, p: &Params<S>, f: &FrameFeatures) -> (VladCache<S>, VladCache<S>, Vec<S>, Vec<S>) {
    let video_x = widen::<S>(&f.video);
    let audio_x = widen::<S>(&f.audio);
    let v = &p.video;
    let a = &p.audio;
    let video = vlad_forward(&video_x, f.frames, cfg.d_video, &v.assign_weights, &v.assign_bias, &v.centroids, cfg.k_video, cfg.normalize_vlad);
    let audio = vlad_forward(&audio_x, f.frames, cfg.d_audio, &a.assign_weights, &a.assign_bias, &a.centroids, cfg.k_audio, cfg.normalize_vlad);
    (video, audio, video_x, audio_x)
}

/// Batch normalisation of `z` (one row per example). Train mode uses the
/// batch statistics, inference the moving ones.
fn batch_norm<S: Scalar>(p: &Params<S>, z: &[Vec<S>], mode: Mode) -> (Vec<Vec<S>>, BnCache<S>, Option<BatchStats>) {
    let h = p.bn_gamma.len();
    let eps = S::from_f64(BN_EPSILON);
    let (mean, var, stats) = match mode {
        Mode::Inference => (p.bn_moving_mean.clone(), p.bn_moving_var.clone(), None),
        Mode::Train => {
            let b = S::from_f64(z.len() as f64);
            let mut mean = vec![S::zero(); h];
            for row in z {
                add_assign(&mut mean, row);
            }
            for m in mean.iter_mut() {
                *m = *m / b;
            }
            let mut var = vec![S::zero(); h];
            for row in z {
                for j in 0..h {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in var.iter_mut() {
                *v = *v / b;
            }
            let stats = BatchStats {
                mean: mean.iter().map(|x| x.as_f64()).collect(),
                var: var.iter().map(|x| x.as_f64()).collect(),
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let xhat: Vec<Vec<S>> = z
        .iter()
        .map(|row| (0..h).map(|j| (row[j] - mean[j]) * inv_std[j]).collect())
        .collect();
    let y = xhat
        .iter()
        .map(|row| (0..h).map(|j| p.bn_gamma[j] * row[j] + p.bn_beta[j]).collect())
        .collect();
    (y, BnCache { xhat, inv_std }, stats)
}

fn forward_cached<S: Scalar>(
    cfg: &ModelConfig,
    p: &Params<S>,
    batch: &[&FrameFeatures],
    mode: Mode,
) -> Result<(Vec<ExampleCache<S>>, BnCache<S>, Option<BatchStats>)> {
    cfg.validate()?;
    check_params(cfg, p)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for f in batch {
        f.check(cfg)?;
    }
    let two_h = cfg.fc_dim();
    let mut pools = Vec::with_capacity(batch.len());
    let mut z1 = Vec::with_capacity(batch.len());
    for f in batch {
        let (video, audio, video_x, audio_x) = pooled(cfg, p, f);
        let mut x0 = video.out.clone();
        x0.extend_from_slice(&audio.out);
        z1.push(vec_mat(&x0, &p.hidden1, cfg.hidden));
        pools.push((video, audio, video_x, audio_x, x0));
    }
    let (bn_out, bn_cache, stats) = batch_norm(p, &z1, mode);

    let shape = moe_shape(cfg);
    let mut caches = Vec::with_capacity(batch.len());
    for ((video, audio, video_x, audio_x, x0), y) in pools.into_iter().zip(bn_out) {
        let relu_mask: Vec<bool> = y.iter().map(|&v| v > S::zero()).collect();
        let h1: Vec<S> = y.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let mut h2 = vec_mat(&h1, &p.hidden2, two_h);
        add_assign(&mut h2, &p.hidden2_bias);
        let (moe_in, hidden_gate) = context_gate_forward(&h2, &p.hidden_gate, &p.hidden_gate_bias);
        let moe = moe_forward(&moe_in, &p.gates, &p.experts, &p.experts_bias, shape);
        let (out, output_gate) = context_gate_forward(&moe.out, &p.output_gate, &p.output_gate_bias);
        caches.push(ExampleCache {
            video,
            audio,
            video_x,
            audio_x,
            x0,
            relu_mask,
            h1,
            h2,
            hidden_gate,
            moe_in,
            moe,
            output_gate,
            out,
        });
    }
    Ok((caches, bn_cache, stats))
}

/// Class probabilities for one video. In [`Mode::Train`] the video is
/// normalised as a batch of one.
pub fn forward<S: Scalar>(cfg: &ModelConfig, p: &Params<S>, features: &FrameFeatures, mode: Mode) -> Result<Vec<S>> {
    let (mut out, _) = forward_batch(cfg, p, &[features], mode)?;
    Ok(out.pop().expect("one example"))
}

/// Class probabilities for a batch, plus the batch statistics in train mode.
pub fn forward_batch<S: Scalar>(
    cfg: &ModelConfig,
    p: &Params<S>,
    batch: &[&FrameFeatures],
    mode: Mode,
) -> Result<(Vec<Vec<S>>, Option<BatchStats>)> {
    let (caches, _, stats) = forward_cached(cfg, p, batch, mode)?;
    Ok((caches.into_iter().map(|c| c.out).collect(), stats))
}

/// Output of [`backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    /// Mean binary cross-entropy over the batch.
    pub loss: S,
    /// Gradient per parameter; moving statistics are left at zero.
    pub grads: Params<S>,
    pub outputs: Vec<Vec<S>>,
    pub batch_stats: Option<BatchStats>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradients of the trainable tensors under their canonical names.
    pub fn to_bundle(&self, cfg: &ModelConfig) -> TensorBundle {
        let full = self.grads.to_bundle(cfg);
        let mut out = TensorBundle::new();
        for spec in super::layout(cfg).into_iter().filter(|s| s.role.trainable()) {
            out.insert(full.get(spec.name).expect("layout tensor").clone()).expect("unique");
        }
        out
    }
}

/// Loss and exact gradient of the mean binary cross-entropy over `batch`
/// with respect to every trainable tensor. `labels` may be soft targets in
/// `[0, 1]`.
pub fn backward<S: Scalar>(
    cfg: &ModelConfig,
    p: &Params<S>,
    batch: &[&FrameFeatures],
    labels: &[Vec<S>],
    mode: Mode,
) -> Result<Gradients<S>> {
    if labels.len() != batch.len() || labels.iter().any(|l| l.len() != cfg.vocab) {
        return Err(Error::Shape(format!("need one label vector of length {} per example", cfg.vocab)));
    }
    let (caches, bn, stats) = forward_cached(cfg, p, batch, mode)?;
    let n = caches.len();
    let scale = S::one() / S::from_f64(n as f64);
    let two_h = cfg.fc_dim();
    let shape = moe_shape(cfg);
    let mut g = Params::<S>::zeros_like(cfg);

    let mut loss = S::zero();
    let mut d_bn_out = Vec::with_capacity(n);
    for (c, y) in caches.iter().zip(labels) {
        loss += bce_loss(&c.out, y) * scale;
        let dout: Vec<S> = bce_grad(&c.out, y).into_iter().map(|v| v * scale).collect();

        let (dp, dw, db) = context_gate_backward(&c.moe.out, &p.output_gate, &c.output_gate, &dout);
        add_assign(&mut g.output_gate, &dw);
        add_assign(&mut g.output_gate_bias, &db);

        let (dmoe_in, dgw, dew, deb) = moe_backward(&c.moe_in, &p.gates, &p.experts, shape, &c.moe, &dp);
        add_assign(&mut g.gates, &dgw);
        add_assign(&mut g.experts, &dew);
        add_assign(&mut g.experts_bias, &deb);

        let (dh2, dw, db) = context_gate_backward(&c.h2, &p.hidden_gate, &c.hidden_gate, &dmoe_in);
        add_assign(&mut g.hidden_gate, &dw);
        add_assign(&mut g.hidden_gate_bias, &db);

        outer_acc(&mut g.hidden2, &c.h1, &dh2);
        add_assign(&mut g.hidden2_bias, &dh2);
        let dh1 = vec_mat_t(&dh2, &p.hidden2, two_h);
        let dy: Vec<S> = dh1.iter().zip(&c.relu_mask).map(|(&v, &on)| if on { v } else { S::zero() }).collect();
        d_bn_out.push(dy);
    }

    // batch norm
    let h = cfg.hidden;
    let mut dxhat = Vec::with_capacity(n);
    for (dy, xhat) in d_bn_out.iter().zip(&bn.xhat) {
        for j in 0..h {
            g.bn_gamma[j] += dy[j] * xhat[j];
            g.bn_beta[j] += dy[j];
        }
        dxhat.push((0..h).map(|j| dy[j] * p.bn_gamma[j]).collect::<Vec<S>>());
    }
    let dz1: Vec<Vec<S>> = match mode {
        Mode::Inference => dxhat.iter().map(|row| (0..h).map(|j| row[j] * bn.inv_std[j]).collect()).collect(),
        Mode::Train => {
            let b = S::from_f64(n as f64);
            let mut sum_d = vec![S::zero(); h];
            let mut sum_dx = vec![S::zero(); h];
            for (row, xhat) in dxhat.iter().zip(&bn.xhat) {
                for j in 0..h {
                    sum_d[j] += row[j];
                    sum_dx[j] += row[j] * xhat[j];
                }
            }
            dxhat
                .iter()
                .zip(&bn.xhat)
                .map(|(row, xhat)| {
                    (0..h)
                        .map(|j| bn.inv_std[j] / b * (b * row[j] - sum_d[j] - xhat[j] * sum_dx[j]))
                        .collect()
                })
                .collect()
        }
    };

    let video_len = cfg.k_video * cfg.d_video;
    for (c, dz) in caches.iter().zip(&dz1) {
        outer_acc(&mut g.hidden1, &c.x0, dz);
        let dx0 = vec_mat_t(dz, &p.hidden1, h);
        let vg = vlad_backward(&c.video_x, cfg.d_video, &p.video.centroids, cfg.k_video, cfg.normalize_vlad, &c.video, &dx0[..video_len]);
        add_assign(&mut g.video.assign_weights, &vg.weights);
        add_assign(&mut g.video.assign_bias, &vg.bias);
        add_assign(&mut g.video.centroids, &vg.centroids);
        let ag = vlad_backward(&c.audio_x, cfg.d_audio, &p.audio.centroids, cfg.k_audio, cfg.normalize_vlad, &c.audio, &dx0[video_len..]);
        add_assign(&mut g.audio.assign_weights, &ag.weights);
        add_assign(&mut g.audio.assign_bias, &ag.bias);
        add_assign(&mut g.audio.centroids, &ag.centroids);
    }

    let outputs = caches.into_iter().map(|c| c.out).collect();
    Ok(Gradients { loss, grads: g, outputs, batch_stats: stats })
}

/// First fully connected block on pooled descriptors: `ReLU(BN(x W1))`
/// followed by `W2` and its bias. Returns one `2H` row per input and the
/// batch statistics in train mode.
pub fn fc_forward<S: Scalar>(
    cfg: &ModelConfig,
    p: &Params<S>,
    inputs: &[Vec<S>],
    mode: Mode,
) -> Result<(Vec<Vec<S>>, Option<BatchStats>)> {
    check_params(cfg, p)?;
    if inputs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != cfg.vlad_dim()) {
        return Err(Error::Shape(format!("fc input has length {}, expected {}", bad.len(), cfg.vlad_dim())));
    }
    let z: Vec<Vec<S>> = inputs.iter().map(|x| vec_mat(x, &p.hidden1, cfg.hidden)).collect();
    let (y, _, stats) = batch_norm(p, &z, mode);
    let out = y
        .into_iter()
        .map(|row| {
            let h1: Vec<S> = row.into_iter().map(|v| v.max(S::zero())).collect();
            let mut h2 = vec_mat(&h1, &p.hidden2, cfg.fc_dim());
            add_assign(&mut h2, &p.hidden2_bias);
            h2
        })
        .collect();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> FrameFeatures {
        let mut draw = |len| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FrameFeatures::new(n, draw(n * cfg.d_video), draw(n * cfg.d_audio)).unwrap()
    }

    #[test]
    fn zero_weights_predict_five_twenty_fourths() {
        let cfg = ModelConfig::new(3, 4, 6, 5, 2);
        let p = Params::<f64>::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = features(&mut rng, &cfg, 4);
        for mode in [Mode::Inference, Mode::Train] {
            for v in forward(&cfg, &p, &f, mode).unwrap() {
                assert!((v - 5.0 / 24.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_gradient() {
        let cfg = ModelConfig::new(2, 3, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Params::<f64>::init(&cfg, &mut rng);
        let a = features(&mut rng, &cfg, 3);
        let b = features(&mut rng, &cfg, 5);
        let ya = vec![1.0, 0.0, 0.0, 1.0];
        let yb = vec![0.0, 1.0, 0.0, 0.0];
        for mode in [Mode::Inference, Mode::Train] {
            let once = backward(&cfg, &p, &[&a, &b], &[ya.clone(), yb.clone()], mode).unwrap();
            let twice = backward(&cfg, &p, &[&a, &b, &a, &b], &[ya.clone(), yb.clone(), ya.clone(), yb.clone()], mode).unwrap();
            assert!((once.loss - twice.loss).abs() < 1e-12);
            for (x, y) in once.grads.buffers().iter().zip(twice.grads.buffers()) {
                for (u, v) in x.iter().zip(y.iter()) {
                    assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn train_mode_reports_batch_statistics() {
        let cfg = ModelConfig::new(2, 3, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Params::<f32>::init(&cfg, &mut rng);
        let fs: Vec<_> = (0..4).map(|_| features(&mut rng, &cfg, 2)).collect();
        let refs: Vec<&FrameFeatures> = fs.iter().collect();
        let (_, stats) = forward_batch(&cfg, &p, &refs, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), 3);
        assert!(stats.var.iter().all(|&v| v >= 0.0));
        assert!(forward_batch(&cfg, &p, &refs, Mode::Inference).unwrap().1.is_none());
    }

    #[test]
    fn inference_is_independent_of_batch_companions() {
        let cfg = ModelConfig::new(2, 3, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Params::<f32>::init(&cfg, &mut rng);
        let a = features(&mut rng, &cfg, 2);
        let b = features(&mut rng, &cfg, 7);
        let alone = forward(&cfg, &p, &a, Mode::Inference).unwrap();
        let (both, _) = forward_batch(&cfg, &p, &[&a, &b], Mode::Inference).unwrap();
        assert_eq!(alone, both[0]);
    }

    #[test]
    fn rejects_mismatched_features() {
        let cfg = ModelConfig::new(2, 3, 4, 3, 2);
        let p = Params::<f32>::zeros(&cfg);
        let f = FrameFeatures::new(2, vec![0.0; 8], vec![0.0; 4]).unwrap();
        assert!(matches!(forward(&cfg, &p, &f, Mode::Inference), Err(Error::Shape(_))));
    }
}
