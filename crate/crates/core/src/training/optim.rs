use serde::{Deserialize, Serialize};

use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f32, beta2: f32, epsilon: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    t: i32,
    m: Params<f32>,
    v: Params<f32>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, like: &Params<f32>) -> Self {
        let zero = |p: &Params<f32>| {
            let mut z = p.clone();
            for b in z.buffers_mut() {
                b.fill(0.0);
            }
            z
        };
        Self { kind, t: 0, m: zero(like), v: zero(like) }
    }

    /// Applies one update to the buffers flagged in `trainable` (layout order).
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, trainable: &[bool], lr: f32) {
        self.t += 1;
        let bufs = params.buffers_mut().into_iter().zip(grads.buffers()).zip(trainable);
        match self.kind {
            Optimizer::Sgd => {
                for ((w, g), &on) in bufs {
                    if on {
                        for (wi, &gi) in w.iter_mut().zip(g.iter()) {
                            *wi -= lr * gi;
                        }
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let moments = self.m.buffers_mut().into_iter().zip(self.v.buffers_mut());
                for (((w, g), &on), (m, v)) in bufs.zip(moments) {
                    if !on {
                        continue;
                    }
                    for i in 0..w.len() {
                        let gi = g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        w[i] -= lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
            }
        }
    }
}
