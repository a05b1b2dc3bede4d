//! Individual layers of the network. All matrices are row-major and applied
//! to row vectors (`y = x W`).

use super::Scalar;
use crate::error::{Error, Result};

const L2_EPSILON: f64 = 1e-12;

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `out = x W` for `W` of shape `x.len() x cols`.
pub(crate) fn vec_mat<S: Scalar>(x: &[S], w: &[S], cols: usize) -> Vec<S> {
    debug_assert_eq!(w.len(), x.len() * cols);
    let mut out = vec![S::zero(); cols];
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == S::zero() {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += *xi * wij;
        }
    }
    out
}

/// `dx = dy W^T`.
pub(crate) fn vec_mat_t<S: Scalar>(dy: &[S], w: &[S], cols: usize) -> Vec<S> {
    debug_assert_eq!(dy.len(), cols);
    w.chunks_exact(cols).map(|row| row.iter().zip(dy).map(|(&a, &b)| a * b).sum()).collect()
}

/// `dW += x^T dy`.
pub(crate) fn outer_acc<S: Scalar>(dw: &mut [S], x: &[S], dy: &[S]) {
    let cols = dy.len();
    for (xi, row) in x.iter().zip(dw.chunks_exact_mut(cols)) {
        if *xi == S::zero() {
            continue;
        }
        for (d, &g) in row.iter_mut().zip(dy) {
            *d += *xi * g;
        }
    }
}

pub(crate) fn add_assign<S: Scalar>(acc: &mut [S], v: &[S]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn l2_norm<S: Scalar>(v: &[S]) -> (S, bool) {
    let ss: S = v.iter().map(|&x| x * x).sum();
    let eps = S::from_f64(L2_EPSILON);
    if ss > eps {
        (ss.sqrt(), true)
    } else {
        (eps.sqrt(), false)
    }
}

/// `v / sqrt(max(|v|^2, eps))`: zero stays zero.
fn l2_normalize_in_place<S: Scalar>(v: &mut [S]) -> (S, bool) {
    let (n, active) = l2_norm(v);
    for x in v.iter_mut() {
        *x = *x / n;
    }
    (n, active)
}

/// Backward of [`l2_normalize_in_place`] given the normalised output `y`.
fn l2_normalize_backward<S: Scalar>(y: &[S], norm: S, active: bool, dy: &[S]) -> Vec<S> {
    if !active {
        return dy.iter().map(|&g| g / norm).collect();
    }
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    y.iter().zip(dy).map(|(&yi, &g)| (g - yi * dot) / norm).collect()
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn softmax_backward<S: Scalar>(p: &[S], dp: &[S]) -> Vec<S> {
    let dot: S = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &g)| pi * (g - dot)).collect()
}

/// Soft assignment of `n` descriptors of dimension `d` to `k` clusters:
/// row `i` is `softmax(x_i W + b)`.
pub fn soft_assign<S: Scalar>(x: &[S], n: usize, d: usize, weights: &[S], bias: &[S], k: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * d);
    let mut out = Vec::with_capacity(n * k);
    for xi in x.chunks_exact(d) {
        let mut logits = vec_mat(xi, weights, k);
        add_assign(&mut logits, bias);
        softmax_in_place(&mut logits);
        out.extend_from_slice(&logits);
    }
    out
}

pub(crate) struct VladCache<S> {
    pub assign: Vec<S>,
    pub row_norms: Vec<(S, bool)>,
    pub intra: Vec<S>,
    pub global_norm: (S, bool),
    pub out: Vec<S>,
}

pub(crate) fn vlad_forward<S: Scalar>(
    x: &[S],
    n: usize,
    d: usize,
    weights: &[S],
    bias: &[S],
    centroids: &[S],
    k: usize,
    normalize: bool,
) -> VladCache<S> {
    let assign = soft_assign(x, n, d, weights, bias, k);
    // residual[c][j] = sum_i a_ic x_ij - (sum_i a_ic) c_cj
    let mut residual = vec![S::zero(); k * d];
    let mut mass = vec![S::zero(); k];
    for (xi, ai) in x.chunks_exact(d).zip(assign.chunks_exact(k)) {
        for (c, &a) in ai.iter().enumerate() {
            mass[c] += a;
            for (r, &xv) in residual[c * d..(c + 1) * d].iter_mut().zip(xi) {
                *r += a * xv;
            }
        }
    }
    for c in 0..k {
        for (r, &cv) in residual[c * d..(c + 1) * d].iter_mut().zip(&centroids[c * d..(c + 1) * d]) {
            *r -= mass[c] * cv;
        }
    }
    if !normalize {
        return VladCache {
            assign,
            row_norms: Vec::new(),
            intra: Vec::new(),
            global_norm: (S::one(), false),
            out: residual,
        };
    }
    let mut intra = residual;
    let row_norms = intra.chunks_exact_mut(d).map(|row| l2_normalize_in_place(row)).collect();
    let mut out = intra.clone();
    let global_norm = l2_normalize_in_place(&mut out);
    VladCache { assign, row_norms, intra, global_norm, out }
}

pub(crate) struct VladGrads<S> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    pub centroids: Vec<S>,
}

pub(crate) fn vlad_backward<S: Scalar>(
    x: &[S],
    d: usize,
    centroids: &[S],
    k: usize,
    normalize: bool,
    cache: &VladCache<S>,
    dout: &[S],
) -> VladGrads<S> {
    let dres: Vec<S> = if normalize {
        let dintra = l2_normalize_backward(&cache.out, cache.global_norm.0, cache.global_norm.1, dout);
        let mut dres = Vec::with_capacity(k * d);
        for (c, (row, g)) in cache.intra.chunks_exact(d).zip(dintra.chunks_exact(d)).enumerate() {
            let (norm, active) = cache.row_norms[c];
            dres.extend(l2_normalize_backward(row, norm, active, g));
        }
        dres
    } else {
        dout.to_vec()
    };

    let mut dcent = vec![S::zero(); k * d];
    let mut dw = vec![S::zero(); d * k];
    let mut db = vec![S::zero(); k];
    let mut mass = vec![S::zero(); k];
    for (xi, ai) in x.chunks_exact(d).zip(cache.assign.chunks_exact(k)) {
        let mut da = vec![S::zero(); k];
        for c in 0..k {
            mass[c] += ai[c];
            let g = &dres[c * d..(c + 1) * d];
            let cent = &centroids[c * d..(c + 1) * d];
            da[c] = g.iter().zip(xi).zip(cent).map(|((&gj, &xj), &cj)| gj * (xj - cj)).sum();
        }
        let dlogits = softmax_backward(ai, &da);
        outer_acc(&mut dw, xi, &dlogits);
        add_assign(&mut db, &dlogits);
    }
    for c in 0..k {
        for (dc, &g) in dcent[c * d..(c + 1) * d].iter_mut().zip(&dres[c * d..(c + 1) * d]) {
            *dc = -mass[c] * g;
        }
    }
    VladGrads { weights: dw, bias: db, centroids: dcent }
}

/// NetVLAD descriptor (`k x d`, row-major) of `n` descriptors.
///
/// Each entry is `sum_i a_ik (x_i(j) - c_k(j))`. With `normalize`, every
/// cluster row is L2-normalised and then the flattened descriptor is
/// L2-normalised again; all-zero rows and vectors stay zero.
pub fn netvlad_aggregate<S: Scalar>(
    x: &[S],
    n: usize,
    d: usize,
    weights: &[S],
    bias: &[S],
    centroids: &[S],
    k: usize,
    normalize: bool,
) -> Result<Vec<S>> {
    if x.len() != n * d || weights.len() != d * k || bias.len() != k || centroids.len() != k * d {
        return Err(Error::Shape(format!("netvlad inputs do not fit n={n} d={d} k={k}")));
    }
    Ok(vlad_forward(x, n, d, weights, bias, centroids, k, normalize).out)
}

/// `sigmoid(x W + b) * x`, elementwise.
pub fn context_gate<S: Scalar>(x: &[S], w: &[S], b: &[S]) -> Result<Vec<S>> {
    let p = x.len();
    if w.len() != p * p || b.len() != p {
        return Err(Error::Shape(format!(
            "context gate with input {p} needs a {p}x{p} matrix and {p} biases, got {} and {}",
            w.len(),
            b.len()
        )));
    }
    let (out, _) = context_gate_forward(x, w, b);
    Ok(out)
}

pub(crate) fn context_gate_forward<S: Scalar>(x: &[S], w: &[S], b: &[S]) -> (Vec<S>, Vec<S>) {
    let mut gate = vec_mat(x, w, x.len());
    for (g, &bi) in gate.iter_mut().zip(b) {
        *g = sigmoid(*g + bi);
    }
    let out = gate.iter().zip(x).map(|(&g, &xi)| g * xi).collect();
    (out, gate)
}

/// Returns `(dx, dW, db)`.
pub(crate) fn context_gate_backward<S: Scalar>(x: &[S], w: &[S], gate: &[S], dout: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let p = x.len();
    let dpre: Vec<S> = (0..p).map(|j| dout[j] * x[j] * gate[j] * (S::one() - gate[j])).collect();
    let mut dx = vec_mat_t(&dpre, w, p);
    for j in 0..p {
        dx[j] += dout[j] * gate[j];
    }
    let mut dw = vec![S::zero(); p * p];
    outer_acc(&mut dw, x, &dpre);
    (dx, dw, dpre)
}

/// Mixture-of-experts shapes.
#[derive(Debug, Clone, Copy)]
pub struct MoeShape {
    pub vocab: usize,
    pub num_experts: usize,
    pub dummy_expert: bool,
}

impl MoeShape {
    pub fn gate_columns(&self) -> usize {
        self.num_experts + usize::from(self.dummy_expert)
    }
}

pub(crate) struct MoeCache<S> {
    /// `vocab x gate_columns` gate distribution.
    pub gates: Vec<S>,
    /// `vocab x num_experts` expert activations.
    pub experts: Vec<S>,
    pub out: Vec<S>,
}

pub(crate) fn moe_forward<S: Scalar>(h: &[S], gates_w: &[S], experts_w: &[S], experts_b: &[S], shape: MoeShape) -> MoeCache<S> {
    let m = shape.num_experts;
    let g = shape.gate_columns();
    let mut gates = vec_mat(h, gates_w, shape.vocab * g);
    for row in gates.chunks_exact_mut(g) {
        softmax_in_place(row);
    }
    let mut experts = vec_mat(h, experts_w, shape.vocab * m);
    for (e, &b) in experts.iter_mut().zip(experts_b) {
        *e = sigmoid(*e + b);
    }
    let out = gates
        .chunks_exact(g)
        .zip(experts.chunks_exact(m))
        .map(|(gv, ev)| gv[..m].iter().zip(ev).map(|(&a, &b)| a * b).sum())
        .collect();
    MoeCache { gates, experts, out }
}

/// Returns `(dh, d_gates_w, d_experts_w, d_experts_b)`.
pub(crate) fn moe_backward<S: Scalar>(
    h: &[S],
    gates_w: &[S],
    experts_w: &[S],
    shape: MoeShape,
    cache: &MoeCache<S>,
    dout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>, Vec<S>) {
    let m = shape.num_experts;
    let g = shape.gate_columns();
    let v = shape.vocab;
    let mut dgate_logits = Vec::with_capacity(v * g);
    let mut dexpert_logits = Vec::with_capacity(v * m);
    for c in 0..v {
        let gv = &cache.gates[c * g..(c + 1) * g];
        let ev = &cache.experts[c * m..(c + 1) * m];
        let mut dgate = vec![S::zero(); g];
        for j in 0..m {
            dgate[j] = dout[c] * ev[j];
            let de = dout[c] * gv[j];
            dexpert_logits.push(de * ev[j] * (S::one() - ev[j]));
        }
        dgate_logits.extend(softmax_backward(gv, &dgate));
    }
    let mut dh = vec_mat_t(&dgate_logits, gates_w, v * g);
    add_assign(&mut dh, &vec_mat_t(&dexpert_logits, experts_w, v * m));
    let mut dgw = vec![S::zero(); h.len() * v * g];
    outer_acc(&mut dgw, h, &dgate_logits);
    let mut dew = vec![S::zero(); h.len() * v * m];
    outer_acc(&mut dew, h, &dexpert_logits);
    (dh, dgw, dew, dexpert_logits)
}

/// Per-class mixture of experts: a softmax gate over the experts (plus an
/// optional dummy expert that absorbs probability mass without
/// contributing a prediction) weighting sigmoid expert outputs.
///
/// Gate and expert columns are class-major: column `c * experts + j`.
pub fn moe_predict<S: Scalar>(h: &[S], gates_w: &[S], experts_w: &[S], experts_b: &[S], shape: MoeShape) -> Result<Vec<S>> {
    let (v, m) = (shape.vocab, shape.num_experts);
    if gates_w.len() != h.len() * v * shape.gate_columns() || experts_w.len() != h.len() * v * m || experts_b.len() != v * m {
        return Err(Error::Shape(format!("mixture of experts weights do not fit input {} and {shape:?}", h.len())));
    }
    Ok(moe_forward(h, gates_w, experts_w, experts_b, shape).out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cluster_assigns_everything() {
        let x = [0.3f64, -1.0, 2.0, 5.0, 0.0, 1.0];
        let a = soft_assign(&x, 3, 2, &[0.7, -0.2], &[0.4], 1);
        assert_eq!(a, vec![1.0; 3]);
    }

    #[test]
    fn symmetric_logits_are_uniform() {
        let a = soft_assign(&[0.0f64; 6], 2, 3, &[0.0; 12], &[0.0; 4], 4);
        assert!(a.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn hand_softmax() {
        let a = soft_assign(&[0.0f64], 1, 1, &[0.0, 0.0], &[3f64.ln(), 0.0], 2);
        assert!((a[0] - 0.75).abs() < 1e-12);
        assert!((a[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_vlad_is_sum_minus_scaled_centroid() {
        let x = [1.0f64, 2.0, 3.0, -1.0, 0.5, 0.5];
        let c = [0.25, -0.5];
        let v = netvlad_aggregate(&x, 3, 2, &[0.1, 0.2], &[0.0], &c, 1, false).unwrap();
        assert!((v[0] - (4.5 - 3.0 * 0.25)).abs() < 1e-12);
        assert!((v[1] - (1.5 + 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn descriptors_on_their_centroid_give_zero_residual() {
        // two clusters, hard assignment through large logits
        let c = [1.0f64, 2.0, -3.0, 0.5];
        let x = [1.0, 2.0, 1.0, 2.0];
        let w = [0.0, 0.0, 0.0, 0.0];
        let v = netvlad_aggregate(&x, 2, 2, &w, &[60.0, -60.0], &c, 2, false).unwrap();
        assert!(v[..2].iter().all(|r| r.abs() < 1e-12));
        // unassigned cluster gets ~0 mass
        assert!(v[2..].iter().all(|r| r.abs() < 1e-12));
        let v = netvlad_aggregate(&x, 2, 2, &w, &[60.0, -60.0], &c, 2, true).unwrap();
        assert!(v.iter().all(|r| r.abs() < 1e-6));
    }

    #[test]
    fn brute_force_two_by_two() {
        // N=2, K=2, D=1
        let x = [1.5f64, -0.5];
        let w = [0.8, -0.3];
        let b = [0.1, 0.2];
        let c = [0.4, -1.0];
        let mut expected = [0.0; 2];
        for k in 0..2 {
            for i in 0..2 {
                let e0 = (w[0] * x[i] + b[0]).exp();
                let e1 = (w[1] * x[i] + b[1]).exp();
                let a = [e0 / (e0 + e1), e1 / (e0 + e1)][k];
                expected[k] += a * (x[i] - c[k]);
            }
        }
        let v = netvlad_aggregate(&x, 2, 1, &w, &b, &c, 2, false).unwrap();
        for k in 0..2 {
            assert!((v[k] - expected[k]).abs() < 1e-12);
        }
        // normalised: each 1-d row becomes its sign, then the pair is scaled by 1/sqrt(2)
        let vn = netvlad_aggregate(&x, 2, 1, &w, &b, &c, 2, true).unwrap();
        for k in 0..2 {
            assert!((vn[k] - expected[k].signum() / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn context_gate_cases() {
        let y = context_gate(&[1.0f64, -2.0], &[0.0; 4], &[0.0; 2]).unwrap();
        assert_eq!(y, vec![0.5, -1.0]);
        let x = [3.0f64, -0.25, 7.5];
        let y = context_gate(&x, &[0.0; 9], &[20.0; 3]).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-8 * b.abs());
        }
        assert_eq!(context_gate(&[0.0f64; 3], &[0.4; 9], &[1.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(context_gate(&[0.0f64; 3], &[0.4; 4], &[1.0; 3]).is_err());
    }

    #[test]
    fn zero_moe() {
        let shape = MoeShape { vocab: 3, num_experts: 5, dummy_expert: true };
        let p = moe_predict(&[0.0f64; 4], &[0.0; 4 * 18], &[0.0; 4 * 15], &[0.0; 15], shape).unwrap();
        for v in p {
            assert!((v - 5.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_selects_expert() {
        // one class, 3 experts + dummy, input h = [1]
        let shape = MoeShape { vocab: 1, num_experts: 3, dummy_expert: true };
        let gates = [-30.0f64, 30.0, -30.0, -30.0];
        let target: f64 = 0.8;
        let logit = (target / (1.0 - target)).ln();
        let experts = [0.0, 0.0, 0.0];
        let bias = [0.0, logit, 0.0];
        let p = moe_predict(&[1.0], &gates, &experts, &bias, shape).unwrap();
        assert!((p[0] - target).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn assignment_rows_sum_to_one(
            x in prop::collection::vec(-10.0f32..10.0, 12),
            w in prop::collection::vec(-3.0f32..3.0, 12),
            b in prop::collection::vec(-3.0f32..3.0, 3),
        ) {
            let a = soft_assign(&x, 3, 4, &w, &b, 3);
            for row in a.chunks_exact(3) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn vlad_is_translation_covariant(
            x in prop::collection::vec(-2.0f64..2.0, 6),
            c in prop::collection::vec(-2.0f64..2.0, 4),
            shift in prop::collection::vec(-5.0f64..5.0, 2),
            b in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            // assignment weights are zero so the soft assignment is shift-invariant too
            let w = [0.0; 4];
            let v0 = netvlad_aggregate(&x, 3, 2, &w, &b, &c, 2, false).unwrap();
            let xs: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
            let cs: Vec<f64> = c.iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
            let v1 = netvlad_aggregate(&xs, 3, 2, &w, &b, &cs, 2, false).unwrap();
            for (a, b) in v0.iter().zip(&v1) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn gate_mass_below_one_with_dummy(
            h in prop::collection::vec(-2.0f64..2.0, 3),
            gw in prop::collection::vec(-2.0f64..2.0, 3 * 2 * 4),
        ) {
            let shape = MoeShape { vocab: 2, num_experts: 3, dummy_expert: true };
            let cache = moe_forward(&h, &gw, &[0.0; 18], &[0.0; 6], shape);
            for row in cache.gates.chunks_exact(4) {
                let mass: f64 = row[..3].iter().sum();
                prop_assert!(mass < 1.0);
            }
            let shape = MoeShape { vocab: 2, num_experts: 4, dummy_expert: false };
            let cache = moe_forward(&h, &gw, &[0.0; 24], &[0.0; 8], shape);
            for row in cache.gates.chunks_exact(4) {
                let mass: f64 = row.iter().sum();
                prop_assert!((mass - 1.0).abs() < 1e-6);
            }
        }
    }
}
