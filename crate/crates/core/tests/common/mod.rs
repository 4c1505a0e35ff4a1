//! Shared fixtures and 64-bit reference implementations for integration tests.
#![allow(dead_code)]

use moe_condense::condense::CondensedLayer;
use moe_condense::model::{ExpertMlp, LayerView, ModelConfig, MoeLayer, MoeModel, RoutedMoeLayer, TokenId};
use moe_condense::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-5;

pub fn small_config(blocks: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        hidden_size: 8,
        expert_inner: 4,
        num_blocks: blocks,
        num_routing_experts: 4,
        num_shared_experts: 1,
        k_active: 2,
        max_seq_len: 16,
        attention: true,
        renormalize_gates: false,
    }
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> MoeModel {
    MoeModel::init(cfg, seed).expect("valid config")
}

/// Model with every weight zero except the norm gains (which stay one).
pub fn zero_model(cfg: ModelConfig) -> MoeModel {
    let mut m = MoeModel::init(cfg, 0).expect("valid config");
    let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(m.tensors_mut()) {
        if !name.ends_with("norm") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

pub fn random_layer(n: usize, k: usize, d: usize, f: usize, seed: u64) -> RoutedMoeLayer {
    let cfg =
        ModelConfig { hidden_size: d, expert_inner: f, num_routing_experts: n, k_active: k, ..ModelConfig::default() };
    RoutedMoeLayer::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_tokens(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, d], 1.0, &mut rng)
}

pub fn random_sequences(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()).collect()
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W` for row-major `W[rows × cols]`.
pub fn vec_mat64(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r] * w.data()[r * cols + c] as f64;
        }
    }
    out
}

pub fn to64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub fn softmax64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn rms_norm64(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v * r * g as f64).collect()
}

pub fn expert64(e: &ExpertMlp, x: &[f64]) -> Vec<f64> {
    let g = vec_mat64(x, &e.w_gate);
    let u = vec_mat64(x, &e.w_up);
    let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
    vec_mat64(&h, &e.w_down)
}

/// Softmax router scores of one token.
pub fn scores64(layer: &RoutedMoeLayer, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let dots: Vec<f64> =
        (0..layer.experts.len()).map(|i| dot64(x, &to64(&layer.centroids.data()[i * d..(i + 1) * d]))).collect();
    softmax64(&dots)
}

/// Top-K by sorting (score descending, index ascending on ties).
pub fn topk_by_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `Σ_{top-K} g_i E_i(x) + Σ_s E_s(x)` and the dense gate vector.
pub fn routed_delta64(layer: &RoutedMoeLayer, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = scores64(layer, x);
    let top = topk_by_sort(&s, layer.k_active);
    let mut gates = vec![0.0; s.len()];
    let norm: f64 = if layer.renormalize { top.iter().map(|&i| s[i]).sum() } else { 1.0 };
    for &i in &top {
        gates[i] = s[i] / norm;
    }
    let mut out = vec![0.0; x.len()];
    for &i in &top {
        for (o, v) in out.iter_mut().zip(expert64(&layer.experts[i], x)) {
            *o += gates[i] * v;
        }
    }
    for e in &layer.shared {
        for (o, v) in out.iter_mut().zip(expert64(e, x)) {
            *o += v;
        }
    }
    (out, gates)
}

pub fn condensed_delta64(layer: &CondensedLayer, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (e, &g) in layer.experts.iter().zip(layer.fixed_gates.data()) {
        for (o, v) in out.iter_mut().zip(expert64(e, x)) {
            *o += g as f64 * v;
        }
    }
    for e in &layer.shared {
        for (o, v) in out.iter_mut().zip(expert64(e, x)) {
            *o += v;
        }
    }
    out
}

/// Straight-line 64-bit forward pass returning `T × vocab` logits.
pub fn forward64(m: &MoeModel, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let d = m.config.hidden_size;
    let t = tokens.len();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &tok)| {
            (0..d)
                .map(|j| m.token_embedding.row(tok as usize)[j] as f64 + m.position_embedding.row(p)[j] as f64)
                .collect()
        })
        .collect();
    for block in &m.blocks {
        if let Some(a) = &block.attention {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm64(x, block.attn_norm.data())).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat64(x, &a.wq)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat64(x, &a.wk)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat64(x, &a.wv)).collect();
            let scale = 1.0 / (d as f64).sqrt();
            for p in 0..t {
                let w = softmax64(&(0..=p).map(|j| dot64(&q[p], &k[j]) * scale).collect::<Vec<_>>());
                let mut o = vec![0.0; d];
                for (j, wj) in w.iter().enumerate() {
                    for c in 0..d {
                        o[c] += wj * v[j][c];
                    }
                }
                for (x, y) in xs[p].iter_mut().zip(vec_mat64(&o, &a.wo)) {
                    *x += y;
                }
            }
        }
        for x in xs.iter_mut() {
            let u = rms_norm64(x, block.moe_norm.data());
            let delta = match &block.layer {
                MoeLayer::Routed(l) => routed_delta64(l, &u).0,
                MoeLayer::Condensed(c) => condensed_delta64(c, &u),
            };
            for (xi, di) in x.iter_mut().zip(delta) {
                *xi += di;
            }
        }
    }
    xs.iter().map(|x| vec_mat64(&rms_norm64(x, m.final_norm.data()), &m.lm_head)).collect()
}

/// 64-bit log-softmax NLL of the next-token predictions.
pub fn nll64(logits: &[Vec<f64>], tokens: &[TokenId]) -> (f64, usize) {
    let mut total = 0.0;
    for p in 0..tokens.len() - 1 {
        let row = &logits[p];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[tokens[p + 1] as usize];
    }
    (total, tokens.len() - 1)
}

pub fn js64(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

/// Mean row-wise JS between the per-row softmaxes of two state matrices.
pub fn state_js64(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for r in 0..a.rows() {
        total += js64(&softmax64(&to64(a.row(r))), &softmax64(&to64(b.row(r))));
    }
    total / a.rows() as f64
}

/// Same model with every block's MoE sublayer replaced as given.
pub fn with_views(model: &MoeModel, views: &[LayerView<'_>], tokens: &[TokenId]) -> Tensor {
    model.forward_with(views, tokens).expect("forward")
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Outcome of a central finite-difference gradient check.
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Compare reverse-mode gradients with central differences (step `h`) on
/// `coords` random coordinates of every tensor, in 64-bit. Coordinates whose
/// perturbation flips a top-K choice are skipped.
pub fn finite_difference_check(
    model: &MoeModel,
    batch: &[Vec<TokenId>],
    aux: f64,
    coords: usize,
    seed: u64,
) -> FdReport {
    use moe_condense::training::{Engine, ParamMask};
    let engine = Engine::from_model(model);
    let g = engine.loss_and_grads(batch, &ParamMask::all(model), aux).expect("gradients");
    let base = engine.routing_signature(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut report = FdReport { checked: 0, skipped: 0, worst: 0.0, worst_at: String::new() };
    for ti in 0..engine.params.len() {
        for _ in 0..coords {
            let j = rng.random_range(0..engine.params[ti].len());
            let mut e = engine.clone();
            e.params[ti][j] += h;
            let (c1, a1) = e.loss(batch, aux).expect("loss");
            let flipped = e.routing_signature(batch) != base;
            e.params[ti][j] -= 2.0 * h;
            let (c2, a2) = e.loss(batch, aux).expect("loss");
            if flipped || e.routing_signature(batch) != base {
                report.skipped += 1;
                continue;
            }
            let numeric = ((c1 + a1) - (c2 + a2)) / (2.0 * h);
            let analytic = g.grads[ti].as_ref().expect("trainable")[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_at = format!("{}[{j}]: analytic {analytic:.3e} numeric {numeric:.3e}", engine.names()[ti]);
            }
        }
    }
    report
}

/// Mean 64-bit JS between the routed layer output and the condensed output
/// keeping `subset`, with fixed gates averaged from 64-bit routing.
pub fn subset_loss64(layer: &RoutedMoeLayer, inputs: &Tensor, subset: &[usize]) -> f64 {
    let n = layer.num_experts();
    let rows: Vec<Vec<f64>> = (0..inputs.rows()).map(|r| to64(inputs.row(r))).collect();
    let mut count = vec![0u64; n];
    let mut sum = vec![0.0f64; n];
    let mut routed = Vec::new();
    for x in &rows {
        let (delta, gates) = routed_delta64(layer, x);
        for i in 0..n {
            if gates[i] != 0.0 {
                count[i] += 1;
                sum[i] += gates[i];
            }
        }
        routed.push(x.iter().zip(&delta).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let mut total = 0.0;
    for (x, r) in rows.iter().zip(&routed) {
        let mut c = x.clone();
        for &i in subset {
            let g = sum[i] / count[i] as f64;
            for (ci, e) in c.iter_mut().zip(expert64(&layer.experts[i], x)) {
                *ci += g * e;
            }
        }
        for s in &layer.shared {
            for (ci, e) in c.iter_mut().zip(expert64(s, x)) {
                *ci += e;
            }
        }
        total += js64(&softmax64(r), &softmax64(&c));
    }
    total / rows.len() as f64
}

/// Which experts are routed to on at least one row of `inputs`.
pub fn activated(layer: &RoutedMoeLayer, inputs: &Tensor) -> Vec<bool> {
    let mut on = vec![false; layer.num_experts()];
    for r in 0..inputs.rows() {
        let (_, g) = layer.routed_forward(inputs.row(r)).unwrap();
        for (o, &v) in on.iter_mut().zip(g.data()) {
            *o |= v != 0.0;
        }
    }
    on
}
