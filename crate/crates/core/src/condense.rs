//! Turning routed MoE layers into condensed (dense, router-free) layers.
//!
//! A condensed layer keeps a handful of routing experts, each weighted by a
//! fixed gate: the mean of that expert's nonzero gate values over the
//! calibration tokens. Every token then runs every kept expert plus the
//! shared experts:
//!
//! `h = Σ_kept ḡ_i E_i(x) + Σ_s E_s(x) + x`

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertMlp, ExpertScratch, GateStats, MoeLayer, MoeModel, RoutedMoeLayer, TokenId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CondensedLayer {
    /// Original routing-expert index of each kept expert.
    pub kept_indices: Vec<usize>,
    pub experts: Vec<ExpertMlp>,
    /// One fixed gate per kept expert, shape `[kept]`.
    pub fixed_gates: Tensor,
    pub shared: Vec<ExpertMlp>,
    /// Block index of the routed layer this was condensed from.
    pub origin: usize,
}

/// What to do when a kept expert has no calibration activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateFallback {
    #[default]
    Error,
    /// Use `1/N` and log a warning.
    Uniform,
}

/// Fixed gate of expert `i`: mean of its nonzero gate values on calibration data.
pub fn fixed_gate(stats: &GateStats, expert_index: usize) -> Result<f32> {
    if expert_index >= stats.num_experts() {
        return Err(Error::arg(format!("expert {expert_index} out of range")));
    }
    stats.mean_gate(expert_index).map(|g| g as f32).ok_or(Error::NeverActivated { layer: None, expert: expert_index })
}

/// Build a condensed layer that keeps `keep` (routing-expert indices) plus all shared experts.
pub fn condense_layer(
    layer: &RoutedMoeLayer,
    keep: &[usize],
    stats: &GateStats,
    origin: usize,
) -> Result<CondensedLayer> {
    condense_layer_with(layer, keep, stats, origin, GateFallback::Error)
}

pub fn condense_layer_with(
    layer: &RoutedMoeLayer,
    keep: &[usize],
    stats: &GateStats,
    origin: usize,
    fallback: GateFallback,
) -> Result<CondensedLayer> {
    let n = layer.num_experts();
    if stats.num_experts() != n {
        return Err(Error::arg(format!("gate stats cover {} experts, layer has {n}", stats.num_experts())));
    }
    let mut seen = vec![false; n];
    for &i in keep {
        if i >= n {
            return Err(Error::arg(format!("expert index {i} out of range for {n} experts")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::arg(format!("expert index {i} listed twice")));
        }
    }
    let mut gates = Vec::with_capacity(keep.len());
    for &i in keep {
        let g = match (fixed_gate(stats, i), fallback) {
            (Ok(g), _) => g,
            (Err(Error::NeverActivated { .. }), GateFallback::Uniform) => {
                log::warn!("layer {origin}: expert {i} never activated, using gate 1/{n}");
                1.0 / n as f32
            }
            (Err(Error::NeverActivated { expert, .. }), GateFallback::Error) => {
                return Err(Error::NeverActivated { layer: Some(origin), expert })
            }
            (Err(e), _) => return Err(e),
        };
        gates.push(g);
    }
    Ok(CondensedLayer {
        kept_indices: keep.to_vec(),
        experts: keep.iter().map(|&i| layer.experts[i].clone()).collect(),
        fixed_gates: Tensor::from_vec(gates),
        shared: layer.shared.clone(),
        origin,
    })
}

impl CondensedLayer {
    pub fn hidden_size(&self) -> usize {
        self.shared[0].hidden_size()
    }

    pub fn num_kept(&self) -> usize {
        self.experts.len()
    }

    /// `h = Σ ḡ_i E_i(x) + Σ E_s(x) + x`.
    pub fn forward(&self, x: &[f32]) -> Result<Tensor> {
        if x.len() != self.hidden_size() {
            return Err(Error::shape(format!(
                "token vector has length {}, layer expects {}",
                x.len(),
                self.hidden_size()
            )));
        }
        let mut h = x.to_vec();
        self.mix_into(x, &mut h, &mut ExpertScratch::new(self.shared[0].inner_size()));
        Ok(Tensor::from_vec(h))
    }

    pub(crate) fn mix_into(&self, x: &[f32], out: &mut [f32], scratch: &mut ExpertScratch) {
        for (e, &g) in self.experts.iter().zip(self.fixed_gates.data()) {
            e.accumulate(x, g, scratch, out);
        }
        for e in &self.shared {
            e.accumulate(x, 1.0, scratch, out);
        }
    }

    /// Weight parameters (fixed gates excluded: they fold into `w_down`).
    pub fn num_params(&self) -> u64 {
        self.experts.iter().chain(&self.shared).map(ExpertMlp::num_params).sum()
    }
}

/// Free-function form of [`CondensedLayer::forward`].
pub fn condensed_forward(x: &Tensor, layer: &CondensedLayer) -> Result<Tensor> {
    layer.forward(x.data())
}

/// Per-block keep lists; `keep[b]` is the set of routing experts block `b`
/// retains if it gets condensed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertPlan {
    pub keep: Vec<Vec<usize>>,
}

impl ExpertPlan {
    /// Keep only shared experts everywhere.
    pub fn shared_only(num_blocks: usize) -> Self {
        Self { keep: vec![Vec::new(); num_blocks] }
    }
}

/// Condensed candidates for every routed block of `model` under `plan`,
/// using gate statistics from the fully routed model.
pub fn prepare_condensed(
    model: &MoeModel,
    plan: &ExpertPlan,
    stats: &[Option<GateStats>],
    fallback: GateFallback,
) -> Result<Vec<Option<CondensedLayer>>> {
    if plan.keep.len() != model.num_blocks() || stats.len() != model.num_blocks() {
        return Err(Error::arg("expert plan / gate stats do not cover every block"));
    }
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| match (&block.layer, &stats[b]) {
            (MoeLayer::Routed(l), Some(s)) => condense_layer_with(l, &plan.keep[b], s, b, fallback).map(Some),
            _ => Ok(None),
        })
        .collect()
}

/// Copy of `model` with the listed blocks replaced by their condensed forms.
pub fn condense_model(model: &MoeModel, layers: &[usize], candidates: &[Option<CondensedLayer>]) -> Result<MoeModel> {
    let mut out = model.clone();
    for &b in layers {
        let c = candidates
            .get(b)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("no condensed candidate for block {b}")))?;
        out.blocks[b].layer = MoeLayer::Condensed(c.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: u64,
    pub original_total_params: u64,
    pub active_params_per_token: u64,
    pub original_active_params_per_token: u64,
    /// `total_params / original_total_params`.
    pub memory_ratio: f64,
    pub flops_per_token: u64,
    pub original_flops_per_token: u64,
    /// Analytic estimate: `original_flops_per_token / flops_per_token`.
    pub speedup_estimate: f64,
    /// Wall-clock single-thread throughput, only when explicitly measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub measured_tokens_per_second: Option<f64>,
}

/// Parameter and FLOP counts. Parameters are counted from tensor shapes;
/// the uncondensed reference is derived from the model's config.
///
/// FLOPs count only matrix-vector products (2 per multiply-add): attention
/// projections, router, active experts and the output head. Attention score
/// and normalisation work is identical across variants and left out.
pub fn cost_report(model: &MoeModel, measured_tokens_per_second: Option<f64>) -> CostReport {
    let cfg = &model.config;
    let (d, v) = (cfg.hidden_size as u64, cfg.vocab_size as u64);
    let expert = cfg.expert_params();
    let attn = if cfg.attention { 4 * d * d } else { 0 };

    let total_params: u64 = model
        .named_tensors()
        .iter()
        .filter(|(name, _)| !name.ends_with(".fixed_gates"))
        .map(|(_, t)| t.numel() as u64)
        .sum();

    let mut active = 2 * d + d + d * v;
    let mut matmul = d * v;
    for block in &model.blocks {
        let attn_here = if block.attention.is_some() { 4 * d * d } else { 0 };
        active += 2 * d + attn_here;
        matmul += attn_here;
        let moe = match &block.layer {
            MoeLayer::Routed(l) => {
                l.centroids.numel() as u64
                    + l.shared.iter().map(ExpertMlp::num_params).sum::<u64>()
                    + l.k_active as u64 * expert
            }
            MoeLayer::Condensed(l) => l.num_params(),
        };
        active += moe;
        matmul += moe;
    }

    let (n, s, k, blocks) =
        (cfg.num_routing_experts as u64, cfg.num_shared_experts as u64, cfg.k_active as u64, cfg.num_blocks as u64);
    let embed = (v + cfg.max_seq_len as u64) * d;
    let original_total = embed + d + d * v + blocks * (2 * d + attn + n * d + (n + s) * expert);
    let routed_active = n * d + (k + s) * expert;
    let original_active = 2 * d + d + d * v + blocks * (2 * d + attn + routed_active);
    let original_matmul = d * v + blocks * (attn + routed_active);

    CostReport {
        total_params,
        original_total_params: original_total,
        active_params_per_token: active,
        original_active_params_per_token: original_active,
        memory_ratio: total_params as f64 / original_total as f64,
        flops_per_token: 2 * matmul,
        original_flops_per_token: 2 * original_matmul,
        speedup_estimate: original_matmul as f64 / matmul as f64,
        measured_tokens_per_second,
    }
}

/// Single-threaded tokens/second over a fixed 2048-token workload.
pub fn measure_throughput(model: &MoeModel) -> Result<f64> {
    const WORKLOAD: usize = 2048;
    let len = model.config.max_seq_len.min(WORKLOAD);
    let seq: Vec<TokenId> = (0..len).map(|i| (i * 31 % model.config.vocab_size) as TokenId).collect();
    let start = Instant::now();
    let mut done = 0;
    while done < WORKLOAD {
        let n = len.min(WORKLOAD - done);
        std::hint::black_box(model.forward(&seq[..n])?);
        done += n;
    }
    Ok(WORKLOAD as f64 / start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(n: usize, k: usize, seed: u64) -> RoutedMoeLayer {
        let cfg = ModelConfig {
            hidden_size: 6,
            expert_inner: 4,
            num_routing_experts: n,
            k_active: k,
            ..ModelConfig::default()
        };
        RoutedMoeLayer::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn stats(counts: &[u64], sums: &[f64]) -> GateStats {
        GateStats { activation_count: counts.to_vec(), gate_sum: sums.to_vec() }
    }

    #[test]
    fn fixed_gate_arithmetic() {
        let s = stats(&[2, 1, 0], &[0.6, 0.25, 0.0]);
        assert!((fixed_gate(&s, 0).unwrap() - 0.3).abs() < 1e-7);
        assert_eq!(fixed_gate(&s, 1).unwrap(), 0.25);
        assert!(matches!(fixed_gate(&s, 2), Err(Error::NeverActivated { expert: 2, .. })));
    }

    #[test]
    fn uniform_router_gives_uniform_fixed_gates() {
        let mut l = layer(4, 2, 1);
        l.centroids = Tensor::zeros(&[4, 6]);
        let mut s = GateStats::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = Tensor::randn(&[6], 1.0, &mut rng);
            s.record(&l.route(x.data()).unwrap().gates);
        }
        assert_eq!(fixed_gate(&s, 0).unwrap(), 0.25);
        assert_eq!(fixed_gate(&s, 1).unwrap(), 0.25);
    }

    #[test]
    fn shared_only_condensation() {
        let l = layer(8, 2, 3);
        let c = condense_layer(&l, &[], &GateStats::new(8), 0).unwrap();
        assert_eq!(c.num_kept(), 0);
        assert_eq!(c.shared, l.shared);
        assert_eq!(c.fixed_gates.numel(), 0);
    }

    #[test]
    fn keeps_requested_experts_with_their_gates() {
        let l = layer(8, 2, 4);
        let mut counts = vec![1u64; 8];
        counts[2] = 4;
        let mut sums = vec![0.1; 8];
        sums[2] = 1.2;
        sums[5] = 0.2;
        let c = condense_layer(&l, &[2, 5], &stats(&counts, &sums), 3).unwrap();
        assert_eq!(c.kept_indices, vec![2, 5]);
        assert_eq!(c.experts[0], l.experts[2]);
        assert_eq!(c.experts[1], l.experts[5]);
        assert!((c.fixed_gates.data()[0] - 0.3).abs() < 1e-7);
        assert!((c.fixed_gates.data()[1] - 0.2).abs() < 1e-7);
        assert_eq!(c.origin, 3);
    }

    #[test]
    fn rejects_bad_keep_lists() {
        let l = layer(4, 2, 5);
        let s = stats(&[1, 1, 0, 1], &[0.5, 0.5, 0.0, 0.5]);
        assert!(matches!(condense_layer(&l, &[1, 1], &s, 0), Err(Error::Argument(_))));
        assert!(matches!(condense_layer(&l, &[4], &s, 0), Err(Error::Argument(_))));
        assert!(matches!(condense_layer(&l, &[2], &s, 7), Err(Error::NeverActivated { layer: Some(7), expert: 2 })));
        let c = condense_layer_with(&l, &[2], &s, 7, GateFallback::Uniform).unwrap();
        assert_eq!(c.fixed_gates.data(), &[0.25]);
    }

    #[test]
    fn zero_weights_leave_residual() {
        let c = CondensedLayer {
            kept_indices: vec![],
            experts: vec![],
            fixed_gates: Tensor::from_vec(vec![]),
            shared: vec![ExpertMlp::zeros(3, 2)],
            origin: 0,
        };
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(condensed_forward(&x, &c).unwrap(), x);
    }

    #[test]
    fn explicit_sum_oracle() {
        let l = layer(5, 2, 6);
        let c = CondensedLayer {
            kept_indices: vec![1, 3],
            experts: vec![l.experts[1].clone(), l.experts[3].clone()],
            fixed_gates: Tensor::from_vec(vec![0.3, 0.2]),
            shared: l.shared.clone(),
            origin: 0,
        };
        let x: Vec<f32> = (0..6).map(|i| 0.4 * i as f32 - 1.0).collect();
        let got = c.forward(&x).unwrap();
        let mut expect: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let expert64 = |e: &ExpertMlp| -> Vec<f64> {
            let (d, f) = (e.hidden_size(), e.inner_size());
            let mut act = vec![0.0f64; f];
            for j in 0..f {
                let (mut g, mut u) = (0.0f64, 0.0f64);
                for i in 0..d {
                    g += x[i] as f64 * e.w_gate.data()[i * f + j] as f64;
                    u += x[i] as f64 * e.w_up.data()[i * f + j] as f64;
                }
                act[j] = g / (1.0 + (-g).exp()) * u;
            }
            (0..d).map(|o| (0..f).map(|j| act[j] * e.w_down.data()[j * d + o] as f64).sum()).collect()
        };
        for (gate, e) in [(0.3, &c.experts[0]), (0.2, &c.experts[1]), (1.0, &c.shared[0])] {
            for (o, v) in expect.iter_mut().zip(expert64(e)) {
                *o += gate * v;
            }
        }
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn doubling_a_gate_doubles_its_contribution() {
        let l = layer(4, 2, 7);
        let mut c = condense_layer(&l, &[0, 2], &stats(&[1, 1, 1, 1], &[0.3, 0.3, 0.2, 0.1]), 0).unwrap();
        let x: Vec<f32> = (0..6).map(|i| (i as f32).cos()).collect();
        let base = c.forward(&x).unwrap();
        c.fixed_gates.data_mut()[1] *= 2.0;
        let doubled = c.forward(&x).unwrap();
        c.fixed_gates.data_mut()[1] = 0.0;
        let without = c.forward(&x).unwrap();
        for i in 0..6 {
            let once = base.data()[i] - without.data()[i];
            let twice = doubled.data()[i] - without.data()[i];
            assert!((twice - 2.0 * once).abs() < 1e-5);
        }
    }

    #[test]
    fn uncondensed_model_costs_nothing() {
        let model = MoeModel::init(ModelConfig { num_blocks: 2, ..ModelConfig::default() }, 1).unwrap();
        let r = cost_report(&model, None);
        assert_eq!(r.memory_ratio, 1.0);
        assert_eq!(r.speedup_estimate, 1.0);
        assert_eq!(r.total_params, r.original_total_params);
        assert_eq!(r.flops_per_token, r.original_flops_per_token);
        assert!(r.active_params_per_token <= r.total_params);
    }
}
