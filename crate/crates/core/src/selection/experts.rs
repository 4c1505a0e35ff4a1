use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{hill, k_smallest, CandidateLoss, SelectionTrace};
use crate::error::{Error, Result};
use crate::metrics::{DivergenceKind, PreparedReference};
use crate::model::{rms_norm, ExpertScratch, GateStats, MoeModel, RoutedMoeLayer, TokenId};
use crate::tensor::Tensor;

/// Calibration inputs of one MoE sublayer: the residual stream `x` entering
/// it and the normalised stream `u` its router and experts see. For a layer
/// used on its own, both are the same.
#[derive(Clone, Debug)]
pub struct LayerProbe {
    pub residual: Tensor,
    pub normed: Tensor,
}

impl LayerProbe {
    pub fn standalone(inputs: Tensor) -> Self {
        Self { residual: inputs.clone(), normed: inputs }
    }

    /// Run the model on the calibration set and capture block `layer_index`'s MoE inputs.
    pub fn from_model(model: &MoeModel, calibration: &[Vec<TokenId>], layer_index: usize) -> Result<Self> {
        model.routed_layer(layer_index)?;
        let d = model.config.hidden_size;
        let norm = model.blocks[layer_index].moe_norm.data();
        let mut residual = Vec::new();
        let mut normed = Vec::new();
        for seq in calibration {
            let trace = model.forward_trace(seq)?;
            let x = &trace.moe_inputs[layer_index];
            residual.extend_from_slice(x.data());
            for r in 0..x.rows() {
                normed.extend(rms_norm(x.row(r), norm));
            }
        }
        let t = residual.len() / d;
        Ok(Self { residual: Tensor::new(vec![t, d], residual)?, normed: Tensor::new(vec![t, d], normed)? })
    }

    pub fn tokens(&self) -> usize {
        self.residual.rows()
    }

    pub fn gate_stats(&self, layer: &RoutedMoeLayer) -> GateStats {
        let mut stats = GateStats::new(layer.num_experts());
        for t in 0..self.tokens() {
            stats.record(&layer.route_unchecked(self.normed.row(t)).gates);
        }
        stats
    }
}

/// Greedy expert selection for block `layer_index` of `model`.
pub fn greedy_expert_selection(
    model: &MoeModel,
    layer_index: usize,
    calibration: &[Vec<TokenId>],
    k: usize,
) -> Result<SelectionTrace> {
    if calibration.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    let layer = model.routed_layer(layer_index)?;
    let probe = LayerProbe::from_model(model, calibration, layer_index)?;
    greedy_expert_selection_on(layer, &probe, k, DivergenceKind::Js).map_err(|e| match e {
        Error::NeverActivated { expert, .. } => Error::NeverActivated { layer: Some(layer_index), expert },
        e => e,
    })
}

/// Greedy expert selection on explicit layer inputs.
///
/// The reference is the routed layer's output with every routing expert
/// available. Each step tentatively adds every remaining expert (with its
/// calibration fixed gate) to the kept set, scores the condensed output
/// against the reference and commits the best one. Experts never routed to
/// on the calibration data are not eligible.
pub fn greedy_expert_selection_on(
    layer: &RoutedMoeLayer,
    probe: &LayerProbe,
    k: usize,
    kind: DivergenceKind,
) -> Result<SelectionTrace> {
    let n = layer.num_experts();
    if k > n {
        return Err(Error::arg(format!("cannot keep {k} of {n} experts")));
    }
    let t = probe.tokens();
    if t == 0 {
        return Err(Error::arg("empty calibration set"));
    }
    let d = layer.hidden_size();
    let stats = probe.gate_stats(layer);
    let gates: Vec<Option<f32>> = (0..n).map(|i| stats.mean_gate(i).map(|g| g as f32)).collect();

    let mut scratch = ExpertScratch::new(layer.experts[0].inner_size());
    let mut reference = probe.residual.clone();
    for r in 0..t {
        layer.mix_into(probe.normed.row(r), reference.row_mut(r), &mut scratch);
    }
    let reference = PreparedReference::new(&reference);

    let expert_out = |e: &crate::model::ExpertMlp| -> Vec<f32> {
        let mut scratch = ExpertScratch::new(e.inner_size());
        let mut out = vec![0.0f32; t * d];
        for r in 0..t {
            e.accumulate(probe.normed.row(r), 1.0, &mut scratch, &mut out[r * d..(r + 1) * d]);
        }
        out
    };
    let routed_out: Vec<Option<Vec<f32>>> =
        layer.experts.par_iter().zip(&gates).map(|(e, g)| g.map(|_| expert_out(e))).collect();
    let shared_out: Vec<Vec<f32>> = layer.shared.iter().map(expert_out).collect();

    // residual plus committed experts, accumulated in commit order
    let mut partial = probe.residual.data().to_vec();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut trace = SelectionTrace::default();

    for _ in 0..k {
        let eligible: Vec<usize> = remaining.iter().copied().filter(|&i| gates[i].is_some()).collect();
        if eligible.is_empty() {
            return Err(Error::NeverActivated { layer: None, expert: remaining[0] });
        }
        let losses: Vec<CandidateLoss> = eligible
            .par_iter()
            .map(|&i| {
                let g = gates[i].expect("eligible");
                let e = routed_out[i].as_ref().expect("eligible");
                let mut cand = partial.clone();
                for (c, v) in cand.iter_mut().zip(e) {
                    *c += g * v;
                }
                for s in &shared_out {
                    for (c, v) in cand.iter_mut().zip(s) {
                        *c += v;
                    }
                }
                CandidateLoss { index: i, loss: reference.divergence_sum(&cand, 0, kind) / t as f64 }
            })
            .collect();
        let best = trace.commit(losses);
        let g = gates[best].expect("eligible");
        for (p, v) in partial.iter_mut().zip(routed_out[best].as_ref().expect("eligible")) {
            *p += g * v;
        }
        remaining.retain(|&i| i != best);
    }
    Ok(trace)
}

/// `k` distinct indices drawn uniformly from `0..n`.
pub fn random_expert_selection(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::arg(format!("cannot choose {k} of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, k).into_vec())
}

/// Sum of absolute weights of each routing expert.
pub fn l1_norms(layer: &RoutedMoeLayer) -> Vec<f64> {
    layer.experts.iter().map(|e| e.tensors().iter().flat_map(|t| t.data()).map(|&w| (w as f64).abs()).sum()).collect()
}

/// The `k` experts with the smallest L1 norm.
pub fn l1_expert_selection(layer: &RoutedMoeLayer, k: usize) -> Result<Vec<usize>> {
    if k > layer.num_experts() {
        return Err(Error::arg(format!("cannot keep {k} of {} experts", layer.num_experts())));
    }
    Ok(k_smallest(&l1_norms(layer), k, 0.0))
}

/// The `k` most heavy-tailed experts (lowest alpha).
pub fn alpha_hill_expert_selection(layer: &RoutedMoeLayer, k: usize) -> Result<Vec<usize>> {
    if k > layer.num_experts() {
        return Err(Error::arg(format!("cannot keep {k} of {} experts", layer.num_experts())));
    }
    let alphas = layer.experts.iter().map(|e| hill::alpha_hill(e).map(|s| s.alpha)).collect::<Result<Vec<_>>>()?;
    Ok(k_smallest(&alphas, k, 1e-12))
}
