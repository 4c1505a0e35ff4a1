use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{k_smallest, CandidateLoss, SelectionTrace};
use crate::condense::CondensedLayer;
use crate::error::{Error, Result};
use crate::metrics::{output_divergence, sequence_nll, DivergenceKind, PreparedReference};
use crate::model::{LayerView, MoeModel, TokenId};
use crate::tensor::Tensor;

/// Loss used to score a tentative layer condensation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Js,
    Kl,
    Ppl,
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "js" => Ok(Self::Js),
            "kl" => Ok(Self::Kl),
            "ppl" => Ok(Self::Ppl),
            _ => Err(Error::arg(format!("unknown metric {s:?} (expected js, kl or ppl)"))),
        }
    }
}

/// One row of the per-layer divergence sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_index: usize,
    pub js: f64,
    pub kl: f64,
    pub ppl_delta: f64,
}

/// Output of a one-shot ranking: per-layer scores (ascending layer index) and
/// the `k` lowest-scoring layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub chosen: Vec<usize>,
    pub scores: Vec<CandidateLoss>,
}

/// Reference outputs of the unmodified model on the calibration set.
struct Reference {
    probs: PreparedReference,
    offsets: Vec<usize>,
    ppl: Vec<f64>,
    rows: usize,
}

impl Reference {
    fn new(model: &MoeModel, calibration: &[Vec<TokenId>]) -> Result<Self> {
        let logits = calibration.iter().map(|s| model.forward(s)).collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(calibration.len());
        let mut rows = 0;
        for l in &logits {
            offsets.push(rows);
            rows += l.rows();
        }
        let ppl = logits.iter().zip(calibration).map(|(l, s)| seq_ppl(l, s)).collect();
        Ok(Self { probs: PreparedReference::from_parts(&logits), offsets, ppl, rows })
    }
}

fn seq_ppl(logits: &Tensor, tokens: &[TokenId]) -> f64 {
    let (nll, n) = sequence_nll(logits, tokens);
    (nll / n.max(1) as f64).exp()
}

fn check_calibration(calibration: &[Vec<TokenId>], metric: SelectionMetric) -> Result<()> {
    if calibration.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    if metric == SelectionMetric::Ppl && calibration.iter().any(|s| s.len() < 2) {
        return Err(Error::arg("perplexity needs sequences of at least two tokens"));
    }
    if calibration.iter().any(|s| s.is_empty()) {
        return Err(Error::arg("empty calibration sequence"));
    }
    Ok(())
}

fn check_candidates(model: &MoeModel, candidates: &[Option<CondensedLayer>]) -> Result<Vec<usize>> {
    if candidates.len() != model.num_blocks() {
        return Err(Error::arg(format!("{} condensed candidates for {} blocks", candidates.len(), model.num_blocks())));
    }
    let eligible: Vec<usize> =
        (0..model.num_blocks()).filter(|&b| model.blocks[b].layer.is_routed() && candidates[b].is_some()).collect();
    Ok(eligible)
}

/// Scores every candidate layer on top of `committed` views, each candidate
/// condensed in turn. Returns `(js, kl, ppl_delta)` means per candidate.
fn score_layers(
    model: &MoeModel,
    calibration: &[Vec<TokenId>],
    reference: &Reference,
    committed: &[LayerView<'_>],
    remaining: &[usize],
    candidates: &[Option<CondensedLayer>],
) -> Result<Vec<SweepRow>> {
    let traces = calibration
        .iter()
        .map(|s| model.forward_trace_with(committed, s).map(|t| t.moe_inputs))
        .collect::<Result<Vec<_>>>()?;
    let rows = remaining
        .par_iter()
        .map(|&b| {
            let mut views = committed.to_vec();
            views[b] = LayerView::Condensed(candidates[b].as_ref().expect("eligible layer"));
            let (mut js, mut kl, mut dppl) = (0.0, 0.0, 0.0);
            for (s, seq) in calibration.iter().enumerate() {
                let logits = model.resume_from_moe(&views, b, &traces[s][b]);
                let (j, k) = reference.probs.js_kl_sums(logits.data(), reference.offsets[s]);
                js += j;
                kl += k;
                if seq.len() >= 2 {
                    dppl += (seq_ppl(&logits, seq) - reference.ppl[s]).abs();
                }
            }
            SweepRow {
                layer_index: b,
                js: js / reference.rows as f64,
                kl: kl / reference.rows as f64,
                ppl_delta: dppl / calibration.len() as f64,
            }
        })
        .collect();
    Ok(rows)
}

fn metric_of(row: &SweepRow, metric: SelectionMetric) -> f64 {
    match metric {
        SelectionMetric::Js => row.js,
        SelectionMetric::Kl => row.kl,
        SelectionMetric::Ppl => row.ppl_delta,
    }
}

/// Greedy layer selection.
///
/// The reference is the final output of `model` with every layer routed.
/// Each step condenses every remaining layer in turn (layers committed by
/// earlier steps stay condensed), scores the final outputs with `metric`
/// and commits the best layer. `candidates[b]` is block `b`'s condensed
/// form; blocks without a candidate are never chosen.
pub fn greedy_layer_selection(
    model: &MoeModel,
    calibration: &[Vec<TokenId>],
    k_layers: usize,
    candidates: &[Option<CondensedLayer>],
    metric: SelectionMetric,
) -> Result<SelectionTrace> {
    check_calibration(calibration, metric)?;
    let mut remaining = check_candidates(model, candidates)?;
    if k_layers > remaining.len() {
        return Err(Error::arg(format!("cannot condense {k_layers} layers, only {} are eligible", remaining.len())));
    }
    let reference = Reference::new(model, calibration)?;
    let mut views = model.views();
    let mut trace = SelectionTrace::default();
    for _ in 0..k_layers {
        let rows = score_layers(model, calibration, &reference, &views, &remaining, candidates)?;
        let losses = rows.iter().map(|r| CandidateLoss { index: r.layer_index, loss: metric_of(r, metric) }).collect();
        let best = trace.commit(losses);
        views[best] = LayerView::Condensed(candidates[best].as_ref().expect("eligible layer"));
        remaining.retain(|&b| b != best);
    }
    Ok(trace)
}

/// Final-output divergence of condensing each eligible layer alone.
pub fn divergence_sweep(
    model: &MoeModel,
    calibration: &[Vec<TokenId>],
    candidates: &[Option<CondensedLayer>],
) -> Result<Vec<SweepRow>> {
    check_calibration(calibration, SelectionMetric::Ppl)?;
    let eligible = check_candidates(model, candidates)?;
    let reference = Reference::new(model, calibration)?;
    score_layers(model, calibration, &reference, &model.views(), &eligible, candidates)
}

fn rank(scores: Vec<CandidateLoss>, k_layers: usize) -> Result<LayerScores> {
    if k_layers > scores.len() {
        return Err(Error::arg(format!("cannot condense {k_layers} layers, only {} are eligible", scores.len())));
    }
    let values: Vec<f64> = scores.iter().map(|c| c.loss).collect();
    let chosen = k_smallest(&values, k_layers, 0.0).into_iter().map(|i| scores[i].index).collect();
    Ok(LayerScores { chosen, scores })
}

/// One-shot ranking by final-output JS with one layer condensed at a time.
pub fn global_layer_rank_selection(
    model: &MoeModel,
    calibration: &[Vec<TokenId>],
    k_layers: usize,
    candidates: &[Option<CondensedLayer>],
) -> Result<LayerScores> {
    check_calibration(calibration, SelectionMetric::Js)?;
    let eligible = check_candidates(model, candidates)?;
    let reference = Reference::new(model, calibration)?;
    let rows = score_layers(model, calibration, &reference, &model.views(), &eligible, candidates)?;
    rank(rows.iter().map(|r| CandidateLoss { index: r.layer_index, loss: r.js }).collect(), k_layers)
}

/// One-shot ranking by each layer's own output JS before and after
/// condensation, on the inputs that layer sees in the unmodified model.
pub fn layer_rank_selection(
    model: &MoeModel,
    calibration: &[Vec<TokenId>],
    k_layers: usize,
    candidates: &[Option<CondensedLayer>],
) -> Result<LayerScores> {
    check_calibration(calibration, SelectionMetric::Js)?;
    let eligible = check_candidates(model, candidates)?;
    let traces = calibration.iter().map(|s| model.forward_trace(s)).collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(eligible.len());
    for &b in &eligible {
        let layer = candidates[b].as_ref().expect("eligible layer");
        let norm = model.blocks[b].moe_norm.data();
        let d = model.config.hidden_size;
        let mut total = 0.0;
        let mut rows = 0;
        for t in &traces {
            let input = &t.moe_inputs[b];
            let mut cand = input.clone();
            let mut scratch = crate::model::ExpertScratch::new(model.config.expert_inner);
            for r in 0..input.rows() {
                let u = crate::model::rms_norm(input.row(r), norm);
                layer.mix_into(&u, &mut cand.data_mut()[r * d..(r + 1) * d], &mut scratch);
            }
            total += output_divergence(&t.moe_outputs[b], &cand, DivergenceKind::Js)? * input.rows() as f64;
            rows += input.rows();
        }
        scores.push(CandidateLoss { index: b, loss: total / rows as f64 });
    }
    rank(scores, k_layers)
}

/// `k` distinct layers drawn uniformly from `eligible`.
pub fn random_layer_selection(eligible: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > eligible.len() {
        return Err(Error::arg(format!("cannot choose {k} of {} layers", eligible.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect())
}
