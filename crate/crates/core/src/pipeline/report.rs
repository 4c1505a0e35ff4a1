//! Run reports: perplexities, cost accounting and selection audit trails.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{condensed_blocks, ExpertSelectionRecord, LayerSelectionRecord, RunConfig};
use crate::condense::{cost_report, measure_throughput, CostReport};
use crate::error::{Error, Result};
use crate::metrics::corpus_perplexity;
use crate::model::{MoeLayer, MoeModel, TokenId};
use crate::selection::SweepRow;

/// `MoE` when nothing is condensed, `CD-MoE-S` when every condensed layer
/// keeps only shared experts, `CD-MoE-SR` otherwise.
pub fn variant_label(model: &MoeModel) -> &'static str {
    let condensed: Vec<usize> = model
        .blocks
        .iter()
        .filter_map(|b| match &b.layer {
            MoeLayer::Condensed(c) => Some(c.num_kept()),
            MoeLayer::Routed(_) => None,
        })
        .collect();
    if condensed.is_empty() {
        "MoE"
    } else if condensed.iter().all(|&k| k == 0) {
        "CD-MoE-S"
    } else {
        "CD-MoE-SR"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub condensed_layers: Vec<usize>,
    pub perplexity: f64,
    pub cost: CostReport,
}

pub(super) fn evaluate(model: &MoeModel, eval: &[Vec<TokenId>], throughput: bool) -> Result<EvalReport> {
    let tps = if throughput { Some(measure_throughput(model)?) } else { None };
    Ok(EvalReport {
        variant: variant_label(model).to_string(),
        condensed_layers: condensed_blocks(model),
        perplexity: corpus_perplexity(eval, model)?,
        cost: cost_report(model, tps),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub pretrained: f64,
    pub condensed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_tuned: Option<f64>,
    /// Fraction of the condensation perplexity gap closed by fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub config_fingerprint: String,
    pub calibration_fingerprint: String,
    pub seed: u64,
    pub condensed_layers: Vec<usize>,
    /// Kept routing experts of each condensed layer, in `condensed_layers` order.
    pub kept_experts: Vec<Vec<usize>>,
    pub fixed_gates: Vec<Vec<f32>>,
    pub perplexity: PerplexityReport,
    pub cost: CostReport,
    pub expert_selection: ExpertSelectionRecord,
    pub layer_selection: LayerSelectionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
}

pub(super) struct Inputs<'a> {
    pub cfg: &'a RunConfig,
    pub eval: &'a [Vec<TokenId>],
    pub pretrained: &'a MoeModel,
    pub condensed: &'a MoeModel,
    pub fine_tuned: Option<&'a MoeModel>,
    pub calibration_fingerprint: String,
    pub experts: ExpertSelectionRecord,
    pub layers: LayerSelectionRecord,
    pub sweep: Option<Vec<SweepRow>>,
}

pub(super) fn build(inp: Inputs<'_>) -> Result<RunReport> {
    let pretrained = corpus_perplexity(inp.eval, inp.pretrained)?;
    let condensed = corpus_perplexity(inp.eval, inp.condensed)?;
    let fine_tuned = inp.fine_tuned.map(|m| corpus_perplexity(inp.eval, m)).transpose()?;
    let gap = condensed - pretrained;
    let recovery = fine_tuned.filter(|_| gap > 0.0).map(|f| (condensed - f) / gap);
    let final_model = inp.fine_tuned.unwrap_or(inp.condensed);
    let tps = if inp.cfg.measure_throughput { Some(measure_throughput(final_model)?) } else { None };
    let (kept_experts, fixed_gates) = final_model
        .blocks
        .iter()
        .filter_map(|b| match &b.layer {
            MoeLayer::Condensed(c) => Some((c.kept_indices.clone(), c.fixed_gates.data().to_vec())),
            MoeLayer::Routed(_) => None,
        })
        .unzip();
    Ok(RunReport {
        variant: variant_label(final_model).to_string(),
        config_fingerprint: inp.cfg.fingerprint(),
        calibration_fingerprint: inp.calibration_fingerprint,
        seed: inp.cfg.seed,
        condensed_layers: condensed_blocks(final_model),
        kept_experts,
        fixed_gates,
        perplexity: PerplexityReport { pretrained, condensed, fine_tuned, recovery },
        cost: cost_report(final_model, tps),
        expert_selection: inp.experts,
        layer_selection: inp.layers,
        sweep: inp.sweep,
    })
}

pub(super) fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,js,kl,ppl_delta\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.layer_index, r.js, r.kl, r.ppl_delta).expect("write to string");
    }
    out
}

pub(super) fn parse_sweep_csv(bytes: &[u8]) -> Result<Vec<SweepRow>> {
    let bad = |line: usize| Error::Corruption(format!("malformed sweep file at line {line}"));
    let text = std::str::from_utf8(bytes).map_err(|_| bad(1))?;
    let mut lines = text.lines();
    if lines.next() != Some("layer,js,kl,ppl_delta") {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2));
            }
            Ok(SweepRow {
                layer_index: f[0].parse().map_err(|_| bad(i + 2))?,
                js: f[1].parse().map_err(|_| bad(i + 2))?,
                kl: f[2].parse().map_err(|_| bad(i + 2))?,
                ppl_delta: f[3].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

/// Human-readable summary of a run report.
pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line(format!("variant              {}", r.variant));
    line(format!("config fingerprint   {}", r.config_fingerprint));
    line(format!("calibration          {}", r.calibration_fingerprint));
    line(format!("seed                 {}", r.seed));
    line(format!("condensed layers     {:?}", r.condensed_layers));
    line(format!("kept experts         {:?}", r.kept_experts));
    line(format!("expert selection     {:?}", r.expert_selection.method));
    line(format!("layer selection      {:?} ({:?})", r.layer_selection.method, r.layer_selection.metric));
    if let Some(t) = &r.layer_selection.trace {
        let steps: Vec<String> = t.step_losses.iter().map(|l| format!("{l:.5}")).collect();
        line(format!("greedy step losses   [{}]", steps.join(", ")));
    }
    line(format!("ppl pretrained       {:.4}", r.perplexity.pretrained));
    line(format!("ppl condensed        {:.4}", r.perplexity.condensed));
    if let Some(f) = r.perplexity.fine_tuned {
        line(format!("ppl fine-tuned       {f:.4}"));
    }
    if let Some(rec) = r.perplexity.recovery {
        line(format!("gap recovered        {:.1}%", 100.0 * rec));
    }
    let c = &r.cost;
    line(format!(
        "params               {} / {} (memory ratio {:.4})",
        c.total_params, c.original_total_params, c.memory_ratio
    ));
    line(format!("active params/token  {} / {}", c.active_params_per_token, c.original_active_params_per_token));
    line(format!(
        "flops/token          {} / {} (speedup estimate {:.4})",
        c.flops_per_token, c.original_flops_per_token, c.speedup_estimate
    ));
    if let Some(tps) = c.measured_tokens_per_second {
        line(format!("measured tokens/s    {tps:.0}"));
    }
    if let Some(rows) = &r.sweep {
        line("sweep                layer js kl ppl_delta".to_string());
        for row in rows {
            line(format!("                     {} {:.6} {:.6} {:.6}", row.layer_index, row.js, row.kl, row.ppl_delta));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_round_trips() {
        let rows = vec![
            SweepRow { layer_index: 0, js: 0.125, kl: 0.5, ppl_delta: 1.25 },
            SweepRow { layer_index: 3, js: 1e-9, kl: 2.0, ppl_delta: 0.0 },
        ];
        assert_eq!(parse_sweep_csv(sweep_csv(&rows).as_bytes()).unwrap(), rows);
        assert!(matches!(parse_sweep_csv(b"layer,js\n"), Err(Error::Corruption(_))));
        assert!(matches!(parse_sweep_csv(b"layer,js,kl,ppl_delta\n1,x,2,3\n"), Err(Error::Corruption(_))));
    }
}
