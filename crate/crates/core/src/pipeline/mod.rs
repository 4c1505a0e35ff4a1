//! End-to-end run: pretrain, calibrate, select experts, select layers,
//! condense, fine-tune, evaluate and report.
//!
//! Every stage reads its inputs from and writes its artifacts to one output
//! directory, so stages can run separately (as CLI subcommands) or in one
//! go through [`run_all`]. Corpora are regenerated from the configuration
//! rather than stored.

mod config;
mod report;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::condense::{condense_model, prepare_condensed, CondensedLayer, ExpertPlan};
use crate::data::{generate_corpus, sample_calibration, CalibrationRecord, CalibrationSet, Corpus};
use crate::error::{read_file, Error, Result};
use crate::model::{collect_all_gate_stats, GateStats, MoeLayer, MoeModel, TokenId};
use crate::selection::{
    alpha_hill_expert_selection, divergence_sweep, global_layer_rank_selection, greedy_expert_selection,
    greedy_layer_selection, l1_expert_selection, layer_rank_selection, random_expert_selection, random_layer_selection,
    CandidateLoss, SelectionMetric, SelectionTrace, SweepRow,
};
use crate::training::{train, ParamMask};

pub use config::{stage_seed, ExpertMethod, LayerMethod, RunConfig, Stage};
pub use report::{render_text, variant_label, EvalReport, PerplexityReport, RunReport};

pub const PRETRAINED_DIR: &str = "pretrained";
pub const CONDENSED_DIR: &str = "condensed";
pub const SFT_DIR: &str = "sft";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const SFT_LOSS_FILE: &str = "sft_loss.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const GATE_STATS_FILE: &str = "gate_stats.json";
pub const EXPERTS_FILE: &str = "experts.json";
pub const LAYERS_FILE: &str = "layers.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

/// Result of expert selection for every routed block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelectionRecord {
    pub method: ExpertMethod,
    pub experts_per_condensed_layer: usize,
    pub seed: u64,
    pub calibration_fingerprint: String,
    pub plan: ExpertPlan,
    /// Greedy traces per block (greedy method only).
    pub traces: Vec<Option<SelectionTrace>>,
}

/// Result of layer selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelectionRecord {
    pub method: LayerMethod,
    pub metric: SelectionMetric,
    pub k_layers: usize,
    pub seed: u64,
    pub calibration_fingerprint: String,
    pub chosen: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SelectionTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<CandidateLoss>>,
}

/// Corpora derived from a configuration.
pub struct Corpora {
    pub train: Corpus,
    pub eval: Corpus,
    pub calibration: Corpus,
}

impl Corpora {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let seed = stage_seed(cfg.seed, Stage::Data);
        Ok(Self {
            train: generate_corpus(cfg.corpus_kind, seed, cfg.corpus_size)?,
            eval: generate_corpus(cfg.eval_kind, seed.wrapping_add(1), cfg.eval_size)?,
            calibration: generate_corpus(cfg.calibration_kind, seed.wrapping_add(2), cfg.calibration_pool)?,
        })
    }

    pub fn train_sequences(&self, cfg: &RunConfig) -> Vec<Vec<TokenId>> {
        self.train.sequences(cfg.seq_len)
    }

    pub fn eval_sequences(&self, cfg: &RunConfig) -> Vec<Vec<TokenId>> {
        self.eval.sequences(cfg.seq_len)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_calibration(cfg: &RunConfig, out: &Path, corpora: &Corpora) -> Result<CalibrationSet> {
    let record: CalibrationRecord = read_json(&out.join(CALIBRATION_FILE))?;
    CalibrationSet::from_record(&corpora.calibration, record)
        .map_err(|e| match e {
            Error::Input(m) => Error::State(format!("{m}; rerun `calibrate` for this configuration")),
            e => e,
        })
        .and_then(|c| {
            if c.record.count != cfg.calibration_count || c.record.max_seq_len != cfg.seq_len {
                Err(Error::State("calibration artifact does not match the configuration; rerun `calibrate`".into()))
            } else {
                Ok(c)
            }
        })
}

fn check_fingerprint(what: &str, found: &str, calibration: &CalibrationSet) -> Result<()> {
    if found != calibration.fingerprint() {
        return Err(Error::State(format!("{what} was computed on a different calibration set; rerun it")));
    }
    Ok(())
}

/// Train a freshly initialised model on the training corpus.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<MoeModel> {
    cfg.validate()?;
    let corpora = Corpora::new(cfg)?;
    let mut model = MoeModel::init(cfg.model.clone(), stage_seed(cfg.seed, Stage::Init))?;
    let mask = ParamMask::all(&model);
    let curve =
        train(&mut model, &corpora.train_sequences(cfg), &corpora.eval_sequences(cfg), &cfg.pretrain_config(), &mask)?;
    save_checkpoint(&model, &out.join(PRETRAINED_DIR))?;
    write_text(&out.join(PRETRAIN_LOSS_FILE), &curve.to_csv())?;
    if let Some(last) = curve.points.last() {
        log::info!("pretrain: final train loss {:.4}", last.train_loss);
    }
    Ok(model)
}

/// Draw the calibration set and record routing statistics of the pretrained model.
pub fn calibrate(cfg: &RunConfig, out: &Path) -> Result<CalibrationSet> {
    cfg.validate()?;
    let model = load_checkpoint(&out.join(PRETRAINED_DIR))?;
    let corpora = Corpora::new(cfg)?;
    let seed = stage_seed(cfg.seed, Stage::Data).wrapping_add(3);
    let cal = sample_calibration(&corpora.calibration, cfg.calibration_count, cfg.seq_len, seed)?;
    let stats = collect_all_gate_stats(&cal.sequences, &model)?;
    write_json(&out.join(CALIBRATION_FILE), &cal.record)?;
    write_json(&out.join(GATE_STATS_FILE), &stats)?;
    log::info!("calibrate: {} sequences, fingerprint {}", cal.sequences.len(), cal.fingerprint());
    Ok(cal)
}

/// Choose the routing experts each block keeps if it is condensed.
pub fn select_experts(cfg: &RunConfig, out: &Path) -> Result<ExpertSelectionRecord> {
    cfg.validate()?;
    let model = load_checkpoint(&out.join(PRETRAINED_DIR))?;
    let corpora = Corpora::new(cfg)?;
    let cal = load_calibration(cfg, out, &corpora)?;
    let k = cfg.experts_per_condensed_layer;
    let seed = stage_seed(cfg.seed, Stage::Selection);
    let blocks = model.num_blocks();
    let mut plan = ExpertPlan::shared_only(blocks);
    let mut traces = vec![None; blocks];
    for b in 0..blocks {
        let Ok(layer) = model.routed_layer(b) else { continue };
        if k == 0 {
            continue;
        }
        plan.keep[b] = match cfg.expert_method {
            ExpertMethod::Greedy => {
                let trace = greedy_expert_selection(&model, b, &cal.sequences, k)?;
                let keep = trace.chosen.clone();
                traces[b] = Some(trace);
                keep
            }
            ExpertMethod::Random => random_expert_selection(layer.num_experts(), k, seed.wrapping_add(b as u64))?,
            ExpertMethod::L1 => l1_expert_selection(layer, k)?,
            ExpertMethod::AlphaHill => alpha_hill_expert_selection(layer, k)?,
        };
        log::info!("select-experts: block {b} keeps {:?}", plan.keep[b]);
    }
    let record = ExpertSelectionRecord {
        method: cfg.expert_method,
        experts_per_condensed_layer: k,
        seed,
        calibration_fingerprint: cal.fingerprint().to_string(),
        plan,
        traces,
    };
    write_json(&out.join(EXPERTS_FILE), &record)?;
    Ok(record)
}

struct SelectionInputs {
    model: MoeModel,
    calibration: CalibrationSet,
    experts: ExpertSelectionRecord,
    candidates: Vec<Option<CondensedLayer>>,
}

fn selection_inputs(cfg: &RunConfig, out: &Path) -> Result<SelectionInputs> {
    let model = load_checkpoint(&out.join(PRETRAINED_DIR))?;
    let corpora = Corpora::new(cfg)?;
    let calibration = load_calibration(cfg, out, &corpora)?;
    let stats: Vec<Option<GateStats>> = read_json(&out.join(GATE_STATS_FILE))?;
    let experts: ExpertSelectionRecord = read_json(&out.join(EXPERTS_FILE))?;
    check_fingerprint("expert selection", &experts.calibration_fingerprint, &calibration)?;
    let candidates = prepare_condensed(&model, &experts.plan, &stats, cfg.gate_fallback())?;
    Ok(SelectionInputs { model, calibration, experts, candidates })
}

/// Choose which layers to condense.
pub fn select_layers(cfg: &RunConfig, out: &Path) -> Result<LayerSelectionRecord> {
    cfg.validate()?;
    let inp = selection_inputs(cfg, out)?;
    let cal = &inp.calibration.sequences;
    let k = cfg.k_layers;
    let seed = stage_seed(cfg.seed, Stage::Selection).wrapping_add(1 << 32);
    let (chosen, trace, scores) = match cfg.layer_method {
        LayerMethod::Greedy => {
            let t = greedy_layer_selection(&inp.model, cal, k, &inp.candidates, cfg.metric)?;
            (t.chosen.clone(), Some(t), None)
        }
        LayerMethod::GlobalLayerRank => {
            let s = global_layer_rank_selection(&inp.model, cal, k, &inp.candidates)?;
            (s.chosen, None, Some(s.scores))
        }
        LayerMethod::LayerRank => {
            let s = layer_rank_selection(&inp.model, cal, k, &inp.candidates)?;
            (s.chosen, None, Some(s.scores))
        }
        LayerMethod::Random => {
            let eligible: Vec<usize> = (0..inp.candidates.len()).filter(|&b| inp.candidates[b].is_some()).collect();
            (random_layer_selection(&eligible, k, seed)?, None, None)
        }
    };
    log::info!("select-layers: {chosen:?}");
    let record = LayerSelectionRecord {
        method: cfg.layer_method,
        metric: cfg.metric,
        k_layers: k,
        seed,
        calibration_fingerprint: inp.calibration.fingerprint().to_string(),
        chosen,
        trace,
        scores,
    };
    write_json(&out.join(LAYERS_FILE), &record)?;
    Ok(record)
}

/// Build the condensed model from the chosen layers and kept experts.
pub fn condense(cfg: &RunConfig, out: &Path) -> Result<MoeModel> {
    cfg.validate()?;
    let inp = selection_inputs(cfg, out)?;
    let layers: LayerSelectionRecord = read_json(&out.join(LAYERS_FILE))?;
    check_fingerprint("layer selection", &layers.calibration_fingerprint, &inp.calibration)?;
    let condensed = condense_model(&inp.model, &layers.chosen, &inp.candidates)?;
    save_checkpoint(&condensed, &out.join(CONDENSED_DIR))?;
    log::info!(
        "condense: layers {:?}, keeping {:?}",
        layers.chosen,
        layers.chosen.iter().map(|&b| &inp.experts.plan.keep[b]).collect::<Vec<_>>()
    );
    Ok(condensed)
}

/// Fine-tune only the condensed layers of the condensed model.
pub fn sft(cfg: &RunConfig, out: &Path) -> Result<MoeModel> {
    cfg.validate()?;
    let mut model = load_checkpoint(&out.join(CONDENSED_DIR))?;
    let corpora = Corpora::new(cfg)?;
    let mask = ParamMask::sft(&model, cfg.sft_train_gates);
    let (trainable, total) = mask.parameter_counts(&model);
    log::info!("sft: training {trainable} of {total} parameters");
    let curve = if trainable == 0 {
        Default::default()
    } else {
        train(&mut model, &corpora.train_sequences(cfg), &corpora.eval_sequences(cfg), &cfg.sft_config(), &mask)?
    };
    save_checkpoint(&model, &out.join(SFT_DIR))?;
    write_text(&out.join(SFT_LOSS_FILE), &curve.to_csv())?;
    Ok(model)
}

/// The most processed checkpoint present in `out`.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    for dir in [SFT_DIR, CONDENSED_DIR, PRETRAINED_DIR] {
        let path = out.join(dir);
        if path.join(crate::checkpoint::MANIFEST_FILE).exists() {
            return Ok(path);
        }
    }
    Err(Error::MissingFile(format!("no checkpoint under {}", out.display())))
}

/// Held-out perplexity and cost of one checkpoint.
pub fn eval(cfg: &RunConfig, out: &Path, model_dir: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = match model_dir {
        Some(d) => d.to_path_buf(),
        None => latest_checkpoint(out)?,
    };
    let model = load_checkpoint(&dir)?;
    let corpora = Corpora::new(cfg)?;
    let report = report::evaluate(&model, &corpora.eval_sequences(cfg), cfg.measure_throughput)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}

/// Final-output divergence of condensing each layer alone.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let inp = selection_inputs(cfg, out)?;
    let rows = divergence_sweep(&inp.model, &inp.calibration.sequences, &inp.candidates)?;
    write_text(&out.join(SWEEP_FILE), &report::sweep_csv(&rows))?;
    Ok(rows)
}

/// Collect every artifact into the run report.
pub fn report(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let corpora = Corpora::new(cfg)?;
    let eval_seqs = corpora.eval_sequences(cfg);
    let pretrained = load_checkpoint(&out.join(PRETRAINED_DIR))?;
    let condensed = load_checkpoint(&out.join(CONDENSED_DIR))?;
    let fine_tuned = match load_checkpoint(&out.join(SFT_DIR)) {
        Ok(m) => Some(m),
        Err(Error::MissingFile(_)) => None,
        Err(e) => return Err(e),
    };
    let calibration: CalibrationRecord = read_json(&out.join(CALIBRATION_FILE))?;
    let experts: ExpertSelectionRecord = read_json(&out.join(EXPERTS_FILE))?;
    let layers: LayerSelectionRecord = read_json(&out.join(LAYERS_FILE))?;
    let sweep = match read_file(&out.join(SWEEP_FILE)) {
        Ok(bytes) => Some(report::parse_sweep_csv(&bytes)?),
        Err(Error::MissingFile(_)) => None,
        Err(e) => return Err(e),
    };
    let run = report::build(report::Inputs {
        cfg,
        eval: &eval_seqs,
        pretrained: &pretrained,
        condensed: &condensed,
        fine_tuned: fine_tuned.as_ref(),
        calibration_fingerprint: calibration.fingerprint,
        experts,
        layers,
        sweep,
    })?;
    write_json(&out.join(REPORT_JSON_FILE), &run)?;
    write_text(&out.join(REPORT_TEXT_FILE), &render_text(&run))?;
    Ok(run)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    pretrain(cfg, out)?;
    calibrate(cfg, out)?;
    select_experts(cfg, out)?;
    select_layers(cfg, out)?;
    condense(cfg, out)?;
    sft(cfg, out)?;
    sweep(cfg, out)?;
    report(cfg, out)
}

/// Indices of condensed blocks.
pub fn condensed_blocks(model: &MoeModel) -> Vec<usize> {
    model.blocks.iter().enumerate().filter(|(_, b)| matches!(b.layer, MoeLayer::Condensed(_))).map(|(i, _)| i).collect()
}
