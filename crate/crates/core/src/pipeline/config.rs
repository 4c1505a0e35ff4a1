//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every problem in a
//! file (unknown keys, unparsable values, inconsistent settings) is
//! collected into one [`Error::Config`] report.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condense::GateFallback;
use crate::data::CorpusKind;
use crate::error::{read_file, Error, Result};
use crate::model::ModelConfig;
use crate::selection::SelectionMetric;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMethod {
    Greedy,
    Random,
    L1,
    AlphaHill,
}

impl FromStr for ExpertMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "random" => Ok(Self::Random),
            "l1" => Ok(Self::L1),
            "alpha_hill" => Ok(Self::AlphaHill),
            _ => Err(format!("expected greedy, random, l1 or alpha_hill, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMethod {
    Greedy,
    LayerRank,
    GlobalLayerRank,
    Random,
}

impl FromStr for LayerMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "layer_rank" => Ok(Self::LayerRank),
            "global_layer_rank" => Ok(Self::GlobalLayerRank),
            "random" => Ok(Self::Random),
            _ => Err(format!("expected greedy, layer_rank, global_layer_rank or random, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Token length of training, evaluation and calibration sequences.
    pub seq_len: usize,
    pub corpus_kind: CorpusKind,
    pub corpus_size: usize,
    pub eval_kind: CorpusKind,
    pub eval_size: usize,
    pub calibration_kind: CorpusKind,
    pub calibration_pool: usize,
    pub calibration_count: usize,
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
    pub aux_loss_coef: f64,
    pub expert_method: ExpertMethod,
    pub layer_method: LayerMethod,
    pub metric: SelectionMetric,
    pub k_layers: usize,
    /// Routing experts kept per condensed layer; 0 keeps only shared experts.
    pub experts_per_condensed_layer: usize,
    pub gate_fallback_uniform: bool,
    pub sft_steps: usize,
    pub sft_learning_rate: f64,
    pub sft_batch_size: usize,
    pub sft_train_gates: bool,
    pub warmup_ratio: f64,
    /// Measure tokens/s in `eval` and `report` (makes reports run-dependent).
    pub measure_throughput: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            seq_len: 64,
            corpus_kind: CorpusKind::Markov,
            corpus_size: 2000,
            eval_kind: CorpusKind::Markov,
            eval_size: 64,
            calibration_kind: CorpusKind::Markov,
            calibration_pool: 500,
            calibration_count: 100,
            pretrain_steps: 1500,
            pretrain_learning_rate: 3e-3,
            pretrain_batch_size: 8,
            aux_loss_coef: 0.01,
            expert_method: ExpertMethod::Greedy,
            layer_method: LayerMethod::Greedy,
            metric: SelectionMetric::Js,
            k_layers: 4,
            experts_per_condensed_layer: 2,
            gate_fallback_uniform: false,
            sft_steps: 400,
            sft_learning_rate: 1e-3,
            sft_batch_size: 8,
            sft_train_gates: true,
            warmup_ratio: 0.1,
            measure_throughput: false,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    /// Set one field by key; `model.` keys address [`ModelConfig`].
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.vocab_size" => m.vocab_size = parse(value)?,
            "model.hidden_size" => m.hidden_size = parse(value)?,
            "model.expert_inner" => m.expert_inner = parse(value)?,
            "model.num_blocks" => m.num_blocks = parse(value)?,
            "model.num_routing_experts" => m.num_routing_experts = parse(value)?,
            "model.num_shared_experts" => m.num_shared_experts = parse(value)?,
            "model.k_active" => m.k_active = parse(value)?,
            "model.max_seq_len" => m.max_seq_len = parse(value)?,
            "model.attention" => m.attention = parse_bool(value)?,
            "model.renormalize_gates" => m.renormalize_gates = parse_bool(value)?,
            "seed" => self.seed = parse(value)?,
            "seq_len" => self.seq_len = parse(value)?,
            "corpus_kind" => self.corpus_kind = parse(value)?,
            "corpus_size" => self.corpus_size = parse(value)?,
            "eval_kind" => self.eval_kind = parse(value)?,
            "eval_size" => self.eval_size = parse(value)?,
            "calibration_kind" => self.calibration_kind = parse(value)?,
            "calibration_pool" => self.calibration_pool = parse(value)?,
            "calibration_count" => self.calibration_count = parse(value)?,
            "pretrain_steps" => self.pretrain_steps = parse(value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(value)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(value)?,
            "aux_loss_coef" => self.aux_loss_coef = parse(value)?,
            "expert_method" => self.expert_method = parse(value)?,
            "layer_method" => self.layer_method = parse(value)?,
            "metric" => self.metric = parse(value)?,
            "k_layers" => self.k_layers = parse(value)?,
            "experts_per_condensed_layer" => self.experts_per_condensed_layer = parse(value)?,
            "gate_fallback" => {
                self.gate_fallback_uniform = match value {
                    "error" => false,
                    "uniform" => true,
                    _ => return Err(format!("expected error or uniform, got {value:?}")),
                }
            }
            "sft_steps" => self.sft_steps = parse(value)?,
            "sft_learning_rate" => self.sft_learning_rate = parse(value)?,
            "sft_batch_size" => self.sft_batch_size = parse(value)?,
            "sft_train_gates" => self.sft_train_gates = parse_bool(value)?,
            "warmup_ratio" => self.warmup_ratio = parse(value)?,
            "measure_throughput" => self.measure_throughput = parse_bool(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if let Err(e) = self.set(key, value) {
                errs.push(format!("line {}: {key}: {e}", i + 1));
            }
        }
        errs
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errs = cfg.apply_text(text);
        if errs.is_empty() {
            errs = cfg.validation_errors();
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::Config(vec![format!("{} is not UTF-8", path.display())]))?;
        Self::from_text(&text)
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.validation_errors().into_iter().map(|e| format!("model.{e}")).collect();
        let positive = [
            ("seq_len", self.seq_len),
            ("corpus_size", self.corpus_size),
            ("eval_size", self.eval_size),
            ("calibration_pool", self.calibration_pool),
            ("calibration_count", self.calibration_count),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("sft_batch_size", self.sft_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.seq_len < 2 {
            errs.push("seq_len must be at least 2".into());
        }
        if self.seq_len > self.model.max_seq_len {
            errs.push(format!("seq_len ({}) exceeds model.max_seq_len ({})", self.seq_len, self.model.max_seq_len));
        }
        if self.k_layers > self.model.num_blocks {
            errs.push(format!("k_layers ({}) exceeds model.num_blocks ({})", self.k_layers, self.model.num_blocks));
        }
        if self.experts_per_condensed_layer > self.model.num_routing_experts {
            errs.push(format!(
                "experts_per_condensed_layer ({}) exceeds model.num_routing_experts ({})",
                self.experts_per_condensed_layer, self.model.num_routing_experts
            ));
        }
        if self.model.vocab_size < 256 {
            errs.push("model.vocab_size must be at least 256 for byte tokens".into());
        }
        for (name, lr) in
            [("pretrain_learning_rate", self.pretrain_learning_rate), ("sft_learning_rate", self.sft_learning_rate)]
        {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            errs.push("warmup_ratio must be in [0, 1)".into());
        }
        if !(self.aux_loss_coef >= 0.0) {
            errs.push("aux_loss_coef must be non-negative".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn gate_fallback(&self) -> GateFallback {
        if self.gate_fallback_uniform {
            GateFallback::Uniform
        } else {
            GateFallback::Error
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.pretrain_learning_rate,
            warmup_ratio: self.warmup_ratio,
            batch_size: self.pretrain_batch_size,
            steps: self.pretrain_steps,
            seed: stage_seed(self.seed, Stage::Pretrain),
            aux_loss_coef: self.aux_loss_coef,
            eval_every: 100,
            ..TrainConfig::default()
        }
    }

    pub fn sft_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sft_learning_rate,
            warmup_ratio: self.warmup_ratio,
            batch_size: self.sft_batch_size,
            steps: self.sft_steps,
            seed: stage_seed(self.seed, Stage::Sft),
            aux_loss_coef: 0.0,
            eval_every: 50,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Init,
    Selection,
    Pretrain,
    Sft,
}

/// Independent per-stage seed derived from the root seed (splitmix64).
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut z = root.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stage as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
