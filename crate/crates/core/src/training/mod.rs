//! Pretraining and lightweight fine-tuning.
//!
//! Fine-tuning after condensation updates only the condensed layers: their
//! kept experts, fixed gates and shared experts. Everything else is frozen
//! and stays bitwise identical.

mod backprop;
mod optim;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeLayer, MoeModel, TokenId};

pub use backprop::{Engine, Gradients};
pub use optim::Adam;

/// Per-tensor trainable flags, aligned with [`MoeModel::named_tensors`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub names: Vec<String>,
    pub trainable: Vec<bool>,
}

impl ParamMask {
    pub fn all(model: &MoeModel) -> Self {
        Self::from_fn(model, |_| true)
    }

    pub fn none(model: &MoeModel) -> Self {
        Self::from_fn(model, |_| false)
    }

    /// Only the tensors of condensed layers: kept experts, shared experts and
    /// (if `train_gates`) the fixed gates.
    pub fn sft(model: &MoeModel, train_gates: bool) -> Self {
        let condensed: Vec<String> = model
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.layer, MoeLayer::Condensed(_)))
            .map(|(i, _)| format!("blocks.{i}.moe."))
            .collect();
        Self::from_fn(model, |name| {
            condensed.iter().any(|p| name.starts_with(p.as_str())) && (train_gates || !name.ends_with(".fixed_gates"))
        })
    }

    pub fn from_fn(model: &MoeModel, f: impl Fn(&str) -> bool) -> Self {
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let trainable = names.iter().map(|n| f(n)).collect();
        Self { names, trainable }
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.names.iter().zip(&self.trainable).any(|(n, &t)| t && n == name)
    }

    /// `(trainable, total)` scalar parameter counts over every stored tensor.
    pub fn parameter_counts(&self, model: &MoeModel) -> (u64, u64) {
        let mut trainable = 0;
        let mut total = 0;
        for ((_, t), &flag) in model.named_tensors().iter().zip(&self.trainable) {
            total += t.numel() as u64;
            if flag {
                trainable += t.numel() as u64;
            }
        }
        (trainable, total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Weight of the load-balancing term; zero for fine-tuning.
    pub aux_loss_coef: f64,
    /// Evaluate on the held-out set every this many steps (and at the end); 0 disables.
    pub eval_every: usize,
    /// Abort when the training loss exceeds this multiple of the first step's loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_ratio: 0.1,
            batch_size: 8,
            steps: 200,
            seed: 0,
            aux_loss_coef: 0.0,
            eval_every: 0,
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            errs.push(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.aux_loss_coef < 0.0 {
            errs.push("aux_loss_coef must be non-negative".into());
        }
        if !(self.divergence_factor > 1.0) {
            errs.push("divergence_factor must exceed 1".into());
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

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).round() as usize
    }

    /// Linear warmup to `learning_rate`, then cosine decay towards zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    /// `step,lr,train_loss,eval_loss` with an empty eval column where not measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,train_loss,eval_loss\n");
        for p in &self.points {
            let eval = p.eval_loss.map(|e| e.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", p.step, p.lr, p.train_loss, eval).expect("write to string");
        }
        out
    }
}

/// Cross-entropy of `batch` and its gradients for the trainable tensors.
pub fn loss_and_grads(model: &MoeModel, batch: &[Vec<TokenId>], mask: &ParamMask) -> Result<Gradients> {
    Engine::from_model(model).loss_and_grads(batch, mask, 0.0)
}

/// Train the tensors `mask` marks trainable with Adam on batches drawn
/// uniformly (with replacement) from `corpus`. `eval` sequences, if given,
/// are scored every `eval_every` steps and after the last step.
///
/// On error the model is left unchanged.
pub fn train(
    model: &mut MoeModel,
    corpus: &[Vec<TokenId>],
    eval: &[Vec<TokenId>],
    config: &TrainConfig,
    mask: &ParamMask,
) -> Result<LossCurve> {
    config.validate()?;
    if mask.len() != model.named_tensors().len() {
        return Err(Error::arg("mask does not match the model's tensors"));
    }
    let mut curve = LossCurve::default();
    if config.steps == 0 {
        return Ok(curve);
    }
    if corpus.is_empty() {
        return Err(Error::arg("empty training corpus"));
    }
    let mut engine = Engine::from_model(model);
    let sizes: Vec<usize> = engine.params.iter().map(Vec::len).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut initial = None;
    for step in 0..config.steps {
        let batch: Vec<Vec<TokenId>> =
            (0..config.batch_size).map(|_| corpus[rng.random_range(0..corpus.len())].clone()).collect();
        let g = engine.loss_and_grads(&batch, mask, config.aux_loss_coef)?;
        let loss = g.loss;
        let limit = config.divergence_factor * *initial.get_or_insert(loss);
        if !(loss <= limit) {
            return Err(Error::Diverged { step, loss, limit });
        }
        let lr = config.lr_at(step);
        adam.step(&mut engine.params, &g.grads, lr);
        let last = step + 1 == config.steps;
        let eval_loss = if !eval.is_empty() && (last || (config.eval_every > 0 && step % config.eval_every == 0)) {
            Some(engine.loss(eval, 0.0)?.0)
        } else {
            None
        };
        if step % 50 == 0 || last {
            log::debug!("step {step} lr {lr:.3e} loss {loss:.4} aux {:.2e}", g.aux_loss);
        }
        curve.points.push(LossPoint { step, lr, train_loss: loss, eval_loss });
    }
    engine.write_back(model, mask.flags());
    Ok(curve)
}
