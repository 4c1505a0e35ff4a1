//! Divergences and perplexity, all in nats and accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeModel, TokenId};
use crate::tensor::Tensor;

/// Floor applied to `v_j` in KL when `u_j > 0` and `v_j = 0`.
pub const KL_EPS: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-6;

/// A discrete probability distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("empty distribution"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("distribution has negative or non-finite entries"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::arg(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// Softmax of a logit row.
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::shape("empty distribution"));
        }
        let mut p = vec![0.0; logits.len()];
        softmax_f64(logits, &mut p);
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Js,
    Kl,
}

pub fn kl_divergence(u: &ProbVector, v: &ProbVector) -> Result<f64> {
    check_len(u, v)?;
    Ok(kl_raw(&u.0, &v.0))
}

pub fn js_divergence(u: &ProbVector, v: &ProbVector) -> Result<f64> {
    check_len(u, v)?;
    Ok(js_raw(&u.0, &v.0))
}

fn check_len(u: &ProbVector, v: &ProbVector) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("distributions differ in length: {} vs {}", u.len(), v.len())));
    }
    Ok(())
}

pub(crate) fn kl_raw(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).filter(|(&uj, _)| uj > 0.0).map(|(&uj, &vj)| uj * (uj / vj.max(KL_EPS)).ln()).sum()
}

pub(crate) fn js_raw(u: &[f64], v: &[f64]) -> f64 {
    let mut a = 0.0;
    let mut b = 0.0;
    for (&uj, &vj) in u.iter().zip(v) {
        let m = 0.5 * (uj + vj);
        if uj > 0.0 {
            a += uj * (uj / m).ln();
        }
        if vj > 0.0 {
            b += vj * (vj / m).ln();
        }
    }
    0.5 * (a + b)
}

pub(crate) fn softmax_f64(x: &[f32], out: &mut [f64]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v as f64 - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-softmaxed reference states, computed once and compared against many candidates.
#[derive(Clone, Debug)]
pub struct PreparedReference {
    cols: usize,
    probs: Vec<f64>,
}

impl PreparedReference {
    pub fn new(reference: &Tensor) -> Self {
        let cols = reference.cols();
        let mut probs = vec![0.0; reference.numel()];
        for r in 0..reference.rows() {
            softmax_f64(reference.row(r), &mut probs[r * cols..(r + 1) * cols]);
        }
        Self { cols, probs }
    }

    /// Concatenate several `T_i×n` matrices into one reference.
    pub fn from_parts<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut cols = 0;
        let mut probs = Vec::new();
        for t in parts {
            cols = t.cols();
            let start = probs.len();
            probs.resize(start + t.numel(), 0.0);
            for r in 0..t.rows() {
                softmax_f64(t.row(r), &mut probs[start + r * cols..start + (r + 1) * cols]);
            }
        }
        Self { cols, probs }
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.probs.len() / self.cols
        }
    }

    /// Summed per-row divergence of `candidate` rows against reference rows
    /// starting at `row_offset`.
    pub fn divergence_sum(&self, candidate: &[f32], row_offset: usize, kind: DivergenceKind) -> f64 {
        let c = self.cols;
        let mut q = vec![0.0; c];
        let mut total = 0.0;
        for (r, row) in candidate.chunks_exact(c).enumerate() {
            softmax_f64(row, &mut q);
            let p = &self.probs[(row_offset + r) * c..(row_offset + r + 1) * c];
            total += match kind {
                DivergenceKind::Js => js_raw(p, &q),
                DivergenceKind::Kl => kl_raw(p, &q),
            };
        }
        total
    }
}

impl PreparedReference {
    /// JS and KL sums in one pass over the candidate rows.
    pub(crate) fn js_kl_sums(&self, candidate: &[f32], row_offset: usize) -> (f64, f64) {
        let c = self.cols;
        let mut q = vec![0.0; c];
        let (mut js, mut kl) = (0.0, 0.0);
        for (r, row) in candidate.chunks_exact(c).enumerate() {
            softmax_f64(row, &mut q);
            let p = &self.probs[(row_offset + r) * c..(row_offset + r + 1) * c];
            js += js_raw(p, &q);
            kl += kl_raw(p, &q);
        }
        (js, kl)
    }
}

/// Mean over rows of `D(softmax(ref_row), softmax(cand_row))`.
pub fn output_divergence(reference: &Tensor, candidate: &Tensor, kind: DivergenceKind) -> Result<f64> {
    if reference.shape() != candidate.shape() {
        return Err(Error::shape(format!("state shapes differ: {:?} vs {:?}", reference.shape(), candidate.shape())));
    }
    if reference.rows() == 0 || reference.cols() == 0 {
        return Err(Error::shape("need at least one row"));
    }
    let prepared = PreparedReference::new(reference);
    Ok(prepared.divergence_sum(candidate.data(), 0, kind) / reference.rows() as f64)
}

/// Summed next-token negative log-likelihood and the number of predictions.
pub fn sequence_nll(logits: &Tensor, tokens: &[TokenId]) -> (f64, usize) {
    let v = logits.cols();
    let mut total = 0.0;
    for p in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(p);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
        let target = tokens[p + 1] as usize;
        debug_assert!(target < v);
        total += lse - row[target] as f64;
    }
    (total, tokens.len().saturating_sub(1))
}

/// `exp(mean next-token cross-entropy)` of one sequence.
pub fn perplexity(tokens: &[TokenId], model: &MoeModel) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::arg("perplexity needs at least two tokens"));
    }
    let logits = model.forward(tokens)?;
    let (nll, n) = sequence_nll(&logits, tokens);
    Ok((nll / n as f64).exp())
}

/// Token-weighted perplexity over a set of sequences.
pub fn corpus_perplexity(sequences: &[Vec<TokenId>], model: &MoeModel) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0;
    for seq in sequences {
        if seq.len() < 2 {
            return Err(Error::arg("perplexity needs at least two tokens"));
        }
        let (s, c) = sequence_nll(&model.forward(seq)?, seq);
        nll += s;
        n += c;
    }
    if n == 0 {
        return Err(Error::arg("no sequences to evaluate"));
    }
    Ok((nll / n as f64).exp())
}

/// Mean over calibration samples of `|PPL_cand − PPL_ref|`.
pub fn ppl_delta_loss(reference: &MoeModel, candidate: &MoeModel, calibration: &[Vec<TokenId>]) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    let mut total = 0.0;
    for seq in calibration {
        total += (perplexity(seq, candidate)? - perplexity(seq, reference)?).abs();
    }
    Ok(total / calibration.len() as f64)
}
