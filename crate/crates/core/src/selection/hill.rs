//! Heavy-tail exponent of an expert's weight spectrum (Hill estimator).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ExpertMlp;
use crate::tensor::symmetric_eigenvalues_f64;

const HISTOGRAM_BINS: usize = 100;
/// Eigenvalues below this fraction of the largest are treated as zero.
const POSITIVE_REL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaHillScore {
    pub alpha: f64,
    pub k_used: usize,
}

/// Eigenvalues (ascending) of `WᵀW / d` where `W = [w_gate | w_up]` is `d×2f`.
pub fn expert_spectrum(expert: &ExpertMlp) -> Result<Vec<f64>> {
    let d = expert.hidden_size();
    let f = expert.inner_size();
    let cols = 2 * f;
    let w = |i: usize, j: usize| -> f64 {
        if j < f {
            expert.w_gate.data()[i * f + j] as f64
        } else {
            expert.w_up.data()[i * f + j - f] as f64
        }
    };
    let mut gram = vec![0.0f64; cols * cols];
    for a in 0..cols {
        for b in a..cols {
            let s: f64 = (0..d).map(|i| w(i, a) * w(i, b)).sum::<f64>() / d as f64;
            gram[a * cols + b] = s;
            gram[b * cols + a] = s;
        }
    }
    symmetric_eigenvalues_f64(&gram, cols)
}

/// Tail size from the spectral density peak: a 100-bin log-spaced histogram
/// of the eigenvalues; `xmin` is the centre of the fullest bin and `k` the
/// number of eigenvalues above it, clamped to `[2, n-1]`.
pub fn fix_finger_k(sorted_positive: &[f64]) -> Result<usize> {
    let n = sorted_positive.len();
    if n < 3 {
        return Err(Error::DegenerateSpectrum(format!("need at least 3 positive eigenvalues, got {n}")));
    }
    let lo = sorted_positive[0].ln();
    let hi = sorted_positive[n - 1].ln();
    if hi <= lo {
        return Err(Error::DegenerateSpectrum("all eigenvalues are equal".into()));
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &l in sorted_positive {
        let bin = (((l.ln() - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let mut peak = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[peak] {
            peak = i;
        }
    }
    let xmin = (lo + (peak as f64 + 0.5) * width).exp();
    let k = sorted_positive.iter().filter(|&&l| l > xmin).count();
    Ok(k.clamp(2, n - 1))
}

/// `1 + k / Σ_{i=1..k} ln(λ_{n-i+1} / λ_{n-k})` over the positive part of
/// `eigenvalues`. `k` defaults to [`fix_finger_k`].
pub fn hill_alpha(eigenvalues: &[f64], k: Option<usize>) -> Result<AlphaHillScore> {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateSpectrum("no positive eigenvalues".into()));
    }
    let mut pos: Vec<f64> = eigenvalues.iter().copied().filter(|&l| l > max * POSITIVE_REL_TOL).collect();
    pos.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let n = pos.len();
    if n < 2 {
        return Err(Error::DegenerateSpectrum(format!("only {n} positive eigenvalue(s)")));
    }
    let k = match k {
        Some(k) if k == 0 || k >= n => {
            return Err(Error::arg(format!("tail size k={k} must be in 1..{n}")));
        }
        Some(k) => k,
        None => fix_finger_k(&pos)?,
    };
    let anchor = pos[n - k - 1];
    let sum: f64 = pos[n - k..].iter().map(|l| (l / anchor).ln()).sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateSpectrum("tail has no spread above its anchor".into()));
    }
    Ok(AlphaHillScore { alpha: 1.0 + k as f64 / sum, k_used: k })
}

/// Heavy-tail exponent of an expert; lower means heavier-tailed.
pub fn alpha_hill(expert: &ExpertMlp) -> Result<AlphaHillScore> {
    hill_alpha(&expert_spectrum(expert)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Pareto};

    #[test]
    fn closed_form_five_eigenvalues() {
        let e = std::f64::consts::E;
        let s = hill_alpha(&[1.0, 1.0, 1.0, e, e * e], Some(2)).unwrap();
        assert!((s.alpha - (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(s.k_used, 2);
    }

    #[test]
    fn equal_spectrum_is_degenerate() {
        assert!(matches!(hill_alpha(&[2.0; 10], None), Err(Error::DegenerateSpectrum(_))));
        assert!(matches!(hill_alpha(&[2.0; 10], Some(3)), Err(Error::DegenerateSpectrum(_))));
        assert!(matches!(hill_alpha(&[0.0, 0.0, 1.0], None), Err(Error::DegenerateSpectrum(_))));
    }

    #[test]
    fn recovers_sampled_pareto_exponent() {
        // density ∝ λ^{-2} is a Pareto with survival exponent 1
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = Pareto::new(1.0, 1.0).unwrap();
        let eig: Vec<f64> = (0..500).map(|_| dist.sample(&mut rng)).collect();
        let s = hill_alpha(&eig, None).unwrap();
        assert!((s.alpha - 2.0).abs() < 0.3, "alpha = {}", s.alpha);
        assert!(s.k_used >= 2 && s.k_used <= 499);
    }

    #[test]
    fn spectrum_of_zero_expert_is_degenerate() {
        assert!(alpha_hill(&ExpertMlp::zeros(4, 3)).is_err());
    }

    #[test]
    fn spectrum_matches_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = ExpertMlp::random(8, 4, &mut rng);
        let eig = expert_spectrum(&e).unwrap();
        let frob: f64 = e.w_gate.data().iter().chain(e.w_up.data()).map(|&v| (v as f64).powi(2)).sum::<f64>() / 8.0;
        assert!((eig.iter().sum::<f64>() - frob).abs() < 1e-9);
        assert!(alpha_hill(&e).unwrap().alpha > 1.0);
    }
}
