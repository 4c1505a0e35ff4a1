mod common;

use std::f64::consts::LN_2;

use common::*;
use moe_condense::condense::{condense_model, prepare_condensed, ExpertPlan, GateFallback};
use moe_condense::data::{generate_corpus, sample_calibration, CorpusKind};
use moe_condense::metrics::{
    corpus_perplexity, js_divergence, kl_divergence, output_divergence, perplexity, ppl_delta_loss, DivergenceKind,
    ProbVector,
};
use moe_condense::model::{collect_all_gate_stats, MoeModel};
use moe_condense::tensor::Tensor;
use proptest::prelude::*;

fn prob_vector() -> impl Strategy<Value = ProbVector> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec((0u8..4, 0.0f64..1.0), n).prop_map(|raw| {
            // roughly a quarter of the entries are exact zeros
            let mut v: Vec<f64> = raw.iter().map(|&(z, x)| if z == 0 { 0.0 } else { x + 1e-3 }).collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
        })
    })
}

fn pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..12).prop_flat_map(|n| {
        let one = move || {
            prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
                let v: Vec<f64> = v.iter().map(|x| x + 1e-3).collect();
                let s: f64 = v.iter().sum();
                ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
            })
        };
        (one(), one())
    })
}

fn kl64(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b.max(1e-12)).ln()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn js_is_symmetric_bounded_and_zero_on_diagonal((u, v) in pair()) {
        let a = js_divergence(&u, &v).unwrap();
        let b = js_divergence(&v, &u).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= 0.0);
        prop_assert!(a <= LN_2 + 1e-6);
        prop_assert_eq!(js_divergence(&u, &u).unwrap(), 0.0);
    }

    #[test]
    fn js_with_zeros_stays_bounded(u in prob_vector(), seed in 0u64..1000) {
        let n = u.len();
        let mut raw: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 13) as f64).collect();
        if raw.iter().all(|&x| x == 0.0) {
            raw[0] = 1.0;
        }
        let s: f64 = raw.iter().sum();
        let v = ProbVector::new(raw.iter().map(|x| x / s).collect()).unwrap();
        let js = js_divergence(&u, &v).unwrap();
        prop_assert!((0.0..=LN_2 + 1e-6).contains(&js));
        prop_assert!(kl_divergence(&u, &v).unwrap() >= -1e-9);
    }

    #[test]
    fn kl_is_gibbs_nonnegative_and_matches_64bit_sum((u, v) in pair()) {
        let kl = kl_divergence(&u, &v).unwrap();
        prop_assert!(kl >= -1e-9);
        prop_assert_eq!(kl_divergence(&u, &u).unwrap(), 0.0);
        prop_assert!((kl - kl64(u.as_slice(), v.as_slice())).abs() < 1e-8);
    }

    #[test]
    fn js_expands_into_two_kl_terms((u, v) in pair()) {
        let m: Vec<f64> = u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect();
        let expect = 0.5 * kl64(u.as_slice(), &m) + 0.5 * kl64(v.as_slice(), &m);
        prop_assert!((js_divergence(&u, &v).unwrap() - expect).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_divergence_ignores_row_shifts(seed in 0u64..10_000, rows in 1usize..5, shift_q in -64i32..64) {
        let mut a = random_tokens(rows, 6, seed);
        let mut b = random_tokens(rows, 6, seed + 1);
        // quantise so that shifting is exact in f32
        for t in [&mut a, &mut b] {
            t.data_mut().iter_mut().for_each(|v| *v = (*v * 64.0).round() / 64.0);
        }
        let base_js = output_divergence(&a, &b, DivergenceKind::Js).unwrap();
        let base_kl = output_divergence(&a, &b, DivergenceKind::Kl).unwrap();
        let c = shift_q as f32 / 8.0;
        let (mut a2, mut b2) = (a.clone(), b.clone());
        for r in 0..rows {
            let row_c = c + r as f32;
            a2.row_mut(r).iter_mut().for_each(|v| *v += row_c);
            b2.row_mut(r).iter_mut().for_each(|v| *v += row_c);
        }
        prop_assert!((output_divergence(&a2, &b2, DivergenceKind::Js).unwrap() - base_js).abs() < 1e-12);
        prop_assert!((output_divergence(&a2, &b2, DivergenceKind::Kl).unwrap() - base_kl).abs() < 1e-12);
    }

    #[test]
    fn perplexity_is_at_least_one(seed in 0u64..1000, len in 2usize..12) {
        let m = random_model(small_config(1), seed);
        let tokens = &random_sequences(1, len, 256, seed + 9)[0];
        prop_assert!(perplexity(tokens, &m).unwrap() >= 1.0 - 1e-9);
    }
}

#[test]
fn output_divergence_cases() {
    let a = random_tokens(3, 5, 1);
    assert_eq!(output_divergence(&a, &a, DivergenceKind::Js).unwrap(), 0.0);
    let r = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
    let c = Tensor::new(vec![1, 2], vec![-1000.0, 1000.0]).unwrap();
    assert!((output_divergence(&r, &c, DivergenceKind::Js).unwrap() - LN_2).abs() < 1e-3);
}

#[test]
fn output_divergence_is_mean_of_row_divergences() {
    let a = random_tokens(4, 7, 2);
    let b = random_tokens(4, 7, 3);
    let want = state_js64(&a, &b);
    assert!((output_divergence(&a, &b, DivergenceKind::Js).unwrap() - want).abs() < 1e-9);
}

/// Zero model that puts logit `z` on `target` after token `tok` (and 0 elsewhere).
fn steered_model(vocab_logits: &[(usize, usize, f32)]) -> MoeModel {
    let mut m = zero_model(small_config(1));
    let d = m.config.hidden_size;
    for &(tok, _, _) in vocab_logits {
        m.token_embedding.row_mut(tok)[tok % d] = 1.0;
    }
    for &(tok, target, logit) in vocab_logits {
        // the normalised one-hot has magnitude 1/√(1/d + ε)
        let scale = (1.0 / d as f64 + NORM_EPS).sqrt();
        let v = m.config.vocab_size;
        m.lm_head.data_mut()[(tok % d) * v + target] = (logit as f64 * scale) as f32;
    }
    m
}

#[test]
fn uniform_predictor_has_vocabulary_perplexity() {
    let m = zero_model(small_config(1));
    let tokens = random_sequences(1, 12, 256, 4).remove(0);
    assert!((perplexity(&tokens, &m).unwrap() - 256.0).abs() < 0.01);
}

#[test]
fn confident_correct_predictor_has_perplexity_near_one() {
    let m = steered_model(&[(3, 9, 60.0)]);
    let ppl = perplexity(&[3, 9], &m).unwrap();
    assert!((ppl - 1.0).abs() < 1e-6, "{ppl}");
}

#[test]
fn perplexity_matches_64bit_recomputation() {
    let m = random_model(small_config(2), 5);
    let tokens = random_sequences(1, 14, 256, 6).remove(0);
    let (nll, n) = nll64(&forward64(&m, &tokens), &tokens);
    let want = (nll / n as f64).exp();
    let got = perplexity(&tokens, &m).unwrap();
    assert!(((got - want) / want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn perplexity_needs_two_tokens() {
    let m = random_model(small_config(1), 7);
    assert!(perplexity(&[4], &m).is_err());
    let corpus = generate_corpus(CorpusKind::Markov, 1, 10).unwrap();
    let cal = sample_calibration(&corpus, 4, 1, 2).unwrap();
    assert!(cal.sequences.iter().all(|s| s.len() == 1));
    assert!(corpus_perplexity(&cal.sequences, &m).is_err());
    assert!(ppl_delta_loss(&m, &m, &cal.sequences).is_err());
}

#[test]
fn ppl_delta_of_identical_models_is_zero() {
    let m = random_model(small_config(2), 8);
    let seqs = random_sequences(3, 8, 256, 9);
    assert_eq!(ppl_delta_loss(&m, &m, &seqs).unwrap(), 0.0);
}

/// One prediction per sequence: PPL = 1 / p(target). The reference is
/// uniform (PPL 256); the candidate is steered to PPL 257 and 259.
#[test]
fn ppl_delta_is_mean_absolute_difference() {
    let reference = zero_model(small_config(1));
    let logit_for = |ppl: f64| {
        // p = e^z / (e^z + 255) = 1/ppl
        (255.0f64 / (ppl - 1.0)).ln() as f32
    };
    let candidate = steered_model(&[(0, 1, logit_for(257.0)), (1, 0, logit_for(259.0))]);
    let seqs = vec![vec![0, 1], vec![1, 0]];
    let a = perplexity(&seqs[0], &candidate).unwrap();
    let b = perplexity(&seqs[1], &candidate).unwrap();
    assert!((a - 257.0).abs() < 1e-3 && (b - 259.0).abs() < 1e-3, "{a} {b}");
    let delta = ppl_delta_loss(&reference, &candidate, &seqs).unwrap();
    assert!((delta - 2.0).abs() < 1e-3, "{delta}");
}

#[test]
fn ppl_delta_with_one_condensed_layer_matches_brute_force() {
    let m = random_model(small_config(3), 10);
    let seqs = random_sequences(5, 10, 256, 11);
    let stats = collect_all_gate_stats(&seqs, &m).unwrap();
    let cands = prepare_condensed(&m, &ExpertPlan { keep: vec![vec![1]; 3] }, &stats, GateFallback::Uniform).unwrap();
    let c = condense_model(&m, &[1], &cands).unwrap();
    let got = ppl_delta_loss(&m, &c, &seqs).unwrap();
    let mut want = 0.0;
    for s in &seqs {
        let (a, n) = nll64(&forward64(&m, s), s);
        let (b, _) = nll64(&forward64(&c, s), s);
        want += ((b / n as f64).exp() - (a / n as f64).exp()).abs();
    }
    want /= seqs.len() as f64;
    assert!(got >= 0.0);
    assert!((got - want).abs() < 1e-3 * want.max(1.0), "{got} vs {want}");
}
