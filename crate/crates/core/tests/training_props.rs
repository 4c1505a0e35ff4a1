mod common;

use common::*;
use moe_condense::condense::{condense_model, prepare_condensed, ExpertPlan, GateFallback};
use moe_condense::model::{collect_all_gate_stats, MoeModel};
use moe_condense::training::{loss_and_grads, train, Engine, ParamMask, TrainConfig};
use proptest::prelude::*;

fn bits(m: &MoeModel) -> Vec<Vec<u32>> {
    m.named_tensors().iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

/// Two-block model with block 1 condensed to experts {0, 2}.
fn condensed_model(seed: u64) -> MoeModel {
    let m = random_model(small_config(2), seed);
    let cal = random_sequences(8, 12, 256, seed + 1);
    let stats = collect_all_gate_stats(&cal, &m).unwrap();
    let cands =
        prepare_condensed(&m, &ExpertPlan { keep: vec![vec![0, 2]; 2] }, &stats, GateFallback::Uniform).unwrap();
    condense_model(&m, &[1], &cands).unwrap()
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, steps, batch_size: 4, seed, ..TrainConfig::default() }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let m = zero_model(small_config(2));
    let batch = random_sequences(3, 9, 256, 1);
    let g = loss_and_grads(&m, &batch, &ParamMask::all(&m)).unwrap();
    assert!((g.loss - 256f64.ln()).abs() < 1e-3, "{}", g.loss);
}

#[test]
fn confident_correct_model_has_zero_loss_and_gradients() {
    let mut m = zero_model(small_config(1));
    let d = m.config.hidden_size;
    m.token_embedding.row_mut(3)[0] = 1.0;
    // the normalised one-hot has magnitude 1/√(1/d + ε)
    let scale = (1.0 / d as f64 + NORM_EPS).sqrt();
    m.lm_head.data_mut()[9] = (60.0 * scale) as f32;
    let g = loss_and_grads(&m, &[vec![3, 9]], &ParamMask::all(&m)).unwrap();
    assert!(g.loss < 1e-20, "{}", g.loss);
    for (name, grad) in Engine::from_model(&m).names().iter().zip(&g.grads) {
        let worst = grad.as_ref().unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-20, "{name}: {worst}");
    }
}

#[test]
fn masked_tensors_get_no_gradient() {
    let m = condensed_model(2);
    let mask = ParamMask::sft(&m, false);
    let g = loss_and_grads(&m, &random_sequences(2, 8, 256, 3), &mask).unwrap();
    for (flag, grad) in mask.flags().iter().zip(&g.grads) {
        assert_eq!(*flag, grad.is_some());
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let mut m = random_model(small_config(2), 4);
    let before = bits(&m);
    let mask = ParamMask::all(&m);
    let curve = train(&mut m, &random_sequences(4, 8, 256, 5), &[], &quick(0, 1), &mask).unwrap();
    assert!(curve.points.is_empty());
    assert_eq!(bits(&m), before);
}

#[test]
fn fully_frozen_training_changes_nothing() {
    let mut m = random_model(small_config(2), 6);
    let before = bits(&m);
    let corpus = random_sequences(1, 10, 256, 7);
    let mask = ParamMask::none(&m);
    let curve = train(&mut m, &corpus, &[], &quick(20, 2), &mask).unwrap();
    assert_eq!(bits(&m), before);
    // one document, so every batch is the same and the loss cannot move
    let first = curve.points[0].train_loss;
    assert!(curve.points.iter().all(|p| p.train_loss == first));
}

#[test]
fn sft_improves_eval_loss_and_keeps_frozen_tensors() {
    let mut m = condensed_model(8);
    let before = m.clone();
    let corpus = random_sequences(16, 12, 256, 9);
    let mask = ParamMask::sft(&m, true);
    let config = TrainConfig {
        learning_rate: 1e-3,
        steps: 200,
        batch_size: 4,
        seed: 3,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let curve = train(&mut m, &corpus, &corpus[..4], &config, &mask).unwrap();
    let evals: Vec<f64> = curve.points.iter().filter_map(|p| p.eval_loss).collect();
    assert!(evals.last().unwrap() < evals.first().unwrap(), "{evals:?}");
    let mut changed = 0;
    for (((name, a), (_, b)), &flag) in before.named_tensors().iter().zip(m.named_tensors()).zip(mask.flags()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if flag {
            changed += !same as usize;
        } else {
            assert!(same, "{name} moved while frozen");
        }
    }
    assert!(changed > 0);
}

#[test]
fn sft_trainable_fraction_is_analytic() {
    let m = condensed_model(10);
    let c = &m.config;
    let (d, f, v) = (c.hidden_size as u64, c.expert_inner as u64, c.vocab_size as u64);
    let expert = 3 * d * f;
    let (n, s, kept) = (c.num_routing_experts as u64, c.num_shared_experts as u64, 2u64);
    let attention = 4 * d * d;
    let routed_block = 2 * d + attention + n * d + (n + s) * expert;
    let condensed_moe = (kept + s) * expert + kept;
    let condensed_block = 2 * d + attention + condensed_moe;
    let total = v * d + c.max_seq_len as u64 * d + routed_block + condensed_block + d + d * v;
    assert_eq!(ParamMask::sft(&m, true).parameter_counts(&m), (condensed_moe, total));
    assert_eq!(ParamMask::sft(&m, false).parameter_counts(&m), (condensed_moe - kept, total));
    assert_eq!(ParamMask::all(&m).parameter_counts(&m), (total, total));
}

#[test]
fn sft_mask_selects_only_condensed_tensors() {
    let m = condensed_model(11);
    let mask = ParamMask::sft(&m, true);
    for (name, &flag) in mask.names.iter().zip(mask.flags()) {
        assert_eq!(flag, name.starts_with("blocks.1.moe."), "{name}");
    }
    let frozen_gates = ParamMask::sft(&m, false);
    assert!(!frozen_gates.is_trainable("blocks.1.moe.fixed_gates"));
    assert!(frozen_gates.is_trainable("blocks.1.moe.kept.0.w_up"));
}

#[test]
fn gradients_match_finite_differences_on_two_blocks() {
    let batch = random_sequences(2, 7, 256, 12);
    for (model, aux) in
        [(random_model(small_config(2), 13), 0.0), (random_model(small_config(2), 14), 0.3), (condensed_model(15), 0.0)]
    {
        let r = finite_difference_check(&model, &batch, aux, 20, 16);
        assert!(r.checked > r.skipped * 4, "{} checked, {} skipped", r.checked, r.skipped);
        assert!(r.worst < 1e-2, "{}: {}", r.worst, r.worst_at);
    }
}

#[test]
fn training_rejects_invalid_configs() {
    let mut m = random_model(small_config(1), 17);
    let corpus = random_sequences(2, 8, 256, 18);
    let mask = ParamMask::all(&m);
    for bad in [TrainConfig { learning_rate: 0.0, ..quick(1, 0) }, TrainConfig { warmup_ratio: 1.0, ..quick(1, 0) }] {
        assert!(train(&mut m, &corpus, &[], &bad, &mask).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_is_deterministic(seed in 0u64..1000) {
        let corpus = random_sequences(6, 10, 256, seed);
        let mut a = random_model(small_config(2), seed);
        let mut b = a.clone();
        let mask = ParamMask::all(&a);
        let ca = train(&mut a, &corpus, &[], &quick(5, seed), &mask).unwrap();
        let cb = train(&mut b, &corpus, &[], &quick(5, seed), &mask).unwrap();
        prop_assert_eq!(ca, cb);
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn schedule_warms_up_then_decays(steps in 1usize..500, warmup in 0.0f64..0.9) {
        let c = TrainConfig { steps, warmup_ratio: warmup, learning_rate: 1e-3, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..steps).map(|s| c.lr_at(s)).collect();
        prop_assert!(lrs.iter().all(|&lr| (0.0..=1e-3 + 1e-15).contains(&lr)));
        let w = c.warmup_steps();
        prop_assert!(lrs[..w.min(steps)].windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(lrs[w.min(steps)..].windows(2).all(|p| p[0] >= p[1]));
    }
}
