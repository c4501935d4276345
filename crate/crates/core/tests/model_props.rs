mod common;

use common::{grad_configs, tiny_batch, tiny_enc_cfg, tiny_model_cfg};
use segpos::corpus::PAD;
use segpos::inference::{beam_search, default_max_len, greedy, DecodeConfig};
use segpos::model::{Mode, Model, ParamStore};
use segpos::objective::LossConfig;
use segpos::tape::Gradients;

fn max_diff(a: &Gradients, b: &Gradients, params: &ParamStore, scale_b: f64) -> f64 {
    params
        .ids()
        .map(|id| match (a.get(id), b.get(id)) {
            (Some(x), Some(y)) => x
                .iter()
                .zip(y.iter())
                .fold(0.0f64, |m, (p, q)| m.max((p - scale_b * q).abs())),
            (Some(x), None) | (None, Some(x)) => x.iter().fold(0.0f64, |m, p| m.max(p.abs())),
            (None, None) => 0.0,
        })
        .fold(0.0, f64::max)
}

#[test]
fn zero_discount_equals_masking_context_targets() {
    for (i, (scheme, persistent, pse)) in grad_configs().into_iter().enumerate() {
        let enc = tiny_enc_cfg(scheme, persistent, pse);
        let model = Model::new(tiny_model_cfg(2), enc.clone(), 40 + i as u64).unwrap();
        let batch = tiny_batch(&enc);
        let cd0 = LossConfig {
            cd: 0.0,
            label_smoothing: 0.1,
        };
        let full = LossConfig {
            cd: 1.0,
            label_smoothing: 0.1,
        };
        let masked: Vec<_> = batch
            .iter()
            .cloned()
            .map(|mut w| {
                w.tgt_out[..w.current_start].fill(PAD);
                w
            })
            .collect();
        let a = model.grad(&batch, &cd0, Mode::Eval).unwrap();
        let b = model.grad(&masked, &full, Mode::Eval).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-10, "{scheme:?}: {} vs {}", a.loss, b.loss);
        let d = max_diff(&a.grads, &b.grads, &model.params, 1.0);
        assert!(d < 1e-12, "{scheme:?} persistent={persistent} pse={pse}: {d:e}");
    }
}

#[test]
fn scaled_loss_scales_gradient() {
    let enc = tiny_enc_cfg(segpos::encodings::Scheme::Learned, true, false);
    let model = Model::new(tiny_model_cfg(2), enc.clone(), 9).unwrap();
    let batch = tiny_batch(&enc);
    let loss = LossConfig::default();
    let one = model.grad(&batch, &loss, Mode::Eval).unwrap();
    let two = model.grad_scaled(&batch, &loss, Mode::Eval, 2.0).unwrap();
    assert!((two.loss - 2.0 * one.loss).abs() < 1e-10);
    assert!(max_diff(&two.grads, &one.grads, &model.params, 2.0) < 1e-12);
}

// Not a theorem for beam search in general; a seeded regression check.
#[test]
fn wider_beams_do_not_lower_the_raw_score_on_seeded_inputs() {
    let mut cases = 0;
    for seed in 0..6u64 {
        let enc = tiny_enc_cfg(segpos::encodings::Scheme::Sin, false, false);
        let model = Model::new(tiny_model_cfg(1), enc.clone(), seed).unwrap();
        for w in tiny_batch(&enc) {
            let max_len = default_max_len(w.src.tokens.len()).min(20);
            let scores: Vec<f64> = [1, 2, 4, 8]
                .into_iter()
                .map(|beam| {
                    beam_search(&model, &w.src, w.k_eff, DecodeConfig { beam, alpha: 0.0 }, max_len)
                        .unwrap()
                        .score
                })
                .collect();
            let g = greedy(&model, &w.src, w.k_eff, max_len).unwrap();
            assert!((scores[0] - g.score).abs() < 1e-12);
            assert!(
                scores.windows(2).all(|p| p[1] >= p[0] - 1e-12),
                "seed {seed}: {scores:?}"
            );
            cases += 1;
        }
    }
    assert_eq!(cases, 18);
}
