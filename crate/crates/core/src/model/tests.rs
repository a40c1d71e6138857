use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::formulation::{sample_plan, PlanTag, Strategy as Placement};
use crate::testutil::{max_rel_error, numeric_param_grads, randomize};

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 3,
        lookback: 8,
        horizon: 4,
        patch_len: 2,
        d_model: 8,
        d_latent: 4,
        num_latents: 3,
        latent_layers: 2,
        n_heads: 2,
        ..ModelConfig::default()
    }
}

fn random_window(c: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(vec![c, t], data).unwrap()
}

fn randomized(config: ModelConfig, seed: u64) -> TimePerceiver {
    let mut m = TimePerceiver::new(config).unwrap();
    randomize(m.params_mut(), 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

fn zero_params(model: &mut TimePerceiver, pred: impl Fn(&str) -> bool) {
    for p in model.params_mut().params_mut() {
        if pred(&p.name) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn zero_block_outputs(model: &mut TimePerceiver) {
    zero_params(model, |n| n.ends_with(".wo") || n.ends_with(".w2") || n.ends_with(".b2"));
}

fn plan_with_targets(model: &TimePerceiver, targets: Vec<usize>) -> IndexPlan {
    IndexPlan::from_targets(&model.grid(), targets, PlanTag::Imputation).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().problems().is_empty());
    let bad = ModelConfig {
        lookback: 9,
        d_model: 31,
        ..small_config()
    };
    let p = bad.problems();
    assert_eq!(p.len(), 2, "{p:?}");
    let bad = ModelConfig {
        encoder: EncoderVariant::FullSelfAttn,
        decoder: DecoderVariant::DirectLatent,
        ..small_config()
    };
    assert!(matches!(TimePerceiver::new(bad), Err(ModelError::Config(_))));
    assert!(!ModelConfig {
        num_latents: 0,
        ..small_config()
    }
    .problems()
    .is_empty());
    let k0 = ModelConfig {
        latent_layers: 0,
        ..small_config()
    };
    assert!(k0.problems().is_empty());
}

#[test]
fn unknown_config_keys_rejected() {
    let err = serde_json::from_str::<ModelConfig>(r#"{"d_modle": 8}"#).unwrap_err();
    assert!(err.to_string().contains("d_modle"));
    let c: ModelConfig = serde_json::from_str(r#"{"encoder": "full_self_attn"}"#).unwrap();
    assert_eq!(c.encoder, EncoderVariant::FullSelfAttn);
}

#[test]
fn zero_input_projection_and_cpe_leave_tpe() {
    let mut m = randomized(small_config(), 1);
    zero_params(&mut m, |n| n == "embed.w_input" || n == "embed.channel");
    let plan = plan_with_targets(&m, vec![1, 4]);
    let (_, trace) = m.forward(&random_window(3, 12, 2), &plan).unwrap();
    let tpe = m.params().get(m.params().find("embed.temporal").unwrap()).clone();
    let n_in = plan.input_patches.len();
    for c in 0..3 {
        for (k, &i) in plan.input_patches.iter().enumerate() {
            assert_eq!(trace.h0.row(c * n_in + k), tpe.row(i));
        }
    }
}

#[test]
fn identical_channels_differ_by_cpe_only() {
    let m = randomized(small_config(), 3);
    let mut w = random_window(3, 12, 4);
    let row0 = w.row(0).to_vec();
    w.data_mut()[12..24].copy_from_slice(&row0);
    let plan = IndexPlan::standard(&m.grid(), 8).unwrap();
    let (_, trace) = m.forward(&w, &plan).unwrap();
    let cpe = m.params().get(m.params().find("embed.channel").unwrap());
    for k in 0..4 {
        for d in 0..8 {
            let diff = trace.h0.at(4 + k, d) - trace.h0.at(k, d);
            assert!((diff - (cpe.at(1, d) - cpe.at(0, d))).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_is_equivariant_to_token_permutation() {
    let m = randomized(small_config(), 5);
    let w = random_window(3, 12, 6);
    let plan = plan_with_targets(&m, vec![0, 3]);
    let (_, trace) = m.forward(&w, &plan).unwrap();
    let n = trace.h0.rows();
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted: Vec<f64> = perm.iter().flat_map(|&r| trace.h0.row(r).to_vec()).collect();
    let h0p = Tensor::new(trace.h0.shape().to_vec(), permuted).unwrap();

    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let h0 = tape.constant(h0p);
    let enc = m.encode(&mut tape, &bound, h0, plan.input_patches.len(), &mut Mode::Eval).unwrap();
    let h1p = tape.value(enc.h1.unwrap());
    let h1 = trace.h1.unwrap();
    for (new_r, &old_r) in perm.iter().enumerate() {
        for (a, b) in h1.row(old_r).iter().zip(h1p.row(new_r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let last = tape.value(*enc.latents.last().unwrap());
    assert_close(last, trace.latents.last().unwrap(), 1e-12);
}

#[test]
fn query_construction() {
    let m = randomized(small_config(), 7);
    let plan = plan_with_targets(&m, vec![2, 5]);
    let (_, trace) = m.forward(&random_window(3, 12, 8), &plan).unwrap();
    let s = m.params();
    let cpe = s.get(s.find("embed.channel").unwrap());
    let tpe = s.get(s.find("embed.temporal").unwrap());
    assert_eq!(trace.q0.shape(), &[6, 8]);
    for c in 0..3 {
        for (k, &j) in [2usize, 5].iter().enumerate() {
            for d in 0..8 {
                assert_eq!(trace.q0.at(c * 2 + k, d), cpe.at(c, d) + tpe.at(j, d));
            }
        }
    }

    let mut sep = randomized(
        ModelConfig {
            pe_sharing: PeSharing::Separate,
            ..small_config()
        },
        7,
    );
    zero_params(&mut sep, |n| n.starts_with("query."));
    let (_, trace) = sep.forward(&random_window(3, 12, 8), &plan).unwrap();
    assert!(trace.q0.data().iter().all(|&v| v == 0.0));

    let seven = TimePerceiver::new(ModelConfig {
        channels: 7,
        ..small_config()
    })
    .unwrap();
    let plan = plan_with_targets(&seven, vec![4, 5]);
    let (_, trace) = seven.forward(&random_window(7, 12, 9), &plan).unwrap();
    assert_eq!(trace.q0.rows(), 14);
}

#[test]
fn zeroed_projections_form_identity_chain() {
    let mut m = randomized(small_config(), 10);
    zero_block_outputs(&mut m);
    let plan = IndexPlan::standard(&m.grid(), 8).unwrap();
    let (_, trace) = m.forward(&random_window(3, 12, 11), &plan).unwrap();
    assert_eq!(trace.h1.as_ref().unwrap(), &trace.h0);
    assert_eq!(trace.q1, trace.q0);
    for z in &trace.latents[1..] {
        assert_eq!(z, &trace.latents[0]);
    }

    zero_params(&mut m, |n| n == "decoder.w_output");
    // zero pre-denorm output means the prediction is the per-channel mean
    let (pred, trace) = m.forward(&random_window(3, 12, 11), &plan).unwrap();
    for c in 0..3 {
        assert!(pred.row(c).iter().all(|&v| (v - trace.revin.mu[c]).abs() < 1e-12));
    }
}

#[test]
fn single_latent_single_token_weights() {
    let cfg = ModelConfig {
        num_latents: 1,
        latent_layers: 0,
        decoder: DecoderVariant::DirectLatent,
        ..small_config()
    };
    let m = randomized(cfg, 12);
    let plan = plan_with_targets(&m, vec![1, 5]);
    let (_, trace) = m.forward(&random_window(3, 12, 13), &plan).unwrap();
    assert!(trace.h1.is_none());
    let dec = trace.decoder_attention.mean();
    assert_eq!(dec.shape(), &[6, 1]);
    assert!(dec.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    assert_eq!(trace.latents.len(), 2);

    let cfg = ModelConfig {
        channels: 1,
        lookback: 2,
        horizon: 2,
        encoder: EncoderVariant::FullSelfAttn,
        ..small_config()
    };
    let m = randomized(cfg, 14);
    let plan = IndexPlan::standard(&m.grid(), 2).unwrap();
    let (_, trace) = m.forward(&random_window(1, 4, 15), &plan).unwrap();
    let enc = trace.encoder_attention.unwrap().mean();
    assert_eq!(enc.data(), &[1.0]);
    assert!(trace.decoder_attention.mean().data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
}

#[test]
fn attention_maps_have_expected_shapes_and_rows() {
    let m = randomized(small_config(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let grid = m.grid();
    for strategy in [Placement::Standard, Placement::Contiguous, Placement::Disjoint, Placement::Mixed] {
        let plan = sample_plan(&grid, 8, strategy, &mut rng).unwrap();
        let (pred, trace) = m.forward(&random_window(3, 12, 18), &plan).unwrap();
        let (ni, nj) = (plan.input_patches.len(), plan.target_patches.len());
        assert_eq!(pred.shape(), &[3, nj * 2]);
        let enc = trace.encoder_attention.unwrap();
        let dec = trace.decoder_attention;
        assert_eq!(enc.per_head[0].shape(), &[3, 3 * ni]);
        assert_eq!(dec.per_head[0].shape(), &[3 * nj, 3 * ni]);
        for w in enc.per_head.iter().chain(&dec.per_head) {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

fn count_encoder_scores(cfg: ModelConfig, n_in: usize) -> u64 {
    let m = TimePerceiver::new(cfg).unwrap();
    let grid = m.grid();
    let targets = (n_in..grid.num_patches).collect();
    let plan = IndexPlan::from_targets(&grid, targets, PlanTag::Standard).unwrap();
    let w = random_window(m.config().channels, grid.total(), 19);
    m.forward(&w, &plan).unwrap().1.encoder_score_elements
}

#[test]
fn score_element_counts() {
    let base = ModelConfig {
        channels: 7,
        lookback: 8,
        horizon: 2,
        patch_len: 1,
        num_latents: 16,
        latent_layers: 3,
        ..small_config()
    };
    assert_eq!(count_encoder_scores(base.clone(), 8), 2560);
    let full = ModelConfig {
        encoder: EncoderVariant::FullSelfAttn,
        ..base.clone()
    };
    assert_eq!(count_encoder_scores(full, 8), 3136);
    let decoupled = ModelConfig {
        encoder: EncoderVariant::DecoupledSelfAttn,
        ..base
    };
    assert_eq!(count_encoder_scores(decoupled, 8), 7 * 64 + 8 * 49);
}

#[test]
fn bottleneck_cost_is_linear_full_is_quadratic() {
    let cfg = |encoder| ModelConfig {
        channels: 2,
        lookback: 12,
        horizon: 1,
        patch_len: 1,
        num_latents: 4,
        latent_layers: 2,
        encoder,
        ..small_config()
    };
    let b: Vec<u64> = [4, 8, 12]
        .iter()
        .map(|&n| count_encoder_scores(cfg(EncoderVariant::LatentBottleneck), n))
        .collect();
    // two stages of M per token plus a constant K M^2
    assert_eq!(b[1] - b[0], b[2] - b[1]);
    assert_eq!(b[1] - b[0], 2 * 4 * 2 * 4);
    let f: Vec<u64> = [4, 8, 12]
        .iter()
        .map(|&n| count_encoder_scores(cfg(EncoderVariant::FullSelfAttn), n))
        .collect();
    assert_eq!(f, vec![64, 256, 576]);
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    for (encoder, decoder, pe) in [
        (EncoderVariant::LatentBottleneck, DecoderVariant::QueryCrossattn, PeSharing::Shared),
        (EncoderVariant::LatentBottleneck, DecoderVariant::DirectLatent, PeSharing::Separate),
        (EncoderVariant::DecoupledSelfAttn, DecoderVariant::QueryCrossattn, PeSharing::Shared),
    ] {
        let cfg = ModelConfig {
            channels: 2,
            lookback: 4,
            horizon: 4,
            patch_len: 2,
            d_model: 8,
            d_latent: 8,
            num_latents: 2,
            latent_layers: 1,
            n_heads: 2,
            encoder,
            decoder,
            pe_sharing: pe,
            ..ModelConfig::default()
        };
        let m = randomized(cfg, 20);
        let w = random_window(2, 8, 21);
        let plan = plan_with_targets(&m, vec![0, 2]);
        let target = TimePerceiver::target_values(&w, &plan, &m.grid());

        let loss_of = |store: &ParamStore| {
            let mut probe = m.clone();
            *probe.params_mut() = store.clone();
            let pred = probe.predict(&w, &plan).unwrap();
            pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / pred.numel() as f64
        };
        let numeric = numeric_param_grads(m.params(), &loss_of);

        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let out = m.forward_on_tape(&mut tape, &bound, &w, &plan, &mut Mode::Eval).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse(out.prediction, t).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = m.params().zero_grads();
        bound.accumulate(&tape, &mut grads);
        let err = max_rel_error(&grads, &numeric);
        assert!(err < 1e-3, "{encoder:?}/{decoder:?}: relative error {err}");
    }
}

#[test]
fn forecast_entry_matches_standard_plan_bitwise() {
    let m = randomized(small_config(), 22);
    let w = random_window(3, 12, 23);
    let plan = IndexPlan::standard(&m.grid(), 8).unwrap();
    let a = m.predict(&w, &plan).unwrap();
    let lookback = w.slice_cols(0, 8).unwrap();
    let b = m.forecast(&lookback).unwrap();
    assert_eq!(a.shape(), &[3, 4]);
    assert_eq!(a.data(), b.data());
    assert_eq!(m.forecast(&lookback).unwrap(), b);
    assert!(matches!(m.forecast(&w), Err(ModelError::Stage { stage: "input", .. })));
}

#[test]
fn same_seed_same_model() {
    let a = TimePerceiver::new(small_config()).unwrap();
    let b = TimePerceiver::new(small_config()).unwrap();
    assert_eq!(a.params(), b.params());
    let c = TimePerceiver::new(ModelConfig {
        seed: 1,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn additive_shift_passes_through() {
    let m = randomized(small_config(), 24);
    let w = random_window(3, 12, 25);
    let plan = plan_with_targets(&m, vec![1, 2, 5]);
    let base = m.predict(&w, &plan).unwrap();
    let shifts = [3.5, -120.0, 0.25];
    let mut moved = w.clone();
    for (c, s) in shifts.iter().enumerate() {
        moved.data_mut()[c * 12..(c + 1) * 12].iter_mut().for_each(|v| *v += s);
    }
    let shifted = m.predict(&moved, &plan).unwrap();
    for (c, s) in shifts.iter().enumerate() {
        for (a, b) in base.row(c).iter().zip(shifted.row(c)) {
            assert!((b - a - s).abs() < 1e-7);
        }
    }
}

#[test]
fn channel_permutation_equivariance() {
    let m = randomized(small_config(), 26);
    let perm = [2usize, 0, 1];
    let mut pm = m.clone();
    let id = pm.params().find("embed.channel").unwrap();
    let cpe = m.params().get(id).clone();
    let permuted: Vec<f64> = perm.iter().flat_map(|&c| cpe.row(c).to_vec()).collect();
    *pm.params_mut().get_mut(id) = Tensor::new(cpe.shape().to_vec(), permuted).unwrap();

    let w = random_window(3, 12, 27);
    let wp_data: Vec<f64> = perm.iter().flat_map(|&c| w.row(c).to_vec()).collect();
    let wp = Tensor::new(vec![3, 12], wp_data).unwrap();
    let plan = plan_with_targets(&m, vec![0, 4]);
    let a = m.predict(&w, &plan).unwrap();
    let b = pm.predict(&wp, &plan).unwrap();
    for (new_c, &old_c) in perm.iter().enumerate() {
        for (x, y) in a.row(old_c).iter().zip(b.row(new_c)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn latent_count_does_not_change_interface() {
    let w = random_window(3, 12, 28);
    let plan = IndexPlan::standard(&TimePerceiver::new(small_config()).unwrap().grid(), 8).unwrap();
    for m_lat in [1, 2, 7] {
        let m = TimePerceiver::new(ModelConfig {
            num_latents: m_lat,
            ..small_config()
        })
        .unwrap();
        let (pred, trace) = m.forward(&w, &plan).unwrap();
        assert_eq!(pred.shape(), &[3, 4]);
        assert_eq!(trace.h1.unwrap().shape(), trace.h0.shape());
        assert_eq!(trace.latents[0].shape(), &[m_lat, 4]);
    }
}

#[test]
fn input_columns_outside_plan_are_ignored() {
    let m = randomized(small_config(), 29);
    let w = random_window(3, 12, 30);
    let plan = plan_with_targets(&m, vec![2, 3]);
    let mut leaked = w.clone();
    for c in 0..3 {
        for t in 4..8 {
            leaked.data_mut()[c * 12 + t] = 1e6;
        }
    }
    assert_eq!(m.predict(&w, &plan).unwrap(), m.predict(&leaked, &plan).unwrap());
}

#[test]
fn census_groups_parameters() {
    let m = TimePerceiver::new(small_config()).unwrap();
    let c = m.census();
    assert_eq!(c.total, c.embeddings + c.encoder + c.decoder);
    // embeddings: P x D input projection, N x D temporal, C x D channel
    assert_eq!(c.embeddings, 2 * 8 + 6 * 8 + 3 * 8);
    let direct = TimePerceiver::new(ModelConfig {
        decoder: DecoderVariant::DirectLatent,
        ..small_config()
    })
    .unwrap();
    assert!(direct.census().encoder < c.encoder);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let m = randomized(small_config(), 31);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = TimePerceiver::load(&path).unwrap();
    assert_eq!(back.params(), m.params());
    let w = random_window(3, 12, 32);
    let plan = IndexPlan::standard(&m.grid(), 8).unwrap();
    assert_eq!(m.predict(&w, &plan).unwrap(), back.predict(&w, &plan).unwrap());

    let mut ck = Checkpoint::load(&path).unwrap();
    ck.params[0].shape = vec![1, 1];
    assert!(matches!(ck.to_model(), Err(ModelError::Checkpoint(_))));
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.params.pop();
    assert!(matches!(ck.to_model(), Err(ModelError::Checkpoint(_))));
    std::fs::write(&path, "{}").unwrap();
    assert!(matches!(TimePerceiver::load(&path), Err(ModelError::Checkpoint(_))));
}

#[test]
fn mismatched_window_is_dimension_error() {
    let m = TimePerceiver::new(small_config()).unwrap();
    let plan = IndexPlan::standard(&m.grid(), 8).unwrap();
    let err = m.predict(&random_window(2, 12, 0), &plan).unwrap_err();
    assert!(matches!(err, ModelError::Stage { stage: "input", .. }));
}
