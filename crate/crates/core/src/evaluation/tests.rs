use super::*;
use crate::data::MultivariateSeries;
use crate::model::{DecoderVariant, ModelConfig};
use crate::testutil::sine_bundle;
use crate::training::TrainConfig;

fn shape(lookback: usize, horizon: usize, patch_len: usize) -> WindowShape {
    WindowShape {
        lookback,
        horizon,
        patch_len,
    }
}

/// Unit sine of period 24 whose test split holds exactly `windows`
/// windows of width `width`.
fn sine_test_bundle(width: usize, windows: usize) -> DatasetBundle {
    let test_len = windows + width - 1;
    let t = 10 + test_len;
    let data = (0..t)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 24.0).sin())
        .collect();
    let series = MultivariateSeries::new(Tensor::new(vec![1, t], data).unwrap(), vec!["s".into()]).unwrap();
    DatasetBundle {
        series,
        train: 0..5,
        val: 5..10,
        test: 10..t,
        split_ratio: [0.6, 0.2, 0.2],
    }
}

fn small_model(adjust: impl FnOnce(&mut ModelConfig)) -> TimePerceiver {
    let mut cfg = ModelConfig {
        channels: 2,
        lookback: 8,
        horizon: 4,
        patch_len: 2,
        d_model: 8,
        d_latent: 8,
        num_latents: 2,
        latent_layers: 1,
        n_heads: 2,
        ..ModelConfig::default()
    };
    adjust(&mut cfg);
    TimePerceiver::new(cfg).unwrap()
}

#[test]
fn metric_examples() {
    let a = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
    assert_eq!(metric_mse(&a, &a).unwrap(), 0.0);
    assert_eq!(metric_mae(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v - 2.0);
    assert_eq!(metric_mse(&b, &a).unwrap(), 4.0);
    assert_eq!(metric_mae(&b, &a).unwrap(), 2.0);
    let c = Tensor::from_rows(&[[4.0, -3.0]]).unwrap();
    assert_eq!(metric_mse(&c, &a).unwrap(), 5.0);
    assert_eq!(metric_mae(&c, &a).unwrap(), 2.0);
    assert!(metric_mse(&a, &Tensor::zeros(&[2, 1])).is_err());
}

#[test]
fn oracle_scores_zero() {
    let bundle = sine_bundle(2, 200, 0.1, 0);
    let m = forecast_metrics(&Oracle(shape(24, 12, 12)), &bundle, Split::Test, 1).unwrap();
    assert_eq!((m.mse, m.mae), (0.0, 0.0));
    assert_eq!(m.windows, 40 - 36 + 1);
}

#[test]
fn repeat_last_window_on_periodic_sine() {
    // period-aligned horizon reproduces the future exactly
    let bundle = sine_test_bundle(48, 24);
    let m = forecast_metrics(&RepeatLastWindow(shape(24, 24, 12)), &bundle, Split::Test, 1).unwrap();
    assert!(m.mse < 1e-24);
    // half a period: error is 2 sin, mean of 4 sin^2 over whole periods is 2
    let bundle = sine_test_bundle(36, 24);
    let m = forecast_metrics(&RepeatLastWindow(shape(24, 12, 12)), &bundle, Split::Test, 1).unwrap();
    assert!((m.mse - 2.0).abs() < 1e-12, "{}", m.mse);
}

#[test]
fn last_value_on_periodic_sine() {
    // E[(sin(a + w h) - sin a)^2] = 1 - cos(w h) over whole periods of a;
    // summing cos(pi h / 12) for h = 1..12 gives -1
    let bundle = sine_test_bundle(36, 24);
    let m = forecast_metrics(&LastValue(shape(24, 12, 12)), &bundle, Split::Test, 1).unwrap();
    assert!((m.mse - (1.0 + 1.0 / 12.0)).abs() < 1e-12, "{}", m.mse);
}

#[test]
fn last_value_fills_from_previous_input() {
    let w = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap();
    let s = shape(4, 2, 2);
    let grid = s.grid().unwrap();
    let plan = IndexPlan::from_targets(&grid, vec![0, 2], PlanTag::Imputation).unwrap();
    let pred = LastValue(s).predict(&w, &plan).unwrap();
    // targets at times 0,1 precede every input; 4,5 follow input time 3
    assert_eq!(pred.data(), &[3.0, 3.0, 4.0, 4.0]);
}

#[test]
fn imputation_plans_mask_interior_blocks() {
    let s = shape(96, 48, 12);
    let cfg = ImputationConfig::default();
    let plans = imputation_plans(s, 50, &cfg).unwrap();
    // 144 steps = 6 blocks of 24; 25% rounds to 2 blocks = 4 patches
    for p in &plans {
        assert_eq!(p.target_patches.len(), 4);
        assert!(!p.target_patches.contains(&0) && !p.target_patches.contains(&1));
        assert!(!p.target_patches.contains(&10) && !p.target_patches.contains(&11));
        for pair in p.target_patches.chunks(2) {
            assert_eq!(pair[0] % 2, 0);
            assert_eq!(pair[1], pair[0] + 1);
        }
    }
    assert_eq!(plans, imputation_plans(s, 50, &cfg).unwrap());
    assert!(plans.iter().any(|p| p != &plans[0]));

    let zero = ImputationConfig {
        mask_ratio: 0.0,
        ..cfg
    };
    assert!(matches!(imputation_plans(s, 5, &zero), Err(EvalError::EmptyTarget(_))));
    let bad_len = ImputationConfig {
        mask_patch_len: 18,
        ..cfg
    };
    assert!(matches!(imputation_plans(s, 5, &bad_len), Err(EvalError::Config(_))));
    let too_many = ImputationConfig {
        mask_ratio: 0.9,
        ..cfg
    };
    assert!(matches!(imputation_plans(s, 5, &too_many), Err(EvalError::Config(_))));
}

#[test]
fn imputation_oracle_and_constant_series() {
    let bundle = sine_bundle(2, 240, 0.1, 1);
    let cfg = ImputationConfig {
        mask_patch_len: 4,
        ..ImputationConfig::default()
    };
    let (m, _) = imputation_metrics(&Oracle(shape(8, 4, 2)), &bundle, &cfg).unwrap();
    assert_eq!(m.mse, 0.0);

    let series = MultivariateSeries::new(Tensor::full(&[2, 240], 3.25), vec!["a".into(), "b".into()]).unwrap();
    let constant = crate::data::chronological_split(series, crate::data::RATIO_6_2_2).unwrap();
    let mut model = small_model(|_| {});
    model
        .param_mut("decoder.w_output")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let (m, _) = imputation_metrics(&model, &constant, &cfg).unwrap();
    assert!(m.mse < 1e-24);
}

#[test]
fn imputation_scores_masked_positions_only() {
    let bundle = sine_bundle(2, 240, 0.1, 2);
    let model = small_model(|_| {});
    let cfg = ImputationConfig {
        mask_patch_len: 4,
        stride: 7,
        ..ImputationConfig::default()
    };
    let (base, plans) = imputation_metrics(&model, &bundle, &cfg).unwrap();
    let grid = model.grid();
    let starts = window_starts(bundle.range(Split::Test), Split::Test, 12, 7).unwrap();
    let (mut sq, mut n) = (0.0, 0);
    for (&o, plan) in starts.iter().zip(&plans) {
        let w = bundle.series.slice(o, o + 12);
        let pred = model.predict(&w, plan).unwrap();
        let truth = TimePerceiver::target_values(&w, plan, &grid);
        sq += pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += pred.numel();
    }
    assert!((base.mse - sq / n as f64).abs() < 1e-15);
    assert_eq!(n, starts.len() * 2 * plans[0].target_patches.len() * 2);
}

#[test]
fn forecast_report_is_sorted_and_reproducible() {
    let bundle = sine_bundle(2, 200, 0.1, 3);
    let a = LastValue(shape(8, 4, 2));
    let b = LastValue(shape(4, 4, 2));
    let entries = [
        ModelEntry { seed: 1, forecaster: &a },
        ModelEntry { seed: 0, forecaster: &b },
        ModelEntry { seed: 0, forecaster: &a },
    ];
    let r1 = evaluate_forecast(&entries, &bundle, 1, "fp".into()).unwrap();
    let r2 = evaluate_forecast(&entries, &bundle, 1, "fp".into()).unwrap();
    assert_eq!(r1.payload_json(), r2.payload_json());
    assert_eq!(r1.records.len(), 3);
    assert_eq!(r1.cells.len(), 2);
    assert_eq!((r1.cells[0].lookback, r1.cells[0].seeds), (4, 1));
    assert_eq!((r1.cells[1].lookback, r1.cells[1].seeds), (8, 2));
    assert_eq!((r1.records[1].seed, r1.records[2].seed), (0, 1));
    for r in &r1.records {
        assert!(r.mae <= r.mse.sqrt() + 1e-15);
    }
    let json = r1.to_json();
    let cells = json.find("\"cells\"").unwrap();
    let fp = json.find("\"fingerprint\"").unwrap();
    let meta = json.find("\"metadata\"").unwrap();
    let records = json.find("\"records\"").unwrap();
    assert!(cells < fp && fp < meta && meta < records);
    assert!(!r1.payload_json().contains("wall_clock"));
    assert!(evaluate_forecast(&[], &bundle, 1, String::new()).is_err());
}

#[test]
fn fingerprint_is_stable_hex() {
    let f = fingerprint(&ModelConfig::default());
    assert_eq!(f.len(), 64);
    assert_eq!(f, fingerprint(&ModelConfig::default()));
    assert_ne!(f, fingerprint(&ModelConfig { seed: 1, ..ModelConfig::default() }));
}

#[test]
fn sig9_formatting() {
    assert_eq!(format_sig9(0.0), "0");
    assert_eq!(format_sig9(1.0), "1.00000000");
    assert_eq!(format_sig9(0.123456789123), "0.123456789");
    assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
    assert_eq!(format_sig9(-12.5), "-12.5000000");
}

#[test]
fn attention_export_files() {
    let model = small_model(|c| c.num_latents = 1);
    let bundle = sine_bundle(2, 60, 0.1, 4);
    let window = bundle.series.slice(5, 17);
    let plan = IndexPlan::from_targets(&model.grid(), vec![1, 4], PlanTag::Imputation).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names = bundle.series.channel_names.clone();
    let a = export_attention(&model, &window, 5, &plan, &names, &dir.path().join("a"), "w0").unwrap();
    let b = export_attention(&model, &window, 5, &plan, &names, &dir.path().join("b"), "w0").unwrap();
    assert_eq!(a.files.len(), 3);
    assert_eq!(std::fs::read_dir(dir.path().join("a")).unwrap().count(), 3);
    for (x, y) in a.files.iter().zip(&b.files) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert_eq!(a.encoder.shape(), &[1, 8]);
    assert_eq!(a.decoder.shape(), &[4, 8]);
    for m in [&a.encoder, &a.decoder] {
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert_eq!(a.meta.encoder_cols.len(), a.encoder.cols());
    assert_eq!(a.meta.decoder_rows.len(), a.decoder.rows());
    assert_eq!(a.meta.decoder_cols.len(), a.decoder.cols());
    assert_eq!(a.meta.encoder_cols[0].time_start, 5);
    assert_eq!(a.meta.decoder_rows[1].time_start, 5 + 8);

    let csv = std::fs::read_to_string(&a.files[1]).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&a.files[2]).unwrap()).unwrap();
    assert_eq!(side["plan"]["target_patches"], serde_json::json!([1, 4]));

    let direct = small_model(|c| c.decoder = DecoderVariant::DirectLatent);
    let d = export_attention(&direct, &window, 5, &plan, &names, &dir.path().join("d"), "w0").unwrap();
    assert_eq!(d.decoder.shape(), &[4, 2]);
    assert_eq!(d.meta.decoder_cols, vec!["latent:0", "latent:1"]);
}

#[test]
fn per_head_export_averages_to_the_mean_map() {
    let model = small_model(|_| {});
    let bundle = sine_bundle(2, 60, 0.1, 4);
    let window = bundle.series.slice(5, 17);
    let plan = IndexPlan::standard(&model.grid(), model.config().lookback).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names = bundle.series.channel_names.clone();
    let mean = export_attention(&model, &window, 5, &plan, &names, dir.path(), "w").unwrap();
    let files = export_attention_heads(&model, &window, &plan, dir.path(), "w").unwrap();
    let heads = model.config().n_heads;
    assert_eq!(files.len(), 2 * heads);
    let read = |path: &std::path::Path| -> Vec<Vec<f64>> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    for (side, averaged) in [(0, &mean.encoder), (1, &mean.decoder)] {
        let maps: Vec<_> = files[side * heads..(side + 1) * heads].iter().map(|f| read(f)).collect();
        for r in 0..averaged.rows() {
            for c in 0..averaged.cols() {
                let avg = maps.iter().map(|m| m[r][c]).sum::<f64>() / heads as f64;
                assert!((avg - averaged.at(r, c)).abs() < 1e-8);
            }
        }
    }
    let decoupled = small_model(|c| c.encoder = EncoderVariant::DecoupledSelfAttn);
    assert!(matches!(
        export_attention_heads(&decoupled, &window, &plan, dir.path(), "x"),
        Err(EvalError::Config(_))
    ));
}

#[test]
fn profile_counts_and_exponents() {
    let base = ModelConfig {
        channels: 7,
        patch_len: 1,
        d_model: 8,
        d_latent: 8,
        num_latents: 8,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let variants = [EncoderVariant::LatentBottleneck, EncoderVariant::FullSelfAttn];
    assert!(matches!(
        profile_variants(&base, &variants, &[56, 112]),
        Err(EvalError::GridTooSmall(2))
    ));
    let p = profile_variants(&base, &variants, &[14, 28, 56, 112]).unwrap();
    assert_eq!(p.rows.len(), 8);
    for r in &p.rows {
        let expected = match r.variant {
            EncoderVariant::LatentBottleneck => 2 * 8 * r.tokens as u64 + 3 * 64,
            _ => (r.tokens * r.tokens) as u64,
        };
        assert_eq!(r.score_elements, expected);
        assert!(r.peak_bytes > 0);
    }
    assert!((p.exponents["full_self_attn"] - 2.0).abs() < 1e-12);
    assert!(p.exponents["latent_bottleneck"] < 1.0);
    assert_eq!(fit_exponent(&[1.0, 2.0, 4.0], &[3.0, 6.0, 12.0]), 1.0);
}

#[test]
fn parameter_count_ignores_horizon() {
    let count = |h| {
        TimePerceiver::new(ModelConfig {
            lookback: 96,
            horizon: h,
            patch_len: 12,
            ..ModelConfig::default()
        })
        .unwrap()
        .census()
    };
    let (a, b) = (count(96), count(192));
    assert_eq!(a.decoder, b.decoder);
    assert_eq!(a.encoder, b.encoder);
}

fn tiny_variant(name: &str) -> AblationVariant {
    AblationVariant {
        name: name.into(),
        model: ModelConfig {
            channels: 2,
            lookback: 8,
            horizon: 4,
            patch_len: 2,
            d_model: 8,
            d_latent: 8,
            num_latents: 2,
            latent_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 32,
            window_stride: 3,
            eval_stride: 3,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn ablation_rows_and_isolation() {
    let bundle = sine_bundle(2, 120, 0.1, 5);
    let mut broken = tiny_variant("broken");
    broken.model.d_model = 7;
    let suite = AblationSuite {
        variants: vec![tiny_variant("a"), tiny_variant("a-again"), broken],
        seeds: vec![0, 1],
        protocol: Protocol::Forecast,
        imputation: ImputationConfig::default(),
        eval_stride: 2,
    };
    let r = run_ablation(&suite, &bundle).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows[0].per_seed, r.rows[1].per_seed);
    assert_eq!(r.rows[0].per_seed.len(), 2);
    assert!(r.rows[2].error.as_deref().unwrap().contains("d_model"));
    assert_eq!(r.winner.as_deref(), Some("a"));
    assert!(r.rows[0].best && !r.rows[1].best);

    let single = AblationSuite {
        variants: vec![tiny_variant("only")],
        seeds: vec![3],
        protocol: Protocol::Imputation,
        imputation: ImputationConfig {
            mask_patch_len: 4,
            ..ImputationConfig::default()
        },
        eval_stride: 1,
    };
    let r = run_ablation(&single, &bundle).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].mean_mse.unwrap().is_finite());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn metric_orderings(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let n = p.len();
            let pred = Tensor::new(vec![1, n], p).unwrap();
            let target = Tensor::new(vec![1, n], t).unwrap();
            let mse = metric_mse(&pred, &target).unwrap();
            let mae = metric_mae(&pred, &target).unwrap();
            prop_assert!(mse >= 0.0 && mae >= 0.0);
            prop_assert!(mae <= mse.sqrt() + 1e-12);
            prop_assert_eq!(metric_mse(&pred, &pred).unwrap(), 0.0);
        }

        #[test]
        fn fit_exponent_recovers_power_laws(k in 0.5f64..2.5, scale in 0.1f64..100.0) {
            let xs = [56.0, 112.0, 224.0, 448.0];
            let ys: Vec<f64> = xs.iter().map(|x: &f64| scale * x.powf(k)).collect();
            prop_assert!((fit_exponent(&xs, &ys) - k).abs() < 1e-9);
        }
    }
}
