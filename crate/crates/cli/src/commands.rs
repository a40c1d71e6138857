use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use timeperceiver::data::{synth_generate, window_starts, write_csv, DatasetBundle, Split, SynthSpec};
use timeperceiver::evaluation::{
    evaluate_forecast, evaluate_imputation, export_attention, export_attention_heads, fingerprint, imputation_plans, profile_variants,
    run_ablation, sorted_json, AblationSuite, AblationVariant, EvalError, EvalReport, Forecaster, LastValue,
    ModelEntry, Oracle, RepeatLastWindow, WindowShape,
};
use timeperceiver::formulation::{sample_plan, IndexPlan};
use timeperceiver::model::{EncoderVariant, TimePerceiver};
use timeperceiver::rng;
use timeperceiver::training::{load_resume, train_with, TrainError, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT};

use crate::config::{from_value, load_tree, read_json, resolve, variant_configs, Resolved, RunConfig};
use crate::{CliError, Common};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Oracle,
    LastValue,
    RepeatLastWindow,
}

/// What to evaluate: trained checkpoints or a reference predictor.
#[derive(Args, Debug, Clone)]
pub struct Target {
    /// Checkpoint to evaluate; repeat for several seeds or cells.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Evaluate a reference predictor on the configured window geometry.
    #[arg(long, conflicts_with = "checkpoints")]
    baseline: Option<Baseline>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &(sorted_json(value) + "\n"))
}

fn config_origin(common: &Common) -> String {
    common
        .config
        .as_ref()
        .map_or_else(|| "config".to_string(), |p| p.display().to_string())
}

fn resolve_common(common: &Common, need_data: bool) -> Result<Resolved, CliError> {
    let tree = load_tree(common.config.as_deref(), &common.sets)?;
    resolve(tree, &config_origin(common), common.seed, need_data)
}

fn print_dry_run(run: &RunConfig) {
    let _ = writeln!(std::io::stdout(), "{}", sorted_json(run));
}

fn bundle_of(resolved: &Resolved) -> &DatasetBundle {
    resolved.bundle.as_ref().expect("data presence validated")
}

pub fn synth(spec_path: &Path, common: &Common) -> Result<(), CliError> {
    let mut tree = read_json(spec_path)?;
    crate::config::apply_overrides(&mut tree, &common.sets)?;
    let unknown = SynthSpec::unknown_keys(&tree);
    if !unknown.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: unknown keys: {}",
            spec_path.display(),
            unknown.join(", ")
        )));
    }
    if let (Some(seed), Some(obj)) = (common.seed, tree.as_object_mut()) {
        obj.insert("seed".into(), json!(seed));
    }
    let spec: SynthSpec = from_value(tree, &spec_path.display().to_string())?;
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: {}",
            spec_path.display(),
            problems.join("; ")
        )));
    }
    if common.dry_run {
        println!("{}", sorted_json(&spec));
        return Ok(());
    }
    let series = synth_generate(&spec).map_err(runtime)?;
    create_dir(&common.out)?;
    let csv = common.out.join("synth.csv");
    write_csv(&series, &csv).map_err(runtime)?;
    println!("wrote {}", csv.display());
    let manifest = json!({
        "channels": series.channel_names,
        "equations": spec.equations(),
        "frequency": spec.frequency_hint(),
        "length": spec.length,
        "seed": spec.seed,
        "spec": spec,
    });
    write_json(&common.out.join("synth.manifest.json"), &manifest)
}

pub fn train(resume: bool, common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, true)?;
    let run = &resolved.run;
    if common.dry_run {
        print_dry_run(run);
        return Ok(());
    }
    let (model, mut opts) = if resume {
        let last = common.out.join(LAST_CHECKPOINT);
        if !last.exists() {
            return Err(CliError::Validation(format!("cannot resume: {} not found", last.display())));
        }
        load_resume(&common.out).map_err(runtime)?
    } else {
        (TimePerceiver::new(run.model.clone()).map_err(runtime)?, TrainOptions::default())
    };
    create_dir(&common.out)?;
    let history = common.out.join("history.jsonl");
    opts.history_path = Some(history.clone());
    opts.checkpoint_dir = Some(common.out.clone());
    let outcome = train_with(model, bundle_of(&resolved), &run.train, opts).map_err(|e| match e {
        TrainError::Config(m) => CliError::Validation(m),
        other => runtime(other),
    })?;
    write_json(&common.out.join("run_config.json"), run)?;
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
        println!("wrote {}", common.out.join(name).display());
    }
    println!("wrote {}", history.display());
    if let (Some(epoch), Some(mse)) = (outcome.best_epoch, outcome.best_val_mse) {
        println!("best epoch {epoch}: val mse {mse:.6}");
    }
    Ok(())
}

fn window_shape(run: &RunConfig) -> WindowShape {
    WindowShape {
        lookback: run.model.lookback,
        horizon: run.model.horizon,
        patch_len: run.model.patch_len,
    }
}

/// Loaded forecasters with their seeds and a digest of their provenance.
struct Loaded {
    models: Vec<(u64, Box<dyn Forecaster>)>,
    sources: Vec<String>,
}

fn load_target(target: &Target, run: &RunConfig, bundle: &DatasetBundle) -> Result<Loaded, CliError> {
    let shape = window_shape(run);
    if let Some(b) = target.baseline {
        let f: Box<dyn Forecaster> = match b {
            Baseline::Oracle => Box::new(Oracle(shape)),
            Baseline::LastValue => Box::new(LastValue(shape)),
            Baseline::RepeatLastWindow => Box::new(RepeatLastWindow(shape)),
        };
        return Ok(Loaded {
            models: vec![(run.model.seed, f)],
            sources: vec![format!("{b:?}")],
        });
    }
    if target.checkpoints.is_empty() {
        return Err(CliError::Validation("pass --checkpoint or --baseline".into()));
    }
    let mut models = Vec::new();
    let mut sources = Vec::new();
    for path in &target.checkpoints {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("missing checkpoint {}: {e}", path.display())))?;
        let model = TimePerceiver::load(path).map_err(|e| CliError::Validation(e.to_string()))?;
        if model.config().channels != bundle.series.channels() {
            return Err(CliError::Validation(format!(
                "{} expects {} channels, data has {}",
                path.display(),
                model.config().channels,
                bundle.series.channels()
            )));
        }
        sources.push(fingerprint(&text));
        models.push((model.config().seed, Box::new(model) as Box<dyn Forecaster>));
    }
    Ok(Loaded { models, sources })
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Config(_) | EvalError::EmptyTarget(_) | EvalError::GridTooSmall(_) => {
            CliError::Validation(e.to_string())
        }
        other => runtime(other),
    }
}

fn print_cells(report: &EvalReport) {
    for c in &report.cells {
        println!(
            "L={} H={} seeds={} mse={:.6} mae={:.6}",
            c.lookback, c.horizon, c.seeds, c.mean_mse, c.mean_mae
        );
    }
}

pub fn eval(target: &Target, common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, true)?;
    let run = &resolved.run;
    let bundle = bundle_of(&resolved);
    let loaded = load_target(target, run, bundle)?;
    if common.dry_run {
        print_dry_run(run);
        return Ok(());
    }
    let entries: Vec<ModelEntry<'_>> = loaded
        .models
        .iter()
        .map(|(seed, f)| ModelEntry {
            seed: *seed,
            forecaster: f.as_ref(),
        })
        .collect();
    let fp = fingerprint(&json!({"data": run.data, "eval": run.eval, "models": loaded.sources}));
    let report = evaluate_forecast(&entries, bundle, run.eval.stride, fp).map_err(eval_error)?;
    create_dir(&common.out)?;
    write_text(&common.out.join("eval_report.json"), &(report.to_json() + "\n"))?;
    print_cells(&report);
    Ok(())
}

pub fn impute(target: &Target, common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, true)?;
    let run = &resolved.run;
    let bundle = bundle_of(&resolved);
    let loaded = load_target(target, run, bundle)?;
    let shape = loaded.models[0].1.shape();
    let width = shape.lookback + shape.horizon;
    let windows = window_starts(bundle.range(Split::Test), Split::Test, width, run.imputation.stride)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let plans = imputation_plans(shape, windows.len(), &run.imputation).map_err(eval_error)?;
    if common.dry_run {
        print_dry_run(run);
        return Ok(());
    }
    let entries: Vec<ModelEntry<'_>> = loaded
        .models
        .iter()
        .map(|(seed, f)| ModelEntry {
            seed: *seed,
            forecaster: f.as_ref(),
        })
        .collect();
    let fp = fingerprint(&json!({"data": run.data, "imputation": run.imputation, "models": loaded.sources}));
    let report = evaluate_imputation(&entries, bundle, &run.imputation, fp).map_err(eval_error)?;
    create_dir(&common.out)?;
    write_text(&common.out.join("impute_report.json"), &(report.to_json() + "\n"))?;
    let sidecar: Vec<_> = windows
        .iter()
        .zip(&plans)
        .map(|(origin, plan)| json!({"origin": origin, "plan": plan}))
        .collect();
    write_json(&common.out.join("impute_plans.json"), &sidecar)?;
    print_cells(&report);
    Ok(())
}

pub fn ablate(common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, true)?;
    let run = &resolved.run;
    let cfg = &run.ablation;
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(CliError::Validation("ablation needs at least one variant and one seed".into()));
    }
    let mut variants = Vec::with_capacity(cfg.variants.len());
    let mut problems = Vec::new();
    for v in &cfg.variants {
        let (model, train) = variant_configs(run, v)?;
        problems.extend(model.problems().into_iter().map(|p| format!("{}: model: {p}", v.name)));
        problems.extend(train.problems().into_iter().map(|p| format!("{}: train: {p}", v.name)));
        variants.push(AblationVariant {
            name: v.name.clone(),
            model,
            train,
        });
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems.join("\n")));
    }
    let suite = AblationSuite {
        variants,
        seeds: cfg.seeds.clone(),
        protocol: cfg.protocol,
        imputation: run.imputation,
        eval_stride: run.eval.stride,
    };
    if common.dry_run {
        println!("{}", sorted_json(&suite));
        return Ok(());
    }
    let report = run_ablation(&suite, bundle_of(&resolved)).map_err(eval_error)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("ablation_report.json"), &report)?;
    for row in &report.rows {
        match (row.mean_mse, &row.error) {
            (Some(mse), _) => println!(
                "{}: mse={mse:.6} mae={:.6}{}",
                row.variant,
                row.mean_mae.unwrap_or(f64::NAN),
                if row.best { " (best)" } else { "" }
            ),
            (None, Some(e)) => println!("{}: failed: {e}", row.variant),
            (None, None) => {}
        }
    }
    let failed: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.variant.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("variants failed: {}", failed.join(", "))))
    }
}

pub fn attn(checkpoint: &Path, common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, true)?;
    let run = &resolved.run;
    let bundle = bundle_of(&resolved);
    let model = TimePerceiver::load(checkpoint)
        .map_err(|e| CliError::Validation(format!("{}: {e}", checkpoint.display())))?;
    if model.config().channels != bundle.series.channels() {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} channels, data has {}",
            model.config().channels,
            bundle.series.channels()
        )));
    }
    let grid = model.grid();
    let starts = window_starts(bundle.range(Split::Test), Split::Test, grid.total(), 1)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let count = run.attn.windows;
    if model.config().encoder == EncoderVariant::DecoupledSelfAttn {
        return Err(CliError::Validation(
            "decoupled self-attention has no single encoder map to export".into(),
        ));
    }
    if count == 0 || count > starts.len() {
        return Err(CliError::Validation(format!(
            "attn.windows must lie in 1..={}, got {count}",
            starts.len()
        )));
    }
    if common.dry_run {
        print_dry_run(run);
        return Ok(());
    }
    let mut plan_rng = rng::stream(run.train.seed, rng::STREAM_PLAN);
    let dir = common.out.join("attn");
    let gaps = (count - 1).max(1);
    for k in 0..count {
        let origin = starts[k * (starts.len() - 1) / gaps];
        let window = bundle.series.slice(origin, origin + grid.total());
        let plan: IndexPlan =
            sample_plan(&grid, model.config().lookback, run.attn.strategy, &mut plan_rng).map_err(runtime)?;
        let export = export_attention(
            &model,
            &window,
            origin,
            &plan,
            &bundle.series.channel_names,
            &dir,
            &format!("window_{origin}"),
        )
        .map_err(eval_error)?;
        let mut files = export.files;
        if run.attn.per_head {
            files.extend(
                export_attention_heads(&model, &window, &plan, &dir, &format!("window_{origin}")).map_err(eval_error)?,
            );
        }
        for f in &files {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}

pub fn profile(common: &Common) -> Result<(), CliError> {
    let resolved = resolve_common(common, false)?;
    let run = &resolved.run;
    let p = &run.profile;
    if p.token_counts.len() < 3 {
        return Err(CliError::Validation(format!(
            "grid too small: profile.token_counts needs at least 3 points, got {}",
            p.token_counts.len()
        )));
    }
    if common.dry_run {
        print_dry_run(run);
        return Ok(());
    }
    let report = profile_variants(&run.model, &p.variants, &p.token_counts).map_err(eval_error)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("profile.json"), &report)?;
    for (variant, exp) in &report.exponents {
        println!("{variant}: exponent {exp:.3}");
    }
    Ok(())
}
