//! Metrics and evaluation protocols: sliding-window forecasting, patch-masked
//! imputation, attention-map export, encoder cost profiling and ablation
//! suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{window_starts, DataError, DatasetBundle, Split};
use crate::formulation::{make_patch_grid, IndexPlan, PatchGrid, PlanError, PlanTag};
use crate::model::{EncoderVariant, ModelConfig, ModelError, TimePerceiver};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::training::{train, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("empty target set: {0}")]
    EmptyTarget(String),
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error("grid too small: exponent fit needs at least 3 token counts, got {0}")]
    GridTooSmall(usize),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_shapes(op: &'static str, pred: &Tensor, target: &Tensor) -> std::result::Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Dimension {
            op,
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn metric_mse(pred: &Tensor, target: &Tensor) -> std::result::Result<f64, TensorError> {
    check_shapes("metric_mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn metric_mae(pred: &Tensor, target: &Tensor) -> std::result::Result<f64, TensorError> {
    check_shapes("metric_mae", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Window geometry a forecaster works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
}

impl WindowShape {
    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(make_patch_grid(self.lookback + self.horizon, self.patch_len)?)
    }
}

/// Anything that fills in the target patches of a plan from its input
/// patches.
pub trait Forecaster {
    fn shape(&self) -> WindowShape;
    /// `C x |J|P` predictions for `plan`, reading only input-patch columns
    /// of the `C x (L + H)` window (the oracle excepted).
    fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor>;
}

impl Forecaster for TimePerceiver {
    fn shape(&self) -> WindowShape {
        let c = self.config();
        WindowShape {
            lookback: c.lookback,
            horizon: c.horizon,
            patch_len: c.patch_len,
        }
    }

    fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor> {
        Ok(TimePerceiver::predict(self, window, plan)?)
    }
}

/// Repeats the nearest earlier observed value; targets before the first
/// observed step take the first observed value.
#[derive(Debug, Clone, Copy)]
pub struct LastValue(pub WindowShape);

impl Forecaster for LastValue {
    fn shape(&self) -> WindowShape {
        self.0
    }

    fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor> {
        let grid = self.0.grid()?;
        let inputs = plan.input_times(&grid);
        let targets = plan.target_times(&grid);
        let mut data = Vec::with_capacity(window.rows() * targets.len());
        for c in 0..window.rows() {
            let row = window.row(c);
            for &t in &targets {
                let src = match inputs.partition_point(|&i| i < t) {
                    0 => inputs[0],
                    k => inputs[k - 1],
                };
                data.push(row[src]);
            }
        }
        Ok(Tensor::new(vec![window.rows(), targets.len()], data)?)
    }
}

/// Replays the last `H` observed steps: `x_hat[t + h] = x[t + h - H]`.
/// Standard plans only, and only when `H <= L`.
#[derive(Debug, Clone, Copy)]
pub struct RepeatLastWindow(pub WindowShape);

impl Forecaster for RepeatLastWindow {
    fn shape(&self) -> WindowShape {
        self.0
    }

    fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor> {
        let WindowShape { lookback, horizon, .. } = self.0;
        let grid = self.0.grid()?;
        if horizon > lookback || *plan != IndexPlan::standard(&grid, lookback)? {
            return Err(EvalError::Config(
                "repeat-last-window needs a standard plan with horizon <= lookback".into(),
            ));
        }
        Ok(window.slice_cols(lookback - horizon, lookback)?)
    }
}

/// Reads the true target values; a test fixture for the protocols.
#[derive(Debug, Clone, Copy)]
pub struct Oracle(pub WindowShape);

impl Forecaster for Oracle {
    fn shape(&self) -> WindowShape {
        self.0
    }

    fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor> {
        Ok(TimePerceiver::target_values(window, plan, &self.0.grid()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

struct Accumulator {
    sq: f64,
    abs: f64,
    n: usize,
    windows: usize,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            sq: 0.0,
            abs: 0.0,
            n: 0,
            windows: 0,
        }
    }

    fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        check_shapes("evaluate", pred, target)?;
        for (a, b) in pred.data().iter().zip(target.data()) {
            self.sq += (a - b) * (a - b);
            self.abs += (a - b).abs();
        }
        self.n += pred.numel();
        self.windows += 1;
        Ok(())
    }

    fn finish(self) -> Metrics {
        Metrics {
            mse: self.sq / self.n as f64,
            mae: self.abs / self.n as f64,
            windows: self.windows,
        }
    }
}

/// Standard-plan forecasting metrics over every window of a split. Windows
/// all have the same size, so the entry mean equals the mean over windows.
pub fn forecast_metrics<F: Forecaster + ?Sized>(
    f: &F,
    bundle: &DatasetBundle,
    split: Split,
    stride: usize,
) -> Result<Metrics> {
    let shape = f.shape();
    let grid = shape.grid()?;
    let plan = IndexPlan::standard(&grid, shape.lookback)?;
    let width = grid.total();
    let mut acc = Accumulator::new();
    for origin in window_starts(bundle.range(split), split, width, stride)? {
        let window = bundle.series.slice(origin, origin + width);
        let pred = f.predict(&window, &plan)?;
        acc.add(&pred, &TimePerceiver::target_values(&window, &plan, &grid))?;
    }
    Ok(acc.finish())
}

/// How test windows are masked for imputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    /// Length of one masked block; a multiple of the model patch length.
    pub mask_patch_len: usize,
    /// Fraction of all blocks that is masked, drawn from interior blocks.
    pub mask_ratio: f64,
    pub seed: u64,
    pub stride: usize,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            mask_patch_len: 24,
            mask_ratio: 0.25,
            seed: 0,
            stride: 1,
        }
    }
}

/// One mask plan per test window, identical for every model evaluated with
/// the same `cfg` and window geometry.
pub fn imputation_plans(shape: WindowShape, windows: usize, cfg: &ImputationConfig) -> Result<Vec<IndexPlan>> {
    let grid = shape.grid()?;
    if cfg.mask_patch_len == 0 || !cfg.mask_patch_len.is_multiple_of(shape.patch_len) {
        return Err(EvalError::Config(format!(
            "mask_patch_len {} is not a multiple of patch_len {}",
            cfg.mask_patch_len, shape.patch_len
        )));
    }
    if grid.total() % cfg.mask_patch_len != 0 {
        return Err(EvalError::Config(format!(
            "window length {} is not a multiple of mask_patch_len {}",
            grid.total(),
            cfg.mask_patch_len
        )));
    }
    if !(0.0..=1.0).contains(&cfg.mask_ratio) {
        return Err(EvalError::Config(format!("mask_ratio {} must lie in [0, 1]", cfg.mask_ratio)));
    }
    let per_block = cfg.mask_patch_len / shape.patch_len;
    let blocks = grid.total() / cfg.mask_patch_len;
    let masked = (cfg.mask_ratio * blocks as f64).round() as usize;
    if masked == 0 {
        return Err(EvalError::EmptyTarget(format!(
            "mask_ratio {} of {blocks} blocks masks nothing",
            cfg.mask_ratio
        )));
    }
    let interior = blocks.saturating_sub(2);
    if masked > interior {
        return Err(EvalError::Config(format!(
            "cannot mask {masked} of {interior} interior blocks while keeping inputs"
        )));
    }
    let mut r = rng::stream(cfg.seed, rng::STREAM_MASK);
    (0..windows)
        .map(|_| {
            let targets = sample(&mut r, interior, masked)
                .into_iter()
                .flat_map(|b| {
                    let first = (b + 1) * per_block;
                    first..first + per_block
                })
                .collect();
            Ok(IndexPlan::from_targets(&grid, targets, PlanTag::Imputation)?)
        })
        .collect()
}

/// Imputation metrics over the test split, on masked positions only.
pub fn imputation_metrics<F: Forecaster + ?Sized>(
    f: &F,
    bundle: &DatasetBundle,
    cfg: &ImputationConfig,
) -> Result<(Metrics, Vec<IndexPlan>)> {
    let shape = f.shape();
    let grid = shape.grid()?;
    let width = grid.total();
    let starts = window_starts(bundle.range(Split::Test), Split::Test, width, cfg.stride)?;
    let plans = imputation_plans(shape, starts.len(), cfg)?;
    let mut acc = Accumulator::new();
    for (&origin, plan) in starts.iter().zip(&plans) {
        let window = bundle.series.slice(origin, origin + width);
        let pred = f.predict(&window, plan)?;
        acc.add(&pred, &TimePerceiver::target_values(&window, plan, &grid))?;
    }
    Ok((acc.finish(), plans))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Forecast,
    Imputation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub lookback: usize,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub lookback: usize,
    pub horizon: usize,
    pub seeds: usize,
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub std_mse: f64,
    pub std_mae: f64,
}

/// Wall-clock and other run-dependent fields, kept apart from the
/// reproducible payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub fingerprint: String,
    pub records: Vec<SeedRecord>,
    pub cells: Vec<CellSummary>,
    /// Digest of the serialized mask plans (imputation only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    pub metadata: RunMetadata,
}

impl EvalReport {
    /// Pretty JSON with object keys sorted.
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }

    /// The report without its metadata section, for reproducibility checks.
    pub fn payload_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plain report");
        v.as_object_mut().expect("object").remove("metadata");
        serde_json::to_string_pretty(&v).expect("plain value")
    }
}

/// Serializes through `serde_json::Value`, whose maps are ordered by key.
pub fn sorted_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable report");
    serde_json::to_string_pretty(&v).expect("plain value")
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(&serde_json::to_value(value).expect("serializable")).expect("plain value");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(records: &[SeedRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(usize, usize), Vec<&SeedRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.lookback, r.horizon)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((lookback, horizon), rs)| {
            let mses: Vec<f64> = rs.iter().map(|r| r.mse).collect();
            let maes: Vec<f64> = rs.iter().map(|r| r.mae).collect();
            let (mean_mse, std_mse) = mean_std(&mses);
            let (mean_mae, std_mae) = mean_std(&maes);
            CellSummary {
                lookback,
                horizon,
                seeds: rs.len(),
                mean_mse,
                mean_mae,
                std_mse,
                std_mae,
            }
        })
        .collect()
}

/// A trained forecaster for one `(L, H)` cell and seed.
pub struct ModelEntry<'a> {
    pub seed: u64,
    pub forecaster: &'a dyn Forecaster,
}

fn sort_records(records: &mut [SeedRecord]) {
    records.sort_by_key(|r| (r.lookback, r.horizon, r.seed));
}

/// Standard forecasting protocol on the test split, one entry per trained
/// model; cells are grouped by each entry's `(L, H)`.
pub fn evaluate_forecast(
    entries: &[ModelEntry<'_>],
    bundle: &DatasetBundle,
    stride: usize,
    fingerprint: String,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(EvalError::Config("no models to evaluate".into()));
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let m = forecast_metrics(e.forecaster, bundle, Split::Test, stride)?;
        let s = e.forecaster.shape();
        records.push(SeedRecord {
            lookback: s.lookback,
            horizon: s.horizon,
            seed: e.seed,
            mse: m.mse,
            mae: m.mae,
            windows: m.windows,
        });
    }
    sort_records(&mut records);
    Ok(EvalReport {
        protocol: Protocol::Forecast,
        fingerprint,
        cells: summarize(&records),
        records,
        plan_digest: None,
        metadata: RunMetadata {
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Patch-masked imputation on the test split.
pub fn evaluate_imputation(
    entries: &[ModelEntry<'_>],
    bundle: &DatasetBundle,
    cfg: &ImputationConfig,
    fingerprint: String,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(EvalError::Config("no models to evaluate".into()));
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(entries.len());
    let mut digests = Vec::new();
    for e in entries {
        let (m, plans) = imputation_metrics(e.forecaster, bundle, cfg)?;
        digests.push(self::fingerprint(&plans));
        let s = e.forecaster.shape();
        records.push(SeedRecord {
            lookback: s.lookback,
            horizon: s.horizon,
            seed: e.seed,
            mse: m.mse,
            mae: m.mae,
            windows: m.windows,
        });
    }
    sort_records(&mut records);
    digests.sort();
    digests.dedup();
    Ok(EvalReport {
        protocol: Protocol::Imputation,
        fingerprint,
        cells: summarize(&records),
        records,
        plan_digest: Some(if digests.len() == 1 {
            digests.remove(0)
        } else {
            self::fingerprint(&digests)
        }),
        metadata: RunMetadata {
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Formats with 9 significant digits in plain decimal notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).clamp(0, 40) as usize;
    format!("{v:.decimals$}")
}

fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| format_sig9(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Axis label for one input or query token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAxis {
    pub channel: String,
    pub patch: usize,
    /// First and last absolute time step of the patch.
    pub time_start: usize,
    pub time_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnMeta {
    pub plan: IndexPlan,
    pub channels: Vec<String>,
    pub window_origin: usize,
    pub patch_len: usize,
    /// Row labels of the encoder map (latent indices or input tokens).
    pub encoder_rows: Vec<String>,
    pub encoder_cols: Vec<TokenAxis>,
    pub decoder_rows: Vec<TokenAxis>,
    /// Input tokens, or latent indices for the direct-latent decoder.
    pub decoder_cols: Vec<String>,
    pub encoder_csv: String,
    pub decoder_csv: String,
}

#[derive(Debug, Clone)]
pub struct AttnExport {
    /// Head-averaged encoder read map.
    pub encoder: Tensor,
    /// Head-averaged decoder map.
    pub decoder: Tensor,
    pub meta: AttnMeta,
    pub files: Vec<PathBuf>,
}

fn token_axes(names: &[String], patches: &[usize], origin: usize, p: usize) -> Vec<TokenAxis> {
    names
        .iter()
        .flat_map(|c| {
            patches.iter().map(move |&i| TokenAxis {
                channel: c.clone(),
                patch: i,
                time_start: origin + i * p,
                time_end: origin + (i + 1) * p - 1,
            })
        })
        .collect()
}

fn token_label(a: &TokenAxis) -> String {
    format!("{}:{}", a.channel, a.patch)
}

/// Writes `<stem>_encoder.csv`, `<stem>_decoder.csv` and `<stem>.json`.
pub fn export_attention(
    model: &TimePerceiver,
    window: &Tensor,
    window_origin: usize,
    plan: &IndexPlan,
    channel_names: &[String],
    out_dir: &Path,
    stem: &str,
) -> Result<AttnExport> {
    if model.config().encoder == EncoderVariant::DecoupledSelfAttn {
        return Err(EvalError::Config(
            "decoupled self-attention has no single encoder map to export".into(),
        ));
    }
    if channel_names.len() != model.config().channels {
        return Err(EvalError::Config(format!(
            "{} channel names for {} channels",
            channel_names.len(),
            model.config().channels
        )));
    }
    let (_, trace) = model.forward(window, plan)?;
    let encoder = trace.encoder_attention.expect("encoder map present").mean();
    let decoder = trace.decoder_attention.mean();
    let p = model.config().patch_len;
    let inputs = token_axes(channel_names, &plan.input_patches, window_origin, p);
    let queries = token_axes(channel_names, &plan.target_patches, window_origin, p);
    let latent_labels = |n: usize| (0..n).map(|k| format!("latent:{k}")).collect::<Vec<_>>();
    let encoder_rows = match model.config().encoder {
        EncoderVariant::LatentBottleneck => latent_labels(encoder.rows()),
        _ => inputs.iter().map(token_label).collect(),
    };
    let decoder_cols = if decoder.cols() == inputs.len() && trace.h1.is_some() {
        inputs.iter().map(token_label).collect()
    } else {
        latent_labels(decoder.cols())
    };
    let enc_name = format!("{stem}_encoder.csv");
    let dec_name = format!("{stem}_decoder.csv");
    let meta = AttnMeta {
        plan: plan.clone(),
        channels: channel_names.to_vec(),
        window_origin,
        patch_len: p,
        encoder_rows,
        encoder_cols: inputs,
        decoder_rows: queries,
        decoder_cols,
        encoder_csv: enc_name.clone(),
        decoder_csv: dec_name.clone(),
    };
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let files = vec![
        out_dir.join(&enc_name),
        out_dir.join(&dec_name),
        out_dir.join(format!("{stem}.json")),
    ];
    let contents = [matrix_csv(&encoder), matrix_csv(&decoder), sorted_json(&meta) + "\n"];
    for (path, text) in files.iter().zip(contents) {
        fs::write(path, text).map_err(|source| EvalError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(AttnExport {
        encoder,
        decoder,
        meta,
        files,
    })
}

/// Writes one CSV per head next to the head-averaged maps:
/// `{stem}_encoder_head{h}.csv` and `{stem}_decoder_head{h}.csv`.
pub fn export_attention_heads(
    model: &TimePerceiver,
    window: &Tensor,
    plan: &IndexPlan,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    if model.config().encoder == EncoderVariant::DecoupledSelfAttn {
        return Err(EvalError::Config(
            "decoupled self-attention has no single encoder map to export".into(),
        ));
    }
    let (_, trace) = model.forward(window, plan)?;
    let encoder = trace.encoder_attention.expect("encoder map present");
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for (side, weights) in [("encoder", &encoder), ("decoder", &trace.decoder_attention)] {
        for (h, m) in weights.per_head.iter().enumerate() {
            let path = out_dir.join(format!("{stem}_{side}_head{h}.csv"));
            fs::write(&path, matrix_csv(m)).map_err(|source| EvalError::Io {
                path: path.clone(),
                source,
            })?;
            files.push(path);
        }
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: EncoderVariant,
    pub tokens: usize,
    pub score_elements: u64,
    pub parameters: usize,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub rows: Vec<CostRow>,
    /// Log-log slope of score elements against token count, per variant.
    pub exponents: BTreeMap<String, f64>,
    /// Seconds per forward pass, per variant and token count.
    pub metadata: BTreeMap<String, f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn variant_name(v: EncoderVariant) -> &'static str {
    match v {
        EncoderVariant::LatentBottleneck => "latent_bottleneck",
        EncoderVariant::FullSelfAttn => "full_self_attn",
        EncoderVariant::DecoupledSelfAttn => "decoupled_self_attn",
    }
}

/// Counts encoder attention-score elements for each variant at each input
/// token count `C * |I|`. Each point uses `base` with the lookback set to
/// `tokens / C` patches and a one-patch horizon.
pub fn profile_variants(base: &ModelConfig, variants: &[EncoderVariant], token_counts: &[usize]) -> Result<CostProfile> {
    if token_counts.len() < 3 {
        return Err(EvalError::GridTooSmall(token_counts.len()));
    }
    let c = base.channels;
    let mut rows = Vec::new();
    let mut exponents = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for &variant in variants {
        let mut counts = Vec::new();
        for &n in token_counts {
            if n == 0 || n % c != 0 {
                return Err(EvalError::Config(format!(
                    "token count {n} is not a positive multiple of {c} channels"
                )));
            }
            let cfg = ModelConfig {
                lookback: n / c * base.patch_len,
                horizon: base.patch_len,
                encoder: variant,
                decoder: crate::model::DecoderVariant::QueryCrossattn,
                ..base.clone()
            };
            let model = TimePerceiver::new(cfg)?;
            let grid = model.grid();
            let plan = IndexPlan::standard(&grid, model.config().lookback)?;
            let data = (0..c * grid.total()).map(|i| ((i as f64) * 0.37).sin()).collect();
            let window = Tensor::new(vec![c, grid.total()], data)?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let start = Instant::now();
            let out = model.forward_on_tape(&mut tape, &bound, &window, &plan, &mut crate::nn::Mode::Eval)?;
            metadata.insert(
                format!("{}/{n}/forward_seconds", variant_name(variant)),
                start.elapsed().as_secs_f64(),
            );
            counts.push(out.encoder_score_elements as f64);
            rows.push(CostRow {
                variant,
                tokens: n,
                score_elements: out.encoder_score_elements,
                parameters: model.num_parameters(),
                peak_bytes: tape.owned_bytes(),
            });
        }
        let xs: Vec<f64> = token_counts.iter().map(|&n| n as f64).collect();
        exponents.insert(variant_name(variant).to_string(), fit_exponent(&xs, &counts));
    }
    Ok(CostProfile {
        rows,
        exponents,
        metadata,
    })
}

/// One arm of an ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSuite {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    #[serde(default)]
    pub imputation: ImputationConfig,
    /// Stride of test windows in the forecast protocol.
    #[serde(default = "one")]
    pub eval_stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<SeedRecord>,
    pub mean_mse: Option<f64>,
    pub mean_mae: Option<f64>,
    /// Lowest mean MSE in the suite.
    pub best: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: Protocol,
    pub rows: Vec<AblationRow>,
    pub winner: Option<String>,
    pub metadata: RunMetadata,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }
}

fn run_variant(v: &AblationVariant, seed: u64, bundle: &DatasetBundle, suite: &AblationSuite) -> std::result::Result<SeedRecord, String> {
    let model_cfg = ModelConfig {
        seed,
        ..v.model.clone()
    };
    let train_cfg = TrainConfig { seed, ..v.train.clone() };
    let model = TimePerceiver::new(model_cfg).map_err(|e| e.to_string())?;
    let outcome = train(model, bundle, &train_cfg).map_err(|e| e.to_string())?;
    let m = match suite.protocol {
        Protocol::Forecast => forecast_metrics(&outcome.best, bundle, Split::Test, suite.eval_stride),
        Protocol::Imputation => imputation_metrics(&outcome.best, bundle, &suite.imputation).map(|(m, _)| m),
    }
    .map_err(|e| e.to_string())?;
    Ok(SeedRecord {
        lookback: v.model.lookback,
        horizon: v.model.horizon,
        seed,
        mse: m.mse,
        mae: m.mae,
        windows: m.windows,
    })
}

/// Trains and evaluates every variant under every seed. A failing variant
/// is reported with its error and does not stop the others.
pub fn run_ablation(suite: &AblationSuite, bundle: &DatasetBundle) -> Result<AblationReport> {
    if suite.variants.is_empty() || suite.seeds.is_empty() {
        return Err(EvalError::Config("ablation suite needs variants and seeds".into()));
    }
    let start = Instant::now();
    let mut rows: Vec<AblationRow> = suite
        .variants
        .iter()
        .map(|v| {
            let results: std::result::Result<Vec<SeedRecord>, String> =
                suite.seeds.iter().map(|&s| run_variant(v, s, bundle, suite)).collect();
            match results {
                Ok(per_seed) => {
                    let mses: Vec<f64> = per_seed.iter().map(|r| r.mse).collect();
                    let maes: Vec<f64> = per_seed.iter().map(|r| r.mae).collect();
                    AblationRow {
                        variant: v.name.clone(),
                        mean_mse: Some(mean_std(&mses).0),
                        mean_mae: Some(mean_std(&maes).0),
                        per_seed,
                        best: false,
                        error: None,
                    }
                }
                Err(e) => AblationRow {
                    variant: v.name.clone(),
                    per_seed: Vec::new(),
                    mean_mse: None,
                    mean_mae: None,
                    best: false,
                    error: Some(e),
                },
            }
        })
        .collect();
    let winner = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mean_mse.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = winner {
        rows[i].best = true;
    }
    Ok(AblationReport {
        protocol: suite.protocol,
        winner: winner.map(|i| rows[i].variant.clone()),
        rows,
        metadata: RunMetadata {
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests;
