//! Series ingestion, chronological splits and fixed-length windows.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, write_csv};
pub use synth::{synth_generate, ChannelSpec, LagCoupling, SineComponent, SynthSpec};

use std::ops::Range;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },
    #[error("{path}: too few rows ({found} data rows, need at least 2)")]
    TooFewRows { path: PathBuf, found: usize },
    #[error("invalid split ratio {0:?}: fractions must be positive and sum to 1")]
    BadRatio([f64; 3]),
    #[error("split {name} is empty for series length {len} and ratio {ratio:?}")]
    EmptySplit {
        name: &'static str,
        len: usize,
        ratio: [f64; 3],
    },
    #[error("window length L + H = {window} exceeds the {split} split length {len}")]
    WindowTooLong {
        window: usize,
        split: &'static str,
        len: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("invalid series: {0}")]
    Series(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Multivariate series stored channel-major (`C x T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    pub values: Tensor,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    pub frequency_hint: Option<String>,
}

impl MultivariateSeries {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(DataError::Series(format!(
                "values must be C x T, got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(DataError::Series("non-finite value".into()));
        }
        if channel_names.len() != values.rows() {
            return Err(DataError::Series(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.rows()
            )));
        }
        Ok(Self {
            values,
            channel_names,
            timestamps: None,
            frequency_hint: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Columns `[start, end)` as a `C x (end - start)` tensor.
    pub fn slice(&self, start: usize, end: usize) -> Tensor {
        self.values.slice_cols(start, end).expect("slice in range")
    }

    /// Per-channel mean and population std over `range`.
    pub fn channel_stats(&self, range: Range<usize>) -> (Vec<f64>, Vec<f64>) {
        let n = range.len() as f64;
        (0..self.channels())
            .map(|c| {
                let xs = &self.values.row(c)[range.clone()];
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip()
    }

    /// Copy standardized with the given per-channel statistics.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Self {
        let mut out = self.clone();
        let t = self.len();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            let c = i / t;
            *v = (*v - mean[c]) / std[c].max(1e-12);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Standard 6:2:2 split.
pub const RATIO_6_2_2: [f64; 3] = [0.6, 0.2, 0.2];
/// Standard 7:1:2 split.
pub const RATIO_7_1_2: [f64; 3] = [0.7, 0.1, 0.2];

/// Series with chronological train/val/test ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub series: MultivariateSeries,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub split_ratio: [f64; 3],
}

impl DatasetBundle {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Per-channel z-score statistics over the train split.
    pub fn train_stats(&self) -> (Vec<f64>, Vec<f64>) {
        self.series.channel_stats(self.train.clone())
    }
}

/// Splits at `floor(T * cumulative_ratio)` without shuffling.
pub fn chronological_split(series: MultivariateSeries, ratio: [f64; 3]) -> Result<DatasetBundle> {
    let sum: f64 = ratio.iter().sum();
    if ratio.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatio(ratio));
    }
    let t = series.len();
    // the 1e-9 guard keeps e.g. 100 * (0.7 + 0.1) from flooring to 79
    let cut = |frac: f64| ((t as f64 * frac + 1e-9).floor() as usize).min(t);
    let a = cut(ratio[0]);
    let b = cut(ratio[0] + ratio[1]);
    let ranges = [("train", 0..a), ("val", a..b), ("test", b..t)];
    for (name, r) in &ranges {
        if r.is_empty() {
            return Err(DataError::EmptySplit {
                name,
                len: t,
                ratio,
            });
        }
    }
    let [(_, train), (_, val), (_, test)] = ranges;
    Ok(DatasetBundle {
        series,
        train,
        val,
        test,
        split_ratio: ratio,
    })
}

/// `C x (L + H)` slice of a series starting at absolute index `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Tensor,
    pub origin: usize,
}

/// Start offsets of every complete window in `range`.
pub fn window_starts(
    range: Range<usize>,
    split: Split,
    width: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    assert!(stride > 0, "stride must be positive");
    if width > range.len() {
        return Err(DataError::WindowTooLong {
            window: width,
            split: split.name(),
            len: range.len(),
        });
    }
    let count = (range.len() - width) / stride + 1;
    Ok((0..count).map(|i| range.start + i * stride).collect())
}

/// Iterator over windows of width `L + H` in one split.
pub struct WindowIter<'a> {
    series: &'a MultivariateSeries,
    starts: std::vec::IntoIter<usize>,
    width: usize,
}

impl Iterator for WindowIter<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        let origin = self.starts.next()?;
        Some(Window {
            x: self.series.slice(origin, origin + self.width),
            origin,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.starts.size_hint()
    }
}

impl ExactSizeIterator for WindowIter<'_> {}

pub fn iter_windows(
    bundle: &DatasetBundle,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowIter<'_>> {
    let width = lookback + horizon;
    let starts = window_starts(bundle.range(split), split, width, stride)?;
    Ok(WindowIter {
        series: &bundle.series,
        starts: starts.into_iter(),
        width,
    })
}

/// Builds windows on a background thread and hands them over a bounded
/// channel. Windows arrive fully built and in the same order as
/// [`iter_windows`].
pub fn prefetch_windows(
    bundle: &DatasetBundle,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
    capacity: usize,
) -> Result<mpsc::IntoIter<Window>> {
    let width = lookback + horizon;
    let starts = window_starts(bundle.range(split), split, width, stride)?;
    let series = bundle.series.clone();
    let (tx, rx) = mpsc::sync_channel(capacity.max(1));
    thread::spawn(move || {
        for origin in starts {
            let w = Window {
                x: series.slice(origin, origin + width),
                origin,
            };
            if tx.send(w).is_err() {
                break;
            }
        }
    });
    Ok(rx.into_iter())
}
