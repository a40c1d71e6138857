use chrono::{Duration, NaiveDateTime};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, MultivariateSeries, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_START: &str = "2020-01-01 00:00:00";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineComponent {
    pub period: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// `gain * x_source(t - lag)` added to the channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagCoupling {
    pub source: usize,
    pub lag: usize,
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub sines: Vec<SineComponent>,
    /// Linear trend slope per step.
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub lag: Option<LagCoupling>,
}

/// Generator description. Channel `c` follows
///
/// `x_c(t) = offset + trend * t + sum_k a_k sin(2 pi t / p_k + phi_k)
///           + gain * x_src(t - lag) + eps_c(t)`,  `eps_c(t) ~ N(0, noise_std^2)`
///
/// where the coupling term is present only when `lag` is set and the
/// source channel is itself uncoupled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start: Option<String>,
    #[serde(default = "default_freq")]
    pub freq_minutes: u64,
    pub channels: Vec<ChannelSpec>,
}

fn default_freq() -> u64 {
    60
}

const SPEC_KEYS: &[&str] = &["length", "seed", "start", "freq_minutes", "channels"];
const CHANNEL_KEYS: &[&str] = &["name", "sines", "trend", "offset", "noise_std", "lag"];
const SINE_KEYS: &[&str] = &["period", "amplitude", "phase"];
const LAG_KEYS: &[&str] = &["source", "lag", "gain"];

fn unknown_in(v: &serde_json::Value, known: &[&str], path: &str, out: &mut Vec<String>) {
    if let Some(map) = v.as_object() {
        for k in map.keys() {
            if !known.contains(&k.as_str()) {
                out.push(format!("{path}{k}"));
            }
        }
    }
}

impl SynthSpec {
    /// Every key in `value` that is not part of the schema, as dotted paths.
    pub fn unknown_keys(value: &serde_json::Value) -> Vec<String> {
        let mut out = Vec::new();
        unknown_in(value, SPEC_KEYS, "", &mut out);
        if let Some(chs) = value.get("channels").and_then(|c| c.as_array()) {
            for (i, ch) in chs.iter().enumerate() {
                let p = format!("channels.{i}.");
                unknown_in(ch, CHANNEL_KEYS, &p, &mut out);
                if let Some(sines) = ch.get("sines").and_then(|s| s.as_array()) {
                    for (j, s) in sines.iter().enumerate() {
                        unknown_in(s, SINE_KEYS, &format!("{p}sines.{j}."), &mut out);
                    }
                }
                if let Some(lag) = ch.get("lag") {
                    unknown_in(lag, LAG_KEYS, &format!("{p}lag."), &mut out);
                }
            }
        }
        out
    }

    /// All validation problems, empty when the description is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.length < 1 {
            out.push(format!("length must be >= 1, got {}", self.length));
        }
        if self.channels.is_empty() {
            out.push("at least one channel is required".into());
        }
        if self.freq_minutes == 0 {
            out.push("freq_minutes must be positive".into());
        }
        if let Some(s) = &self.start {
            if NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).is_err() {
                out.push(format!("start {s:?} is not of the form {DEFAULT_START:?}"));
            }
        }
        for (c, ch) in self.channels.iter().enumerate() {
            for (k, s) in ch.sines.iter().enumerate() {
                if s.period.is_nan() || s.period <= 0.0 {
                    out.push(format!("channels.{c}.sines.{k}.period must be positive"));
                }
            }
            if ch.noise_std.is_nan() || ch.noise_std < 0.0 {
                out.push(format!("channels.{c}.noise_std must be >= 0"));
            }
            if let Some(l) = &ch.lag {
                match self.channels.get(l.source) {
                    None => out.push(format!("channels.{c}.lag.source {} out of range", l.source)),
                    Some(src) if src.lag.is_some() => out.push(format!(
                        "channels.{c}.lag.source {} is itself coupled",
                        l.source
                    )),
                    _ => {}
                }
            }
        }
        out
    }

    pub fn frequency_hint(&self) -> String {
        if self.freq_minutes.is_multiple_of(60) {
            format!("{}h", self.freq_minutes / 60)
        } else {
            format!("{}m", self.freq_minutes)
        }
    }

    /// Human-readable generative equation per channel.
    pub fn equations(&self) -> Vec<String> {
        self.channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let mut terms = vec![format!("{}", ch.offset)];
                if ch.trend != 0.0 {
                    terms.push(format!("{} * t", ch.trend));
                }
                for s in &ch.sines {
                    terms.push(format!(
                        "{} * sin(2 * pi * t / {} + {})",
                        s.amplitude, s.period, s.phase
                    ));
                }
                if let Some(l) = &ch.lag {
                    terms.push(format!("{} * x{}(t - {})", l.gain, l.source, l.lag));
                }
                if ch.noise_std > 0.0 {
                    terms.push(format!("N(0, {}^2)", ch.noise_std));
                }
                format!("x{c}(t) = {}", terms.join(" + "))
            })
            .collect()
    }
}

/// Deterministic under `spec.seed`; noise is drawn channel by channel from
/// the synthesis stream derived from the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<MultivariateSeries> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(DataError::Synth(problems.join("; ")));
    }
    let t_len = spec.length;
    let max_lag = spec
        .channels
        .iter()
        .filter_map(|c| c.lag.as_ref().map(|l| l.lag))
        .max()
        .unwrap_or(0);
    let span = t_len + max_lag;
    let mut rng = rng::stream(spec.seed, rng::STREAM_SYNTH);

    // own signal of every channel over t in [-max_lag, T)
    let own: Vec<Vec<f64>> = spec
        .channels
        .iter()
        .map(|ch| {
            let noise = (ch.noise_std > 0.0).then(|| Normal::new(0.0, ch.noise_std).expect("std"));
            (0..span)
                .map(|k| {
                    let t = k as f64 - max_lag as f64;
                    let mut v = ch.offset + ch.trend * t;
                    for s in &ch.sines {
                        v += s.amplitude * (2.0 * std::f64::consts::PI * t / s.period + s.phase).sin();
                    }
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    v
                })
                .collect()
        })
        .collect();

    let mut values = Vec::with_capacity(spec.channels.len() * t_len);
    for (c, ch) in spec.channels.iter().enumerate() {
        for t in 0..t_len {
            let mut v = own[c][t + max_lag];
            if let Some(l) = &ch.lag {
                v += l.gain * own[l.source][t + max_lag - l.lag];
            }
            values.push(v);
        }
    }
    let names = spec
        .channels
        .iter()
        .enumerate()
        .map(|(i, ch)| ch.name.clone().unwrap_or_else(|| format!("ch{}", i + 1)))
        .collect();
    let tensor = Tensor::new(vec![spec.channels.len(), t_len], values)
        .map_err(|e| DataError::Series(e.to_string()))?;
    let mut series = MultivariateSeries::new(tensor, names)?;

    let start = NaiveDateTime::parse_from_str(
        spec.start.as_deref().unwrap_or(DEFAULT_START),
        TIMESTAMP_FORMAT,
    )
    .expect("validated");
    let step = Duration::minutes(spec.freq_minutes as i64);
    series.timestamps = Some(
        (0..t_len)
            .map(|i| (start + step * i as i32).format(TIMESTAMP_FORMAT).to_string())
            .collect(),
    );
    series.frequency_hint = Some(spec.frequency_hint());
    Ok(series)
}
