//! Patch grids, input/target index plans and reversible instance
//! normalization.
//!
//! Patch and time indices are 0-based throughout: patch `i` covers time
//! steps `i * P .. (i + 1) * P`.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Epsilon added to the per-channel variance in RevIN.
pub const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("series length {total} is not divisible by patch length {patch_len}")]
    NotDivisible { total: usize, patch_len: usize },
    #[error("lookback {lookback} must be a positive multiple of P={patch_len} leaving at least one target patch out of {num_patches}")]
    BadLookback {
        lookback: usize,
        patch_len: usize,
        num_patches: usize,
    },
    #[error("cannot place {strategy:?} targets: {reason}")]
    Infeasible { strategy: Strategy, reason: String },
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("separate ratio must be one of 0, 0.5, 1; got {0}")]
    BadSeparateRatio(f64),
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// `N` disjoint patches of `P` steps covering `T = N * P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_len: usize,
    pub num_patches: usize,
}

impl PatchGrid {
    pub fn total(&self) -> usize {
        self.patch_len * self.num_patches
    }

    pub fn patch_bounds(&self, i: usize) -> Range<usize> {
        i * self.patch_len..(i + 1) * self.patch_len
    }
}

pub fn make_patch_grid(total: usize, patch_len: usize) -> Result<PatchGrid> {
    if patch_len == 0 || total == 0 || !total.is_multiple_of(patch_len) {
        return Err(PlanError::NotDivisible { total, patch_len });
    }
    Ok(PatchGrid {
        patch_len,
        num_patches: total / patch_len,
    })
}

/// How target patches are placed when sampling a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Targets are the last patches: plain forecasting.
    Standard,
    /// One contiguous run of targets at a uniformly random offset.
    Contiguous,
    /// A uniformly random subset of patches.
    Disjoint,
    /// Two separated runs of sizes `ceil(m/2)` and `floor(m/2)`.
    Mixed,
}

impl Strategy {
    /// Maps the separate-ratio knob: 1 -> contiguous, 0.5 -> mixed,
    /// 0 -> disjoint. Any other value is rejected.
    pub fn from_separate_ratio(ratio: f64) -> Result<Self> {
        if ratio == 1.0 {
            Ok(Strategy::Contiguous)
        } else if ratio == 0.5 {
            Ok(Strategy::Mixed)
        } else if ratio == 0.0 {
            Ok(Strategy::Disjoint)
        } else {
            Err(PlanError::BadSeparateRatio(ratio))
        }
    }
}

/// Where a plan came from; `Imputation` plans are built by the
/// imputation protocol rather than sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTag {
    Standard,
    Contiguous,
    Disjoint,
    Mixed,
    Imputation,
}

impl From<Strategy> for PlanTag {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Standard => PlanTag::Standard,
            Strategy::Contiguous => PlanTag::Contiguous,
            Strategy::Disjoint => PlanTag::Disjoint,
            Strategy::Mixed => PlanTag::Mixed,
        }
    }
}

/// Input and target patch indices; together they partition `0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPlan {
    pub input_patches: Vec<usize>,
    pub target_patches: Vec<usize>,
    pub strategy: PlanTag,
}

impl IndexPlan {
    /// Builds a plan from target patches; inputs are the complement.
    pub fn from_targets(grid: &PatchGrid, mut targets: Vec<usize>, tag: PlanTag) -> Result<Self> {
        targets.sort_unstable();
        targets.dedup();
        if let Some(&bad) = targets.iter().find(|&&j| j >= grid.num_patches) {
            return Err(PlanError::Invalid(format!(
                "target patch {bad} outside 0..{}",
                grid.num_patches
            )));
        }
        if targets.is_empty() {
            return Err(PlanError::Invalid("empty target set".into()));
        }
        if targets.len() == grid.num_patches {
            return Err(PlanError::Invalid("no input patches left".into()));
        }
        let input_patches = (0..grid.num_patches)
            .filter(|i| targets.binary_search(i).is_err())
            .collect();
        Ok(Self {
            input_patches,
            target_patches: targets,
            strategy: tag,
        })
    }

    /// Forecasting plan: the first `L/P` patches are inputs.
    pub fn standard(grid: &PatchGrid, lookback: usize) -> Result<Self> {
        let n_in = input_patch_count(grid, lookback)?;
        Self::from_targets(grid, (n_in..grid.num_patches).collect(), PlanTag::Standard)
    }

    /// Time steps covered by the input patches, ascending.
    pub fn input_times(&self, grid: &PatchGrid) -> Vec<usize> {
        self.input_patches
            .iter()
            .flat_map(|&i| grid.patch_bounds(i))
            .collect()
    }

    /// Time steps covered by the target patches, ascending.
    pub fn target_times(&self, grid: &PatchGrid) -> Vec<usize> {
        self.target_patches
            .iter()
            .flat_map(|&j| grid.patch_bounds(j))
            .collect()
    }

    /// Checks that inputs and targets partition the grid.
    pub fn validate(&self, grid: &PatchGrid) -> Result<()> {
        let mut seen = vec![false; grid.num_patches];
        for &i in self.input_patches.iter().chain(&self.target_patches) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(PlanError::Invalid(format!("patch {i} listed twice"))),
                None => return Err(PlanError::Invalid(format!("patch {i} outside grid"))),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(PlanError::Invalid("plan does not cover every patch".into()));
        }
        if self.input_patches.is_empty() || self.target_patches.is_empty() {
            return Err(PlanError::Invalid("inputs and targets must be non-empty".into()));
        }
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.input_patches) || !sorted(&self.target_patches) {
            return Err(PlanError::Invalid("patch lists must be ascending".into()));
        }
        Ok(())
    }
}

fn input_patch_count(grid: &PatchGrid, lookback: usize) -> Result<usize> {
    let bad = || PlanError::BadLookback {
        lookback,
        patch_len: grid.patch_len,
        num_patches: grid.num_patches,
    };
    if lookback == 0 || !lookback.is_multiple_of(grid.patch_len) {
        return Err(bad());
    }
    let n_in = lookback / grid.patch_len;
    if n_in >= grid.num_patches {
        return Err(bad());
    }
    Ok(n_in)
}

/// Samples a plan with exactly `L/P` input patches.
///
/// Contiguous and mixed placements are uniform over every feasible
/// offset (pair of offsets for mixed). Mixed runs are separated by at
/// least one input patch so the targets form exactly two segments.
pub fn sample_plan<R: Rng + ?Sized>(
    grid: &PatchGrid,
    lookback: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<IndexPlan> {
    let n = grid.num_patches;
    let m = n - input_patch_count(grid, lookback)?;
    let targets: Vec<usize> = match strategy {
        Strategy::Standard => (n - m..n).collect(),
        Strategy::Contiguous => {
            let start = rng.gen_range(0..=n - m);
            (start..start + m).collect()
        }
        Strategy::Disjoint => sample(rng, n, m).into_vec(),
        Strategy::Mixed => {
            if m < 2 {
                return Err(PlanError::Infeasible {
                    strategy,
                    reason: format!("mixed needs at least 2 target patches, have {m}"),
                });
            }
            let (a, b) = (m.div_ceil(2), m / 2);
            // every (start_a, start_b) with a gap of at least one patch
            let mut placements = Vec::new();
            for sa in 0..=n - a {
                for sb in 0..=n - b {
                    let apart = sa + a < sb || sb + b < sa;
                    if apart {
                        placements.push((sa, sb));
                    }
                }
            }
            if placements.is_empty() {
                return Err(PlanError::Infeasible {
                    strategy,
                    reason: format!("no room for runs of {a} and {b} in {n} patches"),
                });
            }
            let (sa, sb) = placements[rng.gen_range(0..placements.len())];
            (sa..sa + a).chain(sb..sb + b).collect()
        }
    };
    IndexPlan::from_targets(grid, targets, strategy.into())
}

/// Per-channel statistics of the values a model was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinState {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
}

/// Normalizes each row (channel) of a `C x L` tensor by its mean and
/// `sqrt(var + eps)` (population variance).
pub fn revin_normalize(x: &Tensor, eps: f64) -> (Tensor, RevinState) {
    let (c, l) = (x.rows(), x.cols());
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..c {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let s = (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mean) / s));
        mu.push(mean);
        sigma.push(s);
    }
    let norm = Tensor::new(x.shape().to_vec(), out).expect("same shape");
    (norm, RevinState { mu, sigma, eps })
}

/// `y = y_norm * sigma_c + mu_c` per row.
pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> std::result::Result<Tensor, TensorError> {
    if y.rows() != state.mu.len() {
        return Err(TensorError::Dimension {
            op: "revin_denormalize",
            lhs: y.shape().to_vec(),
            rhs: vec![state.mu.len()],
        });
    }
    let w = y.cols();
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / w;
        *v = *v * state.sigma[c] + state.mu[c];
    }
    Ok(out)
}
