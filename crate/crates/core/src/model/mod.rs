//! The forecasting network: patch embeddings with temporal/channel
//! positional tables, a latent-bottleneck encoder (or one of the
//! self-attention ablations), a positional-query decoder and a shared
//! per-patch output projection, all wrapped in RevIN.

mod checkpoint;

pub use checkpoint::{Checkpoint, NamedArray, OptimizerSnapshot, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formulation::{make_patch_grid, revin_normalize, IndexPlan, PatchGrid, PlanError, RevinState, REVIN_EPS};
use crate::nn::{attn_block, AttnBlockParams, AttnWeights, Bound, Mode, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| ModelError::Stage { stage, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    LatentBottleneck,
    FullSelfAttn,
    DecoupledSelfAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    QueryCrossattn,
    DirectLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeSharing {
    Shared,
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of channels `C`.
    pub channels: usize,
    /// Lookback `L`; also the number of input time steps of every plan.
    pub lookback: usize,
    /// Horizon `H`.
    pub horizon: usize,
    /// Patch length `P`.
    pub patch_len: usize,
    /// Token width `D`.
    pub d_model: usize,
    /// Latent width `D_L`.
    pub d_latent: usize,
    /// Number of latent tokens `M`.
    pub num_latents: usize,
    /// Latent self-attention layers `K`.
    pub latent_layers: usize,
    pub n_heads: usize,
    pub encoder: EncoderVariant,
    pub decoder: DecoderVariant,
    pub pe_sharing: PeSharing,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            lookback: 96,
            horizon: 24,
            patch_len: 12,
            d_model: 32,
            d_latent: 32,
            num_latents: 8,
            latent_layers: 3,
            n_heads: 4,
            encoder: EncoderVariant::LatentBottleneck,
            decoder: DecoderVariant::QueryCrossattn,
            pe_sharing: PeSharing::Shared,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("d_latent", self.d_latent),
            ("num_latents", self.num_latents),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !out.is_empty() {
            return out;
        }
        if !self.lookback.is_multiple_of(self.patch_len) {
            out.push(format!(
                "lookback {} is not a multiple of patch_len {}",
                self.lookback, self.patch_len
            ));
        }
        if !self.horizon.is_multiple_of(self.patch_len) {
            out.push(format!(
                "horizon {} is not a multiple of patch_len {}",
                self.horizon, self.patch_len
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            out.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_latent.is_multiple_of(self.n_heads) {
            out.push(format!(
                "d_latent {} is not divisible by n_heads {}",
                self.d_latent, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.decoder == DecoderVariant::DirectLatent && self.encoder != EncoderVariant::LatentBottleneck {
            out.push("decoder direct_latent requires encoder latent_bottleneck".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(p.join("; ")))
        }
    }

    /// Window length `T = L + H`.
    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn num_patches(&self) -> usize {
        self.window_len() / self.patch_len
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(make_patch_grid(self.window_len(), self.patch_len)?)
    }
}

#[derive(Debug, Clone)]
enum EncoderLayout {
    Bottleneck {
        latents: ParamId,
        read: AttnBlockParams,
        process: Vec<AttnBlockParams>,
        /// Absent for the direct-latent decoder, which skips re-expansion.
        write: Option<AttnBlockParams>,
    },
    Full {
        block: AttnBlockParams,
    },
    Decoupled {
        temporal: AttnBlockParams,
        channel: AttnBlockParams,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    w_input: ParamId,
    e_temporal: ParamId,
    e_channel: ParamId,
    /// `(temporal, channel)` query tables when positional embeddings are separate.
    query_pe: Option<(ParamId, ParamId)>,
    encoder: EncoderLayout,
    decoder: AttnBlockParams,
    w_output: ParamId,
}

/// Parameter counts grouped by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    /// Input projection plus positional tables (grow with `N`).
    pub embeddings: usize,
    pub encoder: usize,
    /// Decoder block plus the output projection.
    pub decoder: usize,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub h0: Tensor,
    /// Absent for the direct-latent decoder.
    pub h1: Option<Tensor>,
    pub q0: Tensor,
    pub q1: Tensor,
    /// `Z0 .. Z_{K+1}` for the latent bottleneck, empty otherwise.
    pub latents: Vec<Tensor>,
    /// Latent-read weights (`M x C|I|`) for the bottleneck, token-to-token
    /// weights for full self-attention, absent for decoupled attention.
    pub encoder_attention: Option<AttnWeights>,
    /// `C|J| x C|I|`, or `C|J| x M` for the direct-latent decoder.
    pub decoder_attention: AttnWeights,
    pub revin: RevinState,
    /// Attention score elements computed by the encoder.
    pub encoder_score_elements: u64,
}

/// Tape handles produced by [`TimePerceiver::forward_on_tape`].
pub struct TapeForward {
    /// `C x |J|P` predictions on the original scale.
    pub prediction: Var,
    pub h0: Var,
    pub h1: Option<Var>,
    pub q0: Var,
    pub q1: Var,
    pub latents: Vec<Var>,
    pub encoder_attention: Option<AttnWeights>,
    pub decoder_attention: AttnWeights,
    pub revin: RevinState,
    pub encoder_score_elements: u64,
}

/// Output of the encoder stage.
pub struct Encoded {
    /// Updated input tokens; `None` when re-expansion is skipped.
    pub h1: Option<Var>,
    pub latents: Vec<Var>,
    pub attention: Option<AttnWeights>,
}

#[derive(Debug, Clone)]
pub struct TimePerceiver {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl TimePerceiver {
    /// Builds a freshly initialized model; initialization draws from the
    /// `init` stream of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::STREAM_INIT);
        let mut store = ParamStore::new();
        let (c, n, d, dl, h) = (
            config.channels,
            config.num_patches(),
            config.d_model,
            config.d_latent,
            config.n_heads,
        );
        let w_input = store.add_weight("embed.w_input", &[config.patch_len, d], &mut rng);
        let e_temporal = store.add_weight("embed.temporal", &[n, d], &mut rng);
        let e_channel = store.add_weight("embed.channel", &[c, d], &mut rng);
        let query_pe = (config.pe_sharing == PeSharing::Separate).then(|| {
            (
                store.add_weight("query.temporal", &[n, d], &mut rng),
                store.add_weight("query.channel", &[c, d], &mut rng),
            )
        });
        let encoder = match config.encoder {
            EncoderVariant::LatentBottleneck => EncoderLayout::Bottleneck {
                latents: store.add_weight("encoder.latents", &[config.num_latents, dl], &mut rng),
                read: AttnBlockParams::cross_attn(&mut store, "encoder.read", dl, d, h, &mut rng),
                process: (0..config.latent_layers)
                    .map(|k| {
                        AttnBlockParams::self_attn(&mut store, &format!("encoder.process.{k}"), dl, h, &mut rng)
                    })
                    .collect(),
                write: (config.decoder == DecoderVariant::QueryCrossattn)
                    .then(|| AttnBlockParams::cross_attn(&mut store, "encoder.write", d, dl, h, &mut rng)),
            },
            EncoderVariant::FullSelfAttn => EncoderLayout::Full {
                block: AttnBlockParams::self_attn(&mut store, "encoder.self", d, h, &mut rng),
            },
            EncoderVariant::DecoupledSelfAttn => EncoderLayout::Decoupled {
                temporal: AttnBlockParams::self_attn(&mut store, "encoder.temporal", d, h, &mut rng),
                channel: AttnBlockParams::self_attn(&mut store, "encoder.channel", d, h, &mut rng),
            },
        };
        let context_dim = match config.decoder {
            DecoderVariant::QueryCrossattn => d,
            DecoderVariant::DirectLatent => dl,
        };
        let decoder = AttnBlockParams::cross_attn(&mut store, "decoder.block", d, context_dim, h, &mut rng);
        let w_output = store.add_weight("decoder.w_output", &[d, config.patch_len], &mut rng);
        Ok(Self {
            config,
            store,
            layout: Layout {
                w_input,
                e_temporal,
                e_channel,
                query_pe,
                encoder,
                decoder,
                w_output,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid().expect("validated at construction")
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn census(&self) -> ParamCensus {
        let s = &self.store;
        ParamCensus {
            total: s.num_scalars(),
            embeddings: s.num_scalars_with_prefix("embed.") + s.num_scalars_with_prefix("query."),
            encoder: s.num_scalars_with_prefix("encoder."),
            decoder: s.num_scalars_with_prefix("decoder."),
        }
    }

    /// Mutable access to a named parameter.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.find(name)?;
        Some(self.store.get_mut(id))
    }

    fn check_window(&self, window: &Tensor, plan: &IndexPlan) -> Result<PatchGrid> {
        let grid = self.grid();
        if window.shape() != [self.config.channels, grid.total()] {
            return Err(ModelError::Stage {
                stage: "input",
                source: TensorError::Dimension {
                    op: "window",
                    lhs: window.shape().to_vec(),
                    rhs: vec![self.config.channels, grid.total()],
                },
            });
        }
        plan.validate(&grid)?;
        Ok(grid)
    }

    /// Input-patch values gathered from a `C x T` window: `C x |I|P`.
    pub fn input_values(window: &Tensor, plan: &IndexPlan, grid: &PatchGrid) -> Tensor {
        let times = plan.input_times(grid);
        let mut data = Vec::with_capacity(window.rows() * times.len());
        for c in 0..window.rows() {
            let row = window.row(c);
            data.extend(times.iter().map(|&t| row[t]));
        }
        Tensor::new(vec![window.rows(), times.len()], data).expect("non-empty plan")
    }

    /// Target values gathered from a `C x T` window: `C x |J|P`.
    pub fn target_values(window: &Tensor, plan: &IndexPlan, grid: &PatchGrid) -> Tensor {
        let times = plan.target_times(grid);
        let mut data = Vec::with_capacity(window.rows() * times.len());
        for c in 0..window.rows() {
            let row = window.row(c);
            data.extend(times.iter().map(|&t| row[t]));
        }
        Tensor::new(vec![window.rows(), times.len()], data).expect("non-empty plan")
    }

    /// `H0[(c, i)] = X[c, P_i] W_input + E_channel[c] + E_temporal[i]`,
    /// tokens ordered channel-major then by ascending input patch.
    ///
    /// `x_norm` holds the normalized input-patch values, `C x |I|P`.
    pub fn embed_inputs(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        x_norm: &Tensor,
        plan: &IndexPlan,
    ) -> Result<Var> {
        let p = self.config.patch_len;
        let n_in = plan.input_patches.len();
        let c = self.config.channels;
        if x_norm.shape() != [c, n_in * p] {
            return Err(ModelError::Stage {
                stage: "embed",
                source: TensorError::Dimension {
                    op: "embed_inputs",
                    lhs: x_norm.shape().to_vec(),
                    rhs: vec![c, n_in * p],
                },
            });
        }
        // row-major reshape of C x (|I| P) is exactly (C |I|) x P in token order
        let patches = tape.constant(x_norm.reshaped(&[c * n_in, p]).stage("embed")?);
        let values = tape.matmul(patches, bound.var(self.layout.w_input)).stage("embed")?;
        let (ch_idx, t_idx): (Vec<usize>, Vec<usize>) = (0..c)
            .flat_map(|ch| plan.input_patches.iter().map(move |&i| (ch, i)))
            .unzip();
        let cpe = tape.gather_rows(bound.var(self.layout.e_channel), &ch_idx).stage("embed")?;
        let tpe = tape.gather_rows(bound.var(self.layout.e_temporal), &t_idx).stage("embed")?;
        let h = tape.add(values, cpe).stage("embed")?;
        tape.add(h, tpe).stage("embed")
    }

    /// `Q0[(c, j)] = E_channel[c] + E_temporal[j]` for every target patch.
    pub fn build_queries(&self, tape: &mut Tape<'_>, bound: &Bound, plan: &IndexPlan) -> Result<Var> {
        if plan.target_patches.is_empty() {
            return Err(ModelError::Stage {
                stage: "queries",
                source: TensorError::Contract("empty target patch set".into()),
            });
        }
        let (tpe, cpe) = self
            .layout
            .query_pe
            .unwrap_or((self.layout.e_temporal, self.layout.e_channel));
        let (ch_idx, t_idx): (Vec<usize>, Vec<usize>) = (0..self.config.channels)
            .flat_map(|ch| plan.target_patches.iter().map(move |&j| (ch, j)))
            .unzip();
        let c = tape.gather_rows(bound.var(cpe), &ch_idx).stage("queries")?;
        let t = tape.gather_rows(bound.var(tpe), &t_idx).stage("queries")?;
        tape.add(c, t).stage("queries")
    }

    /// Runs the configured encoder over `H0` (`C|I| x D`).
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        h0: Var,
        n_inputs: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        match &self.layout.encoder {
            EncoderLayout::Bottleneck {
                latents,
                read,
                process,
                write,
            } => {
                let z0 = bound.var(*latents);
                let (mut z, read_w) = attn_block(tape, bound, read, z0, h0, mode).stage("encode")?;
                let mut zs = vec![z0, z];
                for block in process {
                    z = attn_block(tape, bound, block, z, z, mode).stage("encode")?.0;
                    zs.push(z);
                }
                let h1 = match write {
                    Some(w) => Some(attn_block(tape, bound, w, h0, z, mode).stage("encode")?.0),
                    None => None,
                };
                Ok(Encoded {
                    h1,
                    latents: zs,
                    attention: Some(read_w),
                })
            }
            EncoderLayout::Full { block } => {
                let (h1, w) = attn_block(tape, bound, block, h0, h0, mode).stage("encode")?;
                Ok(Encoded {
                    h1: Some(h1),
                    latents: Vec::new(),
                    attention: Some(w),
                })
            }
            EncoderLayout::Decoupled { temporal, channel } => {
                let c = self.config.channels;
                let mut rows = Vec::with_capacity(c);
                for ch in 0..c {
                    let idx: Vec<usize> = (ch * n_inputs..(ch + 1) * n_inputs).collect();
                    let x = tape.gather_rows(h0, &idx).stage("encode")?;
                    rows.push(attn_block(tape, bound, temporal, x, x, mode).stage("encode")?.0);
                }
                let ht = tape.concat_rows(&rows).stage("encode")?;
                let mut cols = Vec::with_capacity(n_inputs);
                for k in 0..n_inputs {
                    let idx: Vec<usize> = (0..c).map(|ch| ch * n_inputs + k).collect();
                    let x = tape.gather_rows(ht, &idx).stage("encode")?;
                    cols.push(attn_block(tape, bound, channel, x, x, mode).stage("encode")?.0);
                }
                let patch_major = tape.concat_rows(&cols).stage("encode")?;
                let back: Vec<usize> = (0..c)
                    .flat_map(|ch| (0..n_inputs).map(move |k| k * c + ch))
                    .collect();
                let h1 = tape.gather_rows(patch_major, &back).stage("encode")?;
                Ok(Encoded {
                    h1: Some(h1),
                    latents: Vec::new(),
                    attention: None,
                })
            }
        }
    }

    /// Cross-attention of queries over a context: encoded input tokens for
    /// the query decoder, final latents for the direct-latent variant.
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        q0: Var,
        context: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, AttnWeights)> {
        attn_block(tape, bound, &self.layout.decoder, q0, context, mode).stage("decode")
    }

    /// Per-token `D -> P` projection reassembled as `C x |J|P`.
    pub fn project_out(&self, tape: &mut Tape<'_>, bound: &Bound, q1: Var, n_targets: usize) -> Result<Var> {
        let out = tape.matmul(q1, bound.var(self.layout.w_output)).stage("project")?;
        tape.reshape(out, &[self.config.channels, n_targets * self.config.patch_len])
            .stage("project")
    }

    /// Full pipeline on a tape: RevIN, embedding, encoder, queries,
    /// decoder, projection, inverse RevIN.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        window: &Tensor,
        plan: &IndexPlan,
        mode: &mut Mode<'_>,
    ) -> Result<TapeForward> {
        let grid = self.check_window(window, plan)?;
        let (x_norm, revin) = revin_normalize(&Self::input_values(window, plan, &grid), REVIN_EPS);
        let h0 = self.embed_inputs(tape, bound, &x_norm, plan)?;

        let before = tape.score_elements();
        let encoded = self.encode(tape, bound, h0, plan.input_patches.len(), mode)?;
        let encoder_score_elements = tape.score_elements() - before;

        let q0 = self.build_queries(tape, bound, plan)?;
        let context = match (self.config.decoder, encoded.h1) {
            (DecoderVariant::QueryCrossattn, Some(h1)) => h1,
            (DecoderVariant::DirectLatent, _) => *encoded.latents.last().expect("latents present"),
            (DecoderVariant::QueryCrossattn, None) => unreachable!("write stage present"),
        };
        let (q1, decoder_attention) = self.decode(tape, bound, q0, context, mode)?;
        let n_targets = plan.target_patches.len();
        let y_norm = self.project_out(tape, bound, q1, n_targets)?;

        let width = n_targets * self.config.patch_len;
        let expand = |v: &[f64]| {
            let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, width)).collect();
            Tensor::new(vec![v.len(), width], data).expect("shape")
        };
        let sigma = tape.constant(expand(&revin.sigma));
        let mu = tape.constant(expand(&revin.mu));
        let scaled = tape.mul(y_norm, sigma).stage("revin")?;
        let prediction = tape.add(scaled, mu).stage("revin")?;

        Ok(TapeForward {
            prediction,
            h0,
            h1: encoded.h1,
            q0,
            q1,
            latents: encoded.latents,
            encoder_attention: encoded.attention,
            decoder_attention,
            revin,
            encoder_score_elements,
        })
    }

    /// Predicts the target patches of `plan` from a `C x T` window. Only the
    /// input-patch columns of `window` are read.
    pub fn forward(&self, window: &Tensor, plan: &IndexPlan) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, window, plan, &mut Mode::Eval)?;
        let v = |x: Var| tape.value(x).clone();
        let trace = ForwardTrace {
            h0: v(out.h0),
            h1: out.h1.map(v),
            q0: v(out.q0),
            q1: v(out.q1),
            latents: out.latents.iter().map(|&z| v(z)).collect(),
            encoder_attention: out.encoder_attention,
            decoder_attention: out.decoder_attention,
            revin: out.revin,
            encoder_score_elements: out.encoder_score_elements,
        };
        Ok((v(out.prediction), trace))
    }

    /// Prediction only.
    pub fn predict(&self, window: &Tensor, plan: &IndexPlan) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, window, plan, &mut Mode::Eval)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// Plain forecasting: maps a `C x L` lookback to a `C x H` forecast.
    pub fn forecast(&self, lookback: &Tensor) -> Result<Tensor> {
        let (c, l) = (self.config.channels, self.config.lookback);
        if lookback.shape() != [c, l] {
            return Err(ModelError::Stage {
                stage: "input",
                source: TensorError::Dimension {
                    op: "forecast",
                    lhs: lookback.shape().to_vec(),
                    rhs: vec![c, l],
                },
            });
        }
        let grid = self.grid();
        let mut window = Tensor::zeros(&[c, grid.total()]);
        let t = grid.total();
        for ch in 0..c {
            window.data_mut()[ch * t..ch * t + l].copy_from_slice(lookback.row(ch));
        }
        let plan = IndexPlan::standard(&grid, l)?;
        self.predict(&window, &plan)
    }
}

#[cfg(test)]
mod tests;
