//! Assimilation models: the full network, its ablations and the baselines, all behind one
//! forward contract `(background, observations, targets) → per-channel mean and variance`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::aggregate_to_grid;
use crate::conv::conv2d;
use crate::dam::{align, Dam, Retain, Selection};
use crate::decoder::{Decoder, DEFAULT_VARIANCE_FLOOR};
use crate::encoder::{ConditionalSet, RefGrid, SetConvLayer, SvdEncoder};
use crate::error::{invalid, shape, FnpError, Result};
use crate::grid::{ChannelMeta, Field, LatLonGrid, ObservationSet};
use crate::metrics::ChannelStats;
use crate::nfl::{ConvStack, NflStack, ResidualForm};
use crate::seeds::rng_for;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Fnp,
    FnpNoNfl,
    FnpNoDam,
    FnpNoSvd,
    Convcnp,
    InterpFirst,
}

impl VariantTag {
    pub const ALL: [VariantTag; 6] = [
        VariantTag::Fnp,
        VariantTag::FnpNoNfl,
        VariantTag::FnpNoDam,
        VariantTag::FnpNoSvd,
        VariantTag::Convcnp,
        VariantTag::InterpFirst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Fnp => "fnp",
            VariantTag::FnpNoNfl => "fnp_no_nfl",
            VariantTag::FnpNoDam => "fnp_no_dam",
            VariantTag::FnpNoSvd => "fnp_no_svd",
            VariantTag::Convcnp => "convcnp",
            VariantTag::InterpFirst => "interp_first",
        }
    }

    /// Whether the variant ingests observations at their own resolution.
    pub fn is_flexible(self) -> bool {
        self != VariantTag::InterpFirst
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = FnpError;

    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| FnpError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantTag,
    pub channels: Vec<ChannelMeta>,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub modes_lat: usize,
    pub modes_lon: usize,
    pub kernel_size: usize,
    pub decoder_hidden: Vec<usize>,
    pub variance_floor: f64,
    /// Initial SetConv length scale in normalised coordinates.
    pub init_length_scale: f64,
    pub residual: ResidualForm,
    pub retain: Retain,
    pub selection: Selection,
    /// Background and observation encoders use the same weights.
    pub share_encoders: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a background grid; modes are a quarter of the grid size and
    /// the length scale is two latitude cells.
    pub fn for_grid(variant: VariantTag, channels: Vec<ChannelMeta>, grid: &LatLonGrid, seed: u64) -> Self {
        ModelConfig {
            variant,
            channels,
            embed_dim: 8,
            n_layers: 4,
            modes_lat: (grid.n_lat() / 4).max(1),
            modes_lon: (grid.n_lon() / 4).max(1),
            kernel_size: 3,
            decoder_hidden: vec![32],
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            init_length_scale: 2.0 * grid.normalized_spacing().0,
            residual: ResidualForm::PostSum,
            retain: Retain::Verbatim,
            selection: Selection::Hard,
            share_encoders: false,
            seed,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(FnpError::Config("model needs at least one channel".into()));
        }
        if self.embed_dim == 0 || self.kernel_size % 2 == 0 || self.modes_lat == 0 || self.modes_lon == 0 {
            return Err(FnpError::Config("embed_dim and mode counts must be positive and the kernel odd".into()));
        }
        if !(self.init_length_scale > 0.0) || !(self.variance_floor > 0.0) {
            return Err(FnpError::Config("length scale and variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// Feature extractor applied to each source representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Fourier(NflStack),
    Conv(ConvStack),
}

impl Backbone {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, periodic: bool) -> Result<Var> {
        match self {
            Backbone::Fourier(s) => s.forward(tape, store, x, periodic),
            Backbone::Conv(s) => s.forward(tape, store, x, periodic),
        }
    }
}

/// Align, concatenate and smooth: the merge used without similarity-based selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatMerge {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Merge {
    Dam(Dam),
    Concat(ConcatMerge),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    /// Two SetConv branches with their own backbones, merged on the background grid.
    DualBranch {
        bg_encoder: SvdEncoder,
        obs_encoder: SvdEncoder,
        bg_backbone: Backbone,
        obs_backbone: Backbone,
        merge: Merge,
        decoder: Decoder,
        /// Observations are cell-averaged onto the background grid first.
        aggregate_first: bool,
    },
    /// One SetConv over the union of both sets (channels concatenated), a residual
    /// convolution stack and the decoder.
    SingleSet { encoder: SetConvLayer, backbone: ConvStack, decoder: Decoder },
}

/// Per-channel analysis on the background grid, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub mean: Field,
    pub variance: Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub arch: Architecture,
    /// Standardisation applied to every input and output.
    pub stats: ChannelStats,
}

fn new_backbone<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, prefix: &str, width: usize, fourier: bool, rng: &mut R) -> Backbone {
    if fourier {
        Backbone::Fourier(NflStack::new(
            store,
            prefix,
            width,
            cfg.n_layers,
            cfg.modes_lat,
            cfg.modes_lon,
            cfg.kernel_size,
            cfg.residual,
            rng,
        ))
    } else {
        Backbone::Conv(ConvStack::new(store, prefix, width, cfg.n_layers, cfg.kernel_size, rng))
    }
}

/// Builds a freshly initialised model of the configured variant.
pub fn build_variant(config: &ModelConfig, stats: ChannelStats) -> Result<AssimilationModel> {
    config.validate()?;
    if stats.n_channels() != config.n_channels() {
        return Err(shape("normalisation statistics and channel list differ in length"));
    }
    let mut rng = rng_for(config.seed, "init");
    let mut store = ParamStore::new();
    let cfg = config;
    let c = cfg.n_channels();
    let arch = match cfg.variant {
        VariantTag::Convcnp => {
            let encoder = SetConvLayer::new(&mut store, "encoder", 2 * c, cfg.embed_dim, cfg.init_length_scale, &mut rng);
            let width = encoder.out_channels();
            let backbone = ConvStack::new(&mut store, "backbone", width, cfg.n_layers, cfg.kernel_size, &mut rng);
            let decoder =
                Decoder::new(&mut store, "decoder", width, &cfg.decoder_hidden, c, cfg.variance_floor, &mut rng)?;
            Architecture::SingleSet { encoder, backbone, decoder }
        }
        tag => {
            let decoupled = tag != VariantTag::FnpNoSvd;
            let bg_encoder =
                SvdEncoder::new(&mut store, "bg_encoder", &cfg.channels, cfg.embed_dim, cfg.init_length_scale, decoupled, &mut rng)?;
            let obs_encoder = if cfg.share_encoders {
                bg_encoder.clone()
            } else {
                SvdEncoder::new(&mut store, "obs_encoder", &cfg.channels, cfg.embed_dim, cfg.init_length_scale, decoupled, &mut rng)?
            };
            let width = bg_encoder.out_channels();
            let fourier = tag != VariantTag::FnpNoNfl;
            let bg_backbone = new_backbone(cfg, &mut store, "bg_backbone", width, fourier, &mut rng);
            let obs_backbone = new_backbone(cfg, &mut store, "obs_backbone", width, fourier, &mut rng);
            let merge = if tag == VariantTag::FnpNoDam {
                let k = cfg.kernel_size;
                let std = 1.0 / ((2 * width * k * k) as f64).sqrt();
                Merge::Concat(ConcatMerge {
                    kernel: store.add("merge.smoother_kernel", Tensor::randn(vec![width, 2 * width, k, k], std, &mut rng), true),
                    bias: store.add("merge.smoother_bias", Tensor::zeros(vec![width]), false),
                })
            } else {
                Merge::Dam(Dam::new(&mut store, "dam", width, width, cfg.retain, cfg.selection, &mut rng))
            };
            let decoder =
                Decoder::new(&mut store, "decoder", width, &cfg.decoder_hidden, c, cfg.variance_floor, &mut rng)?;
            Architecture::DualBranch {
                bg_encoder,
                obs_encoder,
                bg_backbone,
                obs_backbone,
                merge,
                decoder,
                aggregate_first: tag == VariantTag::InterpFirst,
            }
        }
    };
    Ok(AssimilationModel { config: config.clone(), store, arch, stats })
}

/// Parameter count of a variant under `config`, without keeping the model.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    let n = config.n_channels();
    Ok(build_variant(config, ChannelStats::identity(n))?.store.num_scalars())
}

/// Returns `config` with the embedding width chosen so the variant's parameter count is
/// closest to `target`, searching widths `1..=max_embed`.
pub fn match_parameter_count(config: &ModelConfig, target: usize, max_embed: usize) -> Result<ModelConfig> {
    let mut best = config.clone();
    let mut best_gap = usize::MAX;
    for e in 1..=max_embed {
        let cfg = ModelConfig { embed_dim: e, ..config.clone() };
        let gap = parameter_count(&cfg)?.abs_diff(target);
        if gap < best_gap {
            best_gap = gap;
            best = cfg;
        }
    }
    Ok(best)
}

impl AssimilationModel {
    pub fn variant(&self) -> VariantTag {
        self.config.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn has_spectral_weights(&self) -> bool {
        self.store.names().iter().any(|n| n.contains("spectral"))
    }

    /// Rejects observation sets the variant cannot ingest. The cell-averaging baseline needs
    /// observations at least as fine as the background grid.
    pub fn check_compatible(&self, background: &LatLonGrid, obs: &ObservationSet) -> Result<()> {
        if obs.n_channels() != self.config.n_channels() {
            return Err(shape(format!(
                "observations carry {} channels, model expects {}",
                obs.n_channels(),
                self.config.n_channels()
            )));
        }
        if self.variant() == VariantTag::InterpFirst && obs.source_resolution() > background.resolution() * (1.0 + 1e-9) {
            return Err(FnpError::IncompatibleVariant {
                variant: self.variant().to_string(),
                reason: format!(
                    "observations at {}° are coarser than the {}° background grid",
                    obs.source_resolution(),
                    background.resolution()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass on standardised inputs. `background` fixes the target grid and the
    /// domain; with `drop_background` its values are replaced by an empty conditional set.
    /// Returns `(mean, variance)` of shape `[channels, targets]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        background: &Field,
        obs: &ObservationSet,
        drop_background: bool,
        targets: &[(f64, f64)],
    ) -> Result<(Var, Var)> {
        let grid = background.grid();
        if background.n_channels() != self.config.n_channels() {
            return Err(shape("background channel count differs from the model"));
        }
        self.check_compatible(grid, obs)?;
        let domain = grid.domain();
        let c = self.config.n_channels();
        let store = &self.store;
        let bg_set = if drop_background { ConditionalSet::empty(c) } else { ConditionalSet::from_field(background)? };
        match &self.arch {
            Architecture::DualBranch { bg_encoder, obs_encoder, bg_backbone, obs_backbone, merge, decoder, aggregate_first } => {
                let aggregated;
                let obs = if *aggregate_first {
                    aggregated = aggregate_to_grid(obs, grid)?;
                    &aggregated
                } else {
                    obs
                };
                let obs_grid = obs.reference_grid(domain)?;
                let obs_set = ConditionalSet::from_observations(obs, &domain)?.with_weight(cell_weight(grid, &obs_grid));
                let periodic = grid.periodic_lon();
                let bg_map = bg_encoder.embed(tape, store, &bg_set, &RefGrid::new(grid));
                let obs_map = obs_encoder.embed(tape, store, &obs_set, &RefGrid::new(&obs_grid));
                let bg_feat = bg_backbone.forward(tape, store, bg_map, periodic)?;
                let obs_feat = obs_backbone.forward(tape, store, obs_map, obs_grid.periodic_lon())?;
                let rep = match merge {
                    Merge::Dam(dam) => dam.forward(tape, store, bg_feat, obs_feat, &obs_grid, grid)?,
                    Merge::Concat(m) => {
                        let aligned = align(tape, obs_feat, &obs_grid, grid)?;
                        let cat = tape.concat(&[bg_feat, aligned]);
                        let k = tape.param(store, m.kernel);
                        let b = tape.param(store, m.bias);
                        conv2d(tape, cat, k, b, periodic)
                    }
                };
                decoder.decode(tape, store, rep, grid, targets)
            }
            Architecture::SingleSet { encoder, backbone, decoder } => {
                let obs_set =
                    ConditionalSet::from_observations(obs, &domain)?.with_weight(cell_weight(grid, &obs.reference_grid(domain)?));
                let union = union_set(&bg_set, &obs_set);
                let map = encoder.embed(tape, store, &union, &RefGrid::new(grid));
                let feat = backbone.forward(tape, store, map, grid.periodic_lon())?;
                decoder.decode(tape, store, feat, grid, targets)
            }
        }
    }

    /// Standardises the inputs, runs the model on the background grid and returns the
    /// analysis in physical units.
    pub fn assimilate(&self, background: &Field, obs: &ObservationSet, drop_background: bool) -> Result<Analysis> {
        let grid = background.grid();
        let bg = self.stats.standardize(background);
        let ob = obs.standardized(&self.stats.mean, &self.stats.std);
        let mut tape = Tape::new();
        let (m, v) = self.forward(&mut tape, &bg, &ob, drop_background, &grid.points())?;
        let n = grid.len();
        let mean = self.stats.destandardize_values(&tape.value(m).data, n);
        let variance: Vec<f64> =
            tape.value(v).data.iter().enumerate().map(|(k, v)| v * self.stats.std[k / n].powi(2)).collect();
        if mean.iter().chain(&variance).any(|x| !x.is_finite()) {
            return Err(FnpError::NonFinite("model output".into()));
        }
        Ok(Analysis { mean: background.with_values(mean)?, variance: background.with_values(variance)? })
    }

    /// Copies parameter values from `other`, matching by name and shape.
    pub fn load_parameters(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(invalid(format!("checkpoint holds {} tensors, model has {}", named.len(), self.store.len())));
        }
        for (name, t) in named {
            let id = self.store.find(name).ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
            let dst = self.store.get_mut(id);
            if dst.shape != t.shape {
                return Err(shape(format!("parameter {name}: shape {:?} vs {:?}", t.shape, dst.shape)));
            }
            dst.data.clone_from(&t.data);
        }
        Ok(())
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.store.ids().map(|id| (self.store.name(id).to_string(), self.store.get(id).clone())).collect()
    }
}

/// Union of two sets with the channels of `a` first and those of `b` after; each point is
/// present only in its own block.
/// Observation quadrature weight: the observation grid's cell area relative to the
/// background grid's, so a fixed sampling ratio gives the same density at any resolution.
fn cell_weight(background: &LatLonGrid, obs_grid: &LatLonGrid) -> f64 {
    background.len() as f64 / obs_grid.len() as f64
}

fn union_set(a: &ConditionalSet, b: &ConditionalSet) -> ConditionalSet {
    let (ca, cb) = (a.n_channels, b.n_channels);
    let c = ca + cb;
    let mut out = ConditionalSet::empty(c);
    for p in 0..a.len() {
        out.u.push(a.u[p]);
        out.v.push(a.v[p]);
        out.values.extend_from_slice(&a.values[p * ca..(p + 1) * ca]);
        out.values.extend(std::iter::repeat_n(0.0, cb));
        out.mask.extend_from_slice(&a.mask[p * ca..(p + 1) * ca]);
        out.mask.extend(std::iter::repeat_n(false, cb));
        out.weight.push(a.weight[p]);
    }
    for p in 0..b.len() {
        out.u.push(b.u[p]);
        out.v.push(b.v[p]);
        out.values.extend(std::iter::repeat_n(0.0, ca));
        out.values.extend_from_slice(&b.values[p * cb..(p + 1) * cb]);
        out.mask.extend(std::iter::repeat_n(false, ca));
        out.mask.extend_from_slice(&b.mask[p * cb..(p + 1) * cb]);
        out.weight.push(b.weight[p]);
    }
    out
}
