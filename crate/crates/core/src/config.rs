//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key maps to one field of
//! [`ExperimentConfig`]; unknown keys are errors. Relative paths are resolved against the
//! `FNP_DATA_DIR` environment variable when it is set.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dam::{Retain, Selection};
use crate::error::{FnpError, Result};
use crate::grid::{ChannelMeta, LatLonGrid};
use crate::model::VariantTag;
use crate::nfl::ResidualForm;

pub const DATA_DIR_ENV: &str = "FNP_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub variant: VariantTag,
    pub channels: Vec<ChannelMeta>,
    pub amplitudes: Vec<f64>,
    pub spectral_slope: f64,
    pub cross_channel_corr: f64,
    /// `(H, W)` of the grid the truth is generated on.
    pub truth_grid: (usize, usize),
    pub background_grid: (usize, usize),
    pub obs_grid: (usize, usize),
    /// Observation grids for cross-resolution evaluation.
    pub eval_obs_grids: Vec<(usize, usize)>,
    pub ratio: f64,
    pub lead_time_h: f64,
    pub smoothing_scale: f64,
    pub noise_amplitude: f64,
    pub noise_correlation_length: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub embed_dim: usize,
    pub n_layers: usize,
    /// Zero selects a quarter of the background grid size.
    pub modes_lat: usize,
    pub modes_lon: usize,
    pub kernel_size: usize,
    pub decoder_hidden: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub fine_tune: bool,
    pub fine_tune_fraction: f64,
    pub drop_background: bool,
    pub residual: ResidualForm,
    pub dam_retain: Retain,
    pub dam_selection: Selection,
    pub share_encoders: bool,
    pub match_params: bool,
    pub ablation_variants: Vec<VariantTag>,
    pub ablation_ratios: Vec<f64>,
    pub ablation_lead_times: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "desk".into(),
            variant: VariantTag::Fnp,
            channels: vec![
                ChannelMeta::new("z500", 0),
                ChannelMeta::new("t850", 0),
                ChannelMeta::new("u10", 1),
                ChannelMeta::new("t2m", 1),
            ],
            amplitudes: vec![4.0, 2.0, 1.0, 3.0],
            spectral_slope: -3.0,
            cross_channel_corr: 0.3,
            truth_grid: (128, 256),
            background_grid: (32, 64),
            obs_grid: (32, 64),
            eval_obs_grids: vec![(32, 64), (64, 128), (128, 256)],
            ratio: 0.1,
            lead_time_h: 24.0,
            smoothing_scale: 1.0,
            noise_amplitude: 0.5,
            noise_correlation_length: 2.0,
            epochs: 20,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 4,
            grad_clip: 5.0,
            seed: 0,
            data_seed: 1000,
            embed_dim: 8,
            n_layers: 4,
            modes_lat: 0,
            modes_lon: 0,
            kernel_size: 3,
            decoder_hidden: vec![32],
            n_train: 500,
            n_val: 100,
            n_test: 100,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            fine_tune: false,
            fine_tune_fraction: 0.2,
            drop_background: false,
            residual: ResidualForm::PostSum,
            dam_retain: Retain::Verbatim,
            dam_selection: Selection::Hard,
            share_encoders: false,
            match_params: false,
            ablation_variants: vec![VariantTag::Fnp, VariantTag::FnpNoNfl, VariantTag::FnpNoDam, VariantTag::FnpNoSvd],
            ablation_ratios: vec![0.01, 0.1],
            ablation_lead_times: vec![24.0, 48.0],
        }
    }
}

fn cfg_err(key: &str, msg: impl Display) -> FnpError {
    FnpError::Config(format!("{key}: {msg}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse::<T>().map_err(|e| cfg_err(key, format!("cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(cfg_err(key, format!("expected true/false, got {other:?}"))),
    }
}

fn parse_dims(key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = v.trim().split_once('x').ok_or_else(|| cfg_err(key, format!("expected HxW, got {v:?}")))?;
    Ok((num(key, h)?, num(key, w)?))
}

fn fmt_dims(d: (usize, usize)) -> String {
    format!("{}x{}", d.0, d.1)
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut temperature = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FnpError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "dam.temperature" {
                temperature = Some(num::<f64>(k, v)?);
                continue;
            }
            cfg.set(k, v)?;
        }
        if let Some(t) = temperature {
            match cfg.dam_selection {
                Selection::Soft { .. } => cfg.dam_selection = Selection::Soft { temperature: t },
                Selection::Hard => return Err(cfg_err("dam.temperature", "only valid with dam.selection = soft")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FnpError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "experiment_id" => self.experiment_id = v.to_string(),
            "variant" => self.variant = v.parse().map_err(|e: FnpError| cfg_err(k, e))?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|item| {
                        let (name, group) =
                            item.trim().split_once(':').ok_or_else(|| cfg_err(k, "expected name:group entries"))?;
                        Ok(ChannelMeta::new(name.trim(), num(k, group)?))
                    })
                    .collect::<Result<_>>()?
            }
            "amplitudes" => self.amplitudes = list(k, v)?,
            "spectral_slope" => self.spectral_slope = num(k, v)?,
            "cross_channel_corr" => self.cross_channel_corr = num(k, v)?,
            "truth_grid" => self.truth_grid = parse_dims(k, v)?,
            "background_grid" => self.background_grid = parse_dims(k, v)?,
            "obs_grid" => self.obs_grid = parse_dims(k, v)?,
            "eval_obs_grids" => self.eval_obs_grids = v.split(',').map(|d| parse_dims(k, d)).collect::<Result<_>>()?,
            "ratio" => self.ratio = num(k, v)?,
            "lead_time_h" => self.lead_time_h = num(k, v)?,
            "smoothing_scale" => self.smoothing_scale = num(k, v)?,
            "noise_amplitude" => self.noise_amplitude = num(k, v)?,
            "noise_correlation_length" => self.noise_correlation_length = num(k, v)?,
            "epochs" => self.epochs = num(k, v)?,
            "learning_rate" => self.learning_rate = num(k, v)?,
            "weight_decay" => self.weight_decay = num(k, v)?,
            "batch_size" => self.batch_size = num(k, v)?,
            "grad_clip" => self.grad_clip = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "data_seed" => self.data_seed = num(k, v)?,
            "embed_dim" => self.embed_dim = num(k, v)?,
            "n_layers" => self.n_layers = num(k, v)?,
            "modes_lat" => self.modes_lat = num(k, v)?,
            "modes_lon" => self.modes_lon = num(k, v)?,
            "kernel_size" => self.kernel_size = num(k, v)?,
            "decoder_hidden" => self.decoder_hidden = list(k, v)?,
            "n_train" => self.n_train = num(k, v)?,
            "n_val" => self.n_val = num(k, v)?,
            "n_test" => self.n_test = num(k, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "fine_tune" => self.fine_tune = parse_bool(k, v)?,
            "fine_tune_fraction" => self.fine_tune_fraction = num(k, v)?,
            "drop_background" => self.drop_background = parse_bool(k, v)?,
            "residual" => {
                self.residual = match v {
                    "post_sum" => ResidualForm::PostSum,
                    "activate_sum" => ResidualForm::ActivateSum,
                    _ => return Err(cfg_err(k, "expected post_sum or activate_sum")),
                }
            }
            "dam.retain" => {
                self.dam_retain = match v {
                    "verbatim" => Retain::Verbatim,
                    "prose" => Retain::Prose,
                    _ => return Err(cfg_err(k, "expected verbatim or prose")),
                }
            }
            "dam.selection" => {
                self.dam_selection = match v {
                    "hard" => Selection::Hard,
                    "soft" => Selection::Soft { temperature: 1.0 },
                    _ => return Err(cfg_err(k, "expected hard or soft")),
                }
            }
            "share_encoders" => self.share_encoders = parse_bool(k, v)?,
            "match_params" => self.match_params = parse_bool(k, v)?,
            "ablation_variants" => {
                self.ablation_variants =
                    v.split(',').map(|s| s.trim().parse().map_err(|e: FnpError| cfg_err(k, e))).collect::<Result<_>>()?
            }
            "ablation_ratios" => self.ablation_ratios = list(k, v)?,
            "ablation_lead_times" => self.ablation_lead_times = list(k, v)?,
            _ => return Err(FnpError::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive_dims = [self.truth_grid, self.background_grid, self.obs_grid].iter().all(|d| d.0 > 0 && d.1 > 0);
        if !positive_dims || self.eval_obs_grids.iter().any(|d| d.0 == 0 || d.1 == 0) {
            return Err(FnpError::Config("grid sizes must be positive".into()));
        }
        if self.channels.is_empty() || self.amplitudes.len() != self.channels.len() {
            return Err(FnpError::Config("one amplitude per channel is required".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) || self.ablation_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(FnpError::Config("observation ratios must lie in [0, 1]".into()));
        }
        if self.lead_time_h < 0.0 || self.ablation_lead_times.iter().any(|l| *l < 0.0) {
            return Err(FnpError::Config("lead times must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.embed_dim == 0 {
            return Err(FnpError::Config("learning_rate, batch_size and embed_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fine_tune_fraction) {
            return Err(FnpError::Config("fine_tune_fraction must lie in [0, 1]".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(FnpError::Config("n_train, n_val and n_test must be positive".into()));
        }
        if self.ablation_variants.is_empty() {
            return Err(FnpError::Config("ablation_variants must not be empty".into()));
        }
        Ok(())
    }

    fn resolve(p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => p.to_path_buf(),
        }
    }

    pub fn data_path(&self) -> PathBuf {
        Self::resolve(&self.data_dir)
    }

    pub fn output_path(&self) -> PathBuf {
        Self::resolve(&self.output_dir)
    }

    pub fn grid(dims: (usize, usize)) -> Result<LatLonGrid> {
        LatLonGrid::global(dims.0, dims.1)
    }

    /// The configuration as flat key/value pairs, parseable by [`ExperimentConfig::parse`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment_id", self.experiment_id.clone());
        put("variant", self.variant.to_string());
        put("channels", self.channels.iter().map(|c| format!("{}:{}", c.name, c.group)).collect::<Vec<_>>().join(","));
        put("amplitudes", join(&self.amplitudes));
        put("spectral_slope", self.spectral_slope.to_string());
        put("cross_channel_corr", self.cross_channel_corr.to_string());
        put("truth_grid", fmt_dims(self.truth_grid));
        put("background_grid", fmt_dims(self.background_grid));
        put("obs_grid", fmt_dims(self.obs_grid));
        put("eval_obs_grids", self.eval_obs_grids.iter().map(|d| fmt_dims(*d)).collect::<Vec<_>>().join(","));
        put("ratio", self.ratio.to_string());
        put("lead_time_h", self.lead_time_h.to_string());
        put("smoothing_scale", self.smoothing_scale.to_string());
        put("noise_amplitude", self.noise_amplitude.to_string());
        put("noise_correlation_length", self.noise_correlation_length.to_string());
        put("epochs", self.epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("n_layers", self.n_layers.to_string());
        put("modes_lat", self.modes_lat.to_string());
        put("modes_lon", self.modes_lon.to_string());
        put("kernel_size", self.kernel_size.to_string());
        put("decoder_hidden", join(&self.decoder_hidden));
        put("n_train", self.n_train.to_string());
        put("n_val", self.n_val.to_string());
        put("n_test", self.n_test.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("fine_tune", self.fine_tune.to_string());
        put("fine_tune_fraction", self.fine_tune_fraction.to_string());
        put("drop_background", self.drop_background.to_string());
        put(
            "residual",
            match self.residual {
                ResidualForm::PostSum => "post_sum",
                ResidualForm::ActivateSum => "activate_sum",
            }
            .into(),
        );
        put(
            "dam.retain",
            match self.dam_retain {
                Retain::Verbatim => "verbatim",
                Retain::Prose => "prose",
            }
            .into(),
        );
        match self.dam_selection {
            Selection::Hard => put("dam.selection", "hard".into()),
            Selection::Soft { temperature } => {
                put("dam.selection", "soft".into());
                put("dam.temperature", temperature.to_string());
            }
        }
        put("share_encoders", self.share_encoders.to_string());
        put("match_params", self.match_params.to_string());
        put("ablation_variants", join(&self.ablation_variants));
        put("ablation_ratios", join(&self.ablation_ratios));
        put("ablation_lead_times", join(&self.ablation_lead_times));
        m.into_iter().collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
