//! Experiment matrix: evaluation with reference rows, cross-resolution runs and ablations.

use log::info;

use crate::config::ExperimentConfig;
use crate::data::{generate_split, DataConfig, ObsSpec, Sample, Split};
use crate::error::{FnpError, Result};
use crate::grid::{Field, LatLonGrid};
use crate::metrics::{MetricsAccumulator, MetricsReport, ReportMeta};
use crate::model::{build_variant, match_parameter_count, parameter_count, AssimilationModel, ModelConfig, VariantTag};
use crate::synth::{BackgroundSpec, FieldSpec};
use crate::train::{train, training_stats, TrainLog, TrainOptions, EVAL_OBS_STREAM};

/// In-memory train/validation/test splits.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        Ok(Datasets {
            train: generate_split(cfg, Split::Train)?,
            val: generate_split(cfg, Split::Val)?,
            test: generate_split(cfg, Split::Test)?,
        })
    }
}

pub fn data_config(cfg: &ExperimentConfig) -> Result<DataConfig> {
    Ok(DataConfig {
        field: FieldSpec {
            channels: cfg.channels.clone(),
            spectral_slope: cfg.spectral_slope,
            amplitude: cfg.amplitudes.clone(),
            cross_channel_corr: cfg.cross_channel_corr,
        },
        background: BackgroundSpec {
            lead_time_h: cfg.lead_time_h,
            smoothing_scale: cfg.smoothing_scale,
            noise_amplitude: cfg.noise_amplitude,
            noise_correlation_length: cfg.noise_correlation_length,
        },
        truth_grid: ExperimentConfig::grid(cfg.truth_grid)?,
        background_grid: ExperimentConfig::grid(cfg.background_grid)?,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        n_test: cfg.n_test,
        base_seed: cfg.data_seed,
    })
}

pub fn model_config(cfg: &ExperimentConfig, variant: VariantTag) -> Result<ModelConfig> {
    let grid = ExperimentConfig::grid(cfg.background_grid)?;
    let mut m = ModelConfig::for_grid(variant, cfg.channels.clone(), &grid, cfg.seed);
    m.embed_dim = cfg.embed_dim;
    m.n_layers = cfg.n_layers;
    if cfg.modes_lat > 0 {
        m.modes_lat = cfg.modes_lat;
    }
    if cfg.modes_lon > 0 {
        m.modes_lon = cfg.modes_lon;
    }
    m.kernel_size = cfg.kernel_size;
    m.decoder_hidden = cfg.decoder_hidden.clone();
    m.residual = cfg.residual;
    m.retain = cfg.dam_retain;
    m.selection = cfg.dam_selection;
    m.share_encoders = cfg.share_encoders;
    if cfg.match_params && variant != VariantTag::Fnp {
        let target = parameter_count(&ModelConfig { variant: VariantTag::Fnp, ..m.clone() })?;
        m = match_parameter_count(&m, target, 8 * cfg.embed_dim)?;
    }
    Ok(m)
}

pub fn train_options(cfg: &ExperimentConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        grad_clip: if cfg.grad_clip > 0.0 { Some(cfg.grad_clip) } else { None },
        seed: cfg.seed,
    }
}

pub fn obs_spec(dims: (usize, usize), ratio: f64) -> Result<ObsSpec> {
    Ok(ObsSpec { grid: ExperimentConfig::grid(dims)?, ratio })
}

/// Builds and trains one variant on the configured observation grid and ratio.
pub fn train_variant(cfg: &ExperimentConfig, variant: VariantTag, data: &Datasets) -> Result<(AssimilationModel, TrainLog)> {
    let model = build_variant(&model_config(cfg, variant)?, training_stats(&data.train)?)?;
    info!("training {variant} ({} parameters)", model.parameter_count());
    train(model, &data.train, &data.val, &obs_spec(cfg.obs_grid, cfg.ratio)?, &train_options(cfg))
}

/// Description of one evaluation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetting {
    pub experiment_id: String,
    pub obs: ObsSpec,
    pub lead_time_h: f64,
    pub fine_tuned: bool,
    pub drop_background: bool,
    pub seed: u64,
}

impl EvalSetting {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(EvalSetting {
            experiment_id: cfg.experiment_id.clone(),
            obs: obs_spec(cfg.obs_grid, cfg.ratio)?,
            lead_time_h: cfg.lead_time_h,
            fine_tuned: cfg.fine_tune,
            drop_background: cfg.drop_background,
            seed: cfg.seed,
        })
    }

    fn meta(&self, id_suffix: &str, variant: &str) -> ReportMeta {
        ReportMeta {
            experiment_id: format!("{}{id_suffix}", self.experiment_id),
            variant: variant.to_string(),
            obs_resolution_deg: self.obs.grid.resolution(),
            ratio: self.obs.ratio,
            lead_time_h: self.lead_time_h,
            fine_tuned: self.fine_tuned,
            seed: self.seed,
        }
    }
}

/// Analysis metrics plus the reference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub analysis: MetricsReport,
    /// The background scored against the truth.
    pub background: MetricsReport,
    /// The training-mean field scored against the truth (zero standardised anomaly).
    pub climatology: MetricsReport,
}

impl Evaluation {
    pub fn reports(&self) -> Vec<MetricsReport> {
        vec![self.analysis.clone(), self.background.clone(), self.climatology.clone()]
    }
}

fn climatology_field(model: &AssimilationModel, like: &Field) -> Result<Field> {
    let n = like.grid().len();
    like.with_values((0..like.values().len()).map(|k| model.stats.mean[k / n]).collect())
}

/// Runs the model over `test` and scores analysis, background and climatology.
pub fn evaluate(model: &AssimilationModel, test: &[Sample], setting: &EvalSetting) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(FnpError::Config("empty test set".into()));
    }
    let names: Vec<String> = model.config.channels.iter().map(|c| c.name.clone()).collect();
    let mut acc = MetricsAccumulator::new(names.clone());
    let mut bg = MetricsAccumulator::new(names.clone());
    let mut clim = MetricsAccumulator::new(names);
    for s in test {
        let obs = s.observations(&setting.obs, EVAL_OBS_STREAM, 0)?;
        let analysis = model.assimilate(&s.background, &obs, setting.drop_background)?;
        acc.add(&analysis.mean, &s.truth, &model.stats)?;
        bg.add(&s.background, &s.truth, &model.stats)?;
        clim.add(&climatology_field(model, &s.truth)?, &s.truth, &model.stats)?;
    }
    let variant = model.variant().to_string();
    Ok(Evaluation {
        analysis: acc.finish(setting.meta("", &variant))?,
        background: bg.finish(setting.meta("/background", "background"))?,
        climatology: clim.finish(setting.meta("/climatology", "climatology"))?,
    })
}

/// Evaluates at each observation grid (same ratio). With `fine_tune`, a copy of the model
/// first continues training at that resolution for `ceil(fraction · epochs)` epochs.
pub fn cross_resolution_eval(
    model: &AssimilationModel,
    cfg: &ExperimentConfig,
    data: &Datasets,
    grids: &[(usize, usize)],
    fine_tune: bool,
) -> Result<Vec<Evaluation>> {
    if !model.variant().is_flexible() {
        return Err(FnpError::IncompatibleVariant {
            variant: model.variant().to_string(),
            reason: "cross-resolution evaluation needs a variant that ingests observations directly".into(),
        });
    }
    let mut out = Vec::new();
    for &dims in grids {
        let obs = obs_spec(dims, cfg.ratio)?;
        let tuned;
        let m = if fine_tune {
            let mut opts = train_options(cfg);
            opts.epochs = (cfg.fine_tune_fraction * cfg.epochs as f64).ceil() as usize;
            tuned = train(model.clone(), &data.train, &data.val, &obs, &opts)?.0;
            &tuned
        } else {
            model
        };
        let setting = EvalSetting {
            experiment_id: format!("{}/{}x{}{}", cfg.experiment_id, dims.0, dims.1, if fine_tune { "/ft" } else { "" }),
            obs,
            lead_time_h: cfg.lead_time_h,
            fine_tuned: fine_tune,
            drop_background: false,
            seed: cfg.seed,
        };
        out.push(evaluate(m, &data.test, &setting)?);
    }
    Ok(out)
}

/// Trains and evaluates every configured variant on shared data, then sweeps the
/// observation ratio and lead time with the first variant. Each sweep point is trained on
/// its own setting.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<Evaluation>> {
    let base = Datasets::generate(&data_config(cfg)?)?;
    let mut out = Vec::new();
    for &variant in &cfg.ablation_variants {
        let (model, _) = train_variant(cfg, variant, &base)?;
        let mut setting = EvalSetting::from_config(cfg)?;
        setting.experiment_id = format!("{}/{variant}", cfg.experiment_id);
        out.push(evaluate(&model, &base.test, &setting)?);
    }
    let first = cfg.ablation_variants[0];
    for &ratio in &cfg.ablation_ratios {
        for &lead in &cfg.ablation_lead_times {
            if ratio == cfg.ratio && lead == cfg.lead_time_h {
                continue;
            }
            let sweep = ExperimentConfig {
                ratio,
                lead_time_h: lead,
                experiment_id: format!("{}/{first}/ratio{ratio}/lead{lead}", cfg.experiment_id),
                ..cfg.clone()
            };
            let data = if lead == cfg.lead_time_h { base.clone() } else { Datasets::generate(&data_config(&sweep)?)? };
            let (model, _) = train_variant(&sweep, first, &data)?;
            out.push(evaluate(&model, &data.test, &EvalSetting::from_config(&sweep)?)?);
        }
    }
    Ok(out)
}

/// Background grid helper for callers holding only a config.
pub fn background_grid(cfg: &ExperimentConfig) -> Result<LatLonGrid> {
    ExperimentConfig::grid(cfg.background_grid)
}
