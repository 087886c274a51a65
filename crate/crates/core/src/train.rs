//! Training loop and checkpoints.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ObsSpec, Sample};
use crate::decoder::gaussian_nll;
use crate::error::{FnpError, Result};
use crate::metrics::ChannelStats;
use crate::model::{build_variant, AssimilationModel, ModelConfig};
use crate::seeds::{rng_for, sub_seed_indexed};
use crate::tensor::{AdamW, Tape, Tensor};

/// Stream names for observation draws.
pub const TRAIN_OBS_STREAM: &str = "train-obs";
pub const EVAL_OBS_STREAM: &str = "eval-obs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 20, learning_rate: 1e-4, weight_decay: 1e-2, batch_size: 4, grad_clip: Some(5.0), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean NLL of the initial parameters on the training and validation sets.
    pub initial_train_nll: f64,
    pub initial_val_nll: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = initialisation).
    pub best_epoch: usize,
}

/// NLL of one sample on the standardised background grid, as a tape node.
pub fn sample_loss(
    model: &AssimilationModel,
    tape: &mut Tape,
    sample: &Sample,
    obs: &crate::grid::ObservationSet,
    drop_background: bool,
) -> Result<crate::tensor::Var> {
    let stats = &model.stats;
    let bg = stats.standardize(&sample.background);
    let truth = stats.standardize(&sample.truth);
    let ob = obs.standardized(&stats.mean, &stats.std);
    let grid = sample.background.grid();
    let (m, v) = model.forward(tape, &bg, &ob, drop_background, &grid.points())?;
    gaussian_nll(tape, m, v, truth.values())
}

/// Mean NLL over samples with observations from `stream` (index 0).
pub fn mean_nll(model: &AssimilationModel, samples: &[Sample], obs: &ObsSpec, stream: &str) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let o = s.observations(obs, stream, 0)?;
        let mut tape = Tape::new();
        let l = sample_loss(model, &mut tape, s, &o, false)?;
        acc += tape.value(l).data[0];
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Normalisation statistics of the training truths.
pub fn training_stats(train: &[Sample]) -> Result<ChannelStats> {
    ChannelStats::from_fields(train.iter().map(|s| &s.truth))
}

/// AdamW on the Gaussian NLL. Every epoch visits the training set in a seeded order and
/// draws fresh observations per sample; the parameters with the lowest validation NLL
/// (initialisation included) are returned with the log.
pub fn train(
    mut model: AssimilationModel,
    train_set: &[Sample],
    val_set: &[Sample],
    obs: &ObsSpec,
    opts: &TrainOptions,
) -> Result<(AssimilationModel, TrainLog)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FnpError::Config("training and validation sets must be non-empty".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(FnpError::Config("batch size and learning rate must be positive".into()));
    }
    let mut log = TrainLog {
        initial_train_nll: mean_nll(&model, train_set, obs, TRAIN_OBS_STREAM)?,
        initial_val_nll: mean_nll(&model, val_set, obs, EVAL_OBS_STREAM)?,
        ..TrainLog::default()
    };
    info!("initial nll: train {:.5} val {:.5}", log.initial_train_nll, log.initial_val_nll);
    let mut best_val = log.initial_val_nll;
    let mut best_params = model.store.clone();
    let mut opt = AdamW::new(&model.store, opts.learning_rate, opts.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = rng_for(opts.seed, "shuffle");
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = model.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &k in batch {
                let sample = &train_set[k];
                let o = sample.observations(obs, TRAIN_OBS_STREAM, sub_seed_indexed(opts.seed, "epoch", epoch as u64))?;
                let mut tape = Tape::new();
                let l = sample_loss(&model, &mut tape, sample, &o, false)?;
                let lv = tape.value(l).data[0];
                if !lv.is_finite() {
                    return Err(FnpError::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b}, sample seed {}",
                        sample.seed
                    )));
                }
                epoch_loss += lv;
                let g = tape.backward(l);
                for (acc, gi) in grads.iter_mut().zip(tape.param_grads(&model.store, &g)) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v / batch.len() as f64);
                }
            }
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(FnpError::Numeric(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            if let Some(clip) = opts.grad_clip {
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            opt.step(&mut model.store, &grads);
        }
        let train_nll = epoch_loss / train_set.len() as f64;
        let val_nll = mean_nll(&model, val_set, obs, EVAL_OBS_STREAM)?;
        info!("epoch {epoch}: train nll {train_nll:.5} val nll {val_nll:.5}");
        log.epochs.push(EpochLog { epoch, train_nll, val_nll });
        if val_nll < best_val {
            best_val = val_nll;
            best_params = model.store.clone();
            log.best_epoch = epoch;
        }
    }
    model.store = best_params;
    Ok((model, log))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub stats: ChannelStats,
    pub parameters: Vec<(String, Tensor)>,
    pub log: TrainLog,
    /// Flat key/value echo of the experiment configuration.
    pub config_echo: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: &AssimilationModel, log: TrainLog, config_echo: Vec<(String, String)>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            stats: model.stats.clone(),
            parameters: model.named_parameters(),
            log,
            config_echo,
        }
    }

    pub fn to_model(&self) -> Result<AssimilationModel> {
        let mut m = build_variant(&self.model, self.stats.clone())?;
        m.load_parameters(&self.parameters)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        #[derive(Deserialize)]
        struct VersionOnly {
            version: u32,
        }
        let v: VersionOnly = serde_json::from_slice(&bytes)?;
        if v.version != CHECKPOINT_VERSION {
            return Err(FnpError::CheckpointVersion { found: v.version, expected: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_slice(&bytes)?)
    }
}
