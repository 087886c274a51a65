//! Synthetic datasets: samples, seed-range splits and the on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{sample_observations, Field, LatLonGrid, ObservationSet};
use crate::io::{read_field, write_field};
use crate::seeds::sub_seed_indexed;
use crate::synth::{generate_background, generate_truth, BackgroundSpec, FieldSpec};

/// One assimilation case.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    /// Truth on the finest grid, the source of every observation.
    pub truth_fine: Field,
    /// Truth on the background grid, the evaluation target.
    pub truth: Field,
    pub background: Field,
}

/// Observation sampling setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpec {
    pub grid: LatLonGrid,
    pub ratio: f64,
}

impl Sample {
    /// Observations for this sample from a named stream; the same `(stream, index)` always
    /// gives the same set.
    pub fn observations(&self, spec: &ObsSpec, stream: &str, index: u64) -> Result<ObservationSet> {
        sample_observations(&self.truth_fine, &spec.grid, spec.ratio, sub_seed_indexed(self.seed, stream, index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Seeds of a split occupy their own range: train from the base seed, validation from
    /// base + 1 000 000, test from base + 2 000 000.
    pub fn seed(self, base: u64, index: usize) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        };
        base.wrapping_add(offset + index as u64)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub field: FieldSpec,
    pub background: BackgroundSpec,
    pub truth_grid: LatLonGrid,
    pub background_grid: LatLonGrid,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl DataConfig {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

pub fn make_sample(cfg: &DataConfig, seed: u64) -> Result<Sample> {
    let truth_fine = generate_truth(&cfg.field, &cfg.truth_grid, seed)?;
    let truth = truth_fine.resample_to(&cfg.background_grid)?;
    let background = generate_background(&truth, &cfg.background, seed)?;
    Ok(Sample { seed, truth_fine, truth, background })
}

pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Vec<Sample>> {
    (0..cfg.split_len(split)).map(|i| make_sample(cfg, split.seed(cfg.base_seed, i))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub truth_path: PathBuf,
    pub background_path: PathBuf,
    pub lead_time_h: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Writes every split under `dir` and returns the manifest (also saved there).
pub fn write_dataset(cfg: &DataConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.split_len(split) {
            let seed = split.seed(cfg.base_seed, i);
            let sample = make_sample(cfg, seed)?;
            let truth_path = PathBuf::from(format!("{}_{i:05}_truth.fnpg", split.as_str()));
            let background_path = PathBuf::from(format!("{}_{i:05}_background.fnpg", split.as_str()));
            write_field(&sample.truth_fine, dir.join(&truth_path))?;
            write_field(&sample.background, dir.join(&background_path))?;
            entries.push(ManifestEntry { split, truth_path, background_path, lead_time_h: cfg.background.lead_time_h, seed });
        }
    }
    let manifest = Manifest { entries };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loads one split; the evaluation truth is the stored fine truth resampled onto the
/// background grid.
pub fn load_split(manifest: &Manifest, dir: &Path, split: Split) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|e| {
            let truth_fine = read_field(dir.join(&e.truth_path))?;
            let background = read_field(dir.join(&e.background_path))?;
            if truth_fine.n_channels() != background.n_channels() {
                return Err(invalid(format!("sample {} has mismatched channel counts", e.seed)));
            }
            let truth = truth_fine.resample_to(background.grid())?;
            Ok(Sample { seed: e.seed, truth_fine, truth, background })
        })
        .collect()
}
