//! `fnp` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use fnp_core::config::ExperimentConfig;
use fnp_core::data::{load_split, write_dataset, Manifest, Sample, Split, MANIFEST_FILE};
use fnp_core::experiment::{cross_resolution_eval, data_config, evaluate, train_variant, ablate, Datasets, EvalSetting};
use fnp_core::grid::Field;
use fnp_core::io::{read_field, read_obs, write_field};
use fnp_core::report::{collect_reports, write_plots, write_reports};
use fnp_core::train::{Checkpoint, EVAL_OBS_STREAM};
use fnp_core::var3d::{solve, VarProblemFile};
use fnp_core::{FnpError, Result};

const CHECKPOINT_FILE: &str = "checkpoint.json";
/// Example fields saved by `evaluate` and rendered by `report`.
const SAMPLE_FIELDS: [&str; 4] = ["truth", "background", "analysis", "variance"];

#[derive(Parser)]
#[command(name = "fnp", version, about = "Arbitrary-resolution data assimilation with Fourier neural processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured data directory.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured variant and write `checkpoint.json` to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test split, including the extra observation grids.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Assimilate one background field and observation set.
    Assimilate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a full field from observations alone.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the configured ablation variants and sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve a 3D-Var problem given as JSON.
    Varsolve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report files and render example plots.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData { config } => {
            let cfg = ExperimentConfig::from_file(config)?;
            let dir = cfg.data_path();
            let manifest = write_dataset(&data_config(&cfg)?, &dir)?;
            info!("wrote {} samples to {}", manifest.entries.len(), dir.display());
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(config)?;
            let data = load_datasets(&cfg)?;
            let (model, log) = train_variant(&cfg, cfg.variant, &data)?;
            let out = cfg.output_path();
            fs::create_dir_all(&out)?;
            let path = out.join(CHECKPOINT_FILE);
            Checkpoint::new(&model, log, cfg.to_pairs()).save(&path)?;
            info!("saved {}", path.display());
        }
        Command::Evaluate { ckpt, config } => {
            let cfg = ExperimentConfig::from_file(config)?;
            let model = Checkpoint::load(ckpt)?.to_model()?;
            let data = load_datasets(&cfg)?;
            let setting = EvalSetting::from_config(&cfg)?;
            let mut reports = evaluate(&model, &data.test, &setting)?.reports();
            if model.variant().is_flexible() {
                let extra: Vec<_> = cfg.eval_obs_grids.iter().copied().filter(|&g| g != cfg.obs_grid).collect();
                for ev in cross_resolution_eval(&model, &cfg, &data, &extra, cfg.fine_tune)? {
                    reports.push(ev.analysis);
                }
            }
            let out = cfg.output_path();
            write_reports(&reports, &out)?;
            save_example(&model, &data.test[0], &setting, &out)?;
            info!("wrote {} reports to {}", reports.len(), out.display());
        }
        Command::Assimilate { ckpt, background, obs, out } => {
            let model = Checkpoint::load(ckpt)?.to_model()?;
            let analysis = model.assimilate(&read_field(background)?, &read_obs(obs)?, false)?;
            write_field(&analysis.mean, &out)?;
            write_field(&analysis.variance, variance_path(&out))?;
        }
        Command::Reconstruct { ckpt, obs, out } => {
            let ck = Checkpoint::load(ckpt)?;
            let echo: String = ck.config_echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            let cfg = ExperimentConfig::parse(&echo)?;
            let model = ck.to_model()?;
            let empty = Field::zeros(ExperimentConfig::grid(cfg.background_grid)?, model.config.channels.clone());
            let analysis = model.assimilate(&empty, &read_obs(obs)?, true)?;
            write_field(&analysis.mean, &out)?;
            write_field(&analysis.variance, variance_path(&out))?;
        }
        Command::Ablate { config } => {
            let cfg = ExperimentConfig::from_file(config)?;
            let reports: Vec<_> = ablate(&cfg)?.iter().flat_map(|e| e.reports()).collect();
            let out = cfg.output_path().join("ablate");
            write_reports(&reports, &out)?;
            info!("wrote {} reports to {}", reports.len(), out.display());
        }
        Command::Varsolve { problem, out } => {
            let file: VarProblemFile = serde_json::from_str(&fs::read_to_string(problem)?)?;
            let solution = solve(&file.into_problem()?)?;
            fs::write(out, serde_json::to_string_pretty(&solution)?)?;
        }
        Command::Report { input, out } => {
            let reports = collect_reports(&input)?;
            write_reports(&reports, &out)?;
            if let Some(fields) = load_example(&input)? {
                let [t, b, a, v] = &fields;
                let channels: Vec<usize> = (0..t.n_channels()).collect();
                write_plots(&out.join("plots"), "sample", t, b, a, v, &channels)?;
            }
            info!("wrote {} reports to {}", reports.len(), out.display());
        }
    }
    Ok(())
}

/// Loads the dataset written by `generate-data`, checking it matches the configured grids.
fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = cfg.data_path();
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(FnpError::Config(format!("no dataset at {}; run generate-data first", dir.display())));
    }
    let manifest = Manifest::load(&dir)?;
    let data = Datasets {
        train: load_split(&manifest, &dir, Split::Train)?,
        val: load_split(&manifest, &dir, Split::Val)?,
        test: load_split(&manifest, &dir, Split::Test)?,
    };
    let bg = ExperimentConfig::grid(cfg.background_grid)?;
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        if !s.background.grid().approx_eq(&bg) || s.background.n_channels() != cfg.channels.len() {
            return Err(FnpError::Config(format!("dataset sample {} does not match the configured grid and channels", s.seed)));
        }
    }
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(FnpError::Config("dataset has an empty split".into()));
    }
    Ok(data)
}

fn variance_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_variance.{}", ext.to_string_lossy()),
        None => format!("{stem}_variance"),
    };
    out.with_file_name(name)
}

fn save_example(model: &fnp_core::model::AssimilationModel, sample: &Sample, setting: &EvalSetting, dir: &Path) -> Result<()> {
    let obs = sample.observations(&setting.obs, EVAL_OBS_STREAM, 0)?;
    let analysis = model.assimilate(&sample.background, &obs, setting.drop_background)?;
    let fields = [&sample.truth, &sample.background, &analysis.mean, &analysis.variance];
    for (name, f) in SAMPLE_FIELDS.iter().zip(fields) {
        write_field(f, dir.join(format!("sample_{name}.fnpg")))?;
    }
    Ok(())
}

fn load_example(dir: &Path) -> Result<Option<[Field; 4]>> {
    let paths: Vec<PathBuf> = SAMPLE_FIELDS.iter().map(|n| dir.join(format!("sample_{n}.fnpg"))).collect();
    if !paths.iter().all(|p| p.is_file()) {
        return Ok(None);
    }
    Ok(Some([read_field(&paths[0])?, read_field(&paths[1])?, read_field(&paths[2])?, read_field(&paths[3])?]))
}
