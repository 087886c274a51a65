//! Acceptance suite: one test per criterion, each printing a pass/fail line to stderr.
//! Trained models and datasets are shared through `OnceLock` caches.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::checks::*;
use fnp_core::config::ExperimentConfig;
use fnp_core::experiment::*;
use fnp_core::metrics::MetricsReport;
use fnp_core::model::{build_variant, AssimilationModel, VariantTag};
use fnp_core::train::{training_stats, Checkpoint, TrainLog};

const SEEDS: [u64; 3] = [0, 1, 2];

/// Criteria run one at a time so their runtimes are not shared.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn line(n: usize, pass: bool, detail: &str, elapsed: Duration) {
    let msg = format!(
        "criterion {n}: {} {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    std::io::stderr().write_all(msg.as_bytes()).unwrap();
}

/// Reduced-scale setting sized for a single CPU.
fn config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment_id = "acceptance".into();
    c.truth_grid = (32, 64);
    c.background_grid = (16, 32);
    c.obs_grid = (16, 32);
    c.eval_obs_grids = vec![(16, 32), (32, 64)];
    c.n_train = 128;
    c.n_val = 16;
    c.n_test = 32;
    c.epochs = 20;
    c.learning_rate = 2e-3;
    c.seed = seed;
    c.data_seed = 2024;
    c
}

struct Trained {
    model: AssimilationModel,
    log: TrainLog,
    eval: Evaluation,
}

fn data_for(cfg: &ExperimentConfig) -> Datasets {
    Datasets::generate(&data_config(cfg).unwrap()).unwrap()
}

fn base_data() -> &'static Datasets {
    static D: OnceLock<Datasets> = OnceLock::new();
    D.get_or_init(|| data_for(&config(0)))
}

fn train_eval(cfg: &ExperimentConfig, variant: VariantTag, data: &Datasets) -> Trained {
    let (model, log) = train_variant(cfg, variant, data).unwrap();
    let eval = evaluate(&model, &data.test, &EvalSetting::from_config(cfg).unwrap()).unwrap();
    Trained { model, log, eval }
}

/// Full FNP trained at the base setting for each seed, with the total training time.
fn fnp_runs() -> &'static (Vec<Trained>, Duration) {
    static R: OnceLock<(Vec<Trained>, Duration)> = OnceLock::new();
    R.get_or_init(|| {
        let t = Instant::now();
        let runs = SEEDS.iter().map(|&s| train_eval(&config(s), VariantTag::Fnp, base_data())).collect();
        (runs, t.elapsed())
    })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_mse<'a>(rs: impl IntoIterator<Item = &'a MetricsReport>) -> f64 {
    mean(rs.into_iter().map(|r| r.mse))
}

fn mean_channel_rmse<'a>(rs: impl IntoIterator<Item = &'a MetricsReport>) -> BTreeMap<String, f64> {
    let rs: Vec<_> = rs.into_iter().collect();
    let mut out = BTreeMap::new();
    for r in &rs {
        for (k, v) in &r.rmse_per_channel {
            *out.entry(k.clone()).or_insert(0.0) += v / rs.len() as f64;
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn criterion_01_exact_math() {
    let _serial = serial();
    let t = Instant::now();
    let n = 100;
    let sim = similarity_error(n, 11);
    let sel = selection_mismatches(n, 12);
    let rmse = rmse_error(n, 13);
    let nll = nll_error(n, 14);
    let cost = cost_error(n, 15);
    let pass = sim <= 1e-12 && sel == 0 && rmse <= 1e-12 && nll <= 1e-12 && cost <= 1e-12 && t.elapsed().as_secs() < 60;
    line(
        1,
        pass,
        &format!("similarity {sim:.1e}, selection mismatches {sel}, rmse {rmse:.1e}, nll {nll:.1e}, cost {cost:.1e} over {n} instances"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_02_variational_solve() {
    let _serial = serial();
    let t = Instant::now();
    let (dx, grad) = variational_errors(50, 21);
    let pass = dx <= 1e-6 && grad <= 1e-8 && t.elapsed().as_secs() < 60;
    line(2, pass, &format!("max |x_a - x_iter| {dx:.1e}, max gradient norm {grad:.1e} over 50 problems"), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_03_structural_invariants() {
    let _serial = serial();
    let t = Instant::now();
    let perm = permutation_error(20, 31);
    let on_grid = on_grid_error(20, 32);
    let leak = truncation_leak(20, 33);
    let copy = exact_copy_violations(50, 34);
    let align = align_error(50, 35);
    let pass = perm <= 1e-6 && on_grid <= 1e-6 && leak <= 1e-10 && copy == 0 && align <= 1e-10 && t.elapsed().as_secs() < 120;
    line(
        3,
        pass,
        &format!("permutation {perm:.1e}, on-grid {on_grid:.1e}, out-of-band {leak:.1e}, copy violations {copy}, align {align:.1e}"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_04_gradients() {
    let _serial = serial();
    let t = Instant::now();
    let errs = [
        ("setconv", setconv_gradient_error(41)),
        ("nfl", nfl_gradient_error(42)),
        ("dam", dam_gradient_error(43)),
        ("decoder", decoder_gradient_error(44)),
        ("nll", nll_gradient_error(45)),
    ];
    let pass = errs.iter().all(|(_, e)| *e <= 1e-4) && t.elapsed().as_secs() < 300;
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    line(4, pass, &detail.join(", "), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_05_training_beats_background() {
    let _serial = serial();
    let (runs, elapsed) = fnp_runs();
    let trained = mean_mse(runs.iter().map(|r| &r.eval.analysis));
    let background = mean_mse(runs.iter().map(|r| &r.eval.background));
    let untrained = mean(SEEDS.iter().map(|&s| {
        let cfg = config(s);
        let data = base_data();
        let m = build_variant(&model_config(&cfg, VariantTag::Fnp).unwrap(), training_stats(&data.train).unwrap()).unwrap();
        evaluate(&m, &data.test, &EvalSetting::from_config(&cfg).unwrap()).unwrap().analysis.mse
    }));
    let reduction = 1.0 - trained / background;
    let pass = trained < background && trained < untrained && elapsed.as_secs() <= 7200;
    line(
        5,
        pass,
        &format!(
            "mse trained {trained:.4}, background {background:.4}, untrained {untrained:.4}; reduction {:.1}% (target 15%)",
            100.0 * reduction
        ),
        *elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_06_resolution_trend() {
    let _serial = serial();
    let (runs, _) = fnp_runs();
    let t = Instant::now();
    let data = base_data();
    let (mut same, mut dense, mut unseen) = (Vec::new(), Vec::new(), Vec::new());
    for r in runs {
        let cfg = config(r.model.config.seed);
        same.push(cross_resolution_eval(&r.model, &cfg, data, &[(16, 32)], true).unwrap().remove(0));
        dense.push(cross_resolution_eval(&r.model, &cfg, data, &[(32, 64)], true).unwrap().remove(0));
        unseen.push(cross_resolution_eval(&r.model, &cfg, data, &[(32, 64)], false).unwrap().remove(0));
    }
    let base = mean_channel_rmse(same.iter().map(|e| &e.analysis));
    let fine = mean_channel_rmse(dense.iter().map(|e| &e.analysis));
    let wins = base.iter().filter(|(k, v)| fine[*k] < **v).count();
    let unseen_mse = mean_mse(unseen.iter().map(|e| &e.analysis));
    let unseen_bg = mean_mse(unseen.iter().map(|e| &e.background));
    let finite = unseen.iter().all(|e| e.analysis.mse.is_finite() && e.analysis.rmse_per_channel.values().all(|v| v.is_finite()));
    let pass = wins >= 3 && finite && unseen_mse < unseen_bg && t.elapsed().as_secs() <= 3600;
    let chans: Vec<String> = base.iter().map(|(k, v)| format!("{k} {v:.4}->{:.4}", fine[k])).collect();
    line(
        6,
        pass,
        &format!(
            "denser obs wins {wins}/4 channels [{}]; unseen resolution without fine-tuning mse {unseen_mse:.4} vs background {unseen_bg:.4}",
            chans.join(", ")
        ),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_07_ablation_ordering() {
    let _serial = serial();
    let (runs, base_time) = fnp_runs();
    let t = Instant::now();
    let full = mean_mse(runs.iter().map(|r| &r.eval.analysis));
    let mut inversions = Vec::new();
    let mut detail = vec![format!("fnp {full:.4}")];
    for variant in [VariantTag::FnpNoNfl, VariantTag::FnpNoDam, VariantTag::FnpNoSvd] {
        let m = mean(SEEDS.iter().map(|&s| train_eval(&config(s), variant, base_data()).eval.analysis.mse));
        detail.push(format!("{variant} {m:.4}"));
        if full > m {
            inversions.push(rel(full, m));
        }
    }
    let tolerated = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.02);
    let pass = tolerated && t.elapsed() <= 3 * *base_time;
    let inv: Vec<String> = inversions.iter().map(|x| format!("{:.2}%", 100.0 * x)).collect();
    line(7, pass, &format!("mse {}; inversions [{}]", detail.join(", "), inv.join(", ")), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_08_reconstruction() {
    let _serial = serial();
    let (runs, _) = fnp_runs();
    let t = Instant::now();
    let evals: Vec<Evaluation> = runs
        .iter()
        .map(|r| {
            let mut s = EvalSetting::from_config(&config(r.model.config.seed)).unwrap();
            s.drop_background = true;
            evaluate(&r.model, &base_data().test, &s).unwrap()
        })
        .collect();
    let recon = mean_mse(evals.iter().map(|e| &e.analysis));
    let clim = mean_mse(evals.iter().map(|e| &e.climatology));
    let finite = evals.iter().all(|e| e.analysis.mse.is_finite() && e.analysis.mae.is_finite());
    let pass = finite && recon < clim && t.elapsed().as_secs() < 600;
    line(8, pass, &format!("reconstruction mse {recon:.4} vs climatology {clim:.4}"), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_09_sparse_and_long_lead() {
    let _serial = serial();
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for (ratio, lead) in [(0.01, 24.0), (0.1, 48.0)] {
        let cfgs: Vec<_> = SEEDS
            .iter()
            .map(|&s| ExperimentConfig { ratio, lead_time_h: lead, ..config(s) })
            .collect();
        let data = if lead == config(0).lead_time_h { base_data().clone() } else { data_for(&cfgs[0]) };
        let evals: Vec<Evaluation> = cfgs.iter().map(|c| train_eval(c, VariantTag::Fnp, &data).eval).collect();
        let a = mean_mse(evals.iter().map(|e| &e.analysis));
        let b = mean_mse(evals.iter().map(|e| &e.background));
        pass &= a < b;
        parts.push(format!("ratio {ratio} lead {lead}h: mse {a:.4} vs background {b:.4}"));
    }
    pass &= t.elapsed().as_secs() <= 3600;
    line(9, pass, &parts.join("; "), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_10_reproducibility() {
    let _serial = serial();
    let (runs, _) = fnp_runs();
    let t = Instant::now();
    let first = &runs[0];
    let cfg = config(first.model.config.seed);
    let again = train_eval(&cfg, VariantTag::Fnp, base_data());

    let mut worst: f64 = rel(again.log.initial_train_nll, first.log.initial_train_nll);
    for (a, b) in again.log.epochs.iter().zip(&first.log.epochs) {
        worst = worst.max(rel(a.train_nll, b.train_nll)).max(rel(a.val_nll, b.val_nll));
    }
    let same_len = again.log.epochs.len() == first.log.epochs.len();
    let metric_err = |x: &MetricsReport, y: &MetricsReport| {
        x.rmse_per_channel.iter().map(|(k, v)| rel(*v, y.rmse_per_channel[k])).fold(rel(x.mse, y.mse), f64::max)
    };
    worst = worst.max(metric_err(&again.eval.analysis, &first.eval.analysis));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    Checkpoint::new(&first.model, first.log.clone(), cfg.to_pairs()).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let reloaded = evaluate(&restored, &base_data().test, &EvalSetting::from_config(&cfg).unwrap()).unwrap();
    let ckpt_err = metric_err(&reloaded.analysis, &first.eval.analysis);

    let pass = same_len && worst <= 1e-6 && ckpt_err <= 1e-6;
    line(10, pass, &format!("repeat run max relative difference {worst:.1e}, checkpoint round trip {ckpt_err:.1e}"), t.elapsed());
    assert!(pass);
}
