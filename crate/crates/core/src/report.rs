//! Metrics CSV, text summary and raster plots.
//!
//! CSV columns: `experiment_id, variant, obs_resolution_deg, ratio, lead_time_h,
//! fine_tuned, channel, rmse, mse, mae, seed`, one row per report and channel in field
//! order. `mse` and `mae` are the report-wide standardised values, repeated on each row.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{invalid, FnpError, Result};
use crate::grid::Field;
use crate::metrics::MetricsReport;

pub const CSV_HEADER: &str = "experiment_id,variant,obs_resolution_deg,ratio,lead_time_h,fine_tuned,channel,rmse,mse,mae,seed";

fn check_reports(reports: &[MetricsReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(invalid("no reports to write"));
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.meta.experiment_id.as_str()) {
            return Err(FnpError::DuplicateExperiment(r.meta.experiment_id.clone()));
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(reports: &[MetricsReport]) -> Result<String> {
    check_reports(reports)?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.meta;
        for ch in &r.channel_order {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&m.experiment_id),
                csv_field(&m.variant),
                m.obs_resolution_deg,
                m.ratio,
                m.lead_time_h,
                m.fine_tuned,
                csv_field(ch),
                r.rmse_per_channel[ch],
                r.mse,
                r.mae,
                m.seed
            );
        }
    }
    Ok(out)
}

pub fn summary(reports: &[MetricsReport]) -> Result<String> {
    check_reports(reports)?;
    let mut out = String::new();
    let _ = writeln!(out, "{:<48} {:<14} {:>8} {:>6} {:>6} {:>10} {:>10}", "experiment", "variant", "res_deg", "ratio", "lead", "mse", "mae");
    for r in reports {
        let m = &r.meta;
        let _ = writeln!(
            out,
            "{:<48} {:<14} {:>8.4} {:>6} {:>6} {:>10.5} {:>10.5}",
            m.experiment_id, m.variant, m.obs_resolution_deg, m.ratio, m.lead_time_h, r.mse, r.mae
        );
        let rmse: Vec<String> = r.channel_order.iter().map(|c| format!("{c}={:.4}", r.rmse_per_channel[c])).collect();
        let _ = writeln!(out, "    rmse: {}  (n={})", rmse.join(" "), r.sample_count);
    }
    Ok(out)
}

pub fn write_reports(reports: &[MetricsReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), to_csv(reports)?)?;
    fs::write(dir.join("summary.txt"), summary(reports)?)?;
    fs::write(dir.join("reports.json"), serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

/// Collects `reports.json` files directly inside `dir` and its immediate subdirectories.
pub fn collect_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut files = Vec::new();
    let top = dir.join("reports.json");
    if top.is_file() {
        files.push(top);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        let f = d.join("reports.json");
        if f.is_file() {
            files.push(f);
        }
    }
    let mut out = Vec::new();
    for f in files {
        let mut r: Vec<MetricsReport> = serde_json::from_str(&fs::read_to_string(&f)?)?;
        out.append(&mut r);
    }
    Ok(out)
}

/// Blue-white-red ramp on `[-1, 1]`.
fn diverging(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let (r, g, b) = if t < 0.0 { (1.0 + t, 1.0 + t, 1.0) } else { (1.0, 1.0 - t, 1.0 - t) };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Black-to-yellow ramp on `[0, 1]`.
fn sequential(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([(255.0 * t.sqrt()) as u8, (255.0 * t) as u8, (80.0 * (1.0 - t)) as u8])
}

/// Renders one channel with north at the top, each cell `scale` pixels wide. Signed
/// fields use a symmetric diverging scale, non-negative ones a sequential scale.
pub fn render_channel(field: &Field, channel: usize, scale: u32) -> RgbImage {
    let (h, w) = field.grid().shape();
    let x = field.channel(channel);
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let signed = lo < 0.0;
    let span = if signed { lo.abs().max(hi.abs()) } else { hi - lo };
    let span = if span > 0.0 { span } else { 1.0 };
    let north_first = field.grid().dlat() < 0.0;
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (px, py, p) in img.enumerate_pixels_mut() {
        let row = (py / scale) as usize;
        let i = if north_first { row } else { h - 1 - row };
        let v = x[i * w + (px / scale) as usize];
        *p = if signed { diverging(v / span) } else { sequential((v - lo) / span) };
    }
    img
}

/// Panels written by [`write_plots`].
pub const PLOT_PANELS: [&str; 6] = ["truth", "background", "analysis", "increment", "error", "variance"];

/// Writes the six panels for each selected channel as `<prefix>_<panel>_<channel>.png`.
pub fn write_plots(
    dir: &Path,
    prefix: &str,
    truth: &Field,
    background: &Field,
    analysis: &Field,
    variance: &Field,
    channels: &[usize],
) -> Result<Vec<PathBuf>> {
    if !(truth.same_layout(background) && truth.same_layout(analysis) && truth.same_layout(variance)) {
        return Err(invalid("plot inputs must share one grid and channel list"));
    }
    fs::create_dir_all(dir)?;
    let sub = |a: &Field, b: &Field| -> Result<Field> {
        a.with_values(a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect())
    };
    let increment = sub(analysis, background)?;
    let error = sub(analysis, truth)?;
    let panels = [truth, background, analysis, &increment, &error, variance];
    let mut written = Vec::new();
    for &c in channels {
        if c >= truth.n_channels() {
            return Err(invalid(format!("channel {c} out of range")));
        }
        let name = &truth.channels()[c].name;
        for (panel, field) in PLOT_PANELS.iter().zip(panels) {
            let path = dir.join(format!("{prefix}_{panel}_{name}.png"));
            render_channel(field, c, 8).save(&path).map_err(|e| FnpError::Image(e.to_string()))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ChannelMeta, LatLonGrid};
    use crate::metrics::ReportMeta;
    use std::collections::BTreeMap;

    fn report(id: &str) -> MetricsReport {
        let mut rmse = BTreeMap::new();
        rmse.insert("b".to_string(), 0.5);
        rmse.insert("a".to_string(), 0.25);
        MetricsReport {
            meta: ReportMeta {
                experiment_id: id.into(),
                variant: "fnp".into(),
                obs_resolution_deg: 5.625,
                ratio: 0.1,
                lead_time_h: 24.0,
                fine_tuned: false,
                seed: 3,
            },
            mse: 0.1,
            mae: 0.2,
            rmse_per_channel: rmse,
            channel_order: vec!["b".into(), "a".into()],
            sample_count: 4,
        }
    }

    #[test]
    fn one_row_per_channel_in_field_order() {
        let csv = to_csv(&[report("x")]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "x,fnp,5.625,0.1,24,false,b,0.5,0.1,0.2,3");
        assert!(lines[2].contains(",a,0.25,"));
    }

    #[test]
    fn duplicates_and_empty_input_are_rejected() {
        assert!(matches!(to_csv(&[report("x"), report("x")]), Err(FnpError::DuplicateExperiment(_))));
        assert!(to_csv(&[]).is_err());
    }

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let grid = LatLonGrid::global(4, 8).unwrap();
        let f = Field::new(grid, vec![ChannelMeta::new("t", 0)], (0..32).map(|k| k as f64 - 10.0).collect()).unwrap();
        let paths = write_plots(dir.path(), "s0", &f, &f, &f, &f, &[0]).unwrap();
        assert_eq!(paths.len(), 6);
        for p in paths {
            assert!(fs::metadata(p).unwrap().len() > 0);
        }
    }
}
