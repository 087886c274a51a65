//! Overall MSE/MAE on standardised channels and per-channel latitude-weighted RMSE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::{Field, LatLonGrid};

/// Per-channel mean and standard deviation used to standardise values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(n_channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; n_channels], std: vec![1.0; n_channels] }
    }

    /// Pooled statistics over every grid point of every field.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a Field>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in fields {
            if sum.is_empty() {
                sum = vec![0.0; f.n_channels()];
                sq = vec![0.0; f.n_channels()];
            }
            if f.n_channels() != sum.len() {
                return Err(shape("fields disagree in channel count"));
            }
            for c in 0..f.n_channels() {
                for &v in f.channel(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += f.grid().len();
        }
        if count == 0 {
            return Err(invalid("cannot compute statistics of an empty set"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, field: &Field) -> Field {
        let n = field.grid().len();
        let values = field.values().iter().enumerate().map(|(k, v)| (v - self.mean[k / n]) / self.std[k / n]).collect();
        field.with_values(values).expect("standardising keeps values finite")
    }

    pub fn destandardize_values(&self, values: &[f64], n_per_channel: usize) -> Vec<f64> {
        values.iter().enumerate().map(|(k, v)| v * self.std[k / n_per_channel] + self.mean[k / n_per_channel]).collect()
    }
}

fn check_pair(estimate: &Field, truth: &Field) -> Result<()> {
    if !estimate.same_layout(truth) {
        return Err(shape("estimate and truth differ in grid or channel count"));
    }
    Ok(())
}

/// Latitude weights `H cos α_h / Σ_h' cos α_h'` for each row; they sum to `H` per column.
pub fn latitude_weights(grid: &LatLonGrid) -> Vec<f64> {
    let cos: Vec<f64> = grid.latitudes().iter().map(|lat| lat.to_radians().cos()).collect();
    let total: f64 = cos.iter().sum();
    let h = grid.n_lat() as f64;
    cos.iter().map(|c| h * c / total).collect()
}

/// Latitude-weighted RMSE of one channel.
pub fn latitude_weighted_rmse(estimate: &Field, truth: &Field, channel: usize) -> Result<f64> {
    check_pair(estimate, truth)?;
    if channel >= truth.n_channels() {
        return Err(invalid(format!("channel {channel} out of range")));
    }
    let grid = truth.grid();
    let weights = latitude_weights(grid);
    let (e, t) = (estimate.channel(channel), truth.channel(channel));
    let w = grid.n_lon();
    let mut acc = 0.0;
    for (i, wt) in weights.iter().enumerate() {
        for j in 0..w {
            let d = e[i * w + j] - t[i * w + j];
            acc += wt * d * d;
        }
    }
    Ok((acc / grid.len() as f64).sqrt())
}

/// Mean squared standardised error over channels and grid points.
pub fn overall_mse(estimate: &Field, truth: &Field, stats: &ChannelStats) -> Result<f64> {
    overall(estimate, truth, stats, |d| d * d)
}

/// Mean absolute standardised error over channels and grid points.
pub fn overall_mae(estimate: &Field, truth: &Field, stats: &ChannelStats) -> Result<f64> {
    overall(estimate, truth, stats, f64::abs)
}

fn overall(estimate: &Field, truth: &Field, stats: &ChannelStats, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_pair(estimate, truth)?;
    if stats.n_channels() != truth.n_channels() {
        return Err(shape("statistics and fields differ in channel count"));
    }
    let n = truth.grid().len();
    let mut acc = 0.0;
    for (k, (e, t)) in estimate.values().iter().zip(truth.values()).enumerate() {
        acc += f((e - t) / stats.std[k / n]);
    }
    Ok(acc / truth.values().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub experiment_id: String,
    pub variant: String,
    pub obs_resolution_deg: f64,
    pub ratio: f64,
    pub lead_time_h: f64,
    pub fine_tuned: bool,
    pub seed: u64,
}

/// Sample-averaged metrics for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub mse: f64,
    pub mae: f64,
    pub rmse_per_channel: BTreeMap<String, f64>,
    /// Channel names in field order.
    pub channel_order: Vec<String>,
    pub sample_count: usize,
}

/// Running average of per-sample metrics.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    channel_names: Vec<String>,
    mse: f64,
    mae: f64,
    rmse: Vec<f64>,
    count: usize,
}

impl MetricsAccumulator {
    pub fn new(channel_names: Vec<String>) -> Self {
        let n = channel_names.len();
        MetricsAccumulator { channel_names, mse: 0.0, mae: 0.0, rmse: vec![0.0; n], count: 0 }
    }

    pub fn add(&mut self, estimate: &Field, truth: &Field, stats: &ChannelStats) -> Result<()> {
        self.mse += overall_mse(estimate, truth, stats)?;
        self.mae += overall_mae(estimate, truth, stats)?;
        for c in 0..self.rmse.len() {
            self.rmse[c] += latitude_weighted_rmse(estimate, truth, c)?;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self, meta: ReportMeta) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(invalid("no samples were evaluated"));
        }
        let n = self.count as f64;
        let rmse_per_channel = self.channel_names.iter().cloned().zip(self.rmse.iter().map(|r| r / n)).collect();
        Ok(MetricsReport {
            meta,
            mse: self.mse / n,
            mae: self.mae / n,
            rmse_per_channel,
            channel_order: self.channel_names,
            sample_count: self.count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_equiangular_grid, ChannelMeta, Domain};

    fn field(grid: &LatLonGrid, values: Vec<f64>, n_ch: usize) -> Field {
        let ch = (0..n_ch).map(|c| ChannelMeta::new(format!("c{c}"), c as u32)).collect();
        Field::new(grid.clone(), ch, values).unwrap()
    }

    #[test]
    fn weights_sum_to_grid_size() {
        for (h, w) in [(4, 8), (7, 3), (128, 256)] {
            let g = LatLonGrid::global(h, w).unwrap();
            let total: f64 = latitude_weights(&g).iter().sum::<f64>() * w as f64;
            assert!((total - (h * w) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_and_unit_errors() {
        let g = LatLonGrid::global(4, 8).unwrap();
        let t = field(&g, (0..32).map(|k| k as f64).collect(), 1);
        assert_eq!(latitude_weighted_rmse(&t, &t, 0).unwrap(), 0.0);
        let e = field(&g, (0..32).map(|k| k as f64 + 1.0).collect(), 1);
        assert!((latitude_weighted_rmse(&e, &t, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let d = Domain { lat_min: -90.0, lat_max: 90.0, lon_min: 0.0, lon_max: 360.0 };
        let g = make_equiangular_grid(2, 2, d).unwrap();
        assert_eq!(g.latitudes(), vec![-45.0, 45.0]);
        let t = field(&g, vec![0.0; 4], 1);
        let e = field(&g, vec![1.0, 0.0, 0.0, 1.0], 1);
        // equal cos weights: each weight is 1, squared errors sum to 2, mean 0.5
        assert!((latitude_weighted_rmse(&e, &t, 0).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_standardized_error() {
        let g = LatLonGrid::global(3, 3).unwrap();
        let t = field(&g, vec![0.0; 18], 2);
        let e = field(&g, [vec![4.0; 9], vec![1.0; 9]].concat(), 2);
        let stats = ChannelStats { mean: vec![10.0, -3.0], std: vec![2.0, 0.5] };
        assert!((overall_mse(&e, &t, &stats).unwrap() - 4.0).abs() < 1e-15);
        assert!((overall_mae(&e, &t, &stats).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = field(&LatLonGrid::global(3, 3).unwrap(), vec![0.0; 9], 1);
        let b = field(&LatLonGrid::global(3, 4).unwrap(), vec![0.0; 12], 1);
        assert!(latitude_weighted_rmse(&a, &b, 0).is_err());
        assert!(overall_mse(&a, &b, &ChannelStats::identity(1)).is_err());
    }

    #[test]
    fn stats_of_fields() {
        let g = LatLonGrid::global(1, 2).unwrap();
        let f1 = field(&g, vec![1.0, 3.0], 1);
        let f2 = field(&g, vec![5.0, 7.0], 1);
        let s = ChannelStats::from_fields([&f1, &f2]).unwrap();
        assert_eq!(s.mean, vec![4.0]);
        assert!((s.std[0] - 5f64.sqrt()).abs() < 1e-12);
        let z = s.standardize(&f1);
        assert!((z.values()[0] + 3.0 / 5f64.sqrt()).abs() < 1e-12);
    }
}
