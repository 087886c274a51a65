//! Pointwise decoder to per-channel Gaussian mean/variance, and the Gaussian NLL.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, FnpError, Result};
use crate::grid::{normalize_in_domain, LatLonGrid};
use crate::interp::BilinearPlan;
use crate::tensor::{softplus, ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// Per-channel analysis mean and variance at a set of target points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDistribution {
    pub n_channels: usize,
    pub n_targets: usize,
    /// `[channels, n_targets]`
    pub mean: Vec<f64>,
    /// `[channels, n_targets]`, every entry above the variance floor
    pub variance: Vec<f64>,
}

impl AnalysisDistribution {
    pub fn mean_channel(&self, c: usize) -> &[f64] {
        &self.mean[c * self.n_targets..(c + 1) * self.n_targets]
    }

    pub fn variance_channel(&self, c: usize) -> &[f64] {
        &self.variance[c * self.n_targets..(c + 1) * self.n_targets]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub in_width: usize,
    pub n_channels: usize,
    pub variance_floor: f64,
    /// `(weight, bias)` per layer; GELU between layers, none after the last.
    pub layers: Vec<(ParamId, ParamId)>,
}

/// Number of coordinate features appended to the representation: `u, sin πv, cos πv`.
pub const COORD_FEATURES: usize = 3;

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        hidden: &[usize],
        n_channels: usize,
        variance_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(variance_floor > 0.0) {
            return Err(invalid("variance floor must be positive"));
        }
        let mut widths = vec![in_width + COORD_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(2 * n_channels);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                // last layer starts small so initial predictions sit near zero mean, unit-ish variance
                let std = if l + 1 == n { 0.1 } else { 1.0 } / (fan_in as f64).sqrt();
                (
                    store.add(format!("{prefix}.{l}.weight"), Tensor::randn(vec![fan_out, fan_in], std, rng), true),
                    store.add(format!("{prefix}.{l}.bias"), Tensor::zeros(vec![fan_out]), false),
                )
            })
            .collect();
        Ok(Decoder { in_width, n_channels, variance_floor, layers })
    }

    /// Variance transform `floor + softplus(raw)`.
    pub fn variance_of(&self, raw: f64) -> f64 {
        self.variance_floor + softplus(raw)
    }

    /// Decodes `rep: [in_width, H, W]` on `grid` at `targets` (lat, lon). Returns
    /// `(mean, variance)` vars of shape `[channels, n_targets]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rep: Var,
        grid: &LatLonGrid,
        targets: &[(f64, f64)],
    ) -> Result<(Var, Var)> {
        let shp = tape.shape(rep).to_vec();
        if shp[0] != self.in_width || shp[1] != grid.n_lat() || shp[2] != grid.n_lon() {
            return Err(shape(format!("decoder expects [{}, {}, {}], got {shp:?}", self.in_width, grid.n_lat(), grid.n_lon())));
        }
        let domain = grid.domain();
        let coords = normalize_in_domain(targets, &domain)?;
        let nt = targets.len();
        let on_grid = nt == grid.len() && targets.iter().zip(grid.points()).all(|(a, b)| a == &b);
        let feats = if on_grid {
            tape.reshape(rep, vec![shp[0], nt])
        } else {
            let plan = Rc::new(BilinearPlan::new(grid, targets)?);
            let c = shp[0];
            let out = Tensor::new(vec![c, nt], plan.apply(&tape.value(rep).data, c));
            tape.fixed_linear(rep, out, move |g| plan.adjoint(g, c))
        };
        let mut cf = Vec::with_capacity(COORD_FEATURES * nt);
        cf.extend_from_slice(&coords.u);
        cf.extend(coords.v.iter().map(|v| (PI * v).sin()));
        cf.extend(coords.v.iter().map(|v| (PI * v).cos()));
        let cf = tape.constant(Tensor::new(vec![COORD_FEATURES, nt], cf));
        let mut h = tape.concat(&[feats, cf]);
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.linear(h, wv, bv);
            if l + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        let c = self.n_channels;
        let mean = tape.slice_rows(h, 0, c);
        let raw = tape.slice_rows(h, c, c);
        let sp = tape.softplus(raw);
        let var = tape.add_scalar(sp, self.variance_floor);
        Ok((mean, var))
    }
}

/// Gaussian NLL averaged over every entry, reduced in index order.
pub fn gaussian_nll_values(mean: &[f64], variance: &[f64], truth: &[f64]) -> Result<f64> {
    if mean.len() != variance.len() || mean.len() != truth.len() {
        return Err(shape("gaussian_nll: mean, variance and truth lengths differ"));
    }
    if mean.is_empty() {
        return Err(invalid("gaussian_nll of an empty batch"));
    }
    let mut acc = 0.0;
    for k in 0..mean.len() {
        let v = variance[k];
        if !(v > 0.0) {
            return Err(FnpError::Numeric(format!("non-positive variance {v} at entry {k}")));
        }
        let r = truth[k] - mean[k];
        acc += 0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v);
    }
    Ok(acc / mean.len() as f64)
}

/// Differentiable NLL against constant targets.
pub fn gaussian_nll(tape: &mut Tape, mean: Var, variance: Var, truth: &[f64]) -> Result<Var> {
    let vm = tape.value_rc(mean);
    let vv = tape.value_rc(variance);
    let loss = gaussian_nll_values(&vm.data, &vv.data, truth)?;
    let truth = truth.to_vec();
    let n = truth.len() as f64;
    Ok(tape.custom(Tensor::new(vec![1], vec![loss]), move |g| {
        let s = g[0] / n;
        let mut gm = Vec::with_capacity(truth.len());
        let mut gv = Vec::with_capacity(truth.len());
        for k in 0..truth.len() {
            let v = vv.data[k];
            let r = truth[k] - vm.data[k];
            gm.push(-s * r / v);
            gv.push(s * (0.5 / v - r * r / (2.0 * v * v)));
        }
        vec![(mean, gm), (variance, gv)]
    }))
}
