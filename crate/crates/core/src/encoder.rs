//! SetConv embedding of conditional sets and the spatial-variable decoupled representation.
//!
//! For reference-grid point `g` and input channel `c`:
//!
//! ```text
//! density_c(g) = Σ_i m_ic k_c(g, x_i)
//! signal_c(g)  = Σ_i m_ic k_c(g, x_i) y_ic / density_c(g)     (0 where density_c ≤ 1e-8)
//! k_c(g, x)    = exp(-|g - x|² / ℓ_c²)
//! ```
//!
//! with distances in normalised coordinates (longitude wrapped on periodic domains) and
//! `ℓ_c = exp(log_ℓ_c)`. The kernel is evaluated only within `5ℓ` of each point, where its
//! value has fallen below 1.4e-11. The `2C` raw channels pass through a pointwise linear map
//! to `embed_dim` channels; the channel-mean density is prepended, giving a feature map of
//! `embed_dim + 1` channels whose channel 0 is density.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::grid::{channel_groups, normalize_in_domain, ChannelMeta, Domain, Field, LatLonGrid, ObservationSet};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DENSITY_EPS: f64 = 1e-8;
/// Kernel support radius in length scales.
pub const KERNEL_CUTOFF: f64 = 5.0;

/// Conditional points in normalised coordinates with per-channel presence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSet {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub n_channels: usize,
    /// `n × n_channels`, row-major; absent entries hold 0 and are never read.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Per-point quadrature weight applied to both density and signal sums.
    pub weight: Vec<f64>,
}

impl ConditionalSet {
    pub fn empty(n_channels: usize) -> Self {
        ConditionalSet { u: vec![], v: vec![], n_channels, values: vec![], mask: vec![], weight: vec![] }
    }

    pub fn from_observations(obs: &ObservationSet, domain: &Domain) -> Result<Self> {
        let nc = normalize_in_domain(obs.coords(), domain)?;
        let values = obs.raw_values().iter().zip(obs.mask()).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let weight = vec![1.0; nc.u.len()];
        Ok(ConditionalSet { u: nc.u, v: nc.v, n_channels: obs.n_channels(), values, mask: obs.mask().to_vec(), weight })
    }

    /// Sets every point's quadrature weight to `w`.
    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight.iter_mut().for_each(|x| *x = w);
        self
    }

    /// Every grid point of a field as a fully observed conditional point.
    pub fn from_field(field: &Field) -> Result<Self> {
        Self::from_observations(&ObservationSet::from_field(field), &field.grid().domain())
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Restriction to a subset of channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        let c = self.n_channels;
        let k = channels.len();
        let mut values = Vec::with_capacity(self.len() * k);
        let mut mask = Vec::with_capacity(self.len() * k);
        for p in 0..self.len() {
            for &ch in channels {
                values.push(self.values[p * c + ch]);
                mask.push(self.mask[p * c + ch]);
            }
        }
        ConditionalSet { u: self.u.clone(), v: self.v.clone(), n_channels: k, values, mask, weight: self.weight.clone() }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let c = self.n_channels;
        let mut out = ConditionalSet::empty(c);
        for &p in order {
            out.u.push(self.u[p]);
            out.v.push(self.v[p]);
            out.values.extend_from_slice(&self.values[p * c..(p + 1) * c]);
            out.mask.extend_from_slice(&self.mask[p * c..(p + 1) * c]);
            out.weight.push(self.weight[p]);
        }
        out
    }
}

/// Normalised centre coordinates of a reference grid.
#[derive(Debug, Clone)]
pub struct RefGrid {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub periodic: bool,
}

impl RefGrid {
    pub fn new(grid: &LatLonGrid) -> Self {
        let d = grid.domain();
        let rows = grid.latitudes().iter().map(|lat| 2.0 * (lat - d.lat_min) / d.lat_extent() - 1.0).collect();
        let cols = grid.longitudes().iter().map(|lon| 2.0 * (lon - d.lon_min) / d.lon_extent() - 1.0).collect();
        RefGrid { rows, cols, periodic: d.periodic_lon() }
    }

    pub fn h(&self) -> usize {
        self.rows.len()
    }

    pub fn w(&self) -> usize {
        self.cols.len()
    }
}

/// Signed offset between normalised coordinates, wrapped into `[-1, 1)` when periodic.
pub fn lon_offset(a: f64, b: f64, periodic: bool) -> f64 {
    let d = a - b;
    if periodic {
        d - 2.0 * (d / 2.0).round()
    } else {
        d
    }
}

/// Per-point kernel factors along one axis: `k[p, i] = exp(-d²/ℓ²)` within the cutoff
/// (zero outside, and for points whose entry is masked) and `d²` alongside.
fn axis_factors(centres: &[f64], xs: &[f64], present: &[bool], ls: f64, periodic: bool) -> (Array2<f64>, Array2<f64>) {
    let radius = KERNEL_CUTOFF * ls;
    let n = centres.len();
    let mut k = Array2::zeros((xs.len(), n));
    let mut d2 = Array2::zeros((xs.len(), n));
    for (p, &x) in xs.iter().enumerate() {
        if !present[p] {
            continue;
        }
        for (i, &c) in centres.iter().enumerate() {
            let d = lon_offset(c, x, periodic);
            if d.abs() <= radius {
                d2[[p, i]] = d * d;
                k[[p, i]] = (-d * d / (ls * ls)).exp();
            }
        }
    }
    (k, d2)
}

/// Raw SetConv sums: `[2C, H, W]` holding the per-channel densities then the
/// un-normalised signals. Differentiable with respect to `log_ls` (shape `[C]`).
///
/// The kernel factorises over the two axes, so with row factors `R: [N, H]` and column
/// factors `K: [N, W]` (rows of `R` scaled by the point weights) the density is `Rᵀ K` and
/// the signal `Rᵀ diag(y) K`.
pub fn setconv_sums(tape: &mut Tape, log_ls: Var, set: &ConditionalSet, grid: &RefGrid) -> Var {
    let c = set.n_channels;
    let (h, w) = (grid.h(), grid.w());
    let hw = h * w;
    let n = set.len();
    let ls: Vec<f64> = tape.value(log_ls).data.iter().map(|v| v.exp()).collect();
    assert_eq!(ls.len(), c, "setconv: {} length scales for {c} channels", ls.len());

    let mut out = vec![0.0; 2 * c * hw];
    let mut factors = Vec::with_capacity(c);
    for ch in 0..c {
        let present: Vec<bool> = (0..n).map(|p| set.mask[p * c + ch]).collect();
        let y = Array1::from_iter((0..n).map(|p| if present[p] { set.values[p * c + ch] } else { 0.0 }));
        let (mut r, dr) = axis_factors(&grid.rows, &set.u, &present, ls[ch], false);
        r *= &ArrayView1::from(&set.weight).insert_axis(Axis(1));
        let (k, dk) = axis_factors(&grid.cols, &set.v, &present, ls[ch], grid.periodic);
        let yk = &k * &y.view().insert_axis(Axis(1));
        {
            let (dens, rest) = out.split_at_mut((c + ch) * hw);
            let mut dv = ArrayViewMut2::from_shape((h, w), &mut dens[ch * hw..(ch + 1) * hw]).unwrap();
            general_mat_mul(1.0, &r.t(), &k, 0.0, &mut dv);
            let mut sv = ArrayViewMut2::from_shape((h, w), &mut rest[..hw]).unwrap();
            general_mat_mul(1.0, &r.t(), &yk, 0.0, &mut sv);
        }
        factors.push((r, dr, k, dk, yk));
    }

    tape.custom(Tensor::new(vec![2 * c, h, w], out), move |g| {
        let mut gls = vec![0.0; c];
        for (ch, (r, dr, k, dk, yk)) in factors.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let gd = ArrayView2::from_shape((h, w), &g[ch * hw..(ch + 1) * hw]).unwrap();
            let gs = ArrayView2::from_shape((h, w), &g[(c + ch) * hw..(c + ch + 1) * hw]).unwrap();
            // d k / d log ℓ = k · 2 d² / ℓ² on each axis factor.
            let gk = gd.dot(&k.t()) + gs.dot(&yk.t());
            let row_term = (&(r * dr) * &gk.t()).sum();
            let col_d = (&(k * dk) * &r.dot(&gd)).sum();
            let col_s = (&(yk * dk) * &r.dot(&gs)).sum();
            gls[ch] = 2.0 * (row_term + col_d + col_s) / (ls[ch] * ls[ch]);
        }
        vec![(log_ls, gls)]
    })
}

/// Density-normalised SetConv output `[2C, H, W]`: densities, then signal / density.
pub fn setconv_normalized(tape: &mut Tape, log_ls: Var, set: &ConditionalSet, grid: &RefGrid) -> Var {
    let c = set.n_channels;
    let sums = setconv_sums(tape, log_ls, set, grid);
    let dens = tape.slice_rows(sums, 0, c);
    let sig = tape.slice_rows(sums, c, c);
    let norm = tape.safe_div(sig, dens, DENSITY_EPS);
    tape.concat(&[dens, norm])
}

/// One SetConv embedding: learnable length scales plus the pointwise map.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SetConvLayer {
    pub log_ls: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub embed_dim: usize,
}

impl SetConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_in: usize,
        embed_dim: usize,
        init_length_scale: f64,
        rng: &mut R,
    ) -> Self {
        let log_ls = store.add(format!("{prefix}.log_length_scale"), Tensor::filled(vec![n_in], init_length_scale.ln()), false);
        let std = 1.0 / ((2 * n_in) as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), Tensor::randn(vec![embed_dim, 2 * n_in], std, rng), true);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![embed_dim]), false);
        SetConvLayer { log_ls, weight, bias, n_in, embed_dim }
    }

    pub fn out_channels(&self) -> usize {
        self.embed_dim + 1
    }

    /// Feature map `[embed_dim + 1, H, W]`; channel 0 is the channel-mean density.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, set: &ConditionalSet, grid: &RefGrid) -> Var {
        assert_eq!(set.n_channels, self.n_in, "setconv layer expects {} channels", self.n_in);
        let log_ls = tape.param(store, self.log_ls);
        let raw = setconv_normalized(tape, log_ls, set, grid);
        let dens = tape.slice_rows(raw, 0, self.n_in);
        let density = tape.mean_rows(dens);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let mapped = tape.linear(raw, w, b);
        tape.concat(&[density, mapped])
    }
}

/// Embedding of one conditional source: one SetConv per variable group plus, when
/// decoupled, one SetConv over all channels. Outputs are concatenated group-major with the
/// all-variable block last, each block `embed_dim + 1` channels wide.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvdEncoder {
    pub groups: Vec<Vec<usize>>,
    pub spatial: Vec<SetConvLayer>,
    pub joint: SetConvLayer,
    pub decoupled: bool,
}

impl SvdEncoder {
    /// `decoupled = false` keeps only the all-variable embedding.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[ChannelMeta],
        embed_dim: usize,
        init_length_scale: f64,
        decoupled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let groups: Vec<Vec<usize>> = channel_groups(channels).into_iter().map(|(_, m)| m).collect();
        Self::with_groups(store, prefix, channels.len(), groups, embed_dim, init_length_scale, decoupled, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_groups<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_channels: usize,
        groups: Vec<Vec<usize>>,
        embed_dim: usize,
        init_length_scale: f64,
        decoupled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if groups.iter().any(Vec::is_empty) {
            return Err(invalid("variable group with zero channels"));
        }
        if groups.iter().flatten().any(|&c| c >= n_channels) {
            return Err(invalid("variable group refers to a missing channel"));
        }
        let mut spatial = Vec::new();
        if decoupled {
            for (g, members) in groups.iter().enumerate() {
                spatial.push(SetConvLayer::new(
                    store,
                    &format!("{prefix}.group{g}"),
                    members.len(),
                    embed_dim,
                    init_length_scale,
                    rng,
                ));
            }
        }
        let joint = SetConvLayer::new(store, &format!("{prefix}.joint"), n_channels, embed_dim, init_length_scale, rng);
        Ok(SvdEncoder { groups, spatial, joint, decoupled })
    }

    pub fn out_channels(&self) -> usize {
        (self.spatial.len() + 1) * (self.joint.embed_dim + 1)
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, set: &ConditionalSet, grid: &RefGrid) -> Var {
        let mut parts = Vec::with_capacity(self.spatial.len() + 1);
        for (layer, members) in self.spatial.iter().zip(&self.groups) {
            let sub = set.select_channels(members);
            parts.push(layer.embed(tape, store, &sub, grid));
        }
        parts.push(self.joint.embed(tape, store, set, grid));
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts)
        }
    }
}

/// Embeds the background (as a full on-grid set) and the observations with their own
/// encoders, on the background grid and the observation reference grid respectively.
pub fn build_svd_representation(
    tape: &mut Tape,
    store: &ParamStore,
    bg_encoder: &SvdEncoder,
    obs_encoder: &SvdEncoder,
    background: &Field,
    obs: &ObservationSet,
) -> Result<(Var, Var)> {
    let domain = background.grid().domain();
    let bg_set = ConditionalSet::from_field(background)?;
    let bg = bg_encoder.embed(tape, store, &bg_set, &RefGrid::new(background.grid()));
    let obs_grid = obs.reference_grid(domain)?;
    let obs_set = ConditionalSet::from_observations(obs, &domain)?;
    let ob = obs_encoder.embed(tape, store, &obs_set, &RefGrid::new(&obs_grid));
    Ok((bg, ob))
}
