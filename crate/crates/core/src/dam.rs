//! Dynamic alignment and merge of the background and observation representations.
//!
//! 1. `align`: bilinear resampling of the observation features onto the target grid.
//! 2. `shared_features`: pointwise linear map of the concatenated sources to `k` channels.
//! 3. `similarity`: per-point Euclidean distance between each source and the shared
//!    features over the channel axis.
//! 4. `select_merge`: per point, the whole background vector when `sim_bg ≥ sim_obs`,
//!    otherwise the observation vector ([`Retain::Verbatim`]). [`Retain::Prose`] keeps the
//!    closer source instead; ties still go to the background.
//! 5. `smooth_concat`: concatenation with the shared features and one 3×3 convolution.
//!
//! With [`Selection::Hard`] the selection mask is a constant of the forward pass, so
//! gradients reach only the selected branch.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::conv2d;
use crate::error::{shape, Result};
use crate::grid::LatLonGrid;
use crate::interp::BilinearPlan;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Retain {
    /// Background where its distance is at least the observation's.
    #[default]
    Verbatim,
    /// Background where its distance is at most the observation's.
    Prose,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Selection {
    #[default]
    Hard,
    /// Sigmoid blend of the two sources with the given temperature.
    Soft { temperature: f64 },
}

/// Bilinear resampling of a `[C, Hs, Ws]` feature map onto `target`.
pub fn align(tape: &mut Tape, features: Var, source: &LatLonGrid, target: &LatLonGrid) -> Result<Var> {
    let shp = tape.shape(features).to_vec();
    if shp[1] != source.n_lat() || shp[2] != source.n_lon() {
        return Err(shape(format!("feature map {shp:?} does not live on a {:?} grid", source.shape())));
    }
    if source.approx_eq(target) {
        return Ok(features);
    }
    let plan = Rc::new(BilinearPlan::between(source, target)?);
    let c = shp[0];
    let out = plan.apply(&tape.value(features).data, c);
    let out = Tensor::new(vec![c, target.n_lat(), target.n_lon()], out);
    Ok(tape.fixed_linear(features, out, move |g| plan.adjoint(g, c)))
}

/// Per-point Euclidean distance over channels between two `[k, N]` arrays.
pub fn similarity_values(y: &[f64], y_shared: &[f64], k: usize) -> Vec<f64> {
    let n = y.len() / k;
    let mut out = vec![0.0; n];
    for c in 0..k {
        for p in 0..n {
            let d = y[c * n + p] - y_shared[c * n + p];
            out[p] += d * d;
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Per-point choice of the background vector under the chosen comparison.
pub fn selection_mask(sim_bg: &[f64], sim_obs: &[f64], retain: Retain) -> Vec<bool> {
    sim_bg
        .iter()
        .zip(sim_obs)
        .map(|(&b, &o)| match retain {
            Retain::Verbatim => b >= o,
            Retain::Prose => b <= o,
        })
        .collect()
}

/// Whole-vector selection of `[k, N]` arrays.
pub fn select_values(y_bg: &[f64], y_obs: &[f64], take_bg: &[bool]) -> Vec<f64> {
    let n = take_bg.len();
    y_bg.iter()
        .zip(y_obs)
        .enumerate()
        .map(|(idx, (&b, &o))| if take_bg[idx % n] { b } else { o })
        .collect()
}

/// Differentiable similarity: `[k, H, W]` pair → `[1, H, W]`.
pub fn similarity(tape: &mut Tape, y: Var, y_shared: Var) -> Result<Var> {
    if tape.shape(y) != tape.shape(y_shared) {
        return Err(shape(format!("similarity inputs {:?} vs {:?}", tape.shape(y), tape.shape(y_shared))));
    }
    let vy = tape.value_rc(y);
    let vs = tape.value_rc(y_shared);
    let k = vy.rows();
    let sim = similarity_values(&vy.data, &vs.data, k);
    let mut shp = vy.shape.clone();
    shp[0] = 1;
    let simc = sim.clone();
    Ok(tape.custom(Tensor::new(shp, sim), move |g| {
        let n = simc.len();
        let mut gy = vec![0.0; k * n];
        for c in 0..k {
            for p in 0..n {
                if simc[p] > 0.0 {
                    gy[c * n + p] = g[p] * (vy.data[c * n + p] - vs.data[c * n + p]) / simc[p];
                }
            }
        }
        let gs = gy.iter().map(|v| -v).collect();
        vec![(y, gy), (y_shared, gs)]
    }))
}

/// Hard selection with a frozen mask.
pub fn select_merge(tape: &mut Tape, y_bg: Var, y_obs: Var, sim_bg: Var, sim_obs: Var, retain: Retain) -> Result<Var> {
    if tape.shape(y_bg) != tape.shape(y_obs) || tape.shape(sim_bg) != tape.shape(sim_obs) {
        return Err(shape("select_merge inputs disagree in shape"));
    }
    let mask = selection_mask(&tape.value(sim_bg).data, &tape.value(sim_obs).data, retain);
    if mask.len() != tape.value(y_bg).cols() {
        return Err(shape("similarity maps do not match the feature grid"));
    }
    let out = select_values(&tape.value(y_bg).data, &tape.value(y_obs).data, &mask);
    let shp = tape.shape(y_bg).to_vec();
    Ok(tape.custom(Tensor::new(shp, out), move |g| {
        let n = mask.len();
        let mut gb = vec![0.0; g.len()];
        let mut go = vec![0.0; g.len()];
        for (idx, &gv) in g.iter().enumerate() {
            if mask[idx % n] {
                gb[idx] = gv;
            } else {
                go[idx] = gv;
            }
        }
        vec![(y_bg, gb), (y_obs, go)]
    }))
}

/// Soft alternative: `w · y_bg + (1 − w) · y_obs` with `w = σ(±(sim_bg − sim_obs) / T)`.
pub fn soft_merge(
    tape: &mut Tape,
    y_bg: Var,
    y_obs: Var,
    sim_bg: Var,
    sim_obs: Var,
    retain: Retain,
    temperature: f64,
) -> Var {
    let diff = tape.sub(sim_bg, sim_obs);
    let sign = match retain {
        Retain::Verbatim => 1.0,
        Retain::Prose => -1.0,
    };
    let logits = tape.scale(diff, sign / temperature);
    let wb = tape.sigmoid(logits);
    let vw = tape.value_rc(wb);
    let vb = tape.value_rc(y_bg);
    let vo = tape.value_rc(y_obs);
    let n = vw.len();
    let out: Vec<f64> =
        vb.data.iter().zip(&vo.data).enumerate().map(|(idx, (b, o))| vw.data[idx % n] * (b - o) + o).collect();
    let shp = vb.shape.clone();
    tape.custom(Tensor::new(shp, out), move |g| {
        let mut gw = vec![0.0; n];
        let mut gb = vec![0.0; g.len()];
        let mut go = vec![0.0; g.len()];
        for (idx, &gv) in g.iter().enumerate() {
            let w = vw.data[idx % n];
            gw[idx % n] += gv * (vb.data[idx] - vo.data[idx]);
            gb[idx] = gv * w;
            go[idx] = gv * (1.0 - w);
        }
        vec![(wb, gw), (y_bg, gb), (y_obs, go)]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dam {
    /// Width of each source representation and of the shared features.
    pub width: usize,
    pub out_width: usize,
    pub shared_weight: ParamId,
    pub shared_bias: ParamId,
    pub smoother_kernel: ParamId,
    pub smoother_bias: ParamId,
    pub retain: Retain,
    pub selection: Selection,
}

impl Dam {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        out_width: usize,
        retain: Retain,
        selection: Selection,
        rng: &mut R,
    ) -> Self {
        let shared_weight =
            store.add(format!("{prefix}.shared_weight"), Tensor::randn(vec![width, 2 * width], 1.0 / ((2 * width) as f64).sqrt(), rng), true);
        let shared_bias = store.add(format!("{prefix}.shared_bias"), Tensor::zeros(vec![width]), false);
        let smoother_kernel = store.add(
            format!("{prefix}.smoother_kernel"),
            Tensor::randn(vec![out_width, 2 * width, 3, 3], 1.0 / ((2 * width * 9) as f64).sqrt(), rng),
            true,
        );
        let smoother_bias = store.add(format!("{prefix}.smoother_bias"), Tensor::zeros(vec![out_width]), false);
        Dam { width, out_width, shared_weight, shared_bias, smoother_kernel, smoother_bias, retain, selection }
    }

    pub fn shared_features(&self, tape: &mut Tape, store: &ParamStore, bg: Var, obs_aligned: Var) -> Result<Var> {
        if tape.shape(bg) != tape.shape(obs_aligned) || tape.shape(bg)[0] != self.width {
            return Err(shape(format!(
                "shared_features expects two [{}, H, W] maps, got {:?} and {:?}",
                self.width,
                tape.shape(bg),
                tape.shape(obs_aligned)
            )));
        }
        let cat = tape.concat(&[bg, obs_aligned]);
        let w = tape.param(store, self.shared_weight);
        let b = tape.param(store, self.shared_bias);
        Ok(tape.linear(cat, w, b))
    }

    pub fn smooth_concat(&self, tape: &mut Tape, store: &ParamStore, selected: Var, shared: Var, periodic: bool) -> Result<Var> {
        if tape.shape(selected) != tape.shape(shared) {
            return Err(shape("smooth_concat inputs disagree in shape"));
        }
        let cat = tape.concat(&[selected, shared]);
        let k = tape.param(store, self.smoother_kernel);
        let b = tape.param(store, self.smoother_bias);
        Ok(conv2d(tape, cat, k, b, periodic))
    }

    /// Full merge of a background map on `target` with an observation map on `obs_grid`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bg: Var,
        obs: Var,
        obs_grid: &LatLonGrid,
        target: &LatLonGrid,
    ) -> Result<Var> {
        let aligned = align(tape, obs, obs_grid, target)?;
        let shared = self.shared_features(tape, store, bg, aligned)?;
        let sim_bg = similarity(tape, bg, shared)?;
        let sim_obs = similarity(tape, aligned, shared)?;
        let selected = match self.selection {
            Selection::Hard => select_merge(tape, bg, aligned, sim_bg, sim_obs, self.retain)?,
            Selection::Soft { temperature } => soft_merge(tape, bg, aligned, sim_bg, sim_obs, self.retain, temperature),
        };
        self.smooth_concat(tape, store, selected, shared, target.periodic_lon())
    }

    /// Ablation without similarity or selection: align, concatenate, smooth.
    pub fn forward_concat_only(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bg: Var,
        obs: Var,
        obs_grid: &LatLonGrid,
        target: &LatLonGrid,
    ) -> Result<Var> {
        let aligned = align(tape, obs, obs_grid, target)?;
        self.smooth_concat(tape, store, bg, aligned, target.periodic_lon())
    }
}
