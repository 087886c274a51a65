//! Synthetic truth fields and forecast-like backgrounds.
//!
//! Truth channels are Gaussian random fields with an isotropic power-law spectrum, drawn by
//! spectral filtering of white noise on a torus twice as tall as the grid. Only the first
//! half of the rows is kept, so the northern and southern edges are not forced to match.
//! Backgrounds are a blurred copy of the truth plus spatially correlated noise, both growing
//! linearly with lead time.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{ChannelMeta, Field, LatLonGrid};
use crate::seeds::rng_for;
use crate::spectral::{fft2_inplace, signed_wavenumber};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub channels: Vec<ChannelMeta>,
    /// Exponent of the energy spectrum `P(k) ∝ k^slope`.
    pub spectral_slope: f64,
    /// Standard deviation per channel.
    pub amplitude: Vec<f64>,
    /// Correlation shared by every pair of channels.
    pub cross_channel_corr: f64,
}

impl FieldSpec {
    /// Four channels in two variable groups.
    pub fn desk_default() -> Self {
        FieldSpec {
            channels: vec![
                ChannelMeta::new("z500", 0),
                ChannelMeta::new("t850", 0),
                ChannelMeta::new("u10", 1),
                ChannelMeta::new("t2m", 1),
            ],
            spectral_slope: -3.0,
            amplitude: vec![4.0, 2.0, 1.0, 3.0],
            cross_channel_corr: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(invalid("field spec has no channels"));
        }
        if self.amplitude.len() != self.channels.len() {
            return Err(invalid("one amplitude per channel is required"));
        }
        if self.amplitude.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(invalid("amplitudes must be positive"));
        }
        if !self.spectral_slope.is_finite() || self.spectral_slope > 0.0 {
            return Err(invalid("spectral slope must be finite and non-positive"));
        }
        let c = self.channels.len() as f64;
        let rho = self.cross_channel_corr;
        let lower = if c > 1.0 { -1.0 / (c - 1.0) } else { -1.0 };
        if !(lower..=1.0).contains(&rho) {
            return Err(invalid(format!("cross-channel correlation {rho} gives no valid covariance for {c} channels")));
        }
        Ok(())
    }
}

/// Lower-triangular factor of the equicorrelation matrix `(1 − ρ) I + ρ 1 1ᵀ`.
fn equicorrelation_factor(c: usize, rho: f64) -> Vec<f64> {
    let mut l = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..=i {
            let target = if i == j { 1.0 } else { rho };
            let s: f64 = (0..j).map(|k| l[i * c + k] * l[j * c + k]).sum();
            if i == j {
                l[i * c + i] = (target - s).max(0.0).sqrt();
            } else if l[j * c + j] > 1e-12 {
                l[i * c + j] = (target - s) / l[j * c + j];
            }
        }
    }
    l
}

/// Spectral amplitude filter on an `h × w` torus with spacings in degrees, scaled so the
/// filtered unit white noise has unit variance.
pub fn power_law_filter(h: usize, w: usize, dlat: f64, dlon: f64, slope: f64) -> Vec<f64> {
    let f_lat = 1.0 / (h as f64 * dlat);
    let f_lon = 1.0 / (w as f64 * dlon);
    let k_ref = f_lat.min(f_lon);
    let mut filter = vec![0.0; h * w];
    for r in 0..h {
        let kl = signed_wavenumber(r, h) as f64 * f_lat;
        for s in 0..w {
            let km = signed_wavenumber(s, w) as f64 * f_lon;
            let k = (kl * kl + km * km).sqrt();
            let p = if k == 0.0 { 1.0 } else { (k / k_ref).powf(slope) };
            filter[r * w + s] = p.sqrt();
        }
    }
    let n = (h * w) as f64;
    let energy: f64 = filter.iter().map(|f| f * f).sum::<f64>() / n;
    let scale = energy.sqrt().recip();
    filter.iter_mut().for_each(|f| *f *= scale);
    filter
}

fn filter_real(x: &[f64], filter: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    for (b, f) in buf.iter_mut().zip(filter) {
        *b *= f;
    }
    fft2_inplace(&mut buf, h, w, true);
    let n = (h * w) as f64;
    buf.iter().map(|z| z.re / n).collect()
}

pub fn generate_truth(spec: &FieldSpec, grid: &LatLonGrid, seed: u64) -> Result<Field> {
    spec.validate()?;
    let c = spec.channels.len();
    let (h, w) = grid.shape();
    let (th, tw) = (2 * h, w);
    let n = th * tw;
    let mut rng = rng_for(seed, "truth");
    let white: Vec<Vec<f64>> = (0..c).map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let l = equicorrelation_factor(c, spec.cross_channel_corr);
    let filter = power_law_filter(th, tw, grid.dlat(), grid.dlon(), spec.spectral_slope);
    let mut values = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut mixed = vec![0.0; n];
        for (d, z) in white.iter().enumerate().take(ch + 1) {
            let coef = l[ch * c + d];
            if coef != 0.0 {
                mixed.iter_mut().zip(z).for_each(|(m, v)| *m += coef * v);
            }
        }
        let field = filter_real(&mixed, &filter, th, tw);
        values.extend(field[..h * w].iter().map(|v| v * spec.amplitude[ch]));
    }
    Field::new(grid.clone(), spec.channels.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub lead_time_h: f64,
    /// Blur standard deviation in grid cells per 24 h of lead time.
    pub smoothing_scale: f64,
    /// Noise standard deviation per 24 h, relative to each truth channel's standard deviation.
    pub noise_amplitude: f64,
    /// Correlation length of the noise in grid cells.
    pub noise_correlation_length: f64,
}

impl BackgroundSpec {
    pub fn desk_default(lead_time_h: f64) -> Self {
        BackgroundSpec { lead_time_h, smoothing_scale: 1.0, noise_amplitude: 0.5, noise_correlation_length: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lead_time_h, self.smoothing_scale, self.noise_amplitude, self.noise_correlation_length];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("background spec values must be finite and non-negative"));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of one `h × w` channel, `sigma` in grid cells. Latitude is
/// mirrored at the edges (the edge cell repeated); longitude wraps when `periodic`.
pub fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64, periodic: bool) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in taps.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                let jj = if periodic { jj.rem_euclid(w as isize) as usize } else { mirror(jj, w) };
                acc += k * values[i * w + jj];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in taps.iter().enumerate() {
                let ii = mirror(i as isize + t as isize - r, h);
                acc += k * tmp[ii * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

fn channel_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Unit-variance noise with Gaussian spatial correlation of `length` cells.
fn correlated_noise<R: Rng>(rng: &mut R, h: usize, w: usize, length: f64, periodic: bool) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if length <= 0.0 {
        return white;
    }
    let smooth = gaussian_blur(&white, h, w, length, periodic);
    let s = channel_std(&smooth);
    if s > 0.0 {
        smooth.iter().map(|v| v / s).collect()
    } else {
        smooth
    }
}

/// Forecast surrogate: blur of width `smoothing_scale · lead/24` cells plus correlated noise
/// of standard deviation `noise_amplitude · lead/24` times each channel's truth std.
pub fn generate_background(truth: &Field, spec: &BackgroundSpec, seed: u64) -> Result<Field> {
    spec.validate()?;
    let factor = spec.lead_time_h / 24.0;
    if factor == 0.0 {
        return Ok(truth.clone());
    }
    let grid = truth.grid();
    let (h, w) = grid.shape();
    let periodic = grid.periodic_lon();
    let mut rng = rng_for(seed, "background");
    let mut values = Vec::with_capacity(truth.values().len());
    for c in 0..truth.n_channels() {
        let x = truth.channel(c);
        let blurred = gaussian_blur(x, h, w, spec.smoothing_scale * factor, periodic);
        let noise = correlated_noise(&mut rng, h, w, spec.noise_correlation_length, periodic);
        let amp = spec.noise_amplitude * factor * channel_std(x);
        values.extend(blurred.iter().zip(&noise).map(|(b, n)| b + amp * n));
    }
    truth.with_values(values)
}

/// Fraction of a channel's spectral energy held by the highest quarter of its Fourier modes,
/// ranked by normalised radius `sqrt((k_lat / (H/2))² + (k_lon / (W/2))²)`.
pub fn high_wavenumber_energy(field: &Field, channel: usize) -> f64 {
    let (h, w) = field.grid().shape();
    let mut buf: Vec<Complex64> = field.channel(channel).iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    let mut modes: Vec<(f64, f64)> = Vec::with_capacity(h * w);
    for r in 0..h {
        let kl = signed_wavenumber(r, h) as f64 / (h as f64 / 2.0).max(1.0);
        for s in 0..w {
            let km = signed_wavenumber(s, w) as f64 / (w as f64 / 2.0).max(1.0);
            modes.push(((kl * kl + km * km).sqrt(), buf[r * w + s].norm_sqr()));
        }
    }
    let total: f64 = modes.iter().map(|m| m.1).sum();
    modes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let top = modes.len() / 4;
    let high: f64 = modes[modes.len() - top..].iter().map(|m| m.1).sum();
    if total > 0.0 {
        high / total
    } else {
        0.0
    }
}

/// Absolute high-wavenumber energy (same mode selection as [`high_wavenumber_energy`]).
pub fn high_wavenumber_power(field: &Field, channel: usize) -> f64 {
    let total: f64 = field.channel(channel).iter().map(|v| v * v).sum::<f64>() * field.grid().len() as f64;
    high_wavenumber_energy(field, channel) * total
}
