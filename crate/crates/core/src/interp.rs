//! Bilinear resampling from a regular grid to arbitrary points.
//!
//! Longitude wraps on periodic grids. Latitudes beyond the outermost cell centres take the
//! edge row's value. Fractional indices within 1e-9 of an integer snap to it, so sampling
//! at the grid's own points returns stored values exactly.

use crate::error::{FnpError, Result};
use crate::grid::LatLonGrid;

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    ty: f64,
    tx: f64,
}

/// Precomputed four-point stencils for one (source grid, target points) pair.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    n_lat: usize,
    n_lon: usize,
    taps: Vec<Tap>,
}

fn snap(f: f64) -> f64 {
    let r = f.round();
    if (f - r).abs() < SNAP {
        r
    } else {
        f
    }
}

fn clamped_axis(f: f64, n: usize) -> (usize, usize, f64) {
    let f = snap(f).clamp(0.0, (n - 1) as f64);
    let i0 = (f.floor() as usize).min(n - 1);
    if i0 + 1 >= n {
        (i0, i0, 0.0)
    } else {
        (i0, i0 + 1, f - i0 as f64)
    }
}

fn periodic_axis(f: f64, n: usize) -> (usize, usize, f64) {
    let mut f = snap(f.rem_euclid(n as f64));
    if f >= n as f64 {
        f -= n as f64;
    }
    let j0 = (f.floor() as usize).min(n - 1);
    (j0, (j0 + 1) % n, f - j0 as f64)
}

impl BilinearPlan {
    pub fn new(source: &LatLonGrid, points: &[(f64, f64)]) -> Result<Self> {
        let domain = source.domain();
        let periodic = domain.periodic_lon();
        let mut taps = Vec::with_capacity(points.len());
        for &(lat, lon) in points {
            if !domain.contains(lat, lon) {
                return Err(FnpError::OutOfDomain { lat, lon });
            }
            let fi = (lat - source.lat0()) / source.dlat();
            let (i0, i1, ty) = clamped_axis(fi, source.n_lat());
            let fj = (domain.wrap_lon(lon) - source.lon0()) / source.dlon();
            let (j0, j1, tx) =
                if periodic { periodic_axis(fj, source.n_lon()) } else { clamped_axis(fj, source.n_lon()) };
            taps.push(Tap { i0, i1, j0, j1, ty, tx });
        }
        Ok(BilinearPlan { n_lat: source.n_lat(), n_lon: source.n_lon(), taps })
    }

    /// Plan between two grids that cover the same domain.
    pub fn between(source: &LatLonGrid, target: &LatLonGrid) -> Result<Self> {
        if !source.domain().approx_eq(&target.domain()) {
            return Err(FnpError::InvalidArgument(format!(
                "domain mismatch: {:?} vs {:?}",
                source.domain(),
                target.domain()
            )));
        }
        Self::new(source, &target.points())
    }

    pub fn n_targets(&self) -> usize {
        self.taps.len()
    }

    pub fn n_source(&self) -> usize {
        self.n_lat * self.n_lon
    }

    /// Resamples `channels` stacked source grids (`[channels, H, W]`) to `[channels, n_targets]`.
    pub fn apply(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let ns = self.n_source();
        let nt = self.taps.len();
        debug_assert_eq!(values.len(), channels * ns);
        let mut out = vec![0.0; channels * nt];
        for c in 0..channels {
            let src = &values[c * ns..(c + 1) * ns];
            let dst = &mut out[c * nt..(c + 1) * nt];
            for (o, t) in dst.iter_mut().zip(&self.taps) {
                let a00 = src[t.i0 * self.n_lon + t.j0];
                let a01 = src[t.i0 * self.n_lon + t.j1];
                let a10 = src[t.i1 * self.n_lon + t.j0];
                let a11 = src[t.i1 * self.n_lon + t.j1];
                let top = a00 + t.tx * (a01 - a00);
                let bottom = a10 + t.tx * (a11 - a10);
                *o = top + t.ty * (bottom - top);
            }
        }
        out
    }

    /// Transpose of [`Self::apply`]: scatters target-space values back onto the source grid.
    pub fn adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let ns = self.n_source();
        let nt = self.taps.len();
        let mut out = vec![0.0; channels * ns];
        for c in 0..channels {
            let g = &grad[c * nt..(c + 1) * nt];
            let dst = &mut out[c * ns..(c + 1) * ns];
            for (&gv, t) in g.iter().zip(&self.taps) {
                let (wy0, wy1) = (1.0 - t.ty, t.ty);
                let (wx0, wx1) = (1.0 - t.tx, t.tx);
                dst[t.i0 * self.n_lon + t.j0] += gv * wy0 * wx0;
                dst[t.i0 * self.n_lon + t.j1] += gv * wy0 * wx1;
                dst[t.i1 * self.n_lon + t.j0] += gv * wy1 * wx0;
                dst[t.i1 * self.n_lon + t.j1] += gv * wy1 * wx1;
            }
        }
        out
    }
}
