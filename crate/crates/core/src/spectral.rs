//! Truncated spectral channel mixing with exact adjoints.
//!
//! The forward transform is the unnormalised 2-D DFT over (lat, lon). Retained modes are
//! indexed by signed latitude wavenumber `|k_lat| < modes_lat` and non-negative longitude
//! wavenumber `k_lon < modes_lon`. Outputs are produced by a complex-to-real inverse that
//! treats the retained half spectrum as Hermitian: interior longitude columns count twice,
//! the zero and Nyquist columns once. Weights are indexed by wavenumber, not by array
//! position, so the same layer runs on any grid that resolves its modes.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape, Result};
use crate::tensor::{Tape, Tensor, Var};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unnormalised 2-D DFT of an `h × w` row-major buffer.
pub fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row = plan(w, inverse);
    row.process(buf);
    let col = plan(h, inverse);
    let mut tmp = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            tmp[i] = buf[i * w + j];
        }
        col.process(&mut tmp);
        for i in 0..h {
            buf[i * w + j] = tmp[i];
        }
    }
}

pub fn fft2_real(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    buf
}

/// Signed wavenumber of row `r` on an `h`-row grid.
pub fn signed_wavenumber(r: usize, h: usize) -> isize {
    if r <= h / 2 {
        r as isize
    } else {
        r as isize - h as isize
    }
}

/// Validates mode counts against a grid.
pub fn check_modes(h: usize, w: usize, modes_lat: usize, modes_lon: usize) -> Result<()> {
    if modes_lat == 0 || modes_lon == 0 {
        return Err(shape("mode counts must be positive"));
    }
    if modes_lat > h / 2 + 1 || modes_lon > w / 2 + 1 {
        return Err(shape(format!(
            "modes ({modes_lat}, {modes_lon}) exceed the Nyquist limit of a {h}x{w} grid"
        )));
    }
    Ok(())
}

/// One retained mode: array position and weight-table slot.
#[derive(Debug, Clone, Copy)]
struct Mode {
    row: usize,
    col: usize,
    slot: usize,
    hermitian_factor: f64,
}

fn retained_modes(h: usize, w: usize, modes_lat: usize, modes_lon: usize) -> Vec<Mode> {
    let mut modes = Vec::new();
    for row in 0..h {
        let k = signed_wavenumber(row, h);
        if k.unsigned_abs() >= modes_lat {
            continue;
        }
        let kslot = (k + modes_lat as isize - 1) as usize;
        for col in 0..modes_lon.min(w / 2 + 1) {
            let nyquist = w % 2 == 0 && col == w / 2;
            let hermitian_factor = if col == 0 || nyquist { 1.0 } else { 2.0 };
            modes.push(Mode { row, col, slot: kslot * modes_lon + col, hermitian_factor });
        }
    }
    modes
}

/// Shape of the weight tables for given mode counts: `[2·modes_lat − 1, modes_lon, out, in]`.
pub fn weight_shape(modes_lat: usize, modes_lon: usize, cout: usize, cin: usize) -> Vec<usize> {
    vec![2 * modes_lat - 1, modes_lon, cout, cin]
}

/// Spectral branch `y = irfft2(W ⊙ rfft2(x))` over the retained modes.
///
/// `x: [cin, H, W]`; `w_re`, `w_im`: [`weight_shape`]. Returns `[cout, H, W]`.
pub fn spectral_conv(tape: &mut Tape, x: Var, w_re: Var, w_im: Var, modes_lat: usize, modes_lon: usize) -> Var {
    let vx = tape.value_rc(x);
    let vr = tape.value_rc(w_re);
    let vi = tape.value_rc(w_im);
    let (cin, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
    let cout = vr.shape[2];
    assert_eq!(vr.shape, weight_shape(modes_lat, modes_lon, cout, cin), "spectral weight shape");
    let hw = h * w;
    let modes = retained_modes(h, w, modes_lat, modes_lon);

    let xs: Vec<Vec<Complex64>> = (0..cin).map(|i| fft2_real(&vx.data[i * hw..(i + 1) * hw], h, w)).collect();
    let weight = |slot: usize, o: usize, i: usize| {
        let idx = (slot * cout + o) * cin + i;
        Complex64::new(vr.data[idx], vi.data[idx])
    };

    let mut out = vec![0.0; cout * hw];
    let mut spec = vec![Complex64::new(0.0, 0.0); hw];
    for o in 0..cout {
        spec.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for m in &modes {
            let p = m.row * w + m.col;
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, xi) in xs.iter().enumerate() {
                acc += weight(m.slot, o, i) * xi[p];
            }
            spec[p] = acc * m.hermitian_factor;
        }
        fft2_inplace(&mut spec, h, w, true);
        let norm = 1.0 / hw as f64;
        for (dst, z) in out[o * hw..(o + 1) * hw].iter_mut().zip(&spec) {
            *dst = z.re * norm;
        }
    }

    tape.custom(Tensor::new(vec![cout, h, w], out), move |g| {
        let norm = 1.0 / hw as f64;
        // gradient with respect to the retained output coefficients
        let gys: Vec<Vec<Complex64>> = (0..cout).map(|o| fft2_real(&g[o * hw..(o + 1) * hw], h, w)).collect();
        let mut gwr = vec![0.0; vr.len()];
        let mut gwi = vec![0.0; vi.len()];
        let mut gxs = vec![vec![Complex64::new(0.0, 0.0); hw]; cin];
        for m in &modes {
            let p = m.row * w + m.col;
            let f = m.hermitian_factor * norm;
            for (o, gy) in gys.iter().enumerate() {
                let gyo = gy[p] * f;
                for i in 0..cin {
                    let idx = (m.slot * cout + o) * cin + i;
                    let gw = gyo * xs[i][p].conj();
                    gwr[idx] += gw.re;
                    gwi[idx] += gw.im;
                    gxs[i][p] += Complex64::new(vr.data[idx], vi.data[idx]).conj() * gyo;
                }
            }
        }
        let mut gx = vec![0.0; cin * hw];
        for (i, mut gxi) in gxs.into_iter().enumerate() {
            fft2_inplace(&mut gxi, h, w, true);
            for (dst, z) in gx[i * hw..(i + 1) * hw].iter_mut().zip(&gxi) {
                *dst = z.re;
            }
        }
        vec![(x, gx), (w_re, gwr), (w_im, gwi)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_identity_modes_reproduce_input() {
        let (h, w) = (6, 8);
        let x: Vec<f64> = (0..h * w).map(|k| ((k * 37 % 17) as f64 - 8.0) / 3.0).collect();
        let (ml, mo) = (h / 2 + 1, w / 2 + 1);
        let shp = weight_shape(ml, mo, 1, 1);
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::new(vec![1, h, w], x.clone()));
        let wr = t.leaf(Tensor::filled(shp.clone(), 1.0));
        let wi = t.leaf(Tensor::zeros(shp));
        let y = spectral_conv(&mut t, xv, wr, wi, ml, mo);
        for (a, b) in t.value(y).data.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_sizes_reproduce_input() {
        let (h, w) = (5, 7);
        let x: Vec<f64> = (0..h * w).map(|k| (k as f64 * 0.61).sin()).collect();
        let (ml, mo) = (h / 2 + 1, w / 2 + 1);
        let shp = weight_shape(ml, mo, 1, 1);
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::new(vec![1, h, w], x.clone()));
        let wr = t.leaf(Tensor::filled(shp.clone(), 1.0));
        let wi = t.leaf(Tensor::zeros(shp));
        let y = spectral_conv(&mut t, xv, wr, wi, ml, mo);
        for (a, b) in t.value(y).data.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_limits() {
        assert!(check_modes(8, 16, 5, 9).is_ok());
        assert!(check_modes(8, 16, 6, 9).is_err());
        assert!(check_modes(8, 16, 5, 10).is_err());
        assert!(check_modes(8, 16, 0, 1).is_err());
    }
}
