//! Same-size 2-D convolution on lat/lon feature maps.
//!
//! Boundary rule: longitude wraps when the grid is periodic; latitude (and non-periodic
//! longitude) mirrors about the edge, so index `-1` reads row `0` and index `H` reads
//! row `H - 1`.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{shape, Result};
use crate::tensor::{Tape, Tensor, Var};

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn wrap(j: isize, n: usize) -> usize {
    j.rem_euclid(n as isize) as usize
}

/// Source flat index for every (kernel tap, output point) pair.
fn gather_index(h: usize, w: usize, kh: usize, kw: usize, periodic: bool) -> Vec<u32> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut idx = Vec::with_capacity(kh * kw * h * w);
    for a in 0..kh as isize {
        for b in 0..kw as isize {
            for i in 0..h as isize {
                let si = mirror(i + a - ph, h);
                for j in 0..w as isize {
                    let sj = if periodic { wrap(j + b - pw, w) } else { mirror(j + b - pw, w) };
                    idx.push((si * w + sj) as u32);
                }
            }
        }
    }
    idx
}

/// Checks that a `kh × kw` kernel fits the grid without double reflection.
pub fn check_support(h: usize, w: usize, kh: usize, kw: usize) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape(format!("kernel {kh}x{kw} must have odd width")));
    }
    if h < kh / 2 + 1 || w < kw / 2 + 1 {
        return Err(shape(format!("grid {h}x{w} is smaller than the {kh}x{kw} kernel support")));
    }
    Ok(())
}

/// `out[o] = Σ_i k[o, i] ⋆ x[i] + b[o]` with `x: [cin, H, W]`, `k: [cout, cin, kh, kw]`.
pub fn conv2d(tape: &mut Tape, x: Var, kernel: Var, bias: Var, periodic_lon: bool) -> Var {
    let vx = tape.value_rc(x);
    let vk = tape.value_rc(kernel);
    let (cin, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
    let (cout, kcin, kh, kw) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
    assert_eq!(cin, kcin, "conv2d: input channels {cin} vs kernel {kcin}");
    let hw = h * w;
    let taps = kh * kw;
    let idx = gather_index(h, w, kh, kw, periodic_lon);

    // im2col: rows are (in-channel, tap), columns are output points
    let mut col = vec![0.0; cin * taps * hw];
    for ci in 0..cin {
        let src = &vx.data[ci * hw..(ci + 1) * hw];
        for t in 0..taps {
            let dst = &mut col[(ci * taps + t) * hw..(ci * taps + t + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(&idx[t * hw..(t + 1) * hw]) {
                *d = src[s as usize];
            }
        }
    }
    let bias_v = tape.value(bias).data.clone();
    let mut out = vec![0.0; cout * hw];
    for (o, b) in bias_v.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    let kmat = ArrayView2::from_shape((cout, cin * taps), &vk.data).unwrap();
    let cmat = ArrayView2::from_shape((cin * taps, hw), &col).unwrap();
    {
        let mut om = ArrayViewMut2::from_shape((cout, hw), &mut out).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &kmat, &cmat, 1.0, &mut om);
    }
    let out = Tensor::new(vec![cout, h, w], out);
    tape.custom(out, move |g| {
        let gm = ArrayView2::from_shape((cout, hw), g).unwrap();
        let kmat = ArrayView2::from_shape((cout, cin * taps), &vk.data).unwrap();
        let cmat = ArrayView2::from_shape((cin * taps, hw), &col).unwrap();
        let gk = gm.dot(&cmat.t());
        let gcol = kmat.t().dot(&gm);
        let gcol = gcol.as_slice().expect("standard layout");
        let mut gx = vec![0.0; cin * hw];
        for ci in 0..cin {
            let dst = &mut gx[ci * hw..(ci + 1) * hw];
            for t in 0..taps {
                let src = &gcol[(ci * taps + t) * hw..(ci * taps + t + 1) * hw];
                for (&s, &gv) in idx[t * hw..(t + 1) * hw].iter().zip(src) {
                    dst[s as usize] += gv;
                }
            }
        }
        let gb = (0..cout).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect();
        vec![(x, gx), (kernel, gk.into_raw_vec_and_offset().0), (bias, gb)]
    })
}
