//! Loop oracles and finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use fnp_core::tensor::{ParamStore, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Euclidean distance per point between `[k, n]` arrays.
pub fn similarity_oracle(y: &[f64], s: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut acc = 0.0;
        for c in 0..k {
            let d = y[c * n + p] - s[c * n + p];
            acc += d * d;
        }
        out.push(acc.sqrt());
    }
    out
}

/// Whole-vector selection: the background where its distance is at least the
/// observation's, the observation otherwise.
pub fn select_oracle(bg: &[f64], obs: &[f64], sim_bg: &[f64], sim_obs: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..n {
        let src = if sim_bg[p] >= sim_obs[p] { bg } else { obs };
        for c in 0..k {
            out[c * n + p] = src[c * n + p];
        }
    }
    out
}

/// Latitude-weighted RMSE of one `h × w` channel.
pub fn rmse_oracle(est: &[f64], truth: &[f64], lats_deg: &[f64], w: usize) -> f64 {
    let h = lats_deg.len();
    let mean_cos: f64 = lats_deg.iter().map(|l| l.to_radians().cos()).sum::<f64>() / h as f64;
    let mut acc = 0.0;
    for i in 0..h {
        let wt = lats_deg[i].to_radians().cos() / mean_cos;
        for j in 0..w {
            let d = est[i * w + j] - truth[i * w + j];
            acc += wt * d * d;
        }
    }
    (acc / (h * w) as f64).sqrt()
}

pub fn nll_oracle(mean: &[f64], var: &[f64], truth: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..mean.len() {
        acc += 0.5 * (2.0 * std::f64::consts::PI * var[k]).ln() + (truth[k] - mean[k]).powi(2) / (2.0 * var[k]);
    }
    acc / mean.len() as f64
}

fn quad_form(inv: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            acc += d[i] * inv[(i, j)] * d[j];
        }
    }
    acc
}

/// `½ (x − x_b)ᵀ B⁻¹ (x − x_b) + ½ (y − Hx)ᵀ R⁻¹ (y − Hx)` with explicit inverses.
pub fn var_cost_oracle(x: &DVector<f64>, xb: &DVector<f64>, y: &DVector<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let bi = b.clone().try_inverse().expect("B invertible");
    let ri = r.clone().try_inverse().expect("R invertible");
    let mut hx = DVector::zeros(y.len());
    for i in 0..y.len() {
        for j in 0..x.len() {
            hx[i] += h[(i, j)] * x[j];
        }
    }
    0.5 * quad_form(&bi, &(x - xb)) + 0.5 * quad_form(&ri, &(y - hx))
}

/// Random SPD matrix `A Aᵀ + n I` scaled to unit-ish diagonal.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(n, n) * n as f64) / n as f64
}

/// Dense kernel sums of fully on-grid conditional points, one channel:
/// returns `(density, signal)` with `k = exp(-d²/ℓ²)` truncated at `5ℓ` per axis.
pub fn masked_conv_oracle(
    values: &[f64],
    mask: &[bool],
    rows: &[f64],
    cols: &[f64],
    ls: f64,
    periodic: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (rows.len(), cols.len());
    let mut dens = vec![0.0; h * w];
    let mut sig = vec![0.0; h * w];
    let lon_d = |a: f64, b: f64| {
        let d = a - b;
        if periodic {
            d - 2.0 * (d / 2.0).round()
        } else {
            d
        }
    };
    for i in 0..h {
        for j in 0..w {
            for a in 0..h {
                for b in 0..w {
                    if !mask[a * w + b] {
                        continue;
                    }
                    let du = rows[i] - rows[a];
                    let dv = lon_d(cols[j], cols[b]);
                    if du.abs() > 5.0 * ls || dv.abs() > 5.0 * ls {
                        continue;
                    }
                    let k = (-(du * du + dv * dv) / (ls * ls)).exp();
                    dens[i * w + j] += k;
                    sig[i * w + j] += k * values[a * w + b];
                }
            }
        }
    }
    (dens, sig)
}

/// Direct 2-D DFT (forward, unnormalised).
pub fn dft2(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let ph = -2.0 * std::f64::consts::PI * ((k * a) as f64 / h as f64 + (l * b) as f64 / w as f64);
                    acc += x[a * w + b] * Complex64::from_polar(1.0, ph);
                }
            }
            out[k * w + l] = acc;
        }
    }
    out
}

/// Signed frequency of DFT index `k` on an axis of length `n`.
pub fn signed_freq(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

/// Largest normwise relative error between analytic and central-difference gradients of
/// `⟨f(params, leaves), probe⟩`, over every parameter tensor and every leaf.
pub fn gradient_error(
    store: &mut ParamStore,
    leaves: &[Tensor],
    f: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Var,
    seed: u64,
) -> f64 {
    let eval = |store: &ParamStore, leaves: &[Tensor], probe: Option<&[f64]>| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, store, &vars);
        let values = tape.value(out).data.clone();
        let s = probe.map(|p| values.iter().zip(p).map(|(a, b)| a * b).sum()).unwrap_or(0.0);
        (s, values)
    };
    let (_, first) = eval(store, leaves, None);
    let mut r = rng(seed);
    let probe = uniform(&mut r, first.len(), -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, store, &vars);
    let loss = tape.weighted_sum(out, &probe);
    let g = tape.backward(loss);
    let pgrads = tape.param_grads(store, &g);
    let lgrads: Vec<Vec<f64>> = vars.iter().zip(leaves).map(|(&v, t)| g.get_or_zeros(v, t.len())).collect();

    let eps = 1e-6;
    let rel = |a: &[f64], n: &[f64]| {
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-10 {
            diff
        } else {
            diff / scale
        }
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        let mut num = vec![0.0; len];
        for k in 0..len {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + eps;
            let (fp, _) = eval(store, leaves, Some(&probe));
            store.get_mut(id).data[k] = orig - eps;
            let (fm, _) = eval(store, leaves, Some(&probe));
            store.get_mut(id).data[k] = orig;
            num[k] = (fp - fm) / (2.0 * eps);
        }
        worst = worst.max(rel(&pgrads[slot], &num));
    }
    let mut ls = leaves.to_vec();
    for (li, an) in lgrads.iter().enumerate() {
        let mut num = vec![0.0; ls[li].len()];
        for k in 0..num.len() {
            let orig = ls[li].data[k];
            ls[li].data[k] = orig + eps;
            let (fp, _) = eval(store, &ls, Some(&probe));
            ls[li].data[k] = orig - eps;
            let (fm, _) = eval(store, &ls, Some(&probe));
            ls[li].data[k] = orig;
            num[k] = (fp - fm) / (2.0 * eps);
        }
        worst = worst.max(rel(an, &num));
    }
    worst
}
