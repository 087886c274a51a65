//! Randomised checks returning their worst observed error, shared by the per-module tests
//! and the acceptance suite.

use fnp_core::dam::{align, select_merge, similarity, similarity_values, Dam, Retain, Selection};
use fnp_core::decoder::{gaussian_nll, gaussian_nll_values, Decoder};
use fnp_core::encoder::{setconv_sums, ConditionalSet, RefGrid, SvdEncoder};
use fnp_core::grid::{ChannelMeta, Field, LatLonGrid, ObservationSet};
use fnp_core::metrics::latitude_weighted_rmse;
use fnp_core::nfl::{NflStack, ResidualForm};
use fnp_core::spectral::{fft2_real, spectral_conv, weight_shape};
use fnp_core::tensor::{ParamStore, Tape, Tensor};
use fnp_core::var3d::VarProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn channels(n: usize) -> Vec<ChannelMeta> {
    (0..n).map(|c| ChannelMeta::new(format!("c{c}"), (c % 2) as u32)).collect()
}

/// Random off-grid conditional set with some entries masked.
pub fn random_set(r: &mut impl Rng, grid: &LatLonGrid, n: usize, c: usize) -> ConditionalSet {
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(-89.0..89.0), r.random_range(0.0..359.9))).collect();
    let values = uniform(r, n * c, -2.0, 2.0);
    let mut mask: Vec<bool> = (0..n * c).map(|_| r.random_bool(0.8)).collect();
    mask[0] = true;
    let obs = ObservationSet::new(coords, c, values, mask, grid.resolution()).unwrap();
    ConditionalSet::from_observations(&obs, &grid.domain()).unwrap()
}

// ----- exact math -----

/// Feature similarity against the loop oracle, differentiable and plain paths.
pub fn similarity_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (k, h, w) = (r.random_range(1..6), r.random_range(1..5), r.random_range(1..7));
        let n = h * w;
        let y = uniform(&mut r, k * n, -3.0, 3.0);
        let s = uniform(&mut r, k * n, -3.0, 3.0);
        let expected = similarity_oracle(&y, &s, k, n);
        let plain = similarity_values(&y, &s, k);
        let mut tape = Tape::new();
        let vy = tape.leaf(Tensor::new(vec![k, h, w], y));
        let vs = tape.leaf(Tensor::new(vec![k, h, w], s));
        let sim = similarity(&mut tape, vy, vs).unwrap();
        for p in 0..n {
            worst = worst.max(rel_err(plain[p], expected[p])).max(rel_err(tape.value(sim).data[p], expected[p]));
        }
    }
    worst
}

/// Hard selection against the loop oracle; a third of the points are exact ties.
/// Returns the number of mismatching entries.
pub fn selection_mismatches(instances: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let (k, h, w) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..7));
        let n = h * w;
        let bg = uniform(&mut r, k * n, -1.0, 1.0);
        let obs = uniform(&mut r, k * n, -1.0, 1.0);
        let sb = uniform(&mut r, n, 0.0, 2.0);
        let so: Vec<f64> = sb.iter().map(|&v| if r.random_bool(1.0 / 3.0) { v } else { r.random_range(0.0..2.0) }).collect();
        let expected = select_oracle(&bg, &obs, &sb, &so, k, n);
        let mut tape = Tape::new();
        let vb = tape.leaf(Tensor::new(vec![k, h, w], bg));
        let vo = tape.leaf(Tensor::new(vec![k, h, w], obs));
        let vsb = tape.leaf(Tensor::new(vec![1, h, w], sb));
        let vso = tape.leaf(Tensor::new(vec![1, h, w], so));
        let out = select_merge(&mut tape, vb, vo, vsb, vso, Retain::Verbatim).unwrap();
        bad += tape.value(out).data.iter().zip(&expected).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    bad
}

/// Latitude-weighted RMSE against the loop oracle.
pub fn rmse_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let grid = LatLonGrid::global(r.random_range(1..9), r.random_range(1..17)).unwrap();
        let n = grid.len();
        let est = Field::new(grid.clone(), channels(2), uniform(&mut r, 2 * n, -5.0, 5.0)).unwrap();
        let truth = Field::new(grid.clone(), channels(2), uniform(&mut r, 2 * n, -5.0, 5.0)).unwrap();
        for c in 0..2 {
            let got = latitude_weighted_rmse(&est, &truth, c).unwrap();
            let expected = rmse_oracle(est.channel(c), truth.channel(c), &grid.latitudes(), grid.n_lon());
            worst = worst.max(rel_err(got, expected));
        }
    }
    worst
}

/// Gaussian NLL against the loop oracle, plain and differentiable paths.
pub fn nll_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(1..50);
        let mean = uniform(&mut r, n, -3.0, 3.0);
        let var = uniform(&mut r, n, 1e-3, 4.0);
        let truth = uniform(&mut r, n, -3.0, 3.0);
        let expected = nll_oracle(&mean, &var, &truth);
        let plain = gaussian_nll_values(&mean, &var, &truth).unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::new(vec![1, n], mean));
        let v = tape.leaf(Tensor::new(vec![1, n], var));
        let l = gaussian_nll(&mut tape, m, v, &truth).unwrap();
        worst = worst.max(rel_err(plain, expected)).max(rel_err(tape.value(l).data[0], expected));
    }
    worst
}

pub fn random_problem(r: &mut impl Rng, n: usize, m: usize) -> VarProblem {
    let xb = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
    let y = DVector::from_fn(m, |_, _| r.random_range(-2.0..2.0));
    let h = DMatrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0));
    VarProblem::new(xb, y, random_spd(r, n), random_spd(r, m), h).unwrap()
}

/// Variational cost against the explicit-inverse oracle.
pub fn cost_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, m) = (r.random_range(1..9), r.random_range(1..9));
        let p = random_problem(&mut r, n, m);
        let x = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let expected = var_cost_oracle(&x, &p.x_b, &p.y, &p.b, &p.r, &p.h);
        worst = worst.max(rel_err(p.cost(&x).unwrap(), expected));
    }
    worst
}

// ----- variational oracle -----

/// Conjugate-gradient minimisation of the cost using explicitly inverted covariances.
pub fn iterative_minimum(p: &VarProblem) -> DVector<f64> {
    let bi = p.b.clone().try_inverse().unwrap();
    let ri = p.r.clone().try_inverse().unwrap();
    let a = &bi + p.h.transpose() * &ri * &p.h;
    let rhs = &bi * &p.x_b + p.h.transpose() * &ri * &p.y;
    let mut x = p.x_b.clone();
    let mut res = &rhs - &a * &x;
    let mut dir = res.clone();
    let mut rr = res.dot(&res);
    for _ in 0..10 * x.len() {
        if rr.sqrt() < 1e-14 * rhs.norm().max(1.0) {
            break;
        }
        let ad = &a * &dir;
        let alpha = rr / dir.dot(&ad);
        x += alpha * &dir;
        res -= alpha * ad;
        let rr_new = res.dot(&res);
        dir = &res + (rr_new / rr) * dir;
        rr = rr_new;
    }
    x
}

/// `(max |x_a − x_iter|∞, max ‖∇J(x_a)‖)` over random problems with `n ≤ 64`.
pub fn variational_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut dx, mut gn): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let n = r.random_range(1..65);
        let m = r.random_range(1..n + 1);
        let p = random_problem(&mut r, n, m);
        let xa = p.analytic_analysis().unwrap();
        let xi = iterative_minimum(&p);
        dx = dx.max((&xa - &xi).amax());
        gn = gn.max(p.gradient(&xa).unwrap().norm());
    }
    (dx, gn)
}

// ----- structural invariants -----

/// Relative change of the encoder output under random permutations of the set.
pub fn permutation_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let grid = LatLonGrid::global(6, 12).unwrap();
    let rg = RefGrid::new(&grid);
    let mut store = ParamStore::new();
    let enc = SvdEncoder::new(&mut store, "enc", &channels(3), 4, 0.4, true, &mut r).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let npts = r.random_range(1..40);
        let set = random_set(&mut r, &grid, npts, 3);
        let mut order: Vec<usize> = (0..set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let perm = set.permuted(&order);
        let mut t1 = Tape::new();
        let a = enc.embed(&mut t1, &store, &set, &rg);
        let mut t2 = Tape::new();
        let b = enc.embed(&mut t2, &store, &perm, &rg);
        let (a, b) = (&t1.value(a).data, &t2.value(b).data);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale);
    }
    worst
}

/// On-grid conditional points with a random mask against the dense masked convolution.
pub fn on_grid_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let grid = LatLonGrid::global(r.random_range(2..8), r.random_range(2..12)).unwrap();
        let n = grid.len();
        let c = 2;
        let field = Field::new(grid.clone(), channels(c), uniform(&mut r, c * n, -2.0, 2.0)).unwrap();
        let full = ObservationSet::from_field(&field);
        let mask: Vec<bool> = (0..n * c).map(|_| r.random_bool(0.6)).collect();
        let obs = ObservationSet::new(full.coords().to_vec(), c, full.raw_values().to_vec(), mask.clone(), grid.resolution()).unwrap();
        let set = ConditionalSet::from_observations(&obs, &grid.domain()).unwrap();
        let rg = RefGrid::new(&grid);
        let ls = r.random_range(0.1..0.8);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::filled(vec![c], f64::ln(ls)));
        let out = setconv_sums(&mut tape, l, &set, &rg);
        let out = &tape.value(out).data;
        for ch in 0..c {
            let m: Vec<bool> = (0..n).map(|p| mask[p * c + ch]).collect();
            let (dens, sig) = masked_conv_oracle(field.channel(ch), &m, &rg.rows, &rg.cols, ls, true);
            for p in 0..n {
                worst = worst.max((out[ch * n + p] - dens[p]).abs()).max((out[(c + ch) * n + p] - sig[p]).abs());
            }
        }
    }
    worst
}

/// Largest relative spectral energy of a spectral-convolution output outside the retained
/// band, measured with the direct DFT.
pub fn truncation_leak(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (h, w) = (r.random_range(4..9), r.random_range(4..13));
        let (ml, mo) = (r.random_range(1..h / 2 + 1), r.random_range(1..w / 2 + 1));
        let (cin, cout) = (2, 2);
        let x = uniform(&mut r, cin * h * w, -1.0, 1.0);
        let shp = weight_shape(ml, mo, cout, cin);
        let len: usize = shp.iter().product();
        let mut tape = Tape::new();
        let vx = tape.leaf(Tensor::new(vec![cin, h, w], x));
        let wr = tape.leaf(Tensor::new(shp.clone(), uniform(&mut r, len, -1.0, 1.0)));
        let wi = tape.leaf(Tensor::new(shp, uniform(&mut r, len, -1.0, 1.0)));
        let y = spectral_conv(&mut tape, vx, wr, wi, ml, mo);
        let y = &tape.value(y).data;
        for o in 0..cout {
            let spec = dft2(&y[o * h * w..(o + 1) * h * w], h, w);
            let total: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
            let leak: f64 = spec
                .iter()
                .enumerate()
                .filter(|(idx, _)| {
                    let (k, l) = (signed_freq(idx / w, h), signed_freq(idx % w, w));
                    k.unsigned_abs() >= ml || l.unsigned_abs() >= mo
                })
                .map(|(_, z)| z.norm_sqr())
                .sum();
            worst = worst.max(leak / total.max(1e-300));
        }
    }
    worst
}

/// Fast transform against the direct DFT on an 8 × 8 grid.
pub fn fft_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, 64, -1.0, 1.0);
    let fast = fft2_real(&x, 8, 8);
    let slow = dft2(&x, 8, 8);
    fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

/// Checks that every selected vector is a bitwise copy of one source's vector.
pub fn exact_copy_violations(instances: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let (k, h, w) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..7));
        let n = h * w;
        let bg = uniform(&mut r, k * n, -1.0, 1.0);
        let obs = uniform(&mut r, k * n, -1.0, 1.0);
        let mut tape = Tape::new();
        let vb = tape.leaf(Tensor::new(vec![k, h, w], bg.clone()));
        let vo = tape.leaf(Tensor::new(vec![k, h, w], obs.clone()));
        let sb = tape.leaf(Tensor::new(vec![1, h, w], uniform(&mut r, n, 0.0, 1.0)));
        let so = tape.leaf(Tensor::new(vec![1, h, w], uniform(&mut r, n, 0.0, 1.0)));
        let out = select_merge(&mut tape, vb, vo, sb, so, Retain::Verbatim).unwrap();
        let out = &tape.value(out).data;
        for p in 0..n {
            let col = |v: &[f64]| (0..k).map(|c| v[c * n + p].to_bits()).collect::<Vec<_>>();
            let got = col(out);
            if got != col(&bg) && got != col(&obs) {
                bad += 1;
            }
        }
    }
    bad
}

/// Alignment of constant maps everywhere and of latitude-linear maps at targets inside
/// the source's outermost row centres.
pub fn align_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let src = LatLonGrid::global(r.random_range(2..10), r.random_range(2..16)).unwrap();
        let dst = LatLonGrid::global(r.random_range(2..20), r.random_range(2..32)).unwrap();
        let n = src.len();
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-0.1..0.1));
        let lats = src.latitudes();
        let mut vals = vec![a; n];
        vals.extend((0..n).map(|p| a + b * lats[p / src.n_lon()]));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, src.n_lat(), src.n_lon()], vals));
        let y = align(&mut tape, x, &src, &dst).unwrap();
        let y = &tape.value(y).data;
        let m = dst.len();
        let (lo, hi) = (lats.iter().cloned().fold(f64::INFINITY, f64::min), lats.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        for (p, lat) in dst.points().iter().map(|q| q.0).enumerate() {
            worst = worst.max((y[p] - a).abs());
            if lat >= lo && lat <= hi {
                worst = worst.max((y[m + p] - (a + b * lat)).abs());
            }
        }
    }
    worst
}

// ----- gradients on 4 × 8 grids -----

pub fn setconv_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let grid = LatLonGrid::global(4, 8).unwrap();
    let set = random_set(&mut r, &grid, 12, 3);
    let mut store = ParamStore::new();
    let enc = SvdEncoder::new(&mut store, "enc", &channels(3), 3, 0.6, true, &mut r).unwrap();
    let rg = RefGrid::new(&grid);
    gradient_error(&mut store, &[], |t, s, _| enc.embed(t, s, &set, &rg), seed)
}

pub fn nfl_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let stack = NflStack::new(&mut store, "nfl", 3, 2, 2, 3, 3, ResidualForm::PostSum, &mut r);
    let x = Tensor::new(vec![3, 4, 8], uniform(&mut r, 96, -1.0, 1.0));
    gradient_error(&mut store, &[x], |t, s, v| stack.forward(t, s, v[0], true).unwrap(), seed)
}

pub fn dam_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let target = LatLonGrid::global(4, 8).unwrap();
    let obs_grid = LatLonGrid::global(8, 16).unwrap();
    let mut store = ParamStore::new();
    let dam = Dam::new(&mut store, "dam", 3, 2, Retain::Verbatim, Selection::Hard, &mut r);
    let bg = Tensor::new(vec![3, 4, 8], uniform(&mut r, 96, -1.0, 1.0));
    let obs = Tensor::new(vec![3, 8, 16], uniform(&mut r, 384, -1.0, 1.0));
    gradient_error(&mut store, &[bg, obs], |t, s, v| dam.forward(t, s, v[0], v[1], &obs_grid, &target).unwrap(), seed)
}

pub fn decoder_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let grid = LatLonGrid::global(4, 8).unwrap();
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", 5, &[6], 2, 1e-3, &mut r).unwrap();
    let rep = Tensor::new(vec![5, 4, 8], uniform(&mut r, 160, -1.0, 1.0));
    let targets: Vec<(f64, f64)> = (0..7).map(|_| (r.random_range(-80.0..80.0), r.random_range(0.0..359.0))).collect();
    gradient_error(
        &mut store,
        &[rep],
        |t, s, v| {
            let (m, var) = dec.decode(t, s, v[0], &grid, &targets).unwrap();
            t.concat(&[m, var])
        },
        seed,
    )
}

pub fn nll_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 32;
    let mean = Tensor::new(vec![4, 8], uniform(&mut r, n, -2.0, 2.0));
    let var = Tensor::new(vec![4, 8], uniform(&mut r, n, 0.2, 3.0));
    let truth = uniform(&mut r, n, -2.0, 2.0);
    let mut store = ParamStore::new();
    gradient_error(&mut store, &[mean, var], |t, _, v| gaussian_nll(t, v[0], v[1], &truth).unwrap(), seed)
}
