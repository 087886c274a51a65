//! Classical 3D-Var on small dense problems.
//!
//! `J(x) = ½ (x − x_b)ᵀ B⁻¹ (x − x_b) + ½ (y − Hx)ᵀ R⁻¹ (y − Hx)`, minimised in closed form by
//! `x_a = x_b + B Hᵀ (H B Hᵀ + R)⁻¹ (y − H x_b)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{shape, FnpError, Result};
use crate::grid::{Field, ObservationSet};
use crate::interp::BilinearPlan;

/// Largest state dimension accepted by the dense solver.
pub const MAX_STATE: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct VarProblem {
    pub x_b: DVector<f64>,
    pub y: DVector<f64>,
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub h: DMatrix<f64>,
    b_chol: Cholesky<f64, Dyn>,
    r_chol: Cholesky<f64, Dyn>,
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(shape(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(FnpError::NotPositiveDefinite(format!("{name} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Cholesky::new(m.clone()).ok_or_else(|| FnpError::NotPositiveDefinite(format!("Cholesky of {name} failed")))
}

impl VarProblem {
    pub fn new(x_b: DVector<f64>, y: DVector<f64>, b: DMatrix<f64>, r: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let (n, m) = (x_b.len(), y.len());
        if n == 0 || n > MAX_STATE {
            return Err(shape(format!("state dimension {n} outside 1..={MAX_STATE}")));
        }
        if b.shape() != (n, n) || r.shape() != (m, m) || h.shape() != (m, n) {
            return Err(shape(format!(
                "inconsistent dimensions: x_b {n}, y {m}, B {:?}, R {:?}, H {:?}",
                b.shape(),
                r.shape(),
                h.shape()
            )));
        }
        let all = x_b.iter().chain(y.iter()).chain(b.iter()).chain(r.iter()).chain(h.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(FnpError::NonFinite("variational problem".into()));
        }
        let b_chol = check_spd(&b, "B")?;
        let r_chol = if m == 0 { Cholesky::new(DMatrix::identity(0, 0)).unwrap() } else { check_spd(&r, "R")? };
        Ok(VarProblem { x_b, y, b, r, h, b_chol, r_chol })
    }

    pub fn state_dim(&self) -> usize {
        self.x_b.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.len()
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(shape(format!("state has {} entries, problem expects {}", x.len(), self.state_dim())));
        }
        Ok(())
    }

    pub fn cost(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        let d = x - &self.x_b;
        let e = &self.y - &self.h * x;
        let jb = d.dot(&self.b_chol.solve(&d));
        let jo = if self.obs_dim() == 0 { 0.0 } else { e.dot(&self.r_chol.solve(&e)) };
        Ok(0.5 * (jb + jo))
    }

    /// `∇J(x) = B⁻¹ (x − x_b) − Hᵀ R⁻¹ (y − Hx)`
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let d = x - &self.x_b;
        let mut g = self.b_chol.solve(&d);
        if self.obs_dim() > 0 {
            let e = &self.y - &self.h * x;
            g -= self.h.transpose() * self.r_chol.solve(&e);
        }
        Ok(g)
    }

    pub fn analytic_analysis(&self) -> Result<DVector<f64>> {
        if self.obs_dim() == 0 {
            return Ok(self.x_b.clone());
        }
        let bht = &self.b * self.h.transpose();
        let s = &self.h * &bht + &self.r;
        let chol = Cholesky::new(s).ok_or_else(|| FnpError::Numeric("innovation covariance is singular".into()))?;
        let innovation = &self.y - &self.h * &self.x_b;
        Ok(&self.x_b + bht * chol.solve(&innovation))
    }

    /// Builds the problem for a small gridded background and an observation set.
    ///
    /// `B` is block-diagonal over channels with a Gaussian correlation in chordal distance
    /// on the unit sphere (length scale `correlation_length_deg` of arc), scaled by
    /// `bg_std[c]²`; a relative jitter of 1e-9 keeps it numerically SPD. `H` reads each
    /// observed entry by bilinear interpolation and `R = obs_var · I`.
    pub fn from_field(
        background: &Field,
        obs: &ObservationSet,
        bg_std: &[f64],
        correlation_length_deg: f64,
        obs_var: f64,
    ) -> Result<Self> {
        let grid = background.grid();
        let c = background.n_channels();
        let np = grid.len();
        let n = c * np;
        if bg_std.len() != c || obs.n_channels() != c {
            return Err(shape("channel counts of background, observations and bg_std differ"));
        }
        if n > MAX_STATE {
            return Err(shape(format!("state dimension {n} exceeds {MAX_STATE}")));
        }
        let pts = grid.points();
        let xyz: Vec<[f64; 3]> = pts
            .iter()
            .map(|&(lat, lon)| {
                let (la, lo) = (lat.to_radians(), lon.to_radians());
                [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
            })
            .collect();
        let len = 2.0 * (0.5 * correlation_length_deg.to_radians()).sin();
        let mut b = DMatrix::zeros(n, n);
        for ch in 0..c {
            let var = bg_std[ch] * bg_std[ch];
            for i in 0..np {
                for j in 0..np {
                    let d2: f64 = (0..3).map(|k| (xyz[i][k] - xyz[j][k]).powi(2)).sum();
                    b[(ch * np + i, ch * np + j)] = var * (-0.5 * d2 / (len * len)).exp();
                }
                b[(ch * np + i, ch * np + i)] += 1e-9 * var;
            }
        }
        let plan = BilinearPlan::new(grid, obs.coords())?;
        let mut rows: Vec<(usize, usize, f64)> = Vec::new();
        let mut y = Vec::new();
        for k in 0..obs.len() {
            for ch in 0..c {
                if let Some(v) = obs.value(k, ch) {
                    rows.push((k, ch, v));
                    y.push(v);
                }
            }
        }
        let m = rows.len();
        let mut h = DMatrix::zeros(m, n);
        for (row, &(k, ch, _)) in rows.iter().enumerate() {
            let mut probe = vec![0.0; obs.len()];
            probe[k] = 1.0;
            let weights = plan.adjoint(&probe, 1);
            for (p, w) in weights.iter().enumerate() {
                if *w != 0.0 {
                    h[(row, ch * np + p)] += w;
                }
            }
        }
        let r = DMatrix::identity(m, m) * obs_var;
        VarProblem::new(DVector::from_vec(background.values().to_vec()), DVector::from_vec(y), b, r, h)
    }
}

/// On-disk problem description used by `fnp varsolve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarProblemFile {
    pub x_b: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major matrices.
    pub b: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSolution {
    pub x_a: Vec<f64>,
    pub cost_background: f64,
    pub cost_analysis: f64,
    pub gradient_norm: f64,
}

fn to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(shape(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl VarProblemFile {
    pub fn into_problem(self) -> Result<VarProblem> {
        let (n, m) = (self.x_b.len(), self.y.len());
        let b = to_matrix(&self.b, n, n, "B")?;
        let r = to_matrix(&self.r, m, m, "R")?;
        let h = to_matrix(&self.h, m, n, "H")?;
        VarProblem::new(DVector::from_vec(self.x_b), DVector::from_vec(self.y), b, r, h)
    }
}

pub fn solve(problem: &VarProblem) -> Result<VarSolution> {
    let x_a = problem.analytic_analysis()?;
    Ok(VarSolution {
        cost_background: problem.cost(&problem.x_b)?,
        cost_analysis: problem.cost(&x_a)?,
        gradient_norm: problem.gradient(&x_a)?.norm(),
        x_a: x_a.iter().copied().collect(),
    })
}
