//! Damped Gauss-Newton (Levenberg-Marquardt) with a block solver for sequence fits.

use nalgebra::{DMatrix, DVector};

use crate::Mat3;

/// Normal equations of one frame inside a sequence system.
#[derive(Debug, Clone)]
pub struct FrameBlock {
    /// Diagonal block over the frame's own parameters.
    pub d: DMatrix<f64>,
    /// Coupling to the shape parameters.
    pub b: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Per joint rotation coupling to the previous frame, `H[prev, this]`.
    pub coupling: Vec<Mat3>,
}

/// Arrowhead system: block-tridiagonal frames plus a dense shape border.
#[derive(Debug, Clone)]
pub struct ArrowSystem {
    pub frames: Vec<FrameBlock>,
    pub c: DMatrix<f64>,
    pub g_shape: DVector<f64>,
    pub shape_dim: usize,
    pub frame_dim: usize,
    pub cost: f64,
}

/// Dense system for small problems.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cost: f64,
}

/// A linearization the LM loop can damp and solve.
pub trait Linearized {
    fn cost(&self) -> f64;
    /// `Σ w Jᵀr`; the objective gradient is twice this.
    fn half_gradient(&self) -> DVector<f64>;
    fn max_diagonal(&self) -> f64;
    /// Solves `(H + μI) δ = -g`.
    fn solve(&self, mu: f64) -> Option<DVector<f64>>;
}

impl Linearized for DenseSystem {
    fn cost(&self) -> f64 {
        self.cost
    }

    fn half_gradient(&self) -> DVector<f64> {
        self.g.clone()
    }

    fn max_diagonal(&self) -> f64 {
        self.h.diagonal().max()
    }

    fn solve(&self, mu: f64) -> Option<DVector<f64>> {
        let mut h = self.h.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += mu;
        }
        let chol = h.cholesky()?;
        Some(-chol.solve(&self.g))
    }
}

// Multiplies `m` on the left by `Uᵀ`, where `U` is block diagonal over the first
// `3 * blocks.len()` rows and zero elsewhere.
fn left_mul_coupling_t(blocks: &[Mat3], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, u) in blocks.iter().enumerate() {
        let s = 3 * j;
        let prod = u.transpose() * m.rows(s, 3);
        out.rows_mut(s, 3).copy_from(&prod);
    }
    out
}

fn left_mul_coupling(blocks: &[Mat3], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, u) in blocks.iter().enumerate() {
        let s = 3 * j;
        let prod = u * m.rows(s, 3);
        out.rows_mut(s, 3).copy_from(&prod);
    }
    out
}

// Computes `Uᵀ M U` for block diagonal `U`.
fn sandwich(blocks: &[Mat3], m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (a, ua) in blocks.iter().enumerate() {
        for (b, ub) in blocks.iter().enumerate() {
            let blk: Mat3 = m.fixed_view::<3, 3>(3 * a, 3 * b).into_owned();
            out.fixed_view_mut::<3, 3>(3 * a, 3 * b).copy_from(&(ua.transpose() * blk * ub));
        }
    }
    out
}

fn spd_inverse(m: DMatrix<f64>) -> Option<DMatrix<f64>> {
    Some(m.cholesky()?.inverse())
}

impl ArrowSystem {
    fn damped_c(&self, mu: f64) -> DMatrix<f64> {
        let mut c = self.c.clone();
        for i in 0..self.shape_dim {
            c[(i, i)] += mu;
        }
        c
    }

    /// Solves with block Thomas elimination over frames and a Schur complement on shape.
    pub fn solve_damped(&self, mu: f64) -> Option<DVector<f64>> {
        let n = self.frames.len();
        let k = self.shape_dim;
        let fd = self.frame_dim;
        if n == 0 {
            return Some(DVector::zeros(k));
        }
        // Right-hand sides per frame: column 0 is -g, the rest is B (for the shape border).
        let rhs: Vec<DMatrix<f64>> = self
            .frames
            .iter()
            .map(|f| {
                let mut r = DMatrix::zeros(fd, 1 + k);
                r.column_mut(0).copy_from(&(-&f.g));
                r.columns_mut(1, k).copy_from(&f.b);
                r
            })
            .collect();
        let mut s_inv: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut r_hat: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        for f in 0..n {
            let mut s = self.frames[f].d.clone();
            for i in 0..fd {
                s[(i, i)] += mu;
            }
            let mut r = rhs[f].clone();
            if f > 0 {
                let u = &self.frames[f].coupling;
                s -= sandwich(u, &s_inv[f - 1]);
                r -= left_mul_coupling_t(u, &(&s_inv[f - 1] * &r_hat[f - 1]));
            }
            s_inv.push(spd_inverse(s)?);
            r_hat.push(r);
        }
        let mut sol: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
        sol[n - 1] = &s_inv[n - 1] * &r_hat[n - 1];
        for f in (0..n - 1).rev() {
            let r = &r_hat[f] - left_mul_coupling(&self.frames[f + 1].coupling, &sol[f + 1]);
            sol[f] = &s_inv[f] * r;
        }
        // sol[f] = [y_f | Z_f] with x_f = y_f - Z_f β.
        let mut schur = self.damped_c(mu);
        let mut rhs_shape = -&self.g_shape;
        for (blk, x) in self.frames.iter().zip(&sol) {
            schur -= blk.b.tr_mul(&x.columns(1, k));
            rhs_shape -= blk.b.tr_mul(&x.column(0));
        }
        let schur = (&schur + schur.transpose()) * 0.5;
        let beta = schur.cholesky()?.solve(&rhs_shape);
        let mut out = DVector::zeros(k + n * fd);
        out.rows_mut(0, k).copy_from(&beta);
        for (f, x) in sol.iter().enumerate() {
            let xf = x.column(0) - x.columns(1, k) * &beta;
            out.rows_mut(k + f * fd, fd).copy_from(&xf);
        }
        Some(out)
    }

    /// Assembles the full dense matrix; used to check the block solver.
    pub fn to_dense(&self) -> DenseSystem {
        let n = self.frames.len();
        let (k, fd) = (self.shape_dim, self.frame_dim);
        let dim = k + n * fd;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        h.view_mut((0, 0), (k, k)).copy_from(&self.c);
        g.rows_mut(0, k).copy_from(&self.g_shape);
        for (f, blk) in self.frames.iter().enumerate() {
            let o = k + f * fd;
            h.view_mut((o, o), (fd, fd)).copy_from(&blk.d);
            h.view_mut((o, 0), (fd, k)).copy_from(&blk.b);
            h.view_mut((0, o), (k, fd)).copy_from(&blk.b.transpose());
            g.rows_mut(o, fd).copy_from(&blk.g);
            if f > 0 {
                let p = o - fd;
                for (j, u) in blk.coupling.iter().enumerate() {
                    h.fixed_view_mut::<3, 3>(p + 3 * j, o + 3 * j).copy_from(u);
                    h.fixed_view_mut::<3, 3>(o + 3 * j, p + 3 * j).copy_from(&u.transpose());
                }
            }
        }
        DenseSystem { h, g, cost: self.cost }
    }
}

impl Linearized for ArrowSystem {
    fn cost(&self) -> f64 {
        self.cost
    }

    fn half_gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.shape_dim + self.frames.len() * self.frame_dim);
        g.rows_mut(0, self.shape_dim).copy_from(&self.g_shape);
        for (f, blk) in self.frames.iter().enumerate() {
            g.rows_mut(self.shape_dim + f * self.frame_dim, self.frame_dim).copy_from(&blk.g);
        }
        g
    }

    fn max_diagonal(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.d.diagonal().max())
            .fold(self.c.diagonal().max(), f64::max)
    }

    fn solve(&self, mu: f64) -> Option<DVector<f64>> {
        self.solve_damped(mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
    /// Initial damping relative to the largest diagonal entry of `JᵀJ`.
    pub initial_damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome<S> {
    pub state: S,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the start and after each accepted step.
    pub history: Vec<f64>,
}

const MU_MAX: f64 = 1e16;

/// Minimizes a sum of squares. Only steps that lower the objective are accepted.
pub fn levenberg_marquardt<S, L: Linearized>(
    start: S,
    settings: LmSettings,
    linearize: impl Fn(&S) -> L,
    cost: impl Fn(&S) -> f64,
    apply: impl Fn(&S, &DVector<f64>) -> S,
) -> LmOutcome<S> {
    let mut state = start;
    let mut lin = linearize(&state);
    let mut f = lin.cost();
    let mut history = vec![f];
    let mut mu = (settings.initial_damping * lin.max_diagonal()).max(1e-12);
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        iterations += 1;
        let g = lin.half_gradient();
        if g.amax() < 1e-14 {
            converged = true;
            break;
        }
        let Some(step) = lin.solve(mu) else {
            mu *= nu;
            nu *= 2.0;
            if mu > MU_MAX {
                break;
            }
            continue;
        };
        let candidate = apply(&state, &step);
        let fc = cost(&candidate);
        let predicted = -g.dot(&step) + mu * step.norm_squared();
        if fc.is_finite() && fc < f && predicted > 0.0 {
            let rho = (f - fc) / predicted;
            let decrease = f - fc;
            state = candidate;
            lin = linearize(&state);
            f = lin.cost();
            history.push(f);
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            mu = mu.max(1e-12);
            nu = 2.0;
            if decrease < settings.tolerance {
                converged = true;
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > MU_MAX {
                // No step can lower the objective further at machine precision.
                converged = true;
                break;
            }
        }
    }
    LmOutcome { state, cost: f, iterations, converged, history }
}
