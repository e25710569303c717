//! Continuation method for the coupled forward-backward system.
//!
//! `ℰ(γ, ξ, ℐ)` is solved by Picard iteration: the γ-weighted model terms are
//! evaluated on the previous iterate and passed, together with `ℐ`, as the
//! inputs of a decoupled system. The decoupled system is solved by forward
//! Euler for `X` and least-squares Monte Carlo: per time step and label,
//! `Y_{k+1} + ℐ^f Δt` is regressed jointly on `p(X_k)` and `p(X_k) ΔW_k` for a
//! polynomial basis `p`, which yields `Y_k` and `Z_k` together. [`solve_full`] marches `γ` from
//! `η` to `1`, warm starting each step from the previous one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::ansatz_y;
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::hamiltonian::{argmin_action, grad_x_with_frame};
use crate::linalg::{mat_t_vec_acc, norm_sq};
use crate::model::{GenericModel, InitialCondition};
use crate::noise;
use crate::paths::{MeanPath, PathArray, TimeGrid};
use crate::riccati::RiccatiSolution;

/// Extended solution sampled on every grid time, `[S+1][label][particle][·]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeState {
    pub times: TimeGrid,
    pub x: PathArray,
    pub y: PathArray,
    /// column-major `d × n`
    pub z: PathArray,
    pub alpha: PathArray,
}

impl FbsdeState {
    pub fn zeros(times: TimeGrid, n_labels: usize, n_particles: usize, d: usize, n: usize, m: usize) -> Self {
        let nt = times.n_times();
        Self {
            times,
            x: PathArray::zeros(nt, n_labels, n_particles, d),
            y: PathArray::zeros(nt, n_labels, n_particles, d),
            z: PathArray::zeros(nt, n_labels, n_particles, d * n),
            alpha: PathArray::zeros(nt, n_labels, n_particles, m),
        }
    }

    fn same_layout(&self, other: &FbsdeState) -> bool {
        self.times.same_as(&other.times)
            && self.x.same_shape(&other.x)
            && self.y.same_shape(&other.y)
            && self.z.same_shape(&other.z)
            && self.alpha.same_shape(&other.alpha)
    }

    fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.alpha]
            .iter()
            .all(|a| a.as_slice().iter().all(|v| v.is_finite()))
    }

    pub fn n_labels(&self) -> usize {
        self.x.n_labels()
    }

    pub fn n_particles(&self) -> usize {
        self.x.n_particles()
    }
}

/// Inputs plugged into the forward drift and volatility, the driver and the
/// terminal condition. `b`, `sigma`, `f` have `S+1` time slots; `g` has one.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBundle {
    pub b: PathArray,
    pub sigma: PathArray,
    pub f: PathArray,
    pub g: PathArray,
}

impl InputBundle {
    pub fn zeros(times: &TimeGrid, n_labels: usize, n_particles: usize, d: usize, n: usize) -> Self {
        let nt = times.n_times();
        Self {
            b: PathArray::zeros(nt, n_labels, n_particles, d),
            sigma: PathArray::zeros(nt, n_labels, n_particles, d * n),
            f: PathArray::zeros(nt, n_labels, n_particles, d),
            g: PathArray::zeros(1, n_labels, n_particles, d),
        }
    }

    fn check(&self, times: &TimeGrid, xi: &PathArray, dw: &PathArray) -> Result<()> {
        let (nl, np, d) = (xi.n_labels(), xi.n_particles(), xi.width());
        let n = dw.width();
        let nt = times.n_times();
        let fits = |a: &PathArray, t: usize, w: usize| {
            a.n_times() == t && a.n_labels() == nl && a.n_particles() == np && a.width() == w
        };
        let ok = xi.n_times() == 1
            && fits(dw, times.n_steps(), n)
            && fits(&self.b, nt, d)
            && fits(&self.sigma, nt, d * n)
            && fits(&self.f, nt, d)
            && fits(&self.g, 1, d);
        if ok && [&self.b, &self.sigma, &self.f, &self.g].iter().all(|a| a.as_slice().iter().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(Error::shape("input bundle, initial condition and noise do not share a layout"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationSchedule {
    pub eta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// total degree of the polynomial regression basis in `X`
    pub degree: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            eta: 0.2,
            tol: 1e-6,
            max_iter: 100,
            degree: 1,
        }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(format!("continuation step must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::invalid("Picard tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    /// `η, 2η, …, 1`
    pub fn gammas(&self) -> Vec<f64> {
        let n = (1.0 / self.eta - 1e-9).ceil().max(1.0) as usize;
        (1..=n).map(|j| (j as f64 * self.eta).min(1.0)).collect()
    }
}

/// Discrete `𝔖`-norm: label quadrature, particle average, sup over grid
/// times for `X`, `Y` and a left Riemann sum for `|Z|² + |α|²`.
pub fn snorm(grid: &LabelGrid, s: &FbsdeState) -> Result<f64> {
    if s.n_labels() != grid.len() {
        return Err(Error::shape("state and grid have different label counts"));
    }
    let (np, nt) = (s.n_particles(), s.times.n_times());
    let dt = s.times.dt();
    let mut tot = 0.0;
    for i in 0..grid.len() {
        let mut acc = 0.0;
        for p in 0..np {
            let sup = |a: &PathArray| (0..nt).map(|k| norm_sq(a.at(k, i, p))).fold(0.0, f64::max);
            let int: f64 = (0..nt - 1)
                .map(|k| (norm_sq(s.z.at(k, i, p)) + norm_sq(s.alpha.at(k, i, p))) * dt)
                .sum();
            acc += sup(&s.x) + sup(&s.y) + int;
        }
        tot += grid.weight(i) * acc / np as f64;
    }
    Ok(tot.sqrt())
}

pub fn snorm_diff(grid: &LabelGrid, a: &FbsdeState, b: &FbsdeState) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::shape("states differ in layout"));
    }
    let diff = FbsdeState {
        times: a.times,
        x: a.x.axpy(-1.0, &b.x)?,
        y: a.y.axpy(-1.0, &b.y)?,
        z: a.z.axpy(-1.0, &b.z)?,
        alpha: a.alpha.axpy(-1.0, &b.alpha)?,
    };
    snorm(grid, &diff)
}

/// Exponent tuples of all monomials of total degree `≤ degree` in `d` variables.
fn monomials(d: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; d]];
    let mut frontier = vec![vec![0; d]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            let start = e.iter().rposition(|&v| v > 0).unwrap_or(0);
            for c in start..d {
                let mut f = e.clone();
                f[c] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Standardized polynomial features of `xs` (`np × d`), or `None` when some
/// component has no spread.
fn features(xs: &[f64], d: usize, basis: &[Vec<usize>]) -> Option<DMatrix<f64>> {
    let np = xs.len() / d;
    let mut mean = vec![0.0; d];
    for xp in xs.chunks_exact(d) {
        mean.iter_mut().zip(xp).for_each(|(m, v)| *m += v / np as f64);
    }
    let mut sd = vec![0.0; d];
    for xp in xs.chunks_exact(d) {
        sd.iter_mut().zip(xp.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / np as f64);
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt());
    if sd.iter().zip(&mean).any(|(s, m)| *s <= 1e-12 * (1.0 + m.abs())) {
        return None;
    }
    Some(DMatrix::from_fn(np, basis.len(), |p, b| {
        basis[b]
            .iter()
            .enumerate()
            .map(|(c, &e)| ((xs[p * d + c] - mean[c]) / sd[c]).powi(e as i32))
            .product::<f64>()
    }))
}

struct Fit {
    y: Vec<f64>,
    /// column-major `d × n` per particle
    z: Vec<f64>,
    ss: (f64, f64),
    fallback: bool,
}

/// Joint least-squares fit `target ≈ y(X_k) + Σ_c z_c(X_k) ΔW_c` with `y`, `z_c`
/// in the span of `basis`.
fn regress_step(xs: &[f64], dw: &[f64], target: &[f64], d: usize, n: usize, basis: &[Vec<usize>]) -> Fit {
    let np = target.len() / d;
    let ones = || DMatrix::from_element(np, 1, 1.0);
    let (mut xb, mut fallback) = match features(xs, d, basis) {
        Some(f) => (f, false),
        None => (ones(), basis.len() > 1),
    };
    let tmat = DMatrix::from_row_slice(np, d, target);
    let solve = |xb: &DMatrix<f64>| {
        let nb = xb.ncols();
        let phi = DMatrix::from_fn(np, nb * (1 + n), |p, col| {
            let (block, b) = (col / nb, col % nb);
            if block == 0 {
                xb[(p, b)]
            } else {
                xb[(p, b)] * dw[p * n + block - 1]
            }
        });
        let ch = phi.tr_mul(&phi).cholesky()?;
        Some((ch.solve(&phi.tr_mul(&tmat)), phi))
    };
    let (coef, phi) = match solve(&xb) {
        Some(s) => s,
        None => {
            fallback = true;
            xb = ones();
            solve(&xb).unwrap_or_else(|| {
                // ΔW degenerate as well: only the sample mean survives
                let mut c = DMatrix::zeros(1 + n, d);
                c.row_mut(0).copy_from(&tmat.row_mean());
                (c, DMatrix::from_fn(np, 1 + n, |_, col| if col == 0 { 1.0 } else { 0.0 }))
            })
        }
    };
    let nb = xb.ncols();
    let yfit = &xb * coef.rows(0, nb);
    let resid = &tmat - &phi * &coef;
    let mut y = Vec::with_capacity(np * d);
    let mut z = vec![0.0; np * d * n];
    for p in 0..np {
        y.extend(yfit.row(p).iter());
    }
    for c in 0..n {
        let zc = &xb * coef.rows(nb * (1 + c), nb);
        for p in 0..np {
            for r in 0..d {
                z[p * d * n + r + c * d] = zc[(p, r)];
            }
        }
    }
    let mut ss = (0.0, 0.0);
    for r in 0..d {
        let avg = tmat.column(r).mean();
        ss.0 += resid.column(r).norm_squared();
        ss.1 += tmat.column(r).iter().map(|t| (t - avg).powi(2)).sum::<f64>();
    }
    Fit { y, z, ss, fallback }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegressionStats {
    /// `(time, label)` cells that fell back to the sample mean
    pub fallbacks: usize,
    /// smallest `R²` of the joint `(Y, Z)` regression
    pub min_r_squared: f64,
}

/// `dX = ℐ^b dt + ℐ^σ dW`, `dY = −ℐ^f dt + Z dW`, `X₀ = ξ`, `Y_T = ℐ^g`,
/// on given noise. `α` is left at zero.
pub fn solve_decoupled_with_noise(
    times: &TimeGrid,
    xi: &PathArray,
    inputs: &InputBundle,
    dw: &PathArray,
    degree: usize,
) -> Result<(FbsdeState, RegressionStats)> {
    inputs.check(times, xi, dw)?;
    let (nl, np, d, n) = (xi.n_labels(), xi.n_particles(), xi.width(), dw.width());
    let dt = times.dt();
    let s = times.n_steps();
    let mut st = FbsdeState::zeros(*times, nl, np, d, n, 0);
    st.x.time_slice_mut(0).copy_from_slice(xi.time_slice(0));
    for k in 0..s {
        let (b, sig, w) = (inputs.b.time_slice(k), inputs.sigma.time_slice(k), dw.time_slice(k));
        let (cur, next) = st.x.step_pair(k);
        next.par_chunks_mut(d).enumerate().for_each(|(c, o)| {
            for r in 0..d {
                let mut v = cur[c * d + r] + b[c * d + r] * dt;
                for col in 0..n {
                    v += sig[c * d * n + r + col * d] * w[c * n + col];
                }
                o[r] = v;
            }
        });
    }
    if !st.x.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::BlowUp {
            stage: "decoupled forward equation",
            time: times.horizon(),
        });
    }

    st.y.time_slice_mut(s).copy_from_slice(inputs.g.time_slice(0));
    let basis = monomials(d, degree);
    let mut stats = RegressionStats {
        fallbacks: 0,
        min_r_squared: 1.0,
    };
    for k in (0..s).rev() {
        let fits: Vec<Fit> = (0..nl)
            .into_par_iter()
            .map(|i| {
                let mut ty = Vec::with_capacity(np * d);
                for p in 0..np {
                    let f = inputs.f.at(k, i, p);
                    ty.extend(st.y.at(k + 1, i, p).iter().zip(f).map(|(y, f)| y + f * dt));
                }
                regress_step(st.x.label_slice(k, i), dw.label_slice(k, i), &ty, d, n, &basis)
            })
            .collect();
        for (i, fit) in fits.into_iter().enumerate() {
            if fit.fallback {
                stats.fallbacks += 1;
            }
            if fit.ss.1 > 1e-24 * np as f64 {
                stats.min_r_squared = stats.min_r_squared.min(1.0 - fit.ss.0 / fit.ss.1);
            }
            st.y.label_slice_mut(k, i).copy_from_slice(&fit.y);
            st.z.label_slice_mut(k, i).copy_from_slice(&fit.z);
        }
    }
    // Z is only defined on [0, T); repeat the last value
    let last = st.z.time_slice(s - 1).to_vec();
    st.z.time_slice_mut(s).copy_from_slice(&last);
    if !st.is_finite() {
        return Err(Error::BlowUp {
            stage: "decoupled backward equation",
            time: 0.0,
        });
    }
    Ok((st, stats))
}

/// [`solve_decoupled_with_noise`] with Brownian increments drawn from `seed`.
pub fn solve_decoupled(
    times: &TimeGrid,
    xi: &PathArray,
    inputs: &InputBundle,
    n_noise: usize,
    degree: usize,
    seed: u64,
) -> Result<(FbsdeState, RegressionStats)> {
    let dw = noise::brownian_increments(seed, times, xi.n_labels(), xi.n_particles(), n_noise);
    solve_decoupled_with_noise(times, xi, inputs, &dw, degree)
}

/// Samples and noise shared by all continuation steps.
#[derive(Debug, Clone)]
pub struct FbsdeNoise {
    pub times: TimeGrid,
    /// `[1][label][particle][d]`
    pub xi: PathArray,
    /// `[S][label][particle][n]`
    pub dw: PathArray,
}

impl FbsdeNoise {
    /// Same initial draws and increments as a particle simulation with `seed`.
    pub fn sample(model: &GenericModel, init: &InitialCondition, times: TimeGrid, n_particles: usize, seed: u64) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        let (nl, d) = (model.n_labels(), model.dims.d);
        init.validate(nl, d)?;
        let mut xi = PathArray::zeros(1, nl, n_particles, d);
        init.sample_into(seed, n_particles, xi.time_slice_mut(0));
        let dw = noise::brownian_increments(seed, &times, nl, n_particles, model.dims.n);
        Ok(Self { times, xi, dw })
    }

    /// Restriction to one label.
    pub fn label(&self, i: usize) -> Self {
        let cut = |a: &PathArray| {
            let mut out = PathArray::zeros(a.n_times(), 1, a.n_particles(), a.width());
            for k in 0..a.n_times() {
                out.label_slice_mut(k, 0).copy_from_slice(a.label_slice(k, i));
            }
            out
        };
        Self {
            times: self.times,
            xi: cut(&self.xi),
            dw: cut(&self.dw),
        }
    }
}

const ARGMIN_TOL: f64 = 1e-10;

/// `α = â(X, μ, Y, Z)` at every time and particle, with `μ` the empirical
/// label means of `X`.
fn update_actions(model: &GenericModel, st: &mut FbsdeState) -> Result<()> {
    let dims = model.dims;
    let (d, m, dn) = (dims.d, dims.m, dims.d * dims.n);
    let np = st.n_particles();
    for k in 0..st.times.n_times() {
        let fr = model.frame(&st.x.label_means(k))?;
        let (x, y, z) = (st.x.time_slice(k), st.y.time_slice(k), st.z.time_slice(k));
        st.alpha
            .time_slice_mut(k)
            .par_chunks_mut(m)
            .enumerate()
            .map(|(c, out)| {
                let i = c / np;
                argmin_action(
                    model,
                    &fr,
                    i,
                    &x[c * d..(c + 1) * d],
                    &y[c * d..(c + 1) * d],
                    &z[c * dn..(c + 1) * dn],
                    ARGMIN_TOL,
                    out,
                )
            })
            .collect::<Result<Vec<()>>>()?;
    }
    Ok(())
}

/// `Σ_j w_j b₁(u_j,u_i)ᵀ ȳ_j + Σ_j w_j σ₁(u_j,u_i)ᵀ z̄_j` for every `i`.
fn adjoint_coupling(model: &GenericModel, ybar: &[DVector<f64>], zbar: &[DVector<f64>]) -> Vec<Vec<f64>> {
    let w = model.grid.weights();
    let n = model.n_labels();
    (0..n)
        .map(|i| {
            let mut out = vec![0.0; model.dims.d];
            for j in 0..n {
                let yj: Vec<f64> = ybar[j].iter().map(|v| v * w[j]).collect();
                let zj: Vec<f64> = zbar[j].iter().map(|v| v * w[j]).collect();
                mat_t_vec_acc(model.b1.get(j, i), &yj, &mut out);
                mat_t_vec_acc(model.s1.get(j, i), &zj, &mut out);
            }
            out
        })
        .collect()
}

/// Inputs of the decoupled system equivalent to one Picard sweep of `ℰ(γ, ξ, ℐ)` at `θ`.
fn effective_inputs(model: &GenericModel, gamma: f64, inputs: &InputBundle, th: &FbsdeState) -> Result<InputBundle> {
    let dims = model.dims;
    let (d, m, dn) = (dims.d, dims.m, dims.d * dims.n);
    let (nl, np) = (th.n_labels(), th.n_particles());
    let s = th.times.n_steps();
    let mut out = inputs.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for k in 0..=s {
        let means = th.x.label_means(k);
        let fr = model.frame(&means)?;
        let (xs, ys, zs, acts) = (
            th.x.time_slice(k),
            th.y.time_slice(k),
            th.z.time_slice(k),
            th.alpha.time_slice(k),
        );
        let coupling = adjoint_coupling(model, &th.y.label_means(k), &th.z.label_means(k));
        let flat: Vec<Vec<f64>> = if k < s {
            model.cost.coupled_running_flat_grads(&model.grid, &fr.cost, xs, acts, np, d)
        } else {
            (0..nl)
                .map(|i| {
                    let mut v = vec![0.0; d];
                    model.cost.coupled_terminal_flat_grad(&model.grid, i, &fr.cost, xs, np, &mut v);
                    v
                })
                .collect()
        };

        let bk = out.b.time_slice_mut(k);
        bk.par_chunks_mut(np * d).enumerate().for_each(|(i, bi)| {
            let mut tmp = vec![0.0; d];
            for p in 0..np {
                let c = i * np + p;
                model.drift_into(i, &xs[c * d..(c + 1) * d], &fr, &acts[c * m..(c + 1) * m], &mut tmp);
                bi[p * d..(p + 1) * d].iter_mut().zip(&tmp).for_each(|(o, v)| *o += gamma * v);
            }
        });
        let sk = out.sigma.time_slice_mut(k);
        sk.par_chunks_mut(np * dn).enumerate().for_each(|(i, si)| {
            let mut tmp = vec![0.0; dn];
            for p in 0..np {
                let c = i * np + p;
                model.vol_into(i, &xs[c * d..(c + 1) * d], &fr, &acts[c * m..(c + 1) * m], &mut tmp);
                si[p * dn..(p + 1) * dn].iter_mut().zip(&tmp).for_each(|(o, v)| *o += gamma * v);
            }
        });
        if k < s {
            let fk = out.f.time_slice_mut(k);
            fk.par_chunks_mut(np * d).enumerate().for_each(|(i, fi)| {
                let mut tmp = vec![0.0; d];
                for p in 0..np {
                    let c = i * np + p;
                    grad_x_with_frame(
                        model,
                        &fr,
                        i,
                        &xs[c * d..(c + 1) * d],
                        &ys[c * d..(c + 1) * d],
                        &zs[c * dn..(c + 1) * dn],
                        &acts[c * m..(c + 1) * m],
                        &mut tmp,
                    );
                    for r in 0..d {
                        fi[p * d + r] += gamma * (tmp[r] + coupling[i][r] + flat[i][r]);
                    }
                }
            });
        } else {
            let gk = out.g.time_slice_mut(0);
            gk.par_chunks_mut(np * d).enumerate().for_each(|(i, gi)| {
                let mut tmp = vec![0.0; d];
                for p in 0..np {
                    let c = i * np + p;
                    model.cost.terminal_grad_x(i, &xs[c * d..(c + 1) * d], &fr.cost, &mut tmp);
                    for r in 0..d {
                        gi[p * d + r] += gamma * (tmp[r] + flat[i][r]);
                    }
                }
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub gamma: f64,
    /// `snorm_diff` of successive iterates
    pub deltas: Vec<f64>,
    pub regression: RegressionStats,
}

/// Picard iteration for `ℰ(γ, ξ, ℐ)` from `init`.
pub fn solve_continuation_step(
    model: &GenericModel,
    gamma: f64,
    noise: &FbsdeNoise,
    inputs: &InputBundle,
    init: &FbsdeState,
    schedule: &ContinuationSchedule,
) -> Result<(FbsdeState, StepRecord)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("continuation parameter must lie in [0, 1], got {gamma}")));
    }
    schedule.validate()?;
    let mut cur = init.clone();
    let mut deltas = Vec::new();
    loop {
        let eff = effective_inputs(model, gamma, inputs, &cur)?;
        let (mut next, regression) = solve_decoupled_with_noise(&noise.times, &noise.xi, &eff, &noise.dw, schedule.degree)?;
        next.alpha = PathArray::zeros(next.times.n_times(), next.n_labels(), next.n_particles(), model.dims.m);
        if next.alpha.same_shape(&cur.alpha) {
            next.alpha.as_mut_slice().copy_from_slice(cur.alpha.as_slice());
        }
        update_actions(model, &mut next)?;
        if !next.is_finite() {
            return Err(Error::BlowUp {
                stage: "continuation step",
                time: 0.0,
            });
        }
        let delta = if next.same_layout(&cur) {
            snorm_diff(&model.grid, &next, &cur)?
        } else {
            f64::INFINITY
        };
        deltas.push(delta);
        // with γ = 0 the sweep ignores its argument
        if gamma == 0.0 || delta <= schedule.tol {
            return Ok((next, StepRecord { gamma, deltas, regression }));
        }
        if deltas.len() >= schedule.max_iter || !delta.is_finite() {
            return Err(Error::NonConvergence {
                stage: "continuation Picard iteration",
                iterations: deltas.len(),
                last_delta: delta,
            });
        }
        cur = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbsdeHistory {
    /// step sizes used, one entry per restart
    pub etas: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

const MAX_HALVINGS: usize = 3;

/// March `γ = η, 2η, …, 1` with zero inputs, halving `η` on non-convergence.
pub fn solve_full(
    model: &GenericModel,
    noise: &FbsdeNoise,
    schedule: &ContinuationSchedule,
) -> Result<(FbsdeState, FbsdeHistory)> {
    model.check_shapes()?;
    schedule.validate()?;
    let (nl, np) = (noise.xi.n_labels(), noise.xi.n_particles());
    if nl != model.n_labels() || noise.xi.width() != model.dims.d || noise.dw.width() != model.dims.n {
        return Err(Error::shape("noise does not match the model"));
    }
    if (noise.times.horizon() - model.horizon).abs() > 1e-12 * model.horizon {
        return Err(Error::invalid("noise grid and model have different horizons"));
    }
    let inputs = InputBundle::zeros(&noise.times, nl, np, model.dims.d, model.dims.n);
    let blank = FbsdeState::zeros(noise.times, nl, np, model.dims.d, model.dims.n, model.dims.m);
    let (mut state, rec0) = solve_continuation_step(model, 0.0, noise, &inputs, &blank, schedule)?;
    let mut history = FbsdeHistory {
        etas: vec![schedule.eta],
        steps: vec![rec0],
    };
    let mut gamma = 0.0;
    let mut sched = *schedule;
    let mut halvings = 0;
    while gamma < 1.0 {
        let next_gamma = (gamma + sched.eta).min(1.0);
        match solve_continuation_step(model, next_gamma, noise, &inputs, &state, &sched) {
            Ok((s, rec)) => {
                state = s;
                gamma = next_gamma;
                history.steps.push(rec);
            }
            Err(e @ Error::NonConvergence { .. }) => {
                if halvings == MAX_HALVINGS {
                    return Err(e);
                }
                halvings += 1;
                sched.eta /= 2.0;
                history.etas.push(sched.eta);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((state, history))
}

/// `‖Y − Y_ansatz(X)‖ / ‖Y_ansatz(X)‖` over all times, labels and particles,
/// with the ansatz evaluated along the solution's own `X` and the mean path `means`.
pub fn ansatz_rms_relative_error(sol: &RiccatiSolution, st: &FbsdeState, means: &MeanPath) -> Result<f64> {
    if !means.times.same_as(&st.times) || means.n_labels() != st.n_labels() {
        return Err(Error::shape("mean path does not match the solution grid"));
    }
    let d = st.x.width();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..st.times.n_times() {
        let t = st.times.time(k);
        for i in 0..st.n_labels() {
            for p in 0..st.n_particles() {
                let x = DVector::from_column_slice(st.x.at(k, i, p));
                let ya = ansatz_y(sol, t, i, &x, means.at(k))?;
                for r in 0..d {
                    num += (st.y.at(k, i, p)[r] - ya[r]).powi(2);
                    den += ya[r] * ya[r];
                }
            }
        }
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}
