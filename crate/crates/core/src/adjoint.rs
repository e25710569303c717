//! Adjoint processes from the Riccati ansatz and the discrete residual of the
//! adjoint backward equation along simulated paths.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{MeanPath, PathArray, TimeGrid};
use crate::riccati::RiccatiSolution;
use crate::simulate::EnsemblePath;

/// `Y` per particle and the deterministic `Z` per label.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub times: TimeGrid,
    /// `[time][label][particle][d]`
    pub y: PathArray,
    /// `[time][label]`, `d × n`
    pub z: Vec<Vec<DMatrix<f64>>>,
}

impl AdjointPath {
    /// `Z` repeated for every particle, column-major, `[time][label][particle][d·n]`.
    pub fn z_particles(&self, n_particles: usize) -> PathArray {
        let nl = self.z.first().map_or(0, |z| z.len());
        let w = self.z.first().and_then(|z| z.first()).map_or(0, |z| z.len());
        let mut out = PathArray::zeros(self.z.len(), nl, n_particles, w);
        for (k, zk) in self.z.iter().enumerate() {
            for (i, zi) in zk.iter().enumerate() {
                for p in 0..n_particles {
                    out.at_mut(k, i, p).copy_from_slice(zi.as_slice());
                }
            }
        }
        out
    }
}

/// `Y = 2(Kx + ∫K̄(u,v)m^v dv + Λ)` at label `i`.
pub fn ansatz_y(sol: &RiccatiSolution, t: f64, i: usize, x: &DVector<f64>, means: &[DVector<f64>]) -> Result<DVector<f64>> {
    let off = offsets(sol, t, means)?;
    Ok((sol.k_at(t, i)? * x + &off[i]) * 2.0)
}

/// `Z = 2Kγ` at label `i`.
pub fn ansatz_z(sol: &RiccatiSolution, t: f64, i: usize) -> Result<DMatrix<f64>> {
    Ok(sol.k_at(t, i)? * &sol.model.gamma[i] * 2.0)
}

/// `∫K̄(u_i,v)m^v dv + Λ_i` for every label.
fn offsets(sol: &RiccatiSolution, t: f64, means: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let kb = sol.kbar_apply(t, means)?;
    kb.into_iter()
        .enumerate()
        .map(|(i, v)| Ok(v + sol.lambda_at(t, i)?))
        .collect()
}

fn check_grids(sol: &RiccatiSolution, ens: &EnsemblePath, means: &MeanPath) -> Result<()> {
    if !ens.times.same_as(&means.times) {
        return Err(Error::invalid("ensemble and mean path use different time grids"));
    }
    if (sol.times.horizon() - ens.times.horizon()).abs() > 1e-12 * ens.times.horizon() {
        return Err(Error::invalid("solution and ensemble have different horizons"));
    }
    let d = sol.model.dims().d;
    if ens.n_labels() != sol.n_labels() || ens.x.width() != d || means.n_labels() != sol.n_labels() {
        return Err(Error::invalid("ensemble does not match the model"));
    }
    Ok(())
}

/// Evaluate the ansatz along every particle path.
pub fn adjoint_path(sol: &RiccatiSolution, ens: &EnsemblePath, means: &MeanPath) -> Result<AdjointPath> {
    check_grids(sol, ens, means)?;
    let times = ens.times;
    let (nl, np, d) = (ens.n_labels(), ens.n_particles(), ens.x.width());
    let mut y = PathArray::zeros(times.n_times(), nl, np, d);
    let mut z = Vec::with_capacity(times.n_times());
    for k in 0..times.n_times() {
        let t = times.time(k);
        let off = offsets(sol, t, &means.m[k])?;
        let ks: Vec<DMatrix<f64>> = (0..nl).map(|i| sol.k_at(t, i)).collect::<Result<_>>()?;
        let xs = ens.x.time_slice(k);
        y.time_slice_mut(k)
            .par_chunks_mut(np * d)
            .zip(xs.par_chunks(np * d))
            .enumerate()
            .for_each(|(i, (yi, xi))| {
                for (yp, xp) in yi.chunks_exact_mut(d).zip(xi.chunks_exact(d)) {
                    for r in 0..d {
                        let mut acc = off[i][r];
                        for c in 0..d {
                            acc += ks[i][(r, c)] * xp[c];
                        }
                        yp[r] = 2.0 * acc;
                    }
                }
            });
        z.push((0..nl).map(|i| &ks[i] * &sol.model.gamma[i] * 2.0).collect());
    }
    Ok(AdjointPath { times, y, z })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub rms_residual: f64,
    pub terminal_mismatch: f64,
    pub n_steps: usize,
    pub n_particles: usize,
}

/// Discrete defect of the adjoint equation
/// `dY = −[C_Y Y + 2C_X X + 2∫Φ_X m dv + ∫Φ_Y E[Y^v] dv]dt + Z dW`
/// with `Y`, `Z` from the ansatz.
///
/// The one-step defects `ρ_j = Y_{j+1} − Y_j + driver_j Δt − Z_j ΔW_j` are
/// accumulated, `R_k = Σ_{j<k} ρ_j`, and the statistics are taken over
/// `R_k` for all steps, labels and particles. Each `ρ_j` is a local error of
/// size `O(Δt^{3/2})`, so `R` measures the global defect, which is first
/// order. `E[Y^v]` is the ansatz at the deterministic mean.
pub fn bsde_residual(sol: &RiccatiSolution, ens: &EnsemblePath, means: &MeanPath) -> Result<ResidualReport> {
    check_grids(sol, ens, means)?;
    let model = &sol.model;
    let coeffs = &sol.coeffs;
    let grid = &model.grid;
    let times = ens.times;
    let dt = times.dt();
    let (nl, np, d) = (ens.n_labels(), ens.n_particles(), ens.x.width());
    let nw = model.dims().n;
    let adj = adjoint_path(sol, ens, means)?;

    let mut acc = vec![0.0; nl * np * d];
    let mut max_r: f64 = 0.0;
    let mut sum_sq = 0.0;
    for k in 0..times.n_steps() {
        let t = times.time(k);
        let m = &means.m[k];
        let off = offsets(sol, t, m)?;
        let ey: Vec<DVector<f64>> = (0..nl)
            .map(|i| Ok((sol.k_at(t, i)? * &m[i] + &off[i]) * 2.0))
            .collect::<Result<_>>()?;
        let px = grid.kernel_apply(&coeffs.phi_x, m)?;
        let py = grid.kernel_apply(&coeffs.phi_y, &ey)?;
        let konst: Vec<DVector<f64>> = (0..nl).map(|i| &px[i] * 2.0 + &py[i]).collect();
        let (x0, y0, y1) = (ens.x.time_slice(k), adj.y.time_slice(k), adj.y.time_slice(k + 1));
        let dw = ens.dw.time_slice(k);
        let zk = &adj.z[k];
        let (mx, sq) = acc
            .par_chunks_mut(np * d)
            .enumerate()
            .map(|(i, ai)| {
                let (cy, cx, zi) = (&coeffs.c_y[i], &coeffs.c_x[i], &zk[i]);
                let mut mx: f64 = 0.0;
                let mut sq = 0.0;
                for p in 0..np {
                    let c = i * np + p;
                    let (xp, yp, yn) = (&x0[c * d..(c + 1) * d], &y0[c * d..(c + 1) * d], &y1[c * d..(c + 1) * d]);
                    let wp = &dw[c * nw..(c + 1) * nw];
                    let mut norm = 0.0;
                    for r in 0..d {
                        let mut drv = konst[i][r];
                        for s in 0..d {
                            drv += cy[(r, s)] * yp[s] + 2.0 * cx[(r, s)] * xp[s];
                        }
                        let mut mart = 0.0;
                        for (col, w) in wp.iter().enumerate() {
                            mart += zi[(r, col)] * w;
                        }
                        let a = &mut ai[p * d + r];
                        *a += yn[r] - yp[r] + drv * dt - mart;
                        norm += *a * *a;
                    }
                    mx = mx.max(norm.sqrt());
                    sq += norm;
                }
                (mx, sq)
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1 + b.1));
        max_r = max_r.max(mx);
        sum_sq += sq;
    }
    let count = (times.n_steps() * nl * np) as f64;

    let s = times.n_steps();
    let gp = grid.kernel_apply(&coeffs.g_p, &means.m[s])?;
    let mut term: f64 = 0.0;
    for i in 0..nl {
        for p in 0..np {
            let x = DVector::from_column_slice(ens.x.at(s, i, p));
            let target = (&model.p[i] * x + &gp[i]) * 2.0;
            let y = DVector::from_column_slice(adj.y.at(s, i, p));
            term = term.max((y - target).amax());
        }
    }
    Ok(ResidualReport {
        max_residual: max_r,
        rms_residual: (sum_sq / count).sqrt(),
        terminal_mismatch: term,
        n_steps: s,
        n_particles: np,
    })
}
