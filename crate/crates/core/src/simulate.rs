//! Mean ODE, Euler–Maruyama particle ensembles, and the variation process.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::mat_vec_acc;
use crate::model::{lq_as_generic, GenericModel, InitialCondition};
use crate::noise;
use crate::paths::{MeanPath, PathArray, TimeGrid};
use crate::riccati::{FeedbackGains, RiccatiSolution};

/// Particle trajectories with the noise and controls that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    pub times: TimeGrid,
    /// `[S+1][label][particle][d]`
    pub x: PathArray,
    /// `[S][label][particle][n]`, each entry `N(0, Δt)`
    pub dw: PathArray,
    /// `[S][label][particle][m]`, the action used on `[t_k, t_{k+1})`
    pub alpha: PathArray,
    pub seed: u64,
}

impl EnsemblePath {
    pub fn n_particles(&self) -> usize {
        self.x.n_particles()
    }
    pub fn n_labels(&self) -> usize {
        self.x.n_labels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationPath {
    pub times: TimeGrid,
    pub v: PathArray,
}

/// Batch control rule evaluated once per time step.
pub trait ControlPolicy: Sync {
    /// Fill `out` (`[label][particle][m]`) with the actions at step `k`,
    /// given the states `x` (`[label][particle][d]`) and the mean field.
    fn act(&self, k: usize, x: &[f64], means: &[DVector<f64>], out: &mut [f64]) -> Result<()>;
}

/// Riccati feedback with gains sampled on a simulation grid.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    gains: Vec<FeedbackGains>,
    weights: Vec<f64>,
    d: usize,
    m: usize,
}

impl FeedbackPolicy {
    pub fn new(sol: &RiccatiSolution, times: &TimeGrid) -> Result<Self> {
        check_horizon(sol, times)?;
        let dims = sol.model.dims();
        Ok(Self {
            gains: (0..times.n_steps())
                .map(|k| sol.gains(times.time(k)))
                .collect::<Result<_>>()?,
            weights: sol.model.grid.weights().to_vec(),
            d: dims.d,
            m: dims.m,
        })
    }

    pub fn gains(&self, k: usize) -> &FeedbackGains {
        &self.gains[k]
    }
}

impl ControlPolicy for FeedbackPolicy {
    fn act(&self, k: usize, x: &[f64], means: &[DVector<f64>], out: &mut [f64]) -> Result<()> {
        let g = &self.gains[k];
        let off = g.offsets(&self.weights, means);
        let (d, m) = (self.d, self.m);
        let np = x.len() / (d * off.len());
        out.par_chunks_mut(np * m)
            .zip(x.par_chunks(np * d))
            .enumerate()
            .for_each(|(i, (oi, xi))| {
                for (o, xp) in oi.chunks_exact_mut(m).zip(xi.chunks_exact(d)) {
                    o.copy_from_slice(off[i].as_slice());
                    mat_vec_acc(&g.l[i], xp, o);
                }
            });
        Ok(())
    }
}

/// A fixed action process, ignoring the state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPolicy(pub PathArray);

impl ControlPolicy for ProcessPolicy {
    fn act(&self, k: usize, _x: &[f64], _means: &[DVector<f64>], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(self.0.time_slice(k));
        Ok(())
    }
}

/// Per-particle rule `f(k, label, particle, x, means, out)`.
pub struct FnPolicy<F>(pub F);

impl<F> ControlPolicy for FnPolicy<F>
where
    F: Fn(usize, usize, usize, &[f64], &[DVector<f64>], &mut [f64]) + Sync,
{
    fn act(&self, k: usize, x: &[f64], means: &[DVector<f64>], out: &mut [f64]) -> Result<()> {
        let n = means.len();
        let d = means.first().map_or(0, |v| v.len());
        let np = x.len() / (d * n).max(1);
        let m = out.len() / (n * np).max(1);
        out.par_chunks_mut(np * m)
            .zip(x.par_chunks(np * d))
            .enumerate()
            .for_each(|(i, (oi, xi))| {
                for (p, (o, xp)) in oi.chunks_exact_mut(m).zip(xi.chunks_exact(d)).enumerate() {
                    (self.0)(k, i, p, xp, means, o);
                }
            });
        Ok(())
    }
}

fn check_horizon(sol: &RiccatiSolution, times: &TimeGrid) -> Result<()> {
    if (sol.times.horizon() - times.horizon()).abs() > 1e-12 * times.horizon() {
        return Err(Error::invalid(format!(
            "solution horizon {} differs from simulation horizon {}",
            sol.times.horizon(),
            times.horizon()
        )));
    }
    Ok(())
}

/// RK4 for the closed-loop mean ODE
/// `ṁ = β + Am + Bᾱ + ∫G_A(u,v)m^v dv` with `ᾱ` the feedback at the mean.
pub fn propagate_means(sol: &RiccatiSolution, times: &TimeGrid, m0: &[DVector<f64>]) -> Result<MeanPath> {
    check_horizon(sol, times)?;
    let model = &sol.model;
    let n = model.n_labels();
    let d = model.dims().d;
    if m0.len() != n || m0.iter().any(|v| v.len() != d) {
        return Err(Error::shape("initial means do not match the model"));
    }
    let w = model.grid.weights();
    let rhs = |t: f64, m: &[DVector<f64>]| -> Result<Vec<DVector<f64>>> {
        let g = sol.gains(t)?;
        let off = g.offsets(w, m);
        let ga = model.grid.kernel_apply(&model.g_a, m)?;
        Ok((0..n)
            .map(|i| {
                let act = &g.l[i] * &m[i] + &off[i];
                &model.beta[i] + &model.a[i] * &m[i] + &model.b[i] * act + &ga[i]
            })
            .collect())
    };
    let axpy = |m: &[DVector<f64>], s: f64, k: &[DVector<f64>]| -> Vec<DVector<f64>> {
        m.iter().zip(k).map(|(a, b)| a + b * s).collect()
    };
    let h = times.dt();
    let mut path = Vec::with_capacity(times.n_times());
    path.push(m0.to_vec());
    for k in 0..times.n_steps() {
        let (t0, t1) = (times.time(k), times.time(k + 1));
        let tm = 0.5 * (t0 + t1);
        let m = &path[k];
        let k1 = rhs(t0, m)?;
        let k2 = rhs(tm, &axpy(m, h / 2.0, &k1))?;
        let k3 = rhs(tm, &axpy(m, h / 2.0, &k2))?;
        let k4 = rhs(t1, &axpy(m, h, &k3))?;
        let next: Vec<DVector<f64>> = (0..n)
            .map(|i| &m[i] + (&k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i]) * (h / 6.0))
            .collect();
        if next.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::BlowUp {
                stage: "mean ODE",
                time: t1,
            });
        }
        path.push(next);
    }
    Ok(MeanPath { times: *times, m: path })
}

/// How the mean field fed to the coefficients is obtained at each step.
enum MeanSource<'a> {
    Fixed(&'a MeanPath),
    /// `m_k + empirical mean of (X_k − base_k)`
    Shifted { means: &'a MeanPath, base: &'a PathArray },
}

impl MeanSource<'_> {
    fn at(&self, k: usize, x: &PathArray) -> Vec<DVector<f64>> {
        match self {
            MeanSource::Fixed(mp) => mp.m[k].clone(),
            MeanSource::Shifted { means, base } => {
                let cur = x.label_means(k);
                let b = base.label_means(k);
                means.m[k]
                    .iter()
                    .zip(cur.iter().zip(&b))
                    .map(|(m, (c, b))| m + c - b)
                    .collect()
            }
        }
    }
}

/// `X_{k+1} = X_k + b Δt + σ ΔW` for every particle.
fn run_euler(
    model: &GenericModel,
    times: &TimeGrid,
    mut x: PathArray,
    dw: &PathArray,
    policy: &dyn ControlPolicy,
    source: MeanSource<'_>,
) -> Result<(PathArray, PathArray)> {
    let dims = model.dims;
    let (d, m, nw) = (dims.d, dims.m, dims.n);
    let (nl, np) = (x.n_labels(), x.n_particles());
    let dt = times.dt();
    let mut alpha = PathArray::zeros(times.n_steps(), nl, np, m);
    for k in 0..times.n_steps() {
        let means = source.at(k, &x);
        let fr = model.frame(&means)?;
        policy.act(k, x.time_slice(k), &means, alpha.time_slice_mut(k))?;
        let a_k = alpha.time_slice(k);
        let dw_k = dw.time_slice(k);
        let (cur, next) = x.step_pair(k);
        next.par_chunks_mut(np * d)
            .enumerate()
            .for_each(|(i, out)| {
                let mut b = vec![0.0; d];
                let mut s = vec![0.0; d * nw];
                for p in 0..np {
                    let c = i * np + p;
                    let xp = &cur[c * d..(c + 1) * d];
                    let ap = &a_k[c * m..(c + 1) * m];
                    let wp = &dw_k[c * nw..(c + 1) * nw];
                    model.drift_into(i, xp, &fr, ap, &mut b);
                    model.vol_into(i, xp, &fr, ap, &mut s);
                    let o = &mut out[p * d..(p + 1) * d];
                    for r in 0..d {
                        let mut noise = 0.0;
                        for (col, wc) in wp.iter().enumerate() {
                            noise += s[r + col * d] * wc;
                        }
                        o[r] = xp[r] + b[r] * dt + noise;
                    }
                }
            });
        if !x.is_finite_at(k + 1) {
            return Err(Error::BlowUp {
                stage: "particle simulation",
                time: times.time(k + 1),
            });
        }
    }
    Ok((x, alpha))
}

fn initial_states(init: &InitialCondition, model: &GenericModel, times: &TimeGrid, n_particles: usize, seed: u64) -> Result<PathArray> {
    if n_particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    init.validate(model.n_labels(), model.dims.d)?;
    let mut x = PathArray::zeros(times.n_times(), model.n_labels(), n_particles, model.dims.d);
    init.sample_into(seed, n_particles, x.time_slice_mut(0));
    Ok(x)
}

/// Closed loop under the Riccati feedback, with mean-field terms taken from
/// the deterministic mean path.
pub fn simulate_closed_loop(
    sol: &RiccatiSolution,
    means: &MeanPath,
    init: &InitialCondition,
    n_particles: usize,
    seed: u64,
) -> Result<EnsemblePath> {
    let times = means.times;
    let model = lq_as_generic(&sol.model)?;
    let policy = FeedbackPolicy::new(sol, &times)?;
    let x = initial_states(init, &model, &times, n_particles, seed)?;
    let dw = noise::brownian_increments(seed, &times, model.n_labels(), n_particles, model.dims.n);
    let (x, alpha) = run_euler(&model, &times, x, &dw, &policy, MeanSource::Fixed(means))?;
    Ok(EnsemblePath { times, x, dw, alpha, seed })
}

/// Replay a base ensemble's noise and initial states under another action
/// process. The mean field is the base mean path shifted by the empirical
/// mean displacement from the base paths, so that the state is affine in
/// the action process exactly as for the continuum model. Returns the new
/// ensemble and the mean path fed to its coefficients.
pub fn simulate_with_actions(
    model: &GenericModel,
    base: &EnsemblePath,
    base_means: &MeanPath,
    actions: &PathArray,
) -> Result<(EnsemblePath, MeanPath)> {
    if !actions.same_shape(&base.alpha) {
        return Err(Error::invalid("action process does not match the base ensemble"));
    }
    if !base_means.times.same_as(&base.times) {
        return Err(Error::invalid("mean path and ensemble use different time grids"));
    }
    let mut x = PathArray::zeros(base.x.n_times(), base.n_labels(), base.n_particles(), model.dims.d);
    x.time_slice_mut(0).copy_from_slice(base.x.time_slice(0));
    let policy = ProcessPolicy(actions.clone());
    let source = MeanSource::Shifted {
        means: base_means,
        base: &base.x,
    };
    let (x, alpha) = run_euler(model, &base.times, x, &base.dw, &policy, source)?;
    let used = MeanPath {
        times: base.times,
        m: (0..base.times.n_times())
            .map(|k| {
                MeanSource::Shifted {
                    means: base_means,
                    base: &base.x,
                }
                .at(k, &x)
            })
            .collect(),
    };
    Ok((
        EnsemblePath {
            times: base.times,
            x,
            dw: base.dw.clone(),
            alpha,
            seed: base.seed,
        },
        used,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenLoopConfig {
    pub n_picard: usize,
    /// Stop early once the mean-path change drops below this; error if never reached.
    pub tol: Option<f64>,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self { n_picard: 5, tol: None }
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopResult {
    pub ensemble: EnsemblePath,
    /// Mean path fed to the coefficients in the final sweep.
    pub means: MeanPath,
    /// `max |m^{(j+1)} − m^{(j)}|` per sweep.
    pub deltas: Vec<f64>,
}

/// Fixed point on the mean path: simulate with frozen means, replace them by
/// the empirical means, repeat.
pub fn simulate_open_loop(
    model: &GenericModel,
    policy: &dyn ControlPolicy,
    init: &InitialCondition,
    times: &TimeGrid,
    n_particles: usize,
    config: OpenLoopConfig,
    seed: u64,
) -> Result<OpenLoopResult> {
    if config.n_picard == 0 {
        return Err(Error::invalid("need at least one Picard sweep"));
    }
    let x0 = initial_states(init, model, times, n_particles, seed)?;
    let dw = noise::brownian_increments(seed, times, model.n_labels(), n_particles, model.dims.n);
    let m0 = x0.label_means(0);
    let mut guess = MeanPath {
        times: *times,
        m: vec![m0; times.n_times()],
    };
    let mut deltas = Vec::new();
    loop {
        let (x, alpha) = run_euler(model, times, x0.clone(), &dw, policy, MeanSource::Fixed(&guess))?;
        let emp = MeanPath::from_ensemble(*times, &x);
        let delta = emp.max_abs_diff(&guess);
        deltas.push(delta);
        let done = config.tol.is_some_and(|t| delta <= t) || deltas.len() >= config.n_picard;
        if done {
            if let Some(t) = config.tol {
                if delta > t {
                    return Err(Error::NonConvergence {
                        stage: "mean-field Picard iteration",
                        iterations: deltas.len(),
                        last_delta: delta,
                    });
                }
            }
            return Ok(OpenLoopResult {
                ensemble: EnsemblePath {
                    times: *times,
                    x,
                    dw,
                    alpha,
                    seed,
                },
                means: guess,
                deltas,
            });
        }
        guess = emp;
    }
}

/// First-order sensitivity of the state to the action process along `direction`:
/// `dV = [b₂V + ∫b₁(u,ũ)E[Ṽ^ũ]dũ + b₃δ]dt + [σ₂V + ∫σ₁E[Ṽ] + σ₃δ]dW`, `V₀ = 0`,
/// with the label means of `V` taken empirically.
pub fn simulate_variation(model: &GenericModel, base: &EnsemblePath, direction: &PathArray) -> Result<VariationPath> {
    let dims = model.dims;
    let (d, m, nw) = (dims.d, dims.m, dims.n);
    if !direction.same_shape(&base.alpha) || direction.width() != m {
        return Err(Error::invalid("direction does not match the base ensemble"));
    }
    if base.dw.n_times() != base.times.n_steps() || base.dw.width() != nw || base.x.width() != d {
        return Err(Error::invalid("base ensemble does not match the model"));
    }
    let (nl, np) = (base.n_labels(), base.n_particles());
    let dt = base.times.dt();
    let mut v = PathArray::zeros(base.times.n_times(), nl, np, d);
    for k in 0..base.times.n_steps() {
        let vbar = v.label_means(k);
        let bcoup = model.grid.kernel_apply(&model.b1, &vbar)?;
        let scoup = model.grid.kernel_apply(&model.s1, &vbar)?;
        let dir_k = direction.time_slice(k);
        let dw_k = base.dw.time_slice(k);
        let (cur, next) = v.step_pair(k);
        next.par_chunks_mut(np * d).enumerate().for_each(|(i, out)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * nw];
            for p in 0..np {
                let c = i * np + p;
                let vp = &cur[c * d..(c + 1) * d];
                let dp = &dir_k[c * m..(c + 1) * m];
                let wp = &dw_k[c * nw..(c + 1) * nw];
                b.copy_from_slice(bcoup[i].as_slice());
                mat_vec_acc(&model.b2[i], vp, &mut b);
                mat_vec_acc(&model.b3[i], dp, &mut b);
                s.copy_from_slice(scoup[i].as_slice());
                mat_vec_acc(&model.s2[i], vp, &mut s);
                mat_vec_acc(&model.s3[i], dp, &mut s);
                let o = &mut out[p * d..(p + 1) * d];
                for r in 0..d {
                    let mut noise = 0.0;
                    for (col, wc) in wp.iter().enumerate() {
                        noise += s[r + col * d] * wc;
                    }
                    o[r] = vp[r] + b[r] * dt + noise;
                }
            }
        });
        if !v.is_finite_at(k + 1) {
            return Err(Error::BlowUp {
                stage: "variation process",
                time: base.times.time(k + 1),
            });
        }
    }
    Ok(VariationPath { times: base.times, v })
}
