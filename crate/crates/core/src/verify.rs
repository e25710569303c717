//! Cost estimation and numerical checks of the maximum principle.
//!
//! Perturbed controls are realized as action processes on the base paths:
//! `α^ε = α̂(X̂) + εδ(X̂)`, replayed on the base noise. The dynamics are affine
//! in the action process, so `X^ε = X̂ + εV` and `J(α^ε)` is a quadratic in
//! `ε` for quadratic costs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::hamiltonian::{argmin_action, grad_a_with_frame, minimizer_bound};
use crate::model::{convexity_slacks, ConvexitySlacks, GenericModel};
use crate::noise::{self, Domain};
use crate::paths::{MeanPath, PathArray, TimeGrid};
use crate::simulate::{simulate_with_actions, EnsemblePath};

/// Values below this are treated as round-off when a standard error is used
/// as a tolerance.
pub const STDERR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_particles: usize,
    pub seed: u64,
}

/// Mean and standard error of the mean.
fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_paths(model: &GenericModel, times: &TimeGrid, x: &PathArray, means: &MeanPath) -> Result<()> {
    if !times.same_as(&means.times) {
        return Err(Error::invalid("paths and mean path use different time grids"));
    }
    if (model.horizon - times.horizon()).abs() > 1e-12 * model.horizon {
        return Err(Error::invalid("paths and model have different horizons"));
    }
    if x.n_times() != times.n_times() || x.n_labels() != model.n_labels() || x.width() != model.dims.d {
        return Err(Error::invalid("state paths do not match the model"));
    }
    if means.m.len() != times.n_times() || means.n_labels() != model.n_labels() {
        return Err(Error::invalid("mean path does not match the model"));
    }
    Ok(())
}

/// Cost of each particle index, `Σ_i w_i [Σ_k f Δt + g]`; label `i` particle
/// `p` paths are independent across labels, so indices are i.i.d. samples.
fn particle_costs(model: &GenericModel, ens: &EnsemblePath, means: &MeanPath) -> Result<Vec<f64>> {
    check_paths(model, &ens.times, &ens.x, means)?;
    let (nl, np, d, m) = (ens.n_labels(), ens.n_particles(), model.dims.d, model.dims.m);
    if ens.alpha.n_times() != ens.times.n_steps() || ens.alpha.width() != m {
        return Err(Error::invalid("action paths do not match the model"));
    }
    let w = model.grid.weights();
    let dt = ens.times.dt();
    let s = ens.times.n_steps();
    let mut acc = vec![0.0; np];
    for k in 0..=s {
        let summary = model.cost.summarize(&model.grid, &means.m[k]);
        let xs = ens.x.time_slice(k);
        let contrib: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut tot = 0.0;
                for i in 0..nl {
                    let c = i * np + p;
                    let x = &xs[c * d..(c + 1) * d];
                    let v = if k < s {
                        let a = &ens.alpha.time_slice(k)[c * m..(c + 1) * m];
                        model.cost.running(i, x, &summary, a) * dt
                    } else {
                        model.cost.terminal(i, x, &summary)
                    };
                    tot += w[i] * v;
                }
                tot
            })
            .collect();
        for (a, c) in acc.iter_mut().zip(contrib) {
            *a += c;
        }
    }
    Ok(acc)
}

/// `J` with a left Riemann sum in time, mean-field terms from `means`.
pub fn estimate_cost(model: &GenericModel, ens: &EnsemblePath, means: &MeanPath) -> Result<CostEstimate> {
    let (value, stderr) = mean_stderr(&particle_costs(model, ens, means)?);
    Ok(CostEstimate {
        value,
        stderr,
        n_particles: ens.n_particles(),
        seed: ens.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let (value, stderr) = mean_stderr(v);
        Self { value, stderr }
    }

    /// `|value| ≤ k·max(stderr, STDERR_FLOOR)`
    pub fn is_zero_within(&self, k: f64) -> bool {
        self.value.abs() <= k * self.stderr.max(STDERR_FLOOR)
    }
}

/// Bounded feedback-form perturbation `δ_i(x) = c_i + S_i tanh(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub constant: Vec<DVector<f64>>,
    /// `m × d`
    pub slope: Vec<DMatrix<f64>>,
}

impl Direction {
    pub fn zeros(n_labels: usize, d: usize, m: usize) -> Self {
        Self {
            constant: vec![DVector::zeros(m); n_labels],
            slope: vec![DMatrix::zeros(m, d); n_labels],
        }
    }

    /// Random direction with every component bounded by `magnitude`.
    pub fn random(n_labels: usize, d: usize, m: usize, magnitude: f64, seed: u64) -> Self {
        let mut rng = noise::stream(seed, Domain::Sampling, 0, 1);
        let mut z = vec![0.0; n_labels * m * (d + 1)];
        noise::fill_normals(&mut rng, &mut z);
        let squash = |v: f64| v.tanh();
        let mut it = z.into_iter();
        let mut constant = Vec::with_capacity(n_labels);
        let mut slope = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            constant.push(DVector::from_fn(m, |_, _| 0.5 * magnitude * squash(it.next().unwrap_or(0.0))));
            slope.push(DMatrix::from_fn(m, d, |_, _| {
                0.5 * magnitude / d as f64 * squash(it.next().unwrap_or(0.0))
            }));
        }
        Self { constant, slope }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            constant: self.constant.iter().map(|c| c * s).collect(),
            slope: self.slope.iter().map(|c| c * s).collect(),
        }
    }

    /// Evaluate along state paths at steps `0..n_steps`.
    pub fn realize(&self, x: &PathArray, n_steps: usize) -> Result<PathArray> {
        let (nl, np, d) = (x.n_labels(), x.n_particles(), x.width());
        let m = self.constant.first().map_or(0, |c| c.len());
        if self.constant.len() != nl || self.slope.iter().any(|s| s.shape() != (m, d)) || n_steps > x.n_times() {
            return Err(Error::invalid("direction does not match the paths"));
        }
        let mut out = PathArray::zeros(n_steps, nl, np, m);
        for k in 0..n_steps {
            for i in 0..nl {
                for p in 0..np {
                    let th: Vec<f64> = x.at(k, i, p).iter().map(|v| v.tanh()).collect();
                    let o = out.at_mut(k, i, p);
                    o.copy_from_slice(self.constant[i].as_slice());
                    crate::linalg::mat_vec_acc(&self.slope[i], &th, o);
                }
            }
        }
        Ok(out)
    }
}

/// `(X, Y, Z, α)` along a particle ensemble; `Z` is the column-major
/// vectorization per particle.
#[derive(Debug, Clone, Copy)]
pub struct ThetaPaths<'a> {
    pub times: TimeGrid,
    pub x: &'a PathArray,
    pub y: &'a PathArray,
    pub z: &'a PathArray,
    /// at least `S` times
    pub alpha: &'a PathArray,
}

/// `∫_I E[∫₀^T ∂_a H·δ dt] du` with a left Riemann sum.
pub fn gateaux_via_hamiltonian(
    model: &GenericModel,
    theta: ThetaPaths<'_>,
    means: &MeanPath,
    direction: &PathArray,
) -> Result<Estimate> {
    check_paths(model, &theta.times, theta.x, means)?;
    let dims = model.dims;
    let (d, m, dn) = (dims.d, dims.m, dims.d * dims.n);
    let (nl, np) = (theta.x.n_labels(), theta.x.n_particles());
    let s = theta.times.n_steps();
    let same = |a: &PathArray, w: usize| {
        a.n_labels() == nl && a.n_particles() == np && a.width() == w && a.n_times() >= s
    };
    if !same(theta.y, d) || !same(theta.z, dn) || !same(theta.alpha, m) || !same(direction, m) {
        return Err(Error::invalid("adjoint, action or direction paths do not match the state paths"));
    }
    let w = model.grid.weights();
    let dt = theta.times.dt();
    let mut acc = vec![0.0; np];
    for k in 0..s {
        let fr = model.frame(&means.m[k])?;
        let contrib: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut ga = vec![0.0; m];
                let mut tot = 0.0;
                for i in 0..nl {
                    grad_a_with_frame(
                        model,
                        &fr,
                        i,
                        theta.x.at(k, i, p),
                        theta.y.at(k, i, p),
                        theta.z.at(k, i, p),
                        theta.alpha.at(k, i, p),
                        &mut ga,
                    );
                    let dl = direction.at(k, i, p);
                    tot += w[i] * ga.iter().zip(dl).map(|(g, v)| g * v).sum::<f64>() * dt;
                }
                tot
            })
            .collect();
        for (a, c) in acc.iter_mut().zip(contrib) {
            *a += c;
        }
    }
    Ok(Estimate::from_samples(&acc))
}

fn perturbed_costs(
    model: &GenericModel,
    base: &EnsemblePath,
    base_means: &MeanPath,
    direction: &PathArray,
    eps: f64,
) -> Result<Vec<f64>> {
    let actions = base.alpha.axpy(eps, direction)?;
    let (ens, means) = simulate_with_actions(model, base, base_means, &actions)?;
    particle_costs(model, &ens, &means)
}

/// Central difference `(J(α+εδ) − J(α−εδ))/2ε` with common noise.
pub fn gateaux_via_finite_difference(
    model: &GenericModel,
    base: &EnsemblePath,
    base_means: &MeanPath,
    direction: &PathArray,
    eps: f64,
) -> Result<Estimate> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let plus = perturbed_costs(model, base, base_means, direction, eps)?;
    let minus = perturbed_costs(model, base, base_means, direction, -eps)?;
    let diff: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    Ok(Estimate::from_samples(&diff))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEntry {
    /// `J(α̂+δ) − J(α̂)`
    pub difference: f64,
    pub stderr: f64,
    /// `Var[J_p(α̂+δ) − J_p(α̂)] / Var[J_p(α̂)]`
    pub variance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub cost: CostEstimate,
    pub magnitude: f64,
    pub perturbations: Vec<ProbeEntry>,
    pub min_difference: f64,
    pub pass: bool,
}

/// Compare `J(α̂)` with `J(α̂+δ)` for random bounded `δ`, common noise.
pub fn optimality_probe(
    model: &GenericModel,
    base: &EnsemblePath,
    base_means: &MeanPath,
    n_perturbations: usize,
    magnitude: f64,
    seed: u64,
) -> Result<ProbeReport> {
    let base_costs = particle_costs(model, base, base_means)?;
    let (value, stderr) = mean_stderr(&base_costs);
    let var_base = stderr * stderr * base_costs.len() as f64;
    let (d, m) = (model.dims.d, model.dims.m);
    let mut perturbations = Vec::with_capacity(n_perturbations);
    for r in 0..n_perturbations {
        let dir = Direction::random(model.n_labels(), d, m, magnitude, seed.wrapping_add(r as u64));
        let delta = dir.realize(&base.x, base.times.n_steps())?;
        let costs = perturbed_costs(model, base, base_means, &delta, 1.0)?;
        let diff: Vec<f64> = costs.iter().zip(&base_costs).map(|(a, b)| a - b).collect();
        let (dm, ds) = mean_stderr(&diff);
        let var_diff = ds * ds * diff.len() as f64;
        perturbations.push(ProbeEntry {
            difference: dm,
            stderr: ds,
            variance_ratio: if var_base > 0.0 { var_diff / var_base } else { 0.0 },
        });
    }
    let min_difference = perturbations.iter().map(|e| e.difference).fold(f64::INFINITY, f64::min);
    let pass = perturbations
        .iter()
        .all(|e| e.difference >= -3.0 * e.stderr.max(STDERR_FLOOR));
    Ok(ProbeReport {
        cost: CostEstimate {
            value,
            stderr,
            n_particles: base.n_particles(),
            seed: base.seed,
        },
        magnitude,
        perturbations,
        min_difference,
        pass,
    })
}

pub type Outer = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type OuterGrad = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `φ(label, x)`
pub type Inner = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;
pub type InnerGrad = Arc<dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync>;

/// `f(μ) = F(⟨φ₁,μ⟩, …, ⟨φ_k,μ⟩)` with `⟨φ,μ⟩ = ∫ E[φ(u, X^u)] du`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    pub outer: Outer,
    pub outer_grad: OuterGrad,
    /// `(φ_r, ∂_x φ_r)`
    pub inner: Vec<(Inner, InnerGrad)>,
}

impl std::fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("k", &self.inner.len())
            .finish()
    }
}

impl CylindricalFunctional {
    fn moments(&self, grid: &LabelGrid, x: &PathArray) -> Vec<f64> {
        let np = x.n_particles() as f64;
        self.inner
            .iter()
            .map(|(phi, _)| {
                (0..x.n_labels())
                    .map(|i| {
                        let s: f64 = (0..x.n_particles()).map(|p| phi(i, x.at(0, i, p))).sum();
                        grid.weight(i) * s / np
                    })
                    .sum()
            })
            .collect()
    }

    /// `f` at the empirical measure collection of `x` (first time slot).
    pub fn value(&self, grid: &LabelGrid, x: &PathArray) -> f64 {
        (self.outer)(&self.moments(grid, x))
    }

    /// `∫ E[∂_x δf/δm(u, X^u)·Y^u] du` with `∂_x δf/δm = Σ_r ∂_rF ∂_xφ_r`.
    pub fn derivative(&self, grid: &LabelGrid, x: &PathArray, y: &PathArray) -> f64 {
        let s = self.moments(grid, x);
        let mut df = vec![0.0; s.len()];
        (self.outer_grad)(&s, &mut df);
        let d = x.width();
        let np = x.n_particles() as f64;
        let mut g = vec![0.0; d];
        let mut tot = 0.0;
        for i in 0..x.n_labels() {
            let mut acc = 0.0;
            for p in 0..x.n_particles() {
                for ((_, grad), c) in self.inner.iter().zip(&df) {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    grad(i, x.at(0, i, p), &mut g);
                    acc += c * g.iter().zip(y.at(0, i, p)).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            tot += grid.weight(i) * acc / np;
        }
        tot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatDerivativeReport {
    pub eps: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: f64,
    pub errors: Vec<f64>,
}

/// Difference quotients `(f(X+εY) − f(X))/ε` against the flat-derivative
/// pairing. `x` and `y` hold one time slot, `[label][particle][d]`.
pub fn check_flat_derivative(
    fun: &CylindricalFunctional,
    grid: &LabelGrid,
    x: &PathArray,
    y: &PathArray,
    eps: &[f64],
) -> Result<FlatDerivativeReport> {
    if !x.same_shape(y) || x.n_times() != 1 || x.n_labels() != grid.len() || x.n_particles() == 0 {
        return Err(Error::invalid("samples and direction must share one [label][particle] layout"));
    }
    if fun.inner.is_empty() {
        return Err(Error::invalid("cylindrical functional needs at least one test function"));
    }
    if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::invalid("step sizes must be positive"));
    }
    let f0 = fun.value(grid, x);
    let rhs = fun.derivative(grid, x, y);
    let lhs: Vec<f64> = eps
        .iter()
        .map(|&e| (fun.value(grid, &x.axpy(e, y).expect("same shape")) - f0) / e)
        .collect();
    Ok(FlatDerivativeReport {
        eps: eps.to_vec(),
        errors: lhs.iter().map(|l| (l - rhs).abs()).collect(),
        lhs,
        rhs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub lambda: f64,
    pub n_samples: usize,
    pub slacks: ConvexitySlacks,
    pub pass: bool,
}

/// Sampled slack of the `λ`-convexity inequalities for `f` and `g`.
pub fn check_lambda_convexity(model: &GenericModel, n_samples: usize, seed: u64) -> ConvexityReport {
    let slacks = convexity_slacks(model, model.lambda, n_samples, seed);
    ConvexityReport {
        lambda: model.lambda,
        n_samples,
        pass: slacks.running >= -1e-9 && slacks.terminal >= -1e-9,
        slacks,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n_samples: usize,
    pub violations: usize,
    /// largest `|â| / bound` seen
    pub max_ratio: f64,
    pub pass: bool,
}

/// `|â(x, μ, y, z)| ≤ minimizer_bound(…, β₀)` on random tuples with standard
/// normal entries scaled by `scale`.
pub fn check_minimizer_bound(model: &GenericModel, n_samples: usize, scale: f64, seed: u64) -> Result<BoundReport> {
    let (nl, d, m, n) = (model.n_labels(), model.dims.d, model.dims.m, model.dims.n);
    let mut rng = noise::stream(seed, Domain::Sampling, 0, 2);
    let mut draw = |len: usize| {
        let mut v = vec![0.0; len];
        noise::fill_normals(&mut rng, &mut v);
        DVector::from_iterator(len, v.into_iter().map(|x| x * scale))
    };
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for k in 0..n_samples {
        let i = k % nl;
        let x = draw(d);
        let y = draw(d);
        let z = DMatrix::from_column_slice(d, n, draw(d * n).as_slice());
        let beta0 = draw(m);
        let means: Vec<DVector<f64>> = (0..nl).map(|_| draw(d)).collect();
        let fr = model.frame(&means)?;
        let mut a = vec![0.0; m];
        argmin_action(model, &fr, i, x.as_slice(), y.as_slice(), z.as_slice(), 1e-12, &mut a)?;
        let bound = minimizer_bound(model, i, &x, &means, &y, &z, &beta0)?;
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > bound * (1.0 + 1e-9) + 1e-12 {
            violations += 1;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(norm / bound);
        }
    }
    Ok(BoundReport {
        n_samples,
        violations,
        max_ratio,
        pass: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::adjoint_path;
    use crate::grid::KernelField;
    use crate::model::{lq_as_generic, Dims, InitialCondition, LqModel};
    use crate::riccati::solve_all;
    use crate::simulate::{propagate_means, simulate_closed_loop};

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }
    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar(n: usize) -> LqModel {
        LqModel::zeros(LabelGrid::uniform(n).unwrap(), 1.0, Dims { d: 1, m: 1, n: 1 })
    }

    fn coupled(n: usize) -> LqModel {
        let mut m = scalar(n);
        for i in 0..n {
            let u = m.grid.node(i);
            m.beta[i] = v1(0.5 - u);
            m.a[i] = s(0.1 - 0.4 * u);
            m.b[i] = s(0.5 + 0.5 * u);
            m.gamma[i] = s(0.6 + 0.4 * u);
            m.q[i] = s(0.5);
            m.r[i] = s(1.0 + u);
            m.p[i] = s(0.5);
        }
        m.g_a = KernelField::constant(n, s(0.3));
        m.gt_q = KernelField::constant(n, s(0.4));
        m.gt_p = KernelField::constant(n, s(0.2));
        m
    }

    struct Setup {
        g: GenericModel,
        ens: EnsemblePath,
        mp: MeanPath,
        y: PathArray,
        z: PathArray,
    }

    fn setup(m: &LqModel, steps: usize, np: usize, seed: u64) -> Setup {
        let sol = solve_all(m, 400).unwrap();
        let times = TimeGrid::new(m.horizon, steps).unwrap();
        let init = InitialCondition::Gaussian {
            mean: (0..m.n_labels()).map(|i| v1(1.0 - m.grid.node(i))).collect(),
            cov: vec![s(0.01); m.n_labels()],
        };
        let mp = propagate_means(&sol, &times, &init.means()).unwrap();
        let ens = simulate_closed_loop(&sol, &mp, &init, np, seed).unwrap();
        let adj = adjoint_path(&sol, &ens, &mp).unwrap();
        let z = adj.z_particles(np);
        Setup {
            g: lq_as_generic(m).unwrap(),
            ens,
            mp,
            y: adj.y,
            z,
        }
    }

    impl Setup {
        fn theta(&self) -> ThetaPaths<'_> {
            ThetaPaths {
                times: self.ens.times,
                x: &self.ens.x,
                y: &self.y,
                z: &self.z,
                alpha: &self.ens.alpha,
            }
        }
    }

    #[test]
    fn zero_model_zero_cost() {
        let st = setup(&scalar(2), 10, 20, 1);
        let c = estimate_cost(&st.g, &st.ens, &st.mp).unwrap();
        assert_eq!((c.value, c.stderr), (0.0, 0.0));
    }

    #[test]
    fn constant_state_unit_cost() {
        let mut m = scalar(1);
        m.q = vec![s(1.0)];
        let sol = solve_all(&m, 10).unwrap();
        let times = TimeGrid::new(1.0, 10).unwrap();
        let init = InitialCondition::Constant(vec![v1(1.0)]);
        let mp = propagate_means(&sol, &times, &init.means()).unwrap();
        let ens = simulate_closed_loop(&sol, &mp, &init, 4, 1).unwrap();
        let c = estimate_cost(&lq_as_generic(&m).unwrap(), &ens, &mp).unwrap();
        assert!((c.value - 1.0).abs() < 1e-14);
        assert_eq!(c.stderr, 0.0);
    }

    #[test]
    fn stderr_shrinks_like_inverse_root() {
        let m = coupled(2);
        let e: Vec<f64> = [1000, 4000, 16000]
            .iter()
            .map(|&n| {
                let st = setup(&m, 10, n, 5);
                estimate_cost(&st.g, &st.ens, &st.mp).unwrap().stderr
            })
            .collect();
        for w in e.windows(2) {
            let r = w[0] / w[1];
            assert!((1.5..=2.5).contains(&r), "{e:?}");
        }
    }

    #[test]
    fn zero_direction() {
        let st = setup(&coupled(3), 10, 50, 2);
        let dir = PathArray::zeros(10, 3, 50, 1);
        let h = gateaux_via_hamiltonian(&st.g, st.theta(), &st.mp, &dir).unwrap();
        assert_eq!(h.value, 0.0);
        let f = gateaux_via_finite_difference(&st.g, &st.ens, &st.mp, &dir, 0.1).unwrap();
        assert_eq!(f.value, 0.0);
        assert!(gateaux_via_finite_difference(&st.g, &st.ens, &st.mp, &dir, 0.0).is_err());
    }

    #[test]
    fn first_order_condition_at_feedback() {
        let st = setup(&coupled(4), 20, 200, 3);
        for r in 0..5 {
            let dir = Direction::random(4, 1, 1, 0.5, r).realize(&st.ens.x, 20).unwrap();
            let h = gateaux_via_hamiltonian(&st.g, st.theta(), &st.mp, &dir).unwrap();
            assert!(h.is_zero_within(3.0), "{h:?}");
        }
    }

    #[test]
    fn hamiltonian_gateaux_is_linear() {
        let mut m = coupled(3);
        m.cross = vec![s(0.2); 3];
        let st = setup(&m, 10, 30, 4);
        // off the optimum: zero adjoint gives a nonzero derivative
        let y = PathArray::zeros(11, 3, 30, 1);
        let theta = ThetaPaths { y: &y, ..st.theta() };
        let d1 = Direction::random(3, 1, 1, 1.0, 1).realize(&st.ens.x, 10).unwrap();
        let d2 = Direction::random(3, 1, 1, 1.0, 2).realize(&st.ens.x, 10).unwrap();
        let g = |d: &PathArray| gateaux_via_hamiltonian(&st.g, theta, &st.mp, d).unwrap().value;
        let mix = d1.scaled(2.0).axpy(-0.5, &d2).unwrap();
        let lhs = g(&mix);
        let rhs = 2.0 * g(&d1) - 0.5 * g(&d2);
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        assert!(lhs.abs() > 1e-3);
    }

    #[test]
    fn central_difference_is_step_independent() {
        let st = setup(&coupled(3), 10, 200, 6);
        let dir = Direction::random(3, 1, 1, 1.0, 9).realize(&st.ens.x, 10).unwrap();
        let a = gateaux_via_finite_difference(&st.g, &st.ens, &st.mp, &dir, 0.5).unwrap();
        let b = gateaux_via_finite_difference(&st.g, &st.ens, &st.mp, &dir, 0.01).unwrap();
        assert!((a.value - b.value).abs() < 1e-9 * (1.0 + a.value.abs()), "{a:?} {b:?}");
    }

    #[test]
    fn probe_on_decoupled_instance() {
        let mut m = coupled(2);
        m.g_a = KernelField::zeros(2, 1, 1);
        m.gt_q = KernelField::zeros(2, 1, 1);
        m.gt_p = KernelField::zeros(2, 1, 1);
        let st = setup(&m, 20, 500, 8);
        let r = optimality_probe(&st.g, &st.ens, &st.mp, 5, 0.5, 1).unwrap();
        assert!(r.pass);
        assert!(r.min_difference > 0.0);
        assert!(r.perturbations.iter().all(|e| e.variance_ratio < 0.1), "{r:?}");
        let z = optimality_probe(&st.g, &st.ens, &st.mp, 2, 0.0, 1).unwrap();
        assert!(z.perturbations.iter().all(|e| e.difference == 0.0));
    }

    fn single_slot(v: &[f64]) -> PathArray {
        let mut a = PathArray::zeros(1, 2, v.len() / 2, 1);
        a.as_mut_slice().copy_from_slice(v);
        a
    }

    fn identity_outer(square: bool) -> CylindricalFunctional {
        let phi: Inner = Arc::new(|_, x: &[f64]| x[0]);
        let dphi: InnerGrad = Arc::new(|_, _: &[f64], g: &mut [f64]| g[0] = 1.0);
        if square {
            CylindricalFunctional {
                outer: Arc::new(|s: &[f64]| s[0] * s[0]),
                outer_grad: Arc::new(|s: &[f64], g: &mut [f64]| g[0] = 2.0 * s[0]),
                inner: vec![(phi, dphi)],
            }
        } else {
            CylindricalFunctional {
                outer: Arc::new(|s: &[f64]| s[0]),
                outer_grad: Arc::new(|_: &[f64], g: &mut [f64]| g[0] = 1.0),
                inner: vec![(phi, dphi)],
            }
        }
    }

    #[test]
    fn flat_derivative_examples() {
        let grid = LabelGrid::uniform(2).unwrap();
        let x = single_slot(&[0.3, -1.0, 2.0, 0.5, 1.5, -0.2]);
        let y = single_slot(&[1.0, 0.5, -0.2, 0.7, 0.1, 0.4]);
        let eps = [1e-1, 1e-2, 1e-3];
        let lin = check_flat_derivative(&identity_outer(false), &grid, &x, &y, &eps).unwrap();
        assert!(lin.errors.iter().all(|&e| e < 1e-12), "{lin:?}");
        let sq = check_flat_derivative(&identity_outer(true), &grid, &x, &y, &eps).unwrap();
        // ∫E[Y] = ½·(1.3/3) + ½·(1.2/3)
        let ey: f64 = 0.5 * (1.3 / 3.0) + 0.5 * (1.2 / 3.0);
        for (e, err) in eps.iter().zip(&sq.errors) {
            assert!((err - e * ey * ey).abs() < 1e-10, "{sq:?}");
        }
        let zero = PathArray::zeros(1, 2, 3, 1);
        let z = check_flat_derivative(&identity_outer(true), &grid, &x, &zero, &eps).unwrap();
        assert_eq!(z.rhs, 0.0);
        assert!(z.lhs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn convexity_checks() {
        let mut m = coupled(3);
        m.gt_q = KernelField::constant(3, s(0.2));
        let r = check_lambda_convexity(&lq_as_generic(&m).unwrap(), 64, 1);
        assert!(r.pass, "{r:?}");
        assert!(r.slacks.running_same_action >= -1e-9);
        m.q[1] = s(-1.0);
        let r = check_lambda_convexity(&lq_as_generic(&m).unwrap(), 64, 1);
        assert!(!r.pass);
        assert!(r.slacks.running < 0.0);
    }

    #[test]
    fn minimizer_bound_holds_on_samples() {
        let mut m = coupled(3);
        m.g_i = KernelField::constant(3, s(0.2));
        m.cross = vec![s(0.1); 3];
        let g = lq_as_generic(&m).unwrap();
        let rep = check_minimizer_bound(&g, 300, 2.0, 1).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_ratio > 0.0 && rep.max_ratio <= 1.0);
    }
}
