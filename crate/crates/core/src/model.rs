//! Problem data: the LQ model with graphon-type kernels, the generic model
//! with linear drift/volatility and an abstract convex cost, and initial laws.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{KernelField, LabelGrid};
use crate::linalg::{dot, mat_t_vec_acc, mat_vec_acc, min_eigenvalue, psd_sqrt};
use crate::noise::{self, Domain};

/// Linear-quadratic model sampled on a label grid.
///
/// Per-label fields have one entry per grid node; kernels are sampled at node pairs.
#[derive(Debug, Clone)]
pub struct LqModel {
    pub grid: LabelGrid,
    pub horizon: f64,
    pub beta: Vec<DVector<f64>>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub cross: Vec<DMatrix<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub g_a: KernelField<DMatrix<f64>>,
    pub gt_q: KernelField<DMatrix<f64>>,
    pub gt_p: KernelField<DMatrix<f64>>,
    pub g_i: KernelField<DMatrix<f64>>,
}

/// State, control and noise dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

fn check_field<T>(
    name: &str,
    field: &[T],
    n: usize,
    shape: impl Fn(&T) -> (usize, usize),
    want: (usize, usize),
) -> Result<()> {
    if field.len() != n {
        return Err(Error::shape(format!(
            "{name} has {} entries, grid has {n} labels",
            field.len()
        )));
    }
    for (i, v) in field.iter().enumerate() {
        if shape(v) != want {
            return Err(Error::shape(format!(
                "{name} at label {i} is {:?}, expected {:?}",
                shape(v),
                want
            )));
        }
    }
    Ok(())
}

fn check_kernel(
    name: &str,
    k: &KernelField<DMatrix<f64>>,
    n: usize,
    want: (usize, usize),
) -> Result<()> {
    if k.n_labels() != n {
        return Err(Error::shape(format!(
            "kernel {name} is {0}x{0}, grid has {n} labels",
            k.n_labels()
        )));
    }
    for ((i, j), v) in k.iter() {
        if v.shape() != want {
            return Err(Error::shape(format!(
                "kernel {name} at ({i},{j}) is {:?}, expected {:?}",
                v.shape(),
                want
            )));
        }
    }
    Ok(())
}

impl LqModel {
    /// Model with every coefficient zero except `R = I`.
    pub fn zeros(grid: LabelGrid, horizon: f64, dims: Dims) -> Self {
        let n = grid.len();
        let Dims { d, m, n: w } = dims;
        Self {
            horizon,
            beta: vec![DVector::zeros(d); n],
            a: vec![DMatrix::zeros(d, d); n],
            b: vec![DMatrix::zeros(d, m); n],
            gamma: vec![DMatrix::zeros(d, w); n],
            q: vec![DMatrix::zeros(d, d); n],
            r: vec![DMatrix::identity(m, m); n],
            cross: vec![DMatrix::zeros(m, d); n],
            p: vec![DMatrix::zeros(d, d); n],
            g_a: KernelField::zeros(n, d, d),
            gt_q: KernelField::zeros(n, d, d),
            gt_p: KernelField::zeros(n, d, d),
            g_i: KernelField::zeros(n, m, d),
            grid,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.grid.len()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.a.first().map_or(0, |a| a.nrows()),
            m: self.r.first().map_or(0, |r| r.nrows()),
            n: self.gamma.first().map_or(0, |g| g.ncols()),
        }
    }

    /// Every field has the shape implied by `dims()`.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.n_labels();
        let Dims { d, m, n: w } = self.dims();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if d == 0 || m == 0 {
            return Err(Error::shape("state and control dimensions must be positive"));
        }
        check_field("beta", &self.beta, n, |v| (v.len(), 1), (d, 1))?;
        let sh = |v: &DMatrix<f64>| v.shape();
        check_field("A", &self.a, n, sh, (d, d))?;
        check_field("B", &self.b, n, sh, (d, m))?;
        check_field("gamma", &self.gamma, n, sh, (d, w))?;
        check_field("Q", &self.q, n, sh, (d, d))?;
        check_field("R", &self.r, n, sh, (m, m))?;
        check_field("Gamma", &self.cross, n, sh, (m, d))?;
        check_field("P", &self.p, n, sh, (d, d))?;
        check_kernel("G_A", &self.g_a, n, (d, d))?;
        check_kernel("G~_Q", &self.gt_q, n, (d, d))?;
        check_kernel("G~_P", &self.gt_p, n, (d, d))?;
        check_kernel("G_I", &self.g_i, n, (m, d))?;
        Ok(())
    }

    /// `R⁻¹` per label.
    pub fn r_inv(&self) -> Result<Vec<DMatrix<f64>>> {
        self.r
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| Error::invalid(format!("R is not positive definite at label {i}")))
            })
            .collect()
    }

    /// Running cost at one label given the per-label means.
    pub fn running_cost(&self, i: usize, x: &DVector<f64>, means: &[DVector<f64>], a: &DVector<f64>) -> f64 {
        let w = self.grid.weights();
        let mut dev = x.clone();
        for (j, mj) in means.iter().enumerate() {
            dev -= self.gt_q.get(i, j) * mj * w[j];
        }
        let mut im = DVector::zeros(a.len());
        for (j, mj) in means.iter().enumerate() {
            im += self.g_i.get(i, j) * mj * w[j];
        }
        dev.dot(&(&self.q[i] * &dev)) + a.dot(&(&self.r[i] * a)) + 2.0 * a.dot(&(&self.cross[i] * x)) + 2.0 * a.dot(&im)
    }

    pub fn terminal_cost(&self, i: usize, x: &DVector<f64>, means: &[DVector<f64>]) -> f64 {
        let w = self.grid.weights();
        let mut dev = x.clone();
        for (j, mj) in means.iter().enumerate() {
            dev -= self.gt_p.get(i, j) * mj * w[j];
        }
        dev.dot(&(&self.p[i] * &dev))
    }

    /// Reorder labels: entry `i` of the result is entry `perm[i]` of `self`.
    ///
    /// The grid itself is kept, so this is only meaningful for uniform grids.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &Vec<DMatrix<f64>>| perm.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        Self {
            grid: self.grid.clone(),
            horizon: self.horizon,
            beta: perm.iter().map(|&k| self.beta[k].clone()).collect(),
            a: pick(&self.a),
            b: pick(&self.b),
            gamma: pick(&self.gamma),
            q: pick(&self.q),
            r: pick(&self.r),
            cross: pick(&self.cross),
            p: pick(&self.p),
            g_a: self.g_a.permuted(perm),
            gt_q: self.gt_q.permuted(perm),
            gt_p: self.gt_p.permuted(perm),
            g_i: self.g_i.permuted(perm),
        }
    }
}

// ---------------------------------------------------------------------------
// validation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub assumption: String,
    pub node: Option<usize>,
    pub pair: Option<(usize, usize)>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Structural conditions hold and the sampled convexity gap is nonnegative.
    pub pass: bool,
    /// PSD/SPD/symmetry conditions only.
    pub structural_pass: bool,
    pub lambda_candidate: f64,
    /// Smallest sampled `gap − λ|Δa|²` of the convexity inequality.
    pub convexity_gap: f64,
    pub n_convexity_samples: usize,
    pub violations: Vec<Violation>,
}

const PSD_TOL: f64 = -1e-10;
const CONVEXITY_TOL: f64 = -1e-9;
const N_CONVEXITY_SAMPLES: usize = 256;

pub fn validate_lq(model: &LqModel) -> Result<ValidationReport> {
    model.check_shapes()?;
    let n = model.n_labels();
    let mut violations = Vec::new();
    let mut push = |assumption: &str, node, pair, detail: String| {
        violations.push(Violation {
            assumption: assumption.to_string(),
            node,
            pair,
            detail,
        })
    };
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    for i in 0..n {
        for (name, m) in [("Q", &model.q[i]), ("P", &model.p[i])] {
            if !finite(m) {
                push("finite", Some(i), None, format!("{name} has non-finite entries"));
                continue;
            }
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 * (1.0 + m.amax()) {
                push("symmetric", Some(i), None, format!("{name} asymmetric by {asym:.3e}"));
            }
            let ev = min_eigenvalue(m);
            if ev < PSD_TOL {
                push("psd", Some(i), None, format!("{name} has eigenvalue {ev:.6e}"));
            }
        }
        let r = &model.r[i];
        if !finite(r) {
            push("finite", Some(i), None, "R has non-finite entries".into());
        } else {
            let asym = (r - r.transpose()).amax();
            if asym > 1e-12 * (1.0 + r.amax()) {
                push("symmetric", Some(i), None, format!("R asymmetric by {asym:.3e}"));
            }
            let ev = min_eigenvalue(r);
            if ev <= 0.0 {
                push("spd", Some(i), None, format!("R has eigenvalue {ev:.6e}"));
            }
        }
        for (name, m) in [
            ("beta", &DMatrix::from_column_slice(model.beta[i].len(), 1, model.beta[i].as_slice())),
            ("A", &model.a[i]),
            ("B", &model.b[i]),
            ("gamma", &model.gamma[i]),
            ("Gamma", &model.cross[i]),
        ] {
            if !finite(m) {
                push("finite", Some(i), None, format!("{name} has non-finite entries"));
            }
        }
    }
    for (name, k) in [("G~_Q", &model.gt_q), ("G~_P", &model.gt_p)] {
        for i in 0..n {
            for j in i..n {
                if k.get(i, j) != &k.get(j, i).transpose() {
                    push(
                        "kernel-symmetry",
                        None,
                        Some((i, j)),
                        format!("{name}({i},{j}) differs from {name}({j},{i})ᵀ"),
                    );
                }
            }
        }
    }
    for (name, k) in [("G_A", &model.g_a), ("G~_Q", &model.gt_q), ("G~_P", &model.gt_p), ("G_I", &model.g_i)] {
        if let Some(((i, j), _)) = k.iter().find(|(_, v)| !finite(v)) {
            push("finite", None, Some((i, j)), format!("{name} has non-finite entries"));
        }
    }
    let structural_pass = violations.is_empty();
    let lambda_candidate = model
        .r
        .iter()
        .map(min_eigenvalue)
        .fold(f64::INFINITY, f64::min);

    let convexity_gap = if structural_pass {
        let generic = lq_as_generic(model)?;
        sampled_convexity_gap(&generic, lambda_candidate, N_CONVEXITY_SAMPLES, 0x5eed)
    } else {
        f64::NAN
    };
    if structural_pass && convexity_gap < CONVEXITY_TOL {
        violations.push(Violation {
            assumption: "lambda-convexity".into(),
            node: None,
            pair: None,
            detail: format!(
                "sampled convexity slack {convexity_gap:.6e} with lambda = {lambda_candidate:.6e}"
            ),
        });
    }
    Ok(ValidationReport {
        pass: violations.is_empty(),
        structural_pass,
        lambda_candidate,
        convexity_gap,
        n_convexity_samples: if structural_pass { N_CONVEXITY_SAMPLES } else { 0 },
        violations,
    })
}

/// Minimal slack of the running-cost convexity inequality over sampled pairs
/// `(x, m, a)`, `(x', m', a')` at every label, with the measure argument
/// represented by per-label means.
pub fn sampled_convexity_gap(model: &GenericModel, lambda: f64, n_samples: usize, seed: u64) -> f64 {
    convexity_slacks(model, lambda, n_samples, seed).running
}

/// Minimal sampled slacks, each divided by `1 + |value₀| + |value₁|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexitySlacks {
    /// `f' − f − ∂f·Δ − λ|Δa|²`
    pub running: f64,
    /// same with `a' = a`
    pub running_same_action: f64,
    /// `g' − g − ∂g·Δ`
    pub terminal: f64,
}

pub fn convexity_slacks(model: &GenericModel, lambda: f64, n_samples: usize, seed: u64) -> ConvexitySlacks {
    let Dims { d, m, .. } = model.dims;
    let n = model.n_labels();
    let w = model.grid.weights();
    let cost = &model.cost;
    let mut out = ConvexitySlacks {
        running: f64::INFINITY,
        running_same_action: f64::INFINITY,
        terminal: f64::INFINITY,
    };
    for s in 0..n_samples {
        let mut rng = noise::stream(seed, Domain::Sampling, s, 0);
        let mut draw = |len: usize| {
            let mut v = vec![0.0; len];
            noise::fill_normals(&mut rng, &mut v);
            DVector::from_vec(v)
        };
        let means0: Vec<DVector<f64>> = (0..n).map(|_| draw(d)).collect();
        let means1: Vec<DVector<f64>> = (0..n).map(|_| draw(d)).collect();
        let s0 = cost.summarize(&model.grid, &means0);
        let s1 = cost.summarize(&model.grid, &means1);
        let a0s: Vec<DVector<f64>> = (0..n).map(|_| draw(m)).collect();
        let a1s: Vec<DVector<f64>> = (0..n).map(|_| draw(m)).collect();
        for i in 0..n {
            let x0 = draw(d);
            let x1 = draw(d);
            let (x0s, x1s) = (x0.as_slice(), x1.as_slice());
            let (a0, a1) = (&a0s[i], &a1s[i]);
            let dx = &x1 - &x0;
            let dm: Vec<DVector<f64>> = means1.iter().zip(&means0).map(|(a, b)| a - b).collect();

            let f0 = cost.running(i, x0s, &s0, a0.as_slice());
            let mut gx = vec![0.0; d];
            let mut ga = vec![0.0; m];
            cost.running_grad_x(i, x0s, &s0, a0.as_slice(), &mut gx);
            cost.running_grad_a(i, x0s, &s0, a0.as_slice(), &mut ga);
            let mut lin_xm = dot(&gx, dx.as_slice());
            let mut fg = vec![0.0; d];
            for j in 0..n {
                fg.iter_mut().for_each(|v| *v = 0.0);
                cost.running_flat_grad(i, x0s, &s0, a0.as_slice(), j, &mut fg);
                lin_xm += w[j] * dot(&fg, dm[j].as_slice());
            }
            let da = a1 - a0;
            let f1 = cost.running(i, x1s, &s1, a1.as_slice());
            let gap = f1 - f0 - lin_xm - dot(&ga, da.as_slice()) - lambda * da.norm_squared();
            out.running = out.running.min(gap / (1.0 + f0.abs() + f1.abs()));
            let f1 = cost.running(i, x1s, &s1, a0.as_slice());
            let gap = f1 - f0 - lin_xm;
            out.running_same_action = out.running_same_action.min(gap / (1.0 + f0.abs() + f1.abs()));

            let g0 = cost.terminal(i, x0s, &s0);
            let g1 = cost.terminal(i, x1s, &s1);
            cost.terminal_grad_x(i, x0s, &s0, &mut gx);
            let mut lin = dot(&gx, dx.as_slice());
            for j in 0..n {
                fg.iter_mut().for_each(|v| *v = 0.0);
                cost.terminal_flat_grad(i, x0s, &s0, j, &mut fg);
                lin += w[j] * dot(&fg, dm[j].as_slice());
            }
            out.terminal = out.terminal.min((g1 - g0 - lin) / (1.0 + g0.abs() + g1.abs()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// generic model

/// Opaque per-time summary of the mean field, one vector per label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeanSummary {
    pub per_label: Vec<Vec<f64>>,
}

/// Running cost `f(u, x, μ, a)` and terminal cost `g(u, x, μ)` with the
/// derivatives the maximum principle needs. The measure argument enters
/// only through a [`MeanSummary`] built from per-label means.
///
/// Flat-derivative methods return `∂_x̃ δf/δm(label, …)(target, x̃)`, a density
/// with respect to the label measure; for costs depending on μ only through
/// means it does not depend on `x̃`.
pub trait CostModel: Send + Sync + std::fmt::Debug {
    fn summarize(&self, grid: &LabelGrid, means: &[DVector<f64>]) -> MeanSummary;

    fn running(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64]) -> f64;
    fn running_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]);
    fn running_grad_a(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]);
    fn running_flat_grad(
        &self,
        i: usize,
        x: &[f64],
        s: &MeanSummary,
        a: &[f64],
        target: usize,
        out: &mut [f64],
    );

    fn terminal(&self, i: usize, x: &[f64], s: &MeanSummary) -> f64;
    fn terminal_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, out: &mut [f64]);
    fn terminal_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, target: usize, out: &mut [f64]);

    /// `∫ Ẽ[∂ δf/δm(ũ, X̃^ũ, μ, α̃^ũ)(target, ·)] dũ` over a particle snapshot.
    ///
    /// `xs` and `acts` are `[label][particle][component]` slices.
    #[allow(clippy::too_many_arguments)]
    fn coupled_running_flat_grad(
        &self,
        grid: &LabelGrid,
        target: usize,
        s: &MeanSummary,
        xs: &[f64],
        acts: &[f64],
        n_particles: usize,
        out: &mut [f64],
    ) {
        let d = out.len();
        let m = acts.len() / (grid.len() * n_particles).max(1);
        let mut tmp = vec![0.0; d];
        for (j, &wj) in grid.weights().iter().enumerate() {
            for p in 0..n_particles {
                let k = j * n_particles + p;
                tmp.iter_mut().for_each(|v| *v = 0.0);
                self.running_flat_grad(j, &xs[k * d..(k + 1) * d], s, &acts[k * m..(k + 1) * m], target, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += wj * t / n_particles as f64;
                }
            }
        }
    }

    /// `coupled_running_flat_grad` for every target label, `[target][d]`.
    fn coupled_running_flat_grads(
        &self,
        grid: &LabelGrid,
        s: &MeanSummary,
        xs: &[f64],
        acts: &[f64],
        n_particles: usize,
        d: usize,
    ) -> Vec<Vec<f64>> {
        (0..grid.len())
            .map(|t| {
                let mut v = vec![0.0; d];
                self.coupled_running_flat_grad(grid, t, s, xs, acts, n_particles, &mut v);
                v
            })
            .collect()
    }

    fn coupled_terminal_flat_grad(
        &self,
        grid: &LabelGrid,
        target: usize,
        s: &MeanSummary,
        xs: &[f64],
        n_particles: usize,
        out: &mut [f64],
    ) {
        let d = out.len();
        let mut tmp = vec![0.0; d];
        for (j, &wj) in grid.weights().iter().enumerate() {
            for p in 0..n_particles {
                let k = j * n_particles + p;
                tmp.iter_mut().for_each(|v| *v = 0.0);
                self.terminal_flat_grad(j, &xs[k * d..(k + 1) * d], s, target, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += wj * t / n_particles as f64;
                }
            }
        }
    }

    /// Closed-form minimizer of `a ↦ f(a) + a·c`, written to `out`; false if
    /// the cost has none.
    fn argmin_action(&self, _i: usize, _x: &[f64], _s: &MeanSummary, _linear: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// The quadratic cost of the LQ model.
#[derive(Debug, Clone)]
pub struct LqCost {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    r_inv: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    p: Vec<DMatrix<f64>>,
    gt_q: KernelField<DMatrix<f64>>,
    gt_p: KernelField<DMatrix<f64>>,
    g_i: KernelField<DMatrix<f64>>,
    d: usize,
    m: usize,
}

impl LqCost {
    pub fn new(model: &LqModel) -> Result<Self> {
        model.check_shapes()?;
        let Dims { d, m, .. } = model.dims();
        Ok(Self {
            q: model.q.clone(),
            r: model.r.clone(),
            r_inv: model.r_inv()?,
            cross: model.cross.clone(),
            p: model.p.clone(),
            gt_q: model.gt_q.clone(),
            gt_p: model.gt_p.clone(),
            g_i: model.g_i.clone(),
            d,
            m,
        })
    }

    // summary layout per label: [ (G~_Q m)_i | (G_I m)_i | (G~_P m)_i | m_i ]
    fn qm<'a>(&self, s: &'a MeanSummary, i: usize) -> &'a [f64] {
        &s.per_label[i][..self.d]
    }
    fn im<'a>(&self, s: &'a MeanSummary, i: usize) -> &'a [f64] {
        &s.per_label[i][self.d..self.d + self.m]
    }
    fn pm<'a>(&self, s: &'a MeanSummary, i: usize) -> &'a [f64] {
        &s.per_label[i][self.d + self.m..2 * self.d + self.m]
    }
    fn mean<'a>(&self, s: &'a MeanSummary, i: usize) -> &'a [f64] {
        &s.per_label[i][2 * self.d + self.m..]
    }

    fn deviation(x: &[f64], shift: &[f64]) -> Vec<f64> {
        x.iter().zip(shift).map(|(a, b)| a - b).collect()
    }
}

impl CostModel for LqCost {
    fn summarize(&self, grid: &LabelGrid, means: &[DVector<f64>]) -> MeanSummary {
        let (d, m) = (self.d, self.m);
        let w = grid.weights();
        let per_label = (0..means.len())
            .map(|i| {
                let mut v = vec![0.0; 3 * d + m];
                for (j, mj) in means.iter().enumerate() {
                    let x: Vec<f64> = mj.iter().map(|c| c * w[j]).collect();
                    mat_vec_acc(self.gt_q.get(i, j), &x, &mut v[..d]);
                    mat_vec_acc(self.g_i.get(i, j), &x, &mut v[d..d + m]);
                    mat_vec_acc(self.gt_p.get(i, j), &x, &mut v[d + m..2 * d + m]);
                }
                v[2 * d + m..].copy_from_slice(means[i].as_slice());
                v
            })
            .collect();
        MeanSummary { per_label }
    }

    fn running(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64]) -> f64 {
        let dev = Self::deviation(x, self.qm(s, i));
        let mut qd = vec![0.0; self.d];
        mat_vec_acc(&self.q[i], &dev, &mut qd);
        let mut ra = vec![0.0; self.m];
        mat_vec_acc(&self.r[i], a, &mut ra);
        let mut gx = vec![0.0; self.m];
        mat_vec_acc(&self.cross[i], x, &mut gx);
        dot(&dev, &qd) + dot(a, &ra) + 2.0 * dot(a, &gx) + 2.0 * dot(a, self.im(s, i))
    }

    fn running_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]) {
        let (d, m, qm) = (self.d, self.m, self.qm(s, i));
        let (q, g) = (self.q[i].as_slice(), self.cross[i].as_slice());
        for (r, o) in out.iter_mut().enumerate() {
            let mut v = 0.0;
            for c in 0..d {
                v += q[r + c * d] * (x[c] - qm[c]);
            }
            for c in 0..m {
                v += g[c + r * m] * a[c];
            }
            *o = 2.0 * v;
        }
    }

    fn running_grad_a(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.im(s, i));
        mat_vec_acc(&self.cross[i], x, out);
        mat_vec_acc(&self.r[i], a, out);
        out.iter_mut().for_each(|v| *v *= 2.0);
    }

    fn running_flat_grad(
        &self,
        i: usize,
        x: &[f64],
        s: &MeanSummary,
        a: &[f64],
        target: usize,
        out: &mut [f64],
    ) {
        let dev = Self::deviation(x, self.qm(s, i));
        let mut qd = vec![0.0; self.d];
        mat_vec_acc(&self.q[i], &dev, &mut qd);
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_t_vec_acc(self.gt_q.get(i, target), &qd, out);
        out.iter_mut().for_each(|v| *v = -*v);
        mat_t_vec_acc(self.g_i.get(i, target), a, out);
        out.iter_mut().for_each(|v| *v *= 2.0);
    }

    fn terminal(&self, i: usize, x: &[f64], s: &MeanSummary) -> f64 {
        let dev = Self::deviation(x, self.pm(s, i));
        let mut pd = vec![0.0; self.d];
        mat_vec_acc(&self.p[i], &dev, &mut pd);
        dot(&dev, &pd)
    }

    fn terminal_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, out: &mut [f64]) {
        let dev = Self::deviation(x, self.pm(s, i));
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.p[i], &dev, out);
        out.iter_mut().for_each(|v| *v *= 2.0);
    }

    fn terminal_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, target: usize, out: &mut [f64]) {
        let dev = Self::deviation(x, self.pm(s, i));
        let mut pd = vec![0.0; self.d];
        mat_vec_acc(&self.p[i], &dev, &mut pd);
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_t_vec_acc(self.gt_p.get(i, target), &pd, out);
        out.iter_mut().for_each(|v| *v *= -2.0);
    }

    // The flat gradient is affine in (x, a), so its particle average only
    // needs the per-label means of the state and the action.
    fn coupled_running_flat_grad(
        &self,
        grid: &LabelGrid,
        target: usize,
        s: &MeanSummary,
        _xs: &[f64],
        acts: &[f64],
        n_particles: usize,
        out: &mut [f64],
    ) {
        let (d, m) = (self.d, self.m);
        let mut tmp = vec![0.0; d];
        for (j, &wj) in grid.weights().iter().enumerate() {
            let mut abar = vec![0.0; m];
            for p in 0..n_particles {
                let k = j * n_particles + p;
                for (o, v) in abar.iter_mut().zip(&acts[k * m..(k + 1) * m]) {
                    *o += v;
                }
            }
            abar.iter_mut().for_each(|v| *v /= n_particles as f64);
            let xbar = self.mean(s, j).to_vec();
            self.running_flat_grad(j, &xbar, s, &abar, target, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += wj * t;
            }
        }
    }

    fn coupled_running_flat_grads(
        &self,
        grid: &LabelGrid,
        s: &MeanSummary,
        _xs: &[f64],
        acts: &[f64],
        n_particles: usize,
        d: usize,
    ) -> Vec<Vec<f64>> {
        let m = self.m;
        let abar: Vec<Vec<f64>> = (0..grid.len())
            .map(|j| {
                let mut a = vec![0.0; m];
                for v in acts[j * n_particles * m..(j + 1) * n_particles * m].chunks_exact(m) {
                    a.iter_mut().zip(v).for_each(|(o, x)| *o += x);
                }
                a.iter_mut().for_each(|v| *v /= n_particles as f64);
                a
            })
            .collect();
        let mut tmp = vec![0.0; d];
        (0..grid.len())
            .map(|target| {
                let mut out = vec![0.0; d];
                for (j, &wj) in grid.weights().iter().enumerate() {
                    self.running_flat_grad(j, self.mean(s, j), s, &abar[j], target, &mut tmp);
                    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += wj * t);
                }
                out
            })
            .collect()
    }

    fn coupled_terminal_flat_grad(
        &self,
        grid: &LabelGrid,
        target: usize,
        s: &MeanSummary,
        _xs: &[f64],
        _n_particles: usize,
        out: &mut [f64],
    ) {
        let mut tmp = vec![0.0; self.d];
        for (j, &wj) in grid.weights().iter().enumerate() {
            let xbar = self.mean(s, j).to_vec();
            self.terminal_flat_grad(j, &xbar, s, target, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += wj * t;
            }
        }
    }

    fn argmin_action(&self, i: usize, x: &[f64], s: &MeanSummary, linear: &[f64], out: &mut [f64]) -> bool {
        // 2Ra + 2Γx + 2(G_I m) + c = 0
        let (d, m) = (self.d, self.m);
        let (im, g, ri) = (self.im(s, i), self.cross[i].as_slice(), self.r_inv[i].as_slice());
        for (r, o) in out.iter_mut().enumerate() {
            let mut v = 0.0;
            for c in 0..m {
                let mut rhs = im[c] + 0.5 * linear[c];
                for k in 0..d {
                    rhs += g[c + k * m] * x[k];
                }
                v += ri[r + c * m] * rhs;
            }
            *o = -v;
        }
        true
    }
}

/// Linear drift/volatility with an abstract convex cost.
///
/// `b(u,x,μ,a) = b₀ + ∫b₁(u,v)μ̄^v dv + b₂x + b₃a`, and `vec σ` has the same
/// form with blocks `σ₀ … σ₃` acting on the column-major vectorization of
/// the `d × n` volatility matrix.
#[derive(Debug, Clone)]
pub struct GenericModel {
    pub grid: LabelGrid,
    pub horizon: f64,
    pub dims: Dims,
    pub b0: Vec<DVector<f64>>,
    pub b1: KernelField<DMatrix<f64>>,
    pub b2: Vec<DMatrix<f64>>,
    pub b3: Vec<DMatrix<f64>>,
    pub s0: Vec<DMatrix<f64>>,
    pub s1: KernelField<DMatrix<f64>>,
    pub s2: Vec<DMatrix<f64>>,
    pub s3: Vec<DMatrix<f64>>,
    pub cost: Arc<dyn CostModel>,
    pub lambda: f64,
}

/// Mean-field quantities shared by all particles at one time.
#[derive(Debug, Clone)]
pub struct MeanFrame {
    /// `∫b₁(u_i,v)μ̄^v dv`
    pub drift: Vec<DVector<f64>>,
    /// `∫σ₁(u_i,v)μ̄^v dv` (vectorized)
    pub vol: Vec<DVector<f64>>,
    pub cost: MeanSummary,
}

impl GenericModel {
    pub fn n_labels(&self) -> usize {
        self.grid.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.n_labels();
        let Dims { d, m, n: w } = self.dims;
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("convexity constant must be positive, got {}", self.lambda)));
        }
        let sh = |v: &DMatrix<f64>| v.shape();
        check_field("b0", &self.b0, n, |v| (v.len(), 1), (d, 1))?;
        check_kernel("b1", &self.b1, n, (d, d))?;
        check_field("b2", &self.b2, n, sh, (d, d))?;
        check_field("b3", &self.b3, n, sh, (d, m))?;
        check_field("s0", &self.s0, n, sh, (d, w))?;
        check_kernel("s1", &self.s1, n, (d * w, d))?;
        check_field("s2", &self.s2, n, sh, (d * w, d))?;
        check_field("s3", &self.s3, n, sh, (d * w, m))?;
        Ok(())
    }

    pub fn frame(&self, means: &[DVector<f64>]) -> Result<MeanFrame> {
        Ok(MeanFrame {
            drift: self.grid.kernel_apply(&self.b1, means)?,
            vol: self.grid.kernel_apply(&self.s1, means)?,
            cost: self.cost.summarize(&self.grid, means),
        })
    }

    /// `out = b(u_i, x, μ, a)`
    pub fn drift_into(&self, i: usize, x: &[f64], fr: &MeanFrame, a: &[f64], out: &mut [f64]) {
        for ((o, b), c) in out.iter_mut().zip(self.b0[i].iter()).zip(fr.drift[i].iter()) {
            *o = b + c;
        }
        mat_vec_acc(&self.b2[i], x, out);
        mat_vec_acc(&self.b3[i], a, out);
    }

    /// `out = vec σ(u_i, x, μ, a)` (column-major, length `d·n`)
    pub fn vol_into(&self, i: usize, x: &[f64], fr: &MeanFrame, a: &[f64], out: &mut [f64]) {
        for ((o, s), c) in out.iter_mut().zip(self.s0[i].iter()).zip(fr.vol[i].iter()) {
            *o = s + c;
        }
        mat_vec_acc(&self.s2[i], x, out);
        mat_vec_acc(&self.s3[i], a, out);
    }

    /// True when the volatility does not depend on state, means or action.
    pub fn additive_noise(&self) -> bool {
        let zero = |m: &DMatrix<f64>| m.iter().all(|&v| v == 0.0);
        self.s1.is_zero() && self.s2.iter().all(zero) && self.s3.iter().all(zero)
    }
}

pub fn lq_as_generic(model: &LqModel) -> Result<GenericModel> {
    model.check_shapes()?;
    let dims = model.dims();
    let Dims { d, m, n: w } = dims;
    let nl = model.n_labels();
    let lambda = model.r.iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min);
    Ok(GenericModel {
        grid: model.grid.clone(),
        horizon: model.horizon,
        dims,
        b0: model.beta.clone(),
        b1: model.g_a.clone(),
        b2: model.a.clone(),
        b3: model.b.clone(),
        s0: model.gamma.clone(),
        s1: KernelField::zeros(nl, d * w, d),
        s2: vec![DMatrix::zeros(d * w, d); nl],
        s3: vec![DMatrix::zeros(d * w, m); nl],
        cost: Arc::new(LqCost::new(model)?),
        lambda,
    })
}

// ---------------------------------------------------------------------------
// initial laws

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Deterministic `ξ^u`.
    Constant(Vec<DVector<f64>>),
    /// `ξ^u ~ N(mean^u, cov^u)`.
    Gaussian {
        mean: Vec<DVector<f64>>,
        cov: Vec<DMatrix<f64>>,
    },
}

impl InitialCondition {
    pub fn n_labels(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self, i: usize) -> &DVector<f64> {
        match self {
            Self::Constant(v) => &v[i],
            Self::Gaussian { mean, .. } => &mean[i],
        }
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        (0..self.n_labels()).map(|i| self.mean(i).clone()).collect()
    }

    pub fn validate(&self, n_labels: usize, d: usize) -> Result<()> {
        if self.n_labels() != n_labels {
            return Err(Error::shape(format!(
                "initial condition has {} labels, model has {n_labels}",
                self.n_labels()
            )));
        }
        for i in 0..n_labels {
            let m = self.mean(i);
            if m.len() != d || !m.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("initial mean at label {i} is malformed")));
            }
            if let Self::Gaussian { cov, .. } = self {
                let c = &cov[i];
                if c.shape() != (d, d) || !c.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid(format!("initial covariance at label {i} is malformed")));
                }
                if min_eigenvalue(c) < PSD_TOL {
                    return Err(Error::invalid(format!("initial covariance at label {i} is not PSD")));
                }
            }
        }
        Ok(())
    }

    /// Draw `ξ` for every `(label, particle)` into `out` (`[label][particle][d]`).
    pub fn sample_into(&self, seed: u64, n_particles: usize, out: &mut [f64]) {
        let n = self.n_labels();
        let d = self.mean(0).len();
        match self {
            Self::Constant(v) => {
                for i in 0..n {
                    for p in 0..n_particles {
                        let k = (i * n_particles + p) * d;
                        out[k..k + d].copy_from_slice(v[i].as_slice());
                    }
                }
            }
            Self::Gaussian { mean, cov } => {
                for i in 0..n {
                    let root = psd_sqrt(&cov[i]);
                    let mut z = vec![0.0; d];
                    for p in 0..n_particles {
                        let mut rng = noise::stream(seed, Domain::Initial, i, p);
                        noise::fill_normals(&mut rng, &mut z);
                        let k = (i * n_particles + p) * d;
                        let slot = &mut out[k..k + d];
                        slot.copy_from_slice(mean[i].as_slice());
                        mat_vec_acc(&root, &z, slot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(n: usize) -> LqModel {
        let grid = LabelGrid::uniform(n).unwrap();
        LqModel::zeros(grid, 1.0, Dims { d: 1, m: 1, n: 1 })
    }

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_model(seed: u64, n: usize, dims: Dims) -> LqModel {
        let grid = LabelGrid::uniform(n).unwrap();
        let mut rng = noise::stream(seed, Domain::Sampling, 99, 0);
        let mut mat = |r: usize, c: usize| {
            let mut v = vec![0.0; r * c];
            noise::fill_normals(&mut rng, &mut v);
            DMatrix::from_vec(r, c, v) * 0.5
        };
        let Dims { d, m, n: w } = dims;
        let mut model = LqModel::zeros(grid, 1.0, dims);
        for i in 0..n {
            model.beta[i] = mat(d, 1).column(0).into_owned();
            model.a[i] = mat(d, d);
            model.b[i] = mat(d, m);
            model.gamma[i] = mat(d, w);
            let q = mat(d, d);
            model.q[i] = &q * q.transpose();
            let r = mat(m, m);
            model.r[i] = &r * r.transpose() + DMatrix::identity(m, m);
            model.cross[i] = mat(m, d) * 0.2;
            let p = mat(d, d);
            model.p[i] = &p * p.transpose();
        }
        model.g_a = KernelField::from_fn(n, |_, _| mat(d, d));
        model.g_i = KernelField::from_fn(n, |_, _| mat(m, d));
        let half_q = KernelField::from_fn(n, |_, _| mat(d, d));
        model.gt_q = KernelField::from_fn(n, |i, j| {
            if i <= j { half_q.get(i, j).clone() } else { half_q.get(j, i).transpose() }
        });
        let half_p = KernelField::from_fn(n, |_, _| mat(d, d));
        model.gt_p = KernelField::from_fn(n, |i, j| {
            if i <= j { half_p.get(i, j).clone() } else { half_p.get(j, i).transpose() }
        });
        model
    }

    #[test]
    fn scalar_r2_lambda_two() {
        let mut m = scalar_model(3);
        m.r = vec![s(2.0); 3];
        m.q = vec![s(1.0); 3];
        let rep = validate_lq(&m).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.lambda_candidate, 2.0);
        assert!(rep.convexity_gap >= -1e-9);
    }

    #[test]
    fn indefinite_q_flagged_at_node() {
        let mut m = scalar_model(4);
        m.q[2] = s(-0.1);
        let rep = validate_lq(&m).unwrap();
        assert!(!rep.pass && !rep.structural_pass);
        assert!(rep.violations.iter().any(|v| v.node == Some(2) && v.assumption == "psd"));
    }

    #[test]
    fn asymmetric_kernel_flagged_at_pair() {
        let mut m = scalar_model(3);
        *m.gt_q.get_mut(0, 2) = s(0.3);
        let rep = validate_lq(&m).unwrap();
        assert!(!rep.pass);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.pair == Some((0, 2)) && v.assumption == "kernel-symmetry"));
    }

    #[test]
    fn wrong_shape_is_an_error() {
        let mut m = scalar_model(3);
        m.a[1] = DMatrix::zeros(2, 2);
        assert!(matches!(validate_lq(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_model_generic_is_zero() {
        let m = scalar_model(3);
        let g = lq_as_generic(&m).unwrap();
        let means = vec![DVector::from_element(1, 0.7); 3];
        let fr = g.frame(&means).unwrap();
        let x = [1.3];
        let a = [0.0];
        assert_eq!(g.cost.running(1, &x, &fr.cost, &a), 0.0);
        assert_eq!(g.cost.terminal(1, &x, &fr.cost), 0.0);
        let mut out = [9.0];
        g.cost.running_grad_x(1, &x, &fr.cost, &a, &mut out);
        assert_eq!(out, [0.0]);
        g.cost.terminal_flat_grad(1, &x, &fr.cost, 2, &mut out);
        assert_eq!(out, [0.0]);
    }

    #[test]
    fn generic_cost_matches_direct_formula() {
        let dims = Dims { d: 2, m: 2, n: 2 };
        let model = random_model(1, 4, dims);
        let g = lq_as_generic(&model).unwrap();
        let mut rng = noise::stream(2, Domain::Sampling, 0, 0);
        for _ in 0..20 {
            let mut draw = |k: usize| {
                let mut v = vec![0.0; k];
                noise::fill_normals(&mut rng, &mut v);
                DVector::from_vec(v)
            };
            let means: Vec<_> = (0..4).map(|_| draw(2)).collect();
            let x = draw(2);
            let a = draw(2);
            let s = g.cost.summarize(&g.grid, &means);
            for i in 0..4 {
                let direct = model.running_cost(i, &x, &means, &a);
                let via = g.cost.running(i, x.as_slice(), &s, a.as_slice());
                assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
                let direct = model.terminal_cost(i, &x, &means);
                let via = g.cost.terminal(i, x.as_slice(), &s);
                assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn derivative_oracles_match_finite_differences() {
        let dims = Dims { d: 2, m: 3, n: 1 };
        let model = random_model(5, 3, dims);
        let g = lq_as_generic(&model).unwrap();
        let mut rng = noise::stream(6, Domain::Sampling, 0, 0);
        let mut draw = |k: usize| {
            let mut v = vec![0.0; k];
            noise::fill_normals(&mut rng, &mut v);
            v
        };
        let h = 1e-6;
        for _ in 0..10 {
            let means: Vec<_> = (0..3).map(|_| DVector::from_vec(draw(2))).collect();
            let s = g.cost.summarize(&g.grid, &means);
            let x = draw(2);
            let a = draw(3);
            for i in 0..3 {
                let mut gx = vec![0.0; 2];
                let mut ga = vec![0.0; 3];
                let mut tx = vec![0.0; 2];
                g.cost.running_grad_x(i, &x, &s, &a, &mut gx);
                g.cost.running_grad_a(i, &x, &s, &a, &mut ga);
                g.cost.terminal_grad_x(i, &x, &s, &mut tx);
                for c in 0..2 {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (g.cost.running(i, &xp, &s, &a) - g.cost.running(i, &xm, &s, &a)) / (2.0 * h);
                    assert!(rel_close(fd, gx[c], 1e-6), "{fd} vs {}", gx[c]);
                    let fd = (g.cost.terminal(i, &xp, &s) - g.cost.terminal(i, &xm, &s)) / (2.0 * h);
                    assert!(rel_close(fd, tx[c], 1e-6));
                }
                for c in 0..3 {
                    let (mut ap, mut am) = (a.clone(), a.clone());
                    ap[c] += h;
                    am[c] -= h;
                    let fd = (g.cost.running(i, &x, &s, &ap) - g.cost.running(i, &x, &s, &am)) / (2.0 * h);
                    assert!(rel_close(fd, ga[c], 1e-6));
                }
            }
        }
    }

    #[test]
    fn flat_derivatives_match_mean_perturbation() {
        // an empirical measure shifted by ε·e_c at label j moves its mean by ε·e_c,
        // and the flat derivative integrates against that shift with weight w_j
        let dims = Dims { d: 2, m: 1, n: 1 };
        let model = random_model(8, 3, dims);
        let g = lq_as_generic(&model).unwrap();
        let w = g.grid.weights().to_vec();
        let means: Vec<_> = (0..3)
            .map(|i| DVector::from_vec(vec![0.3 * i as f64 - 0.2, 0.5]))
            .collect();
        let x = [0.4, -1.1];
        let a = [0.7];
        let s = g.cost.summarize(&g.grid, &means);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut fg = vec![0.0; 2];
                let mut tg = vec![0.0; 2];
                g.cost.running_flat_grad(i, &x, &s, &a, j, &mut fg);
                g.cost.terminal_flat_grad(i, &x, &s, j, &mut tg);
                for c in 0..2 {
                    let (mut mp, mut mm) = (means.clone(), means.clone());
                    mp[j][c] += h;
                    mm[j][c] -= h;
                    let (sp, sm) = (g.cost.summarize(&g.grid, &mp), g.cost.summarize(&g.grid, &mm));
                    let fd = (g.cost.terminal(i, &x, &sp) - g.cost.terminal(i, &x, &sm)) / (2.0 * h);
                    assert!(rel_close(fd, w[j] * tg[c], 1e-6), "{fd} vs {}", w[j] * tg[c]);
                    let fd = (g.cost.running(i, &x, &sp, &a) - g.cost.running(i, &x, &sm, &a)) / (2.0 * h);
                    assert!(rel_close(fd, w[j] * fg[c], 1e-6));
                }
            }
        }
    }

    #[test]
    fn lq_coupled_flat_grad_matches_brute_force() {
        #[derive(Debug)]
        struct Plain(LqCost);
        impl CostModel for Plain {
            fn summarize(&self, g: &LabelGrid, m: &[DVector<f64>]) -> MeanSummary {
                self.0.summarize(g, m)
            }
            fn running(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64]) -> f64 {
                self.0.running(i, x, s, a)
            }
            fn running_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], o: &mut [f64]) {
                self.0.running_grad_x(i, x, s, a, o)
            }
            fn running_grad_a(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], o: &mut [f64]) {
                self.0.running_grad_a(i, x, s, a, o)
            }
            fn running_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], t: usize, o: &mut [f64]) {
                self.0.running_flat_grad(i, x, s, a, t, o)
            }
            fn terminal(&self, i: usize, x: &[f64], s: &MeanSummary) -> f64 {
                self.0.terminal(i, x, s)
            }
            fn terminal_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, o: &mut [f64]) {
                self.0.terminal_grad_x(i, x, s, o)
            }
            fn terminal_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, t: usize, o: &mut [f64]) {
                self.0.terminal_flat_grad(i, x, s, t, o)
            }
        }
        let dims = Dims { d: 2, m: 2, n: 1 };
        let model = random_model(3, 3, dims);
        let lq = LqCost::new(&model).unwrap();
        let plain = Plain(lq.clone());
        let np = 5;
        let mut rng = noise::stream(4, Domain::Sampling, 0, 0);
        let mut xs = vec![0.0; 3 * np * 2];
        let mut acts = vec![0.0; 3 * np * 2];
        noise::fill_normals(&mut rng, &mut xs);
        noise::fill_normals(&mut rng, &mut acts);
        let means: Vec<DVector<f64>> = (0..3)
            .map(|j| {
                let mut v = DVector::zeros(2);
                for p in 0..np {
                    let k = (j * np + p) * 2;
                    v[0] += xs[k] / np as f64;
                    v[1] += xs[k + 1] / np as f64;
                }
                v
            })
            .collect();
        let s = lq.summarize(&model.grid, &means);
        for t in 0..3 {
            let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
            lq.coupled_running_flat_grad(&model.grid, t, &s, &xs, &acts, np, &mut a);
            plain.coupled_running_flat_grad(&model.grid, t, &s, &xs, &acts, np, &mut b);
            for c in 0..2 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
            let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
            lq.coupled_terminal_flat_grad(&model.grid, t, &s, &xs, np, &mut a);
            plain.coupled_terminal_flat_grad(&model.grid, t, &s, &xs, np, &mut b);
            for c in 0..2 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_initial_condition_is_seeded() {
        let ic = InitialCondition::Gaussian {
            mean: vec![DVector::from_element(1, 1.0); 2],
            cov: vec![DMatrix::from_element(1, 1, 0.04); 2],
        };
        let mut a = vec![0.0; 2 * 4000];
        let mut b = vec![0.0; 2 * 4000];
        ic.sample_into(3, 4000, &mut a);
        ic.sample_into(3, 4000, &mut b);
        assert_eq!(a, b);
        let mean = a[..4000].iter().sum::<f64>() / 4000.0;
        assert!((mean - 1.0).abs() < 4.0 * 0.2 / 4000f64.sqrt());
    }
}

