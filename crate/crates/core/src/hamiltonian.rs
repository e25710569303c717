//! `H = b·y + σ:z + f`, its gradients, and its minimizer in the action.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dot, mat_t_vec_acc, norm_sq, operator_norm};
use crate::model::{GenericModel, LqModel, MeanFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPoint {
    pub label: usize,
    pub x: DVector<f64>,
    pub means: Vec<DVector<f64>>,
    pub y: DVector<f64>,
    /// `d × n`
    pub z: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl HamiltonianPoint {
    fn check(&self, model: &GenericModel) -> Result<()> {
        let dims = model.dims;
        let ok = self.label < model.n_labels()
            && self.x.len() == dims.d
            && self.y.len() == dims.d
            && self.z.shape() == (dims.d, dims.n)
            && self.a.len() == dims.m
            && self.means.len() == model.n_labels()
            && self.means.iter().all(|m| m.len() == dims.d);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "hamiltonian point does not match model dims {dims:?} with {} labels",
                model.n_labels()
            )))
        }
    }
}

/// `H` at one point with a precomputed mean frame; `z` is the column-major vectorization.
pub fn h_with_frame(
    model: &GenericModel,
    fr: &MeanFrame,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
) -> f64 {
    let dims = model.dims;
    let mut b = vec![0.0; dims.d];
    let mut s = vec![0.0; dims.d * dims.n];
    model.drift_into(i, x, fr, a, &mut b);
    model.vol_into(i, x, fr, a, &mut s);
    dot(&b, y) + dot(&s, z) + model.cost.running(i, x, &fr.cost, a)
}

/// `∂_a H = b₃ᵀy + σ₃ᵀz + ∂_a f`
#[allow(clippy::too_many_arguments)]
pub fn grad_a_with_frame(
    model: &GenericModel,
    fr: &MeanFrame,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
    out: &mut [f64],
) {
    model.cost.running_grad_a(i, x, &fr.cost, a, out);
    mat_t_vec_acc(&model.b3[i], y, out);
    mat_t_vec_acc(&model.s3[i], z, out);
}

/// `∂_x H = b₂ᵀy + σ₂ᵀz + ∂_x f`
#[allow(clippy::too_many_arguments)]
pub fn grad_x_with_frame(
    model: &GenericModel,
    fr: &MeanFrame,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
    out: &mut [f64],
) {
    model.cost.running_grad_x(i, x, &fr.cost, a, out);
    mat_t_vec_acc(&model.b2[i], y, out);
    mat_t_vec_acc(&model.s2[i], z, out);
}

pub fn eval_h(model: &GenericModel, p: &HamiltonianPoint) -> Result<f64> {
    p.check(model)?;
    let fr = model.frame(&p.means)?;
    Ok(h_with_frame(model, &fr, p.label, p.x.as_slice(), p.y.as_slice(), p.z.as_slice(), p.a.as_slice()))
}

/// `(∂_x H, ∂_a H)`
pub fn grad_h(model: &GenericModel, p: &HamiltonianPoint) -> Result<(DVector<f64>, DVector<f64>)> {
    p.check(model)?;
    let fr = model.frame(&p.means)?;
    let (x, y, z, a) = (p.x.as_slice(), p.y.as_slice(), p.z.as_slice(), p.a.as_slice());
    let mut gx = vec![0.0; model.dims.d];
    let mut ga = vec![0.0; model.dims.m];
    grad_x_with_frame(model, &fr, p.label, x, y, z, a, &mut gx);
    grad_a_with_frame(model, &fr, p.label, x, y, z, a, &mut ga);
    Ok((DVector::from_vec(gx), DVector::from_vec(ga)))
}

/// Closed-form minimizer `â = −½R⁻¹[Bᵀy + 2Γx + 2∫G_I(u,v)μ̄^v dv]`.
///
/// The volatility is uncontrolled in the LQ model, so `z` does not enter.
pub fn minimize_h_lq(
    model: &LqModel,
    i: usize,
    x: &DVector<f64>,
    means: &[DVector<f64>],
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dims = model.dims();
    if i >= model.n_labels() || x.len() != dims.d || y.len() != dims.d || means.len() != model.n_labels() {
        return Err(Error::shape("minimizer arguments do not match the model"));
    }
    let w = model.grid.weights();
    let mut rhs = model.b[i].tr_mul(y) + 2.0 * &model.cross[i] * x;
    for (j, mj) in means.iter().enumerate() {
        rhs += model.g_i.get(i, j) * mj * (2.0 * w[j]);
    }
    let chol = model.r[i]
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid(format!("R is not positive definite at label {i}")))?;
    Ok(chol.solve(&rhs) * -0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub a: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

const MAX_DESCENT_ITERATIONS: usize = 100_000;

/// Gradient descent with Armijo backtracking on `a ↦ H(…, a)`.
#[allow(clippy::too_many_arguments)]
pub fn minimize_with_frame(
    model: &GenericModel,
    fr: &MeanFrame,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tol: f64,
    start: &[f64],
) -> Result<Minimizer> {
    let m = model.dims.m;
    let mut a = start.to_vec();
    let mut g = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut step = 1.0 / model.lambda.max(1e-12);
    let mut h = h_with_frame(model, fr, i, x, y, z, &a);
    for it in 0..MAX_DESCENT_ITERATIONS {
        g.iter_mut().for_each(|v| *v = 0.0);
        grad_a_with_frame(model, fr, i, x, y, z, &a, &mut g);
        let gn2 = norm_sq(&g);
        if gn2.sqrt() <= tol {
            return Ok(Minimizer {
                a: DVector::from_vec(a),
                iterations: it,
                grad_norm: gn2.sqrt(),
            });
        }
        loop {
            for ((t, av), gv) in trial.iter_mut().zip(&a).zip(&g) {
                *t = av - step * gv;
            }
            let ht = h_with_frame(model, fr, i, x, y, z, &trial);
            let mut accept = ht <= h - 0.5 * step * gn2 || step < 1e-300;
            if !accept && (ht - h).abs() <= 1e-12 * (1.0 + h.abs()) {
                // values are within round-off; fall back to gradient decrease
                let mut gt = vec![0.0; m];
                grad_a_with_frame(model, fr, i, x, y, z, &trial, &mut gt);
                accept = norm_sq(&gt) < gn2;
            }
            if accept {
                a.copy_from_slice(&trial);
                h = ht;
                break;
            }
            step *= 0.5;
        }
        step *= 2.0;
    }
    g.iter_mut().for_each(|v| *v = 0.0);
    grad_a_with_frame(model, fr, i, x, y, z, &a, &mut g);
    Err(Error::NonConvergence {
        stage: "hamiltonian minimization",
        iterations: MAX_DESCENT_ITERATIONS,
        last_delta: norm_sq(&g).sqrt(),
    })
}

/// Unique minimizer of `H` in the action, to gradient norm `tol`, starting from zero.
pub fn minimize_h_generic(
    model: &GenericModel,
    i: usize,
    x: &DVector<f64>,
    means: &[DVector<f64>],
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    tol: f64,
) -> Result<Minimizer> {
    let p = HamiltonianPoint {
        label: i,
        x: x.clone(),
        means: means.to_vec(),
        y: y.clone(),
        z: z.clone(),
        a: DVector::zeros(model.dims.m),
    };
    p.check(model)?;
    let fr = model.frame(means)?;
    minimize_with_frame(model, &fr, i, x.as_slice(), y.as_slice(), z.as_slice(), tol, p.a.as_slice())
}

/// Minimizer used inside solvers: the cost's closed form when it has one,
/// descent otherwise. `out` holds the starting point on entry.
#[allow(clippy::too_many_arguments)]
pub fn argmin_action(
    model: &GenericModel,
    fr: &MeanFrame,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tol: f64,
    out: &mut [f64],
) -> Result<()> {
    let m = model.dims.m;
    let mut stack = [0.0; 8];
    let mut heap = Vec::new();
    let lin = if m <= stack.len() {
        &mut stack[..m]
    } else {
        heap.resize(m, 0.0);
        &mut heap[..]
    };
    mat_t_vec_acc(&model.b3[i], y, lin);
    mat_t_vec_acc(&model.s3[i], z, lin);
    if model.cost.argmin_action(i, x, &fr.cost, lin, out) {
        return Ok(());
    }
    let a = minimize_with_frame(model, fr, i, x, y, z, tol, out)?.a;
    out.copy_from_slice(a.as_slice());
    Ok(())
}

/// `(1/λ)(|∂_a f(u,x,μ,β₀)| + ‖b₃(u)‖|y| + ‖σ₃(u)‖|z|) + |β₀|` with spectral norms.
pub fn minimizer_bound(
    model: &GenericModel,
    i: usize,
    x: &DVector<f64>,
    means: &[DVector<f64>],
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    beta0: &DVector<f64>,
) -> Result<f64> {
    let p = HamiltonianPoint {
        label: i,
        x: x.clone(),
        means: means.to_vec(),
        y: y.clone(),
        z: z.clone(),
        a: beta0.clone(),
    };
    p.check(model)?;
    let fr = model.frame(means)?;
    let mut ga = vec![0.0; model.dims.m];
    model.cost.running_grad_a(i, x.as_slice(), &fr.cost, beta0.as_slice(), &mut ga);
    let lhs = norm_sq(&ga).sqrt()
        + operator_norm(&model.b3[i]) * y.norm()
        + operator_norm(&model.s3[i]) * z.norm();
    Ok(lhs / model.lambda + beta0.norm())
}
