//! Triangular Riccati system `K → K̄ → Λ` and the optimal affine feedback.
//!
//! Kernel-valued quantities are handled as block matrices: a field `G(u_i,u_j)`
//! of `r × c` blocks is the `(n·r) × (n·c)` matrix with `G(u_i,u_j)` at block
//! `(i,j)`. Label integrals `∫ … dw` become products with the quadrature
//! weights `Ω = diag(w_j I)` inserted between factors. In this layout the
//! pair-transpose symmetry `K̄(u,v) = K̄(v,u)ᵀ` is plain matrix symmetry.
//!
//! All equations are integrated backward from `T` with classical RK4 on a
//! uniform grid. `K̄` and `Λ` need the earlier unknowns at step midpoints;
//! those come from cubic Hermite interpolation using the right-hand sides
//! as derivatives, which keeps the scheme fourth order.
//!
//! # The `Λ` equation
//!
//! Substituting the ansatz `Y = 2(Kx + ∫K̄m + Λ)` into the adjoint equation
//! and collecting the constant terms gives
//!
//! ```text
//! Λ̇ + Kβ + ∫K̄(u,v)β^v dv + AᵀΛ − MᵀR⁻¹BᵀΛ + ∫G_A(v,u)ᵀΛ^v dv
//!    − ∫ V²(v,u)ᵀ (R^v)⁻¹ (B^v)ᵀ Λ^v dv = 0,      Λ_T = 0,
//! ```
//!
//! with `V²(v,u)ᵀ = K̄(u,v)B^v + G_I(v,u)ᵀ`. This is [`LambdaForm::Standard`].
//! [`LambdaForm::Alternate`] drops `AᵀΛ` and flips the sign of the last
//! integral; it is kept only so the two can be compared. The adjoint
//! residual refinement study and the FBSDE cross-check both pass with the
//! standard form and fail with the alternate one whenever `β ≠ 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::KernelField;
use crate::linalg::{all_finite, symmetrize};
use crate::model::LqModel;
use crate::paths::TimeGrid;

pub const DEFAULT_STEPS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaForm {
    #[default]
    Standard,
    Alternate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedCoefficients {
    pub c_y: Vec<DMatrix<f64>>,
    pub c_x: Vec<DMatrix<f64>>,
    pub phi_x: KernelField<DMatrix<f64>>,
    pub phi_y: KernelField<DMatrix<f64>>,
    pub g_q: KernelField<DMatrix<f64>>,
    pub g_p: KernelField<DMatrix<f64>>,
}

// ---------------------------------------------------------------------------
// block helpers

/// `out = diag(D) · big`, with `D_i` acting on block row `i`.
fn diag_left(diag: &[DMatrix<f64>], big: &DMatrix<f64>) -> DMatrix<f64> {
    let (ro, ri) = diag[0].shape();
    let nc = big.ncols();
    let mut out = DMatrix::zeros(diag.len() * ro, nc);
    for (i, d) in diag.iter().enumerate() {
        let prod = d * big.view((i * ri, 0), (ri, nc));
        out.view_mut((i * ro, 0), (ro, nc)).copy_from(&prod);
    }
    out
}

/// `out = big · diag(D)`
fn diag_right(big: &DMatrix<f64>, diag: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (ri, co) = diag[0].shape();
    let nr = big.nrows();
    let mut out = DMatrix::zeros(nr, diag.len() * co);
    for (j, d) in diag.iter().enumerate() {
        let prod = big.view((0, j * ri), (nr, ri)) * d;
        out.view_mut((0, j * co), (nr, co)).copy_from(&prod);
    }
    out
}

/// Multiply block row `i` (of height `block`) by `w_i`.
fn weight_rows(big: &DMatrix<f64>, block: usize, w: &[f64]) -> DMatrix<f64> {
    let mut out = big.clone();
    for (i, &wi) in w.iter().enumerate() {
        out.rows_mut(i * block, block).scale_mut(wi);
    }
    out
}

fn weight_vec(v: &DVector<f64>, block: usize, w: &[f64]) -> DVector<f64> {
    let mut out = v.clone();
    for (i, &wi) in w.iter().enumerate() {
        out.rows_mut(i * block, block).scale_mut(wi);
    }
    out
}

fn transposed(v: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    v.iter().map(|m| m.transpose()).collect()
}

fn stack(v: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = v.iter().map(|x| x.len()).sum();
    DVector::from_iterator(len, v.iter().flat_map(|x| x.iter().cloned()))
}

fn unstack(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    (0..v.len() / block)
        .map(|i| v.rows(i * block, block).into_owned())
        .collect()
}

/// Model data in block form, shared by the three solves.
struct Blocks {
    d: usize,
    m: usize,
    w: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    at: Vec<DMatrix<f64>>,
    bt: Vec<DMatrix<f64>>,
    r_inv: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    ga: DMatrix<f64>,
    gi: DMatrix<f64>,
    gq: DMatrix<f64>,
    beta: DVector<f64>,
}

impl Blocks {
    fn new(model: &LqModel, gq: &KernelField<DMatrix<f64>>) -> Result<Self> {
        model.check_shapes()?;
        let dims = model.dims();
        Ok(Self {
            d: dims.d,
            m: dims.m,
            w: model.grid.weights().to_vec(),
            a: model.a.clone(),
            at: transposed(&model.a),
            bt: transposed(&model.b),
            r_inv: model.r_inv()?,
            cross: model.cross.clone(),
            q: model.q.clone(),
            ga: model.g_a.to_block(),
            gi: model.g_i.to_block(),
            gq: gq.to_block(),
            beta: stack(&model.beta),
        })
    }

    /// `Mᵢ = BᵢᵀKᵢ + Γᵢ`
    fn m_of(&self, k: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        k.iter()
            .zip(&self.bt)
            .zip(&self.cross)
            .map(|((k, bt), g)| bt * k + g)
            .collect()
    }

    fn k_rhs(&self, i: usize, k: &DMatrix<f64>) -> DMatrix<f64> {
        let m = &self.bt[i] * k + &self.cross[i];
        &self.at[i] * k + k * &self.a[i] + &self.q[i] - m.transpose() * &self.r_inv[i] * m
    }

    fn k_rhs_all(&self, k: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        k.iter().enumerate().map(|(i, k)| self.k_rhs(i, k)).collect()
    }

    /// `V¹ = diag(Bᵀ)K̄ + G_I`, block `(w,v)` equal to `B_wᵀK̄(w,v) + G_I(w,v)`.
    fn v1(&self, kb: &DMatrix<f64>) -> DMatrix<f64> {
        diag_left(&self.bt, kb) + &self.gi
    }

    fn kbar_rhs(&self, k: &[DMatrix<f64>], kb: &DMatrix<f64>) -> DMatrix<f64> {
        let md = self.m_of(k);
        let v1 = self.v1(kb);
        let rv1 = diag_left(&self.r_inv, &v1);
        let half = diag_left(k, &self.ga) + diag_left(&self.at, kb) + kb * weight_rows(&self.ga, self.d, &self.w)
            - diag_left(&transposed(&md), &rv1);
        let mut out = &half + half.transpose() + &self.gq - v1.transpose() * weight_rows(&rv1, self.m, &self.w);
        symmetrize(&mut out);
        out
    }

    fn lambda_rhs(
        &self,
        form: LambdaForm,
        k: &[DMatrix<f64>],
        kb: &DMatrix<f64>,
        lam: &DVector<f64>,
    ) -> DVector<f64> {
        let md = self.m_of(k);
        let d = self.d;
        let n = self.w.len();
        let mut out = DVector::zeros(n * d);
        for i in 0..n {
            let li = lam.rows(i * d, d);
            let bl = &self.bt[i] * li;
            let mut seg = &k[i] * self.beta.rows(i * d, d) - md[i].transpose() * (&self.r_inv[i] * bl);
            if form == LambdaForm::Standard {
                seg += &self.at[i] * li;
            }
            out.rows_mut(i * d, d).copy_from(&seg);
        }
        out += kb * weight_vec(&self.beta, d, &self.w);
        out += self.ga.tr_mul(&weight_vec(lam, d, &self.w));
        // R⁻¹BᵀΛ per label, then the V² integral
        let mut rbl = DVector::zeros(n * self.m);
        for i in 0..n {
            let seg = &self.r_inv[i] * (&self.bt[i] * lam.rows(i * d, d));
            rbl.rows_mut(i * self.m, self.m).copy_from(&seg);
        }
        let coupled = self.v1(kb).tr_mul(&weight_vec(&rbl, self.m, &self.w));
        match form {
            LambdaForm::Standard => out -= coupled,
            LambdaForm::Alternate => out += coupled,
        }
        out
    }
}

/// Hermite midpoint of a path between two nodes `h` apart, given the
/// derivatives along the integration direction at both nodes.
fn hermite_mid(x0: &DMatrix<f64>, x1: &DMatrix<f64>, dx0: &DMatrix<f64>, dx1: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (x0 + x1) * 0.5 + (dx0 - dx1) * (h / 8.0)
}

pub fn derived_coefficients(model: &LqModel) -> Result<DerivedCoefficients> {
    model.check_shapes()?;
    let dims = model.dims();
    let (n, d, m) = (model.n_labels(), dims.d, dims.m);
    let w = model.grid.weights();
    let r_inv = model.r_inv()?;
    let c_y = (0..n)
        .map(|i| model.a[i].transpose() - model.cross[i].transpose() * &r_inv[i] * model.b[i].transpose())
        .collect();
    let c_x = (0..n)
        .map(|i| &model.q[i] - model.cross[i].transpose() * &r_inv[i] * &model.cross[i])
        .collect();
    let expand = |gt: &KernelField<DMatrix<f64>>, q: &[DMatrix<f64>]| {
        let g = gt.to_block();
        let qg = diag_left(q, &g);
        &g * weight_rows(&qg, d, w) - qg - diag_right(&g, q)
    };
    let gq = expand(&model.gt_q, &model.q);
    let gp = expand(&model.gt_p, &model.p);
    let gi = model.g_i.to_block();
    let ga = model.g_a.to_block();
    let rgi = diag_left(&r_inv, &gi);
    let phi_x = &gq
        - diag_left(&transposed(&model.cross), &rgi)
        - diag_right(&rgi.transpose(), &model.cross)
        - gi.transpose() * weight_rows(&rgi, m, w);
    let phi_y = ga.transpose() - diag_right(&rgi.transpose(), &transposed(&model.b));
    Ok(DerivedCoefficients {
        c_y,
        c_x,
        phi_x: KernelField::from_block(n, d, d, &phi_x)?,
        phi_y: KernelField::from_block(n, d, d, &phi_y)?,
        g_q: KernelField::from_block(n, d, d, &gq)?,
        g_p: KernelField::from_block(n, d, d, &gp)?,
    })
}

// ---------------------------------------------------------------------------
// solves

#[derive(Debug, Clone, PartialEq)]
pub struct KPath {
    pub times: TimeGrid,
    /// `[time][label]`
    pub k: Vec<Vec<DMatrix<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbarPath {
    pub times: TimeGrid,
    /// `[time]`, block form
    pub kbar: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    pub times: TimeGrid,
    /// `[time][label]`
    pub lambda: Vec<Vec<DVector<f64>>>,
}

fn blow_up(stage: &'static str, times: &TimeGrid, k: usize) -> Error {
    Error::BlowUp {
        stage,
        time: times.time(k),
    }
}

pub fn solve_k(model: &LqModel, n_steps: usize) -> Result<KPath> {
    let times = TimeGrid::new(model.horizon, n_steps)?;
    let blocks = Blocks::new(model, &KernelField::zeros(model.n_labels(), 0, 0))?;
    let h = times.dt();
    let per_label: Vec<Result<Vec<DMatrix<f64>>>> = (0..model.n_labels())
        .into_par_iter()
        .map(|i| {
            let mut path = vec![DMatrix::zeros(0, 0); n_steps + 1];
            path[n_steps] = model.p[i].clone();
            for k in (0..n_steps).rev() {
                let x = &path[k + 1];
                let k1 = blocks.k_rhs(i, x);
                let k2 = blocks.k_rhs(i, &(x + &k1 * (h / 2.0)));
                let k3 = blocks.k_rhs(i, &(x + &k2 * (h / 2.0)));
                let k4 = blocks.k_rhs(i, &(x + &k3 * h));
                let mut next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                symmetrize(&mut next);
                if !all_finite(&next) {
                    return Err(blow_up("K", &times, k));
                }
                path[k] = next;
            }
            Ok(path)
        })
        .collect();
    let per_label = per_label.into_iter().collect::<Result<Vec<_>>>()?;
    let k = (0..=n_steps)
        .map(|t| per_label.iter().map(|p| p[t].clone()).collect())
        .collect();
    Ok(KPath { times, k })
}

pub fn solve_kbar(model: &LqModel, coeffs: &DerivedCoefficients, kpath: &KPath) -> Result<KbarPath> {
    let blocks = Blocks::new(model, &coeffs.g_q)?;
    let times = kpath.times;
    let s = times.n_steps();
    let h = times.dt();
    let mut kbar = vec![DMatrix::zeros(0, 0); s + 1];
    kbar[s] = coeffs.g_p.to_block();
    for k in (0..s).rev() {
        let (k_start, k_end) = (&kpath.k[k + 1], &kpath.k[k]);
        let (d_start, d_end) = (blocks.k_rhs_all(k_start), blocks.k_rhs_all(k_end));
        let k_mid: Vec<DMatrix<f64>> = (0..k_start.len())
            .map(|i| {
                let mut m = hermite_mid(&k_start[i], &k_end[i], &d_start[i], &d_end[i], h);
                symmetrize(&mut m);
                m
            })
            .collect();
        let x = &kbar[k + 1];
        let k1 = blocks.kbar_rhs(k_start, x);
        let k2 = blocks.kbar_rhs(&k_mid, &(x + &k1 * (h / 2.0)));
        let k3 = blocks.kbar_rhs(&k_mid, &(x + &k2 * (h / 2.0)));
        let k4 = blocks.kbar_rhs(k_end, &(x + &k3 * h));
        let mut next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        symmetrize(&mut next);
        if !all_finite(&next) {
            return Err(blow_up("Kbar", &times, k));
        }
        kbar[k] = next;
    }
    Ok(KbarPath { times, kbar })
}

pub fn solve_lambda(
    model: &LqModel,
    coeffs: &DerivedCoefficients,
    kpath: &KPath,
    kbar: &KbarPath,
    form: LambdaForm,
) -> Result<LambdaPath> {
    if !kpath.times.same_as(&kbar.times) {
        return Err(Error::invalid("K and Kbar paths live on different time grids"));
    }
    let blocks = Blocks::new(model, &coeffs.g_q)?;
    let times = kpath.times;
    let s = times.n_steps();
    let h = times.dt();
    let d = blocks.d;
    let nd = model.n_labels() * d;
    let mut lam = vec![DVector::zeros(nd); s + 1];
    for k in (0..s).rev() {
        let (k_start, k_end) = (&kpath.k[k + 1], &kpath.k[k]);
        let (d_start, d_end) = (blocks.k_rhs_all(k_start), blocks.k_rhs_all(k_end));
        let k_mid: Vec<DMatrix<f64>> = (0..k_start.len())
            .map(|i| hermite_mid(&k_start[i], &k_end[i], &d_start[i], &d_end[i], h))
            .collect();
        let (kb_start, kb_end) = (&kbar.kbar[k + 1], &kbar.kbar[k]);
        let kb_mid = hermite_mid(
            kb_start,
            kb_end,
            &blocks.kbar_rhs(k_start, kb_start),
            &blocks.kbar_rhs(k_end, kb_end),
            h,
        );
        let x = &lam[k + 1];
        let k1 = blocks.lambda_rhs(form, k_start, kb_start, x);
        let k2 = blocks.lambda_rhs(form, &k_mid, &kb_mid, &(x + &k1 * (h / 2.0)));
        let k3 = blocks.lambda_rhs(form, &k_mid, &kb_mid, &(x + &k2 * (h / 2.0)));
        let k4 = blocks.lambda_rhs(form, k_end, kb_end, &(x + &k3 * h));
        let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(blow_up("Lambda", &times, k));
        }
        lam[k] = next;
    }
    Ok(LambdaPath {
        times,
        lambda: lam.iter().map(|v| unstack(v, d)).collect(),
    })
}

/// Time paths of `K`, `K̄` and `Λ` together with the model they solve.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub times: TimeGrid,
    pub k: Vec<Vec<DMatrix<f64>>>,
    /// block form per time
    pub kbar: Vec<DMatrix<f64>>,
    pub lambda: Vec<Vec<DVector<f64>>>,
    pub coeffs: DerivedCoefficients,
    pub form: LambdaForm,
    pub model: LqModel,
}

pub fn solve_all(model: &LqModel, n_steps: usize) -> Result<RiccatiSolution> {
    solve_all_with(model, n_steps, LambdaForm::Standard)
}

pub fn solve_all_with(model: &LqModel, n_steps: usize, form: LambdaForm) -> Result<RiccatiSolution> {
    let coeffs = derived_coefficients(model)?;
    let kpath = solve_k(model, n_steps)?;
    let kbar = solve_kbar(model, &coeffs, &kpath)?;
    let lambda = solve_lambda(model, &coeffs, &kpath, &kbar, form)?;
    Ok(RiccatiSolution {
        times: kpath.times,
        k: kpath.k,
        kbar: kbar.kbar,
        lambda: lambda.lambda,
        coeffs,
        form,
        model: model.clone(),
    })
}

/// Affine feedback `α_i = L_i x + Σ_j w_j L̄(i,j) m_j + c_i` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGains {
    /// `−R⁻¹(BᵀK + Γ)` per label
    pub l: Vec<DMatrix<f64>>,
    /// block `(i,j)` is `−R_i⁻¹(B_iᵀK̄(i,j) + G_I(i,j))` (unweighted)
    pub lbar: DMatrix<f64>,
    /// `−R⁻¹BᵀΛ` per label
    pub c: Vec<DVector<f64>>,
}

impl FeedbackGains {
    /// Offset `Σ_j w_j L̄(i,j) m_j + c_i` for every label.
    pub fn offsets(&self, weights: &[f64], means: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let d = means.first().map_or(0, |m| m.len());
        let wm = weight_vec(&stack(means), d, weights);
        let off = &self.lbar * wm;
        let m = self.c.first().map_or(0, |c| c.len());
        unstack(&off, m)
            .into_iter()
            .zip(&self.c)
            .map(|(o, c)| o + c)
            .collect()
    }
}

impl RiccatiSolution {
    pub fn n_labels(&self) -> usize {
        self.model.n_labels()
    }

    pub fn kbar_block(&self, k: usize, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.model.dims().d;
        self.kbar[k].view((i * d, j * d), (d, d)).into_owned()
    }

    fn interp<T>(&self, t: f64, get: impl Fn(usize) -> T) -> Result<T>
    where
        T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let (k, th) = self.times.locate(t)?;
        if th == 0.0 {
            return Ok(get(k));
        }
        if th == 1.0 {
            return Ok(get(k + 1));
        }
        Ok(get(k) * (1.0 - th) + get(k + 1) * th)
    }

    pub fn k_at(&self, t: f64, i: usize) -> Result<DMatrix<f64>> {
        self.interp(t, |k| self.k[k][i].clone())
    }

    pub fn kbar_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.interp(t, |k| self.kbar[k].clone())
    }

    pub fn lambda_at(&self, t: f64, i: usize) -> Result<DVector<f64>> {
        self.interp(t, |k| self.lambda[k][i].clone())
    }

    /// `∫K̄(u_i,v)m^v dv` at time `t` for every label.
    pub fn kbar_apply(&self, t: f64, means: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let d = self.model.dims().d;
        if means.len() != self.n_labels() || means.iter().any(|m| m.len() != d) {
            return Err(Error::shape("means do not match the solution"));
        }
        let kb = self.kbar_at(t)?;
        let out = kb * weight_vec(&stack(means), d, self.model.grid.weights());
        Ok(unstack(&out, d))
    }

    pub fn gains(&self, t: f64) -> Result<FeedbackGains> {
        let model = &self.model;
        let r_inv = model.r_inv()?;
        let n = self.n_labels();
        let dims = model.dims();
        let kb = self.kbar_at(t)?;
        let mut l = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for i in 0..n {
            let k = self.k_at(t, i)?;
            l.push(-&r_inv[i] * (model.b[i].tr_mul(&k) + &model.cross[i]));
            c.push(-&r_inv[i] * model.b[i].tr_mul(&self.lambda_at(t, i)?));
        }
        let bt = transposed(&model.b);
        let lbar = -diag_left(&r_inv, &(diag_left(&bt, &kb) + model.g_i.to_block()));
        debug_assert_eq!(lbar.shape(), (n * dims.m, n * dims.d));
        Ok(FeedbackGains { l, lbar, c })
    }

    /// `α = −R⁻¹[(BᵀK+Γ)x + ∫(BᵀK̄(u,v)+G_I(u,v))m^v dv + BᵀΛ]`
    pub fn feedback_control(&self, t: f64, i: usize, x: &DVector<f64>, means: &[DVector<f64>]) -> Result<DVector<f64>> {
        if i >= self.n_labels() {
            return Err(Error::invalid(format!("label {i} out of range")));
        }
        if x.len() != self.model.dims().d {
            return Err(Error::shape("state has the wrong dimension"));
        }
        let g = self.gains(t)?;
        let off = g.offsets(self.model.grid.weights(), means);
        Ok(&g.l[i] * x + &off[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LabelGrid;
    use crate::model::Dims;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(n: usize) -> LqModel {
        LqModel::zeros(LabelGrid::uniform(n).unwrap(), 1.0, Dims { d: 1, m: 1, n: 1 })
    }

    #[test]
    fn zero_kernels_give_zero_coupling_coefficients() {
        let mut m = scalar(3);
        m.q = vec![s(1.0); 3];
        let c = derived_coefficients(&m).unwrap();
        assert!(c.g_q.is_zero());
        assert!(c.phi_x.is_zero());
    }

    #[test]
    fn constant_kernel_g_q() {
        let (q, c) = (0.7, 0.3);
        let mut m = scalar(4);
        m.q = vec![s(q); 4];
        m.gt_q = KernelField::constant(4, s(c));
        let dc = derived_coefficients(&m).unwrap();
        for (_, v) in dc.g_q.iter() {
            assert!((v[(0, 0)] - (q * c * c - 2.0 * q * c)).abs() < 1e-15);
        }
    }

    #[test]
    fn phi_x_constant_interaction() {
        let (g0, r) = (0.4, 2.5);
        let mut m = scalar(5);
        m.q = vec![s(1.0); 5];
        m.r = vec![s(r); 5];
        m.gt_q = KernelField::from_fn(5, |i, j| s(0.1 * (i + j) as f64));
        m.g_i = KernelField::constant(5, s(g0));
        let dc = derived_coefficients(&m).unwrap();
        for ((i, j), v) in dc.phi_x.iter() {
            let want = dc.g_q.get(i, j)[(0, 0)] - g0 * g0 / r;
            assert!((v[(0, 0)] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn phi_y_matches_definition() {
        let mut m = scalar(3);
        m.g_a = KernelField::from_fn(3, |i, j| s((i as f64) - 0.5 * j as f64));
        m.g_i = KernelField::from_fn(3, |i, j| s(0.2 * (1 + i * j) as f64));
        m.b = (0..3).map(|i| s(1.0 + i as f64)).collect();
        m.r = (0..3).map(|i| s(2.0 + i as f64)).collect();
        let dc = derived_coefficients(&m).unwrap();
        for ((u, v), val) in dc.phi_y.iter() {
            let want = m.g_a.get(v, u)[(0, 0)] - m.g_i.get(v, u)[(0, 0)] * m.b[v][(0, 0)] / m.r[v][(0, 0)];
            assert!((val[(0, 0)] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn k_closed_form() {
        let mut m = scalar(1);
        m.b = vec![s(1.0)];
        m.p = vec![s(1.0)];
        let k = solve_k(&m, 2000).unwrap();
        assert!((k.k[0][0][(0, 0)] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn k_linear_without_feedback() {
        let mut m = scalar(2);
        m.q = vec![s(0.3), s(1.2)];
        m.p = vec![s(0.5), s(2.0)];
        let k = solve_k(&m, 50).unwrap();
        for (t, ks) in k.k.iter().enumerate() {
            for i in 0..2 {
                let want = m.p[i][(0, 0)] + m.q[i][(0, 0)] * (1.0 - k.times.time(t));
                assert!((ks[i][(0, 0)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_zero_when_no_cost() {
        let mut m = scalar(2);
        m.a = vec![s(0.4); 2];
        m.b = vec![s(1.0); 2];
        let k = solve_k(&m, 20).unwrap();
        assert!(k.k.iter().flatten().all(|v| v[(0, 0)] == 0.0));
    }

    #[test]
    fn kbar_zero_without_interactions() {
        let mut m = scalar(3);
        m.a = vec![s(0.2); 3];
        m.b = vec![s(1.0); 3];
        m.q = vec![s(1.0); 3];
        m.p = vec![s(1.0); 3];
        let sol = solve_all(&m, 40).unwrap();
        assert!(sol.kbar.iter().all(|k| k.amax() <= 1e-12));
        assert!(sol.lambda.iter().flatten().all(|l| l.amax() <= 1e-12));
    }

    #[test]
    fn kbar_reduced_linear_ode() {
        let mut m = scalar(3);
        m.q = vec![s(1.0); 3];
        m.gt_q = KernelField::constant(3, s(1.0));
        m.horizon = 1.7;
        let sol = solve_all(&m, 40).unwrap();
        for (i, j) in [(0, 0), (1, 2), (2, 0)] {
            assert!((sol.kbar_block(0, i, j)[(0, 0)] + 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_without_drift_constant() {
        let mut m = scalar(2);
        m.a = vec![s(0.3); 2];
        m.b = vec![s(1.0); 2];
        m.q = vec![s(1.0); 2];
        m.g_a = KernelField::constant(2, s(0.5));
        m.gt_q = KernelField::constant(2, s(0.4));
        m.g_i = KernelField::constant(2, s(0.2));
        let sol = solve_all(&m, 40).unwrap();
        assert!(sol.lambda.iter().flatten().all(|l| l.amax() <= 1e-12));
    }

    #[test]
    fn lambda_linear_growth() {
        let mut m = scalar(2);
        m.p = vec![s(0.8), s(1.5)];
        m.beta = vec![DVector::from_element(1, 0.5), DVector::from_element(1, -1.0)];
        let sol = solve_all(&m, 40).unwrap();
        for (t, ls) in sol.lambda.iter().enumerate() {
            for i in 0..2 {
                let want = m.p[i][(0, 0)] * m.beta[i][0] * (1.0 - sol.times.time(t));
                assert!((ls[i][0] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_zero_without_sources() {
        let mut m = scalar(2);
        m.b = vec![s(1.0); 2];
        m.beta = vec![DVector::from_element(1, 2.0); 2];
        let sol = solve_all(&m, 20).unwrap();
        assert!(sol.lambda.iter().flatten().all(|l| l[0] == 0.0));
    }

    #[test]
    fn feedback_examples() {
        let mut m = scalar(1);
        m.b = vec![s(1.0)];
        let sol = solve_all(&m, 10).unwrap();
        let a = sol.feedback_control(0.5, 0, &DVector::from_element(1, 2.0), &[DVector::zeros(1)]).unwrap();
        assert_eq!(a[0], 0.0);
        // K = 0.5 exactly: P = 0.5 with A = B·… chosen so K̇ = 0
        let mut m = scalar(1);
        m.b = vec![s(1.0)];
        m.p = vec![s(0.5)];
        m.q = vec![s(0.25)];
        let sol = solve_all(&m, 10).unwrap();
        assert!((sol.k[0][0][(0, 0)] - 0.5).abs() < 1e-14);
        let a = sol.feedback_control(0.3, 0, &DVector::from_element(1, 2.0), &[DVector::zeros(1)]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-14);
        assert!(sol.feedback_control(1.5, 0, &DVector::zeros(1), &[DVector::zeros(1)]).is_err());
    }
}
