#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nemf::grid::{KernelField, LabelGrid};
use nemf::model::{Dims, InitialCondition, LqModel};

pub fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn block(n: usize, within_a: f64, across: f64, within_b: f64) -> KernelField<DMatrix<f64>> {
    KernelField::from_fn(n, |i, j| {
        s(match (i < n / 2, j < n / 2) {
            (true, true) => within_a,
            (false, false) => within_b,
            _ => across,
        })
    })
}

/// Scalar heterogeneous model with two-community kernels.
pub fn two_community(n: usize) -> LqModel {
    let mut m = LqModel::zeros(LabelGrid::uniform(n).unwrap(), 1.0, Dims { d: 1, m: 1, n: 1 });
    for i in 0..n {
        let u = m.grid.node(i);
        m.beta[i] = DVector::from_element(1, if u < 0.5 { 0.5 } else { -0.3 });
        m.a[i] = s(0.1 - 0.4 * u);
        m.b[i] = s(0.5 + 0.5 * u);
        m.gamma[i] = s(0.6 + 0.4 * u);
        m.q[i] = s(0.5);
        m.r[i] = s(1.0 + u);
        m.p[i] = s(0.5);
    }
    m.g_a = block(n, 0.3, 0.1, 0.2);
    m.gt_q = block(n, 0.4, 0.1, 0.3);
    m.gt_p = KernelField::constant(n, s(0.2));
    m
}

pub fn spread_init(m: &LqModel, var: f64) -> InitialCondition {
    let n = m.n_labels();
    InitialCondition::Gaussian {
        mean: (0..n).map(|i| DVector::from_element(1, 1.0 - m.grid.node(i))).collect(),
        cov: vec![s(var); n],
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, r: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(r, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn psd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let l = rand_mat(rng, d, d, scale);
    &l * l.transpose()
}

/// Gram kernel `G(i,j) = C_iᵀC_j`: pair-transpose symmetric and positive semidefinite.
fn gram_kernel(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> KernelField<DMatrix<f64>> {
    let c: Vec<DMatrix<f64>> = (0..n).map(|_| rand_mat(rng, d, d, scale)).collect();
    KernelField::from_fn(n, |i, j| c[i].transpose() * &c[j])
}

/// Random model satisfying the structural assumptions. Without `cross_terms`
/// the state-action cross term and the interaction kernel are zero, which
/// keeps the running cost convex with the smallest eigenvalue of `R`.
pub fn random_model(seed: u64, n: usize, dims: Dims, cross_terms: bool) -> LqModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Dims { d, m, n: w } = dims;
    let mut model = LqModel::zeros(LabelGrid::uniform(n).unwrap(), 0.5 + rng.random::<f64>(), dims);
    for i in 0..n {
        model.beta[i] = rand_vec(&mut rng, d, 0.5);
        model.a[i] = rand_mat(&mut rng, d, d, 0.4);
        model.b[i] = rand_mat(&mut rng, d, m, 1.0);
        model.gamma[i] = rand_mat(&mut rng, d, w, 0.5);
        model.q[i] = psd(&mut rng, d, 0.8);
        model.r[i] = psd(&mut rng, m, 0.5) + DMatrix::identity(m, m) * (0.5 + rng.random::<f64>());
        model.p[i] = psd(&mut rng, d, 0.8);
        if cross_terms {
            model.cross[i] = rand_mat(&mut rng, m, d, 0.1);
        }
    }
    model.g_a = KernelField::from_fn(n, |_, _| rand_mat(&mut rng, d, d, 0.3));
    model.gt_q = gram_kernel(&mut rng, n, d, 0.4);
    model.gt_p = gram_kernel(&mut rng, n, d, 0.4);
    if cross_terms {
        model.g_i = KernelField::from_fn(n, |_, _| rand_mat(&mut rng, m, d, 0.1));
    }
    model
}
