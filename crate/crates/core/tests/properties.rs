mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{rand_mat, rand_vec, random_model};
use nemf::adjoint::ansatz_y;
use nemf::fbsde::{snorm, snorm_diff, FbsdeState};
use nemf::grid::{KernelField, LabelGrid};
use nemf::hamiltonian::{eval_h, grad_h, minimize_h_generic, minimize_h_lq, HamiltonianPoint};
use nemf::model::{lq_as_generic, sampled_convexity_gap, validate_lq, CostModel, Dims, InitialCondition, MeanSummary};
use nemf::paths::TimeGrid;
use nemf::riccati::solve_all;
use nemf::simulate::{propagate_means, simulate_closed_loop};

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..=2, 1usize..=2, 1usize..=2).prop_map(|(d, m, n)| Dims { d, m, n })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues.min()
}

#[derive(Debug)]
struct Shifted {
    inner: Arc<dyn CostModel>,
    c: f64,
}

impl CostModel for Shifted {
    fn summarize(&self, grid: &LabelGrid, means: &[DVector<f64>]) -> MeanSummary {
        self.inner.summarize(grid, means)
    }
    fn running(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64]) -> f64 {
        self.inner.running(i, x, s, a) + self.c
    }
    fn running_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]) {
        self.inner.running_grad_x(i, x, s, a, out)
    }
    fn running_grad_a(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], out: &mut [f64]) {
        self.inner.running_grad_a(i, x, s, a, out)
    }
    fn running_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, a: &[f64], t: usize, out: &mut [f64]) {
        self.inner.running_flat_grad(i, x, s, a, t, out)
    }
    fn terminal(&self, i: usize, x: &[f64], s: &MeanSummary) -> f64 {
        self.inner.terminal(i, x, s)
    }
    fn terminal_grad_x(&self, i: usize, x: &[f64], s: &MeanSummary, out: &mut [f64]) {
        self.inner.terminal_grad_x(i, x, s, out)
    }
    fn terminal_flat_grad(&self, i: usize, x: &[f64], s: &MeanSummary, t: usize, out: &mut [f64]) {
        self.inner.terminal_flat_grad(i, x, s, t, out)
    }
}

struct Point {
    i: usize,
    x: DVector<f64>,
    means: Vec<DVector<f64>>,
    y: DVector<f64>,
    z: DMatrix<f64>,
    a: DVector<f64>,
}

fn random_point(seed: u64, n: usize, dims: Dims) -> Point {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Point {
        i: (seed as usize) % n,
        x: rand_vec(&mut rng, dims.d, 2.0),
        means: (0..n).map(|_| rand_vec(&mut rng, dims.d, 2.0)).collect(),
        y: rand_vec(&mut rng, dims.d, 2.0),
        z: rand_mat(&mut rng, dims.d, dims.n, 2.0),
        a: rand_vec(&mut rng, dims.m, 2.0),
    }
}

fn hp(p: &Point, a: &DVector<f64>) -> HamiltonianPoint {
    HamiltonianPoint {
        label: p.i,
        x: p.x.clone(),
        means: p.means.clone(),
        y: p.y.clone(),
        z: p.z.clone(),
        a: a.clone(),
    }
}

fn constant_init(n: usize, d: usize, seed: u64) -> InitialCondition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InitialCondition::Gaussian {
        mean: (0..n).map(|_| rand_vec(&mut rng, d, 1.0)).collect(),
        cov: vec![DMatrix::identity(d, d) * 0.1; n],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn integrate_is_linear_on_dyadic_grids(
        log_n in 0u32..5,
        vals in prop::collection::vec((-64i32..64, -64i32..64), 16),
        s in -8i32..8,
        t in -8i32..8,
    ) {
        let n = 1usize << log_n;
        let grid = LabelGrid::uniform(n).unwrap();
        let a: Vec<f64> = vals[..n].iter().map(|v| v.0 as f64).collect();
        let b: Vec<f64> = vals[..n].iter().map(|v| v.1 as f64).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s as f64 * x + t as f64 * y).collect();
        let lhs = grid.integrate(&mix).unwrap();
        let rhs = s as f64 * grid.integrate(&a).unwrap() + t as f64 * grid.integrate(&b).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn rank_one_kernel_factorizes(n in 1usize..7, d in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = LabelGrid::uniform(n).unwrap();
        let g: Vec<DVector<f64>> = (0..n).map(|_| rand_vec(&mut rng, d, 1.0)).collect();
        let h: Vec<DVector<f64>> = (0..n).map(|_| rand_vec(&mut rng, d, 1.0)).collect();
        let m: Vec<DVector<f64>> = (0..n).map(|_| rand_vec(&mut rng, d, 1.0)).collect();
        let kernel = KernelField::from_fn(n, |i, j| &g[i] * h[j].transpose());
        let out = grid.kernel_apply(&kernel, &m).unwrap();
        let inner: Vec<f64> = (0..n).map(|j| h[j].dot(&m[j])).collect();
        let c = grid.integrate(&inner).unwrap();
        for i in 0..n {
            let want = &g[i] * c;
            prop_assert!((&out[i] - &want).amax() <= 1e-13 * (1.0 + want.amax()));
        }
    }

    #[test]
    fn validated_models_are_convex(seed: u64, n in 1usize..5, dims in dims(), cross: bool) {
        let model = random_model(seed, n, dims, cross);
        let report = validate_lq(&model).unwrap();
        if report.pass {
            let g = lq_as_generic(&model).unwrap();
            let gap = sampled_convexity_gap(&g, report.lambda_candidate, 200, seed ^ 0x5eed);
            prop_assert!(gap >= -1e-9, "gap {gap}");
        }
    }

    #[test]
    fn generic_cost_matches_lq(seed: u64, n in 1usize..5, dims in dims()) {
        let model = random_model(seed, n, dims, true);
        let g = lq_as_generic(&model).unwrap();
        let p = random_point(seed, n, dims);
        let s = g.cost.summarize(&g.grid, &p.means);
        let run = g.cost.running(p.i, p.x.as_slice(), &s, p.a.as_slice());
        let want = model.running_cost(p.i, &p.x, &p.means, &p.a);
        prop_assert!((run - want).abs() <= 1e-12 * (1.0 + want.abs()));
        let term = g.cost.terminal(p.i, p.x.as_slice(), &s);
        let want = model.terminal_cost(p.i, &p.x, &p.means);
        prop_assert!((term - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn hamiltonian_is_strongly_convex_at_minimizer(seed: u64, n in 1usize..4, dims in dims()) {
        let model = random_model(seed, n, dims, false);
        let report = validate_lq(&model).unwrap();
        prop_assume!(report.pass);
        let g = lq_as_generic(&model).unwrap();
        let p = random_point(seed, n, dims);
        let hat = minimize_h_lq(&model, p.i, &p.x, &p.means, &p.y).unwrap();
        let h_hat = eval_h(&g, &hp(&p, &hat)).unwrap();
        let h_a = eval_h(&g, &hp(&p, &p.a)).unwrap();
        let lam = report.lambda_candidate;
        prop_assert!(h_a - h_hat >= lam * (&p.a - &hat).norm_squared() - 1e-9 * (1.0 + h_a.abs()));
    }

    #[test]
    fn hamiltonian_gradient_matches_differences(seed: u64, n in 1usize..4, dims in dims()) {
        let model = random_model(seed, n, dims, true);
        let g = lq_as_generic(&model).unwrap();
        let p = random_point(seed, n, dims);
        let (gx, ga) = grad_h(&g, &hp(&p, &p.a)).unwrap();
        let h = 1e-5;
        for k in 0..dims.d {
            let mut q = hp(&p, &p.a);
            q.x[k] += h;
            let up = eval_h(&g, &q).unwrap();
            q.x[k] -= 2.0 * h;
            let down = eval_h(&g, &q).unwrap();
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - gx[k]).abs() <= 1e-6 * (1.0 + gx[k].abs()), "x{k}: {fd} vs {}", gx[k]);
        }
        for k in 0..dims.m {
            let mut q = hp(&p, &p.a);
            q.a[k] += h;
            let up = eval_h(&g, &q).unwrap();
            q.a[k] -= 2.0 * h;
            let down = eval_h(&g, &q).unwrap();
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - ga[k]).abs() <= 1e-6 * (1.0 + ga[k].abs()), "a{k}: {fd} vs {}", ga[k]);
        }
    }

    #[test]
    fn minimizer_ignores_constant_shift(seed: u64, n in 1usize..4, dims in dims(), c in -100.0f64..100.0) {
        let model = random_model(seed, n, dims, false);
        prop_assume!(validate_lq(&model).unwrap().pass);
        let g = lq_as_generic(&model).unwrap();
        let mut shifted = g.clone();
        shifted.cost = Arc::new(Shifted { inner: g.cost.clone(), c });
        let p = random_point(seed, n, dims);
        let a0 = minimize_h_generic(&g, p.i, &p.x, &p.means, &p.y, &p.z, 1e-8).unwrap().a;
        let a1 = minimize_h_generic(&shifted, p.i, &p.x, &p.means, &p.y, &p.z, 1e-8).unwrap().a;
        let exact = minimize_h_lq(&model, p.i, &p.x, &p.means, &p.y).unwrap();
        prop_assert!((&a0 - &a1).amax() <= 1e-6 * (1.0 + exact.amax()));
        prop_assert!((&a1 - &exact).amax() <= 1e-6 * (1.0 + exact.amax()));
    }

    #[test]
    fn riccati_terminal_conditions_and_symmetry(seed: u64, n in 1usize..5, dims in dims()) {
        let model = random_model(seed, n, dims, true);
        let sol = solve_all(&model, 50).unwrap();
        let s = sol.times.n_steps();
        for i in 0..n {
            prop_assert_eq!(&sol.k[s][i], &model.p[i]);
            prop_assert!(sol.lambda[s][i].iter().all(|v| *v == 0.0));
        }
        prop_assert_eq!(&sol.kbar[s], &sol.coeffs.g_p.to_block());
        for k in 0..=s {
            for i in 0..n {
                let kk = &sol.k[k][i];
                prop_assert!(max_abs(&(kk - kk.transpose())) <= 1e-10 * (1.0 + max_abs(kk)));
            }
            let kb = &sol.kbar[k];
            prop_assert!(max_abs(&(kb - kb.transpose())) <= 1e-10 * (1.0 + max_abs(kb)));
        }
    }

    #[test]
    fn riccati_k_is_psd_without_cross_term(seed: u64, n in 1usize..4, dims in dims()) {
        let model = random_model(seed, n, dims, false);
        let sol = solve_all(&model, 50).unwrap();
        for ks in &sol.k {
            for kk in ks {
                prop_assert!(min_eig(kk) >= -1e-9 * (1.0 + max_abs(kk)));
            }
        }
    }

    #[test]
    fn riccati_is_permutation_equivariant(seed: u64, n in 2usize..5, dims in dims()) {
        let model = random_model(seed, n, dims, true);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + (seed as usize) % (n - 1));
        perm.swap(0, n - 1);
        let a = solve_all(&model, 40).unwrap();
        let b = solve_all(&model.permuted(&perm), 40).unwrap();
        let d = dims.d;
        for k in 0..=a.times.n_steps() {
            for i in 0..n {
                let pi = perm[i];
                let scale = 1.0 + max_abs(&a.k[k][pi]);
                prop_assert!(max_abs(&(&b.k[k][i] - &a.k[k][pi])) <= 1e-12 * scale);
                prop_assert!((&b.lambda[k][i] - &a.lambda[k][pi]).amax() <= 1e-12 * (1.0 + a.lambda[k][pi].amax()));
                for j in 0..n {
                    let pj = perm[j];
                    let bb = b.kbar[k].view((i * d, j * d), (d, d));
                    let aa = a.kbar[k].view((pi * d, pj * d), (d, d));
                    prop_assert!((bb - aa).amax() <= 1e-12 * (1.0 + max_abs(&a.kbar[k])));
                }
            }
        }
    }

    #[test]
    fn ansatz_is_affine(seed: u64, n in 1usize..4, dims in dims(), lam in 0.0f64..1.0, t in 0.0f64..1.0) {
        let model = random_model(seed, n, dims, true);
        let sol = solve_all(&model, 40).unwrap();
        let t = t * model.horizon;
        let p = random_point(seed, n, dims);
        let q = random_point(seed.wrapping_add(1), n, dims);
        let x = &p.x * lam + &q.x * (1.0 - lam);
        let means: Vec<DVector<f64>> = p.means.iter().zip(&q.means).map(|(a, b)| a * lam + b * (1.0 - lam)).collect();
        let y = ansatz_y(&sol, t, p.i, &x, &means).unwrap();
        let want = ansatz_y(&sol, t, p.i, &p.x, &p.means).unwrap() * lam
            + ansatz_y(&sol, t, p.i, &q.x, &q.means).unwrap() * (1.0 - lam);
        prop_assert!((&y - &want).amax() <= 1e-12 * (1.0 + want.amax()));
    }

    #[test]
    fn snorm_is_a_seminorm(seed: u64, n in 1usize..4, np in 1usize..5, c in -3.0f64..3.0) {
        let times = TimeGrid::new(1.0, 4).unwrap();
        let grid = LabelGrid::uniform(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut s = FbsdeState::zeros(times, n, np, 2, 1, 1);
            for arr in [&mut s.x, &mut s.y, &mut s.z, &mut s.alpha] {
                for v in arr.as_mut_slice() {
                    *v = rand_vec(&mut rng, 1, 1.0)[0];
                }
            }
            s
        };
        let a = draw();
        let b = draw();
        let na = snorm(&grid, &a).unwrap();
        let nb = snorm(&grid, &b).unwrap();
        prop_assert!(na >= 0.0);
        let mut scaled = a.clone();
        for arr in [&mut scaled.x, &mut scaled.y, &mut scaled.z, &mut scaled.alpha] {
            arr.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        }
        prop_assert!((snorm(&grid, &scaled).unwrap() - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
        let mut sum = a.clone();
        for (dst, src) in [(&mut sum.x, &b.x), (&mut sum.y, &b.y), (&mut sum.z, &b.z), (&mut sum.alpha, &b.alpha)] {
            dst.as_mut_slice().iter_mut().zip(src.as_slice()).for_each(|(u, v)| *u += v);
        }
        prop_assert!(snorm(&grid, &sum).unwrap() <= na + nb + 1e-12);
        prop_assert!(snorm_diff(&grid, &a, &a).unwrap() == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_reproducible_and_prefix_stable(seed: u64, n in 1usize..4, dims in dims()) {
        let model = random_model(seed, n, dims, true);
        let sol = solve_all(&model, 40).unwrap();
        let times = TimeGrid::new(model.horizon, 10).unwrap();
        let init = constant_init(n, dims.d, seed);
        let means = propagate_means(&sol, &times, &init.means()).unwrap();
        let a = simulate_closed_loop(&sol, &means, &init, 6, seed).unwrap();
        let b = simulate_closed_loop(&sol, &means, &init, 6, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let wide = simulate_closed_loop(&sol, &means, &init, 12, seed).unwrap();
        for k in 0..times.n_times() {
            for i in 0..n {
                for p in 0..6 {
                    prop_assert_eq!(a.x.at(k, i, p), wide.x.at(k, i, p));
                }
            }
        }
    }
}
