//! Counter-based Gaussian streams.
//!
//! Every draw is addressed by `(seed, domain, label, particle, step)`: the
//! ChaCha stream id encodes `(label, particle)`, and each step owns a fixed
//! block of keystream words, so a value can be regenerated in isolation and
//! parallel loops produce identical results regardless of scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::paths::{PathArray, TimeGrid};

/// Independent sub-streams derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Brownian = 0x42_524f_574e,
    Initial = 0x49_4e49_5449,
    Sampling = 0x53_414d_504c,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keystream words consumed by one step of `n` normals (Box–Muller pairs, two u64 per pair).
fn words_per_step(n: usize) -> u128 {
    (4 * n.div_ceil(2)) as u128
}

/// Generator positioned at the start of `(label, particle)`'s stream.
pub fn stream(seed: u64, domain: Domain, label: usize, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ domain as u64));
    rng.set_stream(((label as u64) << 32) | (particle as u64 & 0xffff_ffff));
    rng
}

#[inline]
fn uniform_open(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fill `out` with standard normals, consuming exactly `words_per_step(out.len())` words.
pub fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        let u1 = uniform_open(rng);
        let u2 = uniform_open(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// Random access to the normals of one `(label, particle, step)` cell.
pub fn normals_at(
    seed: u64,
    domain: Domain,
    label: usize,
    particle: usize,
    step: usize,
    n: usize,
) -> Vec<f64> {
    let mut rng = stream(seed, domain, label, particle);
    rng.set_word_pos(step as u128 * words_per_step(n));
    let mut out = vec![0.0; n];
    fill_normals(&mut rng, &mut out);
    out
}

/// Brownian increments `ΔW[step][label][particle] ∈ ℝ^n`, each `N(0, Δt I)`.
pub fn brownian_increments(
    seed: u64,
    times: &TimeGrid,
    n_labels: usize,
    n_particles: usize,
    n_noise: usize,
) -> PathArray {
    let steps = times.n_steps();
    let sqrt_dt = times.dt().sqrt();
    let per_cell: Vec<Vec<f64>> = (0..n_labels * n_particles)
        .into_par_iter()
        .map(|cell| {
            let (i, p) = (cell / n_particles, cell % n_particles);
            let mut rng = stream(seed, Domain::Brownian, i, p);
            let mut buf = vec![0.0; steps * n_noise];
            for chunk in buf.chunks_mut(n_noise.max(1)).take(steps) {
                fill_normals(&mut rng, chunk);
                chunk.iter_mut().for_each(|z| *z *= sqrt_dt);
            }
            buf
        })
        .collect();
    let mut dw = PathArray::zeros(steps, n_labels, n_particles, n_noise);
    if n_noise == 0 {
        return dw;
    }
    for (cell, buf) in per_cell.iter().enumerate() {
        let (i, p) = (cell / n_particles, cell % n_particles);
        for k in 0..steps {
            dw.at_mut(k, i, p)
                .copy_from_slice(&buf[k * n_noise..(k + 1) * n_noise]);
        }
    }
    dw
}
