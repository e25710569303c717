//! Time grids and dense `[time][label][particle][component]` path storage.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `0 = t_0 < … < t_S = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_times(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Bracketing index and linear weight: `t = (1-θ) t_k + θ t_{k+1}`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let s = (t / self.dt()).clamp(0.0, self.n_steps as f64);
        let k = (s.floor() as usize).min(self.n_steps - 1);
        let theta = (s - k as f64).clamp(0.0, 1.0);
        Ok((k, theta))
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && (self.horizon - other.horizon).abs() <= 1e-14 * self.horizon
    }
}

/// Dense array indexed by `(time, label, particle)` holding `width` reals each.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArray {
    n_times: usize,
    n_labels: usize,
    n_particles: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathArray {
    pub fn zeros(n_times: usize, n_labels: usize, n_particles: usize, width: usize) -> Self {
        Self {
            n_times,
            n_labels,
            n_particles,
            width,
            data: vec![0.0; n_times * n_labels * n_particles * width],
        }
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }
    pub fn n_labels(&self) -> usize {
        self.n_labels
    }
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn same_shape(&self, other: &PathArray) -> bool {
        self.n_times == other.n_times
            && self.n_labels == other.n_labels
            && self.n_particles == other.n_particles
            && self.width == other.width
    }

    #[inline]
    fn offset(&self, k: usize, i: usize, p: usize) -> usize {
        ((k * self.n_labels + i) * self.n_particles + p) * self.width
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize, p: usize) -> &[f64] {
        let o = self.offset(k, i, p);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, i: usize, p: usize) -> &mut [f64] {
        let o = self.offset(k, i, p);
        &mut self.data[o..o + self.width]
    }

    /// All particles of one label at one time, contiguous.
    pub fn label_slice(&self, k: usize, i: usize) -> &[f64] {
        let o = self.offset(k, i, 0);
        &self.data[o..o + self.n_particles * self.width]
    }

    pub fn label_slice_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let o = self.offset(k, i, 0);
        let len = self.n_particles * self.width;
        &mut self.data[o..o + len]
    }

    /// Everything at one time, `[label][particle][component]`.
    pub fn time_slice(&self, k: usize) -> &[f64] {
        let len = self.n_labels * self.n_particles * self.width;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn time_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.n_labels * self.n_particles * self.width;
        &mut self.data[k * len..(k + 1) * len]
    }

    /// Read time `k`, write time `k + 1`.
    pub fn step_pair(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let len = self.n_labels * self.n_particles * self.width;
        let (head, tail) = self.data.split_at_mut((k + 1) * len);
        (&head[k * len..], &mut tail[..len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Particle average per label at time `k`.
    pub fn label_mean(&self, k: usize, i: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.width);
        for chunk in self.label_slice(k, i).chunks_exact(self.width) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        acc / self.n_particles as f64
    }

    pub fn label_means(&self, k: usize) -> Vec<DVector<f64>> {
        (0..self.n_labels).map(|i| self.label_mean(k, i)).collect()
    }

    /// Unbiased per-component sample variance per label at time `k`.
    pub fn label_variance(&self, k: usize, i: usize) -> DVector<f64> {
        let mean = self.label_mean(k, i);
        let mut acc = DVector::zeros(self.width);
        for chunk in self.label_slice(k, i).chunks_exact(self.width) {
            for ((a, v), m) in acc.iter_mut().zip(chunk).zip(mean.iter()) {
                *a += (v - m) * (v - m);
            }
        }
        if self.n_particles > 1 {
            acc / (self.n_particles - 1) as f64
        } else {
            acc * 0.0
        }
    }

    pub fn is_finite_at(&self, k: usize) -> bool {
        self.time_slice(k).iter().all(|v| v.is_finite())
    }

    /// `self + s * other`, same shape.
    pub fn axpy(&self, s: f64, other: &PathArray) -> Result<PathArray> {
        if !self.same_shape(other) {
            return Err(Error::shape("path arrays differ in shape"));
        }
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += s * v;
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> PathArray {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// Deterministic per-label trajectories `m[time][label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    pub times: TimeGrid,
    pub m: Vec<Vec<DVector<f64>>>,
}

impl MeanPath {
    pub fn at(&self, k: usize) -> &[DVector<f64>] {
        &self.m[k]
    }

    pub fn n_labels(&self) -> usize {
        self.m.first().map_or(0, |v| v.len())
    }

    /// Empirical label means of an ensemble at every time.
    pub fn from_ensemble(times: TimeGrid, x: &PathArray) -> Self {
        Self {
            times,
            m: (0..x.n_times()).map(|k| x.label_means(k)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &MeanPath) -> f64 {
        self.m
            .iter()
            .zip(&other.m)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).amax()))
            .fold(0.0, f64::max)
    }
}
