//! Label discretization of the agent continuum `(0,1)`.
//!
//! Every integral over labels is a weighted sum over the grid nodes, and
//! every graphon-type interaction is a kernel sampled at node pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One value per grid node.
pub type LabelField<V> = Vec<V>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LabelGrid {
    /// Midpoint grid: `u_i = (i + 1/2)/n`, `w_i = 1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("label grid needs at least one node"));
        }
        let h = 1.0 / n as f64;
        Ok(Self {
            nodes: (0..n).map(|i| (i as f64 + 0.5) * h).collect(),
            weights: vec![h; n],
        })
    }

    /// Arbitrary quadrature rule on `(0,1)`.
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::shape(format!(
                "grid has {} nodes and {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        if nodes.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::invalid("grid nodes must lie strictly inside (0,1)"));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid nodes must be strictly increasing"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("quadrature weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// `Σ_i w_i · values_i`
    pub fn integrate<V: Quadrature>(&self, values: &[V]) -> Result<V> {
        if values.len() != self.len() {
            return Err(Error::shape(format!(
                "field has {} entries, grid has {} nodes",
                values.len(),
                self.len()
            )));
        }
        let mut acc = values[0].zero_like();
        for (v, &w) in values.iter().zip(&self.weights) {
            if v.dims() != acc.dims() {
                return Err(Error::shape("field entries have inconsistent dimensions"));
            }
            acc.add_scaled(w, v);
        }
        Ok(acc)
    }

    /// `out_i = Σ_j w_j · G(u_i,u_j) · m_j`
    pub fn kernel_apply(
        &self,
        kernel: &KernelField<DMatrix<f64>>,
        field: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let n = self.len();
        if kernel.n_labels() != n || field.len() != n {
            return Err(Error::shape(format!(
                "kernel is {0}x{0}, field has {1} entries, grid has {2} nodes",
                kernel.n_labels(),
                field.len(),
                n
            )));
        }
        let rows = kernel.get(0, 0).nrows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = DVector::zeros(rows);
            for (j, m) in field.iter().enumerate() {
                let g = kernel.get(i, j);
                if g.ncols() != m.len() || g.nrows() != rows {
                    return Err(Error::shape(format!(
                        "kernel block ({i},{j}) is {}x{}, field entry has length {}",
                        g.nrows(),
                        g.ncols(),
                        m.len()
                    )));
                }
                acc.gemv(self.weights[j], g, m, 1.0);
            }
            out.push(acc);
        }
        Ok(out)
    }
}

/// One value per ordered node pair, stored row-major: `(i, j) -> i*n + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelField<V> {
    n: usize,
    data: Vec<V>,
}

impl<V: Clone> KernelField<V> {
    pub fn constant(n: usize, value: V) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_vec(n: usize, data: Vec<V>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape(format!(
                "kernel data has {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        Ok(Self { n, data })
    }

    pub fn n_labels(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &V {
        &self.data[i * self.n + j]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut V {
        &mut self.data[i * self.n + j]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &V)> {
        let n = self.n;
        self.data
            .iter()
            .enumerate()
            .map(move |(k, v)| ((k / n, k % n), v))
    }

    pub fn map<W: Clone>(&self, f: impl FnMut(&V) -> W) -> KernelField<W> {
        KernelField {
            n: self.n,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Reindex both arguments: `out(i,j) = self(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.n, |i, j| self.get(perm[i], perm[j]).clone())
    }
}

impl KernelField<DMatrix<f64>> {
    pub fn zeros(n: usize, rows: usize, cols: usize) -> Self {
        Self::constant(n, DMatrix::zeros(rows, cols))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|m| m.iter().all(|&v| v == 0.0))
    }

    /// Assemble the `(n·r) × (n·c)` block matrix whose `(i,j)` block is `self(i,j)`.
    pub fn to_block(&self) -> DMatrix<f64> {
        let (r, c) = self.data.first().map_or((0, 0), |m| m.shape());
        let mut big = DMatrix::zeros(self.n * r, self.n * c);
        for ((i, j), m) in self.iter() {
            big.view_mut((i * r, j * c), (r, c)).copy_from(m);
        }
        big
    }

    pub fn from_block(n: usize, rows: usize, cols: usize, big: &DMatrix<f64>) -> Result<Self> {
        if big.shape() != (n * rows, n * cols) {
            return Err(Error::shape(format!(
                "block matrix is {:?}, expected {:?}",
                big.shape(),
                (n * rows, n * cols)
            )));
        }
        Ok(Self::from_fn(n, |i, j| {
            big.view((i * rows, j * cols), (rows, cols)).into_owned()
        }))
    }
}

/// Values that can be accumulated by quadrature.
pub trait Quadrature: Clone {
    fn zero_like(&self) -> Self;
    fn add_scaled(&mut self, w: f64, other: &Self);
    fn dims(&self) -> (usize, usize);
}

impl Quadrature for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }
}

impl Quadrature for DVector<f64> {
    fn zero_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        self.axpy(w, other, 1.0);
    }
    fn dims(&self) -> (usize, usize) {
        (self.len(), 1)
    }
}

impl Quadrature for DMatrix<f64> {
    fn zero_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += other * w;
    }
    fn dims(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
}
