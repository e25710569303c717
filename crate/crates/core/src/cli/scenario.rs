//! TOML scenario files.
//!
//! Coefficients are constants, per-label tables, polynomials in the label or
//! two-community splits; kernels additionally allow separable `g(u)h(v)` and
//! block-community forms. A number `c` stands for `c·I` (rectangular when the
//! target is not square), a flat list for a diagonal matrix or a vector, and a
//! nested list for a full matrix given row by row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::ContinuationSchedule;
use crate::grid::{KernelField, LabelGrid};
use crate::model::{Dims, InitialCondition, LqModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    List(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl Value {
    fn matrix(&self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        let m = match self {
            Value::Number(c) => DMatrix::identity(rows, cols) * *c,
            Value::List(v) if cols == 1 && v.len() == rows => DMatrix::from_column_slice(rows, 1, v),
            Value::List(v) if rows == cols && v.len() == rows => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Value::Rows(r) if r.len() == rows && r.iter().all(|row| row.len() == cols) => {
                DMatrix::from_fn(rows, cols, |i, j| r[i][j])
            }
            _ => return Err(scenario(format!("{what}: value does not fit a {rows}x{cols} shape"))),
        };
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(scenario(format!("{what}: non-finite entry")))
        }
    }

    fn scaled(&self, s: f64) -> Value {
        match self {
            Value::Number(c) => Value::Number(c * s),
            Value::List(v) => Value::List(v.iter().map(|x| x * s).collect()),
            Value::Rows(r) => Value::Rows(r.iter().map(|row| row.iter().map(|x| x * s).collect()).collect()),
        }
    }
}

fn scenario(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

fn poly(c: &[f64], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * u + a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Community {
    /// `values[0]` below `split`, `values[1]` above
    Communities { split: f64, values: [Value; 2] },
}

/// Per-label coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Field {
    Constant(Value),
    Table { table: Vec<Value> },
    /// `(c₀ + c₁u + c₂u² + …)·value`, `value` defaulting to `1`
    Poly {
        poly: Vec<f64>,
        #[serde(default)]
        times: Option<Value>,
    },
    Split(Community),
}

impl Field {
    fn sample(&self, grid: &LabelGrid, rows: usize, cols: usize, what: &str) -> Result<Vec<DMatrix<f64>>> {
        (0..grid.len())
            .map(|i| {
                let u = grid.node(i);
                match self {
                    Field::Constant(v) => v.matrix(rows, cols, what),
                    Field::Table { table } => {
                        if table.len() != grid.len() {
                            return Err(scenario(format!(
                                "{what}: table has {} entries for {} labels",
                                table.len(),
                                grid.len()
                            )));
                        }
                        table[i].matrix(rows, cols, what)
                    }
                    Field::Poly { poly: c, times } => {
                        times.as_ref().unwrap_or(&Value::Number(1.0)).scaled(poly(c, u)).matrix(rows, cols, what)
                    }
                    Field::Split(Community::Communities { split, values }) => {
                        values[usize::from(u >= *split)].matrix(rows, cols, what)
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedKernel {
    /// `g(u)h(v)·value` with polynomial `g`, `h`
    Separable {
        g: Vec<f64>,
        h: Vec<f64>,
        #[serde(default)]
        times: Option<Value>,
    },
    /// `within[0]` on the lower block, `within[1]` on the upper block, `across` elsewhere
    Communities { split: f64, within: [Value; 2], across: Value },
    /// `n × n` table of values
    Table(Vec<Vec<Value>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kernel {
    Constant(Value),
    Named(NamedKernel),
}

impl Kernel {
    fn sample(&self, grid: &LabelGrid, rows: usize, cols: usize, what: &str) -> Result<KernelField<DMatrix<f64>>> {
        let n = grid.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (u, v) = (grid.node(i), grid.node(j));
                out.push(match self {
                    Kernel::Constant(c) => c.matrix(rows, cols, what)?,
                    Kernel::Named(NamedKernel::Separable { g, h, times }) => times
                        .as_ref()
                        .unwrap_or(&Value::Number(1.0))
                        .scaled(poly(g, u) * poly(h, v))
                        .matrix(rows, cols, what)?,
                    Kernel::Named(NamedKernel::Communities { split, within, across }) => {
                        match (u >= *split, v >= *split) {
                            (false, false) => within[0].matrix(rows, cols, what)?,
                            (true, true) => within[1].matrix(rows, cols, what)?,
                            _ => across.matrix(rows, cols, what)?,
                        }
                    }
                    Kernel::Named(NamedKernel::Table(t)) => {
                        if t.len() != n || t.iter().any(|r| r.len() != n) {
                            return Err(scenario(format!("{what}: table must be {n}x{n}")));
                        }
                        t[i][j].matrix(rows, cols, what)?
                    }
                });
            }
        }
        KernelField::from_vec(n, out)
    }
}

fn zero_field() -> Field {
    Field::Constant(Value::Number(0.0))
}

fn unit_field() -> Field {
    Field::Constant(Value::Number(1.0))
}

fn zero_kernel() -> Kernel {
    Kernel::Constant(Value::Number(0.0))
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub horizon: f64,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default = "one")]
    pub m: usize,
    /// Brownian dimension
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "zero_field")]
    pub beta: Field,
    #[serde(default = "zero_field")]
    pub a: Field,
    #[serde(default = "zero_field")]
    pub b: Field,
    #[serde(default = "zero_field")]
    pub gamma: Field,
    #[serde(default = "zero_field")]
    pub q: Field,
    #[serde(default = "unit_field")]
    pub r: Field,
    #[serde(default = "zero_field")]
    pub cross: Field,
    #[serde(default = "zero_field")]
    pub p: Field,
    #[serde(default = "zero_kernel")]
    pub g_a: Kernel,
    #[serde(default = "zero_kernel")]
    pub gt_q: Kernel,
    #[serde(default = "zero_kernel")]
    pub gt_p: Kernel,
    #[serde(default = "zero_kernel")]
    pub g_i: Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: Field,
    /// deterministic start when absent
    #[serde(default)]
    pub cov: Option<Field>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub n_labels: usize,
    pub n_time_steps: usize,
    pub n_particles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Riccati steps; defaults to `n_time_steps`
    #[serde(default)]
    pub riccati_steps: Option<usize>,
    #[serde(default)]
    pub fbsde: ContinuationSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSpec {
    pub n_directions: usize,
    pub direction_magnitude: f64,
    pub n_perturbations: usize,
    pub probe_magnitude: f64,
    pub fd_eps: f64,
    pub n_bound_samples: usize,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            n_directions: 10,
            direction_magnitude: 0.25,
            n_perturbations: 20,
            probe_magnitude: 0.5,
            fd_eps: 0.1,
            n_bound_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    /// particles per label written to `ensemble.csv` by `simulate`; none when zero
    pub ensemble_particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub initial: InitialSpec,
    pub numerics: Numerics,
    #[serde(default)]
    pub check: CheckSpec,
    #[serde(default)]
    pub outputs: Outputs,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub labels: Option<usize>,
    pub steps: Option<usize>,
    pub particles: Option<usize>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| scenario(e.to_string()))
    }

    pub fn apply(&mut self, o: Overrides) {
        let n = &mut self.numerics;
        if let Some(v) = o.seed {
            n.seed = v;
        }
        if let Some(v) = o.labels {
            n.n_labels = v;
        }
        if let Some(v) = o.steps {
            n.n_time_steps = v;
        }
        if let Some(v) = o.particles {
            n.n_particles = v;
        }
    }

    pub fn check_counts(&self) -> Result<()> {
        let n = &self.numerics;
        let m = &self.model;
        if n.n_labels == 0 || n.n_time_steps == 0 || n.n_particles == 0 || n.riccati_steps == Some(0) {
            return Err(scenario("label, step and particle counts must be positive"));
        }
        if m.d == 0 || m.m == 0 || m.n == 0 {
            return Err(scenario("dimensions must be positive"));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(scenario("horizon must be positive"));
        }
        n.fbsde.validate()
    }

    pub fn riccati_steps(&self) -> usize {
        self.numerics.riccati_steps.unwrap_or(self.numerics.n_time_steps)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.model.d,
            m: self.model.m,
            n: self.model.n,
        }
    }

    pub fn grid(&self) -> Result<LabelGrid> {
        LabelGrid::uniform(self.numerics.n_labels)
    }

    pub fn lq_model(&self) -> Result<LqModel> {
        self.check_counts()?;
        let grid = self.grid()?;
        let Dims { d, m, n } = self.dims();
        let s = &self.model;
        let model = LqModel {
            horizon: s.horizon,
            beta: s
                .beta
                .sample(&grid, d, 1, "beta")?
                .into_iter()
                .map(|b| b.column(0).into_owned())
                .collect(),
            a: s.a.sample(&grid, d, d, "a")?,
            b: s.b.sample(&grid, d, m, "b")?,
            gamma: s.gamma.sample(&grid, d, n, "gamma")?,
            q: s.q.sample(&grid, d, d, "q")?,
            r: s.r.sample(&grid, m, m, "r")?,
            cross: s.cross.sample(&grid, m, d, "cross")?,
            p: s.p.sample(&grid, d, d, "p")?,
            g_a: s.g_a.sample(&grid, d, d, "g_a")?,
            gt_q: s.gt_q.sample(&grid, d, d, "gt_q")?,
            gt_p: s.gt_p.sample(&grid, d, d, "gt_p")?,
            g_i: s.g_i.sample(&grid, m, d, "g_i")?,
            grid,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn initial(&self) -> Result<InitialCondition> {
        let grid = self.grid()?;
        let d = self.model.d;
        let mean: Vec<DVector<f64>> = self
            .initial
            .mean
            .sample(&grid, d, 1, "initial mean")?
            .into_iter()
            .map(|m| m.column(0).into_owned())
            .collect();
        let init = match &self.initial.cov {
            None => InitialCondition::Constant(mean),
            Some(c) => InitialCondition::Gaussian {
                mean,
                cov: c.sample(&grid, d, d, "initial cov")?,
            },
        };
        init.validate(grid.len(), d)?;
        Ok(init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
[model]
horizon = 1.0
beta = { communities = { split = 0.5, values = [0.5, -0.3] } }
a = { poly = [0.1, -0.4] }
b = { poly = [0.5, 0.5] }
gamma = { poly = [0.6, 0.4] }
q = 0.5
r = { poly = [1.0, 1.0] }
p = 0.5
g_a = { communities = { split = 0.5, within = [0.3, 0.2], across = 0.1 } }
gt_q = { separable = { g = [1.0, 1.0], h = [0.0, 2.0] } }
gt_p = 0.2

[initial]
mean = { poly = [1.0, -1.0] }
cov = 0.01

[numerics]
n_labels = 4
n_time_steps = 20
n_particles = 100
seed = 3
"#;

    #[test]
    fn parses_shorthands() {
        let sc = Scenario::parse(TEXT).unwrap();
        let m = sc.lq_model().unwrap();
        assert_eq!(m.n_labels(), 4);
        assert_eq!(m.beta[0][0], 0.5);
        assert_eq!(m.beta[3][0], -0.3);
        assert!((m.a[1][(0, 0)] - (0.1 - 0.4 * 0.375)).abs() < 1e-15);
        assert_eq!(m.g_a.get(0, 1)[(0, 0)], 0.3);
        assert_eq!(m.g_a.get(0, 3)[(0, 0)], 0.1);
        assert_eq!(m.g_a.get(2, 3)[(0, 0)], 0.2);
        let (u, v) = (m.grid.node(1), m.grid.node(2));
        assert!((m.gt_q.get(1, 2)[(0, 0)] - (1.0 + u) * 2.0 * v).abs() < 1e-15);
        assert_eq!(m.r[0][(0, 0)], 1.125);
        assert!(matches!(sc.initial().unwrap(), InitialCondition::Gaussian { .. }));
        assert_eq!(sc.numerics.fbsde, ContinuationSchedule::default());
    }

    #[test]
    fn value_shapes() {
        assert_eq!(Value::Number(2.0).matrix(2, 3, "x").unwrap(), DMatrix::identity(2, 3) * 2.0);
        assert_eq!(
            Value::List(vec![1.0, 2.0]).matrix(2, 2, "x").unwrap(),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))
        );
        assert_eq!(Value::List(vec![1.0, 2.0]).matrix(2, 1, "x").unwrap().as_slice(), &[1.0, 2.0]);
        let rows = Value::Rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(rows.matrix(2, 2, "x").unwrap()[(0, 1)], 2.0);
        assert!(rows.matrix(3, 2, "x").is_err());
    }

    #[test]
    fn overrides_and_table_length() {
        let mut sc = Scenario::parse(TEXT).unwrap();
        sc.apply(Overrides {
            labels: Some(6),
            particles: Some(7),
            ..Default::default()
        });
        assert_eq!(sc.lq_model().unwrap().n_labels(), 6);
        assert_eq!(sc.numerics.n_particles, 7);
        sc.model.q = Field::Table {
            table: vec![Value::Number(1.0); 4],
        };
        assert!(matches!(sc.lq_model(), Err(Error::Scenario(_))));
        sc.numerics.n_particles = 0;
        assert!(sc.check_counts().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = TEXT.replace("seed = 3", "seed = 3\nwhatever = 1");
        assert!(Scenario::parse(&bad).is_err());
    }
}
