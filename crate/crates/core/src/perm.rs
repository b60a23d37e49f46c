//! Numerics of the Birkhoff relaxation.
//!
//! Unconstrained score matrices are pushed onto the set of doubly stochastic
//! matrices by log-domain Sinkhorn normalization, optionally lifted so that
//! index 0 (the table header) stays fixed, measured by their entropy, and
//! projected back to the nearest hard permutation with the Hungarian method.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row/column sum tolerance used when checking doubly stochastic inputs.
pub const DS_TOLERANCE: f64 = 1e-4;

/// Default number of Sinkhorn sweeps (one row + one column normalization each).
pub const DEFAULT_SINKHORN_ITERS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum PermError {
    #[error("expected {expected} entries for a {dim}x{dim} matrix, got {got}")]
    Shape {
        dim: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not doubly stochastic: {0}")]
    NotDoublyStochastic(String),
    #[error("invalid permutation mapping: {0}")]
    InvalidMapping(String),
    #[error("sinkhorn needs at least one iteration")]
    ZeroIterations,
}

/// Dense row-major square matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, PermError> {
        if data.len() != dim * dim {
            return Err(PermError::Shape {
                dim,
                expected: dim * dim,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(PermError::NonFinite {
                row: k / dim.max(1),
                col: k % dim.max(1),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, PermError> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            if r.len() != dim {
                return Err(PermError::Shape {
                    dim,
                    expected: dim * dim,
                    got: r.len() * dim,
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = value;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for i in 0..self.dim {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Largest |sum - 1| over all rows and columns.
    pub fn marginal_deviation(&self) -> f64 {
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Frobenius inner product.
    pub fn frobenius(&self, other: &SquareMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// A square matrix whose rows and columns sum to one (within [`DS_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublyStochastic(SquareMatrix);

impl DoublyStochastic {
    pub fn new(m: SquareMatrix) -> Result<Self, PermError> {
        for i in 0..m.dim {
            for j in 0..m.dim {
                let v = m.get(i, j);
                if !(-DS_TOLERANCE..=1.0 + DS_TOLERANCE).contains(&v) {
                    return Err(PermError::NotDoublyStochastic(format!(
                        "entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
            }
        }
        let dev = m.marginal_deviation();
        if dev > DS_TOLERANCE {
            return Err(PermError::NotDoublyStochastic(format!(
                "marginal deviation {dev:e}"
            )));
        }
        Ok(Self(m))
    }

    pub fn uniform(dim: usize) -> Self {
        let v = if dim == 0 { 0.0 } else { 1.0 / dim as f64 };
        Self(SquareMatrix {
            dim,
            data: vec![v; dim * dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> SquareMatrix {
        self.0
    }

    /// True when entry (0,0) is one, i.e. index 0 is mapped to itself.
    pub fn is_header_fixed(&self) -> bool {
        self.dim() > 0 && (self.get(0, 0) - 1.0).abs() <= DS_TOLERANCE
    }
}

impl From<&Permutation> for DoublyStochastic {
    fn from(p: &Permutation) -> Self {
        Self(p.to_matrix())
    }
}

/// A bijection on `0..n`. `mapping[i] = j` means row `i` of the matrix form
/// has its single one in column `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, PermError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &v in &mapping {
            if v >= n {
                return Err(PermError::InvalidMapping(format!(
                    "index {v} out of range 0..{n}"
                )));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(PermError::InvalidMapping(format!("index {v} repeated")));
            }
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn reversal(n: usize) -> Self {
        Self((0..n).rev().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Self(inv)
    }

    /// `self.then(other)[i] = self[other[i]]`: gathering by `self` and then by
    /// `other` is the same as gathering once by the composition.
    pub fn then(&self, other: &Permutation) -> Self {
        assert_eq!(
            self.len(),
            other.len(),
            "composing permutations of different length"
        );
        Self(other.0.iter().map(|&i| self.0[i]).collect())
    }

    pub fn to_matrix(&self) -> SquareMatrix {
        let n = self.0.len();
        let mut m = SquareMatrix::zeros(n);
        for (i, &j) in self.0.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }

    /// Recover a permutation from an exact 0/1 matrix.
    pub fn from_matrix(m: &SquareMatrix) -> Option<Self> {
        let mut mapping = Vec::with_capacity(m.dim());
        for i in 0..m.dim() {
            let row = m.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return None;
            }
            let ones: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 1.0).collect();
            if ones.len() != 1 {
                return None;
            }
            mapping.push(ones[0]);
        }
        Self::new(mapping).ok()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = PermError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_rows_log(log: &mut SquareMatrix) {
    let n = log.dim;
    for i in 0..n {
        let row = &mut log.data[i * n..(i + 1) * n];
        let lse = log_sum_exp(row.iter().copied());
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

fn normalize_cols_log(log: &mut SquareMatrix) {
    let n = log.dim;
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| log.data[i * n + j]));
        for i in 0..n {
            log.data[i * n + j] -= lse;
        }
    }
}

fn check_finite(theta: &SquareMatrix) -> Result<(), PermError> {
    match theta.data.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(PermError::NonFinite {
            row: k / theta.dim,
            col: k % theta.dim,
        }),
        None => Ok(()),
    }
}

/// Sinkhorn normalization of `exp(theta)`, run for a fixed number of
/// row-then-column sweeps in the log domain.
pub fn sinkhorn(theta: &SquareMatrix, iterations: usize) -> Result<DoublyStochastic, PermError> {
    if iterations == 0 {
        return Err(PermError::ZeroIterations);
    }
    check_finite(theta)?;
    let mut log = theta.clone();
    for _ in 0..iterations {
        normalize_rows_log(&mut log);
        normalize_cols_log(&mut log);
    }
    log.data.iter_mut().for_each(|v| *v = v.exp());
    Ok(DoublyStochastic(log))
}

/// Gradient of `<upstream, sinkhorn(theta, iterations)>` with respect to `theta`,
/// obtained by reverse-mode differentiation of the unrolled normalizations.
pub fn sinkhorn_backward(
    theta: &SquareMatrix,
    iterations: usize,
    upstream: &SquareMatrix,
) -> Result<SquareMatrix, PermError> {
    if iterations == 0 {
        return Err(PermError::ZeroIterations);
    }
    check_finite(theta)?;
    let n = theta.dim;
    if upstream.dim != n {
        return Err(PermError::Shape {
            dim: n,
            expected: n * n,
            got: upstream.data.len(),
        });
    }
    // Log-matrix after every half-step; each one is the softmax needed to
    // reverse the step that produced it.
    let mut states = Vec::with_capacity(2 * iterations);
    let mut log = theta.clone();
    for _ in 0..iterations {
        normalize_rows_log(&mut log);
        states.push(log.clone());
        normalize_cols_log(&mut log);
        states.push(log.clone());
    }

    // d exp(L) / dL
    let mut grad: Vec<f64> = upstream
        .data
        .iter()
        .zip(&log.data)
        .map(|(g, l)| g * l.exp())
        .collect();

    for (step, state) in states.iter().enumerate().rev() {
        let is_col_step = step % 2 == 1;
        if is_col_step {
            for j in 0..n {
                let total: f64 = (0..n).map(|i| grad[i * n + j]).sum();
                for i in 0..n {
                    grad[i * n + j] -= state.data[i * n + j].exp() * total;
                }
            }
        } else {
            for i in 0..n {
                let row = i * n..(i + 1) * n;
                let total: f64 = grad[row.clone()].iter().sum();
                for k in row {
                    grad[k] -= state.data[k].exp() * total;
                }
            }
        }
    }
    Ok(SquareMatrix { dim: n, data: grad })
}

/// Embed an `n x n` doubly stochastic matrix as the lower-right block of an
/// `(n+1) x (n+1)` matrix whose entry (0,0) is one.
pub fn lift_header_fixed(d: &DoublyStochastic) -> DoublyStochastic {
    let n = d.dim();
    let mut out = SquareMatrix::zeros(n + 1);
    out.set(0, 0, 1.0);
    for i in 0..n {
        for j in 0..n {
            out.set(i + 1, j + 1, d.get(i, j));
        }
    }
    DoublyStochastic(out)
}

/// `-sum d_ij ln d_ij` with `0 ln 0 = 0`.
pub fn matrix_entropy(d: &DoublyStochastic) -> f64 {
    let h: f64 =
        d.0.data
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * v.ln())
            .sum();
    h.max(0.0)
}

/// Derivative of [`matrix_entropy`] with respect to each entry, `-(ln d + 1)`.
/// Entries at zero are given the gradient of the smallest positive float so
/// the result stays finite.
pub fn matrix_entropy_grad(d: &DoublyStochastic) -> SquareMatrix {
    let data =
        d.0.data
            .iter()
            .map(|&v| -(v.max(f64::MIN_POSITIVE).ln() + 1.0))
            .collect();
    SquareMatrix { dim: d.dim(), data }
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (Kuhn-Munkres with potentials, O(n^3)). Returns `assignment[row] = col`.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    assignment
}

/// Maximum-weight perfect matching. Returns the assignment and its weight.
pub fn max_weight_assignment(weights: &SquareMatrix) -> (Vec<usize>, f64) {
    let n = weights.dim;
    let cost: Vec<f64> = weights.data.iter().map(|w| -w).collect();
    let assignment = min_cost_assignment(&cost, n);
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| weights.get(i, j))
        .sum();
    (assignment, total)
}

fn tie_tolerance(optimum: f64) -> f64 {
    1e-9 * (1.0 + optimum.abs())
}

/// Nearest permutation under the Frobenius inner product.
///
/// Among optimal permutations the lexicographically smallest mapping is
/// returned: row 0 gets the lowest column that still admits an optimal
/// completion, then row 1, and so on. Weights within `1e-9 * (1 + |opt|)`
/// of the optimum count as ties.
pub fn project_to_permutation(d: &DoublyStochastic) -> Permutation {
    project_weights(d.matrix())
}

/// [`project_to_permutation`] for an arbitrary finite weight matrix.
pub fn project_weights(weights: &SquareMatrix) -> Permutation {
    let n = weights.dim;
    let (assignment, optimum) = max_weight_assignment(weights);
    if n <= 1 {
        return Permutation(assignment);
    }
    let tol = tie_tolerance(optimum);

    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_weight = 0.0;
    let mut used = vec![false; n];
    for row in 0..n {
        let remaining_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for col in (0..n).filter(|&c| !used[c]) {
            let free_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != col).collect();
            let k = remaining_rows.len();
            let mut sub = SquareMatrix::zeros(k);
            for (a, &r) in remaining_rows.iter().enumerate() {
                for (b, &c) in free_cols.iter().enumerate() {
                    sub.set(a, b, weights.get(r, c));
                }
            }
            let (_, rest) = max_weight_assignment(&sub);
            if fixed_weight + weights.get(row, col) + rest >= optimum - tol {
                chosen = Some(col);
                break;
            }
        }
        // Floating-point drift can in principle reject every column; fall back
        // to the plain Hungarian solution in that case.
        let Some(col) = chosen else {
            return Permutation(assignment);
        };
        used[col] = true;
        fixed_weight += weights.get(row, col);
        fixed.push(col);
    }
    Permutation(fixed)
}
