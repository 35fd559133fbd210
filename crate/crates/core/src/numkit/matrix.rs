use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// This is deliberately small: the workloads here are desk-scale (dimensions
/// in the tens), and owning the representation keeps serialization bit-exact
/// and accumulation order deterministic.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`; panics on inner-dimension mismatch (use
    /// [`Matrix::checked_matmul`] at API boundaries).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn checked_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        Ok(self.matmul(other))
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_assign_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Euclidean norm of the flattened entries (for vectors this is the
    /// 2-norm; identical to the Frobenius norm).
    pub fn two_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self.get(i, j))?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Frobenius norm: square root of the sum of squared entries.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.two_norm()
}

/// Column-wise softmax with the usual max-shift for stability.
///
/// Every output column sums to 1 and entries lie in (0, 1).
pub fn softmax_columns(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::invalid_input("softmax_columns: non-finite input"));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..m.cols() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..m.rows() {
            max = max.max(m.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..m.rows() {
            let e = (m.get(i, j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..m.rows() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

/// Largest singular value via power iteration on `WᵀW`.
///
/// The start vector is the normalized all-ones vector; if the iteration
/// stagnates at zero (start orthogonal to the dominant singular direction,
/// or a zero matrix) it is restarted once with a deterministic seeded
/// perturbation. Converges when the estimate changes by less than
/// `tol` relative between sweeps.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    if tol <= 0.0 {
        return Err(Error::invalid_input("spectral_norm: tol must be positive"));
    }
    if !w.is_finite() {
        return Err(Error::invalid_input("spectral_norm: non-finite input"));
    }
    // Iterate on the smaller side so each sweep is W(Wᵀx) or Wᵀ(Wx).
    let tall = w.rows() >= w.cols();
    let n = w.cols().min(w.rows());
    if n == 0 {
        return Ok(0.0);
    }

    let start = vec![1.0 / (n as f64).sqrt(); n];
    match power_iteration(w, tall, start, tol, max_iters) {
        PowerOutcome::Converged(s) if s > 0.0 => Ok(s),
        outcome => {
            // Zero estimate or stagnation: perturb deterministically and retry.
            let mut rng = super::RngStream::new(0x5eed_cafe, (w.rows() as u64) << 32 | w.cols() as u64);
            let mut start = vec![0.0; n];
            let mut norm = 0.0;
            for s in start.iter_mut() {
                *s = 1.0 + 0.01 * rng.standard_normal();
                norm += *s * *s;
            }
            let norm = norm.sqrt();
            for s in start.iter_mut() {
                *s /= norm;
            }
            match power_iteration(w, tall, start, tol, max_iters) {
                PowerOutcome::Converged(s) => Ok(s),
                PowerOutcome::Stagnant => Ok(0.0), // genuinely zero matrix
                PowerOutcome::NoConvergence { iters, last } => {
                    match outcome {
                        // Keep the better of the two runs in the diagnostic.
                        PowerOutcome::NoConvergence { last: l0, .. } if l0 > last => {
                            Err(Error::Convergence { iters, last_estimate: l0 })
                        }
                        _ => Err(Error::Convergence { iters, last_estimate: last }),
                    }
                }
            }
        }
    }
}

enum PowerOutcome {
    Converged(f64),
    /// Iterate collapsed to (numerically) zero.
    Stagnant,
    NoConvergence {
        iters: usize,
        last: f64,
    },
}

fn power_iteration(
    w: &Matrix,
    tall: bool,
    mut v: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> PowerOutcome {
    let mut last = 0.0;
    for iter in 0..max_iters {
        // u = Wv (tall) or Wᵀv; then v' = Wᵀu or Wu.
        let u = if tall { matvec(w, &v) } else { matvec_t(w, &v) };
        let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 || !sigma.is_finite() {
            return PowerOutcome::Stagnant;
        }
        let next = if tall { matvec_t(w, &u) } else { matvec(w, &u) };
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return PowerOutcome::Stagnant;
        }
        v = next.into_iter().map(|x| x / norm).collect();
        if iter > 0 && (sigma - last).abs() <= tol * sigma.max(f64::MIN_POSITIVE) {
            return PowerOutcome::Converged(sigma);
        }
        last = sigma;
    }
    PowerOutcome::NoConvergence {
        iters: max_iters,
        last,
    }
}

fn matvec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), v.len());
    let mut out = vec![0.0; w.rows()];
    for i in 0..w.rows() {
        let row = &w.data()[i * w.cols()..(i + 1) * w.cols()];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

fn matvec_t(w: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(w.rows(), v.len());
    let mut out = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        let row = &w.data()[i * w.cols()..(i + 1) * w.cols()];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * v[i];
        }
    }
    out
}
