//! Dense kernels for the small and medium matrices that show up in market
//! construction and barrier Newton steps.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{PgdpoError, Result};

/// Relative pivot floor below which a matrix is declared not positive definite.
pub const PIVOT_REL_TOL: f64 = 1e-14;

/// A symmetric positive-definite matrix with a lazily computed Cholesky factor.
///
/// Only the upper triangle of the input is read; the lower triangle is
/// overwritten with its mirror so symmetry holds bit-exactly.
#[derive(Debug)]
pub struct SpdMatrix {
    entries: Array2<f64>,
    factor: OnceLock<std::result::Result<Array2<f64>, PgdpoError>>,
}

impl Clone for SpdMatrix {
    fn clone(&self) -> Self {
        SpdMatrix {
            entries: self.entries.clone(),
            factor: self.factor.clone(),
        }
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl SpdMatrix {
    pub fn new(mut entries: Array2<f64>) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if rows != cols || rows == 0 {
            return Err(PgdpoError::DimensionMismatch(format!(
                "SPD matrix must be square and non-empty, got {rows}x{cols}"
            )));
        }
        for i in 0..rows {
            for j in 0..i {
                entries[[i, j]] = entries[[j, i]];
            }
        }
        Ok(SpdMatrix {
            entries,
            factor: OnceLock::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix::new(Array2::eye(n)).expect("identity is square")
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        SpdMatrix::new(Array2::from_diag(&Array1::from(diag.to_vec())))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Lower-triangular factor, computed on first access.
    pub fn factor(&self) -> Result<&Array2<f64>> {
        self.factor
            .get_or_init(|| cholesky_lower(&self.entries))
            .as_ref()
            .map_err(|e| e.clone())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.entries.dot(&ArrayView1::from(x)).to_vec()
    }

    /// Quadratic form xᵀ A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let ax = self.mul_vec(x);
        ax.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Cholesky factor L with L Lᵀ = A.
pub fn cholesky_factor(a: &SpdMatrix) -> Result<Array2<f64>> {
    a.factor().cloned()
}

fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[[i, i]].abs()));
    let floor = PIVOT_REL_TOL * max_diag;
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = {
                let li = l.row(i);
                let lj = l.row(j);
                let li = li.as_slice().expect("row-major");
                let lj = lj.as_slice().expect("row-major");
                li[..j].iter().zip(&lj[..j]).map(|(x, y)| x * y).sum()
            };
            let s = a[[i, j]] - dot;
            if i == j {
                if !(s > floor) || !s.is_finite() {
                    return Err(PgdpoError::NotPositiveDefinite { index: i, pivot: s });
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L y = b followed by Lᵀ x = y.
pub fn cholesky_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = b.to_vec();
    for i in 0..n {
        let row = l.row(i);
        let row = row.as_slice().expect("row-major");
        let s: f64 = row[..i].iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
        y[i] = (y[i] - s) / row[i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solve A x = b for SPD A via its Cholesky factor.
pub fn solve_spd(a: &SpdMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(PgdpoError::DimensionMismatch(format!(
            "rhs has length {}, matrix is {}x{}",
            b.len(),
            a.dim(),
            a.dim()
        )));
    }
    let l = a.factor()?;
    Ok(cholesky_solve(l, b))
}

/// LU factorization with partial pivoting for general square systems.
#[derive(Debug, Clone)]
pub struct DenseLu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl DenseLu {
    pub fn factor(mut a: Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PgdpoError::DimensionMismatch("LU needs a square matrix".into()));
        }
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(PgdpoError::SingularMatrix);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = a[[k, k]].abs();
            for i in k + 1..n {
                let v = a[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-300 || best <= f64::EPSILON * 1e-3 * scale {
                return Err(PgdpoError::SingularMatrix);
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    a.swap([p, j], [k, j]);
                }
            }
            let pivot = a[[k, k]];
            let (top, mut bottom) = a.view_mut().split_at(ndarray::Axis(0), k + 1);
            let prow = top.row(k);
            let prow = prow.as_slice().expect("row-major");
            for mut row in bottom.rows_mut() {
                let r = row.as_slice_mut().expect("row-major");
                let f = r[k] / pivot;
                r[k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        r[j] -= f * prow[j];
                    }
                }
            }
        }
        Ok(DenseLu { lu: a, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.nrows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let row = row.as_slice().expect("row-major");
            let s: f64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let row = row.as_slice().expect("row-major");
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }
}

/// Solve a general dense system with partial pivoting.
pub fn lu_solve(a: Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    Ok(DenseLu::factor(a)?.solve(b))
}
