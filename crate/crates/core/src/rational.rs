//! Dense matrices over the rationals.
//!
//! Topology matrices are integral and small, so everything here favours
//! exactness over speed: Gauss–Jordan elimination on `BigRational`.

use std::fmt;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

pub type Q = BigRational;

pub fn q(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

#[derive(Clone, PartialEq, Eq)]
pub struct QMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Q>,
}

impl fmt::Debug for QMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl std::ops::Index<(usize, usize)> for QMatrix {
    type Output = Q;
    fn index(&self, (r, c): (usize, usize)) -> &Q {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for QMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Q {
        &mut self.data[r * self.cols + c]
    }
}

impl QMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        QMatrix {
            rows,
            cols,
            data: vec![Q::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Q::one();
        }
        m
    }

    pub fn from_i64(rows: usize, cols: usize, vals: &[i64]) -> Self {
        assert_eq!(vals.len(), rows * cols);
        QMatrix {
            rows,
            cols,
            data: vals.iter().map(|&v| q(v)).collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)].clone();
            }
        }
        t
    }

    pub fn mul(&self, other: &QMatrix) -> QMatrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch in product");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let b = &other[(k, j)];
                    if !b.is_zero() {
                        out[(i, j)] += a * b;
                    }
                }
            }
        }
        out
    }

    pub fn neg(&self) -> QMatrix {
        QMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| -x).collect(),
        }
    }

    /// Columns `idx` in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> QMatrix {
        let mut out = Self::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            for (j, &c) in idx.iter().enumerate() {
                out[(r, j)] = self[(r, c)].clone();
            }
        }
        out
    }

    pub fn columns(&self, range: std::ops::Range<usize>) -> QMatrix {
        let idx: Vec<usize> = range.collect();
        self.select_columns(&idx)
    }

    pub fn vstack(&self, other: &QMatrix) -> QMatrix {
        assert!(self.cols == other.cols || self.rows == 0 || other.rows == 0);
        let cols = if self.rows == 0 {
            other.cols
        } else {
            self.cols
        };
        let mut data = self.data.clone();
        data.extend(other.data.iter().cloned());
        QMatrix {
            rows: self.rows + other.rows,
            cols,
            data,
        }
    }

    /// Reduced row echelon form and the pivot columns.
    pub fn rref(&self) -> (QMatrix, Vec<usize>) {
        let mut m = self.clone();
        let mut pivots = Vec::new();
        let mut row = 0;
        for col in 0..m.cols {
            if row == m.rows {
                break;
            }
            let Some(p) = (row..m.rows).find(|&r| !m[(r, col)].is_zero()) else {
                continue;
            };
            m.swap_rows(row, p);
            let inv = m[(row, col)].recip();
            for c in col..m.cols {
                let v = &m[(row, c)] * &inv;
                m[(row, c)] = v;
            }
            for r in 0..m.rows {
                if r != row && !m[(r, col)].is_zero() {
                    let f = m[(r, col)].clone();
                    for c in col..m.cols {
                        let d = &f * &m[(row, c)];
                        m[(r, c)] -= d;
                    }
                }
            }
            pivots.push(col);
            row += 1;
        }
        (m, pivots)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a != b {
            for c in 0..self.cols {
                self.data.swap(a * self.cols + c, b * self.cols + c);
            }
        }
    }

    pub fn rank(&self) -> usize {
        self.rref().1.len()
    }

    /// Basis of the right nullspace, one basis vector per row, each scaled
    /// to a primitive integer vector.
    pub fn nullspace(&self) -> QMatrix {
        let (r, pivots) = self.rref();
        let free: Vec<usize> = (0..self.cols).filter(|c| !pivots.contains(c)).collect();
        let mut out = Self::zeros(free.len(), self.cols);
        for (k, &f) in free.iter().enumerate() {
            out[(k, f)] = Q::one();
            for (i, &p) in pivots.iter().enumerate() {
                out[(k, p)] = -r[(i, f)].clone();
            }
        }
        out.primitive_rows()
    }

    /// Basis of the left nullspace (rows `w` with `w·self = 0`).
    pub fn left_nullspace(&self) -> QMatrix {
        self.transpose().nullspace()
    }

    /// Scale each row to coprime integers with a positive leading entry.
    pub fn primitive_rows(mut self) -> QMatrix {
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut den = BigInt::one();
            for x in row {
                den = den.lcm(x.denom());
            }
            let ints: Vec<BigInt> = row.iter().map(|x| (x * &den).to_integer()).collect();
            let mut g = BigInt::zero();
            for x in &ints {
                g = g.gcd(x);
            }
            if g.is_zero() {
                continue;
            }
            let lead_neg = ints
                .iter()
                .find(|x| !x.is_zero())
                .is_some_and(|x| x.is_negative());
            if lead_neg {
                g = -g;
            }
            for (c, x) in ints.into_iter().enumerate() {
                self.data[r * self.cols + c] = Q::from_integer(x / &g);
            }
        }
        self
    }

    pub fn inverse(&self) -> Option<QMatrix> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        if n == 0 {
            return Some(Self::zeros(0, 0));
        }
        let mut aug = Self::zeros(n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                aug[(r, c)] = self[(r, c)].clone();
            }
            aug[(r, n + r)] = Q::one();
        }
        let (red, pivots) = aug.rref();
        if pivots.len() < n || pivots[n - 1] != n - 1 {
            return None;
        }
        let idx: Vec<usize> = (n..2 * n).collect();
        Some(red.select_columns(&idx))
    }

    pub fn det(&self) -> Q {
        assert_eq!(self.rows, self.cols);
        let mut m = self.clone();
        let n = self.rows;
        let mut det = Q::one();
        for col in 0..n {
            let Some(p) = (col..n).find(|&r| !m[(r, col)].is_zero()) else {
                return Q::zero();
            };
            if p != col {
                m.swap_rows(p, col);
                det = -det;
            }
            let piv = m[(col, col)].clone();
            det *= &piv;
            for r in col + 1..n {
                if !m[(r, col)].is_zero() {
                    let f = &m[(r, col)] / &piv;
                    for c in col..n {
                        let d = &f * &m[(col, c)];
                        m[(r, c)] -= d;
                    }
                }
            }
        }
        det
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| {
            self[(r, c)].to_f64().unwrap_or(f64::NAN)
        })
    }

    /// Row-major nested vectors of rendered entries (`"1"`, `"-1/2"`).
    pub fn to_strings(&self) -> Vec<Vec<String>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)].to_string()).collect())
            .collect()
    }

    /// True when both matrices have the same row space.
    pub fn same_row_space(&self, other: &QMatrix) -> bool {
        if self.cols != other.cols {
            return false;
        }
        let ra = self.rank();
        ra == other.rank() && self.vstack(other).rank() == ra
    }
}

/// Serializable rendering used in JSON reports.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<String>>,
}

impl From<&QMatrix> for MatrixReport {
    fn from(m: &QMatrix) -> Self {
        MatrixReport {
            rows: m.nrows(),
            cols: m.ncols(),
            entries: m.to_strings(),
        }
    }
}
