//! Dense symmetric eigen-decomposition with canonical ordering and sign.
//!
//! The solver is the classical two-stage method: Householder reduction to
//! tridiagonal form followed by implicitly shifted QL iterations, with the
//! orthogonal transformations accumulated into the eigenvector matrix. Output
//! is sorted ascending and every eigenvector is sign-normalized so that its
//! entry of largest magnitude (lowest index on ties) is non-negative.

use ndarray::{Array2, ArrayView2};

use crate::{Error, Real, Result};

/// A finite, symmetric, square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix<T> {
    entries: Array2<T>,
}

impl<T: Real> SymmetricMatrix<T> {
    /// Validates finiteness and symmetry (absolute tolerance `1e-12`, widened
    /// for `f32`), then stores `(M + Mᵀ)/2`.
    pub fn new(m: Array2<T>) -> Result<Self> {
        let (rows, cols) = m.dim();
        if rows != cols {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {rows}x{cols}"
            )));
        }
        if rows == 0 {
            return Err(Error::EmptyInput("symmetric matrix"));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        let tol = T::tol(1e-12);
        for i in 0..rows {
            for j in (i + 1)..rows {
                let gap = (m[[i, j]] - m[[j, i]]).abs();
                if gap > tol {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        gap: gap.as_f64(),
                    });
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    /// Stores `(M + Mᵀ)/2` without a tolerance check.
    pub(crate) fn symmetrized(m: Array2<T>) -> Self {
        let half = T::lit(0.5);
        let entries = (&m + &m.t()) * half;
        SymmetricMatrix { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> ArrayView2<'_, T> {
        self.entries.view()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.entries
    }

    pub fn frobenius_norm(&self) -> T {
        self.entries.iter().map(|&x| x * x).sum::<T>().sqrt()
    }
}

/// Full spectrum: `values` ascending, column `j` of `vectors` paired with `values[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPairs<T> {
    pub values: Vec<T>,
    pub vectors: Array2<T>,
}

/// Which end of the spectrum [`take_extreme`] keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumEnd {
    Smallest,
    Largest,
}

impl<T: Real> EigenPairs<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Eigenvalues in descending order.
    pub fn descending_values(&self) -> Vec<T> {
        self.values.iter().rev().copied().collect()
    }
}

/// Full eigen-decomposition of a symmetric matrix.
pub fn sym_eigendecomp<T: Real>(m: &SymmetricMatrix<T>) -> Result<EigenPairs<T>> {
    let n = m.dim();
    if m.entries.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("symmetric matrix"));
    }
    let mut v: Vec<T> = m.entries.iter().copied().collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    // QL touches eigenvector columns in its inner loop; work on the transpose so
    // that those accesses are contiguous.
    let mut vt = transpose(n, &v);
    drop(v);
    tridiagonal_ql(n, &mut vt, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite eigenvalues").then(a.cmp(&b)));
    let values: Vec<T> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Array2::<T>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let row = &vt[src * n..(src + 1) * n];
        // Magnitudes equal up to round-off count as ties.
        let peak = row.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        let cutoff = peak * (T::one() - T::tol(1e-12));
        let pivot = row.iter().position(|x| x.abs() >= cutoff).unwrap_or(0);
        let sign = if row[pivot] < T::zero() { -T::one() } else { T::one() };
        for (i, &x) in row.iter().enumerate() {
            vectors[[i, col]] = x * sign;
        }
    }
    Ok(EigenPairs { values, vectors })
}

/// Keeps `count` eigenpairs from one end of the spectrum, ascending order preserved.
pub fn take_extreme<T: Real>(ep: &EigenPairs<T>, count: usize, end: SpectrumEnd) -> Result<EigenPairs<T>> {
    let n = ep.len();
    if count == 0 || count > n {
        return Err(Error::CountTooLarge {
            requested: count,
            available: n,
        });
    }
    let range = match end {
        SpectrumEnd::Smallest => 0..count,
        SpectrumEnd::Largest => (n - count)..n,
    };
    Ok(EigenPairs {
        values: ep.values[range.clone()].to_vec(),
        vectors: ep.vectors.slice(ndarray::s![.., range]).to_owned(),
    })
}

fn transpose<T: Real>(n: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// Householder reduction of the row-major symmetric matrix `v` to tridiagonal
/// form. On return `d` holds the diagonal, `e[1..]` the sub-diagonal and `v` the
/// accumulated orthogonal transformation.
fn tridiagonalize<T: Real>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) {
    let idx = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for &dk in d.iter().take(i) {
            scale = scale + dk.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = T::zero();
                v[idx(j, i)] = T::zero();
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk = *dk / scale;
                h = h + *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h = h - f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[idx(j, i)] = f;
                g = e[j] + v[idx(j, j)] * f;
                for k in (j + 1)..i {
                    g = g + v[idx(k, j)] * d[k];
                    e[k] = e[k] + v[idx(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] = e[j] / h;
                f = f + e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] = e[j] - hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[idx(k, j)] = v[idx(k, j)] - (f * e[k] + g * d[k]);
                }
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[idx(n - 1, i)] = v[idx(i, i)];
        v[idx(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[idx(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g = g + v[idx(k, i + 1)] * v[idx(k, j)];
                }
                for k in 0..=i {
                    v[idx(k, j)] = v[idx(k, j)] - g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[idx(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
        v[idx(n - 1, j)] = T::zero();
    }
    v[idx(n - 1, n - 1)] = T::one();
    e[0] = T::zero();
}

/// Implicit QL on the tridiagonal (`d`, `e`); `vt` is the transposed eigenvector
/// accumulator (row `i` = eigenvector `i`).
fn tridiagonal_ql<T: Real>(n: usize, vt: &mut [T], d: &mut [T], e: &mut [T]) -> Result<()> {
    let max_iter = 64 * n.max(1);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();

    let eps = T::epsilon();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let mut total = 0usize;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                total += 1;
                if total > max_iter {
                    return Err(Error::NoConvergence(max_iter));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (e[l] + e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di = *di - h;
                }
                f = f + h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] = d[l] + f;
        e[l] = T::zero();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sym(a: Array2<f64>) -> SymmetricMatrix<f64> {
        SymmetricMatrix::new(a).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let ep = sym_eigendecomp(&sym(array![[1.0, 0.0], [0.0, 2.0]])).unwrap();
        assert_eq!(ep.values, vec![1.0, 2.0]);
        assert_eq!(ep.vectors, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn swap_matrix() {
        let ep = sym_eigendecomp(&sym(array![[0.0, 1.0], [1.0, 0.0]])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((ep.values[0] + 1.0).abs() < 1e-15);
        assert!((ep.values[1] - 1.0).abs() < 1e-15);
        // Canonical sign: largest-magnitude entry non-negative, lowest index on ties.
        let expected = array![[h, h], [-h, h]];
        for (a, b) in ep.vectors.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15, "{:?}", ep.vectors);
        }
    }

    #[test]
    fn one_by_one() {
        let ep = sym_eigendecomp(&sym(array![[-3.5]])).unwrap();
        assert_eq!(ep.values, vec![-3.5]);
        assert_eq!(ep.vectors, array![[1.0]]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            SymmetricMatrix::new(array![[0.0, 1.0], [1.1, 0.0]]),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(
            SymmetricMatrix::new(array![[f64::NAN, 0.0], [0.0, 1.0]]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            SymmetricMatrix::new(Array2::<f64>::zeros((2, 3))),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn symmetrizes_roundoff() {
        let m = sym(array![[1.0, 2.0 + 1e-14], [2.0, 1.0]]);
        assert_eq!(m.entries()[[0, 1]], m.entries()[[1, 0]]);
    }

    #[test]
    fn take_extreme_ends() {
        let ep = sym_eigendecomp(&sym(Array2::from_diag(&ndarray::arr1(&[1.0, 2.0, 3.0])))).unwrap();
        assert_eq!(take_extreme(&ep, 1, SpectrumEnd::Smallest).unwrap().values, vec![1.0]);
        assert_eq!(take_extreme(&ep, 2, SpectrumEnd::Largest).unwrap().values, vec![2.0, 3.0]);
        assert_eq!(take_extreme(&ep, 3, SpectrumEnd::Smallest).unwrap(), ep);
        assert!(matches!(
            take_extreme(&ep, 4, SpectrumEnd::Largest),
            Err(Error::CountTooLarge { .. })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let m = SymmetricMatrix::new(array![[2.0f32, 1.0], [1.0, 2.0]]).unwrap();
        let ep = sym_eigendecomp(&m).unwrap();
        assert!((ep.values[0] - 1.0).abs() < 1e-6);
        assert!((ep.values[1] - 3.0).abs() < 1e-6);
    }
}
