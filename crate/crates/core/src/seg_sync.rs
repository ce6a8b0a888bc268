//! Segmentation synchronization.
//!
//! Pairwise co-membership matrices `Zᵏˡ` are stacked into a symmetric
//! `KN × KN` matrix with zero diagonal blocks. Its leading eigenvectors,
//! scaled by the square roots of their eigenvalues, are absolute part
//! indicators `Γ` shared by all scans; the number of parts is read off the
//! spectrum with the α-rule.

use ndarray::{s, Array2, ArrayView2};

use crate::cloud::{unordered_pairs, PairTable};
use crate::frontend::RelativeSegmentation;
use crate::spectral::{sym_eigendecomp, take_extreme, SpectrumEnd, SymmetricMatrix};
use crate::{EigenPairs, Error, Real, Result};

/// Means at or below this are treated as an all-zero pair.
pub const ALL_ZERO_MEAN: f64 = 1e-12;

/// `Zᵏˡ = Ẑᵏˡ / mean(Ẑᵏˡ)`.
pub fn normalize_relative<T: Real>(zhat: &RelativeSegmentation<T>) -> Result<RelativeSegmentation<T>> {
    let len = zhat.zhat.len();
    if len == 0 {
        return Err(Error::EmptyInput("relative segmentation"));
    }
    if zhat.zhat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("relative segmentation"));
    }
    let q = zhat.zhat.iter().copied().sum::<T>() / T::from_count(len);
    if q <= T::lit(ALL_ZERO_MEAN) {
        return Err(Error::AllZero(zhat.source, zhat.target));
    }
    Ok(RelativeSegmentation {
        source: zhat.source,
        target: zhat.target,
        zhat: zhat.zhat.mapv(|x| x / q),
    })
}

/// Stacked co-membership matrix with zero diagonal blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedSegmentation<T> {
    pub k: usize,
    pub n: usize,
    pub matrix: SymmetricMatrix<T>,
}

impl<T: Real> StackedSegmentation<T> {
    pub fn block(&self, a: usize, b: usize) -> ArrayView2<'_, T> {
        let n = self.n;
        self.matrix
            .entries()
            .slice_move(s![a * n..(a + 1) * n, b * n..(b + 1) * n])
    }
}

/// Tiles `Zᵏˡ` (`k < l`) and their transposes around zero diagonal blocks.
pub fn build_stacked<T: Real>(
    blocks: &PairTable<RelativeSegmentation<T>>,
    k: usize,
    n: usize,
) -> Result<StackedSegmentation<T>> {
    let mut z = Array2::<T>::zeros((k * n, k * n));
    for (a, b) in unordered_pairs(k) {
        let blk = &blocks.require(a, b)?.zhat;
        if blk.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "block ({a}, {b}) is {:?}, expected {n}x{n}",
                blk.dim()
            )));
        }
        if blk.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("segmentation block"));
        }
        z.slice_mut(s![a * n..(a + 1) * n, b * n..(b + 1) * n]).assign(blk);
        z.slice_mut(s![b * n..(b + 1) * n, a * n..(a + 1) * n]).assign(&blk.t());
    }
    Ok(StackedSegmentation {
        k,
        n,
        matrix: SymmetricMatrix::symmetrized(z),
    })
}

/// Co-membership stack of per-scan labels: block `(k, l)` is `wᵏˡ Gᵏ Gˡᵀ`.
///
/// `weights` defaults to 1 for every pair; diagonal blocks are `Gᵏ Gᵏᵀ` when
/// `include_diagonal` is set and zero otherwise.
pub fn label_stack<T: Real>(
    labels: &[Vec<usize>],
    weights: Option<&PairTable<T>>,
    include_diagonal: bool,
) -> Result<Array2<T>> {
    let (k, n) = label_shape(labels)?;
    let mut z = Array2::<T>::zeros((k * n, k * n));
    for a in 0..k {
        for b in 0..k {
            let w = if a == b {
                if !include_diagonal {
                    continue;
                }
                T::one()
            } else {
                weights.map_or(Ok(T::one()), |t| t.require(a, b).copied())?
            };
            for (i, &la) in labels[a].iter().enumerate() {
                for (j, &lb) in labels[b].iter().enumerate() {
                    if la == lb {
                        z[[a * n + i, b * n + j]] = w;
                    }
                }
            }
        }
    }
    Ok(z)
}

fn label_shape(labels: &[Vec<usize>]) -> Result<(usize, usize)> {
    let k = labels.len();
    if k == 0 {
        return Err(Error::InvalidLabels("no scans".into()));
    }
    let n = labels[0].len();
    if n == 0 {
        return Err(Error::InvalidLabels("empty scan".into()));
    }
    if let Some(bad) = labels.iter().position(|l| l.len() != n) {
        return Err(Error::InvalidLabels(format!(
            "scan {bad} has {} labels, scan 0 has {n}",
            labels[bad].len()
        )));
    }
    Ok((k, n))
}

/// Full spectrum of the stacked matrix.
pub fn segmentation_spectrum<T: Real>(z: &StackedSegmentation<T>) -> Result<EigenPairs<T>> {
    sym_eigendecomp(&z.matrix)
}

/// α-rule on an ascending spectrum: the number of eigenvalues larger than
/// `α · Σ` of the `min(10, KN)` largest, at least 1.
pub fn part_count_from_spectrum<T: Real>(values: &[T], alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if values.is_empty() {
        return Err(Error::EmptyInput("spectrum"));
    }
    let top: T = values.iter().rev().take(10).copied().sum();
    let threshold = T::lit(alpha) * top;
    let count = values.iter().filter(|&&l| l > threshold).count();
    Ok(count.max(1))
}

pub fn estimate_part_count<T: Real>(z: &StackedSegmentation<T>, alpha: f64) -> Result<usize> {
    part_count_from_spectrum(&segmentation_spectrum(z)?.values, alpha)
}

/// Synchronized absolute segmentation of all `KN` points.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsoluteSegmentation<T> {
    pub num_parts: usize,
    /// `Γ = U_S diag(√max(λ, 0))`, columns in descending eigenvalue order.
    pub raw: Array2<T>,
    /// Row-wise softmax of `raw`.
    pub fuzzy: Array2<T>,
    /// Row-wise argmax of `raw`, ties to the lowest part.
    pub hard_labels: Vec<usize>,
    /// The `S` leading eigenvalues, descending.
    pub eigenvalues: Vec<T>,
}

impl<T: Real> AbsoluteSegmentation<T> {
    /// Every point in part 0.
    pub fn single_part(rows: usize) -> Self {
        AbsoluteSegmentation {
            num_parts: 1,
            raw: Array2::ones((rows, 1)),
            fuzzy: Array2::ones((rows, 1)),
            hard_labels: vec![0; rows],
            eigenvalues: vec![T::one()],
        }
    }

    /// Hard labels of scan `k` in a stack of `n`-point scans.
    pub fn scan_labels(&self, k: usize, n: usize) -> &[usize] {
        &self.hard_labels[k * n..(k + 1) * n]
    }

    /// Row-wise softmax of `raw` at temperature `fraction · max|raw|`.
    /// Small fractions approach one-hot rows.
    pub fn membership(&self, fraction: f64) -> Array2<T> {
        let peak = self.raw.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        let t = if peak > T::zero() { T::lit(fraction) * peak } else { T::one() };
        row_softmax(self.raw.view(), t)
    }
}

fn row_softmax<T: Real>(m: ArrayView2<'_, T>, t: T) -> Array2<T> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let top = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| ((x - top) / t).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

fn row_argmax<T: Real>(m: ArrayView2<'_, T>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn synchronize_segmentation<T: Real>(z: &StackedSegmentation<T>, s: usize) -> Result<AbsoluteSegmentation<T>> {
    synchronize_from_spectrum(&segmentation_spectrum(z)?, s)
}

/// [`synchronize_segmentation`] from a precomputed spectrum.
pub fn synchronize_from_spectrum<T: Real>(spectrum: &EigenPairs<T>, s: usize) -> Result<AbsoluteSegmentation<T>> {
    let lead = take_extreme(spectrum, s, SpectrumEnd::Largest)?;
    let eigenvalues: Vec<T> = lead.values.iter().rev().copied().collect();
    let largest = eigenvalues[0];
    let smallest = eigenvalues[s - 1];
    if smallest < -(T::lit(1e-6) * largest.abs()) && smallest < -T::tol(1e-8) {
        return Err(Error::NegativeLeadingEigenvalue {
            value: smallest.as_f64(),
            largest: largest.as_f64(),
        });
    }
    let rows = lead.vectors.nrows();
    let mut raw = Array2::<T>::zeros((rows, s));
    for (col, &lambda) in eigenvalues.iter().enumerate() {
        let src = s - 1 - col;
        let scale = lambda.max(T::zero()).sqrt();
        raw.column_mut(col).assign(&lead.vectors.column(src).mapv(|x| x * scale));
    }
    let fuzzy = row_softmax(raw.view(), T::one());
    let hard_labels = row_argmax(raw.view());
    Ok(AbsoluteSegmentation {
        num_parts: s,
        raw,
        fuzzy,
        hard_labels,
        eigenvalues,
    })
}

/// Scaling solution for one part.
#[derive(Clone, Debug, PartialEq)]
pub struct PartScaling<T> {
    /// `J^s_{kl} = wᵏˡ n^l_s` (`k ≠ l`), zero diagonal.
    pub j: Array2<T>,
    /// Unit-norm non-negative Perron vector of `J^s`.
    pub d: Vec<T>,
    pub eigenvalue: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingOracleResult<T> {
    pub parts: Vec<PartScaling<T>>,
    /// Weighted stack `Z̃` with blocks `(1/σᵏˡ) Gᵏ Gˡᵀ`, zero diagonal.
    pub z: Array2<T>,
    /// `Γ_w`: rows of scan `k` are `Gᵏ Dᵏ`.
    pub gamma: Array2<T>,
    /// `‖Z̃ Γ_w − Γ_w diag(λ)‖_F / ‖Γ_w‖_F`.
    pub residual: T,
}

/// Closed-form synchronized segmentation for weighted noiseless input.
///
/// With pair weights `wᵏˡ = 1/σᵏˡ`, the columns of `Γ_w` are eigenvectors of
/// `Z̃` once each part's per-scan scales `d^s` solve the `K × K` problem
/// `J^s d^s = λ_s d^s`.
pub fn weighted_scaling_oracle<T: Real>(labels: &[Vec<usize>], sigmas: &PairTable<T>) -> Result<ScalingOracleResult<T>> {
    let (k, n) = label_shape(labels)?;
    if sigmas.num_scans() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} scans of labels, weights for {}",
            k,
            sigmas.num_scans()
        )));
    }
    let s_count = labels.iter().flatten().copied().max().unwrap_or(0) + 1;
    let mut w = Array2::<T>::zeros((k, k));
    for (a, b) in unordered_pairs(k) {
        let (x, y) = (*sigmas.require(a, b)?, *sigmas.require(b, a)?);
        if !(x > T::zero() && x.is_finite()) || (x - y).abs() > T::tol(1e-12) * x {
            return Err(Error::InvalidConfig(format!(
                "sigma ({a}, {b}) must be positive and symmetric, got {x} and {y}"
            )));
        }
        w[[a, b]] = T::one() / x;
        w[[b, a]] = T::one() / x;
    }
    let counts: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            let mut c = vec![0; s_count];
            l.iter().for_each(|&x| c[x] += 1);
            c
        })
        .collect();

    let mut parts = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let ns: Vec<T> = counts.iter().map(|c| T::from_count(c[s])).collect();
        let j = Array2::from_shape_fn((k, k), |(a, b)| w[[a, b]] * ns[b]);
        let root: Vec<T> = ns.iter().map(|x| x.sqrt()).collect();
        let sym = Array2::from_shape_fn((k, k), |(a, b)| root[a] * w[[a, b]] * root[b]);
        let ep = sym_eigendecomp(&SymmetricMatrix::symmetrized(sym))?;
        let lambda = ep.values[k - 1];
        let u = ep.vectors.column(k - 1);
        let mut d: Vec<T> = (0..k)
            .map(|a| if ns[a] > T::zero() { u[a] / root[a] } else { T::zero() })
            .collect();
        if lambda > T::zero() {
            // Scans without the part still have a well-defined scale.
            let fill: Vec<(usize, T)> = (0..k)
                .filter(|&a| ns[a] == T::zero())
                .map(|a| (a, (0..k).map(|b| j[[a, b]] * d[b]).sum::<T>() / lambda))
                .collect();
            fill.into_iter().for_each(|(a, v)| d[a] = v);
        }
        let norm = d.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::zero() {
            d.iter_mut().for_each(|x| *x = *x / norm);
        } else {
            let e = T::one() / T::from_count(k).sqrt();
            d.iter_mut().for_each(|x| *x = e);
        }
        parts.push(PartScaling { j, d, eigenvalue: lambda });
    }

    let mut gamma = Array2::<T>::zeros((k * n, s_count));
    for (a, l) in labels.iter().enumerate() {
        for (i, &s) in l.iter().enumerate() {
            gamma[[a * n + i, s]] = parts[s].d[a];
        }
    }
    let mut wt = PairTable::new(k);
    for (a, b) in crate::cloud::ordered_pairs(k) {
        wt.insert(a, b, w[[a, b]]);
    }
    let z = label_stack(labels, Some(&wt), false)?;
    let mut diff = z.dot(&gamma);
    for (s, part) in parts.iter().enumerate() {
        let col = gamma.column(s).mapv(|x| x * part.eigenvalue);
        diff.column_mut(s).zip_mut_with(&col, |d, &c| *d = *d - c);
    }
    let fro = |m: &Array2<T>| m.iter().map(|&x| x * x).sum::<T>().sqrt();
    let residual = fro(&diff) / fro(&gamma);
    Ok(ScalingOracleResult {
        parts,
        z,
        gamma,
        residual,
    })
}
