//! Weighted permutation synchronization.
//!
//! Each pairwise flow induces a row-stochastic soft assignment between two
//! scans. The assignments, weighted by per-pair confidence, are tiled into a
//! weighted graph connection Laplacian `L`; its `N` eigenvectors with smallest
//! eigenvalues stacked as `P̄` (`KN × N`) give multi-way consistent
//! correspondences `P̂ᵏˡ`, the `(k, l)` blocks of `P̄ P̄ᵀ`. A sharpened softmax
//! over each block turns it back into a flow.

use ndarray::{s, Array2, ArrayView2, Zip};

use crate::cloud::{is_connected, unordered_pairs, PairTable};
use crate::spectral::{sym_eigendecomp, take_extreme, SpectrumEnd, SymmetricMatrix};
use crate::{Error, FlowField, PointCloud, Real, Result, Vec3};

/// Softmax temperature used when turning synchronized blocks into flow.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTemperature {
    /// Fixed temperature in score units.
    Fixed(f64),
    /// Fraction of the largest entry of each block.
    Adaptive(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    /// Temperature of the distance softmax (squared scene units).
    pub tau: f64,
    pub flow_temperature: FlowTemperature,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            tau: 0.01,
            flow_temperature: FlowTemperature::Adaptive(0.03),
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::TemperatureNonPositive(self.tau));
        }
        match self.flow_temperature {
            FlowTemperature::Fixed(t) | FlowTemperature::Adaptive(t) if !(t > 0.0) => {
                Err(Error::TemperatureNonPositive(t))
            }
            _ => Ok(()),
        }
    }
}

/// Row-stochastic `N × N` assignment from scan `source` to scan `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment<T> {
    pub source: usize,
    pub target: usize,
    pub matrix: Array2<T>,
}

impl<T: Real> SoftAssignment<T> {
    /// The reverse direction as the row-renormalized transpose.
    pub fn reversed(&self) -> Self {
        let mut m = self.matrix.t().to_owned();
        normalize_rows(&mut m);
        SoftAssignment {
            source: self.target,
            target: self.source,
            matrix: m,
        }
    }
}

fn normalize_rows<T: Real>(m: &mut Array2<T>) {
    let n = m.ncols();
    for mut row in m.rows_mut() {
        let sum: T = row.iter().copied().sum();
        if sum > T::zero() {
            row.mapv_inplace(|x| x / sum);
        } else {
            row.fill(T::one() / T::from_count(n));
        }
    }
}

/// Per-point confidences of one directed flow and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceField<T> {
    pub source: usize,
    pub target: usize,
    pub per_point: Vec<T>,
    pub pair_weight: T,
}

/// Soft assignment induced by warping `xk` with `flow`:
/// `P_ij ∝ exp(−‖x_i + f_i − y_j‖² / τ)`.
pub fn soft_assignment_from_flow<T: Real>(
    xk: &PointCloud<T>,
    xl: &PointCloud<T>,
    flow: &FlowField<T>,
    cfg: &SyncConfig,
) -> Result<SoftAssignment<T>> {
    cfg.validate()?;
    if flow.source != xk.scan_id || flow.target != xl.scan_id {
        return Err(Error::ShapeMismatch(format!(
            "flow ({}, {}) does not connect scans ({}, {})",
            flow.source, flow.target, xk.scan_id, xl.scan_id
        )));
    }
    if flow.len() != xk.len() {
        return Err(Error::ShapeMismatch(format!(
            "flow has {} vectors for {} points",
            flow.len(),
            xk.len()
        )));
    }
    let tau = T::lit(cfg.tau);
    let (n, m) = (xk.len(), xl.len());
    let mut matrix = Array2::<T>::zeros((n, m));
    for (i, mut row) in matrix.rows_mut().into_iter().enumerate() {
        let warped = xk.points[i] + flow.vectors[i];
        if !warped.is_finite() {
            return Err(Error::NonFinite("warped point"));
        }
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (warped - xl.points[j]).norm_squared();
        }
        let closest = row.iter().copied().fold(T::infinity(), T::min);
        row.mapv_inplace(|d| (-(d - closest) / tau).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|p| p / sum);
    }
    Ok(SoftAssignment {
        source: xk.scan_id,
        target: xl.scan_id,
        matrix,
    })
}

/// Pair weight: the mean per-point confidence.
pub fn pair_weight<T: Real>(conf: &[T]) -> Result<T> {
    if conf.is_empty() {
        return Err(Error::EmptyInput("confidence list"));
    }
    Ok(conf.iter().copied().sum::<T>() / T::from_count(conf.len()))
}

/// Makes pair data symmetric: missing reverse assignments become the
/// row-renormalized transpose, and both directions get the averaged weight.
pub fn symmetrize_pairs<T: Real>(
    assignments: &mut PairTable<SoftAssignment<T>>,
    weights: &mut PairTable<T>,
) -> Result<()> {
    let k = assignments.num_scans();
    for (a, b) in unordered_pairs(k) {
        match (assignments.contains(a, b), assignments.contains(b, a)) {
            (true, false) => {
                let r = assignments.require(a, b)?.reversed();
                assignments.insert(b, a, r);
            }
            (false, true) => {
                let r = assignments.require(b, a)?.reversed();
                assignments.insert(a, b, r);
            }
            (false, false) => return Err(Error::MissingPair(a, b)),
            (true, true) => {}
        }
        let w = match (weights.get(a, b), weights.get(b, a)) {
            (Some(&x), Some(&y)) => (x + y) * T::lit(0.5),
            (Some(&x), None) | (None, Some(&x)) => x,
            (None, None) => return Err(Error::MissingPair(a, b)),
        };
        weights.insert(a, b, w);
        weights.insert(b, a, w);
    }
    Ok(())
}

/// Weighted graph connection Laplacian: block `(k, k)` is `wᵏ I` with
/// `wᵏ = Σ_{l≠k} wᵏˡ`, block `(k, l)` is `−wᵏˡ Pᵏˡ`; returned symmetrized.
pub fn build_weighted_gcl<T: Real>(
    assignments: &PairTable<SoftAssignment<T>>,
    weights: &PairTable<T>,
    k: usize,
    n: usize,
) -> Result<SymmetricMatrix<T>> {
    let tol = T::tol(1e-9);
    let mut l = Array2::<T>::zeros((k * n, k * n));
    for a in 0..k {
        let mut degree = T::zero();
        for b in (0..k).filter(|&b| b != a) {
            let p = assignments.require(a, b)?;
            if p.matrix.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "assignment ({a}, {b}) is {:?}, expected {n}x{n}",
                    p.matrix.dim()
                )));
            }
            let w = *weights.require(a, b)?;
            let w_rev = *weights.require(b, a)?;
            if (w - w_rev).abs() > tol {
                return Err(Error::WeightMismatch {
                    k: a,
                    l: b,
                    forward: w.as_f64(),
                    backward: w_rev.as_f64(),
                });
            }
            degree = degree + w;
            let mut block = l.slice_mut(s![a * n..(a + 1) * n, b * n..(b + 1) * n]);
            Zip::from(&mut block).and(&p.matrix).for_each(|dst, &x| *dst = -w * x);
        }
        for i in 0..n {
            l[[a * n + i, a * n + i]] = degree;
        }
    }
    Ok(SymmetricMatrix::symmetrized(l))
}

/// Result of permutation synchronization.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncedCorrespondences<T> {
    k: usize,
    n: usize,
    /// Stacked `P̄` (`KN × N`), orthonormal columns. Defined up to a right
    /// orthogonal factor; only `P̄ P̄ᵀ` is meaningful.
    pub embedding: Array2<T>,
    gram: Array2<T>,
}

impl<T: Real> SyncedCorrespondences<T> {
    pub fn from_embedding(embedding: Array2<T>, k: usize, n: usize) -> Result<Self> {
        if embedding.nrows() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "embedding has {} rows, expected {}",
                embedding.nrows(),
                k * n
            )));
        }
        let gram = embedding.dot(&embedding.t());
        Ok(SyncedCorrespondences { k, n, embedding, gram })
    }

    pub fn num_scans(&self) -> usize {
        self.k
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    /// Synchronized soft correspondence `P̂ᵏˡ`.
    pub fn block(&self, k: usize, l: usize) -> ArrayView2<'_, T> {
        let n = self.n;
        self.gram.slice(s![k * n..(k + 1) * n, l * n..(l + 1) * n])
    }
}

/// Spectral solution: the `N` eigenvectors of the Laplacian with smallest eigenvalues.
pub fn synchronize_permutations<T: Real>(
    gcl: &SymmetricMatrix<T>,
    k: usize,
    n: usize,
) -> Result<SyncedCorrespondences<T>> {
    if gcl.dim() != k * n {
        return Err(Error::ShapeMismatch(format!(
            "Laplacian is {0}x{0}, expected {1}x{1}",
            gcl.dim(),
            k * n
        )));
    }
    let entries = gcl.entries();
    let edges = unordered_pairs(k).filter(|&(a, b)| {
        entries
            .slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n])
            .iter()
            .any(|&x| x != T::zero())
    });
    if !is_connected(k, edges) {
        return Err(Error::DisconnectedGraph);
    }
    let spectrum = sym_eigendecomp(gcl)?;
    let low = take_extreme(&spectrum, n, SpectrumEnd::Smallest)?;
    SyncedCorrespondences::from_embedding(low.vectors, k, n)
}

/// Flow induced by a synchronized block through a sharpened softmax:
/// `f̂_i = Σ_j e^{P̂_ij/t} (y_j − x_i) / Σ_j e^{P̂_ij/t}`.
pub fn induced_flow<T: Real>(
    block: ArrayView2<'_, T>,
    xk: &PointCloud<T>,
    xl: &PointCloud<T>,
    cfg: &SyncConfig,
) -> Result<FlowField<T>> {
    cfg.validate()?;
    if block.dim() != (xk.len(), xl.len()) {
        return Err(Error::ShapeMismatch(format!(
            "block is {:?}, clouds have {} and {} points",
            block.dim(),
            xk.len(),
            xl.len()
        )));
    }
    if block.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("synchronized block"));
    }
    let t = match cfg.flow_temperature {
        FlowTemperature::Fixed(t) => T::lit(t),
        FlowTemperature::Adaptive(frac) => {
            let peak = block.iter().copied().fold(T::neg_infinity(), T::max);
            let scale = if peak > T::zero() {
                peak
            } else {
                block.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
            };
            if scale > T::zero() {
                T::lit(frac) * scale
            } else {
                T::one()
            }
        }
    };
    let mut vectors = Vec::with_capacity(xk.len());
    for (i, row) in block.rows().into_iter().enumerate() {
        let top = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut acc = Vec3::zero();
        let mut total = T::zero();
        for (j, &score) in row.iter().enumerate() {
            let w = ((score - top) / t).exp();
            acc += xl.points[j] * w;
            total = total + w;
        }
        let f = acc * (T::one() / total) - xk.points[i];
        if !f.is_finite() {
            return Err(Error::NonFinite("induced flow"));
        }
        vectors.push(f);
    }
    FlowField::new(xk.scan_id, xl.scan_id, vectors)
}

/// `E(P̄) = Σ_k Σ_{l≠k} wᵏˡ ‖Pᵏ − Pᵏˡ Pˡ‖²_F` with `Pᵏ` the `k`-th `N`-row block of `P̄`.
pub fn sync_energy<T: Real>(
    pbar: ArrayView2<'_, T>,
    assignments: &PairTable<SoftAssignment<T>>,
    weights: &PairTable<T>,
) -> Result<T> {
    let k = assignments.num_scans();
    if k == 0 || !pbar.nrows().is_multiple_of(k) {
        return Err(Error::ShapeMismatch(format!(
            "embedding with {} rows cannot hold {k} scans",
            pbar.nrows()
        )));
    }
    let n = pbar.nrows() / k;
    let block = |a: usize| pbar.slice(s![a * n..(a + 1) * n, ..]);
    let mut energy = T::zero();
    for a in 0..k {
        for b in (0..k).filter(|&b| b != a) {
            let p = assignments.require(a, b)?;
            if p.matrix.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "assignment ({a}, {b}) is {:?}, expected {n}x{n}",
                    p.matrix.dim()
                )));
            }
            let w = *weights.require(a, b)?;
            let diff = &block(a) - &p.matrix.dot(&block(b));
            energy = energy + w * diff.iter().map(|&x| x * x).sum::<T>();
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud(points: &[[f64; 3]], id: usize) -> PointCloud<f64> {
        PointCloud::new(points.iter().map(|&p| Vec3::from(p)).collect(), id).unwrap()
    }

    fn flow(k: usize, l: usize, v: &[[f64; 3]]) -> FlowField<f64> {
        FlowField::new(k, l, v.iter().map(|&p| Vec3::from(p)).collect()).unwrap()
    }

    #[test]
    fn single_candidate_gets_all_mass() {
        let p = soft_assignment_from_flow(
            &cloud(&[[0.0; 3]], 0),
            &cloud(&[[0.0; 3]], 1),
            &flow(0, 1, &[[0.0; 3]]),
            &SyncConfig::default(),
        )
        .unwrap();
        assert_eq!(p.matrix, array![[1.0]]);
    }

    #[test]
    fn equidistant_targets_split_evenly() {
        let p = soft_assignment_from_flow(
            &cloud(&[[0.0; 3], [5.0, 0.0, 0.0]], 0),
            &cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], 1),
            &flow(0, 1, &[[0.0; 3], [0.0; 3]]),
            &SyncConfig::default(),
        )
        .unwrap();
        assert_eq!(p.matrix.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn nearer_target_dominates() {
        // δ row [0, 1] at τ = 0.01.
        let p = soft_assignment_from_flow(
            &cloud(&[[0.0; 3], [0.0; 3]], 0),
            &cloud(&[[0.0; 3], [1.0, 0.0, 0.0]], 1),
            &flow(0, 1, &[[0.0; 3], [0.0; 3]]),
            &SyncConfig::default(),
        )
        .unwrap();
        let small = (-100.0f64).exp();
        assert!((p.matrix[[0, 0]] - 1.0 / (1.0 + small)).abs() < 1e-16);
        assert!((p.matrix[[0, 1]] - small / (1.0 + small)).abs() < 1e-58);
        assert!((p.matrix[[0, 1]] - 3.7e-44).abs() < 1e-45);
    }

    #[test]
    fn rejects_bad_temperature_and_mismatched_flow() {
        let cfg = SyncConfig {
            tau: 0.0,
            ..SyncConfig::default()
        };
        let x = cloud(&[[0.0; 3]], 0);
        let y = cloud(&[[0.0; 3]], 1);
        assert!(matches!(
            soft_assignment_from_flow(&x, &y, &flow(0, 1, &[[0.0; 3]]), &cfg),
            Err(Error::TemperatureNonPositive(_))
        ));
        assert!(soft_assignment_from_flow(&x, &y, &flow(1, 0, &[[0.0; 3]]), &SyncConfig::default()).is_err());
    }

    #[test]
    fn pair_weight_is_mean() {
        assert_eq!(pair_weight(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(pair_weight(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((pair_weight::<f64>(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(pair_weight::<f64>(&[]), Err(Error::EmptyInput(_))));
    }

    fn identity_tables(k: usize, n: usize, w: f64) -> (PairTable<SoftAssignment<f64>>, PairTable<f64>) {
        let mut a = PairTable::new(k);
        let mut ws = PairTable::new(k);
        for (s, t) in crate::cloud::ordered_pairs(k) {
            a.insert(
                s,
                t,
                SoftAssignment {
                    source: s,
                    target: t,
                    matrix: Array2::eye(n),
                },
            );
            ws.insert(s, t, w);
        }
        (a, ws)
    }

    #[test]
    fn two_scan_gcl_spectrum() {
        let (a, w) = identity_tables(2, 2, 1.0);
        let l = build_weighted_gcl(&a, &w, 2, 2).unwrap();
        let expected = array![
            [1.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, -1.0],
            [-1.0, 0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0, 1.0]
        ];
        assert_eq!(l.entries(), expected);
        let ep = sym_eigendecomp(&l).unwrap();
        for (v, e) in ep.values.iter().zip([0.0, 0.0, 2.0, 2.0]) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weight_gcl_is_zero() {
        let (a, w) = identity_tables(2, 3, 0.0);
        let l = build_weighted_gcl(&a, &w, 2, 3).unwrap();
        assert!(l.entries().iter().all(|&x| x == 0.0));
        assert!(matches!(
            synchronize_permutations(&l, 2, 3),
            Err(Error::DisconnectedGraph)
        ));
    }

    #[test]
    fn complete_graph_gcl() {
        let (a, w) = identity_tables(3, 2, 1.0);
        let l = build_weighted_gcl(&a, &w, 3, 2).unwrap();
        for i in 0..6 {
            assert_eq!(l.entries()[[i, i]], 2.0);
        }
        let ep = sym_eigendecomp(&l).unwrap();
        assert!(ep.values[..2].iter().all(|v| v.abs() < 1e-14));
        assert!((ep.values[2] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gcl_checks_pairs_and_weights() {
        let (mut a, mut w) = identity_tables(3, 2, 1.0);
        w.insert(0, 1, 0.5);
        assert!(matches!(
            build_weighted_gcl(&a, &w, 3, 2),
            Err(Error::WeightMismatch { .. })
        ));
        w.insert(0, 1, 1.0);
        a.remove(2, 1);
        assert!(matches!(build_weighted_gcl(&a, &w, 3, 2), Err(Error::MissingPair(2, 1))));
        symmetrize_pairs(&mut a, &mut w).unwrap();
        assert!(build_weighted_gcl(&a, &w, 3, 2).is_ok());
    }

    #[test]
    fn identity_inputs_sync_to_scaled_identity() {
        let (a, w) = identity_tables(3, 4, 1.0);
        let l = build_weighted_gcl(&a, &w, 3, 4).unwrap();
        let synced = synchronize_permutations(&l, 3, 4).unwrap();
        for (k, l) in crate::cloud::ordered_pairs(3) {
            let b = synced.block(k, l);
            for i in 0..4 {
                for j in 0..4 {
                    let e = if i == j { 1.0 / 3.0 } else { 0.0 };
                    assert!((b[[i, j]] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn induced_flow_limits() {
        let xk = cloud(&[[0.0; 3], [0.0, 1.0, 0.0]], 0);
        let xl = cloud(&[[1.0, 0.0, 0.0], [2.0, 2.0, 2.0]], 1);
        let cfg = SyncConfig::default();

        let one_hot = array![[1.0, 0.0], [0.0, 1.0]];
        let f = induced_flow(one_hot.view(), &xk, &xl, &cfg).unwrap();
        assert!((f.vectors[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
        assert!((f.vectors[1] - Vec3::new(2.0, 1.0, 2.0)).norm() < 1e-6);

        let flat = array![[0.3, 0.3], [0.3, 0.3]];
        let f = induced_flow(flat.view(), &xk, &xl, &cfg).unwrap();
        let centroid = Vec3::new(1.5, 1.0, 1.0);
        assert!((f.vectors[0] - centroid).norm() < 1e-15);
        assert!((f.vectors[1] - (centroid - Vec3::new(0.0, 1.0, 0.0))).norm() < 1e-15);
    }

    #[test]
    fn induced_flow_three_to_one() {
        let t = 0.2;
        let cfg = SyncConfig {
            flow_temperature: FlowTemperature::Fixed(t),
            ..SyncConfig::default()
        };
        let xk = cloud(&[[0.0; 3], [0.0; 3]], 0);
        let xl = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]], 1);
        let block = array![[3.0f64.ln() * t, 0.0], [0.0, 0.0]];
        let f = induced_flow(block.view(), &xk, &xl, &cfg).unwrap();
        assert!((f.vectors[0] - Vec3::new(0.25, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn energy_of_split_embedding() {
        // P¹ = I, P² = 0, P¹² = P²¹ = I: each ordered term contributes N.
        let n = 3;
        let (a, w) = identity_tables(2, n, 1.0);
        let mut pbar = Array2::zeros((2 * n, n));
        pbar.slice_mut(s![0..n, ..]).assign(&Array2::eye(n));
        assert_eq!(sync_energy(pbar.view(), &a, &w).unwrap(), 2.0 * n as f64);
    }
}
