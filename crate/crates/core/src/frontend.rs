//! Deterministic geometric front-ends: pairwise flow, per-point confidence,
//! local rigid transforms, the residual matrix `β` and relative segmentation.
//!
//! All neighbour searches are brute force with ties broken by lowest index.

use ndarray::{Array2, Array3};

use crate::perm_sync::{pair_weight, ConfidenceField};
use crate::rigid::kabsch_or_translation;
use crate::{Error, FlowField, PointCloud, Real, Result, RigidTransform, Vec3};

/// How pairwise flow is estimated from two raw clouds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEstimator {
    /// Displacement to the spatially nearest target point.
    Nearest,
    /// Displacement to the target point with the most similar local distance
    /// signature. Invariant to per-part rigid motion.
    #[default]
    Signature,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Neighbourhood size (including the point itself) for local rigid fits.
    pub knn: usize,
    /// Confidence kernel bandwidth.
    pub sigma_c: f64,
    /// Segmentation kernel bandwidth.
    pub sigma_z: f64,
    /// Flow inlier threshold, used squared.
    pub eps_f: f64,
    pub estimator: FlowEstimator,
    /// Neighbours per point in the distance signature.
    pub signature_size: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            knn: 16,
            sigma_c: 0.05,
            sigma_z: 0.10,
            eps_f: 0.1,
            estimator: FlowEstimator::Signature,
            signature_size: 8,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn < 4 {
            return Err(Error::InvalidConfig(format!("knn must be at least 4, got {}", self.knn)));
        }
        for (name, v) in [("sigma_c", self.sigma_c), ("sigma_z", self.sigma_z), ("eps_f", self.eps_f)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.signature_size == 0 {
            return Err(Error::InvalidConfig("signature_size must be positive".into()));
        }
        Ok(())
    }

    /// Copy with bandwidths multiplied by `scale` (e.g. the scene diameter).
    pub fn scaled(&self, scale: f64) -> Self {
        FrontendConfig {
            sigma_c: self.sigma_c * scale,
            sigma_z: self.sigma_z * scale,
            eps_f: self.eps_f * scale,
            ..*self
        }
    }
}

/// Index of the nearest point in `cloud` to `q`; ties go to the lowest index.
fn nearest<T: Real>(cloud: &[Vec3<T>], q: Vec3<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, &p) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// The `k` nearest points of every point in its own cloud, self first,
/// ordered by distance then index.
pub fn knn_indices<T: Real>(cloud: &[Vec3<T>], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(cloud.len());
    cloud
        .iter()
        .map(|&q| {
            let mut idx: Vec<(T, usize)> = cloud
                .iter()
                .enumerate()
                .map(|(j, &p)| ((p - q).norm_squared(), j))
                .collect();
            idx.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
            idx.truncate(k);
            idx.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Index of the nearest target point for every source point.
pub fn nn_matches<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>) -> Result<Vec<usize>> {
    if xk.is_empty() || xl.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(xk.points.iter().map(|&p| nearest(&xl.points, p).0).collect())
}

/// Flow to the nearest target point.
pub fn nn_flow<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>) -> Result<FlowField<T>> {
    flow_from_matches(xk, xl, &nn_matches(xk, xl)?)
}

/// `f_i = y_{m_i} − x_i`.
pub fn flow_from_matches<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>, matches: &[usize]) -> Result<FlowField<T>> {
    if matches.len() != xk.len() {
        return Err(Error::LengthMismatch(matches.len(), xk.len()));
    }
    let vectors = xk
        .points
        .iter()
        .zip(matches)
        .map(|(&p, &j)| {
            xl.points
                .get(j)
                .map(|&q| q - p)
                .ok_or_else(|| Error::ShapeMismatch(format!("match {j} outside target of {} points", xl.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    FlowField::new(xk.scan_id, xl.scan_id, vectors)
}

/// Sorted distances from each point to its `m` nearest other points.
fn signatures<T: Real>(cloud: &[Vec3<T>], m: usize) -> Vec<Vec<T>> {
    cloud
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let mut d: Vec<T> = cloud
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &p)| (p - q).norm())
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            d.truncate(m);
            d
        })
        .collect()
}

/// Index of the target point whose local distance signature is closest.
///
/// Distances within a rigid part are preserved by its motion, so on
/// noiseless data with well-separated parts every point is matched to its
/// true counterpart regardless of how far each part moved.
pub fn signature_matches<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>, m: usize) -> Result<Vec<usize>> {
    if xk.is_empty() || xl.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if m == 0 {
        return Err(Error::InvalidConfig("signature_size must be positive".into()));
    }
    let sk = signatures(&xk.points, m);
    let sl = signatures(&xl.points, m);
    Ok(sk
        .iter()
        .map(|a| {
            let mut best = (0, T::infinity());
            for (j, b) in sl.iter().enumerate() {
                let len = a.len().min(b.len());
                let cost: T = a[..len].iter().zip(&b[..len]).map(|(&x, &y)| (x - y) * (x - y)).sum();
                if cost < best.1 {
                    best = (j, cost);
                }
            }
            best.0
        })
        .collect())
}

pub fn signature_flow<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>, m: usize) -> Result<FlowField<T>> {
    flow_from_matches(xk, xl, &signature_matches(xk, xl, m)?)
}

/// Matches from the configured estimator.
pub fn estimate_matches<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>, cfg: &FrontendConfig) -> Result<Vec<usize>> {
    match cfg.estimator {
        FlowEstimator::Nearest => nn_matches(xk, xl),
        FlowEstimator::Signature => signature_matches(xk, xl, cfg.signature_size),
    }
}

/// Flow from the configured estimator.
pub fn estimate_flow<T: Real>(xk: &PointCloud<T>, xl: &PointCloud<T>, cfg: &FrontendConfig) -> Result<FlowField<T>> {
    flow_from_matches(xk, xl, &estimate_matches(xk, xl, cfg)?)
}

/// `c_i = exp(−r_i²/σ_c²)` with `r_i` the distance from the warped point to
/// its nearest target.
pub fn flow_confidence<T: Real>(
    xk: &PointCloud<T>,
    xl: &PointCloud<T>,
    flow: &FlowField<T>,
    cfg: &FrontendConfig,
) -> Result<ConfidenceField<T>> {
    if flow.len() != xk.len() {
        return Err(Error::ShapeMismatch(format!(
            "flow has {} vectors for {} points",
            flow.len(),
            xk.len()
        )));
    }
    if xl.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let s2 = T::lit(cfg.sigma_c * cfg.sigma_c);
    let per_point = xk
        .points
        .iter()
        .zip(&flow.vectors)
        .map(|(&p, &f)| {
            let w = p + f;
            if !w.is_finite() {
                return Err(Error::NonFinite("warped point"));
            }
            Ok((-nearest(&xl.points, w).1 / s2).exp())
        })
        .collect::<Result<Vec<T>>>()?;
    let pair_weight = pair_weight(&per_point)?;
    Ok(ConfidenceField {
        source: xk.scan_id,
        target: xl.scan_id,
        per_point,
        pair_weight,
    })
}

/// One rigid transform per source point.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTransformField<T> {
    pub source: usize,
    pub target: usize,
    pub transforms: Vec<RigidTransform<T>>,
    /// Neighbourhood fit was rank-deficient; transform is translation only.
    pub degenerate: Vec<bool>,
}

/// Weighted Kabsch over the `knn` nearest source neighbours of every point,
/// mapping `x_j → x_j + f_j` with weights `conf`.
///
/// Neighbourhoods whose confidences are all zero are fitted with uniform
/// weights.
pub fn local_rigid_transforms<T: Real>(
    xk: &PointCloud<T>,
    flow: &FlowField<T>,
    conf: &[T],
    cfg: &FrontendConfig,
) -> Result<LocalTransformField<T>> {
    let n = xk.len();
    if flow.len() != n || conf.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} points, {} flow vectors, {} confidences",
            flow.len(),
            conf.len()
        )));
    }
    if n < cfg.knn {
        return Err(Error::InvalidConfig(format!("knn {} exceeds point count {n}", cfg.knn)));
    }
    let neighbours = knn_indices(&xk.points, cfg.knn);
    let mut transforms = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let mut src = Vec::with_capacity(cfg.knn);
    let mut dst = Vec::with_capacity(cfg.knn);
    let mut w = Vec::with_capacity(cfg.knn);
    for nb in &neighbours {
        src.clear();
        dst.clear();
        w.clear();
        for &j in nb {
            src.push(xk.points[j]);
            dst.push(xk.points[j] + flow.vectors[j]);
            w.push(conf[j]);
        }
        if !(w.iter().copied().sum::<T>() > T::zero()) {
            w.iter_mut().for_each(|x| *x = T::one());
        }
        let fit = kabsch_or_translation(&src, &dst, &w)?;
        transforms.push(fit.transform);
        degenerate.push(fit.degenerate);
    }
    Ok(LocalTransformField {
        source: flow.source,
        target: flow.target,
        transforms,
        degenerate,
    })
}

/// `N × N × 3` residuals `β_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMatrix<T> {
    pub source: usize,
    pub target: usize,
    pub beta: Array3<T>,
}

/// `β_ij = (T'_i)⁻¹ y_j − (y_j + f^{lk}_j)`.
pub fn residual_beta<T: Real>(
    ltf: &LocalTransformField<T>,
    xl: &PointCloud<T>,
    flow_lk: &FlowField<T>,
) -> Result<ResidualMatrix<T>> {
    if flow_lk.len() != xl.len() {
        return Err(Error::ShapeMismatch(format!(
            "reverse flow has {} vectors for {} points",
            flow_lk.len(),
            xl.len()
        )));
    }
    let back: Vec<Vec3<T>> = xl.points.iter().zip(&flow_lk.vectors).map(|(&y, &f)| y + f).collect();
    let mut beta = Array3::<T>::zeros((ltf.transforms.len(), xl.len(), 3));
    for (i, t) in ltf.transforms.iter().enumerate() {
        let inv = t.inverse();
        for (j, (&y, &b)) in xl.points.iter().zip(&back).enumerate() {
            let r = inv.apply(y) - b;
            if !r.is_finite() {
                return Err(Error::NonFinite("residual matrix"));
            }
            beta[[i, j, 0]] = r.x;
            beta[[i, j, 1]] = r.y;
            beta[[i, j, 2]] = r.z;
        }
    }
    Ok(ResidualMatrix {
        source: ltf.source,
        target: ltf.target,
        beta,
    })
}

/// Pairwise co-membership scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeSegmentation<T> {
    pub source: usize,
    pub target: usize,
    pub zhat: Array2<T>,
}

/// `ẑ_ij = exp(−‖β_ij‖²/σ_z²)`.
pub fn relative_segmentation<T: Real>(beta: &ResidualMatrix<T>, cfg: &FrontendConfig) -> Result<RelativeSegmentation<T>> {
    let s2 = T::lit(cfg.sigma_z * cfg.sigma_z);
    let (n, m, _) = beta.beta.dim();
    let mut zhat = Array2::<T>::zeros((n, m));
    for ((i, j), z) in zhat.indexed_iter_mut() {
        let b = &beta.beta;
        let r2 = b[[i, j, 0]] * b[[i, j, 0]] + b[[i, j, 1]] * b[[i, j, 1]] + b[[i, j, 2]] * b[[i, j, 2]];
        if !r2.is_finite() {
            return Err(Error::NonFinite("residual matrix"));
        }
        *z = (-r2 / s2).exp();
    }
    Ok(RelativeSegmentation {
        source: beta.source,
        target: beta.target,
        zhat,
    })
}
