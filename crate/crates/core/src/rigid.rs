//! Weighted Kabsch fits, per-part poses and rigid flow.

use ndarray::ArrayView2;

use crate::cloud::PairTable;
use crate::geometry::svd3;
use crate::perm_sync::ConfidenceField;
use crate::seg_sync::AbsoluteSegmentation;
use crate::{Error, FlowField, Mat3, Real, Result, RigidTransform, ScanSet, Vec3};

/// Outcome of a fit that may have fallen back to a pure translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KabschFit<T> {
    pub transform: RigidTransform<T>,
    /// Weighted cross-covariance had rank < 2; `transform` is translation only.
    pub degenerate: bool,
}

/// Weighted least-squares rigid transform mapping `src` onto `dst`.
///
/// Fails with [`Error::DegenerateConfiguration`] when the weighted points do
/// not span at least a line pair; [`kabsch_or_translation`] returns the
/// fallback instead.
pub fn weighted_kabsch<T: Real>(src: &[Vec3<T>], dst: &[Vec3<T>], weights: &[T]) -> Result<RigidTransform<T>> {
    let fit = kabsch_or_translation(src, dst, weights)?;
    if fit.degenerate {
        return Err(Error::DegenerateConfiguration);
    }
    Ok(fit.transform)
}

pub fn kabsch_or_translation<T: Real>(src: &[Vec3<T>], dst: &[Vec3<T>], weights: &[T]) -> Result<KabschFit<T>> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if weights.len() != src.len() {
        return Err(Error::LengthMismatch(weights.len(), src.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(Error::NonFinite("Kabsch weights"));
    }
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::ZeroWeight);
    }
    let inv = T::one() / total;
    let mut cs = Vec3::zero();
    let mut cd = Vec3::zero();
    for ((&s, &d), &w) in src.iter().zip(dst).zip(weights) {
        cs += s * w;
        cd += d * w;
    }
    let (cs, cd) = (cs * inv, cd * inv);

    let mut h = Mat3::zero();
    let mut spread = T::zero();
    for ((&s, &d), &w) in src.iter().zip(dst).zip(weights) {
        if w == T::zero() {
            continue;
        }
        let (a, b) = (s - cs, d - cd);
        h = h + Mat3::outer(a, b).scale(w);
        spread = spread + w * (a.norm_squared() + b.norm_squared());
    }
    let svd = svd3(&h);
    // Rank < 2 relative to the overall spread of the weighted points.
    let floor = T::tol(1e-12) * spread;
    if !(svd.sigma[1] > floor) {
        return Ok(KabschFit {
            transform: RigidTransform::from_translation(cd - cs),
            degenerate: true,
        });
    }
    // H = U Σ Vᵀ, R = V diag(1, 1, d) Uᵀ.
    let mut v = svd.v;
    if (v * svd.u.transpose()).det() < T::zero() {
        for row in v.m.iter_mut() {
            row[2] = -row[2];
        }
    }
    let r = v * svd.u.transpose();
    Ok(KabschFit {
        transform: RigidTransform::new(r, cd - r * cs),
        degenerate: false,
    })
}

/// Status of one estimated pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFlag {
    Ok,
    /// Less than the minimum effective weight; pose left at identity.
    EmptyPart,
    /// Rank-deficient fit; pose is translation only.
    TranslationOnly,
}

/// `K × S` poses; `poses[k][s]` maps part `s` from the canonical scan into scan `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet<T> {
    pub poses: Vec<Vec<RigidTransform<T>>>,
    pub flags: Vec<Vec<PoseFlag>>,
    pub canonical_scan: usize,
}

impl<T: Real> PoseSet<T> {
    pub fn identity(k: usize, s: usize, canonical_scan: usize) -> Self {
        PoseSet {
            poses: vec![vec![RigidTransform::identity(); s]; k],
            flags: vec![vec![PoseFlag::Ok; s]; k],
            canonical_scan,
        }
    }

    pub fn num_scans(&self) -> usize {
        self.poses.len()
    }

    pub fn num_parts(&self) -> usize {
        self.poses.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: usize, s: usize) -> &RigidTransform<T> {
        &self.poses[k][s]
    }

    pub fn has_empty_parts(&self) -> bool {
        self.flags.iter().flatten().any(|f| *f == PoseFlag::EmptyPart)
    }

    /// Largest rotation (Frobenius) or translation change against `other`,
    /// with `other`'s parts relabelled by `matching[s]`.
    pub fn max_delta(&self, other: &Self, matching: &[usize]) -> T {
        let mut worst = T::zero();
        for (mine, theirs) in self.poses.iter().zip(&other.poses) {
            for (s, pose) in mine.iter().enumerate() {
                let (dr, dt) = pose.distance(&theirs[matching[s]]);
                worst = worst.max(dr).max(dt);
            }
        }
        worst
    }
}

/// Minimum total per-part weight, in points, for a pose to be estimated.
pub const MIN_PART_WEIGHT: f64 = 3.0;

/// Per-part poses by weighted Kabsch from canonical-scan points to their
/// flow-displaced images in every other scan.
///
/// `membership` is `KN × S`; the weight of canonical point `i` for part `s`
/// towards scan `k` is `c^{k*k}_i · membership[k* N + i][s]`.
pub fn per_part_poses<T: Real>(
    scans: &ScanSet<T>,
    flows: &PairTable<FlowField<T>>,
    confidences: &PairTable<ConfidenceField<T>>,
    membership: ArrayView2<'_, T>,
    canonical_scan: usize,
) -> Result<PoseSet<T>> {
    let (k, n) = (scans.num_scans(), scans.num_points());
    if canonical_scan >= k {
        return Err(Error::InvalidConfig(format!(
            "canonical scan {canonical_scan} out of range for {k} scans"
        )));
    }
    if membership.nrows() != k * n || membership.ncols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "membership is {:?}, expected {}x S",
            membership.dim(),
            k * n
        )));
    }
    let s_count = membership.ncols();
    let mut out = PoseSet::identity(k, s_count, canonical_scan);
    let src = &scans.cloud(canonical_scan).points;
    let base = canonical_scan * n;
    for target in (0..k).filter(|&t| t != canonical_scan) {
        let flow = flows.require(canonical_scan, target)?;
        let conf = confidences.require(canonical_scan, target)?;
        if flow.len() != n || conf.per_point.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "pair ({canonical_scan}, {target}) has wrong length"
            )));
        }
        let dst: Vec<Vec3<T>> = src.iter().zip(&flow.vectors).map(|(&x, &f)| x + f).collect();
        for s in 0..s_count {
            let w: Vec<T> = (0..n)
                .map(|i| conf.per_point[i] * membership[[base + i, s]])
                .collect();
            let total: T = w.iter().copied().sum();
            if !(total >= T::lit(MIN_PART_WEIGHT)) {
                out.flags[target][s] = PoseFlag::EmptyPart;
                continue;
            }
            let fit = kabsch_or_translation(src, &dst, &w)?;
            out.poses[target][s] = fit.transform;
            if fit.degenerate {
                out.flags[target][s] = PoseFlag::TranslationOnly;
            }
        }
    }
    Ok(out)
}

/// `f_i = T^l_s (T^k_s)⁻¹ x_i − x_i` with `s` the hard label of point `i` of scan `k`.
pub fn rigid_flow<T: Real>(
    poses: &PoseSet<T>,
    seg: &AbsoluteSegmentation<T>,
    scans: &ScanSet<T>,
    k: usize,
    l: usize,
) -> Result<FlowField<T>> {
    let n = scans.num_points();
    if seg.hard_labels.len() != scans.num_scans() * n {
        return Err(Error::LengthMismatch(seg.hard_labels.len(), scans.num_scans() * n));
    }
    rigid_flow_from_labels(poses, &seg.hard_labels[k * n..(k + 1) * n], scans.cloud(k).points.as_slice(), k, l)
}

/// [`rigid_flow`] with explicit per-point labels for scan `k`.
pub fn rigid_flow_from_labels<T: Real>(
    poses: &PoseSet<T>,
    labels: &[usize],
    points: &[Vec3<T>],
    k: usize,
    l: usize,
) -> Result<FlowField<T>> {
    if labels.len() != points.len() {
        return Err(Error::LengthMismatch(labels.len(), points.len()));
    }
    if k >= poses.num_scans() || l >= poses.num_scans() {
        return Err(Error::ShapeMismatch(format!("pair ({k}, {l}) out of range")));
    }
    let chain: Vec<RigidTransform<T>> = (0..poses.num_parts())
        .map(|s| poses.poses[l][s].compose(&poses.poses[k][s].inverse()))
        .collect();
    let vectors = labels
        .iter()
        .zip(points)
        .map(|(&s, &x)| {
            let t = chain.get(s).ok_or_else(|| {
                Error::InvalidLabels(format!("label {s} with {} parts", chain.len()))
            })?;
            Ok(t.apply(x) - x)
        })
        .collect::<Result<Vec<_>>>()?;
    FlowField::new(k, l, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<Vec3<f64>> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.3, -0.4, 1.5),
            Vec3::new(-1.0, 0.7, 0.2),
        ]
    }

    #[test]
    fn identity_and_translation() {
        let p = pts();
        let w = vec![1.0; p.len()];
        let t = weighted_kabsch(&p, &p, &w).unwrap();
        assert!(t.rotation.frobenius_distance(&Mat3::identity()) < 1e-14);
        assert!(t.translation.norm() < 1e-14);

        let shift = Vec3::new(0.0, 0.0, 5.0);
        let q: Vec<_> = p.iter().map(|&x| x + shift).collect();
        let t = weighted_kabsch(&p, &q, &w).unwrap();
        assert!(t.rotation.frobenius_distance(&Mat3::identity()) < 1e-14);
        assert!((t.translation - shift).norm() < 1e-14);
    }

    #[test]
    fn recovers_rotation_with_reflection_guard() {
        let p = pts();
        let truth = RigidTransform::new(
            Mat3::rotation(Vec3::new(1.0, -2.0, 0.5), 2.9),
            Vec3::new(0.1, 0.2, -0.3),
        );
        let q: Vec<_> = p.iter().map(|&x| truth.apply(x)).collect();
        let t = weighted_kabsch(&p, &q, &[1.0, 2.0, 0.5, 1.0, 3.0]).unwrap();
        let (dr, dt) = t.distance(&truth);
        assert!(dr < 1e-12 && dt < 1e-12);
        assert!((t.rotation.det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planar_points_still_give_rotation() {
        let p: Vec<_> = pts().into_iter().map(|v| Vec3::new(v.x, v.y, 0.0)).collect();
        let truth = RigidTransform::new(Mat3::rotation(Vec3::new(0.0, 1.0, 1.0), 0.7), Vec3::zero());
        let q: Vec<_> = p.iter().map(|&x| truth.apply(x)).collect();
        let t = weighted_kabsch(&p, &q, &[1.0; 5]).unwrap();
        assert!(t.distance(&truth).0 < 1e-12);
    }

    #[test]
    fn collinear_points_fall_back() {
        let p: Vec<_> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let q: Vec<_> = p.iter().map(|&x| x + Vec3::new(0.0, 1.0, 0.0)).collect();
        assert!(matches!(
            weighted_kabsch(&p, &q, &[1.0; 4]),
            Err(Error::DegenerateConfiguration)
        ));
        let fit = kabsch_or_translation(&p, &q, &[1.0; 4]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.transform.rotation, Mat3::identity());
        assert!((fit.transform.translation - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_weights_rejected() {
        let p = pts();
        assert!(matches!(weighted_kabsch(&p, &p, &[0.0; 5]), Err(Error::ZeroWeight)));
    }

    #[test]
    fn rigid_flow_round_trips() {
        let mut poses = PoseSet::<f64>::identity(2, 2, 0);
        poses.poses[1][0] = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        poses.poses[1][1] = RigidTransform::new(Mat3::rotation(Vec3::new(0.0, 0.0, 1.0), 0.5), Vec3::new(0.0, 1.0, 0.0));
        let p = pts();
        let labels = [0, 1, 0, 1, 1];
        let f = rigid_flow_from_labels(&poses, &labels, &p, 0, 1).unwrap();
        assert!((f.vectors[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let moved: Vec<_> = p.iter().zip(&f.vectors).map(|(&x, &v)| x + v).collect();
        let back = rigid_flow_from_labels(&poses, &labels, &moved, 1, 0).unwrap();
        for ((&x, &m), &b) in p.iter().zip(&moved).zip(&back.vectors) {
            assert!((m + b - x).norm() < 1e-12);
        }
        assert!(rigid_flow_from_labels(&poses, &[0, 2, 0, 0, 0], &p, 0, 1).is_err());
    }
}
