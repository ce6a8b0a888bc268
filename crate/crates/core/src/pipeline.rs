//! The iterated pipeline: flow → permutation sync → segmentation sync → poses.
//!
//! Iteration 1 treats the scene as a single rigid part, which gives a global
//! pre-alignment. Every later iteration moves each point of scan `k` into the
//! canonical frame with its part's current pose, re-estimates matches between
//! the canonicalized clouds and expresses them as flow between the original
//! clouds, then reruns synchronization, segmentation and pose fitting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cloud::{is_connected, ordered_pairs, unordered_pairs, PairTable};
use crate::frontend::{
    estimate_matches, flow_confidence, flow_from_matches, local_rigid_transforms, relative_segmentation,
    residual_beta, FlowEstimator, FrontendConfig, RelativeSegmentation,
};
use crate::metrics::hungarian_assignment;
use crate::perm_sync::{
    build_weighted_gcl, induced_flow, soft_assignment_from_flow, symmetrize_pairs, synchronize_permutations,
    ConfidenceField, SyncConfig,
};
use crate::rigid::{per_part_poses, rigid_flow};
use crate::seg_sync::{
    build_stacked, normalize_relative, part_count_from_spectrum, segmentation_spectrum, synchronize_from_spectrum,
    AbsoluteSegmentation,
};
use crate::{Error, FlowField, PointCloud, PoseSet, Real, Result, ScanSet};

/// Switches that disable parts of the method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Skip permutation synchronization and use raw pairwise flow.
    pub no_sync: bool,
    /// Give every pair weight 1 in the connection Laplacian.
    pub unweighted: bool,
    /// Skip mean normalization of relative segmentations.
    pub unnormalized_z: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sync: SyncConfig,
    pub frontend: FrontendConfig,
    /// Interpret `sigma_c`, `sigma_z` and `eps_f` as fractions of the scan-set diameter.
    pub relative_bandwidths: bool,
    /// Shrink `knn` to `max(4, N/16)` for small clouds.
    pub adaptive_knn: bool,
    /// Match estimator on clouds already aligned part by part.
    pub refine_estimator: FlowEstimator,
    pub iterations: usize,
    pub alpha: f64,
    pub canonical_scan: usize,
    /// Fixed part count instead of the α-rule.
    pub parts: Option<usize>,
    pub ablation: AblationFlags,
    /// Softmax temperature of the Kabsch part weights, as a fraction of `max |Γ|`.
    pub membership_temperature: f64,
    /// Stop once no pose moves more than this between iterations.
    pub convergence_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sync: SyncConfig::default(),
            frontend: FrontendConfig::default(),
            relative_bandwidths: true,
            adaptive_knn: true,
            refine_estimator: FlowEstimator::Nearest,
            iterations: 4,
            alpha: 0.15,
            canonical_scan: 0,
            parts: None,
            ablation: AblationFlags::default(),
            membership_temperature: 0.03,
            convergence_tol: 1e-6,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sync.validate()?;
        self.frontend.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.parts == Some(0) {
            return bad("parts override must be positive".into());
        }
        if !(self.membership_temperature > 0.0) {
            return Err(Error::TemperatureNonPositive(self.membership_temperature));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative".into());
        }
        Ok(())
    }

    /// Front-end settings in absolute units for these scans.
    pub fn resolve_frontend<T: Real>(&self, scans: &ScanSet<T>) -> FrontendConfig {
        let mut fe = if self.relative_bandwidths {
            self.frontend.scaled(scans.diameter().as_f64())
        } else {
            self.frontend
        };
        if self.adaptive_knn {
            fe.knn = fe.knn.min((scans.num_points() / 16).max(4));
        }
        fe.knn = fe.knn.min(scans.num_points());
        fe
    }
}

/// Everything computed in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationState<T> {
    pub iteration: usize,
    /// Raw pairwise matches (target index per source point).
    pub matches: PairTable<Vec<usize>>,
    /// Confidence of the raw flows; `pair_weight` is the value used in the Laplacian.
    pub confidences: PairTable<ConfidenceField<T>>,
    /// Synchronized flows (raw flows under `no_sync`).
    pub flows: PairTable<FlowField<T>>,
    /// Confidence of `flows`, used as Kabsch weights.
    pub flow_confidences: PairTable<ConfidenceField<T>>,
    pub segmentation: AbsoluteSegmentation<T>,
    pub poses: PoseSet<T>,
    /// `T^l_s (T^k_s)⁻¹ x − x` with hard labels.
    pub rigid_flows: PairTable<FlowField<T>>,
    /// Largest pose change from the previous iteration after part matching.
    pub pose_delta: Option<T>,
}

impl<T: Real> IterationState<T> {
    pub fn num_parts(&self) -> usize {
        self.segmentation.num_parts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult<T> {
    pub iterations: Vec<IterationState<T>>,
    pub num_scans: usize,
    pub num_points: usize,
}

impl<T: Real> PipelineResult<T> {
    pub fn last(&self) -> &IterationState<T> {
        self.iterations.last().expect("at least one iteration")
    }

    /// Final hard labels split per scan.
    pub fn labels(&self) -> Vec<Vec<usize>> {
        split_labels(&self.last().segmentation.hard_labels, self.num_points)
    }
}

pub(crate) fn split_labels(flat: &[usize], n: usize) -> Vec<Vec<usize>> {
    flat.chunks(n).map(<[usize]>::to_vec).collect()
}

/// Called on each raw pairwise flow before it enters synchronization:
/// `(iteration, source, target, flow)`.
pub type FlowHook<'a, T> = dyn FnMut(usize, usize, usize, &mut FlowField<T>) -> Result<()> + 'a;

pub fn run_pipeline<T: Real>(scans: &ScanSet<T>, cfg: &PipelineConfig) -> Result<PipelineResult<T>> {
    run_pipeline_with(scans, cfg, &mut |_, _, _, _| Ok(()))
}

/// [`run_pipeline`] with a hook that may alter each raw flow.
pub fn run_pipeline_with<T: Real>(
    scans: &ScanSet<T>,
    cfg: &PipelineConfig,
    hook: &mut FlowHook<'_, T>,
) -> Result<PipelineResult<T>> {
    cfg.validate()?;
    if cfg.canonical_scan >= scans.num_scans() {
        return Err(Error::InvalidConfig(format!(
            "canonical scan {} out of range for {} scans",
            cfg.canonical_scan,
            scans.num_scans()
        )));
    }
    // Every bandwidth and fit degenerates when all points coincide.
    if !(scans.diameter() > T::zero()) {
        return Err(Error::DegenerateConfiguration);
    }
    let fe = cfg.resolve_frontend(scans);
    let mut result = PipelineResult {
        iterations: Vec::with_capacity(cfg.iterations),
        num_scans: scans.num_scans(),
        num_points: scans.num_points(),
    };
    for _ in 0..cfg.iterations {
        let next = refine_iteration(result.iterations.last(), scans, cfg, &fe, hook)?;
        let done = next.pose_delta.is_some_and(|d| d.as_f64() < cfg.convergence_tol);
        result.iterations.push(next);
        if done {
            break;
        }
    }
    Ok(result)
}

/// One pass of the pipeline, starting from `prev` (or from scratch).
pub fn refine_iteration<T: Real>(
    prev: Option<&IterationState<T>>,
    scans: &ScanSet<T>,
    cfg: &PipelineConfig,
    fe: &FrontendConfig,
    hook: &mut FlowHook<'_, T>,
) -> Result<IterationState<T>> {
    let (k, n) = (scans.num_scans(), scans.num_points());
    let iteration = prev.map_or(1, |p| p.iteration + 1);

    // 1. Raw flows, matched on canonicalized clouds after the first pass.
    let canon = match prev {
        Some(p) => canonicalize(scans, p)?,
        None => scans.clone(),
    };
    let estimator_cfg = FrontendConfig {
        estimator: match prev {
            Some(p) if p.num_parts() > 1 || p.iteration > 1 => cfg.refine_estimator,
            _ => fe.estimator,
        },
        ..*fe
    };
    let mut matches = PairTable::new(k);
    let mut raw = PairTable::new(k);
    for (a, b) in ordered_pairs(k) {
        let m = estimate_matches(canon.cloud(a), canon.cloud(b), &estimator_cfg)?;
        let mut f = flow_from_matches(scans.cloud(a), scans.cloud(b), &m)?;
        hook(iteration, a, b, &mut f)?;
        raw.insert(a, b, f);
        matches.insert(a, b, m);
    }

    // 2. Confidences and pair weights.
    let mut confidences = PairTable::new(k);
    let mut weights = PairTable::new(k);
    for ((a, b), f) in raw.iter() {
        let c = flow_confidence(scans.cloud(a), scans.cloud(b), f, fe)?;
        weights.insert(a, b, if cfg.ablation.unweighted { T::one() } else { c.pair_weight });
        confidences.insert(a, b, c);
    }

    // 3. Permutation synchronization.
    let flows = if cfg.ablation.no_sync {
        raw
    } else {
        let mut assignments = PairTable::new(k);
        for ((a, b), f) in raw.iter() {
            assignments.insert(a, b, soft_assignment_from_flow(scans.cloud(a), scans.cloud(b), f, &cfg.sync)?);
        }
        symmetrize_pairs(&mut assignments, &mut weights)?;
        for ((a, b), w) in weights.iter() {
            if let Some(c) = confidences.get_mut(a, b) {
                c.pair_weight = *w;
            }
        }
        let gcl = build_weighted_gcl(&assignments, &weights, k, n)?;
        let synced = synchronize_permutations(&gcl, k, n)?;
        let mut out = PairTable::new(k);
        for (a, b) in ordered_pairs(k) {
            out.insert(a, b, induced_flow(synced.block(a, b), scans.cloud(a), scans.cloud(b), &cfg.sync)?);
        }
        out
    };
    let mut flow_confidences = PairTable::new(k);
    for ((a, b), f) in flows.iter() {
        flow_confidences.insert(a, b, flow_confidence(scans.cloud(a), scans.cloud(b), f, fe)?);
    }

    // 4. Segmentation; the first pass is a single rigid part.
    let segmentation = if prev.is_none() {
        AbsoluteSegmentation::single_part(k * n)
    } else {
        segment(scans, &flows, &flow_confidences, cfg, fe)?
    };

    // 5. Poses and rigid flow.
    let membership = if segmentation.num_parts == 1 {
        Array2::ones((k * n, 1))
    } else {
        segmentation.membership(cfg.membership_temperature)
    };
    let poses = per_part_poses(scans, &flows, &flow_confidences, membership.view(), cfg.canonical_scan)?;
    let mut rigid_flows = PairTable::new(k);
    for (a, b) in ordered_pairs(k) {
        rigid_flows.insert(a, b, rigid_flow(&poses, &segmentation, scans, a, b)?);
    }

    let pose_delta = match prev {
        Some(p) if p.num_parts() == segmentation.num_parts && p.iteration > 1 => {
            let matching = label_matching(&segmentation.hard_labels, &p.segmentation.hard_labels, segmentation.num_parts)?;
            Some(poses.max_delta(&p.poses, &matching))
        }
        _ => None,
    };

    Ok(IterationState {
        iteration,
        matches,
        confidences,
        flows,
        flow_confidences,
        segmentation,
        poses,
        rigid_flows,
        pose_delta,
    })
}

/// Moves every point of scan `k` by the inverse of its part's pose.
fn canonicalize<T: Real>(scans: &ScanSet<T>, state: &IterationState<T>) -> Result<ScanSet<T>> {
    let n = scans.num_points();
    let clouds = scans
        .clouds()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let labels = state.segmentation.scan_labels(k, n);
            let inv: Vec<_> = state.poses.poses[k].iter().map(|t| t.inverse()).collect();
            let pts = c.points.iter().zip(labels).map(|(&x, &s)| inv[s].apply(x)).collect();
            PointCloud::new(pts, k)
        })
        .collect::<Result<Vec<_>>>()?;
    ScanSet::new(clouds)
}

/// For each part of `current`, the part of `previous` it overlaps best.
fn label_matching(current: &[usize], previous: &[usize], s: usize) -> Result<Vec<usize>> {
    let mut overlap = Array2::<f64>::zeros((s, s));
    for (&c, &p) in current.iter().zip(previous) {
        overlap[[c, p]] -= 1.0;
    }
    hungarian_assignment(overlap.view())
}

/// Relative segmentations of all pairs, stacked and synchronized.
fn segment<T: Real>(
    scans: &ScanSet<T>,
    flows: &PairTable<FlowField<T>>,
    confidences: &PairTable<ConfidenceField<T>>,
    cfg: &PipelineConfig,
    fe: &FrontendConfig,
) -> Result<AbsoluteSegmentation<T>> {
    let (k, n) = (scans.num_scans(), scans.num_points());
    let mut zhat = PairTable::new(k);
    for ((a, b), f) in flows.iter() {
        let ltf = local_rigid_transforms(scans.cloud(a), f, &confidences.require(a, b)?.per_point, fe)?;
        let beta = residual_beta(&ltf, scans.cloud(b), flows.require(b, a)?)?;
        zhat.insert(a, b, relative_segmentation(&beta, fe)?);
    }
    let half = T::lit(0.5);
    let mut blocks = PairTable::new(k);
    let mut kept = Vec::new();
    for (a, b) in unordered_pairs(k) {
        let fwd = &zhat.require(a, b)?.zhat;
        let bwd = &zhat.require(b, a)?.zhat;
        let avg = RelativeSegmentation {
            source: a,
            target: b,
            zhat: (fwd + &bwd.t()) * half,
        };
        let block = if cfg.ablation.unnormalized_z {
            avg
        } else {
            match normalize_relative(&avg) {
                Ok(z) => z,
                Err(Error::AllZero(..)) => RelativeSegmentation {
                    zhat: Array2::zeros((n, n)),
                    ..avg
                },
                Err(e) => return Err(e),
            }
        };
        if block.zhat.iter().any(|&x| x != T::zero()) {
            kept.push((a, b));
        }
        blocks.insert(a, b, block);
    }
    if !is_connected(k, kept) {
        return Err(Error::DisconnectedGraph);
    }
    let stacked = build_stacked(&blocks, k, n)?;
    let spectrum = segmentation_spectrum(&stacked)?;
    let s = match cfg.parts {
        Some(s) => s,
        None => part_count_from_spectrum(&spectrum.values, cfg.alpha)?,
    };
    synchronize_from_spectrum(&spectrum, s.min(k * n))
}
