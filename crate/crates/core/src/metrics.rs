//! Evaluation: optimal assignment, mIoU, Rand Index, EPE3D and pose errors.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cloud::PairTable;
use crate::pipeline::{split_labels, IterationState, PipelineResult};
use crate::{Error, FlowField, PoseSet, Real, Result};

/// Minimum-cost perfect matching of a square cost matrix: `perm[row] = column`.
///
/// Among optimal permutations (costs equal within a relative `1e-12`) the
/// lexicographically smallest is returned.
pub fn hungarian_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::ShapeMismatch(format!("cost matrix is {n}x{m}, expected square")));
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = cost.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-12 * (1.0 + scale * n as f64);
    let best = min_cost(cost, &[], &[]);

    let mut fixed_rows = Vec::with_capacity(n);
    let mut fixed_cols = Vec::with_capacity(n);
    let mut spent = 0.0;
    for row in 0..n {
        let free: Vec<usize> = (0..n).filter(|c| !fixed_cols.contains(c)).collect();
        let col = free
            .into_iter()
            .find(|&c| {
                fixed_rows.push(row);
                fixed_cols.push(c);
                let total = spent + cost[[row, c]] + min_cost(cost, &fixed_rows, &fixed_cols);
                fixed_rows.pop();
                fixed_cols.pop();
                total <= best + tol
            })
            .expect("an optimal completion always exists");
        spent += cost[[row, col]];
        fixed_rows.push(row);
        fixed_cols.push(col);
    }
    Ok(fixed_cols)
}

/// Optimal cost of the sub-problem without the given rows and columns.
fn min_cost(cost: ArrayView2<'_, f64>, skip_rows: &[usize], skip_cols: &[usize]) -> f64 {
    let rows: Vec<usize> = (0..cost.nrows()).filter(|r| !skip_rows.contains(r)).collect();
    let cols: Vec<usize> = (0..cost.ncols()).filter(|c| !skip_cols.contains(c)).collect();
    let sub = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| cost[[rows[i], cols[j]]]);
    let perm = shortest_augmenting_path(sub.view());
    perm.iter().enumerate().map(|(i, &j)| sub[[i, j]]).sum()
}

/// O(n³) Hungarian method with row/column potentials.
fn shortest_augmenting_path(cost: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

fn check_labels(labels: &[usize], parts: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= parts) {
        Some(l) => Err(Error::InvalidLabels(format!("{what} label {l} with {parts} parts"))),
        None => Ok(()),
    }
}

/// `S × S` intersection-over-union table, `S = max(s_pred, s_gt)`; rows are
/// ground-truth parts.
fn iou_table(pred: &[usize], gt: &[usize], s: usize) -> Array2<f64> {
    let mut inter = Array2::<f64>::zeros((s, s));
    let mut gt_size = vec![0.0; s];
    let mut pred_size = vec![0.0; s];
    for (&p, &g) in pred.iter().zip(gt) {
        inter[[g, p]] += 1.0;
        gt_size[g] += 1.0;
        pred_size[p] += 1.0;
    }
    Array2::from_shape_fn((s, s), |(g, p)| {
        let union = gt_size[g] + pred_size[p] - inter[[g, p]];
        if union > 0.0 {
            inter[[g, p]] / union
        } else {
            0.0
        }
    })
}

/// For each ground-truth part, the predicted part it is matched to (if any).
pub fn match_parts(pred: &[usize], gt: &[usize], s_pred: usize, s_gt: usize) -> Result<Vec<Option<usize>>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    check_labels(pred, s_pred, "predicted")?;
    check_labels(gt, s_gt, "ground-truth")?;
    let s = s_pred.max(s_gt);
    let iou = iou_table(pred, gt, s);
    let perm = hungarian_assignment(iou.mapv(|x| -x).view())?;
    Ok((0..s_gt).map(|g| Some(perm[g]).filter(|&p| p < s_pred)).collect())
}

/// Mean IoU over `max(s_pred, s_gt)` parts under the best one-to-one matching;
/// unmatched parts score 0.
pub fn miou(pred: &[usize], gt: &[usize], s_pred: usize, s_gt: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    check_labels(pred, s_pred, "predicted")?;
    check_labels(gt, s_gt, "ground-truth")?;
    let s = s_pred.max(s_gt);
    if s == 0 {
        return Err(Error::InvalidLabels("no parts".into()));
    }
    let iou = iou_table(pred, gt, s);
    let perm = hungarian_assignment(iou.mapv(|x| -x).view())?;
    Ok(perm.iter().enumerate().map(|(g, &p)| iou[[g, p]]).sum::<f64>() / s as f64)
}

/// Fraction of point pairs on which both labelings agree about sharing a part.
pub fn rand_index(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let m = pred.len() as u128;
    if m < 2 {
        return Err(Error::InvalidLabels("Rand Index needs at least 2 points".into()));
    }
    let pairs = |c: u128| c * c.saturating_sub(1) / 2;
    let mut joint: BTreeMap<(usize, usize), u128> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u128> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u128> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *joint.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
    }
    let same_both: u128 = joint.values().map(|&c| pairs(c)).sum();
    let same_pred: u128 = rows.values().map(|&c| pairs(c)).sum();
    let same_gt: u128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(m);
    let agree = total + 2 * same_both - same_pred - same_gt;
    Ok(agree as f64 / total as f64)
}

/// Mean and population standard deviation of per-pair EPE over every pair in `pred`.
pub fn epe3d_stats<T: Real>(pred: &PairTable<FlowField<T>>, gt: &PairTable<FlowField<T>>) -> Result<(T, T)> {
    let mut per_pair = Vec::new();
    for ((k, l), f) in pred.iter() {
        let g = gt.require(k, l)?;
        if f.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "pair ({k}, {l}): {} predicted vectors, {} ground-truth",
                f.len(),
                g.len()
            )));
        }
        per_pair.push(f.epe(g));
    }
    if per_pair.is_empty() {
        return Err(Error::ShapeMismatch("no flows to compare".into()));
    }
    Ok(mean_std(&per_pair))
}

/// Mean and population standard deviation.
pub fn mean_std<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::from_count(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Largest rotation (Frobenius) and translation error over all scans and
/// ground-truth parts, predicted parts taken through `matching`. Unmatched
/// parts give infinite error.
pub fn pose_errors<T: Real>(pred: &PoseSet<T>, gt: &PoseSet<T>, matching: &[Option<usize>]) -> Result<(T, T)> {
    if pred.num_scans() != gt.num_scans() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted scans, {} ground-truth",
            pred.num_scans(),
            gt.num_scans()
        )));
    }
    let (mut rot, mut trans) = (T::zero(), T::zero());
    for k in 0..gt.num_scans() {
        for (s, m) in matching.iter().enumerate().take(gt.num_parts()) {
            match m {
                Some(p) => {
                    let (dr, dt) = pred.get(k, *p).distance(gt.get(k, s));
                    rot = rot.max(dr);
                    trans = trans.max(dt);
                }
                None => return Ok((T::infinity(), T::infinity())),
            }
        }
    }
    Ok((rot, trans))
}

/// Flat evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe3d_mean: f64,
    pub epe3d_std: f64,
    pub miou_multi: f64,
    pub ri_multi: f64,
    pub miou_per_scan_mean: f64,
    pub miou_per_scan_std: f64,
    pub ri_per_scan_mean: f64,
    pub ri_per_scan_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_rotation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_translation_error: Option<f64>,
}

/// Predicted or reference segmentation of every scan.
#[derive(Clone, Copy, Debug)]
pub struct Labelling<'a> {
    pub labels: &'a [Vec<usize>],
    pub num_parts: usize,
}

/// Segmentation and flow metrics; multi-scan scores pool the points of all scans.
pub fn evaluate<T: Real>(
    pred: Labelling<'_>,
    gt: Labelling<'_>,
    pred_flows: &PairTable<FlowField<T>>,
    gt_flows: &PairTable<FlowField<T>>,
) -> Result<MetricsReport> {
    if pred.labels.len() != gt.labels.len() {
        return Err(Error::LengthMismatch(pred.labels.len(), gt.labels.len()));
    }
    let (epe_mean, epe_std) = epe3d_stats(pred_flows, gt_flows)?;
    let flat_pred = pred.labels.concat();
    let flat_gt = gt.labels.concat();
    let mut mious = Vec::with_capacity(gt.labels.len());
    let mut ris = Vec::with_capacity(gt.labels.len());
    for (p, g) in pred.labels.iter().zip(gt.labels) {
        mious.push(miou(p, g, pred.num_parts, gt.num_parts)?);
        ris.push(rand_index(p, g)?);
    }
    let (miou_mean, miou_std) = mean_std(&mious);
    let (ri_mean, ri_std) = mean_std(&ris);
    Ok(MetricsReport {
        epe3d_mean: epe_mean.as_f64(),
        epe3d_std: epe_std.as_f64(),
        miou_multi: miou(&flat_pred, &flat_gt, pred.num_parts, gt.num_parts)?,
        ri_multi: rand_index(&flat_pred, &flat_gt)?,
        miou_per_scan_mean: miou_mean,
        miou_per_scan_std: miou_std,
        ri_per_scan_mean: ri_mean,
        ri_per_scan_std: ri_std,
        pose_rotation_error: None,
        pose_translation_error: None,
    })
}

/// Reference data a run is scored against.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a, T> {
    pub labels: &'a [Vec<usize>],
    pub num_parts: usize,
    pub flows: &'a PairTable<FlowField<T>>,
    pub poses: Option<&'a PoseSet<T>>,
}

/// Metrics of a prediction (labels per scan, flows, poses) against ground truth.
pub fn evaluate_prediction<T: Real>(
    pred: Labelling<'_>,
    flows: &PairTable<FlowField<T>>,
    poses: &PoseSet<T>,
    gt: &GroundTruth<'_, T>,
) -> Result<MetricsReport> {
    let mut report = evaluate(pred, Labelling { labels: gt.labels, num_parts: gt.num_parts }, flows, gt.flows)?;
    if let Some(gt_poses) = gt.poses {
        let matching = match_parts(&pred.labels.concat(), &gt.labels.concat(), pred.num_parts, gt.num_parts)?;
        let (r, t) = pose_errors(poses, gt_poses, &matching)?;
        // Left out when a ground-truth part has no predicted counterpart.
        if r.is_finite() && t.is_finite() {
            report.pose_rotation_error = Some(r.as_f64());
            report.pose_translation_error = Some(t.as_f64());
        }
    }
    Ok(report)
}

/// Metrics of one iteration: final hard labels, rigid flows and poses.
pub fn evaluate_iteration<T: Real>(state: &IterationState<T>, n: usize, gt: &GroundTruth<'_, T>) -> Result<MetricsReport> {
    let labels = split_labels(&state.segmentation.hard_labels, n);
    evaluate_prediction(
        Labelling { labels: &labels, num_parts: state.num_parts() },
        &state.rigid_flows,
        &state.poses,
        gt,
    )
}

/// [`evaluate_iteration`] for every iteration of a run.
pub fn evaluate_run<T: Real>(result: &PipelineResult<T>, gt: &GroundTruth<'_, T>) -> Result<Vec<MetricsReport>> {
    result
        .iterations
        .iter()
        .map(|it| evaluate_iteration(it, result.num_points, gt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;
    use ndarray::array;

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian_assignment(array![[1.0, 2.0], [2.0, 1.0]].view()).unwrap(), vec![0, 1]);
        assert_eq!(
            hungarian_assignment(array![[0.0, 5.0, 5.0], [5.0, 0.0, 5.0], [5.0, 5.0, 0.0]].view()).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(hungarian_assignment(Array2::from_elem((4, 4), 3.0).view()).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(hungarian_assignment(array![[4.0, 1.0], [1.0, 4.0]].view()).unwrap(), vec![1, 0]);
        assert!(hungarian_assignment(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = [0, 0, 1, 1, 2];
        assert_eq!(miou(&gt, &gt, 3, 3).unwrap(), 1.0);
        assert_eq!(miou(&[2, 2, 0, 0, 1], &gt, 3, 3).unwrap(), 1.0);
        let split = [0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(miou(&split, &[0; 8], 2, 1).unwrap(), 0.25);
        assert!(matches!(miou(&[0], &[0, 0], 1, 1), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn rand_index_examples() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(rand_index(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0 / 3.0);
        assert_eq!(rand_index(&[5, 5, 2, 2], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(rand_index(&[0], &[0]).is_err());
    }

    fn flows(offsets: &[f64]) -> PairTable<FlowField<f64>> {
        let mut t = PairTable::new(2);
        t.insert(0, 1, FlowField::new(0, 1, vec![Vec3::new(offsets[0], 0.0, 0.0); 3]).unwrap());
        t.insert(1, 0, FlowField::new(1, 0, vec![Vec3::new(offsets[1], 0.0, 0.0); 3]).unwrap());
        t
    }

    #[test]
    fn epe_examples() {
        let zero = flows(&[0.0, 0.0]);
        assert_eq!(epe3d_stats(&zero, &zero).unwrap(), (0.0, 0.0));
        let (m, s) = epe3d_stats(&flows(&[0.1, 0.1]), &zero).unwrap();
        assert!((m - 0.1).abs() < 1e-15 && s.abs() < 1e-15);
        let (m, s) = epe3d_stats(&flows(&[0.1, 0.3]), &zero).unwrap();
        assert!((m - 0.2).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
    }
}
