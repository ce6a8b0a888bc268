//! File formats.
//!
//! A scan set on disk is a directory holding one ASCII PLY file per scan
//! (`x y z` as `double`, optional `int label`) and a `manifest.json` that
//! lists the scan files in order and optionally names a ground-truth
//! document. Results, ground truth and reports are JSON with fixed key
//! order; floats are written in shortest round-trip form, so every value
//! reloads bit-identically. All files are written to a temporary sibling and
//! renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cloud::PairTable;
use crate::metrics::{evaluate_prediction, GroundTruth, Labelling, MetricsReport};
use crate::pipeline::PipelineResult;
use crate::rigid::PoseFlag;
use crate::scene::{SceneBundle, SceneConfig};
use crate::{Error, FlowField, Mat3, PoseSet, Result, RigidTransform, ScanSet, Vec3};

pub const MANIFEST: &str = "manifest.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";

/// Writes `contents` atomically.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// ASCII PLY with `double` coordinates and an optional `int label`.
pub fn format_ply(points: &[Vec3<f64>], labels: Option<&[usize]>) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if labels.is_some() {
        s.push_str("property int label\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        if let Some(l) = labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, points: &[Vec3<f64>], labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.len() {
            return Err(Error::LengthMismatch(l.len(), points.len()));
        }
    }
    write_atomic(path, format_ply(points, labels).as_bytes())
}

/// Points plus optional per-point labels.
pub type PlyData = (Vec<Vec3<f64>>, Option<Vec<usize>>);

/// Points and optional labels parsed from ASCII PLY text.
pub fn parse_ply(path: &Path, text: &str) -> Result<PlyData> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing 'ply' magic".into())),
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => return Err(err(no, format!("unsupported format '{other}'"))),
            ["element", "vertex", c] => {
                count = Some(c.parse::<usize>().map_err(|_| err(no, format!("bad vertex count '{c}'")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                let ok = match *name {
                    "x" | "y" | "z" => matches!(*ty, "double" | "float" | "float64" | "float32"),
                    "label" => matches!(*ty, "int" | "uint" | "int32" | "uint32" | "uchar" | "ushort"),
                    _ => return Err(err(no, format!("unsupported property '{name}'"))),
                };
                if !ok {
                    return Err(err(no, format!("property '{name}' has unsupported type '{ty}'")));
                }
                props.push((*name).to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(no, format!("unexpected header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(err(text.lines().count(), "missing end_header".into()));
    }
    let count = count.ok_or_else(|| err(0, "no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(err(0, "vertex element lacks x, y or z".into())),
    };
    let li = col("label");
    let mut points = Vec::with_capacity(count);
    let mut labels = li.map(|_| Vec::with_capacity(count));
    for (no, line) in lines {
        if points.len() == count {
            if line.is_empty() {
                continue;
            }
            return Err(err(no, "more vertices than declared".into()));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != props.len() {
            return Err(err(no, format!("expected {} values, found {}", props.len(), words.len())));
        }
        let coord = |i: usize| -> Result<f64> {
            let v: f64 = words[i].parse().map_err(|_| err(no, format!("bad number '{}'", words[i])))?;
            if !v.is_finite() {
                return Err(err(no, format!("non-finite coordinate '{}'", words[i])));
            }
            Ok(v)
        };
        points.push(Vec3::new(coord(xi)?, coord(yi)?, coord(zi)?));
        if let (Some(i), Some(ls)) = (li, labels.as_mut()) {
            ls.push(words[i].parse().map_err(|_| err(no, format!("bad label '{}'", words[i])))?);
        }
    }
    if points.len() != count {
        return Err(err(text.lines().count(), format!("expected {count} vertices, found {}", points.len())));
    }
    Ok((points, labels))
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(path, &text)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Scan files relative to the manifest, in scan order.
    pub scans: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

/// The manifest path for either a manifest file or a directory holding one.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_manifest(path: &Path) -> Result<(PathBuf, Manifest)> {
    let mp = manifest_path(path);
    let m: Manifest = read_json(&mp)?;
    Ok((mp, m))
}

/// Loads every scan listed in a manifest.
pub fn load_scans(path: &Path) -> Result<ScanSet<f64>> {
    let (mp, m) = load_manifest(path)?;
    let base = base_dir(&mp);
    let points = m
        .scans
        .iter()
        .map(|f| read_ply(&base.join(f)).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    ScanSet::from_points(points)
}

/// Ground truth of a loaded scan set, if the manifest names one.
pub fn load_ground_truth(path: &Path) -> Result<Option<GroundTruthDoc>> {
    let (mp, m) = load_manifest(path)?;
    m.ground_truth.map(|g| read_json(&base_dir(&mp).join(g))).transpose()
}

/// Pose as row-major rotation plus translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDoc {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub flag: PoseFlag,
}

impl PoseDoc {
    pub fn from_transform(t: &RigidTransform<f64>, flag: PoseFlag) -> Self {
        let m = t.rotation.m;
        PoseDoc {
            rotation: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
            translation: t.translation.to_array(),
            flag,
        }
    }

    pub fn to_transform(&self) -> RigidTransform<f64> {
        let r = &self.rotation;
        RigidTransform::new(
            Mat3::from_rows([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]),
            Vec3::from(self.translation),
        )
    }
}

pub fn poses_to_doc(p: &PoseSet<f64>) -> Vec<Vec<PoseDoc>> {
    p.poses
        .iter()
        .zip(&p.flags)
        .map(|(row, flags)| row.iter().zip(flags).map(|(t, &f)| PoseDoc::from_transform(t, f)).collect())
        .collect()
}

pub fn poses_from_doc(doc: &[Vec<PoseDoc>], canonical_scan: usize) -> PoseSet<f64> {
    PoseSet {
        poses: doc.iter().map(|r| r.iter().map(PoseDoc::to_transform).collect()).collect(),
        flags: doc.iter().map(|r| r.iter().map(|p| p.flag).collect()).collect(),
        canonical_scan,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDoc {
    pub source: usize,
    pub target: usize,
    pub vectors: Vec<[f64; 3]>,
}

pub fn flows_to_doc(t: &PairTable<FlowField<f64>>) -> Vec<FlowDoc> {
    t.iter()
        .map(|(_, f)| FlowDoc {
            source: f.source,
            target: f.target,
            vectors: f.vectors.iter().map(|v| v.to_array()).collect(),
        })
        .collect()
}

pub fn flows_from_doc(docs: &[FlowDoc], k: usize) -> Result<PairTable<FlowField<f64>>> {
    let mut t = PairTable::new(k);
    for d in docs {
        if d.source >= k || d.target >= k {
            return Err(Error::ShapeMismatch(format!("flow ({}, {}) outside {k} scans", d.source, d.target)));
        }
        t.insert(
            d.source,
            d.target,
            FlowField::new(d.source, d.target, d.vectors.iter().map(|&v| Vec3::from(v)).collect())?,
        );
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDoc {
    pub num_parts: usize,
    pub canonical_scan: usize,
    pub labels: Vec<Vec<usize>>,
    pub poses: Vec<Vec<PoseDoc>>,
    pub correspondences: Vec<Vec<usize>>,
    pub flows: Vec<FlowDoc>,
    pub config: SceneConfig,
}

/// Writes scans, manifest and ground truth of a generated scene into `dir`.
pub fn save_bundle(dir: &Path, bundle: &SceneBundle<f64>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(bundle.scans.num_scans());
    for (k, c) in bundle.scans.clouds().iter().enumerate() {
        let name = format!("scan_{k}.ply");
        write_ply(&dir.join(&name), &c.points, None)?;
        names.push(name);
    }
    let gt = GroundTruthDoc {
        num_parts: bundle.num_parts(),
        canonical_scan: bundle.gt_poses.canonical_scan,
        labels: bundle.gt_labels.clone(),
        poses: poses_to_doc(&bundle.gt_poses),
        correspondences: bundle.gt_correspondences.clone(),
        flows: flows_to_doc(&bundle.gt_flows),
        config: bundle.config.clone(),
    };
    write_json(&dir.join(GROUND_TRUTH), &gt)?;
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            scans: names,
            ground_truth: Some(GROUND_TRUTH.into()),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationDoc {
    pub iteration: usize,
    pub num_parts: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Serialized outcome of a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub num_scans: usize,
    pub num_points: usize,
    pub num_parts: usize,
    pub canonical_scan: usize,
    pub labels: Vec<Vec<usize>>,
    pub poses: Vec<Vec<PoseDoc>>,
    pub empty_parts: bool,
    pub flows: Vec<FlowDoc>,
    pub iterations: Vec<IterationDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

impl ResultDoc {
    /// `metrics[i]` is attached to iteration `i`; the last one also becomes
    /// the run's summary.
    pub fn new(result: &PipelineResult<f64>, metrics: Option<Vec<MetricsReport>>) -> Self {
        let last = result.last();
        let mut per_iter: Vec<Option<MetricsReport>> = match metrics {
            Some(m) => m.into_iter().map(Some).collect(),
            None => Vec::new(),
        };
        per_iter.resize(result.iterations.len(), None);
        ResultDoc {
            num_scans: result.num_scans,
            num_points: result.num_points,
            num_parts: last.num_parts(),
            canonical_scan: last.poses.canonical_scan,
            labels: result.labels(),
            poses: poses_to_doc(&last.poses),
            empty_parts: last.poses.has_empty_parts(),
            flows: flows_to_doc(&last.rigid_flows),
            metrics: per_iter.last().cloned().flatten(),
            iterations: result
                .iterations
                .iter()
                .zip(per_iter)
                .map(|(it, m)| IterationDoc {
                    iteration: it.iteration,
                    num_parts: it.num_parts(),
                    eigenvalues: it.segmentation.eigenvalues.clone(),
                    pose_delta: it.pose_delta,
                    metrics: m,
                })
                .collect(),
        }
    }

    pub fn pose_set(&self) -> PoseSet<f64> {
        poses_from_doc(&self.poses, self.canonical_scan)
    }
}

/// Scores a saved result against saved ground truth.
pub fn evaluate_documents(result: &ResultDoc, truth: &GroundTruthDoc) -> Result<MetricsReport> {
    let k = result.num_scans;
    if truth.labels.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "result has {k} scans, ground truth {}",
            truth.labels.len()
        )));
    }
    let gt_flows = flows_from_doc(&truth.flows, k)?;
    let gt_poses = poses_from_doc(&truth.poses, truth.canonical_scan);
    evaluate_prediction(
        Labelling {
            labels: &result.labels,
            num_parts: result.num_parts,
        },
        &flows_from_doc(&result.flows, k)?,
        &result.pose_set(),
        &GroundTruth {
            labels: &truth.labels,
            num_parts: truth.num_parts,
            flows: &gt_flows,
            poses: Some(&gt_poses),
        },
    )
}

pub fn save_result(doc: &ResultDoc, path: &Path) -> Result<()> {
    write_json(path, doc)
}

pub fn load_result(path: &Path) -> Result<ResultDoc> {
    read_json(path)
}
