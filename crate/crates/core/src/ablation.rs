//! Ablation grid over synchronization, weighting and normalization.
//!
//! Each trial generates a scene, optionally replaces the flow of one scan
//! pair (both directions, every iteration) with uniform random vectors, runs
//! every variant on the same scans and scores it against ground truth.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{epe3d_stats, evaluate_iteration, GroundTruth, MetricsReport};
use crate::pipeline::{run_pipeline_with, AblationFlags, PipelineConfig};
use crate::scene::{generate_scene, SceneConfig};
use crate::{Error, Result, Vec3};

/// Random-stream index used for corrupted flows (scene streams are 0–3).
pub const CORRUPTION_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Weighted synchronization (the full method).
    #[serde(rename = "S,W")]
    SyncWeighted,
    /// Synchronization with all pair weights 1.
    #[serde(rename = "S,NW")]
    SyncUnweighted,
    /// Raw pairwise flow.
    #[serde(rename = "NS")]
    NoSync,
    /// Full method without mean normalization of relative segmentations.
    #[serde(rename = "UNZ")]
    Unnormalized,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SyncWeighted,
        Variant::SyncUnweighted,
        Variant::NoSync,
        Variant::Unnormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SyncWeighted => "S,W",
            Variant::SyncUnweighted => "S,NW",
            Variant::NoSync => "NS",
            Variant::Unnormalized => "UNZ",
        }
    }

    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            no_sync: self == Variant::NoSync,
            unweighted: self == Variant::SyncUnweighted,
            unnormalized_z: self == Variant::Unnormalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub trials: usize,
    /// Unordered scan pair whose flow is replaced; `None` leaves flows intact.
    pub corrupt_pair: Option<(usize, usize)>,
    /// Corrupted vectors are uniform in `[−a, a]³`.
    pub corruption_amplitude: f64,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            trials: 10,
            corrupt_pair: Some((0, 1)),
            corruption_amplitude: 0.5,
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some((a, b)) = self.corrupt_pair {
            if a == b {
                return Err(Error::InvalidConfig("corrupt_pair needs two different scans".into()));
            }
        }
        if !(self.corruption_amplitude > 0.0 && self.corruption_amplitude.is_finite()) {
            return Err(Error::InvalidConfig("corruption_amplitude must be positive".into()));
        }
        Ok(())
    }
}

/// Scores of one variant on one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub variant: Variant,
    pub seed: u64,
    /// Metrics of the final iteration (rigid flow, hard labels, poses).
    pub metrics: MetricsReport,
    /// EPE3D of the synchronized (or raw, under `NS`) flows, per iteration.
    /// Iteration 1 compares the variants on identical front-end input.
    pub flow_epe: Vec<f64>,
}

/// Runs every requested variant on the scene generated from `scene`.
pub fn run_trial(
    scene: &SceneConfig,
    pipeline: &PipelineConfig,
    ablation: &AblationConfig,
) -> Result<Vec<TrialOutcome>> {
    ablation.validate()?;
    let bundle = generate_scene(scene)?;
    let k = bundle.scans.num_scans();
    if let Some((a, b)) = ablation.corrupt_pair {
        if a >= k || b >= k {
            return Err(Error::InvalidConfig(format!("corrupt_pair ({a}, {b}) outside {k} scans")));
        }
    }
    let gt = GroundTruth {
        labels: &bundle.gt_labels,
        num_parts: bundle.num_parts(),
        flows: &bundle.gt_flows,
        poses: Some(&bundle.gt_poses),
    };
    ablation
        .variants
        .iter()
        .map(|&variant| {
            let cfg = PipelineConfig {
                ablation: variant.flags(),
                ..pipeline.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(CORRUPTION_STREAM);
            let amp = ablation.corruption_amplitude;
            let mut uniform = move || ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * amp;
            let pair = ablation.corrupt_pair;
            let result = run_pipeline_with(&bundle.scans, &cfg, &mut |_, s, t, flow| {
                if let Some((a, b)) = pair {
                    if (s, t) == (a, b) || (s, t) == (b, a) {
                        for v in flow.vectors.iter_mut() {
                            *v = Vec3::new(uniform(), uniform(), uniform());
                        }
                    }
                }
                Ok(())
            })?;
            let flow_epe = result
                .iterations
                .iter()
                .map(|it| Ok(epe3d_stats(&it.flows, &bundle.gt_flows)?.0))
                .collect::<Result<Vec<f64>>>()?;
            Ok(TrialOutcome {
                variant,
                seed: scene.seed,
                metrics: evaluate_iteration(result.last(), result.num_points, &gt)?,
                flow_epe,
            })
        })
        .collect()
}

/// Mean scores of one variant over all trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub trials: usize,
    pub epe3d_mean: f64,
    pub first_flow_epe_mean: f64,
    pub final_flow_epe_mean: f64,
    pub miou_multi_mean: f64,
    pub ri_multi_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub summary: Vec<VariantSummary>,
    pub trials: Vec<TrialOutcome>,
}

/// Trials with seeds `base_seed, base_seed + 1, …`.
pub fn run_ablation(
    scene: &SceneConfig,
    pipeline: &PipelineConfig,
    ablation: &AblationConfig,
) -> Result<AblationReport> {
    let mut trials = Vec::new();
    for t in 0..ablation.trials {
        let cfg = SceneConfig {
            seed: scene.seed.wrapping_add(t as u64),
            ..scene.clone()
        };
        trials.extend(run_trial(&cfg, pipeline, ablation)?);
    }
    let summary = ablation
        .variants
        .iter()
        .map(|&v| {
            let rows: Vec<&TrialOutcome> = trials.iter().filter(|o| o.variant == v).collect();
            let mean = |f: &dyn Fn(&TrialOutcome) -> f64| rows.iter().map(|o| f(o)).sum::<f64>() / rows.len().max(1) as f64;
            VariantSummary {
                variant: v,
                trials: rows.len(),
                epe3d_mean: mean(&|o| o.metrics.epe3d_mean),
                first_flow_epe_mean: mean(&|o| o.flow_epe[0]),
                final_flow_epe_mean: mean(&|o| *o.flow_epe.last().expect("at least one iteration")),
                miou_multi_mean: mean(&|o| o.metrics.miou_multi),
                ri_multi_mean: mean(&|o| o.metrics.ri_multi),
            }
        })
        .collect();
    Ok(AblationReport { summary, trials })
}

impl AblationReport {
    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>6} {:>12} {:>12} {:>12} {:>8} {:>8}\n",
            "method", "trials", "EPE3D", "flow EPE 1", "flow EPE", "mIoU", "RI"
        );
        for v in &self.summary {
            s.push_str(&format!(
                "{:<6} {:>6} {:>12.6e} {:>12.6e} {:>12.6e} {:>8.4} {:>8.4}\n",
                v.variant.name(),
                v.trials,
                v.epe3d_mean,
                v.first_flow_epe_mean,
                v.final_flow_epe_mean,
                v.miou_multi_mean,
                v.ri_multi_mean
            ));
        }
        s
    }
}
