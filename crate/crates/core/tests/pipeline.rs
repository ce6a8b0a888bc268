use mbsync::metrics::{evaluate_run, miou, GroundTruth};
use mbsync::pipeline::{run_pipeline_with, AblationFlags};
use mbsync::{generate_scene, run_pipeline, Error, PipelineConfig, SceneBundle, SceneConfig};

fn scene(seed: u64, noise: f64) -> SceneBundle<f64> {
    generate_scene(&SceneConfig {
        num_scans: 4,
        num_points: 64,
        num_parts: 3,
        part_fractions: Some(vec![0.5, 0.3, 0.2]),
        noise_sigma: noise,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn truth(b: &SceneBundle<f64>) -> GroundTruth<'_, f64> {
    GroundTruth { labels: &b.gt_labels, num_parts: b.num_parts(), flows: &b.gt_flows, poses: Some(&b.gt_poses) }
}

#[test]
fn clean_scenes_are_solved_exactly() {
    for seed in 0..3 {
        let b = scene(seed, 0.0);
        let run = run_pipeline(&b.scans, &PipelineConfig::default()).unwrap();
        let last = evaluate_run(&run, &truth(&b)).unwrap().pop().unwrap();
        assert_eq!(last.miou_multi, 1.0, "seed {seed}");
        assert!(last.epe3d_mean < 1e-8, "seed {seed}: {}", last.epe3d_mean);
        let (r, t) = (last.pose_rotation_error.unwrap(), last.pose_translation_error.unwrap());
        // Soft memberships leave a trace of weight on the other parts.
        assert!(r < 1e-5 && t < 1e-5, "seed {seed}: {r} {t}");
    }
}

#[test]
fn single_precision_run_agrees() {
    let b = scene(1, 0.0);
    let b32 = b.cast::<f32>().unwrap();
    let run = run_pipeline(&b32.scans, &PipelineConfig::default()).unwrap();
    for (k, labels) in run.labels().iter().enumerate() {
        assert_eq!(miou(labels, &b.gt_labels[k], run.last().num_parts(), 3).unwrap(), 1.0);
    }
    let gt = GroundTruth { labels: &b32.gt_labels, num_parts: 3, flows: &b32.gt_flows, poses: Some(&b32.gt_poses) };
    let report = evaluate_run(&run, &gt).unwrap().pop().unwrap();
    assert!(report.epe3d_mean < 1e-4, "{}", report.epe3d_mean);
}

#[test]
fn runs_are_reproducible() {
    let b = scene(4, 0.01);
    let a = run_pipeline(&b.scans, &PipelineConfig::default()).unwrap();
    let c = run_pipeline(&b.scans, &PipelineConfig::default()).unwrap();
    assert_eq!(a, c);
}

#[test]
fn without_sync_the_raw_flow_is_kept() {
    let b = scene(0, 0.01);
    let cfg = PipelineConfig {
        iterations: 1,
        ablation: AblationFlags { no_sync: true, ..AblationFlags::default() },
        ..PipelineConfig::default()
    };
    let run = run_pipeline(&b.scans, &cfg).unwrap();
    let it = run.last();
    for ((k, l), flow) in it.flows.iter() {
        let matches = it.matches.get(k, l).unwrap();
        for (i, v) in flow.vectors.iter().enumerate() {
            let expect = b.scans.cloud(l).points[matches[i]] - b.scans.cloud(k).points[i];
            assert!((*v - expect).norm() < 1e-12);
        }
    }
}

#[test]
fn part_count_can_be_fixed() {
    let b = scene(2, 0.0);
    for parts in [1, 2, 4] {
        // The first pass always treats the scene as one rigid body.
        let cfg = PipelineConfig { parts: Some(parts), iterations: 2, ..PipelineConfig::default() };
        let run = run_pipeline(&b.scans, &cfg).unwrap();
        assert_eq!(run.last().num_parts(), parts);
        assert!(run.labels().iter().flatten().all(|&l| l < parts));
    }
}

#[test]
fn hook_sees_every_pair_and_can_fail() {
    let b = scene(3, 0.0);
    let cfg = PipelineConfig { iterations: 1, ..PipelineConfig::default() };
    let mut seen = Vec::new();
    run_pipeline_with(&b.scans, &cfg, &mut |it, k, l, _| {
        seen.push((it, k, l));
        Ok(())
    })
    .unwrap();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 12);
    let err = run_pipeline_with(&b.scans, &cfg, &mut |_, _, _, _| Err(Error::ZeroWeight)).unwrap_err();
    assert!(matches!(err, Error::ZeroWeight));
}

#[test]
fn invalid_configs_are_rejected() {
    let b = scene(0, 0.0);
    for cfg in [
        PipelineConfig { iterations: 0, ..PipelineConfig::default() },
        PipelineConfig { alpha: 1.5, ..PipelineConfig::default() },
        PipelineConfig { parts: Some(0), ..PipelineConfig::default() },
        PipelineConfig { canonical_scan: 9, ..PipelineConfig::default() },
    ] {
        assert!(matches!(run_pipeline(&b.scans, &cfg), Err(Error::InvalidConfig(_))));
    }
    let cfg = PipelineConfig { membership_temperature: 0.0, ..PipelineConfig::default() };
    assert!(matches!(run_pipeline(&b.scans, &cfg), Err(Error::TemperatureNonPositive(_))));
}
