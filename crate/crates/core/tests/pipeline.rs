use std::fs;

use unisplat::gaussian::Source;
use unisplat::geom::Pose;
use unisplat::pipeline::{eval_dirs, run_scene, DynamicScores, Pipeline, PipelineConfig};
use unisplat::synthetic::{raycast_frame, SyntheticScene};

fn quick() -> PipelineConfig {
    PipelineConfig {
        novel_views: false,
        ..Default::default()
    }
}

#[test]
fn first_frame_ignores_temporal_fusion_flag() {
    let scene = SyntheticScene::desk(0);
    let b = raycast_frame(&scene, 0).unwrap();
    let mut on = Pipeline::for_scene(quick(), &scene).unwrap();
    let mut off = Pipeline::for_scene(
        PipelineConfig {
            temporal_fusion: false,
            ..quick()
        },
        &scene,
    )
    .unwrap();
    let a = on.step(&b, None, scene.sky()).unwrap();
    let c = off.step(&b, None, scene.sky()).unwrap();
    assert_eq!(a.completed, c.completed);
    assert_eq!(a.metrics, c.metrics);
    assert!(on.fused().is_some());
    assert!(off.fused().is_none());
}

#[test]
fn first_frame_counts_match_scaffold() {
    let scene = SyntheticScene::desk(0);
    let b = raycast_frame(&scene, 0).unwrap();
    let cfg = quick();
    let g = cfg.g;
    let mut p = Pipeline::for_scene(cfg, &scene).unwrap();
    let r = p.step(&b, None, scene.sky()).unwrap();
    assert_eq!(r.counts.point, b.points.valid_count());
    assert_eq!(r.counts.voxel, g * r.fused_voxels);
    assert_eq!(r.counts.memory, 0);
    assert_eq!(r.fused_voxels, r.scaffold_voxels);
    assert_eq!(r.views.len(), b.cameras.len());
}

#[test]
fn threshold_extremes_control_memory_growth() {
    let scene = SyntheticScene::desk(0);
    let frames: Vec<_> = (0..2).map(|t| raycast_frame(&scene, t).unwrap()).collect();
    let mut closed = Pipeline::for_scene(
        PipelineConfig {
            tau_d: 0.0,
            ..quick()
        },
        &scene,
    )
    .unwrap();
    let mut open = Pipeline::for_scene(
        PipelineConfig {
            tau_d: 1.0,
            dynamic_scores: DynamicScores::Predicted,
            ..quick()
        },
        &scene,
    )
    .unwrap();
    for b in &frames {
        let r = closed.step(b, None, scene.sky()).unwrap();
        assert_eq!(r.memory_size, 0);
    }
    let r = open.step(&frames[0], None, scene.sky()).unwrap();
    assert_eq!(r.memory_size, r.counts.point + r.counts.voxel);
}

#[test]
fn repeated_static_frame_never_completes_with_visible_memory() {
    let scene = SyntheticScene::desk_static(0);
    let b0 = raycast_frame(&scene, 0).unwrap();
    let mut b1 = b0.clone();
    b1.timestep = 1;
    b1.prev_to_cur = Pose::identity();
    let mut p = Pipeline::for_scene(quick(), &scene).unwrap();
    p.step(&b0, None, scene.sky()).unwrap();
    assert!(!p.memory().is_empty());
    let r = p.step(&b1, None, scene.sky()).unwrap();
    for g in r.completed.gaussians.iter().filter(|g| g.source == Source::Memory) {
        assert!(!unisplat::geom::in_frustum(&b1.cameras, &g.mean));
    }
}

#[test]
fn trace_follows_stage_order() {
    let scene = SyntheticScene::desk(0);
    let b = raycast_frame(&scene, 0).unwrap();
    let n = raycast_frame(&scene, 1).unwrap();
    let mut p = Pipeline::for_scene(
        PipelineConfig {
            trace: true,
            ..Default::default()
        },
        &scene,
    )
    .unwrap();
    let r = p.step(&b, Some(&n), scene.sky()).unwrap();
    let stages: Vec<&str> = r.trace.iter().map(|s| s.stage).collect();
    assert_eq!(
        stages,
        [
            "scale",
            "voxelize",
            "attach_view_features",
            "spatial_fusion",
            "temporal_fusion",
            "decode",
            "view_filter",
            "complete",
            "memory_update",
            "render",
            "metrics"
        ]
    );
    assert_eq!(r.views.len(), 2 * b.cameras.len());
}

#[test]
fn run_writes_listed_outputs_and_evaluates_against_itself() {
    let scene = SyntheticScene::desk(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        frames: Some(2),
        ..Default::default()
    };
    let s = run_scene(cfg, &scene, dir.path()).unwrap();
    assert_eq!(s.results.len(), 2);
    for f in &s.manifest.outputs {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), s.results.iter().map(|r| r.metrics.len()).sum::<usize>());
    let images = dir.path().join("images");
    let self_eval = eval_dirs(&images, &images).unwrap();
    assert!(!self_eval.is_empty());
    assert!(self_eval.iter().all(|m| m.psnr_db.is_none() && (m.ssim - 1.0).abs() < 1e-12));
}
