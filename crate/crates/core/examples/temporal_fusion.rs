//! Fuses two consecutive frames: spatial sparse convolution on each, then
//! the previous result warped by ego-motion and added to the current one.
//!
//! cargo run --release --example temporal_fusion

use unisplat::fusion::{sparse_conv_forward, temporal_fuse, warp_scaffold_report};
use unisplat::pipeline::PipelineConfig;
use unisplat::scaffold::{attach_view_features, voxelize};
use unisplat::synthetic::{raycast_frame, SyntheticScene};

fn main() -> unisplat::Result<()> {
    let scene = SyntheticScene::desk_static(0);
    let cfg = PipelineConfig::default();
    let (geo, sem) = scene.feature_channels();
    let w = cfg.init_weights(geo + sem);
    let mut prev = None;
    for t in 0..3 {
        let b = raycast_frame(&scene, t)?;
        let s = attach_view_features(&voxelize(&b.true_points, &cfg.grid), &b.cameras, &b.features)?;
        let spa = sparse_conv_forward(&w.spatial, &s)?;
        let fused = match &prev {
            None => temporal_fuse(&spa, &unisplat::scaffold::SparseScaffold::empty(cfg.grid, spa.channels), &b.prev_to_cur, &w.time_embedding, &w.temporal)?,
            Some(p) => {
                let (warped, rep) = warp_scaffold_report(p, &b.prev_to_cur, &cfg.grid);
                let shared = warped.entries.keys().filter(|k| spa.entries.contains_key(k)).count();
                println!(
                    "t={t}: warped {} voxels ({} dropped, {} merged), {shared} overlap the current frame",
                    warped.len(),
                    rep.dropped_entries,
                    rep.merged_entries
                );
                temporal_fuse(&spa, p, &b.prev_to_cur, &w.time_embedding, &w.temporal)?
            }
        };
        println!("t={t}: current {} voxels, fused {} voxels, {} channels", spa.len(), fused.len(), fused.channels);
        prev = Some(fused);
    }
    Ok(())
}
