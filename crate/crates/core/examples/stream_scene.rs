//! Streams the default dynamic scene and writes every artifact of a run.
//!
//! cargo run --release --example stream_scene -- [out_dir] [frames]

use std::path::PathBuf;

use unisplat::pipeline::{run_scene, PipelineConfig};
use unisplat::synthetic::SyntheticScene;

fn main() -> unisplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map_or("out/stream_scene", String::as_str));
    let cfg = PipelineConfig {
        frames: args.get(2).map(|s| s.parse().expect("frames")),
        ..Default::default()
    };
    let scene = SyntheticScene::desk(0);
    let t0 = std::time::Instant::now();
    let s = run_scene(cfg, &scene, &out)?;
    for r in &s.results {
        let input: Vec<f64> = r.metrics.iter().filter(|m| !m.view_id.starts_with("novel")).filter_map(|m| m.psnr_db).collect();
        let mean = input.iter().sum::<f64>() / input.len().max(1) as f64;
        println!(
            "t={} points {:5} voxels {:5} memory-in {:6} memory {:6} loss {:.4} input psnr {mean:.2} dB",
            r.timestep, r.counts.point, r.counts.voxel, r.counts.memory, r.memory_size, r.loss
        );
    }
    println!(
        "{} frames in {:.2} s, config {}, outputs in {}",
        s.results.len(),
        t0.elapsed().as_secs_f64(),
        &s.manifest.config_hash[..12],
        out.display()
    );
    Ok(())
}
