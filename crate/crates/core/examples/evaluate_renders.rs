//! Scores the images of a run directory against ray-cast ground truth
//! written alongside them.
//!
//! cargo run --release --example evaluate_renders

use unisplat::image::write_ppm;
use unisplat::pipeline::{eval_dirs, run_scene, PipelineConfig};
use unisplat::synthetic::{raycast_frame, SyntheticScene};

fn main() -> unisplat::Result<()> {
    let dir = std::env::temp_dir().join("unisplat_evaluate_renders");
    let gt = dir.join("gt");
    std::fs::create_dir_all(&gt)?;
    let scene = SyntheticScene::desk(2);
    let cfg = PipelineConfig {
        frames: Some(3),
        novel_views: false,
        ..Default::default()
    };
    run_scene(cfg, &scene, &dir)?;
    for t in 0..3 {
        let b = raycast_frame(&scene, t)?;
        for (k, img) in b.images.iter().enumerate() {
            write_ppm(&gt.join(format!("t{t:03}_cam{k}.ppm")), img)?;
        }
    }
    for m in eval_dirs(&dir.join("images"), &gt)? {
        println!(
            "frame {} {:>5}: psnr {:>6.2} dB  ssim {:.4}",
            m.frame_id,
            m.view_id,
            m.psnr_db.unwrap_or(f64::INFINITY),
            m.ssim
        );
    }
    Ok(())
}
