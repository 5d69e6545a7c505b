//! Streams the static scene and renders the accumulated memory from poses
//! the rig never visited, next to ray-cast ground truth.
//!
//! cargo run --release --example novel_view -- [out_dir]

use std::path::PathBuf;

use nalgebra::Vector3;
use unisplat::geom::{CameraModel, Pose};
use unisplat::image::write_ppm;
use unisplat::losses::{psnr, ssim};
use unisplat::pipeline::{render_novel, Pipeline, PipelineConfig};
use unisplat::render::RenderOptions;
use unisplat::synthetic::{raycast_frame, raycast_view, SyntheticScene, DESK_CAMERA_HEIGHT};

fn main() -> unisplat::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/novel_view".into()));
    std::fs::create_dir_all(&out)?;
    let scene = SyntheticScene::desk_static(0);
    let cfg = PipelineConfig {
        novel_views: false,
        ..Default::default()
    };
    let mut pipe = Pipeline::for_scene(cfg, &scene)?;
    for t in 0..scene.frames() as u64 {
        pipe.step(&raycast_frame(&scene, t)?, None, scene.sky())?;
    }
    let mem = pipe.memory();
    let last = scene.frames() as u64 - 1;
    println!("memory holds {} primitives after {} frames", mem.len(), last + 1);
    for (i, (dx, dy, yaw)) in [(-3.0, 0.0, 90.0), (-5.0, 1.0, -90.0), (-2.0, -0.5, 180.0)].into_iter().enumerate() {
        let cam = CameraModel::looking_along(f64::to_radians(yaw), Vector3::new(0.0, 0.0, DESK_CAMERA_HEIGHT), 70f64.to_radians(), 96, 64)?;
        let offset = Pose::from_translation(Vector3::new(dx, dy, 0.0));
        let f = render_novel(mem, None, &offset, &cam, scene.sky(), &RenderOptions::default());
        let pose = mem.world_from_ego_last.compose(&offset);
        let gt = raycast_view(&scene, &cam, &pose, last).image;
        println!(
            "view {i}: offset ({dx}, {dy}) yaw {yaw}: psnr {:.2} dB, ssim {:.3}",
            psnr(&f.color, &gt)?,
            ssim(&f.color, &gt)?
        );
        write_ppm(&out.join(format!("view{i}.ppm")), &f.color)?;
        write_ppm(&out.join(format!("view{i}_gt.ppm")), &gt)?;
    }
    Ok(())
}
