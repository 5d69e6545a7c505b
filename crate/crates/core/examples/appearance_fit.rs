//! Fits primitive colors and opacities to the input views of the static
//! scene, starting from zero decoder weights.
//!
//! cargo run --release --example appearance_fit -- [steps] [lr]

use nalgebra::Vector3;
use unisplat::gaussian::{GaussianSet, Source};
use unisplat::image::Grid2;
use unisplat::losses::psnr;
use unisplat::optimize::{optimize_appearance, AppearanceConfig, PosedImage};
use unisplat::pipeline::{Pipeline, PipelineConfig};
use unisplat::render::render;
use unisplat::synthetic::{raycast_frame, SyntheticScene};

fn mean_psnr(set: &GaussianSet, views: &[PosedImage<'_>], bg: Vector3<f64>) -> f64 {
    let s: f64 = views.iter().map(|v| psnr(&render(set, v.camera, bg).color, v.image).unwrap()).sum();
    s / views.len() as f64
}

fn main() -> unisplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).map_or(200, |s| s.parse().expect("steps"));
    let lr = args.get(2).map_or(AppearanceConfig::default().lr, |s| s.parse().expect("lr"));

    let scene = SyntheticScene::desk_static(0);
    let cfg = PipelineConfig {
        novel_views: false,
        ..Default::default()
    };
    let mut pipe = Pipeline::for_scene(cfg, &scene)?;
    let b = raycast_frame(&scene, 0)?;
    let bg = scene.sky();
    let r = pipe.step(&b, None, bg)?;

    let views: Vec<PosedImage<'_>> = b
        .cameras
        .iter()
        .zip(&b.images)
        .map(|(camera, image)| PosedImage { camera, image })
        .collect();
    let gray = Grid2::filled(b.images[0].width, b.images[0].height, [0.5; 3]);
    let gray_psnr: f64 = views.iter().map(|v| psnr(&gray, v.image).unwrap()).sum::<f64>() / views.len() as f64;

    let points = GaussianSet::new(
        r.completed.gaussians.iter().filter(|g| g.source == Source::Point).cloned().collect(),
        r.completed.frame,
    );
    println!("gray background   {gray_psnr:7.3} dB");
    println!("completed set     {:7.3} dB ({} primitives)", mean_psnr(&r.completed, &views, bg), r.completed.len());
    println!("point branch      {:7.3} dB ({} primitives)", mean_psnr(&points, &views, bg), points.len());

    let opt = AppearanceConfig {
        steps,
        lr,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (fit, hist) = optimize_appearance(&points, &views, bg, &opt)?;
    println!(
        "after {steps} steps {:7.3} dB (loss {:.5} -> {:.5}, {:.1} s)",
        mean_psnr(&fit, &views, bg),
        hist[0],
        hist[hist.len() - 1],
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
