//! Renders a handful of hand-placed Gaussians and writes color, depth and
//! alpha images.
//!
//! cargo run --release --example render_splats -- [out_dir]

use std::path::PathBuf;

use nalgebra::{UnitQuaternion, Vector3};
use unisplat::gaussian::{GaussianPrimitive, GaussianSet, Origin, Source};
use unisplat::geom::{CameraModel, Pose};
use unisplat::image::{write_pgm16, write_ppm, DEPTH_PGM_SCALE, UNIT_PGM_SCALE};
use unisplat::render::{render_with, RenderOptions};

fn splat(mean: [f64; 3], scale: [f64; 3], yaw: f64, color: [f64; 3], opacity: f64) -> GaussianPrimitive {
    GaussianPrimitive {
        mean: Vector3::from(mean),
        opacity,
        scale: Vector3::from(scale),
        rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
        color: Vector3::from(color),
        dynamic_score: 0.0,
        source: Source::Point,
        origin: Origin::Unknown,
    }
}

fn main() -> unisplat::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/render_splats".into()));
    std::fs::create_dir_all(&out)?;
    let cam = CameraModel::new(90.0, 90.0, 64.0, 48.0, 128, 96, Pose::identity())?;
    let set = GaussianSet::new(
        vec![
            splat([0.0, 0.0, 4.0], [0.6, 0.2, 0.2], 0.4, [0.9, 0.2, 0.1], 0.9),
            splat([0.5, 0.3, 3.0], [0.25, 0.25, 0.25], 0.0, [0.1, 0.7, 0.2], 0.7),
            splat([-1.0, -0.4, 6.0], [0.2, 0.9, 0.3], -0.8, [0.2, 0.3, 0.9], 0.95),
            splat([0.0, 0.8, 2.5], [1.5, 0.05, 0.4], 0.0, [0.9, 0.9, 0.3], 0.6),
        ],
        0,
    );
    let bg = Vector3::new(0.05, 0.05, 0.08);
    for tile in [8, 16, 128] {
        let t0 = std::time::Instant::now();
        let f = render_with(&set, &cam, bg, &RenderOptions { tile_size: tile });
        let covered = f.alpha.data.iter().filter(|&&a| a > 0.5).count();
        println!(
            "tile {tile:3}: {covered} px with alpha > 0.5, {:.2} ms",
            1e3 * t0.elapsed().as_secs_f64()
        );
        if tile == 16 {
            write_ppm(&out.join("color.ppm"), &f.color)?;
            write_pgm16(&out.join("depth.pgm"), &f.depth, DEPTH_PGM_SCALE)?;
            write_pgm16(&out.join("alpha.pgm"), &f.alpha, UNIT_PGM_SCALE)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
