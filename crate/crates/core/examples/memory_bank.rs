//! Drives the streaming memory by hand: admission by dynamic score, view
//! filtering, completion and a checkpoint round trip.
//!
//! cargo run --release --example memory_bank

use nalgebra::{UnitQuaternion, Vector3};
use unisplat::gaussian::{GaussianPrimitive, GaussianSet, Origin, Source};
use unisplat::geom::Pose;
use unisplat::memory::{complete, read_checkpoint, update, view_filter, write_checkpoint, MemoryBank, DEFAULT_TAU_D};
use unisplat::synthetic::desk_rig;

fn row(frame: u64, dynamic_every: usize) -> GaussianSet {
    let gs = (0..40)
        .map(|i| GaussianPrimitive {
            mean: Vector3::new(2.0 + 0.5 * (i % 10) as f64, -3.0 + 1.5 * (i / 10) as f64, 0.5),
            opacity: 0.8,
            scale: Vector3::repeat(0.1),
            rotation: UnitQuaternion::identity(),
            color: Vector3::repeat(0.5),
            dynamic_score: if i % dynamic_every == 0 { 0.9 } else { 0.05 },
            source: Source::Point,
            origin: Origin::Unknown,
        })
        .collect();
    GaussianSet::new(gs, frame)
}

fn main() -> unisplat::Result<()> {
    let rig = desk_rig();
    let mut mem = MemoryBank::new(100);
    for t in 0..4u64 {
        let world_from_ego = Pose::from_yaw(0.6 * t as f64, Vector3::new(t as f64, 0.0, 0.0));
        let filtered = view_filter(&mem, &rig, &world_from_ego);
        let current = row(t, 4);
        let completed = complete(&current, &filtered, &world_from_ego);
        let in_view = mem.len() - filtered.len();
        mem = update(&filtered, &current, &world_from_ego, DEFAULT_TAU_D)?;
        println!(
            "t={t}: {in_view:3} dropped in view, {:3} kept, {:3} admitted of {}, completed {:3}, memory {:3}",
            filtered.len(),
            current.gaussians.iter().filter(|g| g.dynamic_score < DEFAULT_TAU_D).count(),
            current.len(),
            completed.len(),
            mem.len()
        );
    }
    let dir = std::env::temp_dir().join("unisplat_memory_bank");
    std::fs::create_dir_all(&dir)?;
    write_checkpoint(&mem, &dir, "memory")?;
    let back = read_checkpoint(&dir, "memory")?;
    let drift = mem
        .gaussians
        .gaussians
        .iter()
        .zip(&back.gaussians.gaussians)
        .map(|(a, b)| (a.mean - b.mean).amax())
        .fold(0.0, f64::max);
    println!(
        "checkpoint in {}: {} members, order kept {}, max mean drift {drift:.1e} m",
        dir.display(),
        back.len(),
        back.seq == mem.seq
    );
    Ok(())
}
