//! Voxelizes one frame of the synthetic scene, attaches view features and
//! probes the scaffold.
//!
//! cargo run --release --example voxel_scaffold

use nalgebra::Vector3;
use unisplat::geom::GridSpec;
use unisplat::scaffold::{attach_view_features, voxelize, SparseScaffold};
use unisplat::synthetic::{raycast_frame, SyntheticScene};

fn main() -> unisplat::Result<()> {
    let scene = SyntheticScene::desk(0);
    let b = raycast_frame(&scene, 0)?;
    let grid = GridSpec::desk();
    let s = voxelize(&b.true_points, &grid);
    let occ = s.occupancy();
    println!(
        "{} valid points -> {} voxels holding {} points",
        b.true_points.valid_count(),
        occ.count,
        s.total_point_count()
    );
    if let Some((lo, hi)) = occ.bounds {
        println!("occupied centers span {:.2?} .. {:.2?}", lo.as_slice(), hi.as_slice());
    }
    let busiest = s.entries.iter().max_by_key(|(_, e)| e.point_count).expect("non-empty");
    println!(
        "busiest voxel {:?}: {} points, centroid {:.3?}",
        busiest.0 .0,
        busiest.1.point_count,
        busiest.1.centroid().as_slice()
    );

    let f = attach_view_features(&s, &b.cameras, &b.features)?;
    println!("features per voxel: {} -> {}", s.channels, f.channels);
    for p in [busiest.1.centroid(), Vector3::new(0.0, 0.0, 5.9), Vector3::new(40.0, 0.0, 0.0)] {
        let v = f.retrieve(&p);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("retrieve {:.2?}: |f| = {norm:.4}", p.as_slice());
    }

    let mut buf = Vec::new();
    f.write_dump(&mut buf)?;
    let back = SparseScaffold::read_dump(buf.as_slice())?;
    let drift = f
        .entries
        .iter()
        .flat_map(|(k, e)| e.feature.iter().zip(&back.entries[k].feature).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    println!("dump {} bytes, {} voxels back, max feature drift {drift:.1e} (f32 storage)", buf.len(), back.len());
    Ok(())
}
