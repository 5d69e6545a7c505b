//! Recovers per-camera metric scale from point pairs, with and without
//! gross outliers.
//!
//! cargo run --release --example scale_recovery

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unisplat::scale::{optimal_scale_ls, optimal_scale_robust};
use unisplat::synthetic::{raycast_frame, scale_reference, SyntheticScene};

fn main() -> unisplat::Result<()> {
    let scene = SyntheticScene::desk(0);
    let b = raycast_frame(&scene, 0)?;
    let mut r = scale_reference(&b, 500, 7)?;
    println!("true      {:?}", b.gamma_star.gamma);
    println!("ls        {:.6?}", optimal_scale_ls(&r)?.gamma);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pairs in &mut r.pairs {
        for (_, q) in pairs.iter_mut() {
            if rng.random_bool(0.2) {
                *q = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(0.0..5.0));
            }
        }
    }
    println!("with 20% outliers:");
    println!("ls        {:.6?}", optimal_scale_ls(&r)?.gamma);
    for f in [0.9, 0.7, 0.5] {
        println!("robust {f:.1} {:.6?}", optimal_scale_robust(&r, f)?.gamma);
    }
    Ok(())
}
