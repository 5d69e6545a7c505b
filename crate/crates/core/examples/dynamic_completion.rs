//! Streams the default scene twice, once keeping dynamic primitives out of
//! memory and once admitting everything, then compares both memories where
//! the moving box used to be.
//!
//! cargo run --release --example dynamic_completion

use unisplat::gaussian::Origin;
use unisplat::pipeline::{vacated_region_error, DynamicScores, Pipeline, PipelineConfig};
use unisplat::render::RenderOptions;
use unisplat::synthetic::{held_out_camera, raycast_frame, SyntheticScene};

fn stream(scene: &SyntheticScene, scores: DynamicScores) -> unisplat::Result<Pipeline> {
    let cfg = PipelineConfig {
        dynamic_scores: scores,
        novel_views: false,
        ..Default::default()
    };
    let mut pipe = Pipeline::for_scene(cfg, scene)?;
    for t in 0..scene.frames() as u64 {
        let b = raycast_frame(scene, t)?;
        pipe.step(&b, None, scene.sky())?;
    }
    Ok(pipe)
}

fn main() -> unisplat::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let scene = SyntheticScene::desk(seed);
    let last = scene.frames() as u64 - 1;
    let cam = held_out_camera();
    let masks: Vec<_> = (0..=last)
        .map(|t| raycast_frame(&scene, t).map(|b| b.dynamic_masks))
        .collect::<unisplat::Result<_>>()?;
    for (name, mode) in [("filtered", DynamicScores::GroundTruth), ("unfiltered", DynamicScores::AllStatic)] {
        let pipe = stream(&scene, mode)?;
        let mem = pipe.memory();
        let dynamic_pixels = mem
            .gaussians
            .gaussians
            .iter()
            .filter(|g| match g.origin {
                Origin::Pixel { frame, camera, pixel } => masks[frame as usize][camera as usize].data[pixel as usize],
                _ => false,
            })
            .count();
        let (sse, n) = vacated_region_error(mem, &scene, &cam, last, &RenderOptions::default());
        println!(
            "{name:>10}: memory {:6}, from dynamic pixels {dynamic_pixels:5}, vacated-region mse {:.5} over {n} px",
            mem.len(),
            sse / n.max(1) as f64
        );
    }
    Ok(())
}
