use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use unisplat::gaussian::read_ply;
use unisplat::geom::{CameraModel, Pose};
use unisplat::image::{write_pgm16, write_ppm, DEPTH_PGM_SCALE, UNIT_PGM_SCALE};
use unisplat::losses::write_metrics_jsonl;
use unisplat::memory::read_checkpoint;
use unisplat::pipeline::{eval_dirs, render_novel, run, Overrides, PipelineConfig, ScaleMode};
use unisplat::render::RenderOptions;
use unisplat::synthetic::{SyntheticScene, DESK_CAMERA_HEIGHT, DESK_HEIGHT, DESK_WIDTH};
use unisplat::{gradcheck, Result};

#[derive(Parser)]
#[command(name = "unisplat", version, about = "Streaming Gaussian scene reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stream every frame of a scene and write all artifacts.
    Run(RunArgs),
    /// Render a memory checkpoint from an arbitrary pose.
    RenderNovel(NovelArgs),
    /// PSNR/SSIM between matching PPM files of two directories.
    Eval(EvalArgs),
    /// Finite-difference audit of the renderer and loss gradients.
    Gradcheck(GradArgs),
    /// Write a default synthetic scene file.
    GenScene(SceneArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    scale_mode: Option<ScaleMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct NovelArgs {
    /// Run output directory holding memory.ply and memory.json.
    #[arg(long)]
    memory: PathBuf,
    /// Extra Gaussians in the checkpoint's last ego frame.
    #[arg(long)]
    gaussians: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ego offset from the last pose: x y z in meters.
    #[arg(long, num_args = 3, allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.0])]
    offset: Vec<f64>,
    /// Camera yaw in degrees relative to the ego heading.
    #[arg(long, allow_hyphen_values = true, default_value_t = -110.0)]
    yaw: f64,
    #[arg(long, default_value_t = 70.0)]
    hfov: f64,
    #[arg(long, num_args = 3, default_values_t = [0.55, 0.7, 0.9])]
    background: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Output JSONL file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit the moving object.
    #[arg(long)]
    r#static: bool,
}

fn novel(a: &NovelArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mem = read_checkpoint(&a.memory, "memory")?;
    let extra = match &a.gaussians {
        Some(p) => Some(read_ply(io::BufReader::new(fs::File::open(p)?))?),
        None => None,
    };
    let [w, h] = cfg.render.resolution.unwrap_or([DESK_WIDTH, DESK_HEIGHT]);
    let cam = CameraModel::looking_along(
        a.yaw.to_radians(),
        Vector3::new(0.0, 0.0, DESK_CAMERA_HEIGHT),
        a.hfov.to_radians(),
        w,
        h,
    )?;
    let offset = Pose::from_translation(Vector3::new(a.offset[0], a.offset[1], a.offset[2]));
    let bg = cfg
        .render
        .background
        .map_or(Vector3::new(a.background[0], a.background[1], a.background[2]), Vector3::from);
    let opts = RenderOptions {
        tile_size: cfg.render.tile_size,
    };
    let f = render_novel(&mem, extra.as_ref(), &offset, &cam, bg, &opts);
    fs::create_dir_all(&a.out)?;
    write_ppm(&a.out.join("novel.ppm"), &f.color)?;
    write_pgm16(&a.out.join("novel_depth.pgm"), &f.depth, DEPTH_PGM_SCALE)?;
    write_pgm16(&a.out.join("novel_alpha.pgm"), &f.alpha, UNIT_PGM_SCALE)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res: Result<bool> = match &cli.cmd {
        Cmd::Run(a) => {
            let ov = Overrides {
                frames: a.frames,
                scale_mode: a.scale_mode,
                seed: a.seed,
                trace: a.trace,
            };
            run(&a.config, &a.scene, &a.out, &ov).map(|s| {
                println!("{} frames, memory {}, manifest {}", s.results.len(), s.memory.len(), a.out.join("manifest.json").display());
                true
            })
        }
        Cmd::RenderNovel(a) => novel(a).map(|_| true),
        Cmd::Eval(a) => eval_dirs(&a.pred, &a.gt).and_then(|recs| {
            match &a.out {
                Some(p) => write_metrics_jsonl(io::BufWriter::new(fs::File::create(p)?), &recs)?,
                None => write_metrics_jsonl(io::stdout().lock(), &recs)?,
            }
            Ok(true)
        }),
        Cmd::Gradcheck(a) => {
            let results = gradcheck::run_all(a.cases, a.seed);
            let mut out = io::stdout().lock();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                let _ = writeln!(out, "{}", serde_json::to_string(r).unwrap_or_default());
            }
            Ok(ok)
        }
        Cmd::GenScene(a) => {
            let scene = if a.r#static {
                SyntheticScene::desk_static(a.seed)
            } else {
                SyntheticScene::desk(a.seed)
            };
            scene.to_json().and_then(|s| Ok(fs::write(&a.out, s)?)).map(|_| true)
        }
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("unisplat: {e}");
            ExitCode::FAILURE
        }
    }
}
