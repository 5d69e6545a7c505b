//! Streaming per-frame loop and run artifacts.
//!
//! Stage order per frame: scale alignment, voxelization, view feature
//! attachment, spatial fusion, temporal fusion, decoding, view filtering,
//! completion, memory update, rendering, metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{decode_frame, DecoderNets, RAW_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{sparse_conv_forward, temporal_fuse, SparseConvNet, TimeEmbedding};
use crate::gaussian::{write_ply, GaussianSet, Origin, Source};
use crate::geom::{CameraModel, GridSpec, Pose};
use crate::image::{read_ppm, write_pgm16, write_ppm, DEPTH_PGM_SCALE, UNIT_PGM_SCALE};
use crate::losses::{total_loss, write_metrics_jsonl, LossConfig, LossTerms, MetricRecord, ViewInput, ViewRole, ViewTarget};
use crate::memory::{complete, update, view_filter, write_checkpoint, MemoryBank, DEFAULT_CAPACITY, DEFAULT_TAU_D};
use crate::nn::TinyNet;
use crate::render::{render_with, RenderOptions, RenderedFrame, DEFAULT_TILE};
use crate::scaffold::{attach_view_features, voxelize_labeled, SparseScaffold, INITIAL_CHANNELS};
use crate::scale::{apply_scale, optimal_scale_ls, optimal_scale_robust, predict_scale, ScaleVector, DEFAULT_INLIER_FRACTION};
use crate::synthetic::{raycast_frame, raycast_view, scale_reference, vacated_region, FrameBundle, SyntheticScene};
use crate::weights::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    OracleLs,
    OracleRobust,
    Predicted,
    Off,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown scale mode {s:?}")))
    }
}

/// Where decoded dynamic scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicScores {
    Predicted,
    /// 1 for primitives decoded from dynamic pixels, or from voxels holding
    /// dynamic points this frame (history decides for unobserved voxels).
    GroundTruth,
    /// Every primitive scores 0, so memory admits everything.
    AllStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Zeros,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Sky color of the scene when absent.
    pub background: Option<[f64; 3]>,
    /// Output size for `render-novel`; `run` renders at the rig resolution.
    pub resolution: Option<[usize; 2]>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE,
            background: None,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub weights: u64,
    pub scale_reference: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            weights: 17,
            scale_reference: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub fused_channels: usize,
    pub spatial_layers: usize,
    pub spatial_down_levels: usize,
    pub temporal_layers: usize,
    pub temporal_down_levels: usize,
    pub conv_gain: f64,
    pub time_embedding_scale: f64,
    pub point_hidden: usize,
    pub voxel_hidden: usize,
    pub head_init: HeadInit,
    pub head_gain: f64,
    pub g: usize,
    pub tau_d: f64,
    pub loss: LossConfig,
    pub scale_mode: ScaleMode,
    pub inlier_fraction: f64,
    pub scale_pairs: usize,
    pub memory_capacity: usize,
    pub dynamic_scores: DynamicScores,
    pub temporal_fusion: bool,
    pub novel_views: bool,
    pub render: RenderConfig,
    pub seeds: Seeds,
    pub weights: Option<PathBuf>,
    pub frames: Option<usize>,
    pub trace: bool,
    pub write_images: bool,
    pub write_gaussians: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            fused_channels: 16,
            spatial_layers: 4,
            spatial_down_levels: 1,
            temporal_layers: 2,
            temporal_down_levels: 0,
            conv_gain: 1.0,
            time_embedding_scale: 0.05,
            point_hidden: 32,
            voxel_hidden: 32,
            head_init: HeadInit::Zeros,
            head_gain: 0.5,
            g: 2,
            tau_d: DEFAULT_TAU_D,
            loss: LossConfig::default(),
            scale_mode: ScaleMode::OracleLs,
            inlier_fraction: DEFAULT_INLIER_FRACTION,
            scale_pairs: 500,
            memory_capacity: DEFAULT_CAPACITY,
            dynamic_scores: DynamicScores::GroundTruth,
            temporal_fusion: true,
            novel_views: true,
            render: RenderConfig::default(),
            seeds: Seeds::default(),
            weights: None,
            frames: None,
            trace: false,
            write_images: true,
            write_gaussians: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.fused_channels == 0 || self.spatial_layers == 0 || self.temporal_layers == 0 {
            return bad("channel widths and layer counts must be positive");
        }
        if self.point_hidden == 0 || self.voxel_hidden == 0 || self.g == 0 {
            return bad("head widths and g must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_d) {
            return bad("tau_d must lie in [0, 1]");
        }
        if !(self.inlier_fraction > 0.0 && self.inlier_fraction <= 1.0) {
            return bad("inlier_fraction must lie in (0, 1]");
        }
        if self.scale_pairs == 0 || self.render.tile_size == 0 {
            return bad("scale_pairs and tile_size must be positive");
        }
        if self.frames == Some(0) {
            return bad("frames must be positive");
        }
        if !(self.conv_gain.is_finite() && self.head_gain.is_finite() && self.time_embedding_scale.is_finite()) {
            return bad("init gains must be finite");
        }
        self.loss.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ConfigNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex sha256 of the compact JSON serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Seeded initial weights for a scene with `feature_channels` per pixel.
    pub fn init_weights(&self, feature_channels: usize) -> ModelWeights {
        let f = self.fused_channels;
        let s = self.seeds.weights;
        let mut spatial_w = vec![feature_channels + INITIAL_CHANNELS];
        spatial_w.extend(std::iter::repeat_n(f, self.spatial_layers));
        let temporal_w = vec![f; self.temporal_layers + 1];
        let head = |widths: &[usize], seed: u64| match self.head_init {
            HeadInit::Zeros => TinyNet::zeros(widths),
            HeadInit::Random => TinyNet::random(widths, seed, self.head_gain),
        };
        ModelWeights {
            spatial: SparseConvNet::random(&spatial_w, self.spatial_down_levels, s, self.conv_gain),
            temporal: SparseConvNet::random(&temporal_w, self.temporal_down_levels, s + 1, self.conv_gain),
            time_embedding: TimeEmbedding::random(f, s + 2, self.time_embedding_scale),
            point_head: head(&[f + feature_channels, self.point_hidden, RAW_CHANNELS], s + 3),
            voxel_head: head(&[f, self.voxel_hidden, RAW_CHANNELS * self.g], s + 4),
            scale_head: None,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SourceCounts {
    pub point: usize,
    pub voxel: usize,
    pub memory: usize,
}

impl SourceCounts {
    pub fn of(set: &GaussianSet) -> Self {
        Self {
            point: set.count_by_source(Source::Point),
            voxel: set.count_by_source(Source::Voxel),
            memory: set.count_by_source(Source::Memory),
        }
    }

    pub fn total(&self) -> usize {
        self.point + self.voxel + self.memory
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub stage: &'static str,
    pub millis: f64,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub view_id: String,
    pub role: ViewRole,
    pub camera: CameraModel,
    pub frame: RenderedFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub timestep: u64,
    pub gamma: ScaleVector,
    pub counts: SourceCounts,
    /// Voxels of the single-frame scaffold.
    pub scaffold_voxels: usize,
    pub fused_voxels: usize,
    pub memory_size: usize,
    /// `G_t ∪ M'_{t-1}` in the current ego frame.
    pub completed: GaussianSet,
    pub views: Vec<RenderedView>,
    pub metrics: Vec<MetricRecord>,
    pub loss: f64,
    pub loss_terms: Vec<LossTerms>,
    pub trace: Vec<StageTrace>,
}

/// Deterministic per-frame summary line.
#[derive(Debug, Clone, Serialize)]
pub struct FrameSummary<'a> {
    pub timestep: u64,
    pub gamma: &'a [f64],
    pub counts: SourceCounts,
    pub scaffold_voxels: usize,
    pub fused_voxels: usize,
    pub memory_size: usize,
    pub loss: f64,
    pub loss_terms: &'a [LossTerms],
}

impl FrameResult {
    pub fn summary(&self) -> FrameSummary<'_> {
        FrameSummary {
            timestep: self.timestep,
            gamma: &self.gamma.gamma,
            counts: self.counts,
            scaffold_voxels: self.scaffold_voxels,
            fused_voxels: self.fused_voxels,
            memory_size: self.memory_size,
            loss: self.loss,
            loss_terms: &self.loss_terms,
        }
    }
}

struct Tracer {
    on: bool,
    stages: Vec<StageTrace>,
    t0: Instant,
}

impl Tracer {
    fn new(on: bool) -> Self {
        Self {
            on,
            stages: Vec::new(),
            t0: Instant::now(),
        }
    }

    fn mark(&mut self, stage: &'static str, input: usize, output: usize) {
        if self.on {
            let now = Instant::now();
            self.stages.push(StageTrace {
                stage,
                millis: (now - self.t0).as_secs_f64() * 1e3,
                input,
                output,
            });
            self.t0 = now;
        }
    }
}

/// Cross-frame state: the cached fused scaffold and the memory bank.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub weights: ModelWeights,
    fused: Option<SparseScaffold>,
    memory: MemoryBank,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.fused_channels;
        let ok = weights.spatial.out_channels() == f
            && weights.temporal.in_channels() == f
            && weights.temporal.out_channels() == f
            && weights.time_embedding.channels() == f
            && weights.voxel_head.input_width() == f
            && weights.voxel_head.output_width() == RAW_CHANNELS * cfg.g;
        if !ok {
            return Err(Error::ShapeMismatch("weights do not match the configured widths".into()));
        }
        let memory = MemoryBank::new(cfg.memory_capacity);
        Ok(Self {
            cfg,
            weights,
            fused: None,
            memory,
        })
    }

    /// Weights from the configured file, or seeded initialization.
    pub fn for_scene(cfg: PipelineConfig, scene: &SyntheticScene) -> Result<Self> {
        let (geo, sem) = scene.feature_channels();
        let weights = match &cfg.weights {
            Some(p) => ModelWeights::load(p)?,
            None => cfg.init_weights(geo + sem),
        };
        Self::new(cfg, weights)
    }

    pub fn fused(&self) -> Option<&SparseScaffold> {
        self.fused.as_ref()
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    fn background(&self, scene_sky: Vector3<f64>) -> Vector3<f64> {
        self.cfg.render.background.map_or(scene_sky, Vector3::from)
    }

    fn solve_scale(&self, b: &FrameBundle) -> Result<ScaleVector> {
        let n = b.points.cameras.len();
        let seed = self.cfg.seeds.scale_reference ^ b.timestep.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        match self.cfg.scale_mode {
            ScaleMode::Off => Ok(ScaleVector::ones(n)),
            ScaleMode::OracleLs => optimal_scale_ls(&scale_reference(b, self.cfg.scale_pairs, seed)?),
            ScaleMode::OracleRobust => {
                optimal_scale_robust(&scale_reference(b, self.cfg.scale_pairs, seed)?, self.cfg.inlier_fraction)
            }
            ScaleMode::Predicted => {
                let head = self
                    .weights
                    .scale_head
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("predicted scale mode needs a scale head".into()))?;
                let g = predict_scale(&b.features.pooled_geometry(), head)?;
                if g.len() != n {
                    return Err(Error::LengthMismatch { expected: n, got: g.len() });
                }
                Ok(g)
            }
        }
    }

    /// One streaming step. `next` supplies the following frame for
    /// novel-view rendering and supervision.
    pub fn step(&mut self, b: &FrameBundle, next: Option<&FrameBundle>, sky: Vector3<f64>) -> Result<FrameResult> {
        let mut tr = Tracer::new(self.cfg.trace);
        let grid = self.cfg.grid;

        let gamma = self.solve_scale(b).map_err(|e| e.at_stage("scale"))?;
        let points = apply_scale(&b.points, &gamma).map_err(|e| e.at_stage("scale"))?;
        tr.mark("scale", b.points.valid_count(), points.valid_count());

        let s0 = voxelize_labeled(&points, &grid, Some(&b.dynamic_masks));
        tr.mark("voxelize", points.valid_count(), s0.len());
        let s1 = attach_view_features(&s0, &b.cameras, &b.features).map_err(|e| e.at_stage("attach_view_features"))?;
        tr.mark("attach_view_features", s0.len(), s1.len());
        let spa = sparse_conv_forward(&self.weights.spatial, &s1).map_err(|e| e.at_stage("spatial_fusion"))?;
        tr.mark("spatial_fusion", s1.len(), spa.len());

        let empty = SparseScaffold::empty(grid, spa.channels);
        let prev = if self.cfg.temporal_fusion {
            self.fused.as_ref().unwrap_or(&empty)
        } else {
            &empty
        };
        let fused = temporal_fuse(&spa, prev, &b.prev_to_cur, &self.weights.time_embedding, &self.weights.temporal)
            .map_err(|e| e.at_stage("temporal_fusion"))?;
        tr.mark("temporal_fusion", spa.len() + prev.len(), fused.len());

        let nets = DecoderNets {
            point: &self.weights.point_head,
            voxel: &self.weights.voxel_head,
            per_voxel: self.cfg.g,
        };
        let mut decoded = decode_frame(&points, &fused, &b.features, &b.images, &nets, b.timestep)
            .map_err(|e| e.at_stage("decode"))?;
        self.assign_dynamic_scores(&mut decoded, b, &s0, &fused);
        tr.mark("decode", fused.len(), decoded.len());

        let filtered = view_filter(&self.memory, &b.cameras, &b.world_from_ego);
        tr.mark("view_filter", self.memory.len(), filtered.len());
        let completed = complete(&decoded, &filtered, &b.world_from_ego);
        tr.mark("complete", decoded.len() + filtered.len(), completed.len());
        let memory = update(&filtered, &decoded, &b.world_from_ego, self.cfg.tau_d).map_err(|e| e.at_stage("memory_update"))?;
        tr.mark("memory_update", filtered.len() + decoded.len(), memory.len());

        let bg = self.background(sky);
        let opts = RenderOptions {
            tile_size: self.cfg.render.tile_size,
        };
        let mut views = Vec::new();
        let mut targets: Vec<&ViewTarget> = Vec::new();
        for (k, cam) in b.cameras.iter().enumerate() {
            views.push(RenderedView {
                view_id: format!("cam{k}"),
                role: ViewRole::Input,
                camera: cam.clone(),
                frame: render_with(&completed, cam, bg, &opts),
            });
            targets.push(&b.targets[k]);
        }
        let mut novel_targets = Vec::new();
        if let (true, Some(nb)) = (self.cfg.novel_views, next) {
            for (k, cam) in nb.cameras.iter().enumerate() {
                // camera of frame t+1 expressed against frame t's ego frame
                let moved = CameraModel {
                    cam_from_ego: cam.cam_from_ego.compose(&nb.prev_to_cur),
                    ..cam.clone()
                };
                views.push(RenderedView {
                    view_id: format!("novel_cam{k}"),
                    role: ViewRole::Novel,
                    frame: render_with(&completed, &moved, bg, &opts),
                    camera: moved,
                });
                novel_targets.push(ViewTarget {
                    role: ViewRole::Novel,
                    scale_target: None,
                    ..nb.targets[k].clone()
                });
            }
        }
        targets.extend(novel_targets.iter());
        tr.mark("render", completed.len(), views.len());

        let inputs: Vec<ViewInput<'_>> = views
            .iter()
            .zip(&targets)
            .enumerate()
            .map(|(i, (v, t))| ViewInput {
                rendered: &v.frame,
                target: t,
                scale_pred: (v.role == ViewRole::Input).then(|| gamma.gamma[i]),
            })
            .collect();
        let loss = total_loss(&inputs, &self.cfg.loss).map_err(|e| e.at_stage("loss"))?;
        let metrics = views
            .iter()
            .zip(&targets)
            .map(|(v, t)| MetricRecord::evaluate(b.timestep, v.view_id.clone(), &v.frame.color, &t.image))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("metrics"))?;
        tr.mark("metrics", views.len(), metrics.len());

        let result = FrameResult {
            timestep: b.timestep,
            gamma,
            counts: SourceCounts::of(&completed),
            scaffold_voxels: s0.len(),
            fused_voxels: fused.len(),
            memory_size: memory.len(),
            completed,
            views,
            metrics,
            loss: loss.value,
            loss_terms: loss.terms,
            trace: tr.stages,
        };
        if self.cfg.temporal_fusion {
            self.fused = Some(fused);
        }
        self.memory = memory;
        Ok(result)
    }

    fn assign_dynamic_scores(&self, set: &mut GaussianSet, b: &FrameBundle, current: &SparseScaffold, fused: &SparseScaffold) {
        match self.cfg.dynamic_scores {
            DynamicScores::Predicted => {}
            DynamicScores::AllStatic => set.gaussians.iter_mut().for_each(|g| g.dynamic_score = 0.0),
            DynamicScores::GroundTruth => {
                for g in &mut set.gaussians {
                    let dynamic = match g.origin {
                        Origin::Pixel { camera, pixel, .. } => b.dynamic_masks[camera as usize].data[pixel as usize],
                        Origin::Voxel { key, .. } => match current.get(&key) {
                            Some(e) => e.dynamic_count > 0,
                            None => fused.get(&key).is_some_and(|e| e.dynamic_count > 0),
                        },
                        Origin::Unknown => false,
                    };
                    g.dynamic_score = if dynamic { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub frames: Option<usize>,
    pub scale_mode: Option<ScaleMode>,
    pub seed: Option<u64>,
    pub trace: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(f) = self.frames {
            cfg.frames = Some(f);
        }
        if let Some(m) = self.scale_mode {
            cfg.scale_mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seeds.weights = s;
            cfg.seeds.scale_reference = s.wrapping_add(12);
        }
        if self.trace {
            cfg.trace = true;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub scene_hash: String,
    pub seeds: Seeds,
    pub scene_seed: u64,
    pub frames: usize,
    pub config: PipelineConfig,
    pub outputs: Vec<String>,
}

pub struct RunSummary {
    pub results: Vec<FrameResult>,
    pub manifest: Manifest,
    pub memory: MemoryBank,
}

fn write_view(dir: &Path, t: u64, v: &RenderedView) -> Result<Vec<String>> {
    let stem = format!("t{t:03}_{}", v.view_id);
    let files = [
        format!("{stem}.ppm"),
        format!("{stem}_depth.pgm"),
        format!("{stem}_alpha.pgm"),
        format!("{stem}_dyn.pgm"),
    ];
    write_ppm(&dir.join(&files[0]), &v.frame.color)?;
    write_pgm16(&dir.join(&files[1]), &v.frame.depth, DEPTH_PGM_SCALE)?;
    write_pgm16(&dir.join(&files[2]), &v.frame.alpha, UNIT_PGM_SCALE)?;
    write_pgm16(&dir.join(&files[3]), &v.frame.dynamic, UNIT_PGM_SCALE)?;
    Ok(files.into_iter().map(|f| format!("images/{f}")).collect())
}

/// Streams every frame of `scene` and writes all artifacts under `out`.
pub fn run_scene(cfg: PipelineConfig, scene: &SyntheticScene, out: &Path) -> Result<RunSummary> {
    scene.validate()?;
    let n = cfg.frames.unwrap_or(scene.frames()).min(scene.frames());
    let config_hash = cfg.hash()?;
    let scene_hash = hex(&Sha256::digest(scene.to_json()?.as_bytes()));
    let mut pipe = Pipeline::for_scene(cfg, scene)?;
    let images = out.join("images");
    let gdir = out.join("gaussians");
    fs::create_dir_all(&images)?;
    if pipe.cfg.write_gaussians {
        fs::create_dir_all(&gdir)?;
    }
    let mut outputs = vec!["metrics.jsonl".to_string(), "frames.jsonl".into(), "memory.ply".into(), "memory.json".into()];
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut frames = BufWriter::new(File::create(out.join("frames.jsonl"))?);
    let mut trace = if pipe.cfg.trace {
        outputs.push("trace.jsonl".into());
        Some(BufWriter::new(File::create(out.join("trace.jsonl"))?))
    } else {
        None
    };
    let sky = scene.sky();
    let mut results = Vec::with_capacity(n);
    let mut next = Some(raycast_frame(scene, 0)?);
    for t in 0..n {
        let cur = next.take().expect("frame prepared");
        next = if t + 1 < scene.frames() { Some(raycast_frame(scene, t as u64 + 1)?) } else { None };
        let r = pipe.step(&cur, next.as_ref(), sky)?;
        write_metrics_jsonl(&mut metrics, &r.metrics)?;
        serde_json::to_writer(&mut frames, &r.summary())?;
        frames.write_all(b"\n")?;
        if let Some(tw) = trace.as_mut() {
            for s in &r.trace {
                serde_json::to_writer(&mut *tw, &serde_json::json!({"timestep": t, "stage": s}))?;
                tw.write_all(b"\n")?;
            }
        }
        if pipe.cfg.write_images {
            for v in &r.views {
                outputs.extend(write_view(&images, t as u64, v)?);
            }
        }
        if pipe.cfg.write_gaussians {
            let name = format!("gaussians/t{t:03}.ply");
            write_ply(BufWriter::new(File::create(out.join(&name))?), &r.completed)?;
            outputs.push(name);
        }
        results.push(r);
    }
    metrics.flush()?;
    frames.flush()?;
    if let Some(mut tw) = trace {
        tw.flush()?;
    }
    write_checkpoint(pipe.memory(), out, "memory")?;
    let manifest = Manifest {
        tool: "unisplat",
        version: env!("CARGO_PKG_VERSION"),
        config_hash,
        scene_hash,
        seeds: pipe.cfg.seeds.clone(),
        scene_seed: scene.seed,
        frames: n,
        config: pipe.cfg.clone(),
        outputs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunSummary {
        results,
        manifest,
        memory: pipe.memory().clone(),
    })
}

/// Loads config and scene from disk, applies CLI overrides and runs.
pub fn run(config: &Path, scene: &Path, out: &Path, ov: &Overrides) -> Result<RunSummary> {
    let mut cfg = PipelineConfig::load(config)?;
    ov.apply(&mut cfg);
    cfg.validate()?;
    let scene = SyntheticScene::load(scene)?;
    fs::create_dir_all(out)?;
    run_scene(cfg, &scene, out)
}

/// Renders the memory bank, plus an optional set expressed in the bank's
/// last ego frame, through `cam` mounted on an ego frame offset from the
/// last one by `ego_offset`.
pub fn render_novel(
    memory: &MemoryBank,
    extra: Option<&GaussianSet>,
    ego_offset: &Pose,
    cam: &CameraModel,
    bg: Vector3<f64>,
    opts: &RenderOptions,
) -> RenderedFrame {
    let world_from_novel = memory.world_from_ego_last.compose(ego_offset);
    let mut set = complete(extra.unwrap_or(&GaussianSet::default()), memory, &world_from_novel);
    if extra.is_some() {
        let novel_from_last = ego_offset.invert();
        let n = extra.map_or(0, GaussianSet::len);
        for g in &mut set.gaussians[..n] {
            *g = g.transformed(&novel_from_last);
        }
    }
    render_with(&set, cam, bg, opts)
}

/// Squared error and pixel count of `memory` rendered through `cam` on each
/// earlier trajectory pose, restricted to the pixels the moving object has
/// vacated by `last`, against the scene at `last`.
pub fn vacated_region_error(
    memory: &MemoryBank,
    scene: &SyntheticScene,
    cam: &CameraModel,
    last: u64,
    opts: &RenderOptions,
) -> (f64, usize) {
    let last_from_world = memory.world_from_ego_last.invert();
    let mut sse = 0.0;
    let mut n = 0;
    for pose in &scene.trajectory[..last as usize] {
        let region = vacated_region(scene, cam, pose, last);
        if !region.data.contains(&true) {
            continue;
        }
        let gt = raycast_view(scene, cam, pose, last).image;
        let offset = last_from_world.compose(pose);
        let f = render_novel(memory, None, &offset, cam, scene.sky(), opts);
        for ((p, q), _) in f.color.data.iter().zip(&gt.data).zip(&region.data).filter(|(_, &m)| m) {
            sse += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    (sse, n)
}

/// Metrics for every `.ppm` present in both directories, by file name.
/// Frame ids come from a leading `tNNN_` in the name, else 0.
pub fn eval_dirs(pred: &Path, gt: &Path) -> Result<Vec<MetricRecord>> {
    let mut names: Vec<String> = fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm") && gt.join(n).is_file())
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let stem = n.trim_end_matches(".ppm");
            let frame = stem
                .strip_prefix('t')
                .and_then(|r| r.split('_').next())
                .and_then(|d| d.parse().ok())
                .unwrap_or(0);
            let view = stem.split_once('_').map_or(stem, |(_, v)| v);
            MetricRecord::evaluate(frame, view, &read_ppm(&pred.join(n))?, &read_ppm(&gt.join(n))?)
        })
        .collect()
}
