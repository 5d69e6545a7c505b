//! Deterministic procedural street scenes and their sensor oracle.
//!
//! Scenes are described in a world frame that coincides with the ego frame
//! of frame 0: x forward, y left, z up, ground plane at `z = ground.height`.
//! Each frame the oracle ray casts every rig camera and reports the nearest
//! hit per pixel, which stands in for the geometry and semantic foundation
//! models: points are the true hits (optionally divided by a per-camera
//! scale factor), features are positional encodings of the true hit plus its
//! albedo.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraModel, Pose};
use crate::image::{FeatureMap, Grid2, Mask, RgbImage};
use crate::losses::{ViewRole, ViewTarget};
use crate::scaffold::{CameraPoints, FeatureMapSet, PointMapFrame};
use crate::scale::{ScaleReference, ScaleVector};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    pub height: f64,
    pub checker_size: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

/// Axis-aligned box. `stripe_period > 0` darkens every other horizontal band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
    #[serde(default)]
    pub stripe_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Box translating by `velocity` per frame; `min`/`max` are its frame-0 extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub velocity: [f64; 3],
    pub albedo: [f64; 3],
}

impl DynamicBox {
    pub fn at(&self, t: u64) -> BoxObject {
        let v = Vector3::from(self.velocity) * t as f64;
        BoxObject {
            min: (Vector3::from(self.min) + v).into(),
            max: (Vector3::from(self.max) + v).into(),
            albedo: self.albedo,
            stripe_period: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub seed: u64,
    pub rig: Vec<CameraModel>,
    /// `world_from_ego` per frame.
    pub trajectory: Vec<Pose>,
    pub ground: Ground,
    pub boxes: Vec<BoxObject>,
    pub spheres: Vec<Sphere>,
    pub dynamic: Vec<DynamicBox>,
    pub sky: [f64; 3],
    /// Direction towards the light, world frame.
    pub light: [f64; 3],
    pub ambient: f64,
    /// Hits farther than this are treated as sky.
    pub max_range: f64,
    /// Per-camera factor the reported point maps are divided by.
    pub gamma_star: Vec<f64>,
    pub feature_bands: usize,
    pub base_frequency: f64,
}

pub const DESK_HFOV_DEG: f64 = 60.0;
pub const DESK_WIDTH: usize = 96;
pub const DESK_HEIGHT: usize = 64;
pub const DESK_CAMERA_HEIGHT: f64 = 1.6;
pub const DESK_FRAMES: usize = 8;

pub fn desk_rig() -> Vec<CameraModel> {
    [-45.0f64, 0.0, 45.0]
        .iter()
        .map(|yaw| {
            CameraModel::looking_along(
                yaw.to_radians(),
                Vector3::new(0.0, 0.0, DESK_CAMERA_HEIGHT),
                DESK_HFOV_DEG.to_radians(),
                DESK_WIDTH,
                DESK_HEIGHT,
            )
            .expect("fixed rig is valid")
        })
        .collect()
}

/// Camera at the rig mount looking back over the right shoulder.
pub fn held_out_camera() -> CameraModel {
    CameraModel::looking_along(
        (-110f64).to_radians(),
        Vector3::new(0.0, 0.0, DESK_CAMERA_HEIGHT),
        70f64.to_radians(),
        DESK_WIDTH,
        DESK_HEIGHT,
    )
    .expect("fixed camera is valid")
}

impl SyntheticScene {
    /// Street lined with buildings and a few spheres, driven along +x at
    /// 1 m/frame, with one box crossing from the right at 0.5 m/frame.
    pub fn desk(seed: u64) -> Self {
        let mut s = Self::desk_static(seed);
        s.dynamic.push(DynamicBox {
            min: [4.5, -7.0, 0.0],
            max: [6.5, -5.0, 1.5],
            velocity: [0.0, 0.5, 0.0],
            albedo: [0.85, 0.15, 0.1],
        });
        s
    }

    pub fn desk_static(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = Vec::new();
        for side in [-1.0f64, 1.0] {
            let mut x = -12.0;
            while x < 26.0 {
                let len = rng.random_range(3.0..6.0);
                let near = rng.random_range(7.0..9.0);
                let depth = rng.random_range(2.0..4.0);
                let h = rng.random_range(2.5..5.5);
                let (y0, y1) = if side > 0.0 { (near, near + depth) } else { (-near - depth, -near) };
                boxes.push(BoxObject {
                    min: [x, y0, 0.0],
                    max: [x + len, y1, h],
                    albedo: [
                        rng.random_range(0.3..0.9),
                        rng.random_range(0.3..0.9),
                        rng.random_range(0.3..0.9),
                    ],
                    stripe_period: rng.random_range(0.6..1.2),
                });
                x += len + rng.random_range(0.5..2.5);
            }
        }
        let spheres = (0..4)
            .map(|i| {
                let r = rng.random_range(0.4..0.8);
                let y = if i % 2 == 0 { 4.0 } else { -4.0 } + rng.random_range(-0.5..0.5);
                Sphere {
                    center: [2.0 + 5.0 * i as f64 + rng.random_range(0.0..2.0), y, r],
                    radius: r,
                    albedo: [
                        rng.random_range(0.2..0.95),
                        rng.random_range(0.2..0.95),
                        rng.random_range(0.2..0.95),
                    ],
                }
            })
            .collect();
        Self {
            seed,
            rig: desk_rig(),
            trajectory: (0..DESK_FRAMES)
                .map(|t| Pose::from_translation(Vector3::new(t as f64, 0.0, 0.0)))
                .collect(),
            ground: Ground {
                height: 0.0,
                checker_size: 1.0,
                albedo_a: [0.35, 0.35, 0.33],
                albedo_b: [0.55, 0.53, 0.5],
            },
            boxes,
            spheres,
            dynamic: Vec::new(),
            sky: [0.55, 0.7, 0.9],
            light: [0.3, 0.5, 0.8],
            ambient: 0.35,
            max_range: 60.0,
            gamma_star: vec![1.3, 0.8, 1.1],
            feature_bands: 8,
            base_frequency: 0.1,
        }
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn sky(&self) -> Vector3<f64> {
        Vector3::from(self.sky)
    }

    pub fn gamma_star(&self) -> ScaleVector {
        ScaleVector {
            gamma: self.gamma_star.clone(),
        }
    }

    pub fn feature_channels(&self) -> (usize, usize) {
        (6 * self.feature_bands, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.rig.is_empty() {
            return bad("rig has no cameras".into());
        }
        if self.trajectory.is_empty() {
            return bad("trajectory is empty".into());
        }
        if self.gamma_star.len() != self.rig.len() {
            return bad(format!("{} scale factors for {} cameras", self.gamma_star.len(), self.rig.len()));
        }
        ScaleVector::new(self.gamma_star.clone()).map_err(|e| Error::InvalidScene(e.to_string()))?;
        let (w, h) = (self.rig[0].width, self.rig[0].height);
        if self.rig.iter().any(|c| c.width != w || c.height != h) {
            return bad("rig cameras must share one resolution".into());
        }
        if !(self.max_range > 0.0) || !(self.ground.checker_size > 0.0) {
            return bad("max_range and checker_size must be positive".into());
        }
        for b in self.boxes.iter().chain(self.dynamic.iter().map(|d| d.at(0)).collect::<Vec<_>>().iter()) {
            if (0..3).any(|a| !(b.min[a] < b.max[a])) {
                return bad(format!("box with min {:?} max {:?}", b.min, b.max));
            }
        }
        if self.spheres.iter().any(|s| !(s.radius > 0.0)) {
            return bad("sphere radius must be positive".into());
        }
        for (t, pose) in self.trajectory.iter().enumerate() {
            for d in &self.dynamic {
                let b = d.at(t as u64);
                for cam in &self.rig {
                    let c = pose.apply(&cam.center_ego());
                    if (0..3).all(|a| c[a] > b.min[a] - 0.5 && c[a] < b.max[a] + 0.5) {
                        return bad(format!("dynamic box reaches the rig at frame {t}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::InvalidScene(format!("scene file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub albedo: Vector3<f64>,
    pub dynamic: bool,
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, b: &BoxObject) -> Option<(f64, Vector3<f64>)> {
    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - o[a]) / d[a];
        let t2 = (b.max[a] - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > enter {
            enter = lo;
            axis = a;
        }
        exit = exit.min(hi);
    }
    if enter > HIT_EPS && enter <= exit {
        let mut n = Vector3::zeros();
        n[axis] = -d[axis].signum();
        Some((enter, n))
    } else {
        None
    }
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, s: &Sphere) -> Option<f64> {
    let c = Vector3::from(s.center);
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - s.radius * s.radius;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    [-b - r, -b + r].into_iter().find(|&t| t > HIT_EPS)
}

fn stripe(albedo: [f64; 3], period: f64, z: f64) -> Vector3<f64> {
    let a = Vector3::from(albedo);
    if period > 0.0 && (z / period).floor().rem_euclid(2.0) == 1.0 {
        a * 0.75
    } else {
        a
    }
}

impl SyntheticScene {
    /// Nearest hit along a world-frame ray with unit direction `d`.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: u64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |dist: f64, make: &dyn Fn(f64) -> Hit| {
            if dist <= self.max_range && best.as_ref().is_none_or(|b| dist < b.distance) {
                best = Some(make(dist));
            }
        };
        if d.z != 0.0 {
            let dist = (self.ground.height - o.z) / d.z;
            if dist > HIT_EPS {
                consider(dist, &|dist| {
                    let p = o + d * dist;
                    let k = (p.x / self.ground.checker_size).floor() + (p.y / self.ground.checker_size).floor();
                    let albedo = if k.rem_euclid(2.0) == 0.0 { self.ground.albedo_a } else { self.ground.albedo_b };
                    Hit {
                        distance: dist,
                        point: p,
                        normal: Vector3::z(),
                        albedo: Vector3::from(albedo),
                        dynamic: false,
                    }
                });
            }
        }
        for b in &self.boxes {
            if let Some((dist, n)) = ray_box(o, d, b) {
                consider(dist, &|dist| {
                    let p = o + d * dist;
                    Hit {
                        distance: dist,
                        point: p,
                        normal: n,
                        albedo: stripe(b.albedo, b.stripe_period, p.z),
                        dynamic: false,
                    }
                });
            }
        }
        for s in &self.spheres {
            if let Some(dist) = ray_sphere(o, d, s) {
                consider(dist, &|dist| {
                    let p = o + d * dist;
                    Hit {
                        distance: dist,
                        point: p,
                        normal: (p - Vector3::from(s.center)) / s.radius,
                        albedo: Vector3::from(s.albedo),
                        dynamic: false,
                    }
                });
            }
        }
        for db in &self.dynamic {
            let b = db.at(t);
            if let Some((dist, n)) = ray_box(o, d, &b) {
                consider(dist, &|dist| Hit {
                    distance: dist,
                    point: o + d * dist,
                    normal: n,
                    albedo: Vector3::from(b.albedo),
                    dynamic: true,
                });
            }
        }
        best
    }

    pub fn shade(&self, hit: &Hit) -> Vector3<f64> {
        let l = Vector3::from(self.light).normalize();
        let lambert = hit.normal.dot(&l).max(0.0);
        (hit.albedo * (self.ambient + (1.0 - self.ambient) * lambert)).map(|c| c.clamp(0.0, 1.0))
    }

    /// Positional encoding of an ego-frame point: for each band and axis,
    /// `sin(f x), cos(f x)` with `f = base · 2^band`.
    pub fn encode(&self, p: &Vector3<f64>, out: &mut [f64]) {
        let mut i = 0;
        for b in 0..self.feature_bands {
            let f = self.base_frequency * (1u64 << b) as f64;
            for a in 0..3 {
                out[i] = (f * p[a]).sin();
                out[i + 1] = (f * p[a]).cos();
                i += 2;
            }
        }
    }
}

/// Everything one camera observes from one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCast {
    pub image: RgbImage,
    /// True hit points in the ego frame of the given pose.
    pub points: Grid2<Vector3<f64>>,
    pub valid: Mask,
    pub dynamic: Mask,
    pub albedo: RgbImage,
}

/// Ray casts `cam` mounted on an ego at `world_from_ego` at frame `t`.
pub fn raycast_view(scene: &SyntheticScene, cam: &CameraModel, world_from_ego: &Pose, t: u64) -> ViewCast {
    let (w, h) = (cam.width, cam.height);
    let ego_from_world = world_from_ego.invert();
    let origin = world_from_ego.apply(&cam.center_ego());
    let rows: Vec<Vec<Option<Hit>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d_ego = cam.ray_direction_ego(x as f64 + 0.5, y as f64 + 0.5);
                    let d = world_from_ego.rotation() * d_ego;
                    scene.trace(&origin, &d, t)
                })
                .collect()
        })
        .collect();
    let hits: Vec<Option<Hit>> = rows.into_iter().flatten().collect();
    let sky = scene.sky;
    ViewCast {
        image: Grid2 {
            width: w,
            height: h,
            data: hits
                .iter()
                .map(|hit| hit.as_ref().map_or(sky, |hit| scene.shade(hit).into()))
                .collect(),
        },
        points: Grid2 {
            width: w,
            height: h,
            data: hits
                .iter()
                .map(|hit| hit.as_ref().map_or(Vector3::zeros(), |hit| ego_from_world.apply(&hit.point)))
                .collect(),
        },
        valid: Grid2 {
            width: w,
            height: h,
            data: hits.iter().map(Option::is_some).collect(),
        },
        dynamic: Grid2 {
            width: w,
            height: h,
            data: hits.iter().map(|hit| hit.as_ref().is_some_and(|hit| hit.dynamic)).collect(),
        },
        albedo: Grid2 {
            width: w,
            height: h,
            data: hits.iter().map(|hit| hit.as_ref().map_or([0.0; 3], |hit| hit.albedo.into())).collect(),
        },
    }
}

/// One time step of sensor data plus supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub timestep: u64,
    pub cameras: Vec<CameraModel>,
    pub world_from_ego: Pose,
    /// `T_{t-1}^t`, mapping the previous ego frame into this one.
    pub prev_to_cur: Pose,
    pub images: Vec<RgbImage>,
    /// Reported point maps, divided by `gamma_star`.
    pub points: PointMapFrame,
    pub true_points: PointMapFrame,
    pub features: FeatureMapSet,
    pub dynamic_masks: Vec<Mask>,
    pub targets: Vec<ViewTarget>,
    pub gamma_star: ScaleVector,
}

pub fn raycast_frame(scene: &SyntheticScene, t: u64) -> Result<FrameBundle> {
    let ti = t as usize;
    if ti >= scene.frames() {
        return Err(Error::InvalidScene(format!("frame {t} beyond trajectory of {}", scene.frames())));
    }
    let world_from_ego = scene.trajectory[ti];
    let prev_to_cur = if ti == 0 {
        Pose::identity()
    } else {
        world_from_ego.invert().compose(&scene.trajectory[ti - 1])
    };
    let (w, h) = (scene.rig[0].width, scene.rig[0].height);
    let (geo, sem) = scene.feature_channels();
    let casts: Vec<ViewCast> = scene.rig.iter().map(|c| raycast_view(scene, c, &world_from_ego, t)).collect();
    let mut reported = Vec::new();
    let mut truth = Vec::new();
    let mut maps = Vec::new();
    for (k, vc) in casts.iter().enumerate() {
        let g = scene.gamma_star[k];
        truth.push(CameraPoints {
            camera_index: k,
            points: vc.points.clone(),
            valid: vc.valid.clone(),
        });
        reported.push(CameraPoints {
            camera_index: k,
            points: Grid2 {
                width: w,
                height: h,
                data: vc.points.data.iter().map(|p| p / g).collect(),
            },
            valid: vc.valid.clone(),
        });
        let mut fm = FeatureMap::zeros(w, h, geo + sem);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !vc.valid.data[i] {
                    continue;
                }
                let texel = fm.texel_mut(x, y);
                scene.encode(&vc.points.data[i], &mut texel[..geo]);
                texel[geo..].copy_from_slice(&vc.albedo.data[i]);
            }
        }
        maps.push(fm);
    }
    let targets = casts
        .iter()
        .enumerate()
        .map(|(k, vc)| ViewTarget {
            image: vc.image.clone(),
            dynamic_mask: vc.dynamic.clone(),
            background_mask: Grid2 {
                width: w,
                height: h,
                data: vc.dynamic.data.iter().map(|d| !d).collect(),
            },
            role: ViewRole::Input,
            scale_target: Some(scene.gamma_star[k]),
        })
        .collect();
    Ok(FrameBundle {
        timestep: t,
        cameras: scene.rig.clone(),
        world_from_ego,
        prev_to_cur,
        images: casts.iter().map(|c| c.image.clone()).collect(),
        points: PointMapFrame::new(w, h, reported)?,
        true_points: PointMapFrame::new(w, h, truth)?,
        features: FeatureMapSet::new(geo, sem, maps)?,
        dynamic_masks: casts.into_iter().map(|c| c.dynamic).collect(),
        targets,
        gamma_star: scene.gamma_star(),
    })
}

/// Pixels of `cam`, mounted on `world_from_ego`, in which the moving object
/// was visible at some frame before `t` but is not visible at `t`.
pub fn vacated_region(scene: &SyntheticScene, cam: &CameraModel, world_from_ego: &Pose, t: u64) -> Mask {
    let now = raycast_view(scene, cam, world_from_ego, t).dynamic;
    let mut out = Grid2::filled(cam.width, cam.height, false);
    for past in 0..t {
        let m = raycast_view(scene, cam, world_from_ego, past).dynamic;
        for ((o, &p), &n) in out.data.iter_mut().zip(&m.data).zip(&now.data) {
            *o |= p && !n;
        }
    }
    out
}

/// `n_pairs` distinct valid pixels per camera, pairing the reported point
/// with the true one.
pub fn scale_reference(bundle: &FrameBundle, n_pairs: usize, seed: u64) -> Result<ScaleReference> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(bundle.points.cameras.len());
    for (k, (rep, tru)) in bundle.points.cameras.iter().zip(&bundle.true_points.cameras).enumerate() {
        let valid: Vec<usize> = (0..rep.valid.len()).filter(|&i| rep.valid.data[i]).collect();
        if valid.len() < n_pairs {
            return Err(Error::InsufficientValidPixels {
                camera: k,
                available: valid.len(),
                requested: n_pairs,
            });
        }
        let mut picks = sample(&mut rng, valid.len(), n_pairs).into_vec();
        picks.sort_unstable();
        pairs.push(
            picks
                .into_iter()
                .map(|j| (rep.points.data[valid[j]], tru.points.data[valid[j]]))
                .collect(),
        );
    }
    Ok(ScaleReference { pairs })
}
