//! Finite-difference audits of the renderer and loss gradients.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gaussian::{GaussianPrimitive, GaussianSet, Origin, Source};
use crate::geom::{CameraModel, Pose};
use crate::image::{Grid2, Mask, Plane, RgbImage};
use crate::losses::{loss_dyn, loss_mse, loss_scale};
use crate::render::{render_backward, render_with, RenderOptions};
use crate::scale::ScaleVector;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// Error of an analytic value against a finite difference, 0 when within the
/// absolute floor.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let d = (analytic - fd).abs();
    if d <= ABS_FLOOR {
        0.0
    } else {
        d / analytic.abs().max(fd.abs())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub kind: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CaseResult {
    fn new(kind: &'static str, seed: u64, errs: &[f64]) -> Self {
        let max = errs.iter().copied().fold(0.0, f64::max);
        Self {
            kind,
            seed,
            checked: errs.len(),
            max_rel_err: max,
            passed: max <= REL_TOL,
        }
    }
}

/// A small render problem in which every primitive covers the whole image
/// with a smooth footprint and depths are well separated, so the composited
/// output is differentiable around the sampled parameters.
pub struct RenderCase {
    pub set: GaussianSet,
    pub cam: CameraModel,
    pub background: Vector3<f64>,
    pub grad_color: RgbImage,
    pub grad_dyn: Plane,
}

pub fn render_case(seed: u64, max_gaussians: usize) -> RenderCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 8);
    let f = 8.0;
    let cam = CameraModel::new(f, f, 4.0, 4.0, w, h, Pose::identity()).expect("fixed camera");
    let n = rng.random_range(1..=max_gaussians.max(1));
    let mut gs = Vec::with_capacity(n);
    for i in 0..n {
        let z = 3.0 + 0.8 * i as f64 + rng.random_range(0.0..0.3);
        let u = rng.random_range(1.0..7.0);
        let v = rng.random_range(1.0..7.0);
        // footprint std-dev of at least 4.5 px keeps the 99% ellipse outside the image
        let s_min = 4.5 * z / f;
        gs.push(GaussianPrimitive {
            mean: Vector3::new((u - 4.0) * z / f, (v - 4.0) * z / f, z),
            opacity: rng.random_range(0.1..0.5),
            scale: Vector3::new(
                rng.random_range(s_min..2.0 * s_min),
                rng.random_range(s_min..2.0 * s_min),
                rng.random_range(s_min..2.0 * s_min),
            ),
            rotation: UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            ),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            dynamic_score: rng.random(),
            source: Source::Point,
            origin: Origin::Unknown,
        });
    }
    // shuffle so the sort is exercised
    for i in (1..gs.len()).rev() {
        let j = rng.random_range(0..=i);
        gs.swap(i, j);
    }
    let grad_color = Grid2::from_fn(w, h, |_, _| {
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    });
    let grad_dyn = Grid2::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
    RenderCase {
        set: GaussianSet::new(gs, 0),
        cam,
        background: Vector3::new(rng.random(), rng.random(), rng.random()),
        grad_color,
        grad_dyn,
    }
}

impl RenderCase {
    /// The scalar whose gradient [`render_backward`] returns.
    pub fn objective(&self, set: &GaussianSet) -> f64 {
        let f = render_with(set, &self.cam, self.background, &RenderOptions::default());
        let mut l = 0.0;
        for i in 0..f.color.len() {
            for c in 0..3 {
                l += self.grad_color.data[i][c] * f.color.data[i][c];
            }
            l += self.grad_dyn.data[i] * f.dynamic.data[i];
        }
        l
    }
}

type Accessor = fn(&mut GaussianPrimitive) -> &mut f64;

const PARAMS: [(&str, Accessor); 8] = [
    ("color.r", |g| &mut g.color.x),
    ("color.g", |g| &mut g.color.y),
    ("color.b", |g| &mut g.color.z),
    ("opacity", |g| &mut g.opacity),
    ("mean.x", |g| &mut g.mean.x),
    ("mean.y", |g| &mut g.mean.y),
    ("mean.z", |g| &mut g.mean.z),
    ("dyn", |g| &mut g.dynamic_score),
];

pub fn check_render_case(seed: u64) -> CaseResult {
    let case = render_case(seed, 10);
    let grads = render_backward(
        &case.set,
        &case.cam,
        case.background,
        &case.grad_color,
        &case.grad_dyn,
        &RenderOptions::default(),
    );
    let mut errs = Vec::new();
    for i in 0..case.set.len() {
        let analytic = [
            grads.color[i].x,
            grads.color[i].y,
            grads.color[i].z,
            grads.opacity[i],
            grads.mean[i].x,
            grads.mean[i].y,
            grads.mean[i].z,
            grads.dynamic[i],
        ];
        for (k, (_, acc)) in PARAMS.iter().enumerate() {
            let eval = |d: f64| {
                let mut s = case.set.clone();
                *acc(&mut s.gaussians[i]) += d;
                case.objective(&s)
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            errs.push(rel_err(analytic[k], fd));
        }
    }
    CaseResult::new("render", seed, &errs)
}

fn rand_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    Grid2::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn check_mse_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (6, 5);
    let a = rand_image(&mut rng, w, h);
    let b = rand_image(&mut rng, w, h);
    let mask: Mask = Grid2::from_fn(w, h, |x, _| x == 0 || rng.random_bool(0.7));
    let (_, g) = loss_mse(&a, &b, Some(&mask)).expect("mask keeps column 0");
    let mut errs = Vec::new();
    for i in 0..a.len() {
        for c in 0..3 {
            let eval = |d: f64| {
                let mut p = a.clone();
                p.data[i][c] += d;
                loss_mse(&p, &b, Some(&mask)).expect("same mask").0
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            errs.push(rel_err(g.data[i][c], fd));
        }
    }
    CaseResult::new("loss_mse", seed, &errs)
}

pub fn check_dyn_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (6, 5);
    let p: Plane = Grid2::from_fn(w, h, |_, _| rng.random_range(0.02..0.98));
    let m: Mask = Grid2::from_fn(w, h, |_, _| rng.random_bool(0.5));
    let (_, g) = loss_dyn(&p, &m).expect("dims match");
    let mut errs = Vec::new();
    for i in 0..p.len() {
        let eval = |d: f64| {
            let mut q = p.clone();
            q.data[i] += d;
            loss_dyn(&q, &m).expect("dims match").0
        };
        let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        errs.push(rel_err(g.data[i], fd));
    }
    CaseResult::new("loss_dyn", seed, &errs)
}

pub fn check_scale_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..6);
    // keep differences away from the |d| = 1 kink
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
    let target: Vec<f64> = pred
        .iter()
        .map(|p| {
            let mut d: f64 = rng.random_range(-2.5..2.5);
            if (d.abs() - 1.0).abs() < 0.05 {
                d *= 1.2;
            }
            p - d
        })
        .collect();
    let t = ScaleVector { gamma: target };
    let (_, g) = loss_scale(&ScaleVector { gamma: pred.clone() }, &t).expect("equal lengths");
    let mut errs = Vec::new();
    for i in 0..n {
        let eval = |d: f64| {
            let mut p = pred.clone();
            p[i] += d;
            loss_scale(&ScaleVector { gamma: p }, &t).expect("equal lengths").0
        };
        let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        errs.push(rel_err(g[i], fd));
    }
    CaseResult::new("loss_scale", seed, &errs)
}

/// `cases` seeds per check kind, starting at `seed`.
pub fn run_all(cases: usize, seed: u64) -> Vec<CaseResult> {
    let mut out = Vec::with_capacity(cases * 4);
    for s in seed..seed + cases as u64 {
        out.push(check_render_case(s));
    }
    for s in seed..seed + cases as u64 {
        out.push(check_mse_case(s));
        out.push(check_dyn_case(s));
        out.push(check_scale_case(s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_cases_pass() {
        for s in 0..4 {
            let r = check_render_case(s);
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn loss_cases_pass() {
        for s in 0..4 {
            for r in [check_mse_case(s), check_dyn_case(s), check_scale_case(s)] {
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(1e-7, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
