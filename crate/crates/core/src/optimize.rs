//! Gradient descent on Gaussian colors and opacities against posed images.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::geom::CameraModel;
use crate::image::RgbImage;
use crate::losses::loss_mse;
use crate::nn::{logit, sigmoid, Momentum};
use crate::render::{render_backward, render_with, RenderOptions};

const LOGIT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppearanceConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tile_size: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 10000.0,
            momentum: 0.9,
            tile_size: crate::render::DEFAULT_TILE,
        }
    }
}

pub struct PosedImage<'a> {
    pub camera: &'a CameraModel,
    pub image: &'a RgbImage,
}

/// Mean over views of the per-view MSE.
pub fn appearance_loss(set: &GaussianSet, views: &[PosedImage<'_>], bg: Vector3<f64>, tile: usize) -> Result<f64> {
    let opts = RenderOptions { tile_size: tile };
    let mut total = 0.0;
    for v in views {
        let f = render_with(set, v.camera, bg, &opts);
        total += loss_mse(&f.color, v.image, None)?.0;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Optimizes `logit(color)` and `logit(opacity)` of every primitive with
/// momentum descent on [`appearance_loss`]. Returns the optimized set and
/// the loss before each step followed by the final loss.
pub fn optimize_appearance(
    set: &GaussianSet,
    views: &[PosedImage<'_>],
    bg: Vector3<f64>,
    cfg: &AppearanceConfig,
) -> Result<(GaussianSet, Vec<f64>)> {
    if views.is_empty() {
        return Err(Error::InvalidConfig("appearance optimization needs at least one view".into()));
    }
    let n = set.len();
    let clampl = |v: f64| logit(v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS));
    let mut params: Vec<f64> = Vec::with_capacity(4 * n);
    for g in &set.gaussians {
        params.extend([clampl(g.color.x), clampl(g.color.y), clampl(g.color.z), clampl(g.opacity)]);
    }
    let mut opt = Momentum::new(cfg.lr, cfg.momentum, params.len());
    let mut cur = set.clone();
    let opts = RenderOptions {
        tile_size: cfg.tile_size,
    };
    let nv = views.len() as f64;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for v in views {
            let f = render_with(&cur, v.camera, bg, &opts);
            let (l, mut g_img) = loss_mse(&f.color, v.image, None)?;
            loss += l / nv;
            if step == cfg.steps {
                continue;
            }
            g_img.data.iter_mut().flatten().for_each(|x| *x /= nv);
            let zero_dyn = crate::image::Grid2::filled(f.color.width, f.color.height, 0.0);
            let rg = render_backward(&cur, v.camera, bg, &g_img, &zero_dyn, &opts);
            for i in 0..n {
                let gi = &cur.gaussians[i];
                for c in 0..3 {
                    grad[4 * i + c] += rg.color[i][c] * gi.color[c] * (1.0 - gi.color[c]);
                }
                grad[4 * i + 3] += rg.opacity[i] * gi.opacity * (1.0 - gi.opacity);
            }
        }
        history.push(loss);
        if step == cfg.steps {
            break;
        }
        opt.step(&mut params, &grad);
        for (i, g) in cur.gaussians.iter_mut().enumerate() {
            g.color = Vector3::new(sigmoid(params[4 * i]), sigmoid(params[4 * i + 1]), sigmoid(params[4 * i + 2]));
            g.opacity = sigmoid(params[4 * i + 3]);
        }
    }
    Ok((cur, history))
}
