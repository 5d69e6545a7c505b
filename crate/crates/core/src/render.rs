//! Tile-based software splatting with an analytic backward pass.
//!
//! A primitive touches a pixel only when the pixel center lies inside its
//! 99% ellipse, i.e. the squared Mahalanobis distance is at most
//! [`CUTOFF_Q`]. Inside the EWA Jacobian, `x/z` and `y/z` are clamped to
//! [`JACOBIAN_CLAMP`] times the image half-extent. Pixels walk the
//! depth-sorted list front to back and stop once transmittance drops below
//! [`T_MIN`]; the primitive that crossed the threshold still contributes.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::geom::{CameraModel, NEAR_PLANE};
use crate::image::{Grid2, Plane, RgbImage};

pub const BLUR_FLOOR: f64 = 0.3;
pub const T_MIN: f64 = 1e-4;
/// Chi-square 2-dof quantile at 0.99, `-2 ln 0.01`.
pub const CUTOFF_Q: f64 = 9.210340371976184;
pub const DEFAULT_TILE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub dynamic: f64,
    /// Inclusive pixel ranges that can receive a contribution.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
}

/// Bound on `|x/z|` and `|y/z|` used inside the EWA Jacobian, 1.3 times the
/// half-image extent in normalized coordinates.
pub const JACOBIAN_CLAMP: f64 = 1.3;

/// `(x/z, y/z)` clamped to the Jacobian bounds, with flags set where the
/// clamp is active.
fn clamped_ratios(cam: &CameraModel, pc: &Vector3<f64>) -> ([f64; 2], [bool; 2]) {
    let lx = JACOBIAN_CLAMP * cam.cx.max(cam.width as f64 - cam.cx) / cam.fx;
    let ly = JACOBIAN_CLAMP * cam.cy.max(cam.height as f64 - cam.cy) / cam.fy;
    let (rx, ry) = (pc.x / pc.z, pc.y / pc.z);
    ([rx.clamp(-lx, lx), ry.clamp(-ly, ly)], [rx.abs() > lx, ry.abs() > ly])
}

fn jacobian(cam: &CameraModel, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = pc.z;
    let ([rx, ry], _) = clamped_ratios(cam, pc);
    Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * rx / z, 0.0, cam.fy / z, -cam.fy * ry / z)
}

fn pixel_span(center: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
    // pixel x is touched when x + 0.5 lies inside [center - r, center + r]
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// EWA projection. Absent when the mean is within the near plane or the
/// 99% ellipse covers no pixel center.
pub fn project_gaussian(g: &GaussianPrimitive, index: usize, cam: &CameraModel) -> Option<ProjectedGaussian> {
    let pc = cam.cam_from_ego.apply(&g.mean);
    if pc.z <= NEAR_PLANE || !pc.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
    let j = jacobian(cam, &pc);
    let w = cam.cam_from_ego.rotation();
    let m = w * g.covariance() * w.transpose();
    let mut cov2d = j * m * j.transpose();
    cov2d = 0.5 * (cov2d + cov2d.transpose()) + Matrix2::identity() * BLUR_FLOOR;
    let conic = cov2d.try_inverse()?;
    let pad = |v: f64| (CUTOFF_Q * v).sqrt() * (1.0 + 1e-9) + 1e-9;
    let x_range = pixel_span(mean2d.x, pad(cov2d[(0, 0)]), cam.width)?;
    let y_range = pixel_span(mean2d.y, pad(cov2d[(1, 1)]), cam.height)?;
    Some(ProjectedGaussian {
        index,
        mean2d,
        cov2d,
        conic,
        depth: pc.z,
        opacity: g.opacity,
        color: g.color,
        dynamic: g.dynamic_score,
        x_range,
        y_range,
    })
}

impl ProjectedGaussian {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.x_range.0 && x <= self.x_range.1 && y >= self.y_range.0 && y <= self.y_range.1
    }

    /// `(Δ, q)` at a pixel center.
    fn offset(&self, x: usize, y: usize) -> (Vector2<f64>, f64) {
        let d = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - self.mean2d;
        let q = d.dot(&(self.conic * d));
        (d, q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub color: RgbImage,
    pub alpha: Plane,
    /// Expected camera-frame depth of the composited surface, 0 where alpha is 0.
    pub depth: Plane,
    pub dynamic: Plane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE,
        }
    }
}

/// Projected primitives in compositing order plus per-tile index lists.
struct Raster {
    proj: Vec<ProjectedGaussian>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tile: usize,
}

fn rasterize(gs: &GaussianSet, cam: &CameraModel, opts: &RenderOptions) -> Raster {
    let tile = opts.tile_size.max(1);
    let mut proj: Vec<ProjectedGaussian> = gs
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam))
        .collect();
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in proj.iter().enumerate() {
        for ty in p.y_range.0 / tile..=p.y_range.1 / tile {
            for tx in p.x_range.0 / tile..=p.x_range.1 / tile {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Raster {
        proj,
        tiles,
        tiles_x,
        tile,
    }
}

impl Raster {
    fn tile_pixels(&self, t: usize, cam: &CameraModel) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        let x1 = (x0 + self.tile).min(cam.width);
        let y1 = (y0 + self.tile).min(cam.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

struct PixelOut {
    color: Vector3<f64>,
    alpha: f64,
    depth: f64,
    dynamic: f64,
}

fn shade_pixel(r: &Raster, list: &[u32], x: usize, y: usize, bg: &Vector3<f64>) -> PixelOut {
    let mut t = 1.0;
    let mut c = Vector3::zeros();
    let (mut acc, mut dep, mut dy) = (0.0, 0.0, 0.0);
    for &k in list {
        let p = &r.proj[k as usize];
        if !p.covers(x, y) {
            continue;
        }
        let (_, q) = p.offset(x, y);
        if q > CUTOFF_Q {
            continue;
        }
        let a = p.opacity * (-0.5 * q).exp();
        let w = a * t;
        c += p.color * w;
        acc += w;
        dep += p.depth * w;
        dy += p.dynamic * w;
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    PixelOut {
        color: c + bg * t,
        alpha: acc,
        depth: if acc > 0.0 { dep / acc } else { 0.0 },
        dynamic: dy,
    }
}

pub fn render(gs: &GaussianSet, cam: &CameraModel, background: Vector3<f64>) -> RenderedFrame {
    render_with(gs, cam, background, &RenderOptions::default())
}

pub fn render_with(
    gs: &GaussianSet,
    cam: &CameraModel,
    background: Vector3<f64>,
    opts: &RenderOptions,
) -> RenderedFrame {
    let r = rasterize(gs, cam, opts);
    let (w, h) = (cam.width, cam.height);
    let per_tile: Vec<Vec<(usize, PixelOut)>> = (0..r.tiles.len())
        .into_par_iter()
        .map(|t| {
            r.tile_pixels(t, cam)
                .map(|(x, y)| (y * w + x, shade_pixel(&r, &r.tiles[t], x, y, &background)))
                .collect()
        })
        .collect();
    let mut out = RenderedFrame {
        color: Grid2::filled(w, h, [0.0; 3]),
        alpha: Grid2::filled(w, h, 0.0),
        depth: Grid2::filled(w, h, 0.0),
        dynamic: Grid2::filled(w, h, 0.0),
    };
    for (i, px) in per_tile.into_iter().flatten() {
        out.color.data[i] = [px.color.x, px.color.y, px.color.z];
        out.alpha.data[i] = px.alpha;
        out.depth.data[i] = px.depth;
        out.dynamic.data[i] = px.dynamic;
    }
    out
}

/// Per-primitive gradients, indexed like the input set. Shape parameters are
/// not differentiated and stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub mean: Vec<Vector3<f64>>,
    pub dynamic: Vec<f64>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
}

impl RenderGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            mean: vec![Vector3::zeros(); n],
            dynamic: vec![0.0; n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Element-wise sum, used to gather gradients across views.
    pub fn accumulate(&mut self, other: &RenderGrads) {
        for i in 0..self.len() {
            self.color[i] += other.color[i];
            self.opacity[i] += other.opacity[i];
            self.mean[i] += other.mean[i];
            self.dynamic[i] += other.dynamic[i];
        }
    }
}

/// Screen-space partials of one projected primitive.
#[derive(Clone, Default)]
struct Partial {
    color: Vector3<f64>,
    opacity: f64,
    dynamic: f64,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
}

struct Contribution {
    slot: usize,
    a: f64,
    g: f64,
    t: f64,
    d: Vector2<f64>,
}

/// Gradients of `Σ grad_color·C + Σ grad_dyn·D` for the frame produced by
/// [`render_with`] with the same arguments.
pub fn render_backward(
    gs: &GaussianSet,
    cam: &CameraModel,
    background: Vector3<f64>,
    grad_color: &RgbImage,
    grad_dyn: &Plane,
    opts: &RenderOptions,
) -> RenderGrads {
    let r = rasterize(gs, cam, opts);
    let w = cam.width;
    let per_tile: Vec<Vec<Partial>> = (0..r.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &r.tiles[t];
            let mut acc = vec![Partial::default(); list.len()];
            let mut contrib: Vec<Contribution> = Vec::new();
            for (x, y) in r.tile_pixels(t, cam) {
                let gc = Vector3::from(grad_color.data[y * w + x]);
                let gd = grad_dyn.data[y * w + x];
                if gc == Vector3::zeros() && gd == 0.0 {
                    continue;
                }
                contrib.clear();
                let mut tr = 1.0;
                for (slot, &k) in list.iter().enumerate() {
                    let p = &r.proj[k as usize];
                    if !p.covers(x, y) {
                        continue;
                    }
                    let (d, q) = p.offset(x, y);
                    if q > CUTOFF_Q {
                        continue;
                    }
                    let g = (-0.5 * q).exp();
                    let a = p.opacity * g;
                    contrib.push(Contribution { slot, a, g, t: tr, d });
                    tr *= 1.0 - a;
                    if tr < T_MIN {
                        break;
                    }
                }
                let mut b_c = background;
                let mut b_d = 0.0;
                for c in contrib.iter().rev() {
                    let p = &r.proj[list[c.slot] as usize];
                    let wgt = c.a * c.t;
                    let pa = &mut acc[c.slot];
                    pa.color += gc * wgt;
                    pa.dynamic += gd * wgt;
                    let g_a = c.t * (gc.dot(&(p.color - b_c)) + gd * (p.dynamic - b_d));
                    pa.opacity += g_a * c.g;
                    let g_q = -0.5 * g_a * p.opacity * c.g;
                    pa.mean2d += -2.0 * g_q * (p.conic * c.d);
                    pa.conic += g_q * c.d * c.d.transpose();
                    b_c = p.color * c.a + b_c * (1.0 - c.a);
                    b_d = p.dynamic * c.a + b_d * (1.0 - c.a);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![Partial::default(); r.proj.len()];
    for (t, partials) in per_tile.into_iter().enumerate() {
        for (slot, pa) in partials.into_iter().enumerate() {
            let s = &mut screen[r.tiles[t][slot] as usize];
            s.color += pa.color;
            s.opacity += pa.opacity;
            s.dynamic += pa.dynamic;
            s.mean2d += pa.mean2d;
            s.conic += pa.conic;
        }
    }

    let mut out = RenderGrads::zeros(gs.len());
    let rot = cam.cam_from_ego.rotation();
    for (p, s) in r.proj.iter().zip(&screen) {
        let g = &gs.gaussians[p.index];
        out.color[p.index] = s.color;
        out.opacity[p.index] = s.opacity;
        out.dynamic[p.index] = s.dynamic;
        out.mean[p.index] = mean_grad(g, cam, rot, &p.conic, s);
    }
    out
}

/// Chains screen-space partials through `mean2d(pc)` and `cov2d(J(pc))`.
fn mean_grad(
    g: &GaussianPrimitive,
    cam: &CameraModel,
    rot: &Matrix3<f64>,
    conic: &Matrix2<f64>,
    s: &Partial,
) -> Vector3<f64> {
    let pc = cam.cam_from_ego.apply(&g.mean);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let mut gp = Vector3::new(
        s.mean2d.x * fx / z,
        s.mean2d.y * fy / z,
        -s.mean2d.x * fx * x / z2 - s.mean2d.y * fy * y / z2,
    );
    let g_cov = -conic * s.conic * conic;
    let m = rot * g.covariance() * rot.transpose();
    let j = jacobian(cam, &pc);
    let g_j = (g_cov + g_cov.transpose()) * j * m;
    let ([rx, ry], [kx, ky]) = clamped_ratios(cam, &pc);
    // J02 = -fx rx / z: rx = x/z when free, constant when clamped
    let (dx02, dz02) = if kx { (0.0, fx * rx / z2) } else { (-fx / z2, 2.0 * fx * rx / z2) };
    let (dy12, dz12) = if ky { (0.0, fy * ry / z2) } else { (-fy / z2, 2.0 * fy * ry / z2) };
    gp.x += g_j[(0, 2)] * dx02;
    gp.y += g_j[(1, 2)] * dy12;
    gp.z += g_j[(0, 0)] * (-fx / z2) + g_j[(0, 2)] * dz02 + g_j[(1, 1)] * (-fy / z2) + g_j[(1, 2)] * dz12;
    rot.transpose() * gp
}
