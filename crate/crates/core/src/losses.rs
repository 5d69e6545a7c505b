//! Training losses and image quality metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid2, Mask, Plane, RgbImage};
use crate::render::RenderedFrame;
use crate::scale::ScaleVector;

pub const BCE_CLAMP: f64 = 1e-6;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub lambda_dyn: f64,
    pub lambda_scale: f64,
    /// Always false; the perceptual term is not implemented.
    pub lpips_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 5.0,
            lambda_lpips: 0.05,
            lambda_dyn: 0.05,
            lambda_scale: 0.1,
            lpips_enabled: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_mse, self.lambda_lpips, self.lambda_dyn, self.lambda_scale];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if self.lpips_enabled {
            return Err(Error::InvalidConfig("lpips is not available".into()));
        }
        Ok(())
    }
}

fn check_dims<A, B>(a: &Grid2<A>, b: &Grid2<B>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean over unmasked pixels and all three channels. Pixels with a false
/// mask entry are excluded.
pub fn loss_mse(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>) -> Result<(f64, RgbImage)> {
    check_dims(pred, gt)?;
    if let Some(m) = mask {
        check_dims(pred, m)?;
    }
    let keep = |i: usize| mask.is_none_or(|m| m.data[i]);
    let n = (0..pred.len()).filter(|&i| keep(i)).count() * 3;
    if n == 0 {
        return Err(Error::AllMasked);
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut grad = Grid2::filled(pred.width, pred.height, [0.0; 3]);
    for i in 0..pred.len() {
        if !keep(i) {
            continue;
        }
        for c in 0..3 {
            let d = pred.data[i][c] - gt.data[i][c];
            sum += d * d;
            grad.data[i][c] = 2.0 * d / nf;
        }
    }
    Ok((sum / nf, grad))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-6, 1 - 1e-6]`.
pub fn loss_dyn(pred: &Plane, gt: &Mask) -> Result<(f64, Plane)> {
    check_dims(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::AllMasked);
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Grid2::filled(pred.width, pred.height, 0.0);
    for (i, (&p, &y)) in pred.data.iter().zip(&gt.data).enumerate() {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let clamped = pc != p;
        if y {
            sum -= pc.ln();
            if !clamped {
                grad.data[i] = -1.0 / (pc * n);
            }
        } else {
            sum -= (1.0 - pc).ln();
            if !clamped {
                grad.data[i] = 1.0 / ((1.0 - pc) * n);
            }
        }
    }
    Ok((sum / n, grad))
}

/// Mean smooth-L1 with transition point 1.
pub fn loss_scale(pred: &ScaleVector, target: &ScaleVector) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .gamma
        .iter()
        .zip(&target.gamma)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < SMOOTH_L1_BETA {
                sum += 0.5 * d * d / SMOOTH_L1_BETA;
                d / (SMOOTH_L1_BETA * n)
            } else {
                sum += d.abs() - 0.5 * SMOOTH_L1_BETA;
                d.signum() / n
            }
        })
        .collect();
    Ok((sum / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    /// Rendered at the time step it was observed.
    Input,
    /// Rendered one step ahead, supervised only on its background mask.
    Novel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTarget {
    pub image: RgbImage,
    pub dynamic_mask: Mask,
    /// True on static pixels.
    pub background_mask: Mask,
    pub role: ViewRole,
    pub scale_target: Option<f64>,
}

impl ViewTarget {
    pub fn check(&self) -> Result<()> {
        check_dims(&self.image, &self.dynamic_mask)?;
        check_dims(&self.image, &self.background_mask)
    }
}

pub struct ViewInput<'a> {
    pub rendered: &'a RenderedFrame,
    pub target: &'a ViewTarget,
    pub scale_pred: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub mse: f64,
    pub dyn_bce: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrad {
    pub color: RgbImage,
    pub dynamic: Plane,
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub terms: Vec<LossTerms>,
    pub grads: Vec<ViewGrad>,
}

/// Weighted sum over views. Input views get MSE, dynamic BCE and, when a
/// prediction and a target are both present, the scale term. Novel views
/// get MSE restricted to their background mask.
pub fn total_loss(views: &[ViewInput<'_>], cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let mut out = TotalLoss {
        value: 0.0,
        terms: Vec::with_capacity(views.len()),
        grads: Vec::with_capacity(views.len()),
    };
    for v in views {
        v.target.check()?;
        let r = v.rendered;
        let mut terms = LossTerms::default();
        let (w, h) = (r.color.width, r.color.height);
        let mut grad = ViewGrad {
            color: Grid2::filled(w, h, [0.0; 3]),
            dynamic: Grid2::filled(w, h, 0.0),
            scale: None,
        };
        match v.target.role {
            ViewRole::Input => {
                let (l, g) = loss_mse(&r.color, &v.target.image, None)?;
                terms.mse = l;
                grad.color = g;
                let (l, g) = loss_dyn(&r.dynamic, &v.target.dynamic_mask)?;
                terms.dyn_bce = l;
                grad.dynamic = g;
                if let (Some(p), Some(t)) = (v.scale_pred, v.target.scale_target) {
                    let (l, g) = loss_scale(&ScaleVector { gamma: vec![p] }, &ScaleVector { gamma: vec![t] })?;
                    terms.scale = l;
                    grad.scale = Some(cfg.lambda_scale * g[0]);
                }
            }
            ViewRole::Novel => {
                let (l, g) = loss_mse(&r.color, &v.target.image, Some(&v.target.background_mask))?;
                terms.mse = l;
                grad.color = g;
            }
        }
        grad.color.data.iter_mut().flatten().for_each(|g| *g *= cfg.lambda_mse);
        grad.dynamic.data.iter_mut().for_each(|g| *g *= cfg.lambda_dyn);
        out.value += cfg.lambda_mse * terms.mse + cfg.lambda_dyn * terms.dyn_bce + cfg.lambda_scale * terms.scale;
        out.terms.push(terms);
        out.grads.push(grad);
    }
    Ok(out)
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    let (mse, _) = loss_mse(pred, gt, None)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-region separable filtering of a `w × h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 window and all channels.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let k = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = pred.data.iter().map(|p| p[c]).collect();
        let b: Vec<f64> = gt.data.iter().map(|p| p[c]).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(&a, w, h, &k);
        let mu_b = filter_valid(&b, w, h, &k);
        let aa = filter_valid(&prod(&a, &a), w, h, &k);
        let bb = filter_valid(&prod(&b, &b), w, h, &k);
        let ab = filter_valid(&prod(&a, &b), w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One line of the metrics report. `psnr_db` is null for identical images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub frame_id: u64,
    pub view_id: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

impl MetricRecord {
    pub fn evaluate(frame_id: u64, view_id: impl Into<String>, pred: &RgbImage, gt: &RgbImage) -> Result<Self> {
        let p = psnr(pred, gt)?;
        Ok(Self {
            frame_id,
            view_id: view_id.into(),
            psnr_db: p.is_finite().then_some(p),
            ssim: ssim(pred, gt)?,
        })
    }
}

pub fn write_metrics_jsonl<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        Grid2::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn mse_analytic_and_masks() {
        let a = Grid2::filled(4, 3, [0.5; 3]);
        let b = Grid2::filled(4, 3, [0.4; 3]);
        let (l, _) = loss_mse(&a, &b, None).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        let (z, g) = loss_mse(&a, &a, None).unwrap();
        assert_eq!(z, 0.0);
        assert!(g.data.iter().flatten().all(|v| *v == 0.0));
        let all = Grid2::filled(4, 3, true);
        assert_eq!(loss_mse(&a, &b, Some(&all)).unwrap(), loss_mse(&a, &b, None).unwrap());
        let none = Grid2::filled(4, 3, false);
        assert!(matches!(loss_mse(&a, &b, Some(&none)), Err(Error::AllMasked)));
        assert!(loss_mse(&a, &Grid2::filled(3, 3, [0.0; 3]), None).is_err());
    }

    #[test]
    fn bce_analytic_and_clamp() {
        let half = Grid2::filled(3, 3, 0.5);
        let m = Grid2::from_fn(3, 3, |x, _| x == 1);
        assert!((loss_dyn(&half, &m).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        let perfect = Grid2::from_fn(3, 3, |x, _| if x == 1 { 1.0 } else { 0.0 });
        assert!(loss_dyn(&perfect, &m).unwrap().0 <= -(1.0 - BCE_CLAMP).ln() + 1e-18);
    }

    #[test]
    fn smooth_l1_branches() {
        let p = ScaleVector { gamma: vec![1.5, 2.0] };
        let t = ScaleVector { gamma: vec![1.0, 2.0] };
        assert!((loss_scale(&p, &t).unwrap().0 - 0.0625).abs() < 1e-15);
        let p = ScaleVector { gamma: vec![4.0] };
        let t = ScaleVector { gamma: vec![1.0] };
        let (l, g) = loss_scale(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g, vec![1.0]);
        assert!(loss_scale(&p, &ScaleVector::ones(2)).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_img(5, 4, &mut rng);
        let b = rand_img(5, 4, &mut rng);
        let mask = Grid2::from_fn(5, 4, |x, y| (x + y) % 3 != 0);
        let (_, g) = loss_mse(&a, &b, Some(&mask)).unwrap();
        let h = 1e-4;
        for i in 0..a.len() {
            for c in 0..3 {
                let mut p = a.clone();
                let mut m = a.clone();
                p.data[i][c] += h;
                m.data[i][c] -= h;
                let fd = (loss_mse(&p, &b, Some(&mask)).unwrap().0 - loss_mse(&m, &b, Some(&mask)).unwrap().0) / (2.0 * h);
                assert!((fd - g.data[i][c]).abs() <= 1e-6f64.max(1e-3 * fd.abs()));
            }
        }
        let d = Grid2::from_fn(5, 4, |_, _| rng.random_range(0.05..0.95));
        let (_, g) = loss_dyn(&d, &mask).unwrap();
        for i in 0..d.len() {
            let mut p = d.clone();
            let mut m = d.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss_dyn(&p, &mask).unwrap().0 - loss_dyn(&m, &mask).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6f64.max(1e-3 * fd.abs()));
        }
    }

    #[test]
    fn psnr_known_values() {
        let a = Grid2::filled(12, 12, [0.0; 3]);
        let b = Grid2::filled(12, 12, [0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&b, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&Grid2::filled(10, 20, [0.0; 3]), &Grid2::filled(10, 20, [0.0; 3])), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_matches_windowed_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_img(17, 14, &mut rng);
        let b = Grid2::from_fn(17, 14, |x, y| {
            let p = a.get(x, y);
            [0.7 * p[0] + 0.1, p[1] * p[1], 1.0 - p[2]]
        });
        let k = ssim_kernel();
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for oy in 0..=14 - 11 {
                for ox in 0..=17 - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let w = k[i] * k[j];
                            let u = a.get(ox + i, oy + j)[c];
                            let v = b.get(ox + i, oy + j)[c];
                            ma += w * u;
                            mb += w * v;
                            saa += w * u * u;
                            sbb += w * v * v;
                            sab += w * u * v;
                        }
                    }
                    let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + 1e-4) * (2.0 * cv + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    n += 1;
                }
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / n as f64).abs() < 1e-6);
    }

    #[test]
    fn metrics_lines_serialize_inf_as_null() {
        let a = Grid2::filled(11, 11, [0.2; 3]);
        let r = MetricRecord::evaluate(3, "cam0", &a, &a).unwrap();
        let mut buf = Vec::new();
        write_metrics_jsonl(&mut buf, &[r]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("\"psnr_db\":null"));
        assert!(s.ends_with('\n'));
    }
}
