//! Per-camera metric scale recovery.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::losses::loss_scale;
use crate::nn::{sigmoid, softplus, Momentum, TinyNet};
use crate::scaffold::PointMapFrame;

pub const GAMMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_INLIER_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    pub gamma: Vec<f64>,
}

impl ScaleVector {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if let Some(g) = gamma.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::InvalidConfig(format!("scale factor {g} is not positive and finite")));
        }
        Ok(Self { gamma })
    }

    pub fn ones(n: usize) -> Self {
        Self { gamma: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// `(predicted, reference)` point pairs per camera, both in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReference {
    pub pairs: Vec<Vec<(Vector3<f64>, Vector3<f64>)>>,
}

fn ls_over<'a>(
    camera: usize,
    pairs: impl Iterator<Item = &'a (Vector3<f64>, Vector3<f64>)>,
) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, q) in pairs {
        num += p.dot(q);
        den += p.dot(p);
    }
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return Err(Error::DegenerateReference { camera });
    }
    Ok((num / den).max(GAMMA_FLOOR))
}

/// Closed-form minimizer of `Σ‖γp − q‖²` per camera.
pub fn optimal_scale_ls(r: &ScaleReference) -> Result<ScaleVector> {
    let gamma = r
        .pairs
        .iter()
        .enumerate()
        .map(|(k, pairs)| ls_over(k, pairs.iter()))
        .collect::<Result<_>>()?;
    Ok(ScaleVector { gamma })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Least squares over the `inlier_fraction` of pairs whose norm ratio
/// `‖q‖/‖p‖` is closest to the median ratio. Ties keep input order.
pub fn optimal_scale_robust(r: &ScaleReference, inlier_fraction: f64) -> Result<ScaleVector> {
    if !(inlier_fraction > 0.0 && inlier_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "inlier fraction {inlier_fraction} outside (0, 1]"
        )));
    }
    let mut gamma = Vec::with_capacity(r.pairs.len());
    for (k, pairs) in r.pairs.iter().enumerate() {
        let ratios: Vec<f64> = pairs
            .iter()
            .map(|(p, q)| {
                let n = p.norm();
                if n > 0.0 {
                    q.norm() / n
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let mut finite: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::DegenerateReference { camera: k });
        }
        finite.sort_by(f64::total_cmp);
        let med = median(&finite);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| (ratios[a] - med).abs().total_cmp(&(ratios[b] - med).abs()).then(a.cmp(&b)));
        let keep_n = ((inlier_fraction * pairs.len() as f64).ceil() as usize).clamp(1, pairs.len());
        let mut keep = vec![false; pairs.len()];
        for &i in &order[..keep_n] {
            keep[i] = true;
        }
        gamma.push(ls_over(k, pairs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p))?);
    }
    Ok(ScaleVector { gamma })
}

pub fn apply_scale(points: &PointMapFrame, gamma: &ScaleVector) -> Result<PointMapFrame> {
    if gamma.len() != points.cameras.len() {
        return Err(Error::LengthMismatch {
            expected: points.cameras.len(),
            got: gamma.len(),
        });
    }
    let mut out = points.clone();
    for (cam, g) in out.cameras.iter_mut().zip(&gamma.gamma) {
        cam.points.data.iter_mut().for_each(|p| *p *= *g);
    }
    Ok(out)
}

/// `softplus(net(pooled))`, one factor per output.
pub fn predict_scale(pooled: &[f64], net: &TinyNet) -> Result<ScaleVector> {
    let raw = net.forward(pooled)?;
    Ok(ScaleVector {
        gamma: raw.into_iter().map(softplus).collect(),
    })
}

/// Mean smooth-L1 of the predicted factors against targets and its gradient
/// with respect to the flat network parameters.
pub fn scale_loss_and_grad(net: &TinyNet, pooled: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let trace = net.forward_trace(pooled)?;
    let raw = trace.output().to_vec();
    let pred = ScaleVector {
        gamma: raw.iter().map(|&r| softplus(r)).collect(),
    };
    let (loss, g_pred) = loss_scale(&pred, &ScaleVector { gamma: target.to_vec() })?;
    let g_raw: Vec<f64> = g_pred.iter().zip(&raw).map(|(g, &r)| g * sigmoid(r)).collect();
    let (gp, _) = net.backward(&trace, &g_raw);
    Ok((loss, gp))
}

/// Full-batch momentum descent on the scale head. Returns the loss before each step.
pub fn train_scale_predictor(
    net: &mut TinyNet,
    samples: &[(Vec<f64>, Vec<f64>)],
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<Vec<f64>> {
    let mut opt = Momentum::new(lr, momentum, net.num_params());
    let mut history = Vec::with_capacity(steps);
    let mut params = net.params();
    for _ in 0..steps {
        let mut total = 0.0;
        let mut grad = vec![0.0; params.len()];
        for (x, y) in samples {
            let (l, g) = scale_loss_and_grad(net, x, y)?;
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = samples.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        history.push(total / n);
        opt.step(&mut params, &grad);
        net.set_params(&params)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Grid2;
    use crate::nn::Dense;
    use crate::scaffold::CameraPoints;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn refs(gammas: &[f64], n: usize, seed: u64) -> ScaleReference {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScaleReference {
            pairs: gammas
                .iter()
                .map(|&g| {
                    (0..n)
                        .map(|_| {
                            let p = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..5.0));
                            (p, p * g)
                        })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn exact_scales_are_recovered() {
        let r = refs(&[2.0, 1.0], 50, 1);
        let g = optimal_scale_ls(&r).unwrap();
        assert!((g.gamma[0] - 2.0).abs() < 1e-14 && (g.gamma[1] - 1.0).abs() < 1e-14);
        assert_eq!(optimal_scale_robust(&r, 0.7).unwrap().gamma.len(), 2);
        let one = refs(&[5.0], 1, 2);
        assert!((optimal_scale_robust(&one, 0.7).unwrap().gamma[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn full_fraction_robust_is_ls() {
        let mut r = refs(&[3.0], 40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, q) in &mut r.pairs[0] {
            *q += Vector3::new(rng.random(), rng.random(), rng.random()) * 0.1;
        }
        assert_eq!(optimal_scale_robust(&r, 1.0).unwrap(), optimal_scale_ls(&r).unwrap());
    }

    #[test]
    fn degenerate_and_bad_fraction_error() {
        let r = ScaleReference {
            pairs: vec![vec![(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0))]],
        };
        assert!(matches!(optimal_scale_ls(&r), Err(Error::DegenerateReference { camera: 0 })));
        assert!(optimal_scale_robust(&refs(&[1.0], 3, 0), 0.0).is_err());
    }

    #[test]
    fn apply_is_multiplicative() {
        let f = PointMapFrame::new(
            2,
            1,
            (0..2)
                .map(|c| CameraPoints {
                    camera_index: c,
                    points: Grid2::from_fn(2, 1, |x, _| Vector3::new(x as f64 + 0.3, 1.7, -2.9)),
                    valid: Grid2::filled(2, 1, true),
                })
                .collect(),
        )
        .unwrap();
        let a = ScaleVector::new(vec![2.0, 0.5]).unwrap();
        let b = ScaleVector::new(vec![4.0, 8.0]).unwrap();
        let ab = ScaleVector::new(vec![8.0, 4.0]).unwrap();
        let twice = apply_scale(&apply_scale(&f, &a).unwrap(), &b).unwrap();
        assert_eq!(twice, apply_scale(&f, &ab).unwrap());
        assert!(apply_scale(&f, &ScaleVector::ones(3)).is_err());
    }

    #[test]
    fn zero_predictor_gives_ln2() {
        let net = TinyNet::zeros(&[4, 3]);
        let g = predict_scale(&[1.0, 2.0, 3.0, 4.0], &net).unwrap();
        assert_eq!(g.gamma, vec![2f64.ln(); 3]);
        assert!(predict_scale(&[1.0], &net).is_err());
    }

    #[test]
    fn one_layer_predictor_by_hand() {
        let l = Dense {
            inputs: 2,
            outputs: 1,
            weight: vec![0.5, -1.0],
            bias: vec![0.25],
        };
        let net = TinyNet::new(vec![l]).unwrap();
        let g = predict_scale(&[2.0, 0.5], &net).unwrap();
        assert!((g.gamma[0] - (0.75f64.exp()).ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = TinyNet::random(&[3, 5, 2], 7, 1.0);
        let x = [0.2, -0.4, 0.9];
        let y = [1.5, 0.3];
        let (_, g) = scale_loss_and_grad(&net, &x, &y).unwrap();
        let p0 = net.params();
        let h = 1e-5;
        for i in 0..p0.len() {
            let eval = |d: f64| {
                let mut n = net.clone();
                let mut p = p0.clone();
                p[i] += d;
                n.set_params(&p).unwrap();
                scale_loss_and_grad(&n, &x, &y).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6f64.max(1e-3 * fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }
}
