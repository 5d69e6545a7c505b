//! Dual-branch Gaussian decoding from the fused scaffold.
//!
//! Each primitive is produced from 15 raw head channels:
//! `[offset(3), opacity(1), scale(3), quaternion wxyz(4), color(3), dynamic(1)]`.
//! Activations map any finite raw value onto a valid primitive:
//! opacity, color and dynamic score through a sigmoid, scale as
//! `S_MIN + softplus(raw) * 0.5 * min(ε)`, quaternion as
//! `normalize(raw + (1, 0, 0, 0))` and offsets through `tanh`.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianPrimitive, GaussianSet, Origin, Source};
use crate::image::RgbImage;
use crate::nn::{logit, sigmoid, softplus, TinyNet};
use crate::scaffold::{FeatureMapSet, PointMapFrame, SparseScaffold};

pub const RAW_CHANNELS: usize = 15;
/// Smallest standard deviation a decoded primitive can have, in meters.
pub const S_MIN: f64 = 1e-3;
const COLOR_EPS: f64 = 1e-4;

/// Branch constants derived from the voxel size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeScales {
    pub voxel_size: Vector3<f64>,
    pub scale_unit: f64,
    /// Per-axis bound on point-branch offsets.
    pub max_offset: f64,
}

impl DecodeScales {
    pub fn new(voxel_size: Vector3<f64>) -> Self {
        Self {
            voxel_size,
            scale_unit: 0.5 * voxel_size.min(),
            max_offset: 0.5 * voxel_size.norm(),
        }
    }
}

fn activate(
    raw: &[f64],
    mean: Vector3<f64>,
    color_bias: Option<[f64; 3]>,
    sc: &DecodeScales,
    source: Source,
    origin: Origin,
) -> GaussianPrimitive {
    let q = Quaternion::new(raw[7] + 1.0, raw[8], raw[9], raw[10]);
    let rotation = if q.norm() > 1e-12 {
        UnitQuaternion::from_quaternion(q)
    } else {
        UnitQuaternion::identity()
    };
    let bias = color_bias.unwrap_or([0.0; 3]);
    GaussianPrimitive {
        mean,
        opacity: sigmoid(raw[3]),
        scale: Vector3::new(raw[4], raw[5], raw[6]).map(|r| S_MIN + softplus(r) * sc.scale_unit),
        rotation,
        color: Vector3::new(
            sigmoid(raw[11] + bias[0]),
            sigmoid(raw[12] + bias[1]),
            sigmoid(raw[13] + bias[2]),
        ),
        dynamic_score: sigmoid(raw[14]),
        source,
        origin,
    }
}

fn check_net(net: &TinyNet, inputs: usize, outputs: usize, branch: &str) -> Result<()> {
    if net.input_width() != inputs || net.output_width() != outputs {
        return Err(Error::ShapeMismatch(format!(
            "{branch} head is {}->{}, expected {inputs}->{outputs}",
            net.input_width(),
            net.output_width()
        )));
    }
    Ok(())
}

/// Point-anchored primitives: one per valid point, decoded from the
/// retrieved scaffold feature concatenated with the source pixel's feature.
pub fn decode_point_branch(
    points: &PointMapFrame,
    scaffold: &SparseScaffold,
    feats: &FeatureMapSet,
    images: &[RgbImage],
    net: &TinyNet,
    frame: u64,
) -> Result<GaussianSet> {
    check_net(net, scaffold.channels + feats.channels(), RAW_CHANNELS, "point")?;
    if feats.maps.len() != points.cameras.len() || images.len() != points.cameras.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} point maps, {} feature maps, {} images",
            points.cameras.len(),
            feats.maps.len(),
            images.len()
        )));
    }
    for img in images {
        if img.width != points.width || img.height != points.height {
            return Err(Error::ShapeMismatch("image and point map sizes differ".into()));
        }
    }
    let sc = DecodeScales::new(*scaffold.grid.voxel_size());
    let work: Vec<(usize, usize, Vector3<f64>)> =
        points.valid_points().map(|(c, p, x)| (c, p, *x)).collect();
    let w = points.width;
    let gaussians = work
        .par_iter()
        .map(|&(ci, pi, anchor)| {
            let mut input = vec![0.0; net.input_width()];
            let (f3d, f2d) = input.split_at_mut(scaffold.channels);
            scaffold.retrieve_into(&anchor, f3d);
            let (px, py) = ((pi % w) as f64 + 0.5, (pi / w) as f64 + 0.5);
            feats.maps[ci].sample_at_image_coords(px, py, w, points.height, f2d);
            let raw = net.forward(&input).expect("width checked");
            let offset = Vector3::new(raw[0], raw[1], raw[2]).map(|r| r.tanh() * sc.max_offset);
            let rgb = images[ci].data[pi];
            let bias = rgb.map(|c| logit(c.clamp(COLOR_EPS, 1.0 - COLOR_EPS)));
            activate(
                &raw,
                anchor + offset,
                Some(bias),
                &sc,
                Source::Point,
                Origin::Pixel {
                    frame,
                    camera: ci as u32,
                    pixel: pi as u32,
                },
            )
        })
        .collect();
    Ok(GaussianSet::new(gaussians, frame))
}

/// `g` primitives per occupied voxel, offset from the voxel center by at
/// most half a voxel per axis.
pub fn decode_voxel_branch(
    scaffold: &SparseScaffold,
    net: &TinyNet,
    g: usize,
    frame: u64,
) -> Result<GaussianSet> {
    check_net(net, scaffold.channels, RAW_CHANNELS * g, "voxel")?;
    let sc = DecodeScales::new(*scaffold.grid.voxel_size());
    let half = sc.voxel_size * 0.5;
    let items: Vec<_> = scaffold.entries.iter().collect();
    let per_voxel: Vec<Vec<GaussianPrimitive>> = items
        .par_iter()
        .map(|(k, e)| {
            let raw = net.forward(&e.feature).expect("width checked");
            raw.chunks_exact(RAW_CHANNELS)
                .map(|r| {
                    let offset = Vector3::new(r[0].tanh(), r[1].tanh(), r[2].tanh()).component_mul(&half);
                    activate(
                        r,
                        e.position + offset,
                        None,
                        &sc,
                        Source::Voxel,
                        Origin::Voxel { frame, key: **k },
                    )
                })
                .collect()
        })
        .collect();
    Ok(GaussianSet::new(per_voxel.into_iter().flatten().collect(), frame))
}

/// Heads and inputs of both branches.
pub struct DecoderNets<'a> {
    pub point: &'a TinyNet,
    pub voxel: &'a TinyNet,
    pub per_voxel: usize,
}

/// `G_t = G_point ∪ G_voxel`, point primitives first.
pub fn decode_frame(
    points: &PointMapFrame,
    scaffold: &SparseScaffold,
    feats: &FeatureMapSet,
    images: &[RgbImage],
    nets: &DecoderNets<'_>,
    frame: u64,
) -> Result<GaussianSet> {
    let mut out = decode_point_branch(points, scaffold, feats, images, nets.point, frame)?;
    let voxel = decode_voxel_branch(scaffold, nets.voxel, nets.per_voxel, frame)?;
    out.gaussians.extend(voxel.gaussians);
    Ok(out)
}
