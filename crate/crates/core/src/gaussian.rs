//! Gaussian primitives and their PLY export.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geom::{Pose, VoxelKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Point,
    Voxel,
    Memory,
}

impl Source {
    pub fn code(self) -> f32 {
        match self {
            Source::Point => 0.0,
            Source::Voxel => 1.0,
            Source::Memory => 2.0,
        }
    }

    pub fn from_code(c: f32) -> Result<Self> {
        match c as i32 {
            0 => Ok(Source::Point),
            1 => Ok(Source::Voxel),
            2 => Ok(Source::Memory),
            _ => Err(Error::Format(format!("unknown source code {c}"))),
        }
    }
}

/// Where a primitive was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Pixel { frame: u64, camera: u32, pixel: u32 },
    Voxel { frame: u64, key: VoxelKey },
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub opacity: f64,
    /// Per-axis standard deviations in meters.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub color: Vector3<f64>,
    pub dynamic_score: f64,
    pub source: Source,
    pub origin: Origin,
}

impl GaussianPrimitive {
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r.matrix() * s2 * r.matrix().transpose()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.mean.iter().all(|v| v.is_finite())
            && unit(self.opacity)
            && self.scale.iter().all(|&s| s > 0.0 && s.is_finite())
            && (self.rotation.quaternion().norm() - 1.0).abs() <= 1e-6
            && self.color.iter().all(|&c| unit(c))
            && unit(self.dynamic_score);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("primitive violates invariants: {self:?}")))
        }
    }

    /// The same primitive expressed in another frame.
    pub fn transformed(&self, pose: &Pose) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: pose.apply(&self.mean),
            rotation: pose.unit_quaternion() * self.rotation,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub gaussians: Vec<GaussianPrimitive>,
    /// Timestep whose ego frame the means are expressed in.
    pub frame: u64,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<GaussianPrimitive>, frame: u64) -> Self {
        Self { gaussians, frame }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn count_by_source(&self, s: Source) -> usize {
        self.gaussians.iter().filter(|g| g.source == s).count()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.gaussians.iter().try_for_each(|g| g.check_invariants())
    }
}

const PLY_PROPS: [&str; 16] = [
    "x", "y", "z", "red", "green", "blue", "opacity", "scale_x", "scale_y", "scale_z", "rot_w",
    "rot_x", "rot_y", "rot_z", "dyn", "source",
];
const PLY_FLOATS: usize = PLY_PROPS.len();

/// Binary little-endian PLY with one float property per attribute.
/// Colors are stored as floats in [0, 1].
pub fn write_ply<W: Write>(mut w: W, set: &GaussianSet) -> Result<()> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment frame {}\nelement vertex {}\n",
        set.frame,
        set.len()
    );
    for p in &PLY_PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(set.len() * PLY_FLOATS * 4);
    for g in &set.gaussians {
        let q = g.rotation.quaternion();
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity,
            g.scale.x,
            g.scale.y,
            g.scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            g.dynamic_score,
            g.source.code() as f64,
        ];
        for v in vals {
            buf.extend((v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads back files produced by [`write_ply`]. Values return at f32
/// precision; origins are not stored.
pub fn read_ply<R: Read>(r: R) -> Result<GaussianSet> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut count = None;
    let mut frame = 0u64;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["ply"] => {}
            ["format", "binary_little_endian", _] => {}
            ["format", f, _] => return Err(Error::Format(format!("unsupported PLY format {f}"))),
            ["comment", "frame", f] => {
                frame = f.parse().map_err(|_| Error::Format("bad frame comment".into()))?
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Format("bad vertex count".into()))?)
            }
            ["property", "float", name] => props.push(name.to_string()),
            _ => return Err(Error::Format(format!("unexpected PLY header line {l:?}"))),
        }
    }
    if props.iter().map(String::as_str).ne(PLY_PROPS.iter().copied()) {
        return Err(Error::Format("unexpected PLY property list".into()));
    }
    let n = count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    let mut body = vec![0u8; n * PLY_FLOATS * 4];
    r.read_exact(&mut body)?;
    let mut gaussians = Vec::with_capacity(n);
    for rec in body.chunks_exact(PLY_FLOATS * 4) {
        let v: Vec<f32> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let f = |i: usize| v[i] as f64;
        gaussians.push(GaussianPrimitive {
            mean: Vector3::new(f(0), f(1), f(2)),
            color: Vector3::new(f(3), f(4), f(5)),
            opacity: f(6),
            scale: Vector3::new(f(7), f(8), f(9)),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(f(10), f(11), f(12), f(13))),
            dynamic_score: f(14),
            source: Source::from_code(v[15])?,
            origin: Origin::Unknown,
        });
    }
    Ok(GaussianSet { gaussians, frame })
}
