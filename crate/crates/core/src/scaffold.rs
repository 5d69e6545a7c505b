//! Sparse latent scaffold: voxelized point maps carrying per-voxel features.
//!
//! A scaffold entry keeps the voxel's geometric center as its position and
//! the mean of its member points separately. Before view features are
//! attached, an entry's feature is the initial block: the centroid offset
//! from the voxel center followed by `ln(1 + point_count)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{CameraModel, GridSpec, VoxelKey};
use crate::image::{FeatureMap, Grid2, Mask};

/// Width of the per-voxel initial feature block.
pub const INITIAL_CHANNELS: usize = 4;

const DUMP_MAGIC: &[u8; 4] = b"USCF";
const DUMP_VERSION: u32 = 1;

/// One camera's dense point map in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPoints {
    pub camera_index: usize,
    pub points: Grid2<Vector3<f64>>,
    pub valid: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMapFrame {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<CameraPoints>,
}

impl PointMapFrame {
    pub fn new(width: usize, height: usize, cameras: Vec<CameraPoints>) -> Result<Self> {
        for c in &cameras {
            if c.points.width != width
                || c.points.height != height
                || !c.points.same_dims(&c.valid)
            {
                return Err(Error::DimensionMismatch(format!(
                    "camera {} point map is not {width}x{height}",
                    c.camera_index
                )));
            }
        }
        Ok(Self {
            width,
            height,
            cameras,
        })
    }

    /// Valid points of every camera in camera-then-row-major order.
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, usize, &Vector3<f64>)> {
        self.cameras.iter().enumerate().flat_map(|(ci, c)| {
            c.points
                .data
                .iter()
                .zip(&c.valid.data)
                .enumerate()
                .filter(|(_, (_, &v))| v)
                .map(move |(pi, (p, _))| (ci, pi, p))
        })
    }

    pub fn valid_count(&self) -> usize {
        self.cameras
            .iter()
            .map(|c| c.valid.data.iter().filter(|&&v| v).count())
            .sum()
    }
}

/// Per-camera feature maps with geometric channels followed by semantic ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    pub geo_channels: usize,
    pub sem_channels: usize,
    pub maps: Vec<FeatureMap>,
}

impl FeatureMapSet {
    pub fn new(geo_channels: usize, sem_channels: usize, maps: Vec<FeatureMap>) -> Result<Self> {
        let c = geo_channels + sem_channels;
        for (i, m) in maps.iter().enumerate() {
            if m.channels != c {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    got: m.channels,
                });
            }
            if m.data.len() != m.width * m.height * c {
                return Err(Error::DimensionMismatch(format!("feature map {i} buffer size")));
            }
        }
        Ok(Self {
            geo_channels,
            sem_channels,
            maps,
        })
    }

    pub fn channels(&self) -> usize {
        self.geo_channels + self.sem_channels
    }

    /// Mean of the geometric channels over each map, concatenated per camera.
    pub fn pooled_geometry(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.maps.len() * self.geo_channels);
        for m in &self.maps {
            let n = (m.width * m.height) as f64;
            let mut acc = vec![0.0; self.geo_channels];
            for t in m.data.chunks_exact(m.channels) {
                for (a, v) in acc.iter_mut().zip(t) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / n));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelEntry {
    pub feature: Vec<f64>,
    /// Geometric center of the voxel.
    pub position: Vector3<f64>,
    /// Sum of member points; the centroid is `point_sum / point_count`.
    pub point_sum: Vector3<f64>,
    pub point_count: u32,
    /// Member points flagged dynamic by supervision labels, when provided.
    pub dynamic_count: u32,
}

impl VoxelEntry {
    pub fn centroid(&self) -> Vector3<f64> {
        self.point_sum / self.point_count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseScaffold {
    pub grid: GridSpec,
    pub channels: usize,
    pub entries: BTreeMap<VoxelKey, VoxelEntry>,
}

/// Occupied-voxel count and the bounds of occupied voxel centers
/// (`None` when the scaffold is empty).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub count: usize,
    pub bounds: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl SparseScaffold {
    pub fn empty(grid: GridSpec, channels: usize) -> Self {
        Self {
            grid,
            channels,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, k: &VoxelKey) -> Option<&VoxelEntry> {
        self.entries.get(k)
    }

    /// Feature of the voxel containing `pt`, zero-padded when the voxel is
    /// unoccupied or `pt` lies outside the grid.
    pub fn retrieve(&self, pt: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.retrieve_into(pt, &mut out);
        out
    }

    pub fn retrieve_into(&self, pt: &Vector3<f64>, out: &mut [f64]) {
        match self.grid.key_of(pt).and_then(|k| self.entries.get(&k)) {
            Some(e) => out.copy_from_slice(&e.feature),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    pub fn occupancy(&self) -> Occupancy {
        let mut it = self.entries.values().map(|e| e.position);
        let bounds = it.next().map(|first| {
            it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)))
        });
        Occupancy {
            count: self.entries.len(),
            bounds,
        }
    }

    pub fn total_point_count(&self) -> u64 {
        self.entries.values().map(|e| e.point_count as u64).sum()
    }

    /// Writes the binary debug dump (`USCF` layout, little-endian).
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for v in [self.grid.p_min(), self.grid.p_max(), self.grid.voxel_size()] {
            for a in 0..3 {
                w.write_all(&v[a].to_le_bytes())?;
            }
        }
        for (k, e) in &self.entries {
            for a in 0..3 {
                w.write_all(&k.0[a].to_le_bytes())?;
            }
            let c = e.centroid();
            for a in 0..3 {
                w.write_all(&c[a].to_le_bytes())?;
            }
            w.write_all(&e.point_count.to_le_bytes())?;
            for &f in &e.feature {
                w.write_all(&(f as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump back. Features come back at f32 precision and dynamic
    /// labels are not stored.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        if &take::<4>(&mut r)? != DUMP_MAGIC {
            return Err(Error::Format("missing USCF magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let n = u64::from_le_bytes(take(&mut r)?);
        let channels = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut g = [0.0f64; 9];
        for v in &mut g {
            *v = f64::from_le_bytes(take(&mut r)?);
        }
        let grid = GridSpec::new(
            Vector3::new(g[0], g[1], g[2]),
            Vector3::new(g[3], g[4], g[5]),
            Vector3::new(g[6], g[7], g[8]),
        )?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let mut k = [0i32; 3];
            for v in &mut k {
                *v = i32::from_le_bytes(take(&mut r)?);
            }
            let mut c = [0.0f64; 3];
            for v in &mut c {
                *v = f64::from_le_bytes(take(&mut r)?);
            }
            let count = u32::from_le_bytes(take(&mut r)?);
            let mut feature = Vec::with_capacity(channels);
            for _ in 0..channels {
                feature.push(f32::from_le_bytes(take(&mut r)?) as f64);
            }
            let key = VoxelKey(k);
            if !grid.contains_key(key) {
                return Err(Error::Format(format!("key {k:?} outside grid")));
            }
            entries.insert(
                key,
                VoxelEntry {
                    feature,
                    position: grid.center(key),
                    point_sum: Vector3::from(c) * count as f64,
                    point_count: count,
                    dynamic_count: 0,
                },
            );
        }
        Ok(Self {
            grid,
            channels,
            entries,
        })
    }
}

fn initial_feature(centroid: &Vector3<f64>, center: &Vector3<f64>, count: u32) -> Vec<f64> {
    let d = centroid - center;
    vec![d.x, d.y, d.z, (count as f64).ln_1p()]
}

/// Groups valid, in-bounds points by voxel.
pub fn voxelize(points: &PointMapFrame, grid: &GridSpec) -> SparseScaffold {
    voxelize_labeled(points, grid, None)
}

/// [`voxelize`] that also counts member points flagged in per-camera
/// `dynamic` masks into [`VoxelEntry::dynamic_count`].
pub fn voxelize_labeled(
    points: &PointMapFrame,
    grid: &GridSpec,
    dynamic: Option<&[Mask]>,
) -> SparseScaffold {
    let mut acc: BTreeMap<VoxelKey, (Vector3<f64>, u32, u32)> = BTreeMap::new();
    for (ci, pi, p) in points.valid_points() {
        let Some(k) = grid.key_of(p) else { continue };
        let dyn_hit = dynamic.is_some_and(|m| m[ci].data[pi]) as u32;
        let slot = acc.entry(k).or_insert((Vector3::zeros(), 0, 0));
        slot.0 += p;
        slot.1 += 1;
        slot.2 += dyn_hit;
    }
    let entries = acc
        .into_iter()
        .map(|(k, (sum, count, dyn_count))| {
            let position = grid.center(k);
            let centroid = sum / count as f64;
            let feature = initial_feature(&centroid, &position, count);
            (
                k,
                VoxelEntry {
                    feature,
                    position,
                    point_sum: sum,
                    point_count: count,
                    dynamic_count: dyn_count,
                },
            )
        })
        .collect();
    SparseScaffold {
        grid: *grid,
        channels: INITIAL_CHANNELS,
        entries,
    }
}

/// Projects each voxel center into every camera, bilinearly samples the
/// feature maps where the projection succeeds, averages across those
/// cameras and prepends the result to the voxel's current feature.
pub fn attach_view_features(
    s: &SparseScaffold,
    cams: &[CameraModel],
    feats: &FeatureMapSet,
) -> Result<SparseScaffold> {
    if cams.len() != feats.maps.len() {
        return Err(Error::LengthMismatch {
            expected: cams.len(),
            got: feats.maps.len(),
        });
    }
    let c = feats.channels();
    let items: Vec<(&VoxelKey, &VoxelEntry)> = s.entries.iter().collect();
    let updated: Vec<(VoxelKey, VoxelEntry)> = items
        .par_iter()
        .map(|(k, e)| {
            let mut sampled = vec![0.0; c];
            let mut tmp = vec![0.0; c];
            let mut seen = 0usize;
            for (cam, fm) in cams.iter().zip(&feats.maps) {
                if let Some(p) = cam.project(&e.position) {
                    fm.sample_at_image_coords(p.u, p.v, cam.width, cam.height, &mut tmp);
                    for (a, t) in sampled.iter_mut().zip(&tmp) {
                        *a += t;
                    }
                    seen += 1;
                }
            }
            if seen > 1 {
                let n = seen as f64;
                sampled.iter_mut().for_each(|v| *v /= n);
            }
            let mut feature = sampled;
            feature.extend_from_slice(&e.feature);
            (
                **k,
                VoxelEntry {
                    feature,
                    ..(*e).clone()
                },
            )
        })
        .collect();
    Ok(SparseScaffold {
        grid: s.grid,
        channels: c + s.channels,
        entries: updated.into_iter().collect(),
    })
}
