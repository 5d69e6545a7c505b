//! Spatio-temporal scaffold fusion.
//!
//! Spatial fusion runs a submanifold sparse convolution stack over the
//! current scaffold. Temporal fusion warps the previous fused scaffold into
//! the current ego frame, tags both with a time embedding, merges them with
//! sparse tensor addition and refines the result with a second stack.
//!
//! All sparse maps iterate in lexicographic key order, so every result is
//! reproducible bit for bit.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{GridSpec, Pose, VoxelKey};
use crate::nn::leaky_relu;
use crate::scaffold::{SparseScaffold, VoxelEntry};

pub const TAPS: usize = 27;
pub const CENTER_TAP: usize = 13;
const NO_NEIGHBOR: u32 = u32::MAX;

/// Offset of stencil tap `t`; taps enumerate dx, then dy, then dz in -1..=1.
pub fn tap_offset(t: usize) -> [i32; 3] {
    [(t / 9) as i32 - 1, ((t / 3) % 3) as i32 - 1, (t % 3) as i32 - 1]
}

/// 3×3×3 sparse convolution, weights laid out `c_out × c_in × 27`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Leaky-ReLU (slope 0.01) after the affine part.
    pub activation: bool,
    /// Adds the layer input to its output; needs `c_in == c_out`.
    pub residual: bool,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![0.0; c_out * c_in * TAPS],
            bias: vec![0.0; c_out],
            activation: false,
            residual: false,
        }
    }

    /// Center tap is the identity, every other tap zero, linear.
    pub fn identity(c: usize) -> Self {
        let mut l = Self::zeros(c, c);
        for i in 0..c {
            l.weight[(i * c + i) * TAPS + CENTER_TAP] = 1.0;
        }
        l
    }

    pub fn random(c_in: usize, c_out: usize, rng: &mut impl Rng, gain: f64) -> Self {
        let mut l = Self::zeros(c_in, c_out);
        let b = gain / ((c_in * TAPS) as f64).sqrt();
        for w in &mut l.weight {
            *w = rng.random_range(-b..=b);
        }
        l.activation = true;
        l
    }

    pub fn w(&self, o: usize, i: usize, tap: usize) -> f64 {
        self.weight[(o * self.c_in + i) * TAPS + tap]
    }

    fn validate(&self) -> Result<()> {
        if self.weight.len() != self.c_out * self.c_in * TAPS || self.bias.len() != self.c_out {
            return Err(Error::ShapeMismatch("conv tensor sizes".into()));
        }
        if self.residual && self.c_in != self.c_out {
            return Err(Error::ShapeMismatch("residual conv needs c_in == c_out".into()));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite conv weights".into()));
        }
        Ok(())
    }

    /// Applies the layer to `n × c_in` features with a precomputed neighbor table.
    fn apply(&self, x: &[f64], nbrs: &[[u32; TAPS]]) -> Vec<f64> {
        // Repack as tap-major `27 × c_out × c_in` for contiguous inner loops.
        let mut packed = vec![0.0; TAPS * self.c_out * self.c_in];
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for t in 0..TAPS {
                    packed[(t * self.c_out + o) * self.c_in + i] = self.w(o, i, t);
                }
            }
        }
        let mut out = vec![0.0; nbrs.len() * self.c_out];
        out.par_chunks_mut(self.c_out)
            .zip(nbrs.par_iter())
            .enumerate()
            .for_each(|(v, (dst, nb))| {
                dst.copy_from_slice(&self.bias);
                for (t, &n) in nb.iter().enumerate() {
                    if n == NO_NEIGHBOR {
                        continue;
                    }
                    let src = &x[n as usize * self.c_in..(n as usize + 1) * self.c_in];
                    for (o, acc) in dst.iter_mut().enumerate() {
                        let row = &packed[(t * self.c_out + o) * self.c_in..][..self.c_in];
                        let mut s = 0.0;
                        for (w, xi) in row.iter().zip(src) {
                            s += w * xi;
                        }
                        *acc += s;
                    }
                }
                if self.activation {
                    dst.iter_mut().for_each(|a| *a = leaky_relu(*a));
                }
                if self.residual {
                    let own = &x[v * self.c_in..(v + 1) * self.c_in];
                    for (a, xi) in dst.iter_mut().zip(own) {
                        *a += xi;
                    }
                }
            });
        out
    }
}

/// One U-Net level below the current resolution: features are pooled to the
/// parent voxels, processed by `coarse`, unpooled back by nearest neighbor and
/// concatenated after the skip features before `merge`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetLevel {
    pub coarse: SparseConvNet,
    pub merge: ConvLayer,
}

/// Submanifold sparse convolution stack with optional stride-2 stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvNet {
    pub layers: Vec<ConvLayer>,
    pub inner: Option<Box<UNetLevel>>,
}

impl SparseConvNet {
    pub fn new(layers: Vec<ConvLayer>, inner: Option<UNetLevel>) -> Result<Self> {
        let net = Self {
            layers,
            inner: inner.map(Box::new),
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("conv net has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for w in self.layers.windows(2) {
            if w[0].c_out != w[1].c_in {
                return Err(Error::ShapeMismatch(format!(
                    "conv widths {} -> {} do not chain",
                    w[0].c_out, w[1].c_in
                )));
            }
        }
        if let Some(level) = &self.inner {
            level.coarse.validate()?;
            level.merge.validate()?;
            let skip = self.layers.last().map(|l| l.c_out).unwrap_or(0);
            if level.coarse.in_channels() != skip
                || level.merge.c_in != skip + level.coarse.out_channels()
            {
                return Err(Error::ShapeMismatch("U-Net level widths".into()));
            }
        }
        Ok(())
    }

    /// `n` identity layers of width `c` at full resolution.
    pub fn identity(c: usize, n: usize) -> Self {
        Self {
            layers: (0..n.max(1)).map(|_| ConvLayer::identity(c)).collect(),
            inner: None,
        }
    }

    /// Randomly initialized stack with `widths = [in, .., out]`. Layers with
    /// equal in/out width are residual; the final layer is linear.
    /// `down_levels` nests stride-2 stages of width `widths.last()`.
    pub fn random(widths: &[usize], down_levels: usize, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(widths, down_levels, &mut rng, gain)
    }

    fn random_with(widths: &[usize], down_levels: usize, rng: &mut ChaCha8Rng, gain: f64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output width");
        let mut layers: Vec<ConvLayer> = widths
            .windows(2)
            .map(|w| {
                let mut l = ConvLayer::random(w[0], w[1], rng, gain);
                l.residual = w[0] == w[1];
                l
            })
            .collect();
        let out = *widths.last().expect("non-empty");
        let inner = (down_levels > 0).then(|| {
            let coarse = Self::random_with(&[out, out], down_levels - 1, rng, gain);
            let mut merge = ConvLayer::random(2 * out, out, rng, gain);
            merge.activation = false;
            Box::new(UNetLevel { coarse, merge })
        });
        if inner.is_none() {
            if let Some(l) = layers.last_mut() {
                l.activation = false;
            }
        }
        Self { layers, inner }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn out_channels(&self) -> usize {
        match &self.inner {
            Some(level) => level.merge.c_out,
            None => self.layers.last().map(|l| l.c_out).unwrap_or(0),
        }
    }

    /// Number of stride-2 stages.
    pub fn depth(&self) -> usize {
        self.inner.as_ref().map_or(0, |l| 1 + l.coarse.depth())
    }

    fn run(&self, keys: &[VoxelKey], x: Vec<f64>) -> Vec<f64> {
        let nbrs = neighbor_table(keys);
        let mut cur = x;
        for l in &self.layers {
            cur = l.apply(&cur, &nbrs);
        }
        let Some(level) = &self.inner else {
            return cur;
        };
        let c = self.layers.last().map(|l| l.c_out).unwrap_or(0);
        // pool by parent voxel (mean), in sorted parent order
        let mut parents: BTreeMap<VoxelKey, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            let slot = parents.entry(k.parent()).or_insert_with(|| (vec![0.0; c], 0));
            for (a, v) in slot.0.iter_mut().zip(&cur[i * c..(i + 1) * c]) {
                *a += v;
            }
            slot.1 += 1;
        }
        let pkeys: Vec<VoxelKey> = parents.keys().copied().collect();
        let mut pooled = Vec::with_capacity(pkeys.len() * c);
        for (sum, n) in parents.values() {
            pooled.extend(sum.iter().map(|v| v / *n as f64));
        }
        let coarse_out = level.coarse.run(&pkeys, pooled);
        let cc = level.coarse.out_channels();
        let pindex: HashMap<VoxelKey, usize> =
            pkeys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut cat = Vec::with_capacity(keys.len() * (c + cc));
        for (i, k) in keys.iter().enumerate() {
            cat.extend_from_slice(&cur[i * c..(i + 1) * c]);
            let p = pindex[&k.parent()];
            cat.extend_from_slice(&coarse_out[p * cc..(p + 1) * cc]);
        }
        level.merge.apply(&cat, &nbrs)
    }
}

fn neighbor_table(keys: &[VoxelKey]) -> Vec<[u32; TAPS]> {
    let index: HashMap<VoxelKey, u32> =
        keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
    keys.par_iter()
        .map(|k| {
            let mut row = [NO_NEIGHBOR; TAPS];
            for (t, slot) in row.iter_mut().enumerate() {
                if let Some(&n) = index.get(&k.offset(tap_offset(t))) {
                    *slot = n;
                }
            }
            row
        })
        .collect()
}

/// Runs `net` over the scaffold. Occupancy is preserved.
pub fn sparse_conv_forward(net: &SparseConvNet, s: &SparseScaffold) -> Result<SparseScaffold> {
    if s.channels != net.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: net.in_channels(),
            got: s.channels,
        });
    }
    let keys: Vec<VoxelKey> = s.entries.keys().copied().collect();
    let mut x = Vec::with_capacity(keys.len() * s.channels);
    for e in s.entries.values() {
        x.extend_from_slice(&e.feature);
    }
    let out = net.run(&keys, x);
    let c = net.out_channels();
    let entries = s
        .entries
        .iter()
        .enumerate()
        .map(|(i, (k, e))| {
            (
                *k,
                VoxelEntry {
                    feature: out[i * c..(i + 1) * c].to_vec(),
                    ..e.clone()
                },
            )
        })
        .collect();
    Ok(SparseScaffold {
        grid: s.grid,
        channels: c,
        entries,
    })
}

/// Bookkeeping from [`warp_scaffold_report`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WarpReport {
    /// Entries whose warped center left the target grid.
    pub dropped_entries: usize,
    pub dropped_points: u64,
    /// Entries that landed on an already-claimed target voxel.
    pub merged_entries: usize,
}

pub fn warp_scaffold(s: &SparseScaffold, pose: &Pose, target: &GridSpec) -> SparseScaffold {
    warp_scaffold_report(s, pose, target).0
}

/// Transforms every entry's center and centroid by `pose` and re-voxelizes
/// into `target`. Colliding entries average their features and sum their
/// counts; entries leaving the grid are dropped.
pub fn warp_scaffold_report(
    s: &SparseScaffold,
    pose: &Pose,
    target: &GridSpec,
) -> (SparseScaffold, WarpReport) {
    struct Acc {
        feature: Vec<f64>,
        members: usize,
        point_sum: Vector3<f64>,
        count: u32,
        dynamic: u32,
    }
    let mut report = WarpReport::default();
    let mut groups: BTreeMap<VoxelKey, Acc> = BTreeMap::new();
    for e in s.entries.values() {
        let moved = pose.apply(&e.position);
        let Some(k) = target.key_of(&moved) else {
            report.dropped_entries += 1;
            report.dropped_points += e.point_count as u64;
            continue;
        };
        let point_sum = pose.rotation() * e.point_sum + pose.translation() * e.point_count as f64;
        match groups.get_mut(&k) {
            Some(acc) => {
                report.merged_entries += 1;
                for (a, v) in acc.feature.iter_mut().zip(&e.feature) {
                    *a += v;
                }
                acc.members += 1;
                acc.point_sum += point_sum;
                acc.count += e.point_count;
                acc.dynamic += e.dynamic_count;
            }
            None => {
                groups.insert(
                    k,
                    Acc {
                        feature: e.feature.clone(),
                        members: 1,
                        point_sum,
                        count: e.point_count,
                        dynamic: e.dynamic_count,
                    },
                );
            }
        }
    }
    let entries = groups
        .into_iter()
        .map(|(k, mut acc)| {
            if acc.members > 1 {
                let n = acc.members as f64;
                acc.feature.iter_mut().for_each(|v| *v /= n);
            }
            // keep the centroid inside its new voxel
            let (lo, hi) = target.cuboid(k);
            let c = acc.point_sum / acc.count as f64;
            let clamped = c.sup(&lo).inf(&hi);
            if clamped != c {
                acc.point_sum = clamped * acc.count as f64;
            }
            (
                k,
                VoxelEntry {
                    feature: acc.feature,
                    position: target.center(k),
                    point_sum: acc.point_sum,
                    point_count: acc.count,
                    dynamic_count: acc.dynamic,
                },
            )
        })
        .collect();
    (
        SparseScaffold {
            grid: *target,
            channels: s.channels,
            entries,
        },
        report,
    )
}

/// Sparse tensor addition: key union, features and counts summed where the
/// supports overlap, copied elsewhere.
pub fn sparse_add(a: &SparseScaffold, b: &SparseScaffold) -> Result<SparseScaffold> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::GridMismatch);
    }
    if a.channels != b.channels {
        return Err(Error::ChannelMismatch {
            expected: a.channels,
            got: b.channels,
        });
    }
    let mut entries = a.entries.clone();
    for (k, eb) in &b.entries {
        match entries.get_mut(k) {
            Some(ea) => {
                for (x, y) in ea.feature.iter_mut().zip(&eb.feature) {
                    *x += y;
                }
                ea.point_sum += eb.point_sum;
                ea.point_count += eb.point_count;
                ea.dynamic_count += eb.dynamic_count;
            }
            None => {
                entries.insert(*k, eb.clone());
            }
        }
    }
    Ok(SparseScaffold {
        grid: a.grid,
        channels: a.channels,
        entries,
    })
}

/// Learned tags for current (age 0) and carried-over (age 1) features.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub table: [Vec<f64>; 2],
}

impl TimeEmbedding {
    pub fn zeros(c: usize) -> Self {
        Self {
            table: [vec![0.0; c], vec![0.0; c]],
        }
    }

    pub fn random(c: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || (0..c).map(|_| rng.random_range(-scale..=scale)).collect();
        Self {
            table: [row(), row()],
        }
    }

    pub fn channels(&self) -> usize {
        self.table[0].len()
    }

    fn tag(&self, s: &mut SparseScaffold, age: usize) {
        let e = &self.table[age];
        for entry in s.entries.values_mut() {
            for (x, &v) in entry.feature.iter_mut().zip(e) {
                // exact zeros are skipped so a zero table leaves bits untouched
                if v != 0.0 {
                    *x += v;
                }
            }
        }
    }
}

/// `refine(tag0(current) ⊕ tag1(warp(prev_fused)))`; the caller caches the
/// result as the next frame's `prev_fused`.
pub fn temporal_fuse(
    current: &SparseScaffold,
    prev_fused: &SparseScaffold,
    prev_to_cur: &Pose,
    emb: &TimeEmbedding,
    refine: &SparseConvNet,
) -> Result<SparseScaffold> {
    if emb.channels() != current.channels {
        return Err(Error::ChannelMismatch {
            expected: current.channels,
            got: emb.channels(),
        });
    }
    if prev_fused.channels != current.channels {
        return Err(Error::ChannelMismatch {
            expected: current.channels,
            got: prev_fused.channels,
        });
    }
    let mut cur = current.clone();
    emb.tag(&mut cur, 0);
    let merged = if prev_fused.is_empty() {
        cur
    } else {
        let mut warped = warp_scaffold(prev_fused, prev_to_cur, &current.grid);
        emb.tag(&mut warped, 1);
        sparse_add(&cur, &warped)?
    };
    sparse_conv_forward(refine, &merged)
}
