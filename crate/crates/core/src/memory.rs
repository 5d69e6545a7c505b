//! Static Gaussian memory anchored in the world frame.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{read_ply, write_ply, GaussianSet, Source};
use crate::geom::{in_frustum, CameraModel, Pose};

pub const DEFAULT_CAPACITY: usize = 2_000_000;
pub const DEFAULT_TAU_D: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// Members in world coordinates.
    pub gaussians: GaussianSet,
    /// Frame at which each member was inserted, parallel to `gaussians`.
    pub inserted_frame: Vec<u64>,
    /// Global insertion sequence numbers, parallel to `gaussians`.
    pub seq: Vec<u64>,
    pub world_from_ego_last: Pose,
    pub capacity: usize,
    pub frame_counter: u64,
    next_seq: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            gaussians: GaussianSet::default(),
            inserted_frame: Vec::new(),
            seq: Vec::new(),
            world_from_ego_last: Pose::identity(),
            capacity,
            frame_counter: 0,
            next_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    fn retain_indices(&self, keep: &[bool]) -> MemoryBank {
        let pick = |i: &usize| keep[*i];
        let idx: Vec<usize> = (0..self.len()).filter(pick).collect();
        MemoryBank {
            gaussians: GaussianSet::new(
                idx.iter().map(|&i| self.gaussians.gaussians[i].clone()).collect(),
                self.gaussians.frame,
            ),
            inserted_frame: idx.iter().map(|&i| self.inserted_frame[i]).collect(),
            seq: idx.iter().map(|&i| self.seq[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> MemoryBank {
        MemoryBank {
            gaussians: GaussianSet::default(),
            inserted_frame: Vec::new(),
            seq: Vec::new(),
            world_from_ego_last: self.world_from_ego_last,
            capacity: self.capacity,
            frame_counter: self.frame_counter,
            next_seq: self.next_seq,
        }
    }
}

/// Drops members whose mean, expressed in the current ego frame, is visible
/// from any camera.
pub fn view_filter(m: &MemoryBank, cams: &[CameraModel], world_from_ego: &Pose) -> MemoryBank {
    let ego_from_world = world_from_ego.invert();
    let keep: Vec<bool> = m
        .gaussians
        .gaussians
        .iter()
        .map(|g| !in_frustum(cams, &ego_from_world.apply(&g.mean)))
        .collect();
    m.retain_indices(&keep)
}

/// `current ∪ filtered`, memory members moved into the current ego frame and
/// appended after the current set.
pub fn complete(current: &GaussianSet, filtered: &MemoryBank, world_from_ego: &Pose) -> GaussianSet {
    let ego_from_world = world_from_ego.invert();
    let mut out = current.clone();
    out.gaussians.extend(filtered.gaussians.gaussians.iter().map(|g| {
        let mut t = g.transformed(&ego_from_world);
        t.source = Source::Memory;
        t
    }));
    out
}

/// Appends current primitives with `d < tau_d` in world coordinates, then
/// evicts the lowest-opacity members (oldest first, then by insertion order)
/// until the capacity holds.
pub fn update(
    filtered: &MemoryBank,
    current: &GaussianSet,
    world_from_ego: &Pose,
    tau_d: f64,
) -> Result<MemoryBank> {
    if !(0.0..=1.0).contains(&tau_d) {
        return Err(Error::InvalidConfig(format!("tau_d {tau_d} outside [0, 1]")));
    }
    let mut m = filtered.clone();
    let frame = current.frame;
    for g in &current.gaussians {
        if g.dynamic_score < tau_d {
            m.gaussians.gaussians.push(g.transformed(world_from_ego));
            m.inserted_frame.push(frame);
            m.seq.push(m.next_seq);
            m.next_seq += 1;
        }
    }
    m.world_from_ego_last = *world_from_ego;
    m.frame_counter = frame + 1;
    m.gaussians.frame = frame;
    if m.len() > m.capacity {
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| {
            let ga = &m.gaussians.gaussians[a];
            let gb = &m.gaussians.gaussians[b];
            ga.opacity
                .total_cmp(&gb.opacity)
                .then(m.inserted_frame[a].cmp(&m.inserted_frame[b]))
                .then(m.seq[a].cmp(&m.seq[b]))
        });
        let mut keep = vec![true; m.len()];
        for &i in &order[..m.len() - m.capacity] {
            keep[i] = false;
        }
        m = m.retain_indices(&keep);
    }
    Ok(m)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    world_from_ego_last: Pose,
    frame_counter: u64,
    capacity: usize,
    next_seq: u64,
    inserted_frame: Vec<u64>,
    seq: Vec<u64>,
}

/// Writes `<stem>.ply` and `<stem>.json`.
pub fn write_checkpoint(m: &MemoryBank, dir: &Path, stem: &str) -> Result<()> {
    write_ply(BufWriter::new(File::create(dir.join(format!("{stem}.ply")))?), &m.gaussians)?;
    let side = Sidecar {
        world_from_ego_last: m.world_from_ego_last,
        frame_counter: m.frame_counter,
        capacity: m.capacity,
        next_seq: m.next_seq,
        inserted_frame: m.inserted_frame.clone(),
        seq: m.seq.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(format!("{stem}.json")))?), &side)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path, stem: &str) -> Result<MemoryBank> {
    let gaussians = read_ply(BufReader::new(File::open(dir.join(format!("{stem}.ply")))?))?;
    let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.json")))?))?;
    if side.inserted_frame.len() != gaussians.len() || side.seq.len() != gaussians.len() {
        return Err(Error::Format("memory sidecar does not match PLY".into()));
    }
    Ok(MemoryBank {
        gaussians,
        inserted_frame: side.inserted_frame,
        seq: side.seq,
        world_from_ego_last: side.world_from_ego_last,
        capacity: side.capacity,
        frame_counter: side.frame_counter,
        next_seq: side.next_seq,
    })
}
