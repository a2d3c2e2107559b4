//! Coarse-to-fine random walker over a brick octree.
//!
//! The coarsest level is solved globally. Each finer brick is solved on its
//! own voxels plus a one-voxel ghost shell whose values are sampled
//! trilinearly from the parent level, guided by intensity, and held fixed. Bricks whose parent
//! region is confidently foreground or background and holds no seeds become
//! constant nodes. With a previous result, a brick whose seeds are unchanged
//! and whose ghost values stay within [`REUSE_TOLERANCE`] of the values it
//! was originally solved with is copied verbatim.
//!
//! The result is a regular `f32` octree directory plus `hrw.json` (one entry
//! per brick) and `hrw_inputs.bin` (the ghost values each solved brick was
//! computed from, little-endian `f32`).

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solver, IntensityRange, LabelSet, RwParams};
use crate::error::{Error, Result};
use crate::job::JobControl;
use crate::octree::{
    fnv1a, BrickOctree, NodeRecord, OctreeGeometry, OctreeMeta, ABSENT_CHILD, BRICKS_FILE, CONSTANT_BRICK, FNV_OFFSET,
    NODES_FILE, NODE_LIMIT, OCTREE_FILE,
};
use crate::volume::{DType, SliceVolume};

pub const REUSE_TOLERANCE: f32 = 1e-3;
pub const SIDECAR_FILE: &str = "hrw.json";
pub const INPUTS_FILE: &str = "hrw_inputs.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrickKind {
    Solved,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrickEntry {
    pub level: usize,
    pub coords: [usize; 3],
    pub kind: BrickKind,
    /// Label revision the brick values were computed at.
    pub revision: u64,
    pub seed_hash: String,
    /// `(offset, len)` in `f32` units into `hrw_inputs.bin`.
    pub inputs: [u64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrwSidecar {
    pub revision: u64,
    pub source_hash: String,
    pub params: RwParams,
    pub bricks: Vec<BrickEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HrwReport {
    pub solved: usize,
    pub reused: usize,
    pub pruned: usize,
    pub total: usize,
}

/// Foreground probabilities in the octree layout with hierarchical solver
/// bookkeeping.
#[derive(Debug)]
pub struct ProbabilityOctree {
    octree: BrickOctree,
    sidecar: HrwSidecar,
    index: HashMap<(usize, [usize; 3]), usize>,
}

impl ProbabilityOctree {
    pub fn open(dir: impl AsRef<Path>, budget: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let octree = BrickOctree::open(dir, budget)?;
        let path = dir.join(SIDECAR_FILE);
        let raw = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => e.into(),
        })?;
        let sidecar: HrwSidecar = serde_json::from_slice(&raw)?;
        if octree.meta().dtype != DType::F32 || octree.channels() != 1 {
            return Err(Error::MalformedMeta("probability octree must be single-channel f32".into()));
        }
        let index = sidecar
            .bricks
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.level, e.coords), i))
            .collect();
        Ok(ProbabilityOctree { octree, sidecar, index })
    }

    pub fn octree(&self) -> &BrickOctree {
        &self.octree
    }

    pub fn dir(&self) -> &Path {
        self.octree.dir()
    }

    pub fn revision(&self) -> u64 {
        self.sidecar.revision
    }

    pub fn sidecar(&self) -> &HrwSidecar {
        &self.sidecar
    }

    pub fn entry(&self, level: usize, coords: [usize; 3]) -> Option<&BrickEntry> {
        self.index.get(&(level, coords)).map(|&i| &self.sidecar.bricks[i])
    }

    /// Full-resolution probability at a voxel.
    pub fn probability(&self, p: [usize; 3]) -> Result<f32> {
        self.octree.voxel(0, 0, p.map(|c| c as isize))
    }

    pub fn reconstruct(&self, out: impl AsRef<Path>) -> Result<SliceVolume> {
        self.octree.reconstruct_level0(out)
    }

    fn inputs(&self, entry: &BrickEntry) -> Result<Vec<f32>> {
        let [offset, len] = entry.inputs;
        let mut file = File::open(self.dir().join(INPUTS_FILE))?;
        let mut raw = vec![0u8; len as usize * 4];
        std::io::Seek::seek(&mut file, std::io::SeekFrom::Start(offset * 4))?;
        file.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

#[derive(Clone, Debug)]
enum BrickValues {
    Constant(f32),
    /// `b^3` values, padded clamp-to-edge.
    Dense(Vec<f32>),
}

/// One level of probabilities, keyed by brick.
struct LevelValues {
    dims: [usize; 3],
    b: usize,
    bricks: HashMap<[usize; 3], BrickValues>,
}

impl LevelValues {
    fn at(&self, p: [usize; 3]) -> f32 {
        let b = self.b;
        match &self.bricks[&[p[0] / b, p[1] / b, p[2] / b]] {
            BrickValues::Constant(v) => *v,
            BrickValues::Dense(d) => d[((p[2] % b) * b + p[1] % b) * b + p[0] % b],
        }
    }

    /// Trilinear interpolation at continuous voxel coordinates, clamped.
    /// Each corner weight is scaled by the edge weight between
    /// the fine intensity and the corner's coarse intensity, so values are
    /// not carried across intensity edges. Falls back to plain trilinear
    /// weights when every corner is dissimilar.
    fn sample(&self, q: [f64; 3], guide: &Guide) -> f32 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let qa = q[a].clamp(0.0, max);
            let f = qa.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            t[a] = qa - f;
        }
        let (mut plain, mut guided, mut guided_w) = (0.0f64, 0.0f64, 0.0f64);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut p = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= t[a];
                    p[a] = i1[a];
                } else {
                    w *= 1.0 - t[a];
                    p[a] = i0[a];
                }
            }
            if w > 0.0 {
                let v = self.at(p) as f64;
                plain += w * v;
                let s = w * guide.similarity(p);
                guided += s * v;
                guided_w += s;
            }
        }
        if guided_w > GUIDE_FLOOR {
            (guided / guided_w) as f32
        } else {
            plain as f32
        }
    }
}

const GUIDE_FLOOR: f64 = 1e-3;

/// Coarse intensities around a brick and the fine intensity being sampled for.
struct Guide<'a> {
    beta: f64,
    fine: f64,
    lo: [usize; 3],
    dims: [usize; 3],
    coarse: &'a [f64],
}

impl Guide<'_> {
    fn similarity(&self, p: [usize; 3]) -> f64 {
        let i = ((p[2] - self.lo[2]) * self.dims[1] + (p[1] - self.lo[1])) * self.dims[0] + (p[0] - self.lo[0]);
        let d = self.fine - self.coarse[i];
        (-self.beta * d * d).exp()
    }
}

/// Level-`l` seeds grouped by brick; `None` marks a voxel both classes map to.
struct LevelSeeds {
    by_brick: HashMap<[usize; 3], Vec<([usize; 3], Option<bool>)>>,
}

impl LevelSeeds {
    fn new(labels: &LabelSet, level: usize, b: usize) -> Self {
        let mut by_brick: HashMap<[usize; 3], Vec<_>> = HashMap::new();
        for (p, class) in labels.at_level(level) {
            by_brick.entry(p.map(|c| c / b)).or_default().push((p, class));
        }
        LevelSeeds { by_brick }
    }

    fn in_brick(&self, brick: [usize; 3]) -> &[([usize; 3], Option<bool>)] {
        self.by_brick.get(&brick).map_or(&[], Vec::as_slice)
    }

    /// Seeds inside the box `[lo, hi)`, in a deterministic order.
    fn in_box(&self, lo: [usize; 3], hi: [usize; 3], b: usize) -> Vec<([usize; 3], Option<bool>)> {
        let mut out = Vec::new();
        for bz in lo[2] / b..=(hi[2] - 1) / b {
            for by in lo[1] / b..=(hi[1] - 1) / b {
                for bx in lo[0] / b..=(hi[0] - 1) / b {
                    out.extend(
                        self.in_brick([bx, by, bz])
                            .iter()
                            .filter(|(p, _)| (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])),
                    );
                }
            }
        }
        out.sort();
        out
    }
}

fn seed_hash(seeds: &[([usize; 3], Option<bool>)]) -> String {
    let mut h = FNV_OFFSET;
    for (p, class) in seeds {
        for c in p {
            h = fnv1a(h, &(*c as u64).to_le_bytes());
        }
        h = fnv1a(h, &[match class {
            Some(true) => 1,
            Some(false) => 0,
            None => 2,
        }]);
    }
    format!("{h:016x}")
}

/// Normalized intensities of the box `[lo, hi)` at `level`, zyx order.
fn gather_intensity(
    octree: &BrickOctree,
    level: usize,
    lo: [usize; 3],
    hi: [usize; 3],
    range: IntensityRange,
) -> Result<Vec<f64>> {
    let b = octree.brick_size();
    let ext: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
    let mut out = vec![0.0; ext.iter().product()];
    for bz in lo[2] / b..=(hi[2] - 1) / b {
        for by in lo[1] / b..=(hi[1] - 1) / b {
            for bx in lo[0] / b..=(hi[0] - 1) / b {
                let brick = octree.fetch_brick(level, [bx, by, bz])?;
                let origin = [bx * b, by * b, bz * b];
                let blo: [usize; 3] = std::array::from_fn(|a| lo[a].max(origin[a]));
                let bhi: [usize; 3] = std::array::from_fn(|a| hi[a].min(origin[a] + b));
                for z in blo[2]..bhi[2] {
                    for y in blo[1]..bhi[1] {
                        let row = ((z - lo[2]) * ext[1] + (y - lo[1])) * ext[0];
                        for x in blo[0]..bhi[0] {
                            let v = brick.get(0, x - origin[0], y - origin[1], z - origin[2]);
                            out[row + x - lo[0]] = range.normalize(v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

struct Outcome {
    coords: [usize; 3],
    values: BrickValues,
    kind: BrickKind,
    reused: bool,
    revision: u64,
    seed_hash: String,
    inputs: Vec<f32>,
}

/// Previous result usable for reuse.
struct Previous<'a> {
    prob: &'a ProbabilityOctree,
}

impl Previous<'_> {
    fn reusable(&self, level: usize, coords: [usize; 3], seed_hash: &str, inputs: &[f32]) -> Result<Option<Outcome>> {
        let Some(entry) = self.prob.entry(level, coords) else {
            return Ok(None);
        };
        if entry.kind != BrickKind::Solved || entry.seed_hash != seed_hash || entry.inputs[1] as usize != inputs.len() {
            return Ok(None);
        }
        let original = self.prob.inputs(entry)?;
        let drift = original
            .iter()
            .zip(inputs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if drift > REUSE_TOLERANCE {
            return Ok(None);
        }
        let brick = self.prob.octree.fetch_brick(level, coords)?;
        Ok(Some(Outcome {
            coords,
            values: BrickValues::Dense(brick.to_vec(1)),
            kind: BrickKind::Solved,
            reused: true,
            revision: entry.revision,
            seed_hash: entry.seed_hash.clone(),
            inputs: original,
        }))
    }
}

/// Pads the interior `[off, off + ext)` of an `edims` box into a `b^3` brick.
fn pad_brick(values: &[f64], edims: [usize; 3], off: [usize; 3], ext: [usize; 3], b: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; b * b * b];
    for z in 0..b {
        let sz = off[2] + z.min(ext[2] - 1);
        for y in 0..b {
            let sy = off[1] + y.min(ext[1] - 1);
            let row = (sz * edims[1] + sy) * edims[0];
            for x in 0..b {
                out[(z * b + y) * b + x] = values[row + off[0] + x.min(ext[0] - 1)] as f32;
            }
        }
    }
    out
}

struct Context<'a> {
    octree: &'a BrickOctree,
    params: &'a RwParams,
    range: IntensityRange,
    revision: u64,
    prev: Option<Previous<'a>>,
}

impl Context<'_> {
    fn solve_coarse(&self, level: usize, seeds: &LevelSeeds) -> Result<Outcome> {
        let dims = self.octree.geometry().level_dims(level);
        let b = self.octree.brick_size();
        let all = seeds.in_box([0; 3], dims, b);
        let hash = seed_hash(&all);
        if let Some(prev) = &self.prev {
            if let Some(out) = prev.reusable(level, [0; 3], &hash, &[])? {
                return Ok(out);
            }
        }
        let intensity = gather_intensity(self.octree, level, [0; 3], dims, self.range)?;
        let mut fixed = vec![None; intensity.len()];
        for (p, class) in &all {
            if let Some(fg) = class {
                fixed[(p[2] * dims[1] + p[1]) * dims[0] + p[0]] = Some(if *fg { 1.0 } else { 0.0 });
            }
        }
        let sol = solver::solve(dims, &intensity, &fixed, None, self.params)?;
        Ok(Outcome {
            coords: [0; 3],
            values: BrickValues::Dense(pad_brick(&sol.values, dims, [0; 3], dims, b)),
            kind: BrickKind::Solved,
            reused: false,
            revision: self.revision,
            seed_hash: hash,
            inputs: Vec::new(),
        })
    }

    fn solve_child(&self, level: usize, coords: [usize; 3], parent: &LevelValues, seeds: &LevelSeeds) -> Result<Outcome> {
        let b = self.octree.brick_size();
        let dims = self.octree.geometry().level_dims(level);
        let lo: [usize; 3] = std::array::from_fn(|a| coords[a] * b);
        let hi: [usize; 3] = std::array::from_fn(|a| ((coords[a] + 1) * b).min(dims[a]));

        if seeds.in_box(lo, hi, b).is_empty() {
            if let Some(v) = homogeneous(parent, lo, hi, self.params) {
                return Ok(Outcome {
                    coords,
                    values: BrickValues::Constant(v),
                    kind: BrickKind::Pruned,
                    reused: false,
                    revision: self.revision,
                    seed_hash: seed_hash(&[]),
                    inputs: Vec::new(),
                });
            }
        }

        let elo: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(1));
        let ehi: [usize; 3] = std::array::from_fn(|a| (hi[a] + 1).min(dims[a]));
        let edims: [usize; 3] = std::array::from_fn(|a| ehi[a] - elo[a]);
        let local = seeds.in_box(elo, ehi, b);
        let hash = seed_hash(&local);

        let intensity = gather_intensity(self.octree, level, elo, ehi, self.range)?;
        let plo: [usize; 3] = std::array::from_fn(|a| (elo[a] / 2).saturating_sub(1));
        let phi: [usize; 3] = std::array::from_fn(|a| (ehi[a].div_ceil(2) + 1).min(parent.dims[a]));
        let pdims: [usize; 3] = std::array::from_fn(|a| phi[a] - plo[a]);
        let coarse = gather_intensity(self.octree, level + 1, plo, phi, self.range)?;

        let n: usize = edims.iter().product();
        let mut guess = vec![0.0f64; n];
        let mut fixed: Vec<Option<f64>> = vec![None; n];
        let mut inputs = Vec::new();
        for z in elo[2]..ehi[2] {
            for y in elo[1]..ehi[1] {
                for x in elo[0]..ehi[0] {
                    let i = ((z - elo[2]) * edims[1] + (y - elo[1])) * edims[0] + (x - elo[0]);
                    let q = [x, y, z].map(|c| c as f64 / 2.0 - 0.25);
                    let guide = Guide {
                        beta: self.params.beta,
                        fine: intensity[i],
                        lo: plo,
                        dims: pdims,
                        coarse: &coarse,
                    };
                    let v = parent.sample(q, &guide);
                    guess[i] = v as f64;
                    let inside = x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
                    if !inside {
                        fixed[i] = Some(v as f64);
                        inputs.push(v);
                    }
                }
            }
        }
        for (p, class) in &local {
            if let Some(fg) = class {
                let i = ((p[2] - elo[2]) * edims[1] + (p[1] - elo[1])) * edims[0] + (p[0] - elo[0]);
                fixed[i] = Some(if *fg { 1.0 } else { 0.0 });
            }
        }

        if let Some(prev) = &self.prev {
            if let Some(out) = prev.reusable(level, coords, &hash, &inputs)? {
                return Ok(out);
            }
        }
        let sol = solver::solve(edims, &intensity, &fixed, Some(&guess), self.params)?;
        let off: [usize; 3] = std::array::from_fn(|a| lo[a] - elo[a]);
        let ext: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
        Ok(Outcome {
            coords,
            values: BrickValues::Dense(pad_brick(&sol.values, edims, off, ext, b)),
            kind: BrickKind::Solved,
            reused: false,
            revision: self.revision,
            seed_hash: hash,
            inputs,
        })
    }
}

/// Mean of the parent region under `[lo, hi)` when every value there is
/// below `theta_low` or every value is above `theta_high`.
fn homogeneous(parent: &LevelValues, lo: [usize; 3], hi: [usize; 3], params: &RwParams) -> Option<f32> {
    let plo = lo.map(|c| c / 2);
    let phi = hi.map(|c| c.div_ceil(2));
    let (mut min, mut max, mut sum, mut n) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0usize);
    for z in plo[2]..phi[2] {
        for y in plo[1]..phi[1] {
            for x in plo[0]..phi[0] {
                let v = parent.at([x, y, z]);
                min = min.min(v);
                max = max.max(v);
                sum += v as f64;
                n += 1;
            }
        }
    }
    let low = (max as f64) < params.theta_low;
    let high = (min as f64) > params.theta_high;
    (low || high).then(|| (sum / n as f64) as f32)
}

/// Node bookkeeping for the output octree; nodes are numbered at the end,
/// finest level first.
struct PendingNode {
    min: f32,
    max: f32,
    /// Byte offset of the own brick, or the fill value of a constant brick.
    brick: Result<u64, f32>,
}

struct ProbWriter {
    staging: PathBuf,
    bricks: BufWriter<File>,
    written: u64,
    inputs: BufWriter<File>,
    inputs_written: u64,
    levels: Vec<HashMap<[usize; 3], PendingNode>>,
    entries: Vec<BrickEntry>,
    b: usize,
}

impl ProbWriter {
    fn create(staging: PathBuf, level_count: usize, b: usize) -> Result<Self> {
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(ProbWriter {
            bricks: BufWriter::new(File::create(staging.join(BRICKS_FILE))?),
            inputs: BufWriter::new(File::create(staging.join(INPUTS_FILE))?),
            staging,
            written: 0,
            inputs_written: 0,
            levels: (0..level_count).map(|_| HashMap::new()).collect(),
            entries: Vec::new(),
            b,
        })
    }

    fn write_brick(&mut self, data: &[f32]) -> Result<u64> {
        let off = self.written;
        let bytes: &[u8] = bytemuck::cast_slice(data);
        self.bricks.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(off)
    }

    fn push(&mut self, level: usize, ext: [usize; 3], out: &Outcome) -> Result<()> {
        let b = self.b;
        let (min, max, brick) = match &out.values {
            BrickValues::Constant(v) => (*v, *v, Err(*v)),
            BrickValues::Dense(d) => {
                let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
                for z in 0..ext[2] {
                    for y in 0..ext[1] {
                        for &v in &d[(z * b + y) * b..(z * b + y) * b + ext[0]] {
                            min = min.min(v);
                            max = max.max(v);
                        }
                    }
                }
                let brick = if min == max { Err(min) } else { Ok(self.write_brick(d)?) };
                (min, max, brick)
            }
        };
        let offset = self.inputs_written;
        for v in &out.inputs {
            self.inputs.write_all(&v.to_le_bytes())?;
        }
        self.inputs_written += out.inputs.len() as u64;
        self.entries.push(BrickEntry {
            level,
            coords: out.coords,
            kind: out.kind,
            revision: out.revision,
            seed_hash: out.seed_hash.clone(),
            inputs: [offset, out.inputs.len() as u64],
        });
        self.levels[level].insert(out.coords, PendingNode { min, max, brick });
        Ok(())
    }

    fn finish(mut self, geometry: &OctreeGeometry, mut meta: OctreeMeta, sidecar: HrwSidecar) -> Result<PathBuf> {
        let b = self.b;
        let mut index: HashMap<(usize, [usize; 3]), (u32, f32, f32)> = HashMap::new();
        let mut nodes = BufWriter::new(File::create(self.staging.join(NODES_FILE))?);
        let mut encoded = Vec::new();
        let mut count = 0u32;
        for level in 0..self.levels.len() {
            let bricks = geometry.level_bricks(level);
            for bz in 0..bricks[2] {
                for by in 0..bricks[1] {
                    for bx in 0..bricks[0] {
                        let coords = [bx, by, bz];
                        let node = self.levels[level].remove(&coords).ok_or_else(|| {
                            Error::Protocol(format!("brick {coords:?} of level {level} was not produced"))
                        })?;
                        let (mut min, mut max) = (node.min, node.max);
                        let mut children = [ABSENT_CHILD; 8];
                        if level > 0 {
                            for (d, child) in children.iter_mut().enumerate() {
                                let cc = [
                                    2 * bx + (d & 1),
                                    2 * by + ((d >> 1) & 1),
                                    2 * bz + ((d >> 2) & 1),
                                ];
                                if let Some(&(idx, cmin, cmax)) = index.get(&(level - 1, cc)) {
                                    *child = idx;
                                    min = min.min(cmin);
                                    max = max.max(cmax);
                                }
                            }
                        }
                        let brick_offset = match node.brick {
                            Ok(off) => off,
                            Err(_) if min == max => CONSTANT_BRICK,
                            Err(fill) => self.write_brick(&vec![fill; b * b * b])?,
                        };
                        let record = NodeRecord {
                            children,
                            brick_offset,
                            min: vec![min],
                            max: vec![max],
                            constant: min,
                        };
                        encoded.clear();
                        record.encode(&mut encoded);
                        nodes.write_all(&encoded)?;
                        index.insert((level, coords), (count, min, max));
                        count += 1;
                    }
                }
            }
        }
        nodes.flush()?;
        self.bricks.flush()?;
        self.inputs.flush()?;
        meta.node_count = count as u64;
        meta.root = count - 1;
        fs::write(self.staging.join(OCTREE_FILE), serde_json::to_vec_pretty(&meta)?)?;
        let sidecar = HrwSidecar {
            bricks: std::mem::take(&mut self.entries),
            ..sidecar
        };
        fs::write(self.staging.join(SIDECAR_FILE), serde_json::to_vec(&sidecar)?)?;
        Ok(self.staging)
    }
}

/// Computes the probability octree for `labels` into `out`, reusing bricks
/// of `prev` where their inputs are unchanged. `out` must differ from the
/// directory of `prev`, which stays readable throughout.
pub fn hrw_update(
    octree: &BrickOctree,
    prev: Option<&ProbabilityOctree>,
    labels: &LabelSet,
    params: &RwParams,
    out: impl AsRef<Path>,
    job: &JobControl,
) -> Result<(ProbabilityOctree, HrwReport)> {
    params.validate()?;
    if octree.channels() != 1 {
        return Err(Error::ChannelMismatch("random walker expects one channel".into()));
    }
    let geometry = *octree.geometry();
    labels.validate(geometry.level_dims(0))?;
    let out = out.as_ref().to_path_buf();
    if prev.is_some_and(|p| p.dir() == out) {
        return Err(Error::Config("output directory must differ from the previous result".into()));
    }
    let b = octree.brick_size();
    let levels = octree.level_count();
    let root = octree.root();
    let range = IntensityRange {
        min: root.min[0] as f64,
        max: root.max[0] as f64,
    };
    let source_hash = octree.meta().source_hash.clone();
    let prev = prev
        .filter(|p| {
            p.sidecar.params == *params
                && p.sidecar.source_hash == source_hash
                && p.octree.brick_size() == b
                && p.octree.level_count() == levels
        })
        .map(|prob| Previous { prob });
    let ctx = Context {
        octree,
        params,
        range,
        revision: labels.revision,
        prev,
    };

    let staging = PathBuf::from(format!("{}.partial", out.display()));
    let mut writer = ProbWriter::create(staging, levels, b)?;
    let mut report = HrwReport {
        total: (0..levels).map(|l| geometry.level_bricks(l).iter().product::<usize>()).sum(),
        ..HrwReport::default()
    };
    let mut done = 0usize;
    let mut parent: Option<LevelValues> = None;
    for level in (0..levels).rev() {
        job.check()?;
        let seeds = LevelSeeds::new(labels, level, b);
        let dims = geometry.level_dims(level);
        let outcomes: Vec<Outcome> = match &parent {
            None => vec![ctx.solve_coarse(level, &seeds)?],
            Some(parent) => {
                let bricks = geometry.level_bricks(level);
                let coords: Vec<[usize; 3]> = (0..bricks[2])
                    .flat_map(|z| (0..bricks[1]).flat_map(move |y| (0..bricks[0]).map(move |x| [x, y, z])))
                    .collect();
                coords
                    .into_par_iter()
                    .map(|c| {
                        job.check()?;
                        ctx.solve_child(level, c, parent, &seeds)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut values = HashMap::with_capacity(outcomes.len());
        for o in outcomes {
            let ext: [usize; 3] = std::array::from_fn(|a| (dims[a] - o.coords[a] * b).min(b));
            writer.push(level, ext, &o)?;
            match (o.kind, o.reused) {
                (BrickKind::Pruned, _) => report.pruned += 1,
                (BrickKind::Solved, true) => report.reused += 1,
                (BrickKind::Solved, false) => report.solved += 1,
            }
            done += 1;
            values.insert(o.coords, o.values);
        }
        job.set_progress(done as f64 / report.total as f64);
        parent = Some(LevelValues { dims, b, bricks: values });
    }

    let mut volume = octree.volume_meta().clone();
    volume.dtype = DType::F32;
    volume.channels = 1;
    volume.value_range = None;
    let meta = OctreeMeta {
        brick_size: b,
        level_count: levels,
        node_count: 0,
        node_limit: NODE_LIMIT,
        source_hash: source_hash.clone(),
        channels: 1,
        dtype: DType::F32,
        root: 0,
        volume,
    };
    let sidecar = HrwSidecar {
        revision: labels.revision,
        source_hash,
        params: params.clone(),
        bricks: Vec::new(),
    };
    let staging = writer.finish(&geometry, meta, sidecar)?;
    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    fs::rename(&staging, &out)?;
    let budget = octree.budget().max(b * b * b * 4);
    Ok((ProbabilityOctree::open(&out, budget)?, report))
}
