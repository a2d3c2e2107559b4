use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    validate_brick_size, BrickOctree, NodeRecord, OctreeGeometry, OctreeMeta, ABSENT_CHILD, BRICKS_FILE,
    CONSTANT_BRICK, NODES_FILE, NODE_LIMIT, OCTREE_FILE,
};
use crate::error::{Error, Result};
use crate::volume::{DType, Slice, SliceVolume, VolumeMeta};

pub(crate) const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub(crate) fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// 64-bit FNV-1a over the metadata (without the lazily filled value range),
/// the payload length and the raw bytes of the first and last slice.
pub fn source_hash(volume: &SliceVolume) -> Result<u64> {
    let mut meta = volume.meta().clone();
    meta.value_range = None;
    let mut hash = fnv1a(FNV_OFFSET, &serde_json::to_vec(&meta)?);
    hash = fnv1a(hash, &meta.payload_bytes().to_le_bytes());
    let slice_bytes = meta.slice_len() * meta.dtype.size();
    let mut file = File::open(volume.data_path())?;
    let mut buf = vec![0u8; slice_bytes];
    for z in [0, meta.nz() - 1] {
        file.seek(SeekFrom::Start((z * slice_bytes) as u64))?;
        file.read_exact(&mut buf)?;
        hash = fnv1a(hash, &buf);
    }
    Ok(hash)
}

/// Builds (or reuses) the cached octree for `volume` under `cache_root` and
/// opens it with a brick-cache budget of `budget` bytes.
pub fn build_octree(
    volume: &SliceVolume,
    brick_size: usize,
    cache_root: impl AsRef<Path>,
    budget: usize,
) -> Result<BrickOctree> {
    validate_brick_size(brick_size)?;
    OctreeGeometry::new(volume.meta().dimensions, brick_size).check_node_limit()?;
    let hash = source_hash(volume)?;
    let dir = cache_root.as_ref().join(format!("{hash:016x}-b{brick_size}"));
    if dir.join(OCTREE_FILE).exists() {
        if let Ok(octree) = BrickOctree::open(&dir, budget) {
            return Ok(octree);
        }
        fs::remove_dir_all(&dir)?;
    }
    let staging = PathBuf::from(format!("{}.partial", dir.display()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    build_octree_uncached(volume, brick_size, &staging)?;
    fs::rename(&staging, &dir)?;
    BrickOctree::open(&dir, budget)
}

/// Single sequential pass over `volume` writing the octree files into `out`.
pub fn build_octree_uncached(volume: &SliceVolume, brick_size: usize, out: impl AsRef<Path>) -> Result<OctreeMeta> {
    let hash = source_hash(volume)?;
    let mut builder = OctreeBuilder::new(volume.meta().clone(), brick_size, format!("{hash:016x}"), out)?;
    for slice in volume.reader()? {
        builder.push(&slice?)?;
    }
    builder.finish()
}

struct LevelState {
    dims: [usize; 3],
    bricks: [usize; 3],
    slab: Vec<f32>,
    slab_index: usize,
    filled: usize,
    received: usize,
    carry: Option<Slice>,
}

/// Streaming octree construction: keeps one slab of `brick_size` slices per
/// level and emits bricks as slabs complete, finest level first.
pub struct OctreeBuilder {
    meta: VolumeMeta,
    geometry: OctreeGeometry,
    brick: usize,
    levels: Vec<LevelState>,
    nodes: BufWriter<File>,
    bricks: BufWriter<File>,
    brick_bytes_written: u64,
    node_count: u32,
    pending: HashMap<(usize, [usize; 3]), (u32, Vec<f32>, Vec<f32>)>,
    source_hash: String,
    out: PathBuf,
}

impl OctreeBuilder {
    pub fn new(meta: VolumeMeta, brick_size: usize, source_hash: String, out: impl AsRef<Path>) -> Result<Self> {
        validate_brick_size(brick_size)?;
        meta.validate()?;
        let geometry = OctreeGeometry::new(meta.dimensions, brick_size);
        geometry.check_node_limit()?;
        let out = out.as_ref().to_path_buf();
        fs::create_dir_all(&out)?;
        let level_count = geometry.level_count();
        let levels = (0..level_count)
            .map(|l| {
                let dims = geometry.level_dims(l);
                LevelState {
                    dims,
                    bricks: geometry.level_bricks(l),
                    slab: vec![0.0; meta.channels * brick_size * dims[0] * dims[1]],
                    slab_index: 0,
                    filled: 0,
                    received: 0,
                    carry: None,
                }
            })
            .collect();
        Ok(OctreeBuilder {
            nodes: BufWriter::new(File::create(out.join(NODES_FILE))?),
            bricks: BufWriter::new(File::create(out.join(BRICKS_FILE))?),
            meta,
            geometry,
            brick: brick_size,
            levels,
            brick_bytes_written: 0,
            node_count: 0,
            pending: HashMap::new(),
            source_hash,
            out,
        })
    }

    pub fn push(&mut self, slice: &Slice) -> Result<()> {
        if slice.nx != self.meta.nx() || slice.ny != self.meta.ny() || slice.channels != self.meta.channels {
            return Err(Error::ShapeMismatch("slice does not match octree source".into()));
        }
        self.push_level(0, slice)
    }

    fn push_level(&mut self, level: usize, slice: &Slice) -> Result<()> {
        let b = self.brick;
        let channels = self.meta.channels;
        {
            let st = &mut self.levels[level];
            if st.received >= st.dims[2] {
                return Err(Error::Protocol(format!("too many slices for level {level}")));
            }
            let plane = st.dims[0] * st.dims[1];
            for c in 0..channels {
                let dst = (c * b + st.filled) * plane;
                st.slab[dst..dst + plane].copy_from_slice(slice.channel(c));
            }
            st.filled += 1;
            st.received += 1;
        }
        let (full, last) = {
            let st = &self.levels[level];
            (st.filled == b, st.received == st.dims[2])
        };
        if full || last {
            self.emit_slab(level)?;
        }
        if level + 1 < self.levels.len() {
            let dtype = self.meta.dtype;
            let carry = self.levels[level].carry.take();
            match carry {
                None => {
                    if last {
                        let parent = downsample(slice, slice, dtype);
                        self.push_level(level + 1, &parent)?;
                    } else {
                        self.levels[level].carry = Some(slice.clone());
                    }
                }
                Some(prev) => {
                    let parent = downsample(&prev, slice, dtype);
                    self.push_level(level + 1, &parent)?;
                }
            }
        }
        Ok(())
    }

    fn emit_slab(&mut self, level: usize) -> Result<()> {
        let b = self.brick;
        let channels = self.meta.channels;
        let dtype = self.meta.dtype;
        let st = &self.levels[level];
        let [nx, ny, _] = st.dims;
        let bz = st.slab_index;
        let filled = st.filled;
        let plane = nx * ny;
        let slab = &st.slab;
        let coords: Vec<[usize; 3]> = (0..st.bricks[1])
            .flat_map(|by| (0..st.bricks[0]).map(move |bx| [bx, by, bz]))
            .collect();

        let extracted: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = coords
            .par_iter()
            .map(|&[bx, by, _]| {
                let mut data = vec![0.0f32; channels * b * b * b];
                let mut min = vec![f32::INFINITY; channels];
                let mut max = vec![f32::NEG_INFINITY; channels];
                for c in 0..channels {
                    for z in 0..b {
                        let real_z = z < filled;
                        let slot = z.min(filled - 1);
                        for y in 0..b {
                            let gy = by * b + y;
                            let real_y = gy < ny;
                            let sy = gy.min(ny - 1);
                            let row = (c * b + slot) * plane + sy * nx;
                            for x in 0..b {
                                let gx = bx * b + x;
                                let v = slab[row + gx.min(nx - 1)];
                                data[((c * b + z) * b + y) * b + x] = v;
                                if real_z && real_y && gx < nx {
                                    min[c] = min[c].min(v);
                                    max[c] = max[c].max(v);
                                }
                            }
                        }
                    }
                }
                (data, min, max)
            })
            .collect();

        let mut encoded = Vec::new();
        for (coord, (data, own_min, own_max)) in coords.into_iter().zip(extracted) {
            let mut children = [ABSENT_CHILD; 8];
            let (min, max) = if level == 0 {
                (own_min, own_max)
            } else {
                let child_bricks = self.levels[level - 1].bricks;
                let mut min = vec![f32::INFINITY; channels];
                let mut max = vec![f32::NEG_INFINITY; channels];
                for (d, child) in children.iter_mut().enumerate() {
                    let cc = [
                        2 * coord[0] + (d & 1),
                        2 * coord[1] + ((d >> 1) & 1),
                        2 * coord[2] + ((d >> 2) & 1),
                    ];
                    if cc.iter().zip(child_bricks).any(|(&c, n)| c >= n) {
                        continue;
                    }
                    let (idx, cmin, cmax) = self
                        .pending
                        .remove(&(level - 1, cc))
                        .ok_or_else(|| Error::Protocol(format!("child {cc:?} of level {level} not emitted")))?;
                    *child = idx;
                    for c in 0..channels {
                        min[c] = min[c].min(cmin[c]);
                        max[c] = max[c].max(cmax[c]);
                    }
                }
                (min, max)
            };
            let constant = min.iter().zip(&max).all(|(a, b)| a == b);
            let brick_offset = if constant {
                CONSTANT_BRICK
            } else {
                dtype.encode(&data, &mut encoded);
                self.bricks.write_all(&encoded)?;
                let off = self.brick_bytes_written;
                self.brick_bytes_written += encoded.len() as u64;
                off
            };
            let record = NodeRecord {
                children,
                brick_offset,
                constant: min[0],
                min: min.clone(),
                max: max.clone(),
            };
            encoded.clear();
            record.encode(&mut encoded);
            self.nodes.write_all(&encoded)?;
            let idx = self.node_count;
            self.node_count += 1;
            self.pending.insert((level, coord), (idx, min, max));
        }
        let st = &mut self.levels[level];
        st.slab_index += 1;
        st.filled = 0;
        Ok(())
    }

    pub fn finish(mut self) -> Result<OctreeMeta> {
        for (l, st) in self.levels.iter().enumerate() {
            if st.received != st.dims[2] {
                return Err(Error::Protocol(format!(
                    "level {l} received {} of {} slices",
                    st.received, st.dims[2]
                )));
            }
        }
        self.nodes.flush()?;
        self.bricks.flush()?;
        let top = self.levels.len() - 1;
        let (root, _, _) = self
            .pending
            .remove(&(top, [0, 0, 0]))
            .ok_or_else(|| Error::Protocol("root node missing".into()))?;
        debug_assert_eq!(self.node_count as u64, self.geometry.projected_node_count());
        let meta = OctreeMeta {
            brick_size: self.brick,
            level_count: self.levels.len(),
            node_count: self.node_count as u64,
            node_limit: NODE_LIMIT,
            source_hash: self.source_hash.clone(),
            channels: self.meta.channels,
            dtype: self.meta.dtype,
            root,
            volume: self.meta.clone(),
        };
        fs::write(self.out.join(OCTREE_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }
}

/// One parent slice from two child slices: 2x2x2 mean with clamp-to-edge,
/// rounded half up for integer dtypes.
pub(crate) fn downsample(a: &Slice, b: &Slice, dtype: DType) -> Slice {
    let (nx, ny) = (a.nx, a.ny);
    let px = nx.div_ceil(2);
    let py = ny.div_ceil(2);
    let mut out = Slice::zeros(px, py, a.channels);
    for c in 0..a.channels {
        let (ca, cb) = (a.channel(c), b.channel(c));
        let dst = out.channel_mut(c);
        for y in 0..py {
            let y0 = 2 * y;
            let y1 = (2 * y + 1).min(ny - 1);
            for x in 0..px {
                let x0 = 2 * x;
                let x1 = (2 * x + 1).min(nx - 1);
                let mut sum = 0.0f64;
                for src in [ca, cb] {
                    sum += src[y0 * nx + x0] as f64
                        + src[y0 * nx + x1] as f64
                        + src[y1 * nx + x0] as f64
                        + src[y1 * nx + x1] as f64;
                }
                dst[y * px + x] = dtype.quantize((sum / 8.0) as f32);
            }
        }
    }
    out
}
