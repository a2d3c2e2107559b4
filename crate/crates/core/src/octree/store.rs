use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{NodeRecord, OctreeGeometry, OctreeMeta, ABSENT_CHILD, BRICKS_FILE, NODES_FILE, OCTREE_FILE};
use crate::cache::ByteLru;
use crate::error::{Error, Result};
use crate::volume::{Slice, SliceVolume, SliceWriter, VolumeMeta};

/// Voxel block of one node. Constant nodes are synthesized without I/O.
#[derive(Clone, Debug, PartialEq)]
pub enum Brick {
    Constant { size: usize, values: Vec<f32> },
    Voxels { size: usize, channels: usize, data: Vec<f32> },
}

impl Brick {
    pub fn size(&self) -> usize {
        match self {
            Brick::Constant { size, .. } | Brick::Voxels { size, .. } => *size,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Brick::Constant { .. })
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        match self {
            Brick::Constant { values, .. } => values[c],
            Brick::Voxels { size, data, .. } => data[((c * size + z) * size + y) * size + x],
        }
    }

    /// Dense channel-planar copy of the block.
    pub fn to_vec(&self, channels: usize) -> Vec<f32> {
        match self {
            Brick::Voxels { data, .. } => data.clone(),
            Brick::Constant { size, values } => {
                let n = size * size * size;
                (0..channels).flat_map(|c| std::iter::repeat_n(values[c], n)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OctreeStats {
    pub disk_reads: u64,
    pub fetches: u64,
    /// Distinct non-constant bricks touched since the last reset.
    pub distinct_payload_bricks: u64,
    pub distinct_payload_bytes: u64,
}

type BrickKey = (usize, [usize; 3]);

pub struct BrickOctree {
    dir: PathBuf,
    meta: OctreeMeta,
    geometry: OctreeGeometry,
    nodes: Vec<NodeRecord>,
    index: HashMap<BrickKey, u32>,
    bricks: File,
    cache: Mutex<ByteLru<u32, Brick>>,
    disk_reads: AtomicU64,
    fetches: AtomicU64,
    touched: Mutex<HashSet<u32>>,
}

impl std::fmt::Debug for BrickOctree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrickOctree")
            .field("dir", &self.dir)
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}

impl BrickOctree {
    /// Opens a built octree. `budget` bounds the resident brick bytes and
    /// must hold at least one brick.
    pub fn open(dir: impl AsRef<Path>, budget: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let meta: OctreeMeta = serde_json::from_slice(&fs::read(dir.join(OCTREE_FILE)).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(dir.join(OCTREE_FILE))
            } else {
                e.into()
            }
        })?)?;
        let geometry = OctreeGeometry::new(meta.volume.dimensions, meta.brick_size);
        let brick_bytes = meta.brick_size.pow(3) * meta.channels * 4;
        if budget < brick_bytes {
            return Err(Error::Config(format!(
                "brick cache budget {budget} B is smaller than one brick ({brick_bytes} B)"
            )));
        }
        let raw = fs::read(dir.join(NODES_FILE))?;
        let rec = NodeRecord::record_size(meta.channels);
        if raw.len() as u64 != meta.node_count * rec as u64 {
            return Err(Error::SizeMismatch {
                expected: meta.node_count * rec as u64,
                found: raw.len() as u64,
            });
        }
        let nodes: Vec<NodeRecord> = raw.chunks_exact(rec).map(|b| NodeRecord::decode(b, meta.channels)).collect();

        let mut index = HashMap::with_capacity(nodes.len());
        let mut stack = vec![(meta.root, meta.level_count - 1, [0usize; 3])];
        while let Some((idx, level, coord)) = stack.pop() {
            index.insert((level, coord), idx);
            if level == 0 {
                continue;
            }
            for (d, &child) in nodes[idx as usize].children.iter().enumerate() {
                if child != ABSENT_CHILD {
                    let cc = [
                        2 * coord[0] + (d & 1),
                        2 * coord[1] + ((d >> 1) & 1),
                        2 * coord[2] + ((d >> 2) & 1),
                    ];
                    stack.push((child, level - 1, cc));
                }
            }
        }
        if index.len() != nodes.len() {
            return Err(Error::MalformedMeta(format!(
                "octree reaches {} of {} nodes",
                index.len(),
                nodes.len()
            )));
        }
        Ok(BrickOctree {
            bricks: File::open(dir.join(BRICKS_FILE))?,
            dir,
            geometry,
            nodes,
            index,
            cache: Mutex::new(ByteLru::new(budget)),
            disk_reads: AtomicU64::new(0),
            fetches: AtomicU64::new(0),
            touched: Mutex::new(HashSet::new()),
            meta,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &OctreeMeta {
        &self.meta
    }

    pub fn volume_meta(&self) -> &VolumeMeta {
        &self.meta.volume
    }

    pub fn geometry(&self) -> &OctreeGeometry {
        &self.geometry
    }

    pub fn brick_size(&self) -> usize {
        self.meta.brick_size
    }

    pub fn level_count(&self) -> usize {
        self.meta.level_count
    }

    pub fn channels(&self) -> usize {
        self.meta.channels
    }

    /// In-memory bytes of one brick, the unit of the cache budget.
    pub fn brick_bytes(&self) -> usize {
        self.meta.brick_size.pow(3) * self.meta.channels * 4
    }

    pub fn budget(&self) -> usize {
        self.cache.lock().unwrap().budget()
    }

    pub fn resident_bytes(&self) -> usize {
        self.cache.lock().unwrap().resident_bytes()
    }

    pub fn node(&self, level: usize, coords: [usize; 3]) -> Option<&NodeRecord> {
        self.index.get(&(level, coords)).map(|&i| &self.nodes[i as usize])
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn root(&self) -> &NodeRecord {
        &self.nodes[self.meta.root as usize]
    }

    /// Iterates `(level, coords, record)` for every node.
    pub fn iter_nodes(&self) -> impl Iterator<Item = (usize, [usize; 3], &NodeRecord)> {
        self.index.iter().map(|(&(l, c), &i)| (l, c, &self.nodes[i as usize]))
    }

    pub fn stats(&self) -> OctreeStats {
        let touched = self.touched.lock().unwrap();
        let payload = touched.len() as u64;
        OctreeStats {
            disk_reads: self.disk_reads.load(Ordering::Relaxed),
            fetches: self.fetches.load(Ordering::Relaxed),
            distinct_payload_bricks: payload,
            distinct_payload_bytes: payload * self.brick_bytes() as u64,
        }
    }

    pub fn reset_stats(&self) {
        self.disk_reads.store(0, Ordering::Relaxed);
        self.fetches.store(0, Ordering::Relaxed);
        self.touched.lock().unwrap().clear();
    }

    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().clear();
    }

    pub fn fetch_brick(&self, level: usize, coords: [usize; 3]) -> Result<Arc<Brick>> {
        let idx = *self.index.get(&(level, coords)).ok_or_else(|| {
            Error::OutOfRange(format!("no brick {coords:?} at level {level}"))
        })?;
        self.fetches.fetch_add(1, Ordering::Relaxed);
        let record = &self.nodes[idx as usize];
        let b = self.meta.brick_size;
        if record.is_constant() {
            return Ok(Arc::new(Brick::Constant {
                size: b,
                values: record.min.clone(),
            }));
        }
        self.touched.lock().unwrap().insert(idx);
        if let Some(hit) = self.cache.lock().unwrap().get(&idx) {
            return Ok(hit);
        }
        let channels = self.meta.channels;
        let dtype = self.meta.dtype;
        let n = b * b * b * channels;
        let mut raw = vec![0u8; n * dtype.size()];
        self.bricks.read_exact_at(&mut raw, record.brick_offset)?;
        self.disk_reads.fetch_add(1, Ordering::Relaxed);
        let mut data = vec![0.0f32; n];
        dtype.decode(&raw, &mut data);
        let brick = Arc::new(Brick::Voxels { size: b, channels, data });
        let bytes = self.brick_bytes();
        let mut cache = self.cache.lock().unwrap();
        let out = cache.insert(idx, brick, bytes);
        debug_assert!(cache.resident_bytes() <= cache.budget());
        Ok(out)
    }

    /// Voxel lookup at a level, clamped to the level grid.
    pub fn voxel(&self, level: usize, c: usize, p: [isize; 3]) -> Result<f32> {
        let dims = self.geometry.level_dims(level);
        let b = self.meta.brick_size;
        let q: [usize; 3] = std::array::from_fn(|a| p[a].clamp(0, dims[a] as isize - 1) as usize);
        let brick = self.fetch_brick(level, [q[0] / b, q[1] / b, q[2] / b])?;
        Ok(brick.get(c, q[0] % b, q[1] % b, q[2] % b))
    }

    /// Streams level `level` back into a native volume (padding stripped).
    pub fn reconstruct_level(&self, level: usize, out: impl AsRef<Path>) -> Result<SliceVolume> {
        if level >= self.meta.level_count {
            return Err(Error::OutOfRange(format!("level {level}")));
        }
        let dims = self.geometry.level_dims(level);
        let bricks = self.geometry.level_bricks(level);
        let b = self.meta.brick_size;
        let channels = self.meta.channels;
        let mut meta = self.meta.volume.clone();
        meta.dimensions = dims;
        let scale = (1u64 << level) as f64;
        for a in 0..3 {
            meta.spacing[a] *= scale;
            meta.offset[a] += 0.5 * (scale - 1.0) * self.meta.volume.spacing[a];
        }
        meta.value_range = None;
        let mut writer = SliceWriter::create(meta, out)?;
        for bz in 0..bricks[2] {
            let row: Vec<Vec<Arc<Brick>>> = (0..bricks[1])
                .map(|by| (0..bricks[0]).map(|bx| self.fetch_brick(level, [bx, by, bz])).collect())
                .collect::<Result<_>>()?;
            for z in 0..b.min(dims[2] - bz * b) {
                let mut slice = Slice::zeros(dims[0], dims[1], channels);
                for c in 0..channels {
                    let plane = slice.channel_mut(c);
                    for y in 0..dims[1] {
                        let (by, ly) = (y / b, y % b);
                        for x in 0..dims[0] {
                            plane[y * dims[0] + x] = row[by][x / b].get(c, x % b, ly, z);
                        }
                    }
                }
                writer.push(&slice)?;
            }
        }
        writer.finish()
    }

    pub fn reconstruct_level0(&self, out: impl AsRef<Path>) -> Result<SliceVolume> {
        self.reconstruct_level(0, out)
    }
}
