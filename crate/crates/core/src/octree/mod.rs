//! Multi-resolution brick octree built from a slice-streamable volume.
//!
//! Level 0 is full resolution; level `l` has `ceil(dim / 2^l)` voxels per
//! axis and the coarsest level fits in a single brick. Every node stores a
//! per-channel `(min, max)` over the real (unpadded) voxels beneath it; nodes
//! with `min == max` in every channel carry no payload.
//!
//! On disk: `octree.json`, `nodes.bin` (fixed-width little-endian records)
//! and `bricks.bin` (uncompressed native-dtype bricks, channel-planar).

mod build;
mod store;

use serde::{Deserialize, Serialize};

pub use build::{build_octree, build_octree_uncached, source_hash, OctreeBuilder};
pub(crate) use build::{fnv1a, FNV_OFFSET};
pub use store::{Brick, BrickOctree, OctreeStats};

use crate::error::{Error, Result};
use crate::volume::{DType, VolumeMeta};

/// Nodes are addressed with 25 bits by the raycaster this format mirrors.
pub const NODE_LIMIT: u64 = 1 << 25;
pub const ABSENT_CHILD: u32 = u32::MAX;
pub const CONSTANT_BRICK: u64 = u64::MAX;

pub const OCTREE_FILE: &str = "octree.json";
pub const NODES_FILE: &str = "nodes.bin";
pub const BRICKS_FILE: &str = "bricks.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreeMeta {
    pub brick_size: usize,
    pub level_count: usize,
    pub node_count: u64,
    pub node_limit: u64,
    pub source_hash: String,
    pub channels: usize,
    pub dtype: DType,
    pub root: u32,
    /// Metadata of the level-0 volume.
    pub volume: VolumeMeta,
}

/// Level/brick arithmetic shared by build, fetch and the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OctreeGeometry {
    pub dims: [u64; 3],
    pub brick_size: u64,
}

impl OctreeGeometry {
    pub fn new(dims: [usize; 3], brick_size: usize) -> Self {
        OctreeGeometry {
            dims: dims.map(|d| d as u64),
            brick_size: brick_size as u64,
        }
    }

    pub fn level_dims(&self, level: usize) -> [usize; 3] {
        self.dims.map(|d| d.div_ceil(1u64 << level) as usize)
    }

    pub fn level_bricks(&self, level: usize) -> [usize; 3] {
        self.dims
            .map(|d| d.div_ceil(1u64 << level).div_ceil(self.brick_size) as usize)
    }

    pub fn level_count(&self) -> usize {
        let mut level = 0;
        while self.dims.iter().any(|&d| d.div_ceil(1u64 << level) > self.brick_size) {
            level += 1;
        }
        level + 1
    }

    pub fn projected_node_count(&self) -> u64 {
        (0..self.level_count())
            .map(|l| {
                self.dims
                    .iter()
                    .map(|&d| d.div_ceil(1u64 << l).div_ceil(self.brick_size))
                    .product::<u64>()
            })
            .sum()
    }

    pub fn check_node_limit(&self) -> Result<u64> {
        let projected = self.projected_node_count();
        if projected >= NODE_LIMIT {
            return Err(Error::NodeLimitExceeded {
                projected,
                limit: NODE_LIMIT,
            });
        }
        Ok(projected)
    }
}

pub fn validate_brick_size(brick_size: usize) -> Result<()> {
    if matches!(brick_size, 16 | 32 | 64) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "brick size must be 16, 32 or 64, got {brick_size}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub children: [u32; 8],
    pub brick_offset: u64,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub constant: f32,
}

impl NodeRecord {
    pub fn record_size(channels: usize) -> usize {
        8 * 4 + 8 + channels * 8 + 4
    }

    pub fn is_constant(&self) -> bool {
        self.brick_offset == CONSTANT_BRICK
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        for c in self.children {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.brick_offset.to_le_bytes());
        for (lo, hi) in self.min.iter().zip(&self.max) {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&self.constant.to_le_bytes());
    }

    pub fn decode(bytes: &[u8], channels: usize) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let mut children = [0u32; 8];
        for (i, c) in children.iter_mut().enumerate() {
            *c = u32_at(i * 4);
        }
        let brick_offset = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let mut min = Vec::with_capacity(channels);
        let mut max = Vec::with_capacity(channels);
        for c in 0..channels {
            min.push(f32_at(40 + c * 8));
            max.push(f32_at(44 + c * 8));
        }
        let constant = f32_at(40 + channels * 8);
        NodeRecord {
            children,
            brick_offset,
            min,
            max,
            constant,
        }
    }
}
