//! Spatial sample positions inside the common domain and nearest-voxel
//! lookups that read each needed slice once.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxstream::volume::{SliceVolume, VolumeMeta};

use crate::dataset::{Bounds, EnsembleDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Sampling {
    /// Uniform pseudo-random points from a ChaCha8 stream seeded by `seed`.
    Random { count: usize, seed: u64 },
    /// Every voxel center of the first volume's grid inside the domain, in
    /// z, y, x order.
    Exhaustive,
}

impl Sampling {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Sampling::Random { seed, .. } => Some(*seed),
            Sampling::Exhaustive => None,
        }
    }
}

/// Nearest voxel of `meta`'s grid, clamped into it.
pub fn voxel_index(meta: &VolumeMeta, p: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        let i = ((p[a] - meta.offset[a]) / meta.spacing[a]).round();
        i.clamp(0.0, (meta.dimensions[a] - 1) as f64) as usize
    })
}

fn inside(b: &Bounds, p: [f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= b[0][a] && p[a] <= b[1][a])
}

fn voxel_center(meta: &VolumeMeta, i: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| meta.offset[a] + i[a] as f64 * meta.spacing[a])
}

/// Sample positions in mm, restricted to the common spatial domain and,
/// when given, to the nonzero voxels of `mask`.
pub fn sample_positions(dataset: &EnsembleDataset, sampling: Sampling, mask: Option<&SliceVolume>) -> Result<Vec<[f64; 3]>> {
    let domain = dataset.common_bounds.ok_or(Error::EmptySampleDomain)?;
    let positions = match sampling {
        Sampling::Exhaustive => exhaustive(dataset, &domain, mask)?,
        Sampling::Random { count, seed } => {
            if count == 0 {
                return Err(Error::InvalidParameter("sample count must be >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match mask {
                None => (0..count)
                    .map(|_| std::array::from_fn(|a| rng.random_range(domain[0][a]..=domain[1][a])))
                    .collect(),
                Some(mask) => masked_random(mask, &domain, count, &mut rng)?,
            }
        }
    };
    if positions.is_empty() {
        return Err(Error::EmptySampleDomain);
    }
    Ok(positions)
}

fn exhaustive(dataset: &EnsembleDataset, domain: &Bounds, mask: Option<&SliceVolume>) -> Result<Vec<[f64; 3]>> {
    let reference = dataset
        .members
        .first()
        .and_then(|m| m.steps.first())
        .and_then(|s| s.fields.values().next())
        .ok_or(Error::EmptySampleDomain)?;
    let meta = &reference.meta;
    let [nx, ny, nz] = meta.dimensions;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = voxel_center(meta, [x, y, z]);
                if inside(domain, p) {
                    out.push(p);
                }
            }
        }
    }
    if let Some(mask) = mask {
        // Channel 0 comes first, so zipping stops after it.
        let values = sample_volume(mask, &out)?;
        out = out
            .into_iter()
            .zip(values)
            .filter(|(p, v)| *v != 0.0 && mask_contains(mask.meta(), *p))
            .map(|(p, _)| p)
            .collect();
    }
    Ok(out)
}

fn mask_contains(meta: &VolumeMeta, p: [f64; 3]) -> bool {
    let (lo, hi) = meta.bounds_mm();
    (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
}

/// Foreground voxels of the mask whose centers lie in the domain, per slice.
fn masked_counts(mask: &SliceVolume, domain: &Bounds) -> Result<Vec<Vec<u32>>> {
    let meta = mask.meta();
    let nx = meta.nx();
    let mut per_slice = Vec::with_capacity(meta.nz());
    for (z, slice) in mask.reader()?.enumerate() {
        let slice = slice?;
        let plane = slice.channel(0);
        let hits = plane
            .iter()
            .enumerate()
            .filter(|(i, &v)| v != 0.0 && inside(domain, voxel_center(meta, [i % nx, i / nx, z])))
            .map(|(i, _)| i as u32)
            .collect();
        per_slice.push(hits);
    }
    Ok(per_slice)
}

fn masked_random(mask: &SliceVolume, domain: &Bounds, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let meta = mask.meta();
    let hits = masked_counts(mask, domain)?;
    let total: usize = hits.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptySampleDomain);
    }
    let mut starts = Vec::with_capacity(hits.len());
    let mut acc = 0;
    for h in &hits {
        starts.push(acc);
        acc += h.len();
    }
    let nx = meta.nx();
    (0..count)
        .map(|_| {
            let k = rng.random_range(0..total);
            let z = starts.partition_point(|&s| s <= k) - 1;
            let i = hits[z][k - starts[z]] as usize;
            let c = voxel_center(meta, [i % nx, i / nx, z]);
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            Ok(std::array::from_fn(|a| {
                (c[a] + jitter[a] * meta.spacing[a]).clamp(domain[0][a], domain[1][a])
            }))
        })
        .collect()
}

/// Nearest-voxel values at `positions`, channel-planar
/// (`out[c * n + i]`). Only slices holding samples are read, each once.
pub fn sample_volume(vol: &SliceVolume, positions: &[[f64; 3]]) -> Result<Vec<f32>> {
    let meta = vol.meta();
    let n = positions.len();
    let nx = meta.nx();
    let mut by_z: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let [x, y, z] = voxel_index(meta, *p);
        by_z.entry(z).or_default().push((i, y * nx + x));
    }
    let mut out = vec![0.0f32; n * meta.channels];
    for (z, samples) in by_z {
        let slice = vol.read_slice(z)?;
        for c in 0..meta.channels {
            let plane = slice.channel(c);
            for &(i, j) in &samples {
                out[c * n + i] = plane[j];
            }
        }
    }
    Ok(out)
}
