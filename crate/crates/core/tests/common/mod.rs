#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxstream::volume::{DType, DenseVolume, VolumeMeta};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dense(seed: u64, dims: [usize; 3], dtype: DType, channels: usize) -> DenseVolume {
    let mut r = rng(seed);
    let meta = VolumeMeta::new(dims, dtype, channels);
    DenseVolume::from_fn(meta, |_, _, _, _| match dtype {
        DType::U8 => r.random_range(0..=255u32) as f32,
        DType::U16 => r.random_range(0..=65535u32) as f32,
        DType::U32 => r.random_range(0..=1_000_000u32) as f32,
        DType::F32 => r.random_range(-100.0f32..100.0),
    })
}

pub fn random_binary(seed: u64, dims: [usize; 3], density: f64) -> DenseVolume {
    let mut r = rng(seed);
    DenseVolume::from_fn(VolumeMeta::new(dims, DType::U8, 1), |_, _, _, _| {
        if r.random_bool(density) {
            255.0
        } else {
            0.0
        }
    })
}

/// Values of a box window around `(x, y, z)` with clamp-to-edge indexing.
pub fn window_values(v: &DenseVolume, c: usize, p: [usize; 3], size: [usize; 3]) -> Vec<f32> {
    let r = size.map(|s| (s / 2) as isize);
    let mut out = Vec::with_capacity(size.iter().product());
    for dz in -r[2]..=r[2] {
        for dy in -r[1]..=r[1] {
            for dx in -r[0]..=r[0] {
                out.push(v.get_clamped(c, p[0] as isize + dx, p[1] as isize + dy, p[2] as isize + dz));
            }
        }
    }
    out
}

/// Applies `f` to every voxel's window.
pub fn dense_window_map(
    v: &DenseVolume,
    size: [usize; 3],
    mut f: impl FnMut(Vec<f32>) -> f32,
) -> Vec<f32> {
    let [nx, ny, nz] = v.dims();
    let mut out = Vec::with_capacity(v.data.len());
    for c in 0..v.meta.channels {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(f(window_values(v, c, [x, y, z], size)));
                }
            }
        }
    }
    out
}

/// Scan-order flood fill: returns labels (ids in first-touch order) and the
/// component count.
pub fn flood_fill(v: &DenseVolume, offsets: &[[isize; 3]], fg: impl Fn(f32) -> bool) -> (Vec<u32>, u32) {
    let [nx, ny, nz] = v.dims();
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut labels = vec![0u32; nx * ny * nz];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !fg(v.get(0, x, y, z)) || labels[idx(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                labels[idx(x, y, z)] = next;
                stack.push([x, y, z]);
                while let Some(p) = stack.pop() {
                    for o in offsets {
                        let q = [p[0] as isize + o[0], p[1] as isize + o[1], p[2] as isize + o[2]];
                        if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx as isize || q[1] >= ny as isize || q[2] >= nz as isize {
                            continue;
                        }
                        let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                        let i = idx(q[0], q[1], q[2]);
                        if labels[i] == 0 && fg(v.get(0, q[0], q[1], q[2])) {
                            labels[i] = next;
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Whether two labelings induce the same partition (a bijection of ids).
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}

/// Level-1 oracle: 2x2x2 means (edge voxels repeated), rounded for integer dtypes.
pub fn mean_pool(v: &DenseVolume) -> DenseVolume {
    let [nx, ny, nz] = v.dims();
    let mut meta = v.meta.clone();
    meta.dimensions = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let dtype = meta.dtype;
    let src = v.clone();
    DenseVolume::from_fn(meta, |c, x, y, z| {
        let mut s = 0.0f64;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    s += src.get(c, (2 * x + dx).min(nx - 1), (2 * y + dy).min(ny - 1), (2 * z + dz).min(nz - 1)) as f64;
                }
            }
        }
        let m = s / 8.0;
        if dtype.is_integer() {
            (m + 0.5).floor() as f32
        } else {
            m as f32
        }
    })
}
