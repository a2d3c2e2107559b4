#![allow(dead_code)]

use std::path::{Path, PathBuf};

use voxstream::volume::{DType, DenseVolume, VolumeMeta};

pub const BLOB_DIMS: [usize; 3] = [40, 32, 12];
pub const BLOB_VALUE: u8 = 200;
pub const BACKGROUND: u8 = 20;

/// Blob index of voxel `(x, y, z)`, if any. Blobs are separated by at
/// least two background voxels along every axis.
pub fn blob_at(x: usize, y: usize, z: usize) -> Option<usize> {
    let (fx, fy, fz) = (x as f64, y as f64, z as f64);
    if (2..8).contains(&x) && (2..8).contains(&y) && (2..6).contains(&z) {
        Some(0)
    } else if (fx - 20.0).powi(2) + (fy - 16.0).powi(2) + (fz - 6.0).powi(2) <= 16.0 {
        Some(1)
    } else if (30..36).contains(&x) && (20..28).contains(&y) && (3..9).contains(&z) {
        Some(2)
    } else {
        None
    }
}

/// Voxel counts of the blobs, ascending.
pub fn blob_sizes() -> Vec<u64> {
    let [nx, ny, nz] = BLOB_DIMS;
    let mut counts = vec![0u64; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if let Some(b) = blob_at(x, y, z) {
                    counts[b] += 1;
                }
            }
        }
    }
    counts.sort();
    counts
}

/// Writes the blob phantom as one 8-bit TIFF per z slice.
pub fn write_blob_tiffs(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let [nx, ny, nz] = BLOB_DIMS;
    for z in 0..nz {
        let img = image::GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
            image::Luma([if blob_at(x as usize, y as usize, z).is_some() { BLOB_VALUE } else { BACKGROUND }])
        });
        img.save(dir.join(format!("slice_{z:03}.tif"))).unwrap();
    }
}

pub fn write_corrupt_tiffs(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("slice_000.tif"), b"this is not a tiff").unwrap();
}

pub fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn step_name(s: usize) -> String {
    format!("t{s:04}")
}

/// Two-field ensemble: scalar `p` and 3-channel `v` under
/// `root/<member>/<step>/<field>`, step `s` at time `s` seconds.
pub fn build_ensemble(
    root: &Path,
    members: &[&str],
    steps: usize,
    dims: [usize; 3],
    value: impl Fn(usize, usize, usize, usize, usize, usize, usize) -> f32,
) {
    for (m, member) in members.iter().enumerate() {
        for s in 0..steps {
            for (f, (name, channels)) in [("p", 1), ("v", 3)].into_iter().enumerate() {
                let mut meta = VolumeMeta::new(dims, DType::F32, channels);
                meta.timestamp = Some(s as f64);
                let dir = root.join(member).join(step_name(s)).join(name);
                DenseVolume::from_fn(meta, |c, x, y, z| value(m, s, f, c, x, y, z)).write(&dir).unwrap();
            }
        }
    }
}

/// Deterministic smooth-ish values that differ by member, step, field and channel.
pub fn wave(m: usize, s: usize, f: usize, c: usize, x: usize, y: usize, z: usize) -> f32 {
    let k = (m * 7 + s * 3 + f * 11 + c * 5) as f32;
    ((x as f32 * 0.37 + k).sin() + (y as f32 * 0.21 - k * 0.5).cos() + z as f32 * 0.05 * (m as f32 + 1.0)) * (1.0 + m as f32 * 0.25)
}
