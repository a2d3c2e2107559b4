#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxstream::volume::{DType, DenseVolume, VolumeMeta};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct FieldSpec {
    pub name: &'static str,
    pub channels: usize,
    pub dtype: DType,
}

pub fn scalar(name: &'static str) -> FieldSpec {
    FieldSpec {
        name,
        channels: 1,
        dtype: DType::F32,
    }
}

pub fn vector(name: &'static str) -> FieldSpec {
    FieldSpec {
        name,
        channels: 3,
        dtype: DType::F32,
    }
}

pub fn step_name(s: usize) -> String {
    format!("t{s:04}")
}

/// Writes `root/<member>/<step>[/<field>]` volumes; with one field the step
/// directory is the volume. `value(member, step, field, c, x, y, z)`.
pub fn build_ensemble(
    root: &Path,
    members: &[&str],
    steps: usize,
    fields: &[FieldSpec],
    dims: [usize; 3],
    times: impl Fn(usize, usize) -> Option<f64>,
    value: impl Fn(usize, usize, usize, usize, usize, usize, usize) -> f32,
) -> Vec<PathBuf> {
    let mut written = Vec::new();
    for (m, member) in members.iter().enumerate() {
        for s in 0..steps {
            for (f, spec) in fields.iter().enumerate() {
                let mut meta = VolumeMeta::new(dims, spec.dtype, spec.channels);
                meta.timestamp = times(m, s);
                let step_dir = root.join(member).join(step_name(s));
                let dir = if fields.len() == 1 {
                    meta.field_name = Some(spec.name.to_string());
                    step_dir
                } else {
                    step_dir.join(spec.name)
                };
                DenseVolume::from_fn(meta, |c, x, y, z| value(m, s, f, c, x, y, z)).write(&dir).unwrap();
                written.push(dir);
            }
        }
    }
    written
}

/// Random values in `[-1, 1]` keyed by every index.
pub fn noise(seed: u64) -> impl Fn(usize, usize, usize, usize, usize, usize, usize) -> f32 {
    move |m, s, f, c, x, y, z| {
        let key = [m, s, f, c, x, y, z].iter().fold(seed, |h, &v| {
            (h ^ v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
        });
        rng(key).random_range(-1.0f32..=1.0)
    }
}
