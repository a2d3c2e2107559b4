//! Per-voxel ensemble statistics, streamed slice by slice across volumes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxstream::volume::{DType, Slice, SliceVolume, SliceWriter};
use voxstream::JobControl;

use crate::dataset::EnsembleDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    /// Unbiased, `n - 1` denominator.
    Variance,
    Stddev,
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "variance" => Ok(Statistic::Variance),
            "stddev" => Ok(Statistic::Stddev),
            other => Err(Error::UnknownName(format!("statistic {other:?}"))),
        }
    }
}

/// Statistic of `field` over the selected members and the steps inside
/// `window` (inclusive), written as an `f32` volume.
pub fn aggregate(
    dataset: &EnsembleDataset,
    field: &str,
    members: Option<&BTreeSet<String>>,
    window: Option<[f64; 2]>,
    stat: Statistic,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    dataset.field(field)?;
    if let Some(names) = members {
        for n in names {
            dataset.member(n)?;
        }
    }
    let mut volumes = Vec::new();
    for m in &dataset.members {
        if members.is_some_and(|names| !names.contains(&m.name)) {
            continue;
        }
        for s in &m.steps {
            if window.is_some_and(|[t0, t1]| s.time < t0 || s.time > t1) {
                continue;
            }
            if let Some(v) = s.fields.get(field) {
                volumes.push(dataset.open_volume(v)?);
            }
        }
    }
    aggregate_volumes(&volumes, stat, out, job)
}

fn same_grid(a: &voxstream::volume::VolumeMeta, b: &voxstream::volume::VolumeMeta) -> bool {
    let close = |x: [f64; 3], y: [f64; 3]| (0..3).all(|i| (x[i] - y[i]).abs() <= 1e-9 * (1.0 + x[i].abs()));
    a.dimensions == b.dimensions && a.channels == b.channels && close(a.spacing, b.spacing) && close(a.offset, b.offset)
}

/// Statistic over `volumes` in the given order. Running means and squared
/// deviations are kept in `f64` for one slice at a time.
pub fn aggregate_volumes(
    volumes: &[SliceVolume],
    stat: Statistic,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    let need = if stat == Statistic::Mean { 1 } else { 2 };
    if volumes.len() < need {
        return Err(Error::InsufficientSamples(format!(
            "{stat:?} needs at least {need} volumes, got {}",
            volumes.len()
        )));
    }
    let first = volumes[0].meta();
    if let Some(v) = volumes.iter().find(|v| !same_grid(v.meta(), first)) {
        return Err(Error::ShapeMismatch(format!(
            "{} does not share the grid of {}",
            v.path().display(),
            volumes[0].path().display()
        )));
    }
    let mut meta = first.clone();
    meta.dtype = DType::F32;
    meta.value_range = None;
    meta.timestamp = None;
    let [nx, ny, nz] = meta.dimensions;
    let channels = meta.channels;
    let len = nx * ny * channels;
    let mut writer = SliceWriter::create(meta, out)?;
    for z in 0..nz {
        if let Some(job) = job {
            job.check()?;
        }
        let mut mean = vec![0.0f64; len];
        let mut m2 = vec![0.0f64; len];
        for (k, v) in volumes.iter().enumerate() {
            let slice = v.read_slice(z)?;
            let n = (k + 1) as f64;
            for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(&slice.data) {
                let x = x as f64;
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
        }
        let denom = (volumes.len() - 1).max(1) as f64;
        let data = match stat {
            Statistic::Mean => mean.iter().map(|&m| m as f32).collect(),
            Statistic::Variance => m2.iter().map(|&s| (s / denom) as f32).collect(),
            Statistic::Stddev => m2.iter().map(|&s| (s / denom).sqrt() as f32).collect(),
        };
        writer.push(&Slice { nx, ny, channels, data })?;
        if let Some(job) = job {
            job.set_progress((z + 1) as f64 / nz as f64);
        }
    }
    Ok(writer.finish()?)
}
