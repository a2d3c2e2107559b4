//! Field dissimilarity between sampled records and symmetric distance
//! matrices stored as their upper triangle.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxstream::JobControl;

use crate::dataset::RecordId;
use crate::error::{Error, Result};
use crate::features::{FeatureHeader, FeatureMatrix, FieldKind, MIN_MAGNITUDE};

pub const DISTANCE_MAGIC: &[u8; 8] = b"VXDIST01";

/// A dissimilarity in `[0, 1]` between two records of the same field.
pub trait FieldMetric: Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &[f32], b: &[f32], header: &FeatureHeader) -> f64;
}

/// Mean absolute difference of range-normalized values. Vector fields
/// average the magnitude term with the mean angle between directions over π.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanAbsolute;

impl FieldMetric for MeanAbsolute {
    fn name(&self) -> &str {
        "mean-absolute"
    }

    fn distance(&self, a: &[f32], b: &[f32], header: &FeatureHeader) -> f64 {
        let n = header.samples();
        let d = match header.kind {
            FieldKind::Scalar => scalar_distance(a, b, header.range),
            FieldKind::Vector => {
                let mag = scalar_distance(&a[..n], &b[..n], header.range);
                let dir: f64 = (0..n)
                    .map(|i| {
                        let u = &a[n + 3 * i..n + 3 * i + 3];
                        let v = &b[n + 3 * i..n + 3 * i + 3];
                        direction_angle(a[i] as f64, u, b[i] as f64, v)
                    })
                    .sum::<f64>()
                    / (n as f64 * std::f64::consts::PI);
                0.5 * mag + 0.5 * dir
            }
        };
        d.clamp(0.0, 1.0)
    }
}

fn scalar_distance(a: &[f32], b: &[f32], [lo, hi]: [f64; 2]) -> f64 {
    let span = hi - lo;
    if !(span > 0.0) {
        return 0.0;
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs() / span).sum();
    sum / a.len() as f64
}

fn direction_angle(ma: f64, u: &[f32], mb: f64, v: &[f32]) -> f64 {
    match (ma < MIN_MAGNITUDE, mb < MIN_MAGNITUDE) {
        (true, true) => 0.0,
        (true, false) | (false, true) => std::f64::consts::PI,
        (false, false) => {
            let [ux, uy, uz] = [u[0] as f64, u[1] as f64, u[2] as f64];
            let [vx, vy, vz] = [v[0] as f64, v[1] as f64, v[2] as f64];
            let dot = ux * vx + uy * vy + uz * vz;
            let cross = [uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx];
            let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            c.atan2(dot)
        }
    }
}

/// Distance between two records of `header`'s field with the default metric.
pub fn field_distance(a: &[f32], b: &[f32], header: &FeatureHeader) -> Result<f64> {
    let len = header.record_len();
    if a.len() != len || b.len() != len {
        return Err(Error::SampleMismatch(format!(
            "records of {} and {} values, expected {len}",
            a.len(),
            b.len()
        )));
    }
    Ok(MeanAbsolute.distance(a, b, header))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DistanceHeader {
    version: u32,
    fields: Vec<String>,
    metric: String,
    index: Vec<RecordId>,
}

/// Symmetric matrix with zero diagonal; row `i` belongs to `index[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub fields: Vec<String>,
    pub metric: String,
    pub index: Vec<RecordId>,
    /// Row-major strict upper triangle.
    upper: Vec<f64>,
}

fn tri(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl DistanceMatrix {
    /// From the row-major strict upper triangle of non-negative distances.
    pub fn from_upper(fields: Vec<String>, metric: String, index: Vec<RecordId>, upper: Vec<f64>) -> Result<Self> {
        let n = index.len();
        if upper.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {n}x{n} upper triangle",
                upper.len()
            )));
        }
        if let Some(d) = upper.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidParameter(format!("distance {d} is not finite and non-negative")));
        }
        Ok(DistanceMatrix {
            fields,
            metric,
            index,
            upper,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.upper[tri(self.len(), i, j)],
            std::cmp::Ordering::Greater => self.upper[tri(self.len(), j, i)],
        }
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn row_of(&self, member: &str, step: usize) -> Option<usize> {
        self.index.iter().position(|r| r.member == member && r.step == step)
    }

    /// Rows and columns `rows`, in that order.
    pub fn submatrix(&self, rows: &[usize]) -> DistanceMatrix {
        let mut upper = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                upper.push(self.get(i, j));
            }
        }
        DistanceMatrix {
            fields: self.fields.clone(),
            metric: self.metric.clone(),
            index: rows.iter().map(|&i| self.index[i].clone()).collect(),
            upper,
        }
    }

    /// Writes magic, header length (u64 LE), JSON header, padding to 4
    /// bytes, then the upper triangle as f32 LE.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DistanceHeader {
            version: 1,
            fields: self.fields.clone(),
            metric: self.metric.clone(),
            index: self.index.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DISTANCE_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&vec![0u8; (16 + json.len()).next_multiple_of(4) - 16 - json.len()])?;
        for &d in &self.upper {
            w.write_all(&(d as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != DISTANCE_MAGIC {
            return Err(Error::Malformed(format!("{} is not a distance matrix file", path.display())));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Malformed(format!("{}: truncated header", path.display())))?;
        let header: DistanceHeader = serde_json::from_slice(json)?;
        let body = &bytes[(16 + len).next_multiple_of(4)..];
        if body.len() % 4 != 0 {
            return Err(Error::Malformed(format!("{}: truncated body", path.display())));
        }
        let upper = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        DistanceMatrix::from_upper(header.fields, header.metric, header.index, upper)
    }
}

/// Pairwise distances of all records, averaged entry-wise over the given
/// fields. Every feature matrix must be complete and cover the same records.
pub fn distance_matrix(features: &[FeatureMatrix], job: Option<&JobControl>) -> Result<DistanceMatrix> {
    distance_matrix_with(features, &MeanAbsolute, job)
}

pub fn distance_matrix_with(
    features: &[FeatureMatrix],
    metric: &dyn FieldMetric,
    job: Option<&JobControl>,
) -> Result<DistanceMatrix> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidParameter("no feature matrices given".into()))?;
    for f in features {
        let missing = f.len() - f.complete_count();
        if missing > 0 {
            return Err(Error::IncompleteFeatures(format!(
                "{}: {missing} of {} records not sampled",
                f.header().field,
                f.len()
            )));
        }
        let same_records = f.header().records.len() == first.header().records.len()
            && f.header().records.iter().zip(&first.header().records).all(|(a, b)| a.member == b.member && a.step == b.step);
        if !same_records {
            return Err(Error::SampleMismatch(format!(
                "fields {} and {} cover different records",
                first.header().field,
                f.header().field
            )));
        }
    }
    let n = first.len();
    let records: Vec<Vec<&[f32]>> =
        features.iter().map(|f| (0..n).map(|i| f.record(i)).collect::<Result<_>>()).collect::<Result<_>>()?;
    let done = AtomicUsize::new(0);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if let Some(job) = job {
                job.check()?;
            }
            let row = (i + 1..n)
                .map(|j| {
                    let sum: f64 = features
                        .iter()
                        .zip(&records)
                        .map(|(f, r)| metric.distance(r[i], r[j], f.header()))
                        .sum();
                    sum / features.len() as f64
                })
                .collect();
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(job) = job {
                job.set_progress(k as f64 / n as f64);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let upper = rows.concat();
    assert!(upper.iter().all(|d| (0.0..=1.0).contains(d)), "field distances must lie in [0, 1]");
    DistanceMatrix::from_upper(
        features.iter().map(|f| f.header().field.clone()).collect(),
        metric.name().to_string(),
        first.header().records.clone(),
        upper,
    )
}
