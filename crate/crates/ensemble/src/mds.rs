//! Classical multidimensional scaling of distance matrices, time curves
//! through the embedding and re-embedding of member subsets.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{EnsembleDataset, RecordId};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

/// Entries within this of the column's largest magnitude count as ties for
/// the sign convention.
const SIGN_TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `n` points of `k` coordinates each.
    pub points: Vec<Vec<f64>>,
    /// All eigenvalues of the double-centered matrix, descending.
    pub spectrum: Vec<f64>,
    pub index: Vec<RecordId>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingJson {
    points: Vec<Vec<f64>>,
    index: Vec<(String, usize)>,
    spectrum: Vec<f64>,
}

impl Embedding {
    pub fn dims(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(EmbeddingJson {
            points: self.points.clone(),
            index: self.index.iter().map(|r| (r.member.clone(), r.step)).collect(),
            spectrum: self.spectrum.clone(),
        })
        .expect("embedding serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_json())?)?;
        Ok(())
    }

    /// One row per point: member, step, time, then the coordinates.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let mut head = vec!["member".to_string(), "step".into(), "time".into()];
        head.extend((0..self.dims()).map(|c| format!("x{c}")));
        w.write_record(&head).map_err(csv_error)?;
        for (r, p) in self.index.iter().zip(&self.points) {
            let mut row = vec![r.member.clone(), r.step.to_string(), r.time.to_string()];
            row.extend(p.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Classical MDS: eigendecomposition of `B = -1/2 J (D∘D) J`, coordinates
/// are the top `k` eigenvectors scaled by `sqrt(max(λ, 0))`. The largest
/// magnitude entry of each column is made non-negative, ties going to the
/// first row.
pub fn mds_embed(d: &DistanceMatrix, k: usize) -> Result<Embedding> {
    let n = d.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("embedding needs at least 2 points, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("embedding dimension must be >= 1".into()));
    }
    let sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let mut points = vec![vec![0.0; k]; n];
    for (c, &e) in order.iter().take(k).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        if scale == 0.0 {
            continue;
        }
        let col = eig.eigenvectors.column(e);
        let peak = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lead = col.iter().position(|v| v.abs() >= peak - SIGN_TIE).unwrap_or(0);
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for (p, v) in points.iter_mut().zip(col.iter()) {
            p[c] = sign * scale * v;
        }
    }
    Ok(Embedding {
        points,
        spectrum,
        index: d.index.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub time: f64,
    /// Time mapped to `[0, 1]` over the dataset's time range.
    pub t: f64,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub member: String,
    pub points: Vec<CurvePoint>,
}

/// One time-ordered polyline per member of `dataset` with embedded points.
/// Points are matched by member name and time, so filtered datasets select
/// from a larger embedding.
pub fn embedding_curves(embedding: &Embedding, dataset: &EnsembleDataset) -> Vec<Curve> {
    let [t0, t1] = dataset.union_time_range.unwrap_or([0.0, 0.0]);
    let span = t1 - t0;
    dataset
        .members
        .iter()
        .filter_map(|m| {
            let times: Vec<f64> = m.steps.iter().map(|s| s.time).collect();
            let mut points: Vec<CurvePoint> = embedding
                .index
                .iter()
                .zip(&embedding.points)
                .filter(|(r, _)| r.member == m.name && times.contains(&r.time))
                .map(|(r, p)| CurvePoint {
                    step: r.step,
                    time: r.time,
                    t: if span > 0.0 { (r.time - t0) / span } else { 0.0 },
                    coords: p.clone(),
                })
                .collect();
            points.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.step.cmp(&b.step)));
            (!points.is_empty()).then(|| Curve {
                member: m.name.clone(),
                points,
            })
        })
        .collect()
}

/// Embedding of the rows belonging to `members`, cut from `d` without
/// recomputing any distance.
pub fn reembed_selection(d: &DistanceMatrix, members: &BTreeSet<String>, k: usize) -> Result<Embedding> {
    if members.is_empty() {
        return Err(Error::InvalidParameter("member selection is empty".into()));
    }
    if let Some(m) = members.iter().find(|m| !d.index.iter().any(|r| &r.member == *m)) {
        return Err(Error::UnknownName(format!("member {m:?}")));
    }
    let rows: Vec<usize> = (0..d.len()).filter(|&i| members.contains(&d.index[i].member)).collect();
    mds_embed(&d.submatrix(&rows), k)
}
