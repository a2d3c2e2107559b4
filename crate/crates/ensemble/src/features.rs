//! Resumable per-field feature files: sampled values of every
//! `(member, step)` record, memory-mapped with a completion bitmap.
//!
//! Layout: magic `VXFEAT01`, header length (u64 LE), JSON header, zero
//! padding to 8 bytes, `records x width x samples` f32 LE, then one
//! completion bit per record. Scalar records hold the samples; vector
//! records hold the magnitudes followed by unit directions (3 per sample).

use std::fs::{self, File, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};

use memmap2::MmapMut;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxstream::volume::SliceVolume;
use voxstream::JobControl;

use crate::dataset::{vector_magnitude, EnsembleDataset, RecordId};
use crate::error::{Error, Result};
use crate::sampling::{sample_positions, sample_volume, Sampling};

pub const FEATURE_MAGIC: &[u8; 8] = b"VXFEAT01";
pub const FEATURE_EXT: &str = "feat";
/// Vectors shorter than this have no direction.
pub const MIN_MAGNITUDE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Vector,
}

impl FieldKind {
    /// f32 values per sample.
    pub fn width(self) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Vector => 4,
        }
    }

    pub fn of_channels(channels: usize) -> Result<Self> {
        match channels {
            1 => Ok(FieldKind::Scalar),
            3 => Ok(FieldKind::Vector),
            n => Err(Error::InvalidParameter(format!(
                "fields need 1 (scalar) or 3 (vector) channels, got {n}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub version: u32,
    pub field: String,
    pub kind: FieldKind,
    pub sampling: Sampling,
    /// Ensemble-wide `[min, max]` of the values (scalar) or magnitudes
    /// (vector), used to normalize distances.
    pub range: [f64; 2],
    pub mask: Option<String>,
    pub records: Vec<RecordId>,
    pub positions: Vec<[f64; 3]>,
}

impl FeatureHeader {
    pub fn samples(&self) -> usize {
        self.positions.len()
    }

    pub fn record_len(&self) -> usize {
        self.kind.width() * self.samples()
    }
}

pub struct FeatureMatrix {
    path: PathBuf,
    header: FeatureHeader,
    map: MmapMut,
    data_offset: usize,
    bitmap_offset: usize,
}

impl std::fmt::Debug for FeatureMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureMatrix")
            .field("path", &self.path)
            .field("field", &self.header.field)
            .field("records", &self.header.records.len())
            .field("complete", &self.complete_count())
            .finish()
    }
}

fn layout(header_len: usize, header: &FeatureHeader) -> (usize, usize, usize) {
    let data_offset = (16 + header_len).div_ceil(8) * 8;
    let n = header.records.len();
    let bitmap_offset = data_offset + n * header.record_len() * 4;
    (data_offset, bitmap_offset, bitmap_offset + n.div_ceil(8))
}

impl FeatureMatrix {
    pub fn create(path: impl AsRef<Path>, header: FeatureHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let json = serde_json::to_vec(&header)?;
        let (data_offset, bitmap_offset, total) = layout(json.len(), &header);
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(&path)?;
        file.set_len(total as u64)?;
        // SAFETY: the file is private to this process while mapped.
        let mut map = unsafe { MmapMut::map_mut(&file)? };
        map[..8].copy_from_slice(FEATURE_MAGIC);
        map[8..16].copy_from_slice(&(json.len() as u64).to_le_bytes());
        map[16..16 + json.len()].copy_from_slice(&json);
        map.flush()?;
        Ok(FeatureMatrix {
            path,
            header,
            map,
            data_offset,
            bitmap_offset,
        })
    }

    pub fn read_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
        Ok(Self::read_head(path.as_ref())?.0)
    }

    fn read_head(path: impl AsRef<Path>) -> Result<(FeatureHeader, usize)> {
        let mut f = File::open(path.as_ref())?;
        let mut head = [0u8; 16];
        f.read_exact(&mut head)?;
        if &head[..8] != FEATURE_MAGIC {
            return Err(Error::Malformed(format!("{} is not a feature file", path.as_ref().display())));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; len];
        f.read_exact(&mut json)?;
        Ok((serde_json::from_slice(&json)?, len))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (header, json_len) = Self::read_head(&path)?;
        let (data_offset, bitmap_offset, total) = layout(json_len, &header);
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        if file.metadata()?.len() != total as u64 {
            return Err(Error::Malformed(format!(
                "{} has {} bytes, expected {total}",
                path.display(),
                file.metadata()?.len()
            )));
        }
        // SAFETY: as in `create`.
        let map = unsafe { MmapMut::map_mut(&file)? };
        Ok(FeatureMatrix {
            path,
            header,
            map,
            data_offset,
            bitmap_offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &FeatureHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.map[self.bitmap_offset + i / 8] & (1 << (i % 8)) != 0
    }

    pub fn complete_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_complete(i)).count()
    }

    pub fn all_complete(&self) -> bool {
        self.complete_count() == self.len()
    }

    fn span(&self, i: usize) -> std::ops::Range<usize> {
        let bytes = self.header.record_len() * 4;
        let start = self.data_offset + i * bytes;
        start..start + bytes
    }

    /// Values of a completed record.
    pub fn record(&self, i: usize) -> Result<&[f32]> {
        if i >= self.len() {
            return Err(Error::InvalidParameter(format!("record {i} of {}", self.len())));
        }
        if !self.is_complete(i) {
            return Err(Error::IncompleteFeatures(format!(
                "{}: record {i} ({:?})",
                self.header.field, self.header.records[i]
            )));
        }
        Ok(bytemuck::cast_slice(&self.map[self.span(i)]))
    }

    /// Stores a record and only then marks it complete.
    pub fn write_record(&mut self, i: usize, values: &[f32]) -> Result<()> {
        if values.len() != self.header.record_len() {
            return Err(Error::SampleMismatch(format!(
                "record of {} values, expected {}",
                values.len(),
                self.header.record_len()
            )));
        }
        let span = self.span(i);
        let (start, len) = (span.start, span.len());
        for (dst, v) in self.map[span].chunks_exact_mut(4).zip(values) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
        self.map.flush_range(start, len)?;
        self.map[self.bitmap_offset + i / 8] |= 1 << (i % 8);
        self.map.flush_range(self.bitmap_offset + i / 8, 1)?;
        Ok(())
    }

    /// Marks a record as missing, as if extraction had stopped before it.
    pub fn clear_record(&mut self, i: usize) -> Result<()> {
        self.map[self.bitmap_offset + i / 8] &= !(1 << (i % 8));
        self.map.flush()?;
        Ok(())
    }

    pub fn index_of(&self, member: &str, step: usize) -> Option<usize> {
        self.header.records.iter().position(|r| r.member == member && r.step == step)
    }
}

#[derive(Debug)]
pub struct ExtractRun {
    pub matrices: Vec<FeatureMatrix>,
    /// Records sampled in this run; each loads its volume once.
    pub computed: usize,
    /// Records already complete from an earlier run.
    pub reused: usize,
}

pub fn feature_path(dir: &Path, field: &str) -> PathBuf {
    dir.join(format!("{field}.{FEATURE_EXT}"))
}

fn record_values(vol: &SliceVolume, positions: &[[f64; 3]], kind: FieldKind) -> Result<Vec<f32>> {
    let raw = sample_volume(vol, positions)?;
    let n = positions.len();
    Ok(match kind {
        FieldKind::Scalar => raw[..n].to_vec(),
        FieldKind::Vector => {
            let mut out = vec![0.0f32; 4 * n];
            for i in 0..n {
                let v = [raw[i], raw[n + i], raw[2 * n + i]];
                let m = vector_magnitude(v);
                out[i] = m as f32;
                if m >= MIN_MAGNITUDE {
                    for k in 0..3 {
                        out[n + 3 * i + k] = (v[k] as f64 / m) as f32;
                    }
                }
            }
            out
        }
    })
}

/// Samples every record of each field into `out_dir/<field>.feat`. Files
/// whose header matches this request are resumed: only records without a
/// completion bit are sampled.
pub fn extract_features(
    dataset: &EnsembleDataset,
    fields: &[String],
    sampling: Sampling,
    mask: Option<&SliceVolume>,
    out_dir: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<ExtractRun> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    if fields.is_empty() {
        return Err(Error::InvalidParameter("no fields requested".into()));
    }
    let positions = sample_positions(dataset, sampling, mask)?;
    let mut matrices = Vec::with_capacity(fields.len());
    for field in fields {
        let info = dataset.field(field)?;
        let kind = FieldKind::of_channels(info.channels)?;
        let range = match kind {
            FieldKind::Scalar => info.range[0],
            FieldKind::Vector => info.magnitude.ok_or_else(|| {
                Error::Malformed(format!("field {field:?} has no magnitude range"))
            })?,
        };
        let header = FeatureHeader {
            version: 1,
            field: field.clone(),
            kind,
            sampling,
            range,
            mask: mask.map(|m| m.path().display().to_string()),
            records: dataset.records(field),
            positions: positions.clone(),
        };
        let path = feature_path(out_dir, field);
        let resumable = path.is_file() && FeatureMatrix::read_header(&path).is_ok_and(|h| h == header);
        let matrix = if resumable {
            FeatureMatrix::open(&path)?
        } else {
            FeatureMatrix::create(&path, header)?
        };
        matrices.push(matrix);
    }

    let pending: Vec<(usize, usize)> = matrices
        .iter()
        .enumerate()
        .flat_map(|(f, m)| (0..m.len()).filter(|&i| !m.is_complete(i)).map(move |i| (f, i)))
        .collect();
    let total: usize = matrices.iter().map(FeatureMatrix::len).sum();
    let reused = total - pending.len();
    let batch = rayon::current_num_threads().max(1);
    let mut done = reused;
    for chunk in pending.chunks(batch) {
        if let Some(job) = job {
            job.check()?;
        }
        let values: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|&(f, i)| {
                let m = &matrices[f];
                let r = &m.header.records[i];
                let v = dataset.volume(&r.member, r.step, &m.header.field)?;
                record_values(&dataset.open_volume(v)?, &m.header.positions, m.header.kind)
            })
            .collect::<Result<_>>()?;
        for (&(f, i), v) in chunk.iter().zip(values) {
            matrices[f].write_record(i, &v)?;
        }
        done += chunk.len();
        if let Some(job) = job {
            job.set_progress(done as f64 / total.max(1) as f64);
        }
    }
    Ok(ExtractRun {
        matrices,
        computed: pending.len(),
        reused,
    })
}
