use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{DType, DenseVolume, Slice, VolumeMeta, DATA_FILE, META_FILE};
use crate::error::{Error, Result};

/// Slice-level I/O instrumentation shared by every reader and writer opened
/// from one [`SliceVolume`] handle.
#[derive(Debug, Default)]
pub struct IoCounters {
    slices_read: AtomicU64,
    slices_written: AtomicU64,
}

impl IoCounters {
    pub fn slices_read(&self) -> u64 {
        self.slices_read.load(Ordering::Relaxed)
    }

    pub fn slices_written(&self) -> u64 {
        self.slices_written.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.slices_read.store(0, Ordering::Relaxed);
        self.slices_written.store(0, Ordering::Relaxed);
    }

    pub(crate) fn add_read(&self) {
        self.slices_read.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_written(&self) {
        self.slices_written.fetch_add(1, Ordering::Relaxed);
    }
}

/// Handle to an on-disk volume directory.
#[derive(Clone, Debug)]
pub struct SliceVolume {
    path: PathBuf,
    meta: VolumeMeta,
    counters: Arc<IoCounters>,
}

fn read_meta_file(path: &Path) -> Result<VolumeMeta> {
    let meta_path = path.join(META_FILE);
    let text = match fs::read_to_string(&meta_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(meta_path))
        }
        Err(e) => return Err(e.into()),
    };
    let meta: VolumeMeta =
        serde_json::from_str(&text).map_err(|e| Error::MalformedMeta(format!("{}: {e}", meta_path.display())))?;
    meta.validate()?;
    Ok(meta)
}

/// Parses `meta.json` and checks the payload length without reading it.
pub fn read_meta(path: impl AsRef<Path>) -> Result<VolumeMeta> {
    let path = path.as_ref();
    let meta = read_meta_file(path)?;
    let data_path = path.join(DATA_FILE);
    let found = match fs::metadata(&data_path) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(data_path))
        }
        Err(e) => return Err(e.into()),
    };
    let expected = meta.payload_bytes();
    if found != expected {
        return Err(Error::SizeMismatch { expected, found });
    }
    Ok(meta)
}

fn write_meta_file(path: &Path, meta: &VolumeMeta) -> Result<()> {
    let tmp = path.join(format!("{META_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(meta)?)?;
    fs::rename(&tmp, path.join(META_FILE))?;
    Ok(())
}

impl SliceVolume {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let meta = read_meta(&path)?;
        Ok(SliceVolume {
            path,
            meta,
            counters: Arc::new(IoCounters::default()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }

    pub fn data_path(&self) -> PathBuf {
        self.path.join(DATA_FILE)
    }

    pub fn reader(&self) -> Result<SliceReader> {
        self.reader_range(0..self.meta.nz())
    }

    pub fn reader_range(&self, range: Range<usize>) -> Result<SliceReader> {
        if range.start > range.end || range.end > self.meta.nz() {
            return Err(Error::OutOfRange(format!(
                "slice range {range:?} outside 0..{}",
                self.meta.nz()
            )));
        }
        Ok(SliceReader {
            file: File::open(self.data_path())?,
            meta: self.meta.clone(),
            next: range.start,
            end: range.end,
            counters: self.counters.clone(),
            buf: Vec::new(),
        })
    }

    /// Reads a single slice without a sequential reader.
    pub fn read_slice(&self, z: usize) -> Result<Slice> {
        let mut r = self.reader_range(z..z + 1)?;
        r.next().expect("range has one slice")
    }

    /// Exact slice read for `u32` label volumes.
    pub fn read_slice_u32(&self, z: usize) -> Result<Vec<u32>> {
        if self.meta.dtype != DType::U32 {
            return Err(Error::DtypeMismatch(format!("expected u32, volume is {}", self.meta.dtype)));
        }
        if z >= self.meta.nz() {
            return Err(Error::OutOfRange(format!("slice {z}")));
        }
        let mut file = File::open(self.data_path())?;
        let n = self.meta.slice_len();
        let mut out = Vec::with_capacity(n * self.meta.channels);
        let mut buf = vec![0u8; n * 4];
        for c in 0..self.meta.channels {
            let offset = ((c * self.meta.nz() + z) * n * 4) as u64;
            file.seek(SeekFrom::Start(offset))?;
            file.read_exact(&mut buf)?;
            out.extend(buf.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        self.counters.add_read();
        Ok(out)
    }

    pub fn read_dense(&self) -> Result<DenseVolume> {
        let meta = self.meta.clone();
        let mut dense = DenseVolume::zeros(meta);
        for (z, slice) in self.reader()?.enumerate() {
            dense.set_slice(z, &slice?);
        }
        Ok(dense)
    }

    /// Per-channel `(min, max)`; computed with one full pass on first demand
    /// and persisted into `meta.json`.
    pub fn ensure_value_range(&mut self) -> Result<Vec<[f64; 2]>> {
        if let Some(r) = &self.meta.value_range {
            return Ok(r.clone());
        }
        let channels = self.meta.channels;
        let mut ranges = vec![[f64::INFINITY, f64::NEG_INFINITY]; channels];
        for slice in self.reader()? {
            let slice = slice?;
            for (c, range) in ranges.iter_mut().enumerate() {
                for &v in slice.channel(c) {
                    let v = v as f64;
                    range[0] = range[0].min(v);
                    range[1] = range[1].max(v);
                }
            }
        }
        self.set_value_range(ranges.clone())?;
        Ok(ranges)
    }

    pub fn set_value_range(&mut self, ranges: Vec<[f64; 2]>) -> Result<()> {
        self.meta.value_range = Some(ranges);
        self.meta.validate()?;
        write_meta_file(&self.path, &self.meta)
    }
}

/// Sequential xy-slice stream over a z-range.
pub struct SliceReader {
    file: File,
    meta: VolumeMeta,
    next: usize,
    end: usize,
    counters: Arc<IoCounters>,
    buf: Vec<u8>,
}

impl SliceReader {
    pub fn position(&self) -> usize {
        self.next
    }

    fn read_one(&mut self, z: usize) -> Result<Slice> {
        let meta = &self.meta;
        let n = meta.slice_len();
        let bytes = n * meta.dtype.size();
        let mut slice = Slice::zeros(meta.nx(), meta.ny(), meta.channels);
        self.buf.resize(bytes, 0);
        for c in 0..meta.channels {
            let offset = ((c * meta.nz() + z) * bytes) as u64;
            self.file.seek(SeekFrom::Start(offset))?;
            self.file.read_exact(&mut self.buf)?;
            meta.dtype.decode(&self.buf, slice.channel_mut(c));
        }
        self.counters.add_read();
        Ok(slice)
    }
}

impl Iterator for SliceReader {
    type Item = Result<Slice>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let z = self.next;
        self.next += 1;
        Some(self.read_one(z))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.end - self.next;
        (n, Some(n))
    }
}

/// Slice sink. Slices must be pushed in ascending z; the payload is staged in
/// a temporary file and only renamed into place by [`SliceWriter::finish`].
pub struct SliceWriter {
    dir: PathBuf,
    meta: VolumeMeta,
    file: Option<File>,
    pushed: usize,
    counters: Arc<IoCounters>,
    buf: Vec<u8>,
}

impl SliceWriter {
    pub fn create(meta: VolumeMeta, dir: impl AsRef<Path>) -> Result<Self> {
        meta.validate()?;
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join(format!("{DATA_FILE}.partial")))?;
        file.set_len(meta.payload_bytes())?;
        Ok(SliceWriter {
            dir,
            meta,
            file: Some(file),
            pushed: 0,
            counters: Arc::new(IoCounters::default()),
            buf: Vec::new(),
        })
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn pushed(&self) -> usize {
        self.pushed
    }

    pub fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }

    pub fn push(&mut self, slice: &Slice) -> Result<()> {
        let meta = &self.meta;
        if self.pushed >= meta.nz() {
            return Err(Error::Protocol(format!("volume already has {} slices", meta.nz())));
        }
        if slice.nx != meta.nx() || slice.ny != meta.ny() || slice.channels != meta.channels {
            return Err(Error::ShapeMismatch(format!(
                "slice {}x{}x{}ch does not match volume {}x{}x{}ch",
                slice.nx,
                slice.ny,
                slice.channels,
                meta.nx(),
                meta.ny(),
                meta.channels
            )));
        }
        let z = self.pushed;
        let bytes = meta.slice_len() * meta.dtype.size();
        let file = self.file.as_mut().expect("writer not finished");
        for c in 0..meta.channels {
            meta.dtype.encode(slice.channel(c), &mut self.buf);
            file.seek(SeekFrom::Start(((c * meta.nz() + z) * bytes) as u64))?;
            file.write_all(&self.buf)?;
        }
        self.pushed += 1;
        self.counters.add_written();
        Ok(())
    }

    /// Pushes a `u32` label slice without the `f32` round trip.
    pub fn push_u32(&mut self, labels: &[u32]) -> Result<()> {
        let meta = &self.meta;
        if meta.dtype != DType::U32 || meta.channels != 1 {
            return Err(Error::DtypeMismatch("push_u32 needs a single-channel u32 volume".into()));
        }
        if self.pushed >= meta.nz() {
            return Err(Error::Protocol(format!("volume already has {} slices", meta.nz())));
        }
        if labels.len() != meta.slice_len() {
            return Err(Error::ShapeMismatch(format!("label slice has {} voxels", labels.len())));
        }
        self.buf.clear();
        for &l in labels {
            self.buf.extend_from_slice(&l.to_le_bytes());
        }
        let file = self.file.as_mut().expect("writer not finished");
        file.seek(SeekFrom::Start((self.pushed * labels.len() * 4) as u64))?;
        file.write_all(&self.buf)?;
        self.pushed += 1;
        self.counters.add_written();
        Ok(())
    }

    pub fn finish(mut self) -> Result<SliceVolume> {
        if self.pushed != self.meta.nz() {
            return Err(Error::Protocol(format!(
                "finalized after {} of {} slices",
                self.pushed,
                self.meta.nz()
            )));
        }
        let file = self.file.take().expect("writer not finished");
        file.sync_data()?;
        drop(file);
        fs::rename(
            self.dir.join(format!("{DATA_FILE}.partial")),
            self.dir.join(DATA_FILE),
        )?;
        write_meta_file(&self.dir, &self.meta)?;
        Ok(SliceVolume {
            path: self.dir.clone(),
            meta: self.meta.clone(),
            counters: self.counters.clone(),
        })
    }
}

impl Drop for SliceWriter {
    fn drop(&mut self) {
        if self.file.take().is_some() {
            let _ = fs::remove_file(self.dir.join(format!("{DATA_FILE}.partial")));
        }
    }
}
