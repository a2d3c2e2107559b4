//! Two-pass streaming connected-component labeling.
//!
//! Pass one labels each slice in the plane, gives every in-plane component
//! a provisional id (in scan order of its first voxel) and appends its
//! statistics plus its adjacencies to the previous slice to a root file.
//! The merge step resolves the union events into a provisional-to-final map
//! held in a memory-mapped merge file. Pass two recomputes the provisional
//! ids slice by slice and maps them to final ids.

mod runs;

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use memmap2::MmapMut;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::JobControl;
use crate::volume::{DType, Slice, SliceVolume, SliceWriter};
use runs::SliceRuns;

/// Largest number of final components a label volume may hold.
pub const MAX_COMPONENTS: u64 = (1 << 31) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    /// Connectivity conventionally paired with this one for the complement.
    pub fn dual(self) -> Connectivity {
        match self {
            Connectivity::Six => Connectivity::TwentySix,
            Connectivity::Eighteen | Connectivity::TwentySix => Connectivity::Six,
        }
    }

    /// Whether in-plane diagonal neighbours are connected.
    pub(crate) fn planar_diagonal(self) -> bool {
        !matches!(self, Connectivity::Six)
    }

    /// Offsets `(dy, dx_reach)` to the previous slice: a run in row `y` meets
    /// previous-slice runs in row `y + dy` widened by `dx_reach`.
    pub(crate) fn inter_slice(self) -> &'static [(isize, usize)] {
        match self {
            Connectivity::Six => &[(0, 0)],
            Connectivity::Eighteen => &[(-1, 0), (0, 1), (1, 0)],
            Connectivity::TwentySix => &[(-1, 1), (0, 1), (1, 1)],
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => (1..=2).contains(&nonzero),
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidParameter(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// One row of the component table. Coordinates are voxel indices, the
/// bounding box is inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub voxels: u64,
    pub min_x: u32,
    pub min_y: u32,
    pub min_z: u32,
    pub max_x: u32,
    pub max_y: u32,
    pub max_z: u32,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub centroid_z: f64,
}

impl Component {
    pub fn touches_border(&self, dims: [usize; 3]) -> bool {
        let lo = [self.min_x, self.min_y, self.min_z];
        let hi = [self.max_x, self.max_y, self.max_z];
        (0..3).any(|a| lo[a] == 0 || hi[a] as usize + 1 == dims[a])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTable {
    pub components: Vec<Component>,
}

pub const CSV_HEADER: &str = "id,voxels,min_x,min_y,min_z,max_x,max_y,max_z,centroid_x,centroid_y,centroid_z";

impl ComponentTable {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn foreground_voxels(&self) -> u64 {
        self.components.iter().map(|c| c.voxels).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.components {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.id, c.voxels, c.min_x, c.min_y, c.min_z, c.max_x, c.max_y, c.max_z, c.centroid_x, c.centroid_y, c.centroid_z
            ));
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.components).expect("components serialize")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.components)?)?;
        Ok(())
    }
}

/// Per-provisional-component statistics written to the root file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct RunStats {
    pub count: u64,
    pub min: [u32; 3],
    pub max: [u32; 3],
    pub sum: [f64; 3],
}

impl RunStats {
    pub fn empty() -> Self {
        RunStats {
            count: 0,
            min: [u32::MAX; 3],
            max: [0; 3],
            sum: [0.0; 3],
        }
    }

    pub fn add_run(&mut self, x0: usize, x1: usize, y: usize, z: usize) {
        let n = (x1 - x0) as u64;
        self.count += n;
        self.min[0] = self.min[0].min(x0 as u32);
        self.max[0] = self.max[0].max((x1 - 1) as u32);
        for (a, v) in [(1, y), (2, z)] {
            self.min[a] = self.min[a].min(v as u32);
            self.max[a] = self.max[a].max(v as u32);
            self.sum[a] += n as f64 * v as f64;
        }
        self.sum[0] += n as f64 * (x0 + x1 - 1) as f64 / 2.0;
    }

    pub fn merge(&mut self, o: &RunStats) {
        self.count += o.count;
        for a in 0..3 {
            self.min[a] = self.min[a].min(o.min[a]);
            self.max[a] = self.max[a].max(o.max[a]);
            self.sum[a] += o.sum[a];
        }
    }
}

const TAG_LABEL: u8 = 0;
const TAG_UNION: u8 = 1;

enum RootRecord {
    Label(u32, RunStats),
    Union(u32, u32),
}

fn write_label(w: &mut impl Write, id: u32, s: &RunStats) -> Result<()> {
    let mut buf = Vec::with_capacity(1 + 4 + 8 + 24 + 24);
    buf.push(TAG_LABEL);
    buf.extend_from_slice(&id.to_le_bytes());
    buf.extend_from_slice(&s.count.to_le_bytes());
    for v in s.min.iter().chain(&s.max) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.sum {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn write_union(w: &mut impl Write, a: u32, b: u32) -> Result<()> {
    let mut buf = [0u8; 9];
    buf[0] = TAG_UNION;
    buf[1..5].copy_from_slice(&a.to_le_bytes());
    buf[5..9].copy_from_slice(&b.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<Option<RootRecord>> {
    let mut tag = [0u8; 1];
    match r.read_exact(&mut tag) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    match tag[0] {
        TAG_LABEL => {
            let mut b = [0u8; 4 + 8 + 24 + 24];
            r.read_exact(&mut b)?;
            let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
            let f64_at = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().unwrap());
            let stats = RunStats {
                count: u64::from_le_bytes(b[4..12].try_into().unwrap()),
                min: [u32_at(12), u32_at(16), u32_at(20)],
                max: [u32_at(24), u32_at(28), u32_at(32)],
                sum: [f64_at(36), f64_at(44), f64_at(52)],
            };
            Ok(Some(RootRecord::Label(u32_at(0), stats)))
        }
        TAG_UNION => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(Some(RootRecord::Union(
                u32::from_le_bytes(b[0..4].try_into().unwrap()),
                u32::from_le_bytes(b[4..8].try_into().unwrap()),
            )))
        }
        t => Err(Error::Protocol(format!("corrupt root file record tag {t}"))),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

/// Provisional-to-final id map backed by a memory-mapped file.
struct MergeMap {
    map: Option<MmapMut>,
}

impl MergeMap {
    fn create(path: &Path, provisional: usize) -> Result<Self> {
        if provisional == 0 {
            return Ok(MergeMap { map: None });
        }
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        file.set_len(provisional as u64 * 4)?;
        // SAFETY: the file is private to this labeling job and not resized
        // while mapped.
        let map = unsafe { MmapMut::map_mut(&file)? };
        Ok(MergeMap { map: Some(map) })
    }

    fn ids(&mut self) -> &mut [u32] {
        match &mut self.map {
            Some(m) => bytemuck::cast_slice_mut(&mut m[..]),
            None => &mut [],
        }
    }

    fn get(&self, provisional: u32) -> u32 {
        let m = self.map.as_ref().expect("lookup in empty merge map");
        let i = provisional as usize * 4;
        u32::from_le_bytes(m[i..i + 4].try_into().unwrap())
    }
}

fn find(p: &mut [u32], mut x: u32) -> u32 {
    while p[x as usize] != x {
        let next = p[x as usize];
        p[x as usize] = p[next as usize];
        x = next;
    }
    x
}

/// Streaming two-pass labeler over voxels selected by `foreground`.
struct Labeler<'a> {
    volume: &'a SliceVolume,
    connectivity: Connectivity,
    foreground: &'a (dyn Fn(f32) -> bool + Sync),
    root_path: PathBuf,
    merge_path: PathBuf,
}

struct Merged {
    map: MergeMap,
    table: ComponentTable,
}

impl Labeler<'_> {
    fn runs(&self, slice: &Slice, next_id: &mut u64) -> Result<SliceRuns> {
        let runs = SliceRuns::extract(slice, self.foreground, self.connectivity, *next_id);
        *next_id += runs.component_count() as u64;
        if *next_id > u32::MAX as u64 {
            return Err(Error::TooManyComponents(*next_id));
        }
        Ok(runs)
    }

    fn pass_one(&self, job: Option<&JobControl>) -> Result<Merged> {
        let meta = self.volume.meta();
        let nz = meta.nz();
        let mut root = BufWriter::new(File::create(&self.root_path)?);
        let mut next_id = 0u64;
        let mut prev: Option<SliceRuns> = None;
        for (z, slice) in self.volume.reader()?.enumerate() {
            if let Some(job) = job {
                job.check()?;
                job.set_progress(0.5 * z as f64 / nz as f64);
            }
            let cur = self.runs(&slice?, &mut next_id)?;
            for (id, stats) in cur.stats(z) {
                write_label(&mut root, id, &stats)?;
            }
            if let Some(p) = &prev {
                for (a, b) in cur.adjacent_pairs(p, self.connectivity) {
                    write_union(&mut root, a, b)?;
                }
            }
            prev = Some(cur);
        }
        root.flush()?;
        drop(root);

        let provisional = next_id as usize;
        let mut map = MergeMap::create(&self.merge_path, provisional)?;
        let ids = map.ids();
        for (i, v) in ids.iter_mut().enumerate() {
            *v = i as u32;
        }
        let mut reader = BufReader::new(File::open(&self.root_path)?);
        while let Some(rec) = read_record(&mut reader)? {
            if let RootRecord::Union(a, b) = rec {
                let (ra, rb) = (find(ids, a), find(ids, b));
                // The smaller id, touched first in scan order, stays the root.
                if ra != rb {
                    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    ids[hi as usize] = lo;
                }
            }
        }
        // Ascending sweep: every parent precedes its child, so one pass both
        // compresses paths and numbers roots in first-touch order.
        let mut k = 0u64;
        for i in 0..provisional {
            if ids[i] == i as u32 {
                k += 1;
                if k > MAX_COMPONENTS {
                    return Err(Error::TooManyComponents(k));
                }
                ids[i] = k as u32;
            } else {
                ids[i] = ids[ids[i] as usize];
            }
        }
        let mut stats = vec![RunStats::empty(); k as usize];
        let mut reader = BufReader::new(File::open(&self.root_path)?);
        while let Some(rec) = read_record(&mut reader)? {
            if let RootRecord::Label(id, s) = rec {
                stats[map.get(id) as usize - 1].merge(&s);
            }
        }
        let components = stats
            .iter()
            .enumerate()
            .map(|(i, s)| Component {
                id: i as u32 + 1,
                voxels: s.count,
                min_x: s.min[0],
                min_y: s.min[1],
                min_z: s.min[2],
                max_x: s.max[0],
                max_y: s.max[1],
                max_z: s.max[2],
                centroid_x: s.sum[0] / s.count as f64,
                centroid_y: s.sum[1] / s.count as f64,
                centroid_z: s.sum[2] / s.count as f64,
            })
            .collect();
        Ok(Merged {
            map,
            table: ComponentTable { components },
        })
    }

    /// Streams `(slice, final labels)` for every z.
    fn pass_two(
        &self,
        merged: &Merged,
        job: Option<&JobControl>,
        mut sink: impl FnMut(&Slice, &[u32]) -> Result<()>,
    ) -> Result<()> {
        let nz = self.volume.meta().nz();
        let mut next_id = 0u64;
        for (z, slice) in self.volume.reader()?.enumerate() {
            if let Some(job) = job {
                job.check()?;
                job.set_progress(0.5 + 0.5 * z as f64 / nz as f64);
            }
            let slice = slice?;
            let runs = self.runs(&slice, &mut next_id)?;
            let labels = runs.paint(|p| merged.map.get(p));
            sink(&slice, &labels)?;
        }
        Ok(())
    }

    fn cleanup(&self) -> Result<()> {
        for p in [&self.root_path, &self.merge_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }
}

fn labeler<'a>(
    volume: &'a SliceVolume,
    connectivity: Connectivity,
    foreground: &'a (dyn Fn(f32) -> bool + Sync),
    out: &Path,
) -> Result<Labeler<'a>> {
    if volume.meta().channels != 1 {
        return Err(Error::ChannelMismatch(format!(
            "component labeling expects one channel, got {}",
            volume.meta().channels
        )));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(Labeler {
        volume,
        connectivity,
        foreground,
        root_path: sibling(out, ".cca-root"),
        merge_path: sibling(out, ".cca-merge"),
    })
}

/// Labels the non-zero voxels of `volume` into a `u32` label volume at
/// `out` (0 = background, components numbered 1..K in first-touch order).
pub fn label_components(
    volume: &SliceVolume,
    connectivity: Connectivity,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<(SliceVolume, ComponentTable)> {
    let out = out.as_ref();
    let fg = |v: f32| v != 0.0;
    let l = labeler(volume, connectivity, &fg, out)?;
    let merged = l.pass_one(job)?;
    let mut meta = volume.meta().clone();
    meta.dtype = DType::U32;
    meta.value_range = None;
    let mut writer = SliceWriter::create(meta, out)?;
    l.pass_two(&merged, job, |_, labels| writer.push_u32(labels))?;
    let labels = writer.finish()?;
    drop(merged.map);
    l.cleanup()?;
    Ok((labels, merged.table))
}

/// Clears foreground components smaller than `min_voxels`; kept voxels
/// retain their values.
pub fn filter_components(
    volume: &SliceVolume,
    connectivity: Connectivity,
    min_voxels: u64,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    let out = out.as_ref();
    let fg = |v: f32| v != 0.0;
    let l = labeler(volume, connectivity, &fg, out)?;
    let merged = l.pass_one(job)?;
    let keep: Vec<bool> = std::iter::once(false)
        .chain(merged.table.components.iter().map(|c| c.voxels >= min_voxels))
        .collect();
    let mut meta = volume.meta().clone();
    meta.value_range = None;
    let mut writer = SliceWriter::create(meta, out)?;
    l.pass_two(&merged, job, |slice, labels| {
        let mut s = slice.clone();
        for (v, &id) in s.data.iter_mut().zip(labels) {
            if !keep[id as usize] {
                *v = 0.0;
            }
        }
        writer.push(&s)
    })?;
    let result = writer.finish()?;
    drop(merged.map);
    l.cleanup()?;
    Ok(result)
}

/// Sets enclosed background components (not touching the volume border
/// under `background_connectivity`) to the dtype's foreground value.
pub fn fill_cavities(
    volume: &SliceVolume,
    background_connectivity: Connectivity,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    let out = out.as_ref();
    let bg = |v: f32| v == 0.0;
    let l = labeler(volume, background_connectivity, &bg, out)?;
    let merged = l.pass_one(job)?;
    let dims = volume.meta().dimensions;
    let fill: Vec<bool> = std::iter::once(false)
        .chain(merged.table.components.iter().map(|c| !c.touches_border(dims)))
        .collect();
    let fg_value = volume.meta().dtype.max_value();
    let mut meta = volume.meta().clone();
    meta.value_range = None;
    let mut writer = SliceWriter::create(meta, out)?;
    l.pass_two(&merged, job, |slice, labels| {
        let mut s = slice.clone();
        for (v, &id) in s.data.iter_mut().zip(labels) {
            if fill[id as usize] {
                *v = fg_value;
            }
        }
        writer.push(&s)
    })?;
    let result = writer.finish()?;
    drop(merged.map);
    l.cleanup()?;
    Ok(result)
}
