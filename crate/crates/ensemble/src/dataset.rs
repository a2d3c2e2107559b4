//! Ensemble discovery from `root/<member>/<step>` directory trees and the
//! `ensemble.json` metadata cache.
//!
//! A step entry is either a native volume directory (one field, named by
//! the volume's `field` metadata or `value`) or a directory holding one
//! native volume per field, named by the field.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxstream::volume::{read_meta, SliceVolume, VolumeMeta, DATA_FILE, META_FILE};
use voxstream::JobControl;

use crate::error::{Error, Result};

pub const CACHE_FILE: &str = "ensemble.json";
pub const FORMAT_VERSION: u32 = 1;
/// Field name of single-field steps whose metadata names none.
pub const DEFAULT_FIELD: &str = "value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRef {
    /// Relative to the ensemble root.
    pub path: PathBuf,
    pub meta: VolumeMeta,
    /// Per-channel `[min, max]`.
    pub range: Vec<[f64; 2]>,
    /// `[min, max]` of the vector magnitude for 3-channel fields.
    pub magnitude: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    /// Seconds.
    pub time: f64,
    /// Entry name inside the member directory.
    pub name: String,
    pub fields: BTreeMap<String, VolumeRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub name: String,
    /// Sorted by time, ties by entry name.
    pub steps: Vec<TimeStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldInfo {
    pub channels: usize,
    pub range: Vec<[f64; 2]>,
    pub magnitude: Option<[f64; 2]>,
}

impl FieldInfo {
    pub fn is_vector(&self) -> bool {
        self.channels == 3
    }
}

/// Axis-aligned box in mm.
pub type Bounds = [[f64; 3]; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDataset {
    #[serde(skip)]
    root: PathBuf,
    pub members: Vec<Member>,
    pub fields: BTreeMap<String, FieldInfo>,
    /// Fields present in every time step of every member.
    pub common_fields: Vec<String>,
    pub common_time_range: Option<[f64; 2]>,
    pub union_time_range: Option<[f64; 2]>,
    pub common_bounds: Option<Bounds>,
    pub union_bounds: Option<Bounds>,
}

/// One `(member, step)` pair; `step` indexes the member's sorted steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordId {
    pub member: String,
    pub step: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Filter {
    Members(BTreeSet<String>),
    /// Inclusive time window in seconds.
    Time([f64; 2]),
    Fields(BTreeSet<String>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CachePolicy {
    /// Read `ensemble.json` when its fingerprints match, write it otherwise.
    #[default]
    Use,
    /// Rescan and rewrite the cache.
    Refresh,
    /// Neither read nor write the cache.
    Ignore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanReport {
    pub from_cache: bool,
    /// Volumes whose payload had to be read for value ranges.
    pub volumes_read: usize,
    pub warnings: Vec<String>,
}

/// Size and modification time of a file, `[bytes, nanoseconds]`.
type Stamp = [u64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Fingerprint {
    path: PathBuf,
    meta: Stamp,
    data: Stamp,
}

#[derive(Serialize, Deserialize)]
struct CacheDoc {
    format_version: u32,
    fingerprints: Vec<Fingerprint>,
    dataset: EnsembleDataset,
}

struct Found {
    member: String,
    step: String,
    field: String,
    path: PathBuf,
    meta: VolumeMeta,
    fingerprint: Fingerprint,
}

fn stamp(path: &Path) -> Result<Stamp> {
    let md = fs::metadata(path)?;
    let mtime = md.modified()?.duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
    Ok([md.len(), mtime])
}

fn sorted_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && entry.file_type()?.is_dir() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn is_volume(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

fn discover(root: &Path, warnings: &mut Vec<String>) -> Result<Vec<Found>> {
    let mut found = Vec::new();
    let mut push = |member: &str, step: &str, field: String, dir: &Path| -> Result<()> {
        let meta = read_meta(dir)?;
        let rel = dir.strip_prefix(root).unwrap_or(dir).to_path_buf();
        found.push(Found {
            member: member.to_string(),
            step: step.to_string(),
            field,
            fingerprint: Fingerprint {
                path: rel.clone(),
                meta: stamp(&dir.join(META_FILE))?,
                data: stamp(&dir.join(DATA_FILE))?,
            },
            path: rel,
            meta,
        });
        Ok(())
    };
    for (member, mdir) in sorted_dirs(root)? {
        let mut any = false;
        for (step, sdir) in sorted_dirs(&mdir)? {
            if is_volume(&sdir) {
                let meta = read_meta(&sdir)?;
                let field = meta.field_name.clone().unwrap_or_else(|| DEFAULT_FIELD.to_string());
                push(&member, &step, field, &sdir)?;
                any = true;
                continue;
            }
            for (field, fdir) in sorted_dirs(&sdir)? {
                if is_volume(&fdir) {
                    push(&member, &step, field, &fdir)?;
                    any = true;
                }
            }
        }
        if !any {
            warnings.push(format!("member {member:?} has no volumes and is skipped"));
        }
    }
    Ok(found)
}

/// Per-channel range and, for 3 channels, the magnitude range in one pass.
fn measure(dir: &Path, meta: &VolumeMeta) -> Result<(Vec<[f64; 2]>, Option<[f64; 2]>)> {
    let vol = SliceVolume::open(dir)?;
    let channels = meta.channels;
    let mut range = vec![[f64::INFINITY, f64::NEG_INFINITY]; channels];
    let mut mag = [f64::INFINITY, f64::NEG_INFINITY];
    for slice in vol.reader()? {
        let slice = slice?;
        for (c, r) in range.iter_mut().enumerate() {
            for &v in slice.channel(c) {
                r[0] = r[0].min(v as f64);
                r[1] = r[1].max(v as f64);
            }
        }
        if channels == 3 {
            let (x, y, z) = (slice.channel(0), slice.channel(1), slice.channel(2));
            for i in 0..x.len() {
                let m = vector_magnitude([x[i], y[i], z[i]]);
                mag[0] = mag[0].min(m);
                mag[1] = mag[1].max(m);
            }
        }
    }
    Ok((range, (channels == 3).then_some(mag)))
}

pub(crate) fn vector_magnitude(v: [f32; 3]) -> f64 {
    let [x, y, z] = v.map(|c| c as f64);
    (x * x + y * y + z * z).sqrt()
}

fn build(root: &Path, found: Vec<Found>, job: Option<&JobControl>, report: &mut ScanReport) -> Result<EnsembleDataset> {
    let done = std::sync::atomic::AtomicUsize::new(0);
    let total = found.len().max(1);
    let measured: Vec<(Vec<[f64; 2]>, Option<[f64; 2]>, bool)> = found
        .par_iter()
        .map(|f| {
            if let Some(job) = job {
                job.check()?;
            }
            let needs_read = f.meta.value_range.is_none() || f.meta.channels == 3;
            let out = if needs_read {
                let (range, mag) = measure(&root.join(&f.path), &f.meta)?;
                (f.meta.value_range.clone().unwrap_or(range), mag, true)
            } else {
                (f.meta.value_range.clone().unwrap_or_default(), None, false)
            };
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if let Some(job) = job {
                job.set_progress(n as f64 / total as f64);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    report.volumes_read = measured.iter().filter(|m| m.2).count();

    // member -> step name -> fields
    let mut tree: BTreeMap<String, BTreeMap<String, BTreeMap<String, VolumeRef>>> = BTreeMap::new();
    for (f, (range, magnitude, _)) in found.into_iter().zip(measured) {
        tree.entry(f.member).or_default().entry(f.step).or_default().insert(
            f.field,
            VolumeRef {
                path: f.path,
                meta: f.meta,
                range,
                magnitude,
            },
        );
    }
    let mut members = Vec::new();
    for (name, steps) in tree {
        let mut steps: Vec<TimeStep> = steps
            .into_iter()
            .enumerate()
            .map(|(rank, (step, fields))| {
                let time = fields.values().find_map(|v| v.meta.timestamp).unwrap_or(rank as f64);
                TimeStep { time, name: step, fields }
            })
            .collect();
        steps.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.name.cmp(&b.name)));
        for w in steps.windows(2) {
            if w[0].time == w[1].time {
                let msg = format!(
                    "member {name:?}: steps {:?} and {:?} share timestamp {}; ordered by name",
                    w[0].name, w[1].name, w[0].time
                );
                log::warn!("{msg}");
                report.warnings.push(msg);
            }
        }
        members.push(Member { name, steps });
    }
    EnsembleDataset::from_members(root.to_path_buf(), members)
}

/// Scans an ensemble root. A valid `ensemble.json` inside the root replaces
/// reading volume payloads; only the per-volume headers are read then.
pub fn scan_ensemble(
    root: impl AsRef<Path>,
    policy: CachePolicy,
    job: Option<&JobControl>,
) -> Result<(EnsembleDataset, ScanReport)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::EmptyEnsemble(format!("{} is not a directory", root.display())));
    }
    let mut report = ScanReport::default();
    let found = discover(root, &mut report.warnings)?;
    if found.is_empty() {
        return Err(Error::EmptyEnsemble(root.display().to_string()));
    }
    let fingerprints: Vec<Fingerprint> = found.iter().map(|f| f.fingerprint.clone()).collect();
    let cache = root.join(CACHE_FILE);
    if policy == CachePolicy::Use && cache.is_file() {
        match serde_json::from_slice::<CacheDoc>(&fs::read(&cache)?) {
            Ok(doc) if doc.format_version == FORMAT_VERSION && doc.fingerprints == fingerprints => {
                let mut dataset = doc.dataset;
                dataset.root = root.to_path_buf();
                report.from_cache = true;
                return Ok((dataset, report));
            }
            Ok(_) => log::info!("{} is stale, rescanning", cache.display()),
            Err(e) => log::warn!("ignoring unreadable {}: {e}", cache.display()),
        }
    }
    let dataset = build(root, found, job, &mut report)?;
    if policy != CachePolicy::Ignore {
        let doc = CacheDoc {
            format_version: FORMAT_VERSION,
            fingerprints,
            dataset: dataset.clone(),
        };
        let tmp = root.join(format!("{CACHE_FILE}.partial"));
        fs::write(&tmp, serde_json::to_vec_pretty(&doc)?)?;
        fs::rename(&tmp, &cache)?;
    }
    Ok((dataset, report))
}

fn union_range(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0].min(b[0]), a[1].max(b[1])]
}

impl EnsembleDataset {
    fn from_members(root: PathBuf, members: Vec<Member>) -> Result<Self> {
        let members: Vec<Member> = members.into_iter().filter(|m| !m.steps.is_empty()).collect();
        if members.is_empty() {
            return Err(Error::EmptyEnsemble(root.display().to_string()));
        }
        let mut fields: BTreeMap<String, FieldInfo> = BTreeMap::new();
        let mut common: Option<BTreeSet<String>> = None;
        let mut common_time: Option<[f64; 2]> = None;
        let mut union_time: Option<[f64; 2]> = None;
        let mut common_bounds: Option<Bounds> = None;
        let mut union_bounds: Option<Bounds> = None;
        let mut first = true;
        for m in &members {
            let span = [m.steps[0].time, m.steps[m.steps.len() - 1].time];
            union_time = Some(union_time.map_or(span, |u| union_range(u, span)));
            common_time = Some(common_time.map_or(span, |c| [c[0].max(span[0]), c[1].min(span[1])]));
            for s in &m.steps {
                let names: BTreeSet<String> = s.fields.keys().cloned().collect();
                common = Some(match common {
                    None => names,
                    Some(c) => c.intersection(&names).cloned().collect(),
                });
                for (name, v) in &s.fields {
                    match fields.get_mut(name) {
                        None => {
                            fields.insert(
                                name.clone(),
                                FieldInfo {
                                    channels: v.meta.channels,
                                    range: v.range.clone(),
                                    magnitude: v.magnitude,
                                },
                            );
                        }
                        Some(info) => {
                            if info.channels != v.meta.channels {
                                return Err(Error::ShapeMismatch(format!(
                                    "field {name:?} has {} channels in {} but {} elsewhere",
                                    v.meta.channels,
                                    v.path.display(),
                                    info.channels
                                )));
                            }
                            for (r, x) in info.range.iter_mut().zip(&v.range) {
                                *r = union_range(*r, *x);
                            }
                            info.magnitude = match (info.magnitude, v.magnitude) {
                                (Some(a), Some(b)) => Some(union_range(a, b)),
                                (a, b) => a.or(b),
                            };
                        }
                    }
                    let (lo, hi) = v.meta.bounds_mm();
                    if first {
                        common_bounds = Some([lo, hi]);
                        union_bounds = Some([lo, hi]);
                        first = false;
                    } else {
                        let u = union_bounds.as_mut().expect("set with common");
                        for a in 0..3 {
                            u[0][a] = u[0][a].min(lo[a]);
                            u[1][a] = u[1][a].max(hi[a]);
                        }
                        common_bounds = common_bounds.and_then(|c| {
                            let b = [
                                std::array::from_fn(|a| c[0][a].max(lo[a])),
                                std::array::from_fn(|a| c[1][a].min(hi[a])),
                            ];
                            (0..3).all(|a| b[0][a] < b[1][a]).then_some(b)
                        });
                    }
                }
            }
        }
        Ok(EnsembleDataset {
            root,
            members,
            fields,
            common_fields: common.unwrap_or_default().into_iter().collect(),
            common_time_range: common_time.filter(|c| c[0] <= c[1]),
            union_time_range: union_time,
            common_bounds,
            union_bounds,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn member(&self, name: &str) -> Result<&Member> {
        self.members
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownName(format!("member {name:?}")))
    }

    pub fn field(&self, name: &str) -> Result<&FieldInfo> {
        self.fields.get(name).ok_or_else(|| Error::UnknownName(format!("field {name:?}")))
    }

    pub fn member_names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name.clone()).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.members.iter().map(|m| m.steps.len()).sum()
    }

    pub fn volume(&self, member: &str, step: usize, field: &str) -> Result<&VolumeRef> {
        let m = self.member(member)?;
        let s = m
            .steps
            .get(step)
            .ok_or_else(|| Error::UnknownName(format!("member {member:?} has no step {step}")))?;
        s.fields
            .get(field)
            .ok_or_else(|| Error::MissingField(format!("{field:?} at {member:?} step {step}")))
    }

    pub fn volume_path(&self, v: &VolumeRef) -> PathBuf {
        self.root.join(&v.path)
    }

    pub fn open_volume(&self, v: &VolumeRef) -> Result<SliceVolume> {
        Ok(SliceVolume::open(self.volume_path(v))?)
    }

    /// Every `(member, step)` carrying `field`, in member then time order.
    pub fn records(&self, field: &str) -> Vec<RecordId> {
        self.members
            .iter()
            .flat_map(|m| {
                m.steps.iter().enumerate().filter(|(_, s)| s.fields.contains_key(field)).map(|(i, s)| RecordId {
                    member: m.name.clone(),
                    step: i,
                    time: s.time,
                })
            })
            .collect()
    }

    /// Metadata-only view. Steps left without fields and members left
    /// without steps are dropped.
    pub fn filter(&self, filter: &Filter) -> Result<EnsembleDataset> {
        let mut members = self.members.clone();
        match filter {
            Filter::Members(names) => {
                for n in names {
                    self.member(n)?;
                }
                members.retain(|m| names.contains(&m.name));
            }
            Filter::Time([t0, t1]) => {
                if t0 > t1 {
                    return Err(Error::InvalidParameter(format!("time window [{t0}, {t1}]")));
                }
                for m in &mut members {
                    m.steps.retain(|s| s.time >= *t0 && s.time <= *t1);
                }
            }
            Filter::Fields(names) => {
                for n in names {
                    self.field(n)?;
                }
                for m in &mut members {
                    for s in &mut m.steps {
                        s.fields.retain(|f, _| names.contains(f));
                    }
                    m.steps.retain(|s| !s.fields.is_empty());
                }
            }
        }
        members.retain(|m| !m.steps.is_empty());
        EnsembleDataset::from_members(self.root.clone(), members)
    }

    /// Nearest step of `member` to `time`; ties go to the earlier step.
    pub fn nearest_step(&self, member: &str, time: f64) -> Result<usize> {
        let m = self.member(member)?;
        let mut best = 0;
        for (i, s) in m.steps.iter().enumerate() {
            if (s.time - time).abs() < (m.steps[best].time - time).abs() {
                best = i;
            }
        }
        Ok(best)
    }
}
