//! Parallel-coordinates data: values at shared spatial samples per run,
//! time and axis, brushing, transfer-function clamping and per-voxel
//! intersection masks.
//!
//! The value array is split into `(run, axis)` blocks of `samples x times`
//! values; the block of run `r` and axis `a` starts at
//! `(r * axes + a) * samples * times` and holds sample `s` at time `t` at
//! `t * samples + s`. A line is one `(run, time, sample)` tuple with id
//! `r * samples * times + t * samples + s`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxstream::render::TransferFunction;
use voxstream::volume::{DType, Slice, SliceVolume, SliceWriter, VolumeMeta};
use voxstream::JobControl;

use crate::dataset::{vector_magnitude, EnsembleDataset};
use crate::error::{Error, Result};
use crate::sampling::{sample_positions, sample_volume, Sampling};

pub const PARCOORDS_MAGIC: &[u8; 8] = b"VXPCD001";
/// Brushes driving transfer functions.
pub const MAX_TF_AXES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AxisSource {
    /// One channel of a field at the sampled times.
    Channel { field: String, channel: usize },
    /// A field at one step (time-histogram mode); vector fields give their
    /// magnitude.
    Step { field: String, step: usize, time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub source: AxisSource,
    /// Value range of the whole field or channel, from scan metadata.
    pub range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParCoordsHeader {
    pub version: u32,
    pub axes: Vec<Axis>,
    pub runs: Vec<String>,
    pub samples: usize,
    /// One time per temporal sample; a single entry in time-histogram mode.
    pub times: Vec<f64>,
    /// `steps[run][t]`: step each sampled time snapped to.
    pub steps: Vec<Vec<usize>>,
    pub seed: u64,
    pub mask: Option<String>,
    pub positions: Vec<[f64; 3]>,
}

impl ParCoordsHeader {
    /// Values per `(run, axis)` block.
    pub fn block_len(&self) -> usize {
        self.samples * self.times.len()
    }

    pub fn offset(&self, run: usize, axis: usize) -> usize {
        (run * self.axes.len() + axis) * self.block_len()
    }

    pub fn lines(&self) -> usize {
        self.runs.len() * self.block_len()
    }

    pub fn total_len(&self) -> usize {
        self.lines() * self.axes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParCoordsData {
    pub header: ParCoordsHeader,
    pub values: Vec<f32>,
}

/// Identity of a line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineId {
    pub run: usize,
    pub time: usize,
    pub sample: usize,
}

impl ParCoordsData {
    pub fn block(&self, run: usize, axis: usize) -> &[f32] {
        let o = self.header.offset(run, axis);
        &self.values[o..o + self.header.block_len()]
    }

    pub fn value(&self, line: usize, axis: usize) -> f32 {
        let b = self.header.block_len();
        self.values[self.header.offset(line / b, axis) + line % b]
    }

    pub fn line_id(&self, line: usize) -> LineId {
        let b = self.header.block_len();
        let n = self.header.samples;
        LineId {
            run: line / b,
            time: line % b / n,
            sample: line % n,
        }
    }

    /// Magic, header length (u64 LE), JSON header, padding to 4 bytes,
    /// then the values as f32 LE.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec(&self.header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PARCOORDS_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&vec![0u8; (16 + json.len()).next_multiple_of(4) - 16 - json.len()])?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != PARCOORDS_MAGIC {
            return Err(Error::Malformed(format!("{} is not a parallel-coordinates file", path.display())));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Malformed(format!("{}: truncated header", path.display())))?;
        let header: ParCoordsHeader = serde_json::from_slice(json)?;
        let body = &bytes[(16 + len).next_multiple_of(4)..];
        if body.len() != header.total_len() * 4 {
            return Err(Error::Malformed(format!(
                "{}: {} value bytes, expected {}",
                path.display(),
                body.len(),
                header.total_len() * 4
            )));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(ParCoordsData { header, values })
    }

    /// Summary for clients: axes, runs, counts and times.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "axes": self.header.axes,
            "runs": self.header.runs,
            "samples": self.header.samples,
            "times": self.header.times,
            "lines": self.header.lines(),
            "seed": self.header.seed,
        })
    }
}

fn uniform_times(range: [f64; 2], count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![range[0]];
    }
    (0..count)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (count - 1) as f64)
        .collect()
}

fn channel_axes(dataset: &EnsembleDataset, fields: &[String]) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for field in fields {
        let info = dataset.field(field)?;
        for c in 0..info.channels {
            axes.push(Axis {
                name: if info.channels == 1 { field.clone() } else { format!("{field}[{c}]") },
                source: AxisSource::Channel {
                    field: field.clone(),
                    channel: c,
                },
                range: info.range[c],
            });
        }
    }
    Ok(axes)
}

/// Samples `fields` at `samples` shared random positions and `times`
/// uniform times over the common time range, each snapped to the nearest
/// step of every run.
pub fn extract_parcoords(
    dataset: &EnsembleDataset,
    fields: &[String],
    samples: usize,
    times: usize,
    seed: u64,
    mask: Option<&SliceVolume>,
    job: Option<&JobControl>,
) -> Result<ParCoordsData> {
    if fields.is_empty() {
        return Err(Error::InvalidParameter("no fields requested".into()));
    }
    if times == 0 {
        return Err(Error::InvalidParameter("temporal sample count must be >= 1".into()));
    }
    let axes = channel_axes(dataset, fields)?;
    let time_range = dataset
        .common_time_range
        .ok_or_else(|| Error::InvalidParameter("members share no time range".into()))?;
    let positions = sample_positions(dataset, Sampling::Random { count: samples, seed }, mask)?;
    let sample_times = uniform_times(time_range, times);
    let runs = dataset.member_names();
    let steps: Vec<Vec<usize>> = runs
        .iter()
        .map(|r| sample_times.iter().map(|&t| dataset.nearest_step(r, t)).collect())
        .collect::<Result<_>>()?;
    let header = ParCoordsHeader {
        version: 1,
        axes,
        runs,
        samples,
        times: sample_times,
        steps,
        seed,
        mask: mask.map(|m| m.path().display().to_string()),
        positions,
    };

    // Each distinct (run, step) is sampled once, whatever number of
    // temporal samples snap to it.
    let jobs: Vec<(usize, usize)> = header
        .steps
        .iter()
        .enumerate()
        .flat_map(|(r, s)| s.iter().copied().collect::<BTreeSet<_>>().into_iter().map(move |s| (r, s)))
        .collect();
    let sampled: BTreeMap<(usize, usize), Vec<Vec<f32>>> = jobs
        .par_iter()
        .map(|&(r, s)| {
            if let Some(job) = job {
                job.check()?;
            }
            let per_field = fields
                .iter()
                .map(|f| {
                    let v = dataset.volume(&header.runs[r], s, f)?;
                    sample_volume(&dataset.open_volume(v)?, &header.positions)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(((r, s), per_field))
        })
        .collect::<Result<_>>()?;

    let n = samples;
    let mut values = vec![0.0f32; header.total_len()];
    for (r, steps) in header.steps.iter().enumerate() {
        for (t, s) in steps.iter().enumerate() {
            let per_field = &sampled[&(r, *s)];
            let mut axis = 0;
            for planar in per_field {
                for c in 0..planar.len() / n {
                    let o = header.offset(r, axis) + t * n;
                    values[o..o + n].copy_from_slice(&planar[c * n..(c + 1) * n]);
                    axis += 1;
                }
            }
        }
    }
    if let Some(job) = job {
        job.set_progress(1.0);
    }
    Ok(ParCoordsData { header, values })
}

/// One axis per step of `field` (chronological), one run per member; all
/// members must carry the field at the same number of steps.
pub fn time_histogram_axes(
    dataset: &EnsembleDataset,
    field: &str,
    members: Option<&BTreeSet<String>>,
    samples: usize,
    seed: u64,
    mask: Option<&SliceVolume>,
    job: Option<&JobControl>,
) -> Result<ParCoordsData> {
    let info = dataset.field(field)?;
    let range = if info.is_vector() {
        info.magnitude
            .ok_or_else(|| Error::Malformed(format!("field {field:?} has no magnitude range")))?
    } else if info.channels == 1 {
        info.range[0]
    } else {
        return Err(Error::InvalidParameter(format!(
            "time histograms need a scalar or vector field, {field:?} has {} channels",
            info.channels
        )));
    };
    if let Some(names) = members {
        if names.is_empty() {
            return Err(Error::InvalidParameter("member selection is empty".into()));
        }
        for n in names {
            dataset.member(n)?;
        }
    }
    let runs: Vec<&crate::dataset::Member> = dataset
        .members
        .iter()
        .filter(|m| members.is_none_or(|names| names.contains(&m.name)))
        .collect();
    let first = runs.first().ok_or_else(|| Error::EmptyEnsemble("no members selected".into()))?;
    let step_count = first.steps.len();
    for m in &runs {
        if m.steps.len() != step_count {
            return Err(Error::ShapeMismatch(format!(
                "member {:?} has {} steps, {:?} has {step_count}",
                m.name,
                m.steps.len(),
                first.name
            )));
        }
        if let Some(i) = m.steps.iter().position(|s| !s.fields.contains_key(field)) {
            return Err(Error::MissingField(format!("{field:?} at {:?} step {i}", m.name)));
        }
    }
    let positions = sample_positions(dataset, Sampling::Random { count: samples, seed }, mask)?;
    let axes = first
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| Axis {
            name: format!("{field}@{}", s.time),
            source: AxisSource::Step {
                field: field.to_string(),
                step: i,
                time: s.time,
            },
            range,
        })
        .collect();
    let header = ParCoordsHeader {
        version: 1,
        axes,
        runs: runs.iter().map(|m| m.name.clone()).collect(),
        samples,
        times: vec![first.steps.first().map_or(0.0, |s| s.time)],
        steps: runs.iter().map(|_| vec![0]).collect(),
        seed,
        mask: mask.map(|m| m.path().display().to_string()),
        positions,
    };
    let jobs: Vec<(usize, usize)> = (0..runs.len()).flat_map(|r| (0..step_count).map(move |s| (r, s))).collect();
    let blocks: Vec<Vec<f32>> = jobs
        .par_iter()
        .map(|&(r, s)| {
            if let Some(job) = job {
                job.check()?;
            }
            let v = dataset.volume(&runs[r].name, s, field)?;
            let planar = sample_volume(&dataset.open_volume(v)?, &header.positions)?;
            Ok(if info.is_vector() {
                (0..samples)
                    .map(|i| vector_magnitude([planar[i], planar[samples + i], planar[2 * samples + i]]) as f32)
                    .collect()
            } else {
                planar
            })
        })
        .collect::<Result<_>>()?;
    // Jobs are in (run, axis) order, matching the block layout.
    Ok(ParCoordsData {
        header,
        values: blocks.concat(),
    })
}

/// Per-axis intervals in data units; `None` leaves an axis unconstrained.
/// `order` is the display order of the axes and does not affect selection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BrushSelection {
    pub intervals: Vec<Option<[f64; 2]>>,
    #[serde(default)]
    pub order: Vec<usize>,
}

impl BrushSelection {
    pub fn none(axes: usize) -> Self {
        BrushSelection {
            intervals: vec![None; axes],
            order: (0..axes).collect(),
        }
    }

    pub fn with(mut self, axis: usize, interval: [f64; 2]) -> Self {
        self.intervals[axis] = Some(interval);
        self
    }

    fn validate(&self, axes: usize) -> Result<()> {
        if self.intervals.len() != axes {
            return Err(Error::InvalidParameter(format!(
                "selection has {} intervals for {axes} axes",
                self.intervals.len()
            )));
        }
        if !self.order.is_empty() {
            let mut seen = self.order.clone();
            seen.sort_unstable();
            if seen != (0..axes).collect::<Vec<_>>() {
                return Err(Error::InvalidParameter(format!("axis order {:?} is not a permutation", self.order)));
            }
        }
        if let Some([lo, hi]) = self.intervals.iter().flatten().find(|[lo, hi]| !(lo <= hi)) {
            return Err(Error::InvalidParameter(format!("brush [{lo}, {hi}] needs lo <= hi")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrushResult {
    /// Selected line ids, ascending.
    pub lines: Vec<usize>,
    /// Per axis, the fraction of all lines inside its interval (1 when
    /// unbrushed).
    pub fractions: Vec<f64>,
}

fn within(v: f32, [lo, hi]: [f64; 2]) -> bool {
    let v = v as f64;
    v >= lo && v <= hi
}

/// Lines whose value on every brushed axis lies inside that axis's interval.
pub fn apply_brush(data: &ParCoordsData, selection: &BrushSelection) -> Result<BrushResult> {
    let axes = data.header.axes.len();
    selection.validate(axes)?;
    let lines = data.header.lines();
    let brushed: Vec<(usize, [f64; 2])> =
        selection.intervals.iter().enumerate().filter_map(|(a, i)| i.map(|i| (a, i))).collect();
    let fractions = selection
        .intervals
        .iter()
        .enumerate()
        .map(|(a, i)| match i {
            None => 1.0,
            Some(i) => {
                let hits = (0..lines).filter(|&l| within(data.value(l, a), *i)).count();
                if lines == 0 { 1.0 } else { hits as f64 / lines as f64 }
            }
        })
        .collect();
    let selected = (0..lines).filter(|&l| brushed.iter().all(|&(a, i)| within(data.value(l, a), i))).collect();
    Ok(BrushResult {
        lines: selected,
        fractions,
    })
}

/// Restricts each `(axis, tf)` pair's window to the axis brush and makes
/// values outside it transparent. A brush spanning the whole axis range
/// leaves the transfer function unchanged; a brush disjoint from the window
/// makes it fully transparent.
pub fn tf_clamp(
    data: &ParCoordsData,
    selection: &BrushSelection,
    tfs: &[(usize, TransferFunction)],
) -> Result<Vec<TransferFunction>> {
    if tfs.len() > MAX_TF_AXES {
        return Err(Error::TooManyAxes(tfs.len()));
    }
    selection.validate(data.header.axes.len())?;
    tfs.iter()
        .map(|(axis, tf)| {
            let range = data
                .header
                .axes
                .get(*axis)
                .ok_or_else(|| Error::InvalidParameter(format!("axis {axis} of {}", data.header.axes.len())))?
                .range;
            let brush = selection.intervals[*axis].filter(|[lo, hi]| !(*lo <= range[0] && *hi >= range[1]));
            Ok(match brush {
                None => tf.clone(),
                Some(brush) => clamp_window(tf, brush),
            })
        })
        .collect()
}

fn clamp_window(tf: &TransferFunction, [lo, hi]: [f64; 2]) -> TransferFunction {
    let [w0, w1] = tf.window;
    let (n0, n1) = (w0.max(lo), w1.min(hi));
    if !(n0 < n1) {
        let mut out = TransferFunction::new(tf.window, tf.points.iter().map(|p| [p[0], p[1], p[2], p[3], 0.0]).collect());
        out.clip = true;
        return out;
    }
    // Keep the color at every data value: resample the end points, move the
    // interior ones into the new window's normalized coordinates.
    let to_new = |p: f64| (w0 + p * (w1 - w0) - n0) / (n1 - n0);
    let end = |v: f64| tf.lookup(v as f32);
    let mut points = Vec::with_capacity(tf.points.len() + 2);
    let [r, g, b, a] = end(n0);
    points.push([0.0, r, g, b, a]);
    points.extend(tf.points.iter().map(|p| [to_new(p[0]), p[1], p[2], p[3], p[4]]).filter(|p| p[0] > 0.0 && p[0] < 1.0));
    let [r, g, b, a] = end(n1);
    points.push([1.0, r, g, b, a]);
    let mut out = TransferFunction::new([n0, n1], points);
    out.clip = true;
    out
}

fn same_lattice(a: &VolumeMeta, b: &VolumeMeta) -> bool {
    let close = |x: [f64; 3], y: [f64; 3]| (0..3).all(|i| (x[i] - y[i]).abs() <= 1e-9 * (1.0 + x[i].abs()));
    a.dimensions == b.dimensions && close(a.spacing, b.spacing) && close(a.offset, b.offset)
}

/// Voxels of `(member, step)` whose value on every brushed axis lies in its
/// interval, as a `u8` volume of 0 and 255. All involved fields are
/// streamed slice by slice together.
pub fn intersection_mask(
    dataset: &EnsembleDataset,
    data: &ParCoordsData,
    member: &str,
    step: usize,
    selection: &BrushSelection,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    selection.validate(data.header.axes.len())?;
    // (field, channel or magnitude, interval)
    let mut terms: Vec<(String, Option<usize>, [f64; 2])> = Vec::new();
    for (axis, interval) in data.header.axes.iter().zip(&selection.intervals) {
        let Some(interval) = interval else { continue };
        match &axis.source {
            AxisSource::Channel { field, channel } => terms.push((field.clone(), Some(*channel), *interval)),
            AxisSource::Step { field, step: s, .. } if *s == step => {
                let vector = dataset.field(field)?.is_vector();
                terms.push((field.clone(), (!vector).then_some(0), *interval));
            }
            AxisSource::Step { .. } => {}
        }
    }
    let mut volumes: BTreeMap<String, SliceVolume> = BTreeMap::new();
    for (field, _, _) in &terms {
        if !volumes.contains_key(field) {
            let v = dataset.volume(member, step, field)?;
            volumes.insert(field.clone(), dataset.open_volume(v)?);
        }
    }
    let grid = match volumes.values().next() {
        Some(v) => v.meta().clone(),
        None => {
            let (_, any) = dataset.member(member)?.steps.get(step).and_then(|s| s.fields.iter().next()).ok_or_else(
                || Error::UnknownName(format!("member {member:?} has no step {step}")),
            )?;
            any.meta.clone()
        }
    };
    if let Some((f, v)) = volumes.iter().find(|(_, v)| !same_lattice(v.meta(), &grid)) {
        return Err(Error::ShapeMismatch(format!("field {f:?} at {} differs in grid", v.path().display())));
    }
    let mut meta = grid;
    meta.dtype = DType::U8;
    meta.channels = 1;
    meta.value_range = None;
    let [nx, ny, nz] = meta.dimensions;
    let mut writer = SliceWriter::create(meta, out)?;
    let mut readers = volumes
        .iter()
        .map(|(f, v)| Ok((f.clone(), v.reader()?)))
        .collect::<Result<Vec<_>>>()?;
    for z in 0..nz {
        if let Some(job) = job {
            job.check()?;
        }
        let mut slices: BTreeMap<&str, Slice> = BTreeMap::new();
        for (f, r) in &mut readers {
            let s = r
                .next()
                .ok_or_else(|| Error::Malformed(format!("field {f:?} ended at slice {z}")))??;
            slices.insert(f.as_str(), s);
        }
        let n = nx * ny;
        let data = (0..n)
            .map(|i| {
                let hit = terms.iter().all(|(f, c, interval)| {
                    let s = &slices[f.as_str()];
                    let v = match c {
                        Some(c) => s.channel(*c)[i],
                        None => vector_magnitude([s.channel(0)[i], s.channel(1)[i], s.channel(2)[i]]) as f32,
                    };
                    within(v, *interval)
                });
                if hit {
                    255.0
                } else {
                    0.0
                }
            })
            .collect();
        writer.push(&Slice {
            nx,
            ny,
            channels: 1,
            data,
        })?;
        if let Some(job) = job {
            job.set_progress((z + 1) as f64 / nz as f64);
        }
    }
    Ok(writer.finish()?)
}
