//! Voxel-wise comparison of two volumes and per-channel summary statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Slice, SliceVolume, VolumeMeta};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareMode {
    Dice,
    Mad,
    #[default]
    Both,
}

impl CompareMode {
    fn dice(self) -> bool {
        matches!(self, CompareMode::Dice | CompareMode::Both)
    }

    fn mad(self) -> bool {
        matches!(self, CompareMode::Mad | CompareMode::Both)
    }
}

impl std::str::FromStr for CompareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(CompareMode::Dice),
            "mad" => Ok(CompareMode::Mad),
            "both" => Ok(CompareMode::Both),
            other => Err(Error::UnknownName(format!("comparison mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompareOptions {
    pub mode: CompareMode,
    /// Divide absolute differences by the dtype range.
    pub normalized: bool,
    pub histogram: bool,
}

/// Fixed-width bins over `[lo, hi]`; values outside are clamped into the
/// first or last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    #[inline]
    pub fn bin(&self, v: f64) -> usize {
        let n = self.counts.len();
        if !(self.hi > self.lo) {
            return 0;
        }
        let t = (v - self.lo) / (self.hi - self.lo);
        ((t * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin(v);
        self.counts[b] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_a: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_b: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_intersection: Option<u64>,
    /// Per-channel histograms of each input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram_a: Option<Vec<Histogram>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram_b: Option<Vec<Histogram>>,
}

impl ComparisonReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`, and 1 for two empty masks.
pub fn dice_score(count_a: u64, count_b: u64, intersection: u64) -> f64 {
    if count_a + count_b == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (count_a + count_b) as f64
    }
}

fn histogram_range(meta: &VolumeMeta, c: usize) -> (f64, f64) {
    match (&meta.value_range, meta.dtype) {
        (_, dt) if dt.is_integer() => (0.0, dt.range()),
        (Some(r), _) => (r[c][0], r[c][1]),
        (None, _) => (0.0, 1.0),
    }
}

/// Foreground value of a binary mask: the one nonzero value it may hold.
#[derive(Clone, Copy, Debug, Default)]
struct MaskValue(Option<f32>);

impl MaskValue {
    fn check(&mut self, v: f32, which: &str) -> Result<bool> {
        if v == 0.0 {
            return Ok(false);
        }
        match self.0 {
            None => self.0 = Some(v),
            Some(f) if f == v => {}
            Some(f) => {
                return Err(Error::NonBinaryInput(format!(
                    "volume {which} holds both {f} and {v} besides 0"
                )))
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default)]
struct Partial {
    count_a: u64,
    count_b: u64,
    inter: u64,
    abs_diff: f64,
    mask_a: Option<f32>,
    mask_b: Option<f32>,
    hist_a: Vec<Histogram>,
    hist_b: Vec<Histogram>,
}

fn compare_slices(a: &Slice, b: &Slice, meta_a: &VolumeMeta, meta_b: &VolumeMeta, opts: CompareOptions) -> Result<Partial> {
    let mut p = Partial::default();
    if opts.mode.dice() {
        let (mut ma, mut mb) = (MaskValue::default(), MaskValue::default());
        for (&va, &vb) in a.data.iter().zip(&b.data) {
            let fa = ma.check(va, "a")?;
            let fb = mb.check(vb, "b")?;
            p.count_a += fa as u64;
            p.count_b += fb as u64;
            p.inter += (fa && fb) as u64;
        }
        p.mask_a = ma.0;
        p.mask_b = mb.0;
    }
    if opts.mode.mad() {
        p.abs_diff = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    }
    if opts.histogram {
        for (slice, meta, out) in [(a, meta_a, &mut p.hist_a), (b, meta_b, &mut p.hist_b)] {
            for c in 0..meta.channels {
                let (lo, hi) = histogram_range(meta, c);
                let mut h = Histogram::new(lo, hi, HISTOGRAM_BINS);
                slice.channel(c).iter().for_each(|&v| h.add(v as f64));
                out.push(h);
            }
        }
    }
    Ok(p)
}

fn merge_mask(a: Option<f32>, b: Option<f32>, which: &str) -> Result<Option<f32>> {
    match (a, b) {
        (Some(x), Some(y)) if x != y => Err(Error::NonBinaryInput(format!(
            "volume {which} holds both {x} and {y} besides 0"
        ))),
        (x, y) => Ok(x.or(y)),
    }
}

/// Compares two volumes in one simultaneous pass. Dice treats every nonzero
/// voxel as foreground and requires each mask to hold a single nonzero
/// value; the mean absolute difference runs over all voxels and channels.
pub fn compare(a: &SliceVolume, b: &SliceVolume, opts: CompareOptions) -> Result<ComparisonReport> {
    let (ma, mb) = (a.meta(), b.meta());
    if ma.dimensions != mb.dimensions || ma.channels != mb.channels {
        return Err(Error::ShapeMismatch(format!(
            "{:?}x{} vs {:?}x{}",
            ma.dimensions, ma.channels, mb.dimensions, mb.channels
        )));
    }
    let mut total = Partial::default();
    let batch = rayon::current_num_threads().max(1);
    let mut ra = a.reader()?;
    let mut rb = b.reader()?;
    loop {
        let mut pairs = Vec::with_capacity(batch);
        for _ in 0..batch {
            match (ra.next(), rb.next()) {
                (Some(x), Some(y)) => pairs.push((x?, y?)),
                (None, None) => break,
                _ => return Err(Error::Protocol("inputs ended at different slices".into())),
            }
        }
        if pairs.is_empty() {
            break;
        }
        let parts = pairs
            .par_iter()
            .map(|(x, y)| compare_slices(x, y, ma, mb, opts))
            .collect::<Result<Vec<_>>>()?;
        for p in parts {
            total.count_a += p.count_a;
            total.count_b += p.count_b;
            total.inter += p.inter;
            total.abs_diff += p.abs_diff;
            total.mask_a = merge_mask(total.mask_a, p.mask_a, "a")?;
            total.mask_b = merge_mask(total.mask_b, p.mask_b, "b")?;
            if total.hist_a.is_empty() {
                total.hist_a = p.hist_a;
                total.hist_b = p.hist_b;
            } else {
                total.hist_a.iter_mut().zip(&p.hist_a).for_each(|(t, h)| t.merge(h));
                total.hist_b.iter_mut().zip(&p.hist_b).for_each(|(t, h)| t.merge(h));
            }
        }
    }

    let mut report = ComparisonReport::default();
    if opts.mode.dice() {
        report.dice = Some(dice_score(total.count_a, total.count_b, total.inter));
        report.count_a = Some(total.count_a);
        report.count_b = Some(total.count_b);
        report.count_intersection = Some(total.inter);
    }
    if opts.mode.mad() {
        let n = (ma.voxels() * ma.channels) as f64;
        let mut mad = total.abs_diff / n;
        if opts.normalized {
            mad /= ma.dtype.range().max(mb.dtype.range());
        }
        report.mean_abs_diff = Some(mad);
    }
    if opts.histogram {
        report.histogram_a = Some(total.hist_a);
        report.histogram_b = Some(total.hist_b);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

/// Exact per-channel min, max and mean with a 256-bin histogram over
/// `[min, max]`. The range is persisted into `meta.json`; when it is not
/// yet known the volume is read twice.
pub fn volume_stats(volume: &mut SliceVolume) -> Result<Vec<ChannelStats>> {
    let ranges = volume.ensure_value_range()?;
    let meta = volume.meta().clone();
    let channels = meta.channels;
    let mut sums = vec![0.0f64; channels];
    let mut hists: Vec<Histogram> = ranges
        .iter()
        .map(|r| Histogram::new(r[0], r[1], HISTOGRAM_BINS))
        .collect();
    for slice in volume.reader()? {
        let slice = slice?;
        let parts: Vec<(f64, Histogram)> = (0..channels)
            .into_par_iter()
            .map(|c| {
                let mut h = Histogram::new(hists[c].lo, hists[c].hi, HISTOGRAM_BINS);
                let mut s = 0.0f64;
                for &v in slice.channel(c) {
                    s += v as f64;
                    h.add(v as f64);
                }
                (s, h)
            })
            .collect();
        for (c, (s, h)) in parts.into_iter().enumerate() {
            sums[c] += s;
            hists[c].merge(&h);
        }
    }
    let n = meta.voxels() as f64;
    Ok(ranges
        .into_iter()
        .zip(sums)
        .zip(hists)
        .map(|((r, s), histogram)| ChannelStats {
            min: r[0],
            max: r[1],
            mean: s / n,
            histogram,
        })
        .collect())
}
