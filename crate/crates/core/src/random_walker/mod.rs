//! Seeded two-class random walker segmentation: an exact in-core solver and
//! a hierarchical coarse-to-fine scheme over a brick octree.

mod hierarchical;
mod solver;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hierarchical::{hrw_update, HrwReport, ProbabilityOctree};

use crate::error::{Error, Result};
use crate::volume::{DType, DenseVolume, Slice, SliceVolume, SliceWriter, VolumeMeta};

/// Foreground and background seed voxels. Persisted as
/// `{"foreground": [[x, y, z], ...], "background": [...]}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    #[serde(default)]
    pub foreground: BTreeSet<[usize; 3]>,
    #[serde(default)]
    pub background: BTreeSet<[usize; 3]>,
    #[serde(default)]
    pub revision: u64,
}

impl LabelSet {
    pub fn new(
        foreground: impl IntoIterator<Item = [usize; 3]>,
        background: impl IntoIterator<Item = [usize; 3]>,
    ) -> Self {
        LabelSet {
            foreground: foreground.into_iter().collect(),
            background: background.into_iter().collect(),
            revision: 0,
        }
    }

    pub fn add_foreground(&mut self, p: [usize; 3]) {
        self.background.remove(&p);
        self.foreground.insert(p);
        self.revision += 1;
    }

    pub fn add_background(&mut self, p: [usize; 3]) {
        self.foreground.remove(&p);
        self.background.insert(p);
        self.revision += 1;
    }

    pub fn remove(&mut self, p: [usize; 3]) {
        self.foreground.remove(&p);
        self.background.remove(&p);
        self.revision += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if let Some(p) = self.foreground.intersection(&self.background).next() {
            return Err(Error::InvalidParameter(format!("voxel {p:?} is both foreground and background")));
        }
        for p in self.foreground.iter().chain(&self.background) {
            if p.iter().zip(dims).any(|(&c, d)| c >= d) {
                return Err(Error::OutOfRange(format!("seed {p:?} outside {dims:?}")));
            }
        }
        if self.foreground.is_empty() || self.background.is_empty() {
            return Err(Error::MissingSeeds);
        }
        Ok(())
    }

    /// Seeds mapped to level `level` (coordinates shifted right). Voxels
    /// receiving both classes map to `None`.
    pub fn at_level(&self, level: usize) -> BTreeMap<[usize; 3], Option<bool>> {
        let mut out: BTreeMap<[usize; 3], Option<bool>> = BTreeMap::new();
        for (set, fg) in [(&self.foreground, true), (&self.background, false)] {
            for p in set {
                out.entry(p.map(|c| c >> level))
                    .and_modify(|e| {
                        if *e != Some(fg) {
                            *e = None;
                        }
                    })
                    .or_insert(Some(fg));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwParams {
    /// Edge contrast on intensities normalized to `[0, 1]`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_tolerance")]
    pub cg_tolerance: f64,
    #[serde(default = "default_theta_low")]
    pub theta_low: f64,
    #[serde(default = "default_theta_high")]
    pub theta_high: f64,
    #[serde(default = "default_min_weight")]
    pub min_edge_weight: f64,
    /// Defaults to `1000 * ceil(n^(1/3))` for `n` grid voxels.
    #[serde(default)]
    pub max_iterations: Option<usize>,
}

fn default_beta() -> f64 {
    4000.0
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_theta_low() -> f64 {
    0.01
}

fn default_theta_high() -> f64 {
    0.99
}

fn default_min_weight() -> f64 {
    1e-6
}

impl Default for RwParams {
    fn default() -> Self {
        RwParams {
            beta: default_beta(),
            cg_tolerance: default_tolerance(),
            theta_low: default_theta_low(),
            theta_high: default_theta_high(),
            min_edge_weight: default_min_weight(),
            max_iterations: None,
        }
    }
}

impl RwParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.theta_low < self.theta_high) {
            return Err(Error::InvalidParameter(format!(
                "theta_low must be < theta_high, got {} and {}",
                self.theta_low, self.theta_high
            )));
        }
        if !(self.cg_tolerance > 0.0) || !(self.min_edge_weight > 0.0) {
            return Err(Error::InvalidParameter("tolerance and minimum edge weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Maps raw intensities onto `[0, 1]` using the volume's global range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityRange {
    pub min: f64,
    pub max: f64,
}

impl IntensityRange {
    pub fn normalize(&self, v: f32) -> f64 {
        if self.max > self.min {
            (v as f64 - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }

    pub fn of(data: &[f32]) -> Self {
        let (min, max) = data
            .par_iter()
            .fold(
                || (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)),
            )
            .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
        IntensityRange { min, max }
    }
}

/// Exact random walker on an in-memory volume. Returns foreground
/// probabilities in zyx order.
pub fn rw_solve_dense(volume: &DenseVolume, labels: &LabelSet, params: &RwParams) -> Result<Vec<f64>> {
    params.validate()?;
    if volume.meta.channels != 1 {
        return Err(Error::ChannelMismatch("random walker expects one channel".into()));
    }
    let dims = volume.dims();
    labels.validate(dims)?;
    let range = IntensityRange::of(&volume.data);
    let intensity: Vec<f64> = volume.data.iter().map(|&v| range.normalize(v)).collect();
    let mut fixed = vec![None; intensity.len()];
    let idx = |p: [usize; 3]| (p[2] * dims[1] + p[1]) * dims[0] + p[0];
    for p in &labels.foreground {
        fixed[idx(*p)] = Some(1.0);
    }
    for p in &labels.background {
        fixed[idx(*p)] = Some(0.0);
    }
    Ok(solver::solve(dims, &intensity, &fixed, None, params)?.values)
}

/// [`rw_solve_dense`] on a volume read into memory, written as `f32`.
pub fn rw_solve_incore(
    volume: &SliceVolume,
    labels: &LabelSet,
    params: &RwParams,
    out: impl AsRef<Path>,
) -> Result<SliceVolume> {
    let dense = volume.read_dense()?;
    let prob = rw_solve_dense(&dense, labels, params)?;
    let mut meta = VolumeMeta {
        dtype: DType::F32,
        value_range: None,
        ..volume.meta().clone()
    };
    meta.channels = 1;
    DenseVolume::from_data(meta, prob.into_iter().map(|v| v as f32).collect())?.write(out)
}

/// Foreground (255) where `p >= threshold`, as a `u8` mask.
pub fn binarize_probability(prob: &SliceVolume, threshold: f32, out: impl AsRef<Path>) -> Result<SliceVolume> {
    let meta = VolumeMeta {
        dtype: DType::U8,
        value_range: None,
        ..prob.meta().clone()
    };
    let mut writer = SliceWriter::create(meta, out)?;
    for slice in prob.reader()? {
        let slice = slice?;
        let data = slice.data.iter().map(|&p| if p >= threshold { 255.0 } else { 0.0 }).collect();
        writer.push(&Slice { data, ..slice })?;
    }
    writer.finish()
}
