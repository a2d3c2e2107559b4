//! Multi-scale Hessian vessel enhancement with Sato's line measure.
//!
//! Each scale is one streaming pass (Hessian, eigenvalues, line measure);
//! the per-voxel maximum over scales is kept on disk between passes.

mod eigen;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eigen::{sym3_eigenvalues, sym3_eigen_jacobi, Sym3};

use crate::error::{Error, Result};
use crate::filters::{check_channels, check_f32, FilterStack, HessianFilter, SampleFormat, SliceFilter};
use crate::job::JobControl;
use crate::volume::{DType, Slice, SliceVolume, SliceWriter};

/// Per-voxel eigenvalues of a 6-channel Hessian, sorted descending.
#[derive(Clone, Copy, Debug, Default)]
pub struct EigenFilter;

impl SliceFilter for EigenFilter {
    fn name(&self) -> &str {
        "hessian_eigen"
    }

    fn z_extent(&self) -> usize {
        1
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        check_f32("hessian_eigen", input)?;
        check_channels("hessian_eigen", input, 6)?;
        Ok(SampleFormat {
            dtype: DType::F32,
            channels: 3,
        })
    }

    fn apply(&self, window: &[&Slice], _input: SampleFormat) -> Result<Slice> {
        let h = window[0];
        let n = h.plane_len();
        let mut out = Slice::zeros(h.nx, h.ny, 3);
        let vals: Vec<[f32; 3]> = (0..n)
            .into_par_iter()
            .map(|p| {
                let m: Sym3 = std::array::from_fn(|c| h.data[c * n + p] as f64);
                sym3_eigenvalues(&m).map(|v| v as f32)
            })
            .collect();
        for (p, v) in vals.into_iter().enumerate() {
            for (c, x) in v.into_iter().enumerate() {
                out.data[c * n + p] = x;
            }
        }
        Ok(out)
    }
}

/// Sato's line measure for bright tubes on a dark background.
#[derive(Clone, Copy, Debug)]
pub struct SatoFilter {
    alpha: f64,
    gamma12: f64,
    gamma23: f64,
}

impl SatoFilter {
    pub fn new(alpha: f64, gamma12: f64, gamma23: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(gamma12 >= 0.0) || !(gamma23 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sato needs alpha > 0 and gammas >= 0, got {alpha}, {gamma12}, {gamma23}"
            )));
        }
        Ok(SatoFilter { alpha, gamma12, gamma23 })
    }

    /// `l1 >= l2 >= l3`.
    pub fn measure(&self, l1: f64, l2: f64, l3: f64) -> f64 {
        if l2 >= 0.0 || l3 >= 0.0 {
            return 0.0;
        }
        let a2 = l2.abs();
        let base = l3.abs() * (l2 / l3).powf(self.gamma23);
        if l1 <= 0.0 {
            base * (1.0 + l1 / a2).powf(self.gamma12)
        } else if l1 < a2 / self.alpha {
            base * (1.0 - self.alpha * l1 / a2).powf(self.gamma12)
        } else {
            0.0
        }
    }
}

impl SliceFilter for SatoFilter {
    fn name(&self) -> &str {
        "sato"
    }

    fn z_extent(&self) -> usize {
        1
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        check_f32("sato", input)?;
        check_channels("sato", input, 3)?;
        Ok(SampleFormat {
            dtype: DType::F32,
            channels: 1,
        })
    }

    fn apply(&self, window: &[&Slice], _input: SampleFormat) -> Result<Slice> {
        let e = window[0];
        let n = e.plane_len();
        let (l1, rest) = e.data.split_at(n);
        let (l2, l3) = rest.split_at(n);
        let data = (0..n)
            .into_par_iter()
            .map(|p| self.measure(l1[p] as f64, l2[p] as f64, l3[p] as f64) as f32)
            .collect();
        Ok(Slice {
            nx: e.nx,
            ny: e.ny,
            channels: 1,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselnessParams {
    /// Gaussian scales in millimeters.
    pub scales: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub gamma12: f64,
    #[serde(default = "one")]
    pub gamma23: f64,
    #[serde(default = "default_truncate")]
    pub truncate: f64,
}

fn default_alpha() -> f64 {
    0.25
}

fn one() -> f64 {
    1.0
}

fn default_truncate() -> f64 {
    3.0
}

impl Default for VesselnessParams {
    fn default() -> Self {
        VesselnessParams {
            scales: vec![2.0, 3.0, 4.0],
            alpha: 0.25,
            gamma12: 1.0,
            gamma23: 1.0,
            truncate: 3.0,
        }
    }
}

impl VesselnessParams {
    pub fn with_scales(scales: Vec<f64>) -> Self {
        VesselnessParams {
            scales,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scales must be non-empty and positive, got {:?}",
                self.scales
            )));
        }
        SatoFilter::new(self.alpha, self.gamma12, self.gamma23)?;
        Ok(())
    }

    pub fn stack(&self, sigma: f64, spacing: [f64; 3]) -> Result<FilterStack> {
        Ok(FilterStack::new(vec![
            Box::new(HessianFilter::physical(sigma, spacing, self.truncate)?),
            Box::new(EigenFilter),
            Box::new(SatoFilter::new(self.alpha, self.gamma12, self.gamma23)?),
        ]))
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

/// Eigenvalues `(l1, l2, l3)` of the scale-normalized Hessian at `sigma` mm.
pub fn hessian_eigenvalues(volume: &SliceVolume, sigma: f64, out: impl AsRef<Path>) -> Result<SliceVolume> {
    let meta = volume.meta();
    let stack = FilterStack::new(vec![
        Box::new(HessianFilter::physical(sigma, meta.spacing, 3.0)?),
        Box::new(EigenFilter),
    ]);
    Ok(stack.run(volume, out, None)?.volume)
}

/// Maximum line measure over all scales, written as `f32` to `out`.
pub fn vesselness(
    volume: &SliceVolume,
    params: &VesselnessParams,
    out: impl AsRef<Path>,
    job: Option<&JobControl>,
) -> Result<SliceVolume> {
    params.validate()?;
    let meta = volume.meta();
    if meta.channels != 1 {
        return Err(Error::ChannelMismatch(format!(
            "vesselness expects a single-channel volume, got {} channels",
            meta.channels
        )));
    }
    let out = out.as_ref();
    let nz = meta.nz();
    let passes = params.scales.len();
    let mut result: Option<SliceVolume> = None;
    for (i, &sigma) in params.scales.iter().enumerate() {
        let stack = params.stack(sigma, meta.spacing)?;
        let out_meta = stack.output_meta(meta)?;
        let target = if result.is_some() { sibling(out, ".next") } else { out.to_path_buf() };
        let mut writer = SliceWriter::create(out_meta, &target)?;
        let mut previous = result.as_ref().map(|v| v.reader()).transpose()?;
        let stream = stack.stream(meta, volume.reader()?)?;
        for (k, slice) in stream.enumerate() {
            if let Some(job) = job {
                job.check()?;
            }
            let mut slice = slice?;
            if let Some(prev) = previous.as_mut() {
                let old = prev.next().ok_or_else(|| Error::Protocol("running maximum ended early".into()))??;
                for (a, b) in slice.data.iter_mut().zip(&old.data) {
                    *a = a.max(*b);
                }
            }
            writer.push(&slice)?;
            if let Some(job) = job {
                job.set_progress((i * nz + k + 1) as f64 / (passes * nz) as f64);
            }
        }
        drop(previous);
        let written = writer.finish()?;
        result = Some(if target != out {
            fs::remove_dir_all(out)?;
            fs::rename(&target, out)?;
            SliceVolume::open(out)?
        } else {
            written
        });
    }
    Ok(result.expect("at least one scale"))
}
