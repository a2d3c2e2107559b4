use rayon::prelude::*;

use super::{check_channels, SampleFormat, SliceFilter};
use crate::error::{Error, Result};
use crate::volume::{DType, Slice};

/// Sampled 1-D Gaussian (or derivative) kernel, applied as a correlation
/// with clamp-to-edge borders.
///
/// Taps are accumulated relative to the center sample, `sum w[i] * (v[i] - v[c])`,
/// with the center added back for smoothing kernels. A constant signal thus
/// passes through smoothing unchanged and gives exactly zero derivatives.
/// Derivative weights are scaled to be exact on `x` (first order) and `x^2`
/// (second order).
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel1d {
    pub radius: usize,
    pub weights: Vec<f32>,
    pub order: u8,
}

impl Kernel1d {
    pub fn radius_for(sigma: f64, truncate: f64) -> usize {
        (truncate * sigma).ceil().max(0.0) as usize
    }

    pub fn gaussian(sigma: f64, truncate: f64, order: u8) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        if !(truncate > 0.0) {
            return Err(Error::InvalidParameter(format!("truncate must be > 0, got {truncate}")));
        }
        let radius = Self::radius_for(sigma, truncate);
        let r = radius as isize;
        let g: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let offsets = (-r..=r).map(|i| i as f64);
        let weights: Vec<f64> = match order {
            0 => {
                let s: f64 = g.iter().sum();
                g.iter().map(|v| v / s).collect()
            }
            1 => {
                let raw: Vec<f64> = offsets.clone().zip(&g).map(|(i, v)| i * v).collect();
                let m: f64 = offsets.zip(&raw).map(|(i, w)| i * w).sum();
                if m == 0.0 {
                    return Err(Error::InvalidParameter("sigma too small for a derivative kernel".into()));
                }
                raw.iter().map(|w| w / m).collect()
            }
            2 => {
                let raw: Vec<f64> = offsets
                    .clone()
                    .zip(&g)
                    .map(|(i, v)| (i * i / (sigma * sigma) - 1.0) * v)
                    .collect();
                let m: f64 = offsets.zip(&raw).map(|(i, w)| i * i * w).sum();
                if m == 0.0 {
                    return Err(Error::InvalidParameter("sigma too small for a derivative kernel".into()));
                }
                raw.iter().map(|w| 2.0 * w / m).collect()
            }
            o => return Err(Error::InvalidParameter(format!("derivative order {o} not supported"))),
        };
        Ok(Kernel1d {
            radius,
            weights: weights.into_iter().map(|w| w as f32).collect(),
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Plain correlation weights equivalent to this kernel.
    pub fn effective(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self.weights.iter().map(|&v| v as f64).collect();
        let s: f64 = w.iter().sum();
        w[self.radius] -= s;
        if self.order == 0 {
            w[self.radius] += 1.0;
        }
        w
    }

    #[inline]
    fn combine(&self, at: impl Fn(usize) -> f32) -> f32 {
        let c = at(self.radius);
        let acc: f32 = self.weights.iter().enumerate().map(|(i, w)| w * (at(i) - c)).sum();
        if self.order == 0 {
            c + acc
        } else {
            acc
        }
    }

    /// Combines `2r + 1` planes (already clamped in z).
    pub fn pass_z(&self, planes: &[&[f32]]) -> Vec<f32> {
        debug_assert_eq!(planes.len(), self.len());
        let n = planes[0].len();
        let mut out = vec![0.0f32; n];
        out.par_iter_mut()
            .enumerate()
            .for_each(|(p, o)| *o = self.combine(|i| planes[i][p]));
        out
    }

    pub fn pass_y(&self, src: &[f32], nx: usize, ny: usize) -> Vec<f32> {
        let r = self.radius as isize;
        let mut out = vec![0.0f32; nx * ny];
        out.par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
            let rows: Vec<usize> = (0..self.len())
                .map(|i| (y as isize + i as isize - r).clamp(0, ny as isize - 1) as usize * nx)
                .collect();
            for (x, o) in row.iter_mut().enumerate() {
                *o = self.combine(|i| src[rows[i] + x]);
            }
        });
        out
    }

    pub fn pass_x(&self, src: &[f32], nx: usize, ny: usize) -> Vec<f32> {
        let r = self.radius as isize;
        let mut out = vec![0.0f32; nx * ny];
        out.par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
            let line = &src[y * nx..(y + 1) * nx];
            for (x, o) in row.iter_mut().enumerate() {
                *o = self.combine(|i| line[(x as isize + i as isize - r).clamp(0, nx as isize - 1) as usize]);
            }
        });
        out
    }
}

/// Separable Gaussian smoothing, or a Gaussian derivative when `order` is
/// non-zero on some axis. Channels are filtered independently.
#[derive(Clone, Debug)]
pub struct GaussianFilter {
    kernels: [Kernel1d; 3],
    order: [u8; 3],
}

impl GaussianFilter {
    pub fn new(sigma: [f64; 3], truncate: f64, order: [u8; 3]) -> Result<Self> {
        Ok(GaussianFilter {
            kernels: [
                Kernel1d::gaussian(sigma[0], truncate, order[0])?,
                Kernel1d::gaussian(sigma[1], truncate, order[1])?,
                Kernel1d::gaussian(sigma[2], truncate, order[2])?,
            ],
            order,
        })
    }

    pub fn kernels(&self) -> &[Kernel1d; 3] {
        &self.kernels
    }
}

impl SliceFilter for GaussianFilter {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn z_extent(&self) -> usize {
        self.kernels[2].len()
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        if self.order == [0; 3] {
            Ok(input)
        } else {
            Ok(SampleFormat {
                dtype: DType::F32,
                channels: input.channels,
            })
        }
    }

    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice> {
        let (nx, ny) = (window[0].nx, window[0].ny);
        let [kx, ky, kz] = &self.kernels;
        let mut data = Vec::with_capacity(nx * ny * input.channels);
        for c in 0..input.channels {
            let planes: Vec<&[f32]> = window.iter().map(|s| s.channel(c)).collect();
            let z = kz.pass_z(&planes);
            let y = ky.pass_y(&z, nx, ny);
            data.extend(kx.pass_x(&y, nx, ny));
        }
        Ok(Slice {
            nx,
            ny,
            channels: input.channels,
            data,
        })
    }
}

/// Scale-normalized Hessian of a single-channel volume. Output channels are
/// `xx, yy, zz, xy, xz, yz`.
#[derive(Clone, Debug)]
pub struct HessianFilter {
    /// `kernels[axis][order]`
    kernels: [[Kernel1d; 3]; 3],
    deriv_scale: [f64; 3],
    norm: f64,
}

pub const HESSIAN_CHANNELS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

impl HessianFilter {
    /// `sigma` in physical units; derivatives are taken in physical units
    /// and multiplied by `sigma^2`.
    pub fn physical(sigma: f64, spacing: [f64; 3], truncate: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        let mk = |a: usize| -> Result<[Kernel1d; 3]> {
            let s = sigma / spacing[a];
            Ok([
                Kernel1d::gaussian(s, truncate, 0)?,
                Kernel1d::gaussian(s, truncate, 1)?,
                Kernel1d::gaussian(s, truncate, 2)?,
            ])
        };
        Ok(HessianFilter {
            kernels: [mk(0)?, mk(1)?, mk(2)?],
            deriv_scale: spacing.map(|s| 1.0 / s),
            norm: sigma * sigma,
        })
    }
}

impl SliceFilter for HessianFilter {
    fn name(&self) -> &str {
        "hessian"
    }

    fn z_extent(&self) -> usize {
        self.kernels[2][0].len()
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        check_channels("hessian", input, 1)?;
        Ok(SampleFormat {
            dtype: DType::F32,
            channels: 6,
        })
    }

    fn apply(&self, window: &[&Slice], _input: SampleFormat) -> Result<Slice> {
        let (nx, ny) = (window[0].nx, window[0].ny);
        let planes: Vec<&[f32]> = window.iter().map(|s| s.channel(0)).collect();
        let z: Vec<Vec<f32>> = self.kernels[2].iter().map(|k| k.pass_z(&planes)).collect();
        let mut data = Vec::with_capacity(nx * ny * 6);
        for (a, b) in HESSIAN_CHANNELS {
            let mut order = [0usize; 3];
            order[a] += 1;
            order[b] += 1;
            let y = self.kernels[1][order[1]].pass_y(&z[order[2]], nx, ny);
            let x = self.kernels[0][order[0]].pass_x(&y, nx, ny);
            let f = (self.norm * self.deriv_scale[a] * self.deriv_scale[b]) as f32;
            data.extend(x.into_iter().map(|v| v * f));
        }
        Ok(Slice {
            nx,
            ny,
            channels: 6,
            data,
        })
    }
}
