use rayon::prelude::*;
use serde::Deserialize;

use super::{check_odd, SampleFormat, SliceFilter};
use crate::error::Result;
use crate::volume::Slice;

#[inline]
fn clamped(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Exact rank-order median over a box window, borders clamped.
#[derive(Clone, Debug)]
pub struct MedianFilter {
    size: [usize; 3],
}

impl MedianFilter {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        check_odd(size)?;
        Ok(MedianFilter { size })
    }
}

impl SliceFilter for MedianFilter {
    fn name(&self) -> &str {
        "median"
    }

    fn z_extent(&self) -> usize {
        self.size[2]
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        Ok(input)
    }

    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice> {
        let (nx, ny) = (window[0].nx, window[0].ny);
        let rx = (self.size[0] / 2) as isize;
        let ry = (self.size[1] / 2) as isize;
        let n = self.size.iter().product::<usize>();
        let mut out = Slice::zeros(nx, ny, input.channels);
        for c in 0..input.channels {
            let planes: Vec<&[f32]> = window.iter().map(|s| s.channel(c)).collect();
            out.channel_mut(c)
                .par_chunks_mut(nx)
                .enumerate()
                .for_each_init(
                    || Vec::with_capacity(n),
                    |buf, (y, row)| {
                        for (x, o) in row.iter_mut().enumerate() {
                            buf.clear();
                            for plane in &planes {
                                for dy in -ry..=ry {
                                    let line = clamped(y, dy, ny) * nx;
                                    for dx in -rx..=rx {
                                        buf.push(plane[line + clamped(x, dx, nx)]);
                                    }
                                }
                            }
                            let (_, m, _) = buf.select_nth_unstable_by(n / 2, f32::total_cmp);
                            *o = *m;
                        }
                    },
                );
        }
        Ok(out)
    }
}

/// Majority vote over a box window: foreground (the dtype's maximum) where
/// more than half of the window is non-zero.
#[derive(Clone, Debug)]
pub struct BinaryMedianFilter {
    size: [usize; 3],
}

impl BinaryMedianFilter {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        check_odd(size)?;
        Ok(BinaryMedianFilter { size })
    }
}

impl SliceFilter for BinaryMedianFilter {
    fn name(&self) -> &str {
        "binary_median"
    }

    fn z_extent(&self) -> usize {
        self.size[2]
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        Ok(input)
    }

    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice> {
        let (nx, ny) = (window[0].nx, window[0].ny);
        let rx = self.size[0] / 2;
        let ry = (self.size[1] / 2) as isize;
        let half = (self.size.iter().product::<usize>() / 2) as u32;
        let fg = input.dtype.max_value();
        let mut out = Slice::zeros(nx, ny, input.channels);
        for c in 0..input.channels {
            // Window sums of the z-column counts along x, then along y.
            let mut horiz = vec![0u32; nx * ny];
            horiz.par_chunks_mut(nx).enumerate().for_each_init(
                || vec![0u32; nx + 2 * rx + 1],
                |prefix, (y, row)| {
                    for i in 0..nx + 2 * rx {
                        let x = clamped(i, -(rx as isize), nx);
                        let count = window.iter().filter(|s| s.channel(c)[y * nx + x] != 0.0).count() as u32;
                        prefix[i + 1] = prefix[i] + count;
                    }
                    for (x, h) in row.iter_mut().enumerate() {
                        *h = prefix[x + 2 * rx + 1] - prefix[x];
                    }
                },
            );
            out.channel_mut(c).par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let total: u32 = (-ry..=ry).map(|dy| horiz[clamped(y, dy, ny) * nx + x]).sum();
                    *o = if total > half { fg } else { 0.0 };
                }
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Grey-value erosion (window minimum) or dilation (window maximum).
#[derive(Clone, Debug)]
pub struct MorphologyFilter {
    op: MorphOp,
    size: [usize; 3],
}

impl MorphologyFilter {
    pub fn new(op: MorphOp, size: [usize; 3]) -> Result<Self> {
        check_odd(size)?;
        Ok(MorphologyFilter { op, size })
    }

    fn pick(&self, a: f32, b: f32) -> f32 {
        match self.op {
            MorphOp::Erode => a.min(b),
            MorphOp::Dilate => a.max(b),
        }
    }
}

impl SliceFilter for MorphologyFilter {
    fn name(&self) -> &str {
        match self.op {
            MorphOp::Erode => "erode",
            MorphOp::Dilate => "dilate",
        }
    }

    fn z_extent(&self) -> usize {
        self.size[2]
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        Ok(input)
    }

    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice> {
        let (nx, ny) = (window[0].nx, window[0].ny);
        let rx = (self.size[0] / 2) as isize;
        let ry = (self.size[1] / 2) as isize;
        let mut out = Slice::zeros(nx, ny, input.channels);
        for c in 0..input.channels {
            // A box is a product of intervals, so min/max separate per axis.
            let mut zs: Vec<f32> = window[0].channel(c).to_vec();
            for s in &window[1..] {
                for (a, &b) in zs.iter_mut().zip(s.channel(c)) {
                    *a = self.pick(*a, b);
                }
            }
            let mut ys = vec![0.0f32; nx * ny];
            ys.par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    *o = (-ry..=ry)
                        .map(|dy| zs[clamped(y, dy, ny) * nx + x])
                        .reduce(|a, b| self.pick(a, b))
                        .unwrap();
                }
            });
            out.channel_mut(c).par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
                let line = &ys[y * nx..(y + 1) * nx];
                for (x, o) in row.iter_mut().enumerate() {
                    *o = (-rx..=rx)
                        .map(|dx| line[clamped(x, dx, nx)])
                        .reduce(|a, b| self.pick(a, b))
                        .unwrap();
                }
            });
        }
        Ok(out)
    }
}
