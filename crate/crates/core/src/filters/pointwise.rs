use super::{SampleFormat, SliceFilter};
use crate::error::{Error, Result};
use crate::volume::Slice;

/// Maps values in `[lo, hi]` to the foreground value of the dtype, others to 0.
#[derive(Clone, Debug)]
pub struct ThresholdFilter {
    lo: f64,
    hi: f64,
}

impl ThresholdFilter {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidParameter(format!("threshold needs lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(ThresholdFilter { lo, hi })
    }
}

impl SliceFilter for ThresholdFilter {
    fn name(&self) -> &str {
        "threshold"
    }

    fn z_extent(&self) -> usize {
        1
    }

    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat> {
        Ok(input)
    }

    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice> {
        let fg = input.dtype.max_value();
        let src = window[0];
        let data = src
            .data
            .iter()
            .map(|&v| {
                let v = v as f64;
                if v >= self.lo && v <= self.hi {
                    fg
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Slice {
            data,
            ..src.clone_shape()
        })
    }
}

impl Slice {
    /// Empty-data slice with the same shape, for struct update syntax.
    pub(crate) fn clone_shape(&self) -> Slice {
        Slice {
            nx: self.nx,
            ny: self.ny,
            channels: self.channels,
            data: Vec::new(),
        }
    }
}
