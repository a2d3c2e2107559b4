//! Slice filters and their streaming composition.
//!
//! A filter turns a window of `z_extent` consecutive input slices (clamped at
//! the volume borders) into one output slice. A [`FilterStack`] chains
//! filters so that the source is read once and the sink written once.

mod gaussian;
mod pointwise;
mod rank;
mod stack;

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

pub use gaussian::{GaussianFilter, HessianFilter, Kernel1d, HESSIAN_CHANNELS};
pub use pointwise::ThresholdFilter;
pub use rank::{BinaryMedianFilter, MedianFilter, MorphOp, MorphologyFilter};
pub use stack::{FilterStack, StackRun, StackStream};

use crate::error::{Error, Result};
use crate::volume::{DType, Slice};
use crate::vesselness::{EigenFilter, SatoFilter};

/// Sample type and channel count flowing between stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleFormat {
    pub dtype: DType,
    pub channels: usize,
}

pub trait SliceFilter: Send + Sync {
    fn name(&self) -> &str;

    /// Odd number of input slices per output slice.
    fn z_extent(&self) -> usize;

    /// Format of the output given the input; rejects incompatible inputs.
    fn output_format(&self, input: SampleFormat) -> Result<SampleFormat>;

    /// `window[i]` is input slice `k - r + i` (clamped), `r = (z_extent - 1) / 2`.
    fn apply(&self, window: &[&Slice], input: SampleFormat) -> Result<Slice>;
}

impl std::fmt::Debug for dyn SliceFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}(z_extent={})", self.name(), self.z_extent())
    }
}

/// Three per-axis values, written as a scalar or an `[x, y, z]` array.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PerAxis<T: Copy> {
    Uniform(T),
    Axes([T; 3]),
}

impl<T: Copy> PerAxis<T> {
    pub fn get(self) -> [T; 3] {
        match self {
            PerAxis::Uniform(v) => [v; 3],
            PerAxis::Axes(a) => a,
        }
    }
}

pub(crate) fn check_odd(size: [usize; 3]) -> Result<()> {
    match size.iter().find(|&&s| s == 0 || s % 2 == 0) {
        Some(&s) => Err(Error::EvenWindowSize(s)),
        None => Ok(()),
    }
}

pub fn check_channels(name: &str, input: SampleFormat, want: usize) -> Result<()> {
    if input.channels != want {
        return Err(Error::ChannelMismatch(format!(
            "{name} expects {want} channel(s), got {}",
            input.channels
        )));
    }
    Ok(())
}

pub fn check_f32(name: &str, input: SampleFormat) -> Result<()> {
    if input.dtype != DType::F32 {
        return Err(Error::DtypeMismatch(format!("{name} expects f32 input, got {}", input.dtype)));
    }
    Ok(())
}

type Constructor = fn(&Value) -> Result<Box<dyn SliceFilter>>;

fn params<T: DeserializeOwned>(name: &str, v: &Value) -> Result<T> {
    T::deserialize(v).map_err(|e| Error::InvalidParameter(format!("{name}: {e}")))
}

/// Filters addressable by name from pipeline configs such as
/// `{"filter": "median", "size": [11, 11, 3]}`.
pub struct FilterRegistry {
    constructors: BTreeMap<String, Constructor>,
}

impl Default for FilterRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl FilterRegistry {
    pub fn empty() -> Self {
        FilterRegistry {
            constructors: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("gaussian", |v| {
            #[derive(Deserialize)]
            struct P {
                sigma: PerAxis<f64>,
                #[serde(default = "default_truncate")]
                truncate: f64,
                #[serde(default)]
                order: Option<[u8; 3]>,
            }
            let p: P = params("gaussian", v)?;
            Ok(Box::new(GaussianFilter::new(p.sigma.get(), p.truncate, p.order.unwrap_or([0; 3]))?))
        });
        r.register("median", |v| {
            #[derive(Deserialize)]
            struct P {
                size: PerAxis<usize>,
            }
            let p: P = params("median", v)?;
            Ok(Box::new(MedianFilter::new(p.size.get())?))
        });
        r.register("binary_median", |v| {
            #[derive(Deserialize)]
            struct P {
                size: PerAxis<usize>,
            }
            let p: P = params("binary_median", v)?;
            Ok(Box::new(BinaryMedianFilter::new(p.size.get())?))
        });
        r.register("threshold", |v| {
            #[derive(Deserialize)]
            struct P {
                lo: f64,
                hi: f64,
            }
            let p: P = params("threshold", v)?;
            Ok(Box::new(ThresholdFilter::new(p.lo, p.hi)?))
        });
        r.register("morphology", |v| {
            #[derive(Deserialize)]
            struct P {
                op: MorphOp,
                size: PerAxis<usize>,
            }
            let p: P = params("morphology", v)?;
            Ok(Box::new(MorphologyFilter::new(p.op, p.size.get())?))
        });
        r.register("erode", |v| {
            #[derive(Deserialize)]
            struct P {
                size: PerAxis<usize>,
            }
            let p: P = params("erode", v)?;
            Ok(Box::new(MorphologyFilter::new(MorphOp::Erode, p.size.get())?))
        });
        r.register("dilate", |v| {
            #[derive(Deserialize)]
            struct P {
                size: PerAxis<usize>,
            }
            let p: P = params("dilate", v)?;
            Ok(Box::new(MorphologyFilter::new(MorphOp::Dilate, p.size.get())?))
        });
        r.register("hessian", |v| {
            #[derive(Deserialize)]
            struct P {
                sigma: f64,
                #[serde(default)]
                spacing: Option<[f64; 3]>,
                #[serde(default = "default_truncate")]
                truncate: f64,
            }
            let p: P = params("hessian", v)?;
            Ok(Box::new(HessianFilter::physical(p.sigma, p.spacing.unwrap_or([1.0; 3]), p.truncate)?))
        });
        r.register("hessian_eigen", |_| Ok(Box::new(EigenFilter)));
        r.register("sato", |v| {
            #[derive(Deserialize)]
            struct P {
                #[serde(default = "default_alpha")]
                alpha: f64,
                #[serde(default = "one")]
                gamma12: f64,
                #[serde(default = "one")]
                gamma23: f64,
            }
            let p: P = params("sato", v)?;
            Ok(Box::new(SatoFilter::new(p.alpha, p.gamma12, p.gamma23)?))
        });
        r
    }

    pub fn register(&mut self, name: &str, ctor: Constructor) {
        self.constructors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.constructors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.constructors.contains_key(name)
    }

    /// Builds from an object whose `"filter"` key names the constructor.
    pub fn build(&self, spec: &Value) -> Result<Box<dyn SliceFilter>> {
        let name = spec
            .get("filter")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidParameter(format!("filter spec without \"filter\" name: {spec}")))?;
        let ctor = self
            .constructors
            .get(name)
            .ok_or_else(|| Error::UnknownName(format!("filter {name:?}")))?;
        ctor(spec)
    }

    pub fn build_stack(&self, specs: &[Value]) -> Result<FilterStack> {
        Ok(FilterStack::new(specs.iter().map(|s| self.build(s)).collect::<Result<_>>()?))
    }
}

fn default_truncate() -> f64 {
    3.0
}

fn default_alpha() -> f64 {
    0.25
}

fn one() -> f64 {
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn registry_builds_by_name() {
        let r = FilterRegistry::with_builtins();
        let f = r.build(&json!({"filter": "median", "size": [11, 11, 3]})).unwrap();
        assert_eq!(f.name(), "median");
        assert_eq!(f.z_extent(), 3);
        let g = r.build(&json!({"filter": "gaussian", "sigma": 1.0})).unwrap();
        assert_eq!(g.z_extent(), 7);
        assert!(matches!(r.build(&json!({"filter": "nope"})), Err(Error::UnknownName(_))));
        assert!(matches!(
            r.build(&json!({"filter": "median", "size": [2, 3, 3]})),
            Err(Error::EvenWindowSize(2))
        ));
        assert!(r.names().any(|n| n == "sato"));
    }
}
