//! Native slice-streamable volume format.
//!
//! A volume lives in a directory holding `meta.json` and `data.raw`. The
//! payload is little-endian and channel-planar: each channel is a full
//! `nz * ny * nx` block linearized in zyx order (x fastest), so an xy-slice
//! of one channel is a single contiguous byte range.
//!
//! In memory every sample is carried as `f32`. `u8`, `u16` and `f32` values
//! survive that exactly; `u32` survives exactly up to 2^24 on the generic
//! path and [`SliceVolume::read_slice_u32`] is exact for the full range.

mod dense;
mod io;
mod tiff;

use serde::{Deserialize, Serialize};

pub use dense::DenseVolume;
pub use io::{read_meta, IoCounters, SliceReader, SliceVolume, SliceWriter};
pub use tiff::import_tiff_stack;

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    U16,
    /// Label volumes only.
    U32,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::U32 | DType::F32 => 4,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32)
    }

    /// Largest representable value, used as the foreground value of binary
    /// masks. For `f32` masks the foreground is `1.0`.
    pub fn max_value(self) -> f32 {
        match self {
            DType::U8 => u8::MAX as f32,
            DType::U16 => u16::MAX as f32,
            DType::U32 => u32::MAX as f32,
            DType::F32 => 1.0,
        }
    }

    /// Numeric span used for normalized comparisons.
    pub fn range(self) -> f64 {
        match self {
            DType::F32 => 1.0,
            other => other.max_value() as f64,
        }
    }

    /// Rounds half up and clamps into the representable range for integer
    /// types; identity for `f32`.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            DType::F32 => v,
            _ => {
                if v.is_nan() {
                    return 0.0;
                }
                ((v as f64 + 0.5).floor()).clamp(0.0, self.max_value() as f64) as f32
            }
        }
    }

    pub(crate) fn encode(self, values: &[f32], out: &mut Vec<u8>) {
        out.clear();
        out.reserve(values.len() * self.size());
        match self {
            DType::U8 => out.extend(values.iter().map(|&v| self.quantize(v) as u8)),
            DType::U16 => {
                for &v in values {
                    out.extend_from_slice(&(self.quantize(v) as u16).to_le_bytes());
                }
            }
            DType::U32 => {
                for &v in values {
                    out.extend_from_slice(&(self.quantize(v) as u32).to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    pub(crate) fn decode(self, bytes: &[u8], out: &mut [f32]) {
        debug_assert_eq!(bytes.len(), out.len() * self.size());
        match self {
            DType::U8 => {
                for (o, &b) in out.iter_mut().zip(bytes) {
                    *o = b as f32;
                }
            }
            DType::U16 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = u16::from_le_bytes([b[0], b[1]]) as f32;
                }
            }
            DType::U32 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32;
                }
            }
            DType::F32 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
            }
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DType::U8 => "u8",
            DType::U16 => "u16",
            DType::U32 => "u32",
            DType::F32 => "f32",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(DType::U8),
            "u16" => Ok(DType::U16),
            "u32" => Ok(DType::U32),
            "f32" => Ok(DType::F32),
            other => Err(Error::MalformedMeta(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dimensions: [usize; 3],
    #[serde(rename = "spacing_mm")]
    pub spacing: [f64; 3],
    #[serde(rename = "offset_mm")]
    pub offset: [f64; 3],
    pub dtype: DType,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<Vec<[f64; 2]>>,
    #[serde(rename = "timestamp_s", default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(rename = "field", default, skip_serializing_if = "Option::is_none")]
    pub field_name: Option<String>,
}

impl VolumeMeta {
    pub fn new(dimensions: [usize; 3], dtype: DType, channels: usize) -> Self {
        VolumeMeta {
            dimensions,
            spacing: [1.0; 3],
            offset: [0.0; 3],
            dtype,
            channels,
            value_range: None,
            timestamp: None,
            field_name: None,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.contains(&0) {
            return Err(Error::MalformedMeta(format!(
                "dimensions must be >= 1, got {:?}",
                self.dimensions
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::MalformedMeta(format!(
                "spacing must be > 0, got {:?}",
                self.spacing
            )));
        }
        if self.channels == 0 {
            return Err(Error::MalformedMeta("channels must be >= 1".into()));
        }
        if let Some(ranges) = &self.value_range {
            if ranges.len() != self.channels {
                return Err(Error::MalformedMeta(format!(
                    "value_range has {} entries for {} channels",
                    ranges.len(),
                    self.channels
                )));
            }
            if ranges.iter().any(|r| r[0] > r[1]) {
                return Err(Error::MalformedMeta("value_range min > max".into()));
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.dimensions[0]
    }

    pub fn ny(&self) -> usize {
        self.dimensions[1]
    }

    pub fn nz(&self) -> usize {
        self.dimensions[2]
    }

    pub fn voxels(&self) -> usize {
        self.dimensions.iter().product()
    }

    pub fn slice_len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.voxels() as u64 * self.channels as u64 * self.dtype.size() as u64
    }

    /// Physical size of the volume in millimeters.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dimensions[0] as f64 * self.spacing[0],
            self.dimensions[1] as f64 * self.spacing[1],
            self.dimensions[2] as f64 * self.spacing[2],
        ]
    }

    /// Axis-aligned physical bounds `(lo, hi)`, voxel centers at
    /// `offset + index * spacing`.
    pub fn bounds_mm(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.offset[a] - 0.5 * self.spacing[a];
            hi[a] = lo[a] + self.dimensions[a] as f64 * self.spacing[a];
        }
        (lo, hi)
    }

    pub fn same_grid(&self, other: &VolumeMeta) -> bool {
        self.dimensions == other.dimensions && self.channels == other.channels
    }
}

/// One xy-slice with all channels, channel-planar (`data[c * nx * ny + y * nx + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Slice {
    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        Slice {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
        }
    }

    pub fn filled(nx: usize, ny: usize, channels: usize, value: f32) -> Self {
        Slice {
            nx,
            ny,
            channels,
            data: vec![value; nx * ny * channels],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.plane_len() + y * self.nx + x]
    }

    /// Clamp-to-edge access.
    #[inline]
    pub fn get_clamped(&self, c: usize, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.nx as isize - 1) as usize;
        let y = y.clamp(0, self.ny as isize - 1) as usize;
        self.get(c, x, y)
    }

    pub fn same_shape(&self, other: &Slice) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.channels == other.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(DType::U8.quantize(2.5), 3.0);
        assert_eq!(DType::U8.quantize(2.4999), 2.0);
        assert_eq!(DType::U8.quantize(-3.0), 0.0);
        assert_eq!(DType::U8.quantize(300.0), 255.0);
        assert_eq!(DType::U16.quantize(70000.0), 65535.0);
        assert_eq!(DType::F32.quantize(-3.25), -3.25);
    }

    #[test]
    fn meta_json_keys() {
        let mut meta = VolumeMeta::new([4, 5, 6], DType::U16, 2);
        meta.timestamp = Some(1.5);
        let json = serde_json::to_value(&meta).unwrap();
        for key in ["dimensions", "spacing_mm", "offset_mm", "dtype", "channels", "timestamp_s"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["dtype"], "u16");
        assert!(json.get("value_range").is_none());
    }

    #[test]
    fn physical_extent_from_spacing() {
        let meta = VolumeMeta::new([9070, 12723, 1634], DType::U16, 1).with_spacing([0.75e-3, 0.75e-3, 3e-3]);
        meta.validate().unwrap();
        let e = meta.extent_mm();
        assert!((e[0] - 6.8025).abs() < 1e-9);
        assert!((e[1] - 9.54225).abs() < 1e-9);
        assert!((e[2] - 4.902).abs() < 1e-9);
    }

    #[test]
    fn invalid_meta_rejected() {
        let mut meta = VolumeMeta::new([4, 4, 0], DType::U8, 1);
        assert!(meta.validate().is_err());
        meta.dimensions = [4, 4, 4];
        meta.spacing = [1.0, 0.0, 1.0];
        assert!(meta.validate().is_err());
        meta.spacing = [1.0; 3];
        meta.value_range = Some(vec![[2.0, 1.0]]);
        assert!(meta.validate().is_err());
    }
}
