//! CPU raycasting and slice extraction over brick octrees.

mod animate;
mod raycast;
mod slice;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use animate::{animate, interpolate, Interpolation, Keyframe};
pub use raycast::{render, render_with, DenseSampler, OctreeSampler, VolumeSampler};
pub use slice::{extract_slice, Axis, Plane, SliceImage, SliceSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Projection {
    /// `width` is the view width in mm.
    Orthographic { width: f64 },
    /// Vertical field of view.
    Perspective { fov_deg: f64 },
}

/// World-space camera in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub projection: Projection,
    /// Image width and height in pixels.
    pub size: [u32; 2],
}

/// Orthonormal view basis: `right`, `up`, `forward`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Basis {
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.size[0] == 0 || self.size[1] == 0 {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        let f = Vector3::from(self.look_at) - Vector3::from(self.position);
        if f.norm() == 0.0 {
            return Err(Error::InvalidParameter("camera position equals look-at point".into()));
        }
        let up = Vector3::from(self.up);
        if up.norm() == 0.0 || f.normalize().cross(&up.normalize()).norm() < 1e-9 {
            return Err(Error::InvalidParameter("up vector is parallel to the view direction".into()));
        }
        match self.projection {
            Projection::Orthographic { width } if !(width > 0.0) => {
                Err(Error::InvalidParameter("orthographic width must be > 0".into()))
            }
            Projection::Perspective { fov_deg } if !(fov_deg > 0.0 && fov_deg < 180.0) => {
                Err(Error::InvalidParameter("field of view must be in (0, 180)".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn basis(&self) -> Basis {
        let forward = (Vector3::from(self.look_at) - Vector3::from(self.position)).normalize();
        let right = forward.cross(&Vector3::from(self.up)).normalize();
        let up = right.cross(&forward);
        Basis { right, up, forward }
    }

    /// Ray origin and unit direction through the center of pixel `(px, py)`;
    /// `py` grows downwards.
    pub fn ray(&self, px: u32, py: u32) -> ([f64; 3], [f64; 3]) {
        let b = self.basis();
        let [w, h] = self.size.map(|s| s as f64);
        let sx = ((px as f64 + 0.5) / w - 0.5) * 2.0;
        let sy = (0.5 - (py as f64 + 0.5) / h) * 2.0;
        let pos = Vector3::from(self.position);
        match self.projection {
            Projection::Orthographic { width } => {
                let half_w = width / 2.0;
                let half_h = half_w * h / w;
                let o = pos + b.right * (sx * half_w) + b.up * (sy * half_h);
                (o.into(), b.forward.into())
            }
            Projection::Perspective { fov_deg } => {
                let t = (fov_deg.to_radians() / 2.0).tan();
                let d = (b.forward + b.right * (sx * t * w / h) + b.up * (sy * t)).normalize();
                (self.position, d.into())
            }
        }
    }

    /// Size in mm covered by one pixel at distance `dist` along the view axis.
    pub fn pixel_footprint(&self, dist: f64) -> f64 {
        match self.projection {
            Projection::Orthographic { width } => width / self.size[0] as f64,
            Projection::Perspective { fov_deg } => 2.0 * dist * (fov_deg.to_radians() / 2.0).tan() / self.size[1] as f64,
        }
    }
}

/// Piecewise-linear map from windowed intensity to straight (not
/// premultiplied) RGBA. Points are `[intensity, r, g, b, a]` with intensity in `[0, 1]`
/// after windowing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub window: [f64; 2],
    pub points: Vec<[f64; 5]>,
    /// Values outside the window are fully transparent instead of taking
    /// the nearest end color.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clip: bool,
}

impl TransferFunction {
    /// Grayscale ramp with opacity equal to intensity.
    pub fn ramp(window: [f64; 2]) -> Self {
        TransferFunction::new(window, vec![[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0, 1.0]])
    }

    pub fn new(window: [f64; 2], points: Vec<[f64; 5]>) -> Self {
        TransferFunction {
            window,
            points,
            clip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidParameter("transfer function has no control points".into()));
        }
        if !(self.window[1] > self.window[0]) {
            return Err(Error::InvalidParameter(format!("empty window {:?}", self.window)));
        }
        if self.points.windows(2).any(|w| w[1][0] < w[0][0]) {
            return Err(Error::InvalidParameter("control points must be sorted by intensity".into()));
        }
        if self.points.iter().any(|p| p[1..].iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::InvalidParameter("colors and opacities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, v: f32) -> f64 {
        ((v as f64 - self.window[0]) / (self.window[1] - self.window[0])).clamp(0.0, 1.0)
    }

    pub fn lookup(&self, v: f32) -> [f64; 4] {
        if self.clip && !(v as f64 >= self.window[0] && v as f64 <= self.window[1]) {
            return [0.0; 4];
        }
        let t = self.normalize(v);
        let pts = &self.points;
        let i = pts.partition_point(|p| p[0] <= t);
        let rgba = |p: &[f64; 5]| [p[1], p[2], p[3], p[4]];
        if i == 0 {
            return rgba(&pts[0]);
        }
        if i == pts.len() {
            return rgba(&pts[pts.len() - 1]);
        }
        let (a, b) = (&pts[i - 1], &pts[i]);
        let s = if b[0] > a[0] { (t - a[0]) / (b[0] - a[0]) } else { 0.0 };
        std::array::from_fn(|k| a[k + 1] + s * (b[k + 1] - a[k + 1]))
    }
}

/// `{"channels": [{"window": [lo, hi], "points": [[i, r, g, b, a], ...]}]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctions {
    pub channels: Vec<TransferFunction>,
}

impl TransferFunctions {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tfs: TransferFunctions = serde_json::from_slice(&std::fs::read(path)?)?;
        tfs.channels.iter().try_for_each(TransferFunction::validate)?;
        Ok(tfs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compositing {
    Mip,
    Mop,
    #[default]
    Dvr,
}

impl std::str::FromStr for Compositing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mip" => Ok(Compositing::Mip),
            "mop" => Ok(Compositing::Mop),
            "dvr" => Ok(Compositing::Dvr),
            other => Err(Error::UnknownName(format!("compositing mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lod {
    Level(usize),
    /// Coarsest level whose voxels are no larger than a pixel.
    #[default]
    Screen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub mode: Compositing,
    /// Sampling distance as a fraction of the smallest voxel spacing.
    pub step: f64,
    pub lod: Lod,
    /// Per-channel sampling offset in mm; missing channels are unshifted.
    #[serde(default)]
    pub shifts: Vec<[f64; 3]>,
    pub background: [f32; 4],
    /// Stop DVR rays once accumulated opacity reaches 0.99.
    #[serde(default = "yes")]
    pub early_termination: bool,
}

fn yes() -> bool {
    true
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            mode: Compositing::Dvr,
            step: 0.5,
            lod: Lod::Level(0),
            shifts: Vec::new(),
            background: [0.0, 0.0, 0.0, 1.0],
            early_termination: true,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter(format!("step must be > 0, got {}", self.step)));
        }
        Ok(())
    }

    pub fn shift(&self, c: usize) -> [f64; 3] {
        self.shifts.get(c).copied().unwrap_or([0.0; 3])
    }
}

/// Floating-point RGBA image, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 4]>,
}

impl Frame {
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 4] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn to_rgba8(&self) -> image::RgbaImage {
        let mut img = image::RgbaImage::new(self.width, self.height);
        for (dst, src) in img.pixels_mut().zip(&self.pixels) {
            *dst = image::Rgba(src.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        img
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgba8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgba8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}
