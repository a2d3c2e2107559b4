use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::raycast::level_coords;
use crate::error::{Error, Result};
use crate::octree::{Brick, BrickOctree};
use crate::volume::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::UnknownName(format!("axis {other:?}"))),
        }
    }
}

/// Oblique sampling plane in world space. Pixel `(i, j)` sits at
/// `center + (i - (width-1)/2) * pixel_mm * u + (j - (height-1)/2) * pixel_mm * v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub center: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub pixel_mm: f64,
}

impl Plane {
    /// World position of pixel `(i, j)` with `u`, `v` normalized.
    pub fn point(&self, i: usize, j: usize) -> [f64; 3] {
        let u = Vector3::from(self.u).normalize();
        let v = Vector3::from(self.v).normalize();
        let di = (i as f64 - (self.width as f64 - 1.0) / 2.0) * self.pixel_mm;
        let dj = (j as f64 - (self.height as f64 - 1.0) / 2.0) * self.pixel_mm;
        (Vector3::from(self.center) + u * di + v * dj).into()
    }

    fn validate(&self) -> Result<()> {
        let u = Vector3::from(self.u);
        let v = Vector3::from(self.v);
        if self.width == 0 || self.height == 0 || !(self.pixel_mm > 0.0) {
            return Err(Error::InvalidParameter("plane needs a positive size and pixel spacing".into()));
        }
        if u.norm() == 0.0 || v.norm() == 0.0 || u.normalize().cross(&v.normalize()).norm() < 1e-9 {
            return Err(Error::InvalidParameter("plane axes must be non-zero and not parallel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceSpec {
    /// Index is in voxels of the requested level.
    Axis { axis: Axis, index: usize },
    Oblique(Plane),
}

/// Channel-planar raw intensities, `data[c * width * height + y * width + x]`.
/// Axis slices are `(nx, ny)` for z, `(nx, nz)` for y and `(ny, nz)` for x.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: DType,
    pub data: Vec<f32>,
}

impl SliceImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Binary PGM of one channel, 8-bit for u8 data and 16-bit big-endian
    /// otherwise. Float data is rejected.
    pub fn encode_pgm(&self, c: usize) -> Result<Vec<u8>> {
        if c >= self.channels {
            return Err(Error::OutOfRange(format!("channel {c} of {}", self.channels)));
        }
        let maxval = match self.dtype {
            DType::U8 => 255u32,
            DType::U16 => 65535,
            other => {
                return Err(Error::UnsupportedPixelType(format!("PGM output for {other}; use raw output")));
            }
        };
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, maxval).into_bytes();
        for &v in self.channel(c) {
            let q = self.dtype.quantize(v);
            if maxval == 255 {
                out.push(q as u8);
            } else {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>, c: usize) -> Result<()> {
        std::fs::write(path, self.encode_pgm(c)?)?;
        Ok(())
    }

    /// All channels in the native dtype, little-endian.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        self.dtype.encode(&self.data, &mut bytes);
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }
}

/// Cuts a 2-D image out of level `lod`. Axis slices copy voxels directly;
/// oblique planes interpolate trilinearly inside the brick holding the
/// nearest voxel and read 0 outside the volume. Each brick is fetched at
/// most once.
pub fn extract_slice(octree: &BrickOctree, spec: &SliceSpec, lod: usize) -> Result<SliceImage> {
    if lod >= octree.level_count() {
        return Err(Error::OutOfRange(format!("level {lod} of {}", octree.level_count())));
    }
    match spec {
        SliceSpec::Axis { axis, index } => axis_slice(octree, *axis, *index, lod),
        SliceSpec::Oblique(plane) => oblique_slice(octree, plane, lod),
    }
}

fn axis_slice(octree: &BrickOctree, axis: Axis, index: usize, lod: usize) -> Result<SliceImage> {
    let dims = octree.geometry().level_dims(lod);
    let b = octree.brick_size();
    let channels = octree.channels();
    // Image axes (columns, rows) and the fixed axis.
    let (ax, ay, fixed) = match axis {
        Axis::X => (1, 2, 0),
        Axis::Y => (0, 2, 1),
        Axis::Z => (0, 1, 2),
    };
    if index >= dims[fixed] {
        return Err(Error::OutOfRange(format!("{axis:?} index {index} of {}", dims[fixed])));
    }
    let (w, h) = (dims[ax], dims[ay]);
    let mut data = vec![0.0f32; channels * w * h];
    let bricks = octree.geometry().level_bricks(lod);
    for bj in 0..bricks[ay] {
        for bi in 0..bricks[ax] {
            let mut coords = [0; 3];
            coords[ax] = bi;
            coords[ay] = bj;
            coords[fixed] = index / b;
            let brick = octree.fetch_brick(lod, coords)?;
            let mut local = [0; 3];
            local[fixed] = index % b;
            for y in bj * b..((bj + 1) * b).min(h) {
                local[ay] = y % b;
                for x in bi * b..((bi + 1) * b).min(w) {
                    local[ax] = x % b;
                    for c in 0..channels {
                        data[(c * h + y) * w + x] = brick.get(c, local[0], local[1], local[2]);
                    }
                }
            }
        }
    }
    Ok(SliceImage {
        width: w,
        height: h,
        channels,
        dtype: octree.meta().dtype,
        data,
    })
}

fn oblique_slice(octree: &BrickOctree, plane: &Plane, lod: usize) -> Result<SliceImage> {
    plane.validate()?;
    let meta = octree.volume_meta();
    let dims = octree.geometry().level_dims(lod);
    let b = octree.brick_size();
    let channels = octree.channels();
    let (w, h) = (plane.width, plane.height);
    let mut data = vec![0.0f32; channels * w * h];
    let mut bricks: HashMap<[usize; 3], Arc<Brick>> = HashMap::new();
    let mut hits = 0usize;
    for j in 0..h {
        for i in 0..w {
            let g = level_coords(meta, lod, plane.point(i, j));
            if (0..3).any(|a| g[a] < -0.5 || g[a] > dims[a] as f64 - 0.5) {
                continue;
            }
            hits += 1;
            let nearest: [usize; 3] = std::array::from_fn(|a| (g[a].round().max(0.0) as usize).min(dims[a] - 1));
            let key = nearest.map(|p| p / b);
            let brick = match bricks.get(&key) {
                Some(brick) => brick.clone(),
                None => {
                    let brick = octree.fetch_brick(lod, key)?;
                    bricks.insert(key, brick.clone());
                    brick
                }
            };
            let origin = key.map(|k| k * b);
            let ext: [usize; 3] = std::array::from_fn(|a| (dims[a] - origin[a]).min(b));
            for c in 0..channels {
                data[(c * h + j) * w + i] =
                    super::raycast::interpolate_in(&brick, c, std::array::from_fn(|a| g[a] - origin[a] as f64), ext);
            }
        }
    }
    if hits == 0 {
        return Err(Error::OutOfRange("plane does not intersect the volume".into()));
    }
    Ok(SliceImage {
        width: w,
        height: h,
        channels,
        dtype: octree.meta().dtype,
        data,
    })
}
