use std::path::Path;

use super::{Slice, SliceVolume, SliceWriter, VolumeMeta};
use crate::error::{Error, Result};

/// Fully resident volume in the same channel-planar zyx layout as the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVolume {
    pub meta: VolumeMeta,
    pub data: Vec<f32>,
}

impl DenseVolume {
    pub fn zeros(meta: VolumeMeta) -> Self {
        let n = meta.voxels() * meta.channels;
        DenseVolume {
            meta,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(meta: VolumeMeta, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut v = DenseVolume::zeros(meta);
        let [nx, ny, nz] = v.meta.dimensions;
        for c in 0..v.meta.channels {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = v.index(c, x, y, z);
                        v.data[i] = v.meta.dtype.quantize(f(c, x, y, z));
                    }
                }
            }
        }
        v
    }

    pub fn from_data(meta: VolumeMeta, data: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.voxels() * meta.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} voxels x {} channels",
                data.len(),
                meta.voxels(),
                meta.channels
            )));
        }
        Ok(DenseVolume { meta, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dimensions
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, nz] = self.meta.dimensions;
        ((c * nz + z) * ny + y) * nx + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    /// Clamp-to-edge access.
    #[inline]
    pub fn get_clamped(&self, c: usize, x: isize, y: isize, z: isize) -> f32 {
        let [nx, ny, nz] = self.meta.dimensions;
        self.get(
            c,
            x.clamp(0, nx as isize - 1) as usize,
            y.clamp(0, ny as isize - 1) as usize,
            z.clamp(0, nz as isize - 1) as usize,
        )
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.meta.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn slice(&self, z: usize) -> Slice {
        let [nx, ny, _] = self.meta.dimensions;
        let mut s = Slice::zeros(nx, ny, self.meta.channels);
        for c in 0..self.meta.channels {
            let start = self.index(c, 0, 0, z);
            s.channel_mut(c).copy_from_slice(&self.data[start..start + nx * ny]);
        }
        s
    }

    pub fn set_slice(&mut self, z: usize, slice: &Slice) {
        let [nx, ny, _] = self.meta.dimensions;
        for c in 0..self.meta.channels {
            let start = self.index(c, 0, 0, z);
            self.data[start..start + nx * ny].copy_from_slice(slice.channel(c));
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SliceVolume> {
        let mut w = SliceWriter::create(self.meta.clone(), dir)?;
        for z in 0..self.meta.nz() {
            w.push(&self.slice(z))?;
        }
        w.finish()
    }

    pub fn bytes(&self) -> usize {
        self.meta.voxels() * self.meta.channels * self.meta.dtype.size()
    }
}
