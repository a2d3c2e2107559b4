use std::sync::Arc;

use rayon::prelude::*;

use super::{Camera, Compositing, Frame, Lod, RenderSettings, TransferFunction};
use crate::error::{Error, Result};
use crate::octree::{Brick, BrickOctree, OctreeGeometry};
use crate::volume::{DenseVolume, VolumeMeta};

/// Continuous voxel coordinates of level `level` for a world point, given
/// the level-0 grid.
pub(crate) fn level_coords(meta: &VolumeMeta, level: usize, world: [f64; 3]) -> [f64; 3] {
    let scale = (1u64 << level) as f64;
    std::array::from_fn(|a| {
        let i0 = (world[a] - meta.offset[a]) / meta.spacing[a];
        (i0 - 0.5 * (scale - 1.0)) / scale
    })
}

/// Trilinear weights and corner indices inside an extent of `ext` voxels,
/// clamping `local` into it.
#[inline]
fn corners(local: [f64; 3], ext: [usize; 3]) -> ([usize; 3], [usize; 3], [f64; 3]) {
    let mut i0 = [0; 3];
    let mut i1 = [0; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let l = local[a].clamp(0.0, (ext[a] - 1) as f64);
        let f = l.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(ext[a] - 1);
        t[a] = l - f;
    }
    (i0, i1, t)
}

#[inline]
fn trilinear(i0: [usize; 3], i1: [usize; 3], t: [f64; 3], get: impl Fn(usize, usize, usize) -> f32) -> f32 {
    let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
    let c = |x, y, z| get(x, y, z) as f64;
    let x00 = lerp(c(i0[0], i0[1], i0[2]), c(i1[0], i0[1], i0[2]), t[0]);
    let x10 = lerp(c(i0[0], i1[1], i0[2]), c(i1[0], i1[1], i0[2]), t[0]);
    let x01 = lerp(c(i0[0], i0[1], i1[2]), c(i1[0], i0[1], i1[2]), t[0]);
    let x11 = lerp(c(i0[0], i1[1], i1[2]), c(i1[0], i1[1], i1[2]), t[0]);
    lerp(lerp(x00, x10, t[1]), lerp(x01, x11, t[1]), t[2]) as f32
}

/// Trilinear sample of a brick at local coordinates, clamped to its first
/// `ext` voxels.
pub(crate) fn interpolate_in(brick: &Brick, c: usize, local: [f64; 3], ext: [usize; 3]) -> f32 {
    let (i0, i1, t) = corners(local, ext);
    trilinear(i0, i1, t, |x, y, z| brick.get(c, x, y, z))
}

/// Source of interpolated samples for the raycaster.
pub trait VolumeSampler: Sync {
    /// Level-0 grid.
    fn meta(&self) -> &VolumeMeta;
    fn level_count(&self) -> usize;
    /// Per-ray state, e.g. the last brick touched.
    type Cursor: Default;
    /// Channel `c` at continuous level-`level` voxel coordinates `g`.
    fn sample(&self, cursor: &mut Self::Cursor, level: usize, c: usize, g: [f64; 3]) -> Result<f32>;
}

/// Samples an octree one brick at a time: the brick holding the nearest
/// voxel is fetched and interpolation clamps at its border.
pub struct OctreeSampler<'a> {
    octree: &'a BrickOctree,
    geometry: OctreeGeometry,
}

impl<'a> OctreeSampler<'a> {
    pub fn new(octree: &'a BrickOctree) -> Self {
        OctreeSampler {
            geometry: *octree.geometry(),
            octree,
        }
    }
}

type BrickCursor = Option<((usize, [usize; 3]), Arc<Brick>)>;

impl VolumeSampler for OctreeSampler<'_> {
    type Cursor = BrickCursor;

    fn meta(&self) -> &VolumeMeta {
        self.octree.volume_meta()
    }

    fn level_count(&self) -> usize {
        self.octree.level_count()
    }

    fn sample(&self, cursor: &mut BrickCursor, level: usize, c: usize, g: [f64; 3]) -> Result<f32> {
        let b = self.octree.brick_size();
        let dims = self.geometry.level_dims(level);
        let nearest: [usize; 3] = std::array::from_fn(|a| g[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize);
        let key = (level, nearest.map(|p| p / b));
        let brick = match cursor {
            Some((k, brick)) if *k == key => brick.clone(),
            _ => {
                let brick = self.octree.fetch_brick(level, key.1)?;
                *cursor = Some((key, brick.clone()));
                brick
            }
        };
        let origin = key.1.map(|k| k * b);
        let ext: [usize; 3] = std::array::from_fn(|a| (dims[a] - origin[a]).min(b));
        let local: [f64; 3] = std::array::from_fn(|a| g[a] - origin[a] as f64);
        Ok(interpolate_in(&brick, c, local, ext))
    }
}

/// In-memory volume sampled with global clamp-to-edge interpolation.
pub struct DenseSampler<'a> {
    volume: &'a DenseVolume,
}

impl<'a> DenseSampler<'a> {
    pub fn new(volume: &'a DenseVolume) -> Self {
        DenseSampler { volume }
    }
}

impl VolumeSampler for DenseSampler<'_> {
    type Cursor = ();

    fn meta(&self) -> &VolumeMeta {
        &self.volume.meta
    }

    fn level_count(&self) -> usize {
        1
    }

    fn sample(&self, _: &mut (), level: usize, c: usize, g: [f64; 3]) -> Result<f32> {
        if level != 0 {
            return Err(Error::OutOfRange(format!("dense volumes have no level {level}")));
        }
        let (i0, i1, t) = corners(g, self.volume.dims());
        Ok(trilinear(i0, i1, t, |x, y, z| self.volume.get(c, x, y, z)))
    }
}

/// Parameter interval where the ray is inside the box, clipped to `t >= 0`.
fn clip_ray(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut n, mut f) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if n > f {
            std::mem::swap(&mut n, &mut f);
        }
        t0 = t0.max(n);
        t1 = t1.min(f);
    }
    (t0 <= t1).then_some((t0, t1))
}

fn select_level(sampler: &impl VolumeSampler, camera: &Camera, lod: Lod) -> usize {
    let levels = sampler.level_count();
    match lod {
        Lod::Level(l) => l.min(levels - 1),
        Lod::Screen => {
            let meta = sampler.meta();
            let (lo, hi) = meta.bounds_mm();
            let center: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
            let dist = (0..3).map(|a| (center[a] - camera.position[a]).powi(2)).sum::<f64>().sqrt();
            let voxel = meta.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
            let ratio = camera.pixel_footprint(dist) / voxel;
            if ratio <= 1.0 {
                0
            } else {
                (ratio.log2().floor() as usize).min(levels - 1)
            }
        }
    }
}

/// Straight RGBA of `n` channel colors, added as premultiplied colors with
/// opacity capped at 1.
fn combine(colors: impl Iterator<Item = [f64; 4]>) -> [f64; 4] {
    let mut out = [0.0; 4];
    for [r, g, b, a] in colors {
        out[0] += r * a;
        out[1] += g * a;
        out[2] += b * a;
        out[3] += a;
    }
    out.map(|v| v.min(1.0))
}

fn over_background(premul: [f64; 4], bg: [f32; 4]) -> [f32; 4] {
    let rest = 1.0 - premul[3];
    std::array::from_fn(|k| {
        let b = bg[k] as f64;
        let v = if k == 3 { premul[3] + rest * b } else { premul[k] + rest * b * bg[3] as f64 };
        v.clamp(0.0, 1.0) as f32
    })
}

struct Scene<'a, S: VolumeSampler> {
    sampler: &'a S,
    camera: &'a Camera,
    tfs: &'a [TransferFunction],
    settings: &'a RenderSettings,
    level: usize,
    step_mm: f64,
    lo: [f64; 3],
    hi: [f64; 3],
}

impl<S: VolumeSampler> Scene<'_, S> {
    fn pixel(&self, px: u32, py: u32, cursors: &mut [S::Cursor]) -> Result<[f32; 4]> {
        let bg = self.settings.background;
        let (o, d) = self.camera.ray(px, py);
        let Some((t0, t1)) = clip_ray(o, d, self.lo, self.hi) else {
            return Ok(bg);
        };
        let meta = self.sampler.meta();
        let channels = self.tfs.len();
        let mut best = vec![(f32::NEG_INFINITY, [0.0f64; 4]); channels];
        let mut premul = [0.0f64; 4];
        // Opacity correction exponent: samples are `step` voxels apart.
        let exponent = self.settings.step;
        let mut t = t0;
        while t <= t1 {
            let p: [f64; 3] = std::array::from_fn(|a| o[a] + t * d[a]);
            let mut sample_colors = [[0.0f64; 4]; 8];
            for c in 0..channels {
                let s = self.settings.shift(c);
                let q: [f64; 3] = std::array::from_fn(|a| p[a] + s[a]);
                let g = level_coords(meta, self.level, q);
                let v = self.sampler.sample(&mut cursors[c], self.level, c, g)?;
                match self.settings.mode {
                    Compositing::Mip => {
                        if v > best[c].0 {
                            best[c].0 = v;
                        }
                    }
                    Compositing::Mop => {
                        let rgba = self.tfs[c].lookup(v);
                        if rgba[3] as f32 > best[c].0 {
                            best[c] = (rgba[3] as f32, rgba);
                        }
                    }
                    Compositing::Dvr => {
                        let mut rgba = self.tfs[c].lookup(v);
                        rgba[3] = 1.0 - (1.0 - rgba[3]).powf(exponent);
                        if c < sample_colors.len() {
                            sample_colors[c] = rgba;
                        }
                    }
                }
            }
            if self.settings.mode == Compositing::Dvr {
                let s = combine(sample_colors.iter().take(channels).copied());
                let rest = 1.0 - premul[3];
                for k in 0..4 {
                    premul[k] += rest * s[k];
                }
                if self.settings.early_termination && premul[3] >= 0.99 {
                    break;
                }
            }
            t += self.step_mm;
        }
        let premul = match self.settings.mode {
            Compositing::Dvr => premul,
            Compositing::Mip => combine(
                best.iter()
                    .zip(self.tfs)
                    .filter(|((v, _), _)| v.is_finite())
                    .map(|((v, _), tf)| tf.lookup(*v)),
            ),
            Compositing::Mop => combine(best.iter().filter(|(v, _)| v.is_finite()).map(|(_, rgba)| *rgba)),
        };
        Ok(over_background(premul, bg))
    }
}

/// Raycasts any sampler. One ray per pixel, samples `step` voxels apart
/// starting where the ray enters the volume box.
pub fn render_with<S: VolumeSampler>(
    sampler: &S,
    camera: &Camera,
    tfs: &[TransferFunction],
    settings: &RenderSettings,
) -> Result<Frame> {
    camera.validate()?;
    settings.validate()?;
    tfs.iter().try_for_each(TransferFunction::validate)?;
    let meta = sampler.meta();
    if tfs.len() != meta.channels {
        return Err(Error::ChannelMismatch(format!(
            "{} transfer functions for {} channels",
            tfs.len(),
            meta.channels
        )));
    }
    if tfs.len() > 8 {
        return Err(Error::ChannelMismatch("at most 8 channels can be rendered".into()));
    }
    let level = select_level(sampler, camera, settings.lod);
    let spacing = meta.spacing.iter().cloned().fold(f64::INFINITY, f64::min) * (1u64 << level) as f64;
    let (lo, hi) = meta.bounds_mm();
    let scene = Scene {
        sampler,
        camera,
        tfs,
        settings,
        level,
        step_mm: settings.step * spacing,
        lo,
        hi,
    };
    let [w, h] = camera.size;
    let rows: Vec<Vec<[f32; 4]>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut cursors: Vec<S::Cursor> = (0..tfs.len()).map(|_| S::Cursor::default()).collect();
            (0..w).map(|px| scene.pixel(px, py, &mut cursors)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(Frame {
        width: w,
        height: h,
        pixels: rows.into_iter().flatten().collect(),
    })
}

/// Raycasts an octree at the level chosen by `settings.lod`.
pub fn render(
    octree: &BrickOctree,
    camera: &Camera,
    tfs: &[TransferFunction],
    settings: &RenderSettings,
) -> Result<Frame> {
    render_with(&OctreeSampler::new(octree), camera, tfs, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_box_clipping() {
        let (t0, t1) = clip_ray([-5.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!((t0, t1), (5.0, 6.0));
        assert!(clip_ray([-5.0, 2.0, 0.5], [1.0, 0.0, 0.0], [0.0; 3], [1.0; 3]).is_none());
        // Behind the origin.
        assert!(clip_ray([5.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.0; 3], [1.0; 3]).is_none());
    }

    #[test]
    fn level_coordinates_follow_voxel_centers() {
        let meta = VolumeMeta::new([8, 8, 8], crate::volume::DType::U8, 1).with_spacing([2.0, 2.0, 2.0]);
        // Level-1 voxel 0 covers level-0 voxels 0 and 1, centered at 1 mm.
        assert_eq!(level_coords(&meta, 1, [1.0, 1.0, 1.0]), [0.0; 3]);
        assert_eq!(level_coords(&meta, 0, [4.0, 0.0, 2.0]), [2.0, 0.0, 1.0]);
    }
}
