use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{render, Camera, Projection, RenderSettings, TransferFunction};
use crate::error::{Error, Result};
use crate::job::JobControl;
use crate::octree::BrickOctree;

/// Camera and optional per-channel window and step overrides at `time` (s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub time: f64,
    pub camera: Camera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Every camera vector is interpolated component-wise.
    Linear,
    /// Position and look-at distance are linear, the view orientation is
    /// interpolated on the unit quaternion sphere.
    #[default]
    Slerp,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "slerp" => Ok(Interpolation::Slerp),
            other => Err(Error::UnknownName(format!("interpolation {other:?}"))),
        }
    }
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    std::array::from_fn(|k| lerp(a[k], b[k], s))
}

fn check(keys: &[Keyframe]) -> Result<()> {
    if keys.len() < 2 {
        return Err(Error::InvalidParameter("animation needs at least two keyframes".into()));
    }
    if keys.windows(2).any(|w| !(w[1].time > w[0].time)) {
        return Err(Error::NonMonotoneKeyframes);
    }
    keys.iter().try_for_each(|k| k.camera.validate())
}

/// Rotation taking x, y, z to right, up and backward.
fn orientation(camera: &Camera) -> UnitQuaternion<f64> {
    let b = camera.basis();
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_basis_unchecked(&[b.right, b.up, -b.forward]))
}

fn blend_cameras(a: &Camera, b: &Camera, s: f64, mode: Interpolation) -> Camera {
    let projection = match (a.projection, b.projection) {
        (Projection::Orthographic { width: w0 }, Projection::Orthographic { width: w1 }) => {
            Projection::Orthographic { width: lerp(w0, w1, s) }
        }
        (Projection::Perspective { fov_deg: f0 }, Projection::Perspective { fov_deg: f1 }) => {
            Projection::Perspective { fov_deg: lerp(f0, f1, s) }
        }
        (p, _) => p,
    };
    let position = lerp3(a.position, b.position, s);
    let (look_at, up) = match mode {
        Interpolation::Linear => (lerp3(a.look_at, b.look_at, s), lerp3(a.up, b.up, s)),
        Interpolation::Slerp => {
            let (q0, q1) = (orientation(a), orientation(b));
            let q = q0.try_slerp(&q1, s, 1e-12).unwrap_or(if s < 0.5 { q0 } else { q1 });
            let dist = |c: &Camera| (Vector3::from(c.look_at) - Vector3::from(c.position)).norm();
            let forward = -(q * Vector3::z());
            let up = q * Vector3::y();
            let look = Vector3::from(position) + forward * lerp(dist(a), dist(b), s);
            (look.into(), up.into())
        }
    };
    Camera {
        position,
        look_at,
        up,
        projection,
        size: a.size,
    }
}

/// State at time `t`, clamped to the keyframe span. At a keyframe time the
/// keyframe itself is returned.
pub fn interpolate(keys: &[Keyframe], t: f64, mode: Interpolation) -> Result<Keyframe> {
    check(keys)?;
    let last = keys.len() - 1;
    if t <= keys[0].time {
        return Ok(keys[0].clone());
    }
    if t >= keys[last].time {
        return Ok(keys[last].clone());
    }
    let i = keys.partition_point(|k| k.time <= t) - 1;
    let (a, b) = (&keys[i], &keys[i + 1]);
    if t == a.time {
        return Ok(a.clone());
    }
    let s = (t - a.time) / (b.time - a.time);
    let window = match (&a.window, &b.window) {
        (Some(wa), Some(wb)) if wa.len() == wb.len() => Some(
            wa.iter()
                .zip(wb)
                .map(|(x, y)| [lerp(x[0], y[0], s), lerp(x[1], y[1], s)])
                .collect(),
        ),
        (w, _) => w.clone(),
    };
    let step = match (a.step, b.step) {
        (Some(x), Some(y)) => Some(lerp(x, y, s)),
        (x, _) => x,
    };
    Ok(Keyframe {
        time: t,
        camera: blend_cameras(&a.camera, &b.camera, s, mode),
        window,
        step,
    })
}

/// Renders frames at `t0 + k / fps` for `k = 0..=floor(duration * fps)`
/// into `out_dir/frame_00000.png`, ... and returns their paths.
#[allow(clippy::too_many_arguments)]
pub fn animate(
    octree: &BrickOctree,
    keys: &[Keyframe],
    tfs: &[TransferFunction],
    settings: &RenderSettings,
    mode: Interpolation,
    fps: f64,
    duration: f64,
    out_dir: impl AsRef<Path>,
    job: &JobControl,
) -> Result<Vec<PathBuf>> {
    check(keys)?;
    if !(fps > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidParameter("fps must be > 0 and duration >= 0".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let frames = (duration * fps).floor() as usize + 1;
    let mut paths = Vec::with_capacity(frames);
    for k in 0..frames {
        job.check()?;
        let state = interpolate(keys, keys[0].time + k as f64 / fps, mode)?;
        let mut tf = tfs.to_vec();
        if let Some(windows) = &state.window {
            for (tf, w) in tf.iter_mut().zip(windows) {
                tf.window = *w;
            }
        }
        let mut s = settings.clone();
        if let Some(step) = state.step {
            s.step = step;
        }
        let frame = render(octree, &state.camera, &tf, &s)?;
        let path = out_dir.join(format!("frame_{k:05}.png"));
        frame.save_png(&path)?;
        paths.push(path);
        job.set_progress((k + 1) as f64 / frames as f64);
    }
    Ok(paths)
}
