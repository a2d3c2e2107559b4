use std::process::Command;

use rand::Rng;
use serde_json::json;
use tempfile::TempDir;
use voxstream::octree::{build_octree, BrickOctree};
use voxstream::render::{
    extract_slice, render, render_with, Axis, Camera, Compositing, DenseSampler, Frame, Projection, RenderSettings,
    SliceSpec, TransferFunction,
};
use voxstream::volume::{DType, DenseVolume, SliceVolume, VolumeMeta};

use crate::vol::{random_dense, rng};

const BUDGET: usize = 64 << 20;

fn octree(dir: &std::path::Path, v: &DenseVolume, brick: usize) -> BrickOctree {
    let src = v.write(dir.join("vol")).unwrap();
    build_octree(&src, brick, dir.join("cache"), BUDGET).unwrap()
}

fn top_camera(dims: [usize; 3]) -> Camera {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    Camera {
        position: [c[0], c[1], -50.0],
        look_at: [c[0], c[1], 0.0],
        up: [0.0, 1.0, 0.0],
        projection: Projection::Orthographic { width: dims[0] as f64 },
        size: [dims[0] as u32, dims[1] as u32],
    }
}

fn oblique_camera(dims: [usize; 3], size: u32) -> Camera {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    Camera {
        position: [c[0] - 40.0, c[1] - 25.0, c[2] - 55.0],
        look_at: c,
        up: [0.0, 1.0, 0.0],
        projection: Projection::Perspective { fov_deg: 40.0 },
        size: [size, size],
    }
}

fn settings(mode: Compositing) -> RenderSettings {
    RenderSettings {
        mode,
        ..RenderSettings::default()
    }
}

fn max_channel_diff(a: &Frame, b: &Frame) -> f32 {
    a.pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..4).map(move |k| (p[k] - q[k]).abs()))
        .fold(0.0, f32::max)
}

pub fn renderer() {
    // A fully transparent transfer function leaves only the background.
    let tmp = TempDir::new().unwrap();
    let v = random_dense(1, [16; 3], DType::U8, 1);
    let oct = octree(tmp.path(), &v, 16);
    let clear = TransferFunction::new([0.0, 255.0], vec![[0.0, 1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 1.0, 0.0, 0.0]]);
    let mut s = settings(Compositing::Dvr);
    s.background = [0.2, 0.3, 0.4, 1.0];
    let frame = render(&oct, &oblique_camera([16; 3], 24), &[clear], &s).unwrap();
    assert!(frame.pixels.iter().all(|p| *p == s.background), "transparent DVR is not the background");

    // One bright voxel lights exactly one pixel under MIP.
    let tmp = TempDir::new().unwrap();
    let mut v = DenseVolume::zeros(VolumeMeta::new([8; 3], DType::U8, 1));
    v.set(0, 3, 4, 5, 200.0);
    let oct = octree(tmp.path(), &v, 16);
    let ramp = TransferFunction::ramp([0.0, 255.0]);
    let frame = render(&oct, &top_camera([8; 3]), std::slice::from_ref(&ramp), &settings(Compositing::Mip)).unwrap();
    let lit: Vec<(u32, u32)> = frame
        .to_rgba8()
        .enumerate_pixels()
        .filter(|(_, _, p)| p.0 != [0, 0, 0, 255])
        .map(|(x, y, _)| (x, y))
        .collect();
    // The camera looks down +z with up +y, so image x runs along -x.
    assert_eq!(lit, vec![(7 - 3, 7 - 4)], "MIP pinpoint");

    // Level 0 of the octree against the in-core raycaster.
    let tmp = TempDir::new().unwrap();
    let v = random_dense(2, [32; 3], DType::U8, 2);
    let oct = octree(tmp.path(), &v, 32);
    let tfs = [
        TransferFunction::new([0.0, 255.0], vec![[0.0, 0.0, 0.0, 0.0, 0.0], [0.5, 1.0, 0.2, 0.0, 0.05], [1.0, 1.0, 1.0, 0.3, 0.2]]),
        TransferFunction::ramp([40.0, 220.0]),
    ];
    let cam = oblique_camera([32; 3], 48);
    for mode in [Compositing::Dvr, Compositing::Mip, Compositing::Mop] {
        let mut s = settings(mode);
        s.shifts = vec![[0.0; 3], [0.3, -0.2, 0.5]];
        let a = render(&oct, &cam, &tfs, &s).unwrap();
        let b = render_with(&DenseSampler::new(&v), &cam, &tfs, &s).unwrap();
        let d = max_channel_diff(&a, &b);
        assert!(d <= 2.0 / 255.0, "{mode:?} LOD-0 vs dense raycaster: {d}");
    }

    // Shifting a channel by one voxel equals rendering the shifted volume.
    let dims = [24, 20, 16];
    let mut r = rng(3);
    let v = DenseVolume::from_fn(VolumeMeta::new(dims, DType::F32, 1), |_, _, _, _| r.random_range(0.0f32..1.0));
    let shifted = DenseVolume::from_fn(v.meta.clone(), |c, x, y, z| v.get(c, (x + 1).min(dims[0] - 1), y, z));
    let (ta, tb) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (a, b) = (octree(ta.path(), &v, 32), octree(tb.path(), &shifted, 32));
    let tf = [TransferFunction::new([0.0, 1.0], vec![[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.5, 0.2, 0.3]])];
    let cam = top_camera(dims);
    let mut s = settings(Compositing::Dvr);
    s.shifts = vec![[1.0, 0.0, 0.0]];
    let fa = render(&a, &cam, &tf, &s).unwrap();
    s.shifts.clear();
    let fb = render(&b, &cam, &tf, &s).unwrap();
    let mut worst = 0.0f32;
    for py in 0..dims[1] as u32 {
        // Interior columns only: both rays stay a voxel away from the x faces.
        for px in 1..dims[0] as u32 - 2 {
            let (p, q) = (fa.pixel(px, py), fb.pixel(px, py));
            worst = (0..4).map(|k| (p[k] - q[k]).abs()).fold(worst, f32::max);
        }
    }
    assert!(worst <= 1e-5, "channel shift: {worst}");

    // Axis slices at level 0 are the stored slices.
    let tmp = TempDir::new().unwrap();
    let dims = [40, 36, 21];
    let v = random_dense(4, dims, DType::U16, 2);
    let oct = octree(tmp.path(), &v, 16);
    let vol = SliceVolume::open(tmp.path().join("vol")).unwrap();
    for z in 0..dims[2] {
        let img = extract_slice(&oct, &SliceSpec::Axis { axis: Axis::Z, index: z }, 0).unwrap();
        assert_eq!((img.width, img.height), (dims[0], dims[1]));
        assert!(img.data == vol.read_slice(z).unwrap().data, "z-slice {z} differs");
    }
}

/// Runs the command-line renderer with every display variable removed.
pub fn headless() {
    for var in ["DISPLAY", "WAYLAND_DISPLAY"] {
        assert!(std::env::var_os(var).is_none(), "{var} is set");
    }
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let v = random_dense(5, [20, 20, 20], DType::U8, 1);
    v.write(d.join("vol")).unwrap();
    std::fs::write(
        d.join("tf.json"),
        json!({ "channels": [{ "window": [0.0, 255.0], "points": [[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0, 0.4]] }] }).to_string(),
    )
    .unwrap();
    std::fs::write(d.join("cam.json"), serde_json::to_string(&oblique_camera([20; 3], 32)).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_voxstream");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .current_dir(d)
            .env_remove("DISPLAY")
            .env_remove("WAYLAND_DISPLAY")
            .env_remove("XDG_RUNTIME_DIR")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["octree", "vol", "tree", "--brick-size", "16"]);
    run(&["render", "tree", "--tf", "tf.json", "--camera", "cam.json", "--out", "frame.png"]);
    let img = image::open(d.join("frame.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}
