use rand::Rng;
use serde_json::json;
use tempfile::TempDir;
use voxstream::cca::{label_components, Connectivity};
use voxstream::filters::{FilterRegistry, FilterStack};
use voxstream::octree::{build_octree, OctreeBuilder, OctreeGeometry, NODE_LIMIT};
use voxstream::vesselness::{vesselness, VesselnessParams};
use voxstream::volume::{DType, DenseVolume, SliceVolume, VolumeMeta};
use voxstream::Error;

use crate::vol::{flood_fill, random_binary, random_dense, rng, same_partition};

const BIG: usize = 1 << 30;

pub fn filter_stack_io() {
    let tmp = TempDir::new().unwrap();
    let n = 64;
    let dense = random_dense(11, [n; 3], DType::U8, 1);
    dense.write(tmp.path().join("src")).unwrap();
    let pool = [
        json!({ "filter": "gaussian", "sigma": 1.0 }),
        json!({ "filter": "median", "size": 3 }),
        json!({ "filter": "dilate", "size": 5 }),
        json!({ "filter": "gaussian", "sigma": [0.5, 0.5, 1.5] }),
    ];
    let registry = FilterRegistry::with_builtins();
    for depth in 1..=pool.len() {
        let specs = &pool[..depth];
        let src = SliceVolume::open(tmp.path().join("src")).unwrap();
        let stack = registry.build_stack(specs).unwrap();
        let extents: usize = stack.filters().iter().map(|f| f.z_extent()).sum();
        let run = stack.run(&src, tmp.path().join(format!("s{depth}")), None).unwrap();
        let reads = src.counters().slices_read() as f64 / n as f64;
        let writes = run.volume.counters().slices_written() as f64 / n as f64;
        assert_eq!((reads, writes), (1.0, 1.0), "depth {depth}: streamed reads/writes");
        assert!(run.window_high_water <= extents, "depth {depth}: high water {} > {extents}", run.window_high_water);

        // Oracle: each filter materialized to its own volume.
        let mut cur = SliceVolume::open(tmp.path().join("src")).unwrap();
        let (mut reads, mut writes) = (0, 0);
        for (i, spec) in specs.iter().enumerate() {
            let single = FilterStack::new(vec![registry.build(spec).unwrap()]);
            let before = cur.counters().slices_read();
            let out = single.run(&cur, tmp.path().join(format!("m{depth}-{i}")), None).unwrap().volume;
            reads += cur.counters().slices_read() - before;
            writes += out.counters().slices_written();
            cur = out;
        }
        assert_eq!((reads / n as u64, writes / n as u64), (depth as u64, depth as u64));
        assert_eq!(run.volume.read_dense().unwrap().data, cur.read_dense().unwrap().data, "depth {depth}: result");
    }
}

pub fn octree_lossless_and_limit() {
    let mut r = rng(20);
    for case in 0..20 {
        let tmp = TempDir::new().unwrap();
        let dims = [r.random_range(1..60), r.random_range(1..60), r.random_range(1..50)];
        let dtype = [DType::U8, DType::U16, DType::F32][case % 3];
        let channels = r.random_range(1..=3);
        let brick = [16, 32][r.random_range(0..2)];
        let dense = random_dense(1000 + case as u64, dims, dtype, channels);
        let src = dense.write(tmp.path().join("src")).unwrap();
        let octree = build_octree(&src, brick, tmp.path().join("cache"), BIG).unwrap();
        let back = octree.reconstruct_level0(tmp.path().join("back")).unwrap();
        assert_eq!(back.meta().dtype, dtype);
        assert_eq!(back.read_dense().unwrap().data, dense.data, "case {case}: {dims:?} {dtype:?} x{channels} B={brick}");
    }

    let tmp = TempDir::new().unwrap();
    // 320³ level-0 bricks plus the coarser levels exceed 2^25 nodes.
    let huge = VolumeMeta::new([10240; 3], DType::U16, 1);
    match OctreeBuilder::new(huge, 32, "synthetic".into(), tmp.path().join("huge")) {
        Err(Error::NodeLimitExceeded { projected, limit }) => {
            assert_eq!(limit, NODE_LIMIT);
            assert!(projected >= 1 << 25);
        }
        Err(e) => panic!("expected NodeLimitExceeded, got {e}"),
        Ok(_) => panic!("expected NodeLimitExceeded"),
    }
    assert!(!tmp.path().join("huge").exists());
    let below = OctreeGeometry::new([8192; 3], 32).check_node_limit().unwrap();
    assert!(below < NODE_LIMIT);
}

pub fn cca_exactness() {
    let mut r = rng(30);
    for case in 0..100u64 {
        let density = r.random_range(0.05..0.6);
        let dense = random_binary(3000 + case, [48; 3], density);
        let tmp = TempDir::new().unwrap();
        dense.write(tmp.path().join("src")).unwrap();
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let src = SliceVolume::open(tmp.path().join("src")).unwrap();
            let out = tmp.path().join(format!("l{}", conn.offsets().len()));
            let (labels, table) = label_components(&src, conn, &out, None).unwrap();
            assert_eq!(src.counters().slices_read(), 2 * 48, "case {case}: read counter");
            let ours: Vec<u32> = (0..48).flat_map(|z| labels.read_slice_u32(z).unwrap()).collect();
            let (oracle, k) = flood_fill(&dense, &conn.offsets(), |v| v != 0.0);
            assert!(same_partition(&ours, &oracle), "case {case} {conn:?}: partitions differ");
            assert_eq!(table.len() as u32, k, "case {case} {conn:?}: component count");
        }
    }
}

fn cylinder(n: usize, radius: f64) -> DenseVolume {
    let c = (n as f64 - 1.0) / 2.0;
    DenseVolume::from_fn(VolumeMeta::new([n; 3], DType::U8, 1), |_, x, y, _| {
        if ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() <= radius {
            200.0
        } else {
            10.0
        }
    })
}

fn run_vesselness(src: &SliceVolume, scales: &[f64], out: std::path::PathBuf) -> Vec<f32> {
    vesselness(src, &VesselnessParams::with_scales(scales.to_vec()), out, None)
        .unwrap()
        .read_dense()
        .unwrap()
        .data
}

pub fn vesselness_criteria() {
    let tmp = TempDir::new().unwrap();
    let constant = DenseVolume::from_fn(VolumeMeta::new([16; 3], DType::U16, 1), |_, _, _, _| 1234.0);
    let src = constant.write(tmp.path().join("const")).unwrap();
    let v = run_vesselness(&src, &[1.0, 2.0, 3.0], tmp.path().join("vc"));
    assert!(v.iter().all(|&x| x == 0.0), "constant volume has nonzero response");

    let n = 32;
    let src = cylinder(n, 3.0).write(tmp.path().join("cyl")).unwrap();
    let v = run_vesselness(&src, &[2.0, 3.0, 4.0], tmp.path().join("vcyl"));
    let c = (n as f64 - 1.0) / 2.0;
    let (mut axis, mut na, mut far, mut nf) = (0.0f64, 0, 0.0f64, 0);
    for z in 4..n - 4 {
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let val = v[(z * n + y) * n + x] as f64;
                if d < 1.0 {
                    axis += val;
                    na += 1;
                } else if d >= 8.0 {
                    far += val;
                    nf += 1;
                }
            }
        }
    }
    let (axis, far) = (axis / na as f64, far / nf as f64);
    assert!(axis > 0.0 && axis >= 5.0 * far, "axis mean {axis}, background mean {far}");

    let src = cylinder(24, 2.0).write(tmp.path().join("thin")).unwrap();
    let nested: [&[f64]; 3] = [&[1.5], &[1.5, 3.0], &[1.0, 1.5, 3.0, 4.5]];
    let outs: Vec<Vec<f32>> = nested
        .iter()
        .enumerate()
        .map(|(i, s)| run_vesselness(&src, s, tmp.path().join(format!("n{i}"))))
        .collect();
    for w in outs.windows(2) {
        assert!(w[0].iter().zip(&w[1]).all(|(a, b)| b >= a), "maximum over a superset of scales decreased");
    }
}
