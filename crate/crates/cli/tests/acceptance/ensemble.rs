use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use tempfile::TempDir;
use voxstream::filters::{FilterStack, ThresholdFilter};
use voxstream::volume::{DType, DenseVolume, SliceVolume};
use voxstream_ensemble::features::feature_path;
use voxstream_ensemble::{
    aggregate, apply_brush, distance_matrix, extract_features, extract_parcoords, field_distance, intersection_mask,
    mds_embed, scan_ensemble, BrushSelection, CachePolicy, DistanceMatrix, Embedding, EnsembleDataset, ParCoordsData,
    RecordId, Sampling, Statistic, VolumeCache,
};

use crate::ens::{build_ensemble, noise, rng, scalar, vector, FieldSpec};

fn names(fields: &[&str]) -> Vec<String> {
    fields.iter().map(|s| s.to_string()).collect()
}

fn scan(root: &Path) -> EnsembleDataset {
    scan_ensemble(root, CachePolicy::Ignore, None).unwrap().0
}

fn dense(ds: &EnsembleDataset, member: &str, step: usize, field: &str) -> DenseVolume {
    ds.open_volume(ds.volume(member, step, field).unwrap()).unwrap().read_dense().unwrap()
}

fn index(n: usize) -> Vec<RecordId> {
    (0..n)
        .map(|i| RecordId {
            member: format!("m{i}"),
            step: 0,
            time: 0.0,
        })
        .collect()
}

fn euclidean(points: &[Vec<f64>]) -> DistanceMatrix {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let upper = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(&points[i], &points[j])).collect();
    DistanceMatrix::from_upper(vec!["x".into()], "euclidean".into(), index(n), upper).unwrap()
}

fn reconstruction_error(d: &DistanceMatrix, e: &Embedding) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d.len() {
        for j in 0..d.len() {
            let r = e.points[i].iter().zip(&e.points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((r - d.get(i, j)).abs());
        }
    }
    worst
}

pub fn mds() {
    let mut r = rng(40);
    for case in 0..60 {
        let n = r.random_range(2..=50);
        let k = r.random_range(1..=3);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let d = euclidean(&pts);
        let e = mds_embed(&d, k).unwrap();
        let err = reconstruction_error(&d, &e);
        assert!(err <= 1e-9, "case {case} (n={n}, k={k}): error {err}");
    }
    let d = DistanceMatrix::from_upper(vec![], "x".into(), index(3), vec![1.0, 2.0, 1.0]).unwrap();
    let e = mds_embed(&d, 1).unwrap();
    let got: Vec<f64> = e.points.iter().map(|p| p[0]).collect();
    for (g, want) in got.iter().zip([1.0, 0.0, -1.0]) {
        assert!((g - want).abs() <= 1e-9, "collinear case: {got:?}");
    }
}

/// Mean absolute difference of range-normalized values, straight from the
/// dense volumes.
fn scalar_oracle(ds: &EnsembleDataset, a: &RecordId, b: &RecordId) -> f64 {
    let all: Vec<f32> = ds.records("s").iter().flat_map(|r| dense(ds, &r.member, r.step, "s").data).collect();
    let lo = all.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let hi = all.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let (x, y) = (dense(ds, &a.member, a.step, "s"), dense(ds, &b.member, b.step, "s"));
    let norm = |v: f32| (v as f64 - lo) / (hi - lo);
    x.data.iter().zip(&y.data).map(|(&p, &q)| (norm(p) - norm(q)).abs()).sum::<f64>() / x.data.len() as f64
}

/// Half normalized magnitude difference plus half angle over pi.
fn vector_oracle(ds: &EnsembleDataset, a: &RecordId, b: &RecordId) -> f64 {
    let load = |r: &RecordId| dense(ds, &r.member, r.step, "v");
    let vols: Vec<DenseVolume> = ds.records("v").iter().map(load).collect();
    let n = vols[0].data.len() / 3;
    let at = |v: &DenseVolume, i: usize| [0, 1, 2].map(|c| v.data[c * n + i] as f64);
    let mag = |p: [f64; 3]| p.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mags: Vec<f64> = vols.iter().flat_map(|v| (0..n).map(|i| mag(at(v, i))).collect::<Vec<_>>()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x, y) = (load(a), load(b));
    // Magnitudes and unit directions are stored as f32.
    let unit = |p: [f64; 3]| p.map(|c| (c / mag(p)) as f32 as f64);
    let (mut dm, mut dd) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (at(&x, i), at(&y, i));
        let (mp, mq) = (mag(p) as f32 as f64, mag(q) as f32 as f64);
        dm += ((mp - lo) / (hi - lo) - (mq - lo) / (hi - lo)).abs();
        let (u, v) = (unit(p), unit(q));
        let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        dd += mag(cross).atan2(dot) / std::f64::consts::PI;
    }
    0.5 * dm / n as f64 + 0.5 * dd / n as f64
}

pub fn similarity() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("ens");
    build_ensemble(&root, &["a", "b", "c"], 3, &[scalar("s"), vector("v")], [6, 5, 4], |_, s| Some(s as f64), noise(7));
    let ds = scan(&root);
    let ms = extract_features(&ds, &names(&["s", "v"]), Sampling::Exhaustive, None, tmp.path().join("f"), None)
        .unwrap()
        .matrices;
    let records = ds.records("s");
    let n = records.len();
    let d = |m: usize, i: usize, j: usize| {
        field_distance(ms[m].record(i).unwrap(), ms[m].record(j).unwrap(), ms[m].header()).unwrap()
    };

    let mut r = rng(41);
    for _ in 0..200 {
        let [i, j, k] = [0; 3].map(|_| r.random_range(0..n));
        for m in 0..2 {
            assert_eq!(d(m, i, i), 0.0, "identity");
            assert_eq!(d(m, i, j), d(m, j, i), "symmetry");
            assert!(d(m, i, k) <= d(m, i, j) + d(m, j, k) + 1e-12, "triangle inequality on ({i}, {j}, {k})");
        }
    }

    for i in 0..n {
        for j in i..n {
            let (s, o) = (d(0, i, j), scalar_oracle(&ds, &records[i], &records[j]));
            assert!((s - o).abs() <= 1e-12, "scalar {i},{j}: {s} vs {o}");
            let (v, o) = (d(1, i, j), vector_oracle(&ds, &records[i], &records[j]));
            assert!((v - o).abs() <= 1e-12, "vector {i},{j}: {v} vs {o}");
        }
    }

    let dm = distance_matrix(&ms, None).unwrap();
    assert_eq!(dm.len(), n);
    for i in 0..n {
        assert_eq!(dm.get(i, i), 0.0);
        for j in 0..n {
            assert_eq!(dm.get(i, j), dm.get(j, i));
            assert!((0.0..=1.0).contains(&dm.get(i, j)));
        }
    }
}

const MEMBERS: [&str; 7] = ["run0", "run1", "run2", "run3", "run4", "run5", "run6"];
const STEPS: usize = 20;
const N: usize = 32;

fn cluster(m: usize) -> usize {
    usize::from(m >= 4)
}

/// Two parameter clusters: the pattern and flow direction depend on the
/// cluster, members differ by small noise and drift slowly in time.
fn clustered(m: usize, s: usize, f: usize, c: usize, x: usize, y: usize, z: usize) -> f32 {
    let jitter = 0.05 * noise(99)(m, s, f, c, x, y, z);
    let base = ((x as f32) * 0.3).sin() * ((y as f32) * 0.2).cos() + 0.1 * (z as f32 * 0.1).sin();
    let sign = if cluster(m) == 0 { 1.0 } else { -1.0 };
    match f {
        0 => sign * base + 0.002 * s as f32 + jitter,
        _ => {
            let magnitude = 1.0 + 0.3 * (z as f32 * 0.2).sin();
            let dir = match (cluster(m), c) {
                (0, 0) | (1, 1) => 1.0,
                (_, 2) => 0.2,
                _ => 0.0,
            };
            magnitude * dir + jitter
        }
    }
}

pub fn end_to_end() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("ens");
    build_ensemble(&root, &MEMBERS, STEPS, &[scalar("p"), vector("v")], [N; 3], |_, s| Some(s as f64), clustered);

    let (cold, report) = scan_ensemble(&root, CachePolicy::Use, None).unwrap();
    assert!(!report.from_cache);
    assert_eq!(cold.members.len(), 7);
    assert_eq!(cold.total_steps(), 7 * STEPS);
    assert_eq!(cold.common_fields, names(&["p", "v"]));
    assert!(cold.members.iter().all(|m| m.steps.len() == STEPS));
    let (warm, report) = scan_ensemble(&root, CachePolicy::Use, None).unwrap();
    assert!(report.from_cache);
    assert_eq!(warm, cold, "warm scan differs from cold scan");
    let ds = warm;

    let volume_bytes = N * N * N * 4;
    let cache = VolumeCache::new(8 * volume_bytes);
    let mut r = rng(42);
    for _ in 0..1000 {
        let m = MEMBERS[r.random_range(0..7)];
        let f = ["p", "v"][r.random_range(0..2)];
        cache.get(&ds, m, r.random_range(0..STEPS), f).unwrap();
        assert!(cache.resident_bytes() <= cache.budget(), "cache over budget");
    }

    let run = extract_features(&ds, &names(&["p", "v"]), Sampling::Random { count: 4096, seed: 1 }, None, tmp.path().join("f"), None)
        .unwrap();
    let e = mds_embed(&distance_matrix(&run.matrices, None).unwrap(), 2).unwrap();
    let member_of = |r: &RecordId| MEMBERS.iter().position(|m| *m == r.member).unwrap();
    let centroid = |k: usize| {
        let pts: Vec<&Vec<f64>> = e.points.iter().zip(&e.index).filter(|(_, r)| cluster(member_of(r)) == k).map(|(p, _)| p).collect();
        [0, 1].map(|c| pts.iter().map(|p| p[c]).sum::<f64>() / pts.len() as f64)
    };
    let centroids = [centroid(0), centroid(1)];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let spread = e
        .points
        .iter()
        .zip(&e.index)
        .map(|(p, r)| dist(p, &centroids[cluster(member_of(r))]))
        .fold(0.0, f64::max);
    let separation = dist(&centroids[0], &centroids[1]);
    assert!(separation > 2.0 * spread, "clusters: separation {separation}, spread {spread}");

    let subset: BTreeSet<String> = ["run1", "run2", "run5"].iter().map(|s| s.to_string()).collect();
    for (field, members, window) in [("p", None, Some([5.0, 9.0])), ("v", Some(&subset), None)] {
        let selected: Vec<DenseVolume> = MEMBERS
            .iter()
            .filter(|m| members.is_none_or(|set| set.contains(**m)))
            .flat_map(|m| {
                (0..STEPS)
                    .filter(|&s| window.is_none_or(|[a, b]: [f64; 2]| (a..=b).contains(&(s as f64))))
                    .map(|s| dense(&ds, m, s, field))
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = selected.len() as f64;
        let mean = aggregate(&ds, field, members, window, Statistic::Mean, tmp.path().join(format!("mean-{field}")), None)
            .unwrap()
            .read_dense()
            .unwrap();
        let var = aggregate(&ds, field, members, window, Statistic::Variance, tmp.path().join(format!("var-{field}")), None)
            .unwrap()
            .read_dense()
            .unwrap();
        for i in 0..selected[0].data.len() {
            let m = selected.iter().map(|v| v.data[i] as f64).sum::<f64>() / n;
            let s2 = selected.iter().map(|v| (v.data[i] as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((mean.data[i] as f64 - m).abs() <= 1e-6, "{field} mean at {i}");
            assert!((var.data[i] as f64 - s2).abs() <= 1e-6, "{field} variance at {i}");
        }
    }
}

fn mixed_fixture(root: &Path) -> EnsembleDataset {
    let fields = [
        FieldSpec {
            name: "a",
            channels: 1,
            dtype: DType::U8,
        },
        scalar("b"),
        vector("v"),
    ];
    build_ensemble(root, &["m0", "m1", "m2"], 3, &fields, [9, 8, 7], |_, s| Some(s as f64), |m, s, f, c, x, y, z| {
        let n = noise(17)(m, s, f, c, x, y, z);
        if f == 0 {
            ((n + 1.0) * 127.5).round()
        } else {
            n
        }
    });
    scan(root)
}

fn random_selection(pc: &ParCoordsData, r: &mut impl Rng) -> BrushSelection {
    let mut sel = BrushSelection::none(pc.header.axes.len());
    for (a, axis) in pc.header.axes.iter().enumerate() {
        if r.random_bool(0.6) {
            let [lo, hi] = axis.range;
            let (x, y) = (r.random_range(lo..=hi), r.random_range(lo..=hi));
            sel.intervals[a] = Some([x.min(y), x.max(y)]);
        }
    }
    sel
}

pub fn parcoords() {
    let tmp = TempDir::new().unwrap();
    let ds = mixed_fixture(&tmp.path().join("e"));
    let pc = extract_parcoords(&ds, &names(&["a", "b", "v"]), 64, 3, 5, None, None).unwrap();
    let axes = pc.header.axes.len();
    assert_eq!(axes, 5);

    let mut r = rng(50);
    for k in 0..12 {
        let lo = r.random_range(0.0..255.0f64).floor();
        let hi = (lo + r.random_range(0.0..120.0f64)).min(255.0);
        let (member, step) = (["m0", "m1", "m2"][k % 3], k % 3);
        let sel = BrushSelection::none(axes).with(0, [lo, hi]);
        let mask = intersection_mask(&ds, &pc, member, step, &sel, tmp.path().join(format!("mask{k}")), None).unwrap();
        let src = ds.open_volume(ds.volume(member, step, "a").unwrap()).unwrap();
        FilterStack::new(vec![Box::new(ThresholdFilter::new(lo, hi).unwrap())])
            .run(&src, tmp.path().join(format!("thr{k}")), None)
            .unwrap();
        let thr = SliceVolume::open(tmp.path().join(format!("thr{k}"))).unwrap();
        assert!(mask.read_dense().unwrap().data == thr.read_dense().unwrap().data, "one-axis mask [{lo}, {hi}] differs from threshold");
    }

    for _ in 0..200 {
        let sel = random_selection(&pc, &mut r);
        let before: BTreeSet<usize> = apply_brush(&pc, &sel).unwrap().lines.into_iter().collect();
        let mut bigger = sel.clone();
        let a = r.random_range(0..axes);
        bigger.intervals[a] = match sel.intervals[a] {
            _ if r.random_bool(0.2) => None,
            Some([lo, hi]) => Some([lo - r.random_range(0.0..0.5), hi + r.random_range(0.0..0.5)]),
            None => None,
        };
        let after: BTreeSet<usize> = apply_brush(&pc, &bigger).unwrap().lines.into_iter().collect();
        assert!(before.is_subset(&after), "enlarging a brush removed lines");
    }

    for k in 0..10 {
        let sel = random_selection(&pc, &mut r);
        let (member, step) = (["m0", "m1", "m2"][k % 3], (k / 3) % 3);
        let mask = intersection_mask(&ds, &pc, member, step, &sel, tmp.path().join(format!("multi{k}")), None)
            .unwrap()
            .read_dense()
            .unwrap();
        let (a, b, v) = (dense(&ds, member, step, "a"), dense(&ds, member, step, "b"), dense(&ds, member, step, "v"));
        let [nx, ny, nz] = a.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let vals = [a.get(0, x, y, z), b.get(0, x, y, z), v.get(0, x, y, z), v.get(1, x, y, z), v.get(2, x, y, z)];
                    let hit = sel
                        .intervals
                        .iter()
                        .zip(vals)
                        .all(|(i, val)| i.is_none_or(|[lo, hi]| lo <= val as f64 && val as f64 <= hi));
                    assert_eq!(mask.get(0, x, y, z), if hit { 255.0 } else { 0.0 }, "multi-field mask {k} at {x},{y},{z}");
                }
            }
        }
    }
}

/// Every artifact of one analysis run, as bytes.
fn analysis(ds: &EnsembleDataset, dir: &Path) -> Vec<Vec<u8>> {
    let fields = names(&["s", "v"]);
    let run = extract_features(ds, &fields, Sampling::Random { count: 500, seed: 9 }, None, dir.join("f"), None).unwrap();
    let d = distance_matrix(&run.matrices, None).unwrap();
    d.save(dir.join("d.dist")).unwrap();
    let e = mds_embed(&d, 3).unwrap();
    let pc = extract_parcoords(ds, &fields, 100, 2, 9, None, None).unwrap();
    pc.save(dir.join("pc.bin")).unwrap();
    let mut out: Vec<Vec<u8>> = fields.iter().map(|f| std::fs::read(feature_path(&dir.join("f"), f)).unwrap()).collect();
    out.push(std::fs::read(dir.join("d.dist")).unwrap());
    out.push(serde_json::to_vec(&e.to_json()).unwrap());
    out.push(std::fs::read(dir.join("pc.bin")).unwrap());
    out
}

pub fn determinism() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("ens");
    build_ensemble(&root, &["a", "b", "c"], 4, &[scalar("s"), vector("v")], [12, 10, 8], |_, s| Some(s as f64), noise(3));
    let ds = scan(&root);
    let mut runs = Vec::new();
    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("t{threads}-{rep}"));
            runs.push((threads, pool.install(|| analysis(&ds, &dir))));
        }
    }
    let labels = ["scalar features", "vector features", "distance matrix", "embedding", "parcoords"];
    for (threads, run) in &runs[1..] {
        for (k, (a, b)) in runs[0].1.iter().zip(run).enumerate() {
            assert!(a == b, "{} differ with {threads} threads", labels[k]);
        }
    }
}
