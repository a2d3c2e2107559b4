use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tempfile::TempDir;
use voxstream::octree::build_octree;
use voxstream::random_walker::{hrw_update, rw_solve_incore, LabelSet, ProbabilityOctree, RwParams};
use voxstream::volume::{DType, DenseVolume, VolumeMeta};
use voxstream::JobControl;

use crate::vol::{random_dense, rng};

const BIG: usize = 1 << 30;

fn idx(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[2] * dims[1] + p[1]) * dims[0] + p[0]
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..dims[2]).flat_map(move |z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
}

fn neighbours(dims: [usize; 3], p: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..3).flat_map(move |a| {
        let down = (p[a] > 0).then(|| {
            let mut q = p;
            q[a] -= 1;
            q
        });
        let up = (p[a] + 1 < dims[a]).then(|| {
            let mut q = p;
            q[a] += 1;
            q
        });
        down.into_iter().chain(up)
    })
}

/// Gaussian edge weight on min-max normalized intensities.
struct Weights<'a> {
    vol: &'a DenseVolume,
    lo: f64,
    hi: f64,
    params: &'a RwParams,
}

impl<'a> Weights<'a> {
    fn new(vol: &'a DenseVolume, params: &'a RwParams) -> Self {
        let (lo, hi) = vol
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
        Weights { vol, lo, hi, params }
    }

    fn get(&self, p: [usize; 3], q: [usize; 3]) -> f64 {
        let norm = |v: f32| if self.hi > self.lo { (v as f64 - self.lo) / (self.hi - self.lo) } else { 0.0 };
        let d = norm(self.vol.get(0, p[0], p[1], p[2])) - norm(self.vol.get(0, q[0], q[1], q[2]));
        (-self.params.beta * d * d).exp().max(self.params.min_edge_weight)
    }
}

/// Dirichlet problem on the unseeded voxels, solved by LU.
fn dense_oracle(vol: &DenseVolume, labels: &LabelSet, params: &RwParams) -> Vec<f64> {
    let dims = vol.dims();
    let w = Weights::new(vol, params);
    let mut fixed = vec![None; dims.iter().product()];
    labels.foreground.iter().for_each(|p| fixed[idx(dims, *p)] = Some(1.0));
    labels.background.iter().for_each(|p| fixed[idx(dims, *p)] = Some(0.0));
    let free: Vec<[usize; 3]> = coords(dims).filter(|&p| fixed[idx(dims, p)].is_none()).collect();
    let mut slot = vec![usize::MAX; fixed.len()];
    free.iter().enumerate().for_each(|(k, p)| slot[idx(dims, *p)] = k);
    let mut a = DMatrix::<f64>::zeros(free.len(), free.len());
    let mut b = DVector::<f64>::zeros(free.len());
    for (k, &p) in free.iter().enumerate() {
        for q in neighbours(dims, p) {
            let wq = w.get(p, q);
            a[(k, k)] += wq;
            match fixed[idx(dims, q)] {
                Some(v) => b[k] += wq * v,
                None => a[(k, slot[idx(dims, q)])] -= wq,
            }
        }
    }
    let x = a.lu().solve(&b).expect("nonsingular system");
    let mut out: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    free.iter().enumerate().for_each(|(k, p)| out[idx(dims, *p)] = x[k]);
    out
}

fn random_labels(seed: u64, dims: [usize; 3], per_class: usize) -> LabelSet {
    let mut r = rng(seed);
    let mut pick = || [0, 1, 2].map(|a| r.random_range(0..dims[a]));
    let fg: BTreeSet<_> = (0..per_class).map(|_| pick()).collect();
    let bg: BTreeSet<_> = (0..per_class).map(|_| pick()).filter(|p| !fg.contains(p)).collect();
    LabelSet::new(fg, bg)
}

struct Phantom {
    volume: DenseVolume,
    inside: Vec<bool>,
    labels: LabelSet,
}

fn sphere_phantom(n: usize, seed: u64) -> Phantom {
    let c = (n as f64 - 1.0) / 2.0;
    let radius = 0.3 * n as f64;
    let inside = |p: [usize; 3]| p.iter().map(|&v| (v as f64 - c).powi(2)).sum::<f64>() <= radius * radius;
    let mut r = rng(seed);
    let volume = DenseVolume::from_fn(VolumeMeta::new([n; 3], DType::U8, 1), |_, x, y, z| {
        (if inside([x, y, z]) { 180.0 } else { 60.0 }) + r.random_range(-6.0f32..=6.0)
    });
    let m = n / 2;
    Phantom {
        volume,
        inside: coords([n; 3]).map(inside).collect(),
        labels: LabelSet::new(
            [[m, m, m], [m - 3, m, m], [m + 3, m, m]],
            [[2, 2, 2], [n - 3, n - 3, n - 3], [2, n - 3, m], [n - 3, 2, m]],
        ),
    }
}

fn reconstruct(prob: &ProbabilityOctree, dir: &Path) -> Vec<f32> {
    prob.reconstruct(dir).unwrap().read_dense().unwrap().data
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn incore(vol: &DenseVolume, labels: &LabelSet, params: &RwParams, dir: &Path) -> Vec<f32> {
    let src = vol.write(dir.join("src")).unwrap();
    rw_solve_incore(&src, labels, params, dir.join("prob")).unwrap().read_dense().unwrap().data
}

pub fn random_walker() {
    let tmp = TempDir::new().unwrap();

    for seed in 0..4u64 {
        let vol = random_dense(500 + seed, [8; 3], DType::U8, 1);
        let labels = random_labels(seed, [8; 3], 6);
        for params in [RwParams::default(), RwParams { beta: 30.0, ..RwParams::default() }] {
            let got = incore(&vol, &labels, &params, &tmp.path().join(format!("ic{seed}-{}", params.beta)));
            let want = dense_oracle(&vol, &labels, &params);
            let err = got.iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-4, "in-core vs dense oracle, seed {seed}, beta {}: {err}", params.beta);
        }
    }

    let dims = [20, 18, 16];
    let vol = random_dense(9, dims, DType::U16, 1);
    let labels = random_labels(9, dims, 12);
    let params = RwParams { beta: 200.0, ..RwParams::default() };
    let p = incore(&vol, &labels, &params, &tmp.path().join("harm"));
    let w = Weights::new(&vol, &params);
    let mut worst = 0.0f64;
    for q in coords(dims) {
        if labels.foreground.contains(&q) || labels.background.contains(&q) {
            continue;
        }
        let (sw, swp) = neighbours(dims, q).fold((0.0, 0.0), |(s, sp), r| {
            let wr = w.get(q, r);
            (s + wr, sp + wr * p[idx(dims, r)] as f64)
        });
        worst = worst.max((p[idx(dims, q)] as f64 - swp / sw).abs());
    }
    assert!(worst <= 1e-4, "harmonicity residual {worst}");

    let job = JobControl::new();
    let phantom = sphere_phantom(32, 1);
    let src = phantom.volume.write(tmp.path().join("single")).unwrap();
    let octree = build_octree(&src, 32, tmp.path().join("cache"), BIG).unwrap();
    assert_eq!(octree.level_count(), 1);
    let params = RwParams::default();
    let (prob, _) = hrw_update(&octree, None, &phantom.labels, &params, tmp.path().join("h1"), &job).unwrap();
    let hier = reconstruct(&prob, &tmp.path().join("h1r"));
    let flat = incore(&phantom.volume, &phantom.labels, &params, &tmp.path().join("h1i"));
    let d = max_diff(&hier, &flat);
    assert!(d <= 1e-4, "single-brick hierarchy vs in-core: {d}");

    let phantom = sphere_phantom(48, 6);
    let src = phantom.volume.write(tmp.path().join("inc")).unwrap();
    let octree = build_octree(&src, 16, tmp.path().join("cache"), BIG).unwrap();
    let mut labels = phantom.labels.clone();
    let (mut current, _) = hrw_update(&octree, None, &labels, &params, tmp.path().join("p0"), &job).unwrap();
    let mut r = rng(61);
    for k in 1..=5 {
        let p = [0, 1, 2].map(|_| r.random_range(4..44));
        if k % 2 == 0 {
            labels.add_foreground(p);
        } else {
            labels.add_background(p);
        }
        current = hrw_update(&octree, Some(&current), &labels, &params, tmp.path().join(format!("p{k}")), &job).unwrap().0;
    }
    let (scratch, _) = hrw_update(&octree, None, &labels, &params, tmp.path().join("scratch"), &job).unwrap();
    let d = max_diff(&reconstruct(&current, &tmp.path().join("rc")), &reconstruct(&scratch, &tmp.path().join("rs")));
    assert!(d <= 1e-3, "incremental vs from-scratch: {d}");

    let phantom = sphere_phantom(64, 2);
    let src = phantom.volume.write(tmp.path().join("sphere")).unwrap();
    let octree = build_octree(&src, 16, tmp.path().join("cache"), BIG).unwrap();
    let (prob, _) = hrw_update(&octree, None, &phantom.labels, &params, tmp.path().join("hs"), &job).unwrap();
    let seg: Vec<bool> = reconstruct(&prob, &tmp.path().join("hsr")).iter().map(|&p| p >= 0.5).collect();
    let inter = seg.iter().zip(&phantom.inside).filter(|(a, b)| **a && **b).count();
    let total = seg.iter().filter(|a| **a).count() + phantom.inside.iter().filter(|a| **a).count();
    let dice = 2.0 * inter as f64 / total as f64;
    assert!(dice >= 0.95, "sphere phantom dice {dice}");
}
