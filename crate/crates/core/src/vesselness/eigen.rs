//! Eigenvalues of symmetric 3x3 matrices stored as `xx, yy, zz, xy, xz, yz`.

use std::f64::consts::PI;

pub type Sym3 = [f64; 6];

fn full(m: &Sym3) -> [[f64; 3]; 3] {
    let [xx, yy, zz, xy, xz, yz] = *m;
    [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
}

fn sort_desc(mut v: [f64; 3]) -> [f64; 3] {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Closed-form trigonometric solution, falling back to Jacobi sweeps when
/// the spectrum is nearly degenerate relative to the matrix scale.
pub fn sym3_eigenvalues(m: &Sym3) -> [f64; 3] {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return [0.0; 3];
    }
    let [xx, yy, zz, xy, xz, yz] = *m;
    let off = xy * xy + xz * xz + yz * yz;
    if off == 0.0 {
        return sort_desc([xx, yy, zz]);
    }
    let q = (xx + yy + zz) / 3.0;
    let p2 = (xx - q).powi(2) + (yy - q).powi(2) + (zz - q).powi(2) + 2.0 * off;
    let p = (p2 / 6.0).sqrt();
    if p * p * p < 1e-12 * scale * scale * scale {
        return sym3_eigen_jacobi(m).0;
    }
    let b = |v: f64| v / p;
    let (bxx, byy, bzz) = (b(xx - q), b(yy - q), b(zz - q));
    let (bxy, bxz, byz) = (b(xy), b(xz), b(yz));
    let det = bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz) + bxz * (bxy * byz - byy * bxz);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    sort_desc([e1, e2, e3])
}

/// Cyclic Jacobi rotations. Returns descending eigenvalues and the matching
/// unit eigenvectors (as rows).
pub fn sym3_eigen_jacobi(m: &Sym3) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = full(m);
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let diag = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let vals = idx.map(|i| a[i][i]);
    let vecs = idx.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (vals, vecs)
}
