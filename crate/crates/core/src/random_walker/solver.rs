//! Combinatorial Dirichlet problem on a 6-connected grid, solved with
//! Jacobi-preconditioned conjugate gradients.

use rayon::prelude::*;

use super::RwParams;
use crate::error::{Error, Result};

/// Edge weights to the +x, +y, +z neighbour (0 past the border) and degrees.
struct Weights {
    dims: [usize; 3],
    w: [Vec<f64>; 3],
    degree: Vec<f64>,
}

impl Weights {
    fn new(dims: [usize; 3], intensity: &[f64], beta: f64, eps: f64) -> Self {
        let [nx, ny, nz] = dims;
        let n = nx * ny * nz;
        let strides = [1, nx, nx * ny];
        let mut w = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (a, wa) in w.iter_mut().enumerate() {
            wa.par_iter_mut().enumerate().for_each(|(i, out)| {
                let coord = [i % nx, (i / nx) % ny, i / (nx * ny)];
                if coord[a] + 1 < dims[a] {
                    let d = intensity[i] - intensity[i + strides[a]];
                    *out = (-beta * d * d).exp().max(eps);
                }
            });
        }
        let mut degree = vec![0.0; n];
        degree.par_iter_mut().enumerate().for_each(|(i, d)| {
            let coord = [i % nx, (i / nx) % ny, i / (nx * ny)];
            let mut s = 0.0;
            for a in 0..3 {
                s += w[a][i];
                if coord[a] > 0 {
                    s += w[a][i - strides[a]];
                }
            }
            *d = s;
        });
        Weights { dims, w, degree }
    }

    /// `sum_j w_ij v_j` over the grid neighbours of `i`.
    #[inline]
    fn neighbour_sum(&self, i: usize, v: &[f64]) -> f64 {
        let [nx, ny, _] = self.dims;
        let strides = [1, nx, nx * ny];
        let coord = [i % nx, (i / nx) % ny, i / (nx * ny)];
        let mut s = 0.0;
        for a in 0..3 {
            if coord[a] + 1 < self.dims[a] {
                s += self.w[a][i] * v[i + strides[a]];
            }
            if coord[a] > 0 {
                s += self.w[a][i - strides[a]] * v[i - strides[a]];
            }
        }
        s
    }
}

pub(crate) struct Solution {
    pub values: Vec<f64>,
}

/// `fixed[i]` holds the Dirichlet value of voxel `i`, `None` for unknowns.
/// Converged when every unknown differs from the weighted mean of its
/// neighbours by at most `params.cg_tolerance`.
pub(crate) fn solve(
    dims: [usize; 3],
    intensity: &[f64],
    fixed: &[Option<f64>],
    initial: Option<&[f64]>,
    params: &RwParams,
) -> Result<Solution> {
    let n: usize = dims.iter().product();
    debug_assert_eq!(intensity.len(), n);
    debug_assert_eq!(fixed.len(), n);
    let unknown: Vec<bool> = fixed.iter().map(Option::is_none).collect();
    let any_fixed = unknown.iter().any(|u| !u);
    let any_unknown = unknown.iter().any(|&u| u);
    if !any_unknown {
        return Ok(Solution {
            values: fixed.iter().map(|v| v.unwrap()).collect(),
        });
    }
    if !any_fixed {
        // No boundary condition at all: every constant is harmonic.
        return Ok(Solution {
            values: vec![0.5; n],
        });
    }
    let weights = Weights::new(dims, intensity, params.beta, params.min_edge_weight);
    let d = &weights.degree;
    let mut x: Vec<f64> = (0..n)
        .map(|i| match fixed[i] {
            Some(v) => v,
            None => initial.map_or(0.5, |g| g[i].clamp(0.0, 1.0)),
        })
        .collect();

    let residual = |x: &[f64], r: &mut [f64]| {
        r.par_iter_mut().enumerate().for_each(|(i, ri)| {
            *ri = if unknown[i] {
                weights.neighbour_sum(i, x) - d[i] * x[i]
            } else {
                0.0
            };
        });
    };
    let scaled_max = |r: &[f64]| {
        r.par_iter()
            .zip(d.par_iter())
            .map(|(ri, di)| ri.abs() / di)
            .reduce(|| 0.0, f64::max)
    };
    let dot = |a: &[f64], b: &[f64]| a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).sum::<f64>();

    let mut r = vec![0.0; n];
    residual(&x, &mut r);
    let mut z: Vec<f64> = r.iter().zip(d).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let max_iter = params.max_iterations.unwrap_or_else(|| 1000 * ((n as f64).cbrt().ceil() as usize).max(1));
    let tol = params.cg_tolerance;
    let mut lanczos = Lanczos::default();
    let mut iterations = 0;
    let mut last_exact = f64::INFINITY;
    loop {
        let res = scaled_max(&r);
        if res == 0.0 {
            break;
        }
        if res <= tol {
            if let Some(lambda) = lanczos.smallest() {
                if res / lambda <= tol {
                    break;
                }
            }
            // The recomputed residual no longer shrinks: rounding floor.
            if iterations > 0 && iterations % 64 == 0 {
                if res > 0.5 * last_exact {
                    break;
                }
                last_exact = res;
            }
        }
        if iterations >= max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: res,
            });
        }
        q.par_iter_mut().enumerate().for_each(|(i, qi)| {
            *qi = if unknown[i] {
                d[i] * p[i] - weights.neighbour_sum(i, &p)
            } else {
                0.0
            };
        });
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        x.par_iter_mut().zip(p.par_iter()).for_each(|(xi, pi)| *xi += alpha * pi);
        iterations += 1;
        if iterations % 64 == 0 {
            residual(&x, &mut r);
        } else {
            r.par_iter_mut().zip(q.par_iter()).for_each(|(ri, qi)| *ri -= alpha * qi);
        }
        z.par_iter_mut()
            .zip(r.par_iter().zip(d.par_iter()))
            .for_each(|(zi, (ri, di))| *zi = ri / di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        lanczos.push(alpha, beta);
        p.par_iter_mut().zip(z.par_iter()).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Solution { values: x })
}

/// Lanczos tridiagonal recovered from the CG coefficients. Its smallest
/// eigenvalue estimates that of the Jacobi-preconditioned operator, which
/// turns the residual into an error estimate.
#[derive(Default)]
struct Lanczos {
    diag: Vec<f64>,
    off: Vec<f64>,
    last: Option<(f64, f64)>,
}

impl Lanczos {
    fn push(&mut self, alpha: f64, beta: f64) {
        let mut t = 1.0 / alpha;
        if let Some((a, b)) = self.last {
            t += b / a;
            self.off.push(b.sqrt() / a);
        }
        self.diag.push(t);
        self.last = Some((alpha, beta));
    }

    /// Eigenvalues of the leading `diag.len()` block below `x`.
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = 1.0f64;
        for (i, &d) in self.diag.iter().enumerate() {
            let e2 = if i > 0 { self.off[i - 1].powi(2) } else { 0.0 };
            q = d - x - if i > 0 { e2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (d.abs() + x.abs()).max(f64::MIN_POSITIVE);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn smallest(&self) -> Option<f64> {
        if self.diag.is_empty() {
            return None;
        }
        // Gershgorin interval, then bisection on the Sturm count.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &d) in self.diag.iter().enumerate() {
            let radius = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + self.off.get(i).map_or(0.0, |e| e.abs());
            lo = lo.min(d - radius);
            hi = hi.max(d + radius);
        }
        lo = lo.max(0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (hi > 0.0).then_some(hi)
    }
}
