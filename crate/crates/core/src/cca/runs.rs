//! Per-slice run-length representation with in-plane component ids.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{Connectivity, RunStats};
use crate::volume::Slice;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Run {
    pub x0: u32,
    /// Exclusive.
    pub x1: u32,
    pub id: u32,
}

pub(crate) struct SliceRuns {
    nx: usize,
    rows: Vec<Vec<Run>>,
    first_id: u64,
    count: usize,
}

/// Calls `f(i, j)` for every pair of runs touching within `reach` columns.
fn touching(a: &[Run], b: &[Run], reach: u32, mut f: impl FnMut(usize, usize)) {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].x0 < b[j].x1 + reach && b[j].x0 < a[i].x1 + reach {
            f(i, j);
        }
        if a[i].x1 < b[j].x1 {
            i += 1;
        } else {
            j += 1;
        }
    }
}

fn find(p: &mut [u32], mut x: u32) -> u32 {
    while p[x as usize] != x {
        let next = p[x as usize];
        p[x as usize] = p[next as usize];
        x = next;
    }
    x
}

impl SliceRuns {
    pub fn extract(
        slice: &Slice,
        foreground: &(dyn Fn(f32) -> bool + Sync),
        connectivity: Connectivity,
        first_id: u64,
    ) -> SliceRuns {
        let nx = slice.nx;
        let plane = slice.channel(0);
        let mut rows: Vec<Vec<Run>> = plane
            .par_chunks(nx)
            .map(|row| {
                let mut runs = Vec::new();
                let mut x = 0;
                while x < nx {
                    if foreground(row[x]) {
                        let start = x;
                        while x < nx && foreground(row[x]) {
                            x += 1;
                        }
                        runs.push(Run {
                            x0: start as u32,
                            x1: x as u32,
                            id: 0,
                        });
                    } else {
                        x += 1;
                    }
                }
                runs
            })
            .collect();

        let offsets: Vec<usize> = rows
            .iter()
            .scan(0, |acc, r| {
                let o = *acc;
                *acc += r.len();
                Some(o)
            })
            .collect();
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut parent: Vec<u32> = (0..total as u32).collect();
        let reach = connectivity.planar_diagonal() as u32;
        for y in 1..rows.len() {
            touching(&rows[y], &rows[y - 1], reach, |i, j| {
                let a = find(&mut parent, (offsets[y] + i) as u32);
                let b = find(&mut parent, (offsets[y - 1] + j) as u32);
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi as usize] = lo;
                }
            });
        }
        // The smallest run index of a component is its first run in scan
        // order, so roots are met in first-touch order.
        let mut local = vec![u32::MAX; total];
        let mut count = 0usize;
        for (y, row) in rows.iter_mut().enumerate() {
            for (i, run) in row.iter_mut().enumerate() {
                let k = offsets[y] + i;
                let r = find(&mut parent, k as u32) as usize;
                if r == k {
                    local[k] = count as u32;
                    count += 1;
                }
                run.id = (first_id + local[r] as u64) as u32;
            }
        }
        SliceRuns {
            nx,
            rows,
            first_id,
            count,
        }
    }

    pub fn component_count(&self) -> usize {
        self.count
    }

    /// Statistics of this slice's components, in id order.
    pub fn stats(&self, z: usize) -> Vec<(u32, RunStats)> {
        let mut stats = vec![RunStats::empty(); self.count];
        for (y, row) in self.rows.iter().enumerate() {
            for run in row {
                stats[(run.id as u64 - self.first_id) as usize].add_run(run.x0 as usize, run.x1 as usize, y, z);
            }
        }
        stats
            .into_iter()
            .enumerate()
            .map(|(i, s)| ((self.first_id + i as u64) as u32, s))
            .collect()
    }

    /// Distinct `(this id, previous-slice id)` pairs of touching components.
    pub fn adjacent_pairs(&self, prev: &SliceRuns, connectivity: Connectivity) -> Vec<(u32, u32)> {
        let mut pairs = BTreeSet::new();
        let ny = self.rows.len() as isize;
        for (y, row) in self.rows.iter().enumerate() {
            for &(dy, reach) in connectivity.inter_slice() {
                let py = y as isize + dy;
                if py < 0 || py >= ny {
                    continue;
                }
                let other = &prev.rows[py as usize];
                touching(row, other, reach as u32, |i, j| {
                    pairs.insert((row[i].id, other[j].id));
                });
            }
        }
        pairs.into_iter().collect()
    }

    pub fn paint(&self, map: impl Fn(u32) -> u32) -> Vec<u32> {
        let mut out = vec![0u32; self.nx * self.rows.len()];
        for (y, row) in self.rows.iter().enumerate() {
            for run in row {
                let id = map(run.id);
                out[y * self.nx + run.x0 as usize..y * self.nx + run.x1 as usize].fill(id);
            }
        }
        out
    }
}
