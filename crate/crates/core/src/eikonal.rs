//! Stationary first-arrival solves by the Fast Marching Method: minimum time
//! to target, post-breakdown cost, and the horizon bound derived from them.

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridSlice, PointKind, SpeedField, INF_SENTINEL};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// First-arrival field: zero on the target boundary, nondecreasing along the
/// causal acceptance order, sentinel at unreachable points.
#[derive(Debug, Clone)]
pub struct ArrivalField {
    values: GridSlice,
}

impl ArrivalField {
    pub fn values(&self) -> &GridSlice {
        &self.values
    }

    pub fn at(&self, ix: usize, jy: usize) -> f64 {
        self.values.at(ix, jy)
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.values.sample(x, y)
    }

    /// Largest finite arrival value.
    pub fn max_finite(&self) -> Option<f64> {
        self.values.finite_max()
    }
}

struct HeapEntry {
    value: f64,
    idx: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.idx == other.idx
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on value via reversed comparison.
        other
            .value
            .total_cmp(&self.value)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Two-point quadratic update: smallest `z` with
/// `((z - a)_+ / h)^2 + ((z - b)_+ / h)^2 = (1/f)^2`
/// given the per-axis minimum accepted neighbor values `a` and `b`.
fn local_update(a: f64, b: f64, cell_cost: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi >= INF_SENTINEL || hi - lo >= cell_cost {
        return lo + cell_cost;
    }
    let d = hi - lo;
    0.5 * (lo + hi + (2.0 * cell_cost * cell_cost - d * d).sqrt())
}

fn solve_arrival(grid: &Grid2D, speed: &SpeedField) -> Result<ArrivalField> {
    if !grid.has_target() {
        return Err(Error::EmptyTarget);
    }
    let n = grid.n();
    let h = grid.h();
    let mut values = vec![INF_SENTINEL; n * n];
    let mut accepted = vec![false; n * n];
    let mut heap = BinaryHeap::new();

    for jy in 0..n {
        for ix in 0..n {
            let idx = grid.idx(ix, jy);
            match grid.kind(ix, jy) {
                PointKind::TargetBoundary => {
                    values[idx] = 0.0;
                    heap.push(HeapEntry { value: 0.0, idx });
                }
                PointKind::TargetInterior => {
                    values[idx] = 0.0;
                    accepted[idx] = true;
                }
                _ => {}
            }
        }
    }

    let neighbor_min = |values: &[f64], accepted: &[bool], ix: usize, jy: usize| -> (f64, f64) {
        let pick = |ox: isize, oy: isize| -> f64 {
            let (nx, ny) = (ix as isize + ox, jy as isize + oy);
            if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize {
                return INF_SENTINEL;
            }
            let nidx = ny as usize * n + nx as usize;
            if accepted[nidx] {
                values[nidx]
            } else {
                INF_SENTINEL
            }
        };
        let a = pick(1, 0).min(pick(-1, 0));
        let b = pick(0, 1).min(pick(0, -1));
        (a, b)
    };

    while let Some(HeapEntry { value, idx }) = heap.pop() {
        if accepted[idx] || value > values[idx] {
            continue; // stale entry
        }
        accepted[idx] = true;
        let (ix, jy) = (idx % n, idx / n);
        for (ox, oy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (ix as isize + ox, jy as isize + oy);
            if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let nidx = ny * n + nx;
            if accepted[nidx] || grid.kind(nx, ny) != PointKind::Free {
                continue;
            }
            let f = speed.at(nx, ny);
            if !(f > 0.0) {
                continue;
            }
            let (a, b) = neighbor_min(&values, &accepted, nx, ny);
            let cand = local_update(a, b, h / f);
            if cand < values[nidx] {
                values[nidx] = cand;
                heap.push(HeapEntry {
                    value: cand,
                    idx: nidx,
                });
            }
        }
    }

    Ok(ArrivalField {
        values: GridSlice::from_vec(n, values),
    })
}

/// Minimum time to enter the target: first-order upwind solution of
/// `f |grad z| = 1` on the free region with `z = 0` on the target boundary.
pub fn solve_min_time(grid: &Grid2D, speed: &SpeedField) -> Result<ArrivalField> {
    solve_arrival(grid, speed)
}

/// Post-breakdown cost-to-target: same contract as [`solve_min_time`] with
/// the broken speed field.
pub fn solve_breakdown_cost(grid: &Grid2D, broken_speed: &SpeedField) -> Result<ArrivalField> {
    solve_arrival(grid, broken_speed)
}

/// Upper bound on the time any optimal trajectory can spend before entering
/// the target: `(max finite z) * K_max / K_min + psi_max / K_min`.
pub fn horizon_bound(z: &ArrivalField, k_min: f64, k_max: f64, psi_max: f64) -> Result<f64> {
    if !(k_min > 0.0) {
        return Err(Error::NonPositiveRunningCost(k_min));
    }
    if !(k_max >= k_min) || !(psi_max >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "bound needs K_max >= K_min > 0 and psi_max >= 0 (got K_max = {k_max}, psi_max = {psi_max})"
        )));
    }
    let z_max = z
        .max_finite()
        .ok_or_else(|| Error::InvalidInput("no reachable points in the arrival field".into()))?;
    Ok(z_max * k_max / k_min + psi_max / k_min)
}
