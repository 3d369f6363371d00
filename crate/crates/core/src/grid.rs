//! Uniform Cartesian grid on the unit square, masks, upwind difference
//! operators, the CFL time step, and the explicit single-slice update kernel
//! shared by every marching solver.
//!
//! Obstacle points, target-interior points, and out-of-domain neighbors carry
//! the sentinel value [`INF_SENTINEL`]; arithmetic is clamped at the sentinel
//! so updates stay monotone.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Large value standing in for +infinity, in problem cost units.
pub const INF_SENTINEL: f64 = 1e12;

/// Classification of a gridpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Free,
    Obstacle,
    TargetInterior,
    TargetBoundary,
}

/// Uniform `(J+1) x (J+1)` grid on `[0,1]^2` with spacing `h = 1/J`.
#[derive(Debug, Clone)]
pub struct Grid2D {
    j: usize,
    h: f64,
    kind: Vec<PointKind>,
}

impl Grid2D {
    /// Build a grid by rasterizing obstacle and target predicates onto the
    /// gridpoints. A point belongs to a region when its coordinates satisfy
    /// the predicate; the geometric error of this rasterization is O(h).
    pub fn from_predicates(
        j: usize,
        obstacle: impl Fn(f64, f64) -> bool,
        target: impl Fn(f64, f64) -> bool,
    ) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 2 subdivisions per axis, got {j}"
            )));
        }
        let n = j + 1;
        let h = 1.0 / j as f64;
        let mut kind = vec![PointKind::Free; n * n];
        for jy in 0..n {
            for ix in 0..n {
                let (x, y) = (ix as f64 * h, jy as f64 * h);
                let idx = jy * n + ix;
                if obstacle(x, y) {
                    kind[idx] = PointKind::Obstacle;
                } else if target(x, y) {
                    kind[idx] = PointKind::TargetInterior;
                }
            }
        }
        // Target boundary: target points with at least one non-target 4-neighbor.
        let is_target = |ix: isize, jy: isize| -> bool {
            if ix < 0 || jy < 0 || ix >= n as isize || jy >= n as isize {
                return false;
            }
            matches!(
                kind[jy as usize * n + ix as usize],
                PointKind::TargetInterior | PointKind::TargetBoundary
            )
        };
        let mut boundary = Vec::new();
        for jy in 0..n as isize {
            for ix in 0..n as isize {
                let idx = jy as usize * n + ix as usize;
                if kind[idx] == PointKind::TargetInterior {
                    let open = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|&(dx, dy)| !is_target(ix + dx, jy + dy));
                    if open {
                        boundary.push(idx);
                    }
                }
            }
        }
        for idx in boundary {
            kind[idx] = PointKind::TargetBoundary;
        }
        Ok(Self { j, h, kind })
    }

    /// Grid without obstacles or target (finite/infinite-horizon problems).
    pub fn plain(j: usize) -> Result<Self> {
        Self::from_predicates(j, |_, _| false, |_, _| false)
    }

    pub fn subdivisions(&self) -> usize {
        self.j
    }

    /// Points per side, `J + 1`.
    pub fn n(&self) -> usize {
        self.j + 1
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn idx(&self, ix: usize, jy: usize) -> usize {
        jy * self.n() + ix
    }

    pub fn point(&self, ix: usize, jy: usize) -> (f64, f64) {
        (ix as f64 * self.h, jy as f64 * self.h)
    }

    pub fn kind(&self, ix: usize, jy: usize) -> PointKind {
        self.kind[self.idx(ix, jy)]
    }

    pub fn kind_at(&self, idx: usize) -> PointKind {
        self.kind[idx]
    }

    /// Points whose value is pinned to the sentinel in every slice.
    pub fn is_sentinel_point(&self, ix: usize, jy: usize) -> bool {
        matches!(
            self.kind(ix, jy),
            PointKind::Obstacle | PointKind::TargetInterior
        )
    }

    pub fn is_target(&self, ix: usize, jy: usize) -> bool {
        matches!(
            self.kind(ix, jy),
            PointKind::TargetInterior | PointKind::TargetBoundary
        )
    }

    pub fn has_target(&self) -> bool {
        self.kind
            .iter()
            .any(|k| matches!(k, PointKind::TargetInterior | PointKind::TargetBoundary))
    }

    pub fn target_boundary_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.kind.len()).filter(|&i| self.kind[i] == PointKind::TargetBoundary)
    }
}

/// One scalar field sampled at the gridpoints, row-major with `y` varying
/// slowest (index `jy * (J+1) + ix`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSlice {
    n: usize,
    data: Vec<f64>,
}

impl GridSlice {
    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "slice data must be (J+1)^2 long");
        Self { n, data }
    }

    /// Evaluate a function of (x, y) at every gridpoint.
    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n();
        let mut data = Vec::with_capacity(n * n);
        for jy in 0..n {
            for ix in 0..n {
                let (x, y) = grid.point(ix, jy);
                data.push(f(x, y));
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, ix: usize, jy: usize) -> f64 {
        self.data[jy * self.n + ix]
    }

    pub fn at_mut(&mut self, ix: usize, jy: usize) -> &mut f64 {
        &mut self.data[jy * self.n + ix]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Max over finite (below-sentinel) entries; None if all are sentinels.
    pub fn finite_max(&self) -> Option<f64> {
        self.data
            .iter()
            .copied()
            .filter(|v| *v < INF_SENTINEL)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Sup distance over points that carry information in both slices.
    /// Sentinel entries (obstacles, target interior, truncation band) are
    /// excluded: they are declared non-information, so their churn must not
    /// mask or fake convergence.
    pub fn sup_distance(&self, other: &GridSlice) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                if *a >= INF_SENTINEL || *b >= INF_SENTINEL {
                    0.0
                } else {
                    (a - b).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Bilinear interpolation at `(x, y) in [0,1]^2`. Written so a constant
    /// field is reproduced exactly. Returns the sentinel if any corner of the
    /// enclosing cell carries it.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let j = (n - 1) as f64;
        let xc = x.clamp(0.0, 1.0) * j;
        let yc = y.clamp(0.0, 1.0) * j;
        let ix = (xc.floor() as usize).min(n - 2);
        let jy = (yc.floor() as usize).min(n - 2);
        let tx = xc - ix as f64;
        let ty = yc - jy as f64;
        let v00 = self.at(ix, jy);
        let v10 = self.at(ix + 1, jy);
        let v01 = self.at(ix, jy + 1);
        let v11 = self.at(ix + 1, jy + 1);
        if v00 >= INF_SENTINEL || v10 >= INF_SENTINEL || v01 >= INF_SENTINEL || v11 >= INF_SENTINEL
        {
            return INF_SENTINEL;
        }
        v00 + tx * (v10 - v00) + ty * (v01 - v00) + tx * ty * (v11 - v10 - v01 + v00)
    }
}

/// Isotropic speed field `f(x)` with cached extremes over non-obstacle points.
#[derive(Debug, Clone)]
pub struct SpeedField {
    values: GridSlice,
    f_max: f64,
    f_min: f64,
}

impl SpeedField {
    pub fn new(grid: &Grid2D, values: GridSlice) -> Result<Self> {
        assert_eq!(values.n(), grid.n());
        let mut f_max = f64::NEG_INFINITY;
        let mut f_min = f64::INFINITY;
        for jy in 0..grid.n() {
            for ix in 0..grid.n() {
                if grid.kind(ix, jy) == PointKind::Obstacle {
                    continue;
                }
                let f = values.at(ix, jy);
                if !f.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite speed at gridpoint ({ix}, {jy})"
                    )));
                }
                f_max = f_max.max(f);
                f_min = f_min.min(f);
            }
        }
        if !(f_min > 0.0) {
            return Err(Error::NonPositiveSpeed(f_min));
        }
        Ok(Self {
            values,
            f_max,
            f_min,
        })
    }

    pub fn constant(grid: &Grid2D, f: f64) -> Result<Self> {
        Self::new(grid, GridSlice::constant(grid.n(), f))
    }

    pub fn at(&self, ix: usize, jy: usize) -> f64 {
        self.values.at(ix, jy)
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.values.sample(x, y)
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn values(&self) -> &GridSlice {
        &self.values
    }
}

/// Uniform time step honoring the CFL bound, augmented by the largest
/// zeroth-order rate so the explicit update stays a convex combination:
/// `dt_max = 1 / (sqrt(2) f_max / h + extra_rate)`, then `dt = t_end / N`
/// with `N = ceil(t_end / dt_max)`.
pub fn cfl_timestep(
    grid: &Grid2D,
    speed: &SpeedField,
    t_end: f64,
    extra_rate: f64,
) -> Result<(f64, usize)> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!(
            "time horizon must be positive, got {t_end}"
        )));
    }
    if extra_rate < 0.0 {
        return Err(Error::InvalidInput(format!(
            "zeroth-order rate must be nonnegative, got {extra_rate}"
        )));
    }
    if !(speed.f_max() > 0.0) {
        return Err(Error::NonPositiveSpeed(speed.f_max()));
    }
    let dt_max = 1.0 / (std::f64::consts::SQRT_2 * speed.f_max() / grid.h() + extra_rate);
    let n = (t_end / dt_max).ceil() as usize;
    let n = n.max(1);
    Ok((t_end / n as f64, n))
}

fn one_sided(center: f64, neighbor: Option<f64>, h: f64) -> f64 {
    // (neighbor - center)/h with out-of-domain neighbors at the sentinel,
    // so they never win the upwind min.
    let nb = neighbor.unwrap_or(INF_SENTINEL);
    (nb - center) / h
}

/// Upwind gradient norm at `(ix, jy)`:
/// `D_x = min{D_+x, -D_-x, 0}` and likewise `D_y`; returns
/// `sqrt(D_x^2 + D_y^2)`. Neighbor values at or above the sentinel are
/// excluded automatically because their one-sided slopes are large positive.
pub fn upwind_gradient_norm(slice: &GridSlice, grid: &Grid2D, ix: usize, jy: usize) -> f64 {
    let n = grid.n();
    let h = grid.h();
    let c = slice.at(ix, jy);
    let east = (ix + 1 < n).then(|| slice.at(ix + 1, jy));
    let west = (ix > 0).then(|| slice.at(ix - 1, jy));
    let north = (jy + 1 < n).then(|| slice.at(ix, jy + 1));
    let south = (jy > 0).then(|| slice.at(ix, jy - 1));
    let dx = one_sided(c, east, h).min(one_sided(c, west, h)).min(0.0);
    let dy = one_sided(c, north, h).min(one_sided(c, south, h)).min(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// Optional zeroth-order term `rate * (reward - V)` added to the update.
pub struct ZerothOrder<'a> {
    /// Pointwise nonnegative rate; `dt * rate <= 1` must hold (CFL contract).
    pub rate: &'a GridSlice,
    /// Pointwise reward the value relaxes toward at that rate.
    pub reward: &'a GridSlice,
}

/// One explicit backward step of the marching scheme:
/// `V_new = V + dt * (kbar - f * |upwind grad V|) [+ dt * rate * (reward - V)]`.
///
/// Obstacle and target-interior points propagate the sentinel unchanged; any
/// result at or above the sentinel is clamped to it. Row-parallel: each output
/// row is written by one worker while the full input slice is shared
/// read-only.
pub fn explicit_update(
    slice: &GridSlice,
    grid: &Grid2D,
    speed: &SpeedField,
    kbar: &GridSlice,
    dt: f64,
    zeroth: Option<ZerothOrder<'_>>,
) -> GridSlice {
    let n = grid.n();
    let mut out = vec![0.0_f64; n * n];
    let zeroth = zeroth.as_ref();
    out.par_chunks_mut(n).enumerate().for_each(|(jy, row)| {
        for (ix, out_v) in row.iter_mut().enumerate() {
            if grid.is_sentinel_point(ix, jy) {
                *out_v = INF_SENTINEL;
                continue;
            }
            let v = slice.at(ix, jy);
            if v >= INF_SENTINEL && kbar.at(ix, jy) >= INF_SENTINEL {
                *out_v = INF_SENTINEL;
                continue;
            }
            let norm = upwind_gradient_norm(slice, grid, ix, jy);
            let mut next = v + dt * (kbar.at(ix, jy) - speed.at(ix, jy) * norm);
            if let Some(z) = zeroth {
                next += dt * z.rate.at(ix, jy) * (z.reward.at(ix, jy) - v);
            }
            *out_v = if next >= INF_SENTINEL {
                INF_SENTINEL
            } else {
                next
            };
        }
    });
    GridSlice::from_vec(n, out)
}

/// Time-resolved value approximation for one anchor: stored slices at
/// ascending times, linearly interpolated in between. Solvers may store only
/// a strided subset of their marching slices; slice 0 is always kept.
#[derive(Debug, Clone)]
pub struct TimeField {
    ts: Vec<f64>,
    slices: Vec<GridSlice>,
}

impl TimeField {
    pub fn new(ts: Vec<f64>, slices: Vec<GridSlice>) -> Self {
        assert_eq!(ts.len(), slices.len());
        assert!(!ts.is_empty(), "a time field needs at least one slice");
        assert!(
            ts.windows(2).all(|w| w[0] < w[1]),
            "slice times must be strictly increasing"
        );
        Self { ts, slices }
    }

    pub fn single(slice: GridSlice) -> Self {
        Self {
            ts: vec![0.0],
            slices: vec![slice],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.ts
    }

    pub fn slices(&self) -> &[GridSlice] {
        &self.slices
    }

    pub fn slice0(&self) -> &GridSlice {
        &self.slices[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.ts.last().unwrap()
    }

    /// Value at `(x, y, t)`: bilinear in space, linear in time, clamped to
    /// the stored time range.
    pub fn sample(&self, x: f64, y: f64, t: f64) -> f64 {
        let ts = &self.ts;
        if t <= ts[0] {
            return self.slices[0].sample(x, y);
        }
        if t >= *ts.last().unwrap() {
            return self.slices.last().unwrap().sample(x, y);
        }
        let hi = ts.partition_point(|&s| s < t).max(1);
        let lo = hi - 1;
        let a = self.slices[lo].sample(x, y);
        let b = self.slices[hi].sample(x, y);
        if a >= INF_SENTINEL || b >= INF_SENTINEL {
            return INF_SENTINEL;
        }
        let w = (t - ts[lo]) / (ts[hi] - ts[lo]);
        a + w * (b - a)
    }
}
