//! Shared fixture builders and brute-force oracles for the solver test
//! suites.
#![allow(dead_code)]

use oopdmp::chain::{Anchor, CostBundle, ModeChain};
use oopdmp::grid::{Grid2D, GridSlice, SpeedField};
use oopdmp::solver::{Problem, Regime, SolveSpec};

pub fn plain_grid(j: usize) -> Grid2D {
    Grid2D::plain(j).unwrap()
}

pub fn disk_target_grid(j: usize, center: (f64, f64), r: f64) -> Grid2D {
    Grid2D::from_predicates(
        j,
        |_, _| false,
        move |x, y| (x - center.0).powi(2) + (y - center.1).powi(2) <= r * r,
    )
    .unwrap()
}

pub fn constant_costs(grid: &Grid2D, running: &[f64], terminal: &[f64]) -> CostBundle {
    CostBundle {
        running: running
            .iter()
            .map(|&c| GridSlice::constant(grid.n(), c))
            .collect(),
        terminal: terminal
            .iter()
            .map(|&c| GridSlice::constant(grid.n(), c))
            .collect(),
        premature: None,
    }
}

/// Two symmetric modes switching at unit rate with constant running costs 1
/// and 3 (the standard small fixture).
pub fn two_mode_chain() -> ModeChain {
    ModeChain::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], None).unwrap()
}

pub fn finite_problem(
    grid: Grid2D,
    chain: ModeChain,
    costs: CostBundle,
    horizon: f64,
    anchor: Anchor,
) -> Problem {
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let mut spec = SolveSpec::new(Regime::Finite, anchor);
    spec.horizon = Some(horizon);
    Problem {
        grid,
        speed,
        chain,
        costs,
        spec,
    }
}

/// Expected running cost along the belief path of the 2-mode fixture,
/// integrated exactly: K1 = 1, K2 = 3, anchor mode 1, rate 1 each way gives
/// integral of 2 - e^{-2t}.
pub fn two_mode_constant_value(t_end: f64) -> f64 {
    2.0 * t_end - (1.0 - (-2.0 * t_end).exp()) / 2.0
}

/// Bilinear interpolation on a row-major grid, clamped to the unit square.
pub fn dp_interp(values: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let j = (n - 1) as f64;
    let xc = x.clamp(0.0, 1.0) * j;
    let yc = y.clamp(0.0, 1.0) * j;
    let ix = (xc.floor() as usize).min(n - 2);
    let jy = (yc.floor() as usize).min(n - 2);
    let tx = xc - ix as f64;
    let ty = yc - jy as f64;
    let v00 = values[jy * n + ix];
    let v10 = values[jy * n + ix + 1];
    let v01 = values[(jy + 1) * n + ix];
    let v11 = values[(jy + 1) * n + ix + 1];
    v00 + tx * (v10 - v00) + ty * (v01 - v00) + tx * ty * (v11 - v10 - v01 + v00)
}

/// Quantized-direction discrete-time DP with zero terminal cost: an oracle
/// for finite-horizon values that shares no code with the marching solvers.
pub fn dp_single(
    j: usize,
    speed: f64,
    t_end: f64,
    kbar: impl Fn(f64, f64, f64) -> f64,
) -> Vec<f64> {
    const DIRECTIONS: usize = 16;
    let n = j + 1;
    let h = 1.0 / j as f64;
    let dt = 0.5 * h / speed;
    let steps = (t_end / dt).ceil() as usize;
    let dt = t_end / steps as f64;
    let mut w = vec![0.0f64; n * n];
    for k in (1..=steps).rev() {
        let t = (k - 1) as f64 * dt;
        let mut next = vec![0.0; n * n];
        for (idx, out) in next.iter_mut().enumerate() {
            let (x, y) = ((idx % n) as f64 * h, (idx / n) as f64 * h);
            let mut best = f64::INFINITY;
            for d in 0..DIRECTIONS {
                let ang = d as f64 / DIRECTIONS as f64 * std::f64::consts::TAU;
                best = best.min(dp_interp(
                    &w,
                    n,
                    x + dt * speed * ang.cos(),
                    y + dt * speed * ang.sin(),
                ));
            }
            *out = dt * kbar(x, y, t) + best;
        }
        w = next;
    }
    w
}
