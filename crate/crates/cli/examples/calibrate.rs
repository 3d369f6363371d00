//! Development helper: print the cost extremes, minimum-time extent, and
//! horizon bound of a scenario at its declared resolution.

use oopdmp::eikonal::{horizon_bound, solve_min_time};
use oopdmp::scenario::{parse_scenario, Overrides};
use oopdmp::solver::cost_bounds;
use std::path::Path;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: calibrate <scenario.json> [J]");
    let j = args.next().and_then(|s| s.parse().ok());
    let text = std::fs::read_to_string(&path).unwrap();
    let scenario = parse_scenario(&text).unwrap();
    let overrides = Overrides {
        j,
        ..Default::default()
    };
    let problem = scenario
        .build(Path::new(&path).parent().unwrap(), &overrides)
        .unwrap();
    let (k_min, k_max, psi_max, phi_max) = cost_bounds(&problem);
    let z = solve_min_time(&problem.grid, &problem.speed).unwrap();
    let z_max = z.max_finite().unwrap();
    let bound = horizon_bound(&z, k_min, k_max, psi_max).unwrap();
    println!(
        "J={} z_max={z_max:.5} K=[{k_min:.5},{k_max:.5}] psi_max={psi_max:.4} phi_max={phi_max:.4} bound={bound:.4} f=[{:.4},{:.4}]",
        problem.grid.subdivisions(),
        problem.speed.f_min(),
        problem.speed.f_max(),
    );
}
