//! Acceptance suite: one test per release criterion, each printing a
//! `PASS criterion N` line with the measured quantities. Tolerances are
//! pinned here, not configurable.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use oopdmp::chain::{Anchor, ModeChain};
use oopdmp::eikonal::{horizon_bound, solve_min_time};
use oopdmp::grid::{upwind_gradient_norm, Grid2D, GridSlice, SpeedField, INF_SENTINEL};
use oopdmp::results::write_results;
use oopdmp::scenario::{parse_scenario, Overrides, Scenario};
use oopdmp::sim::{mc_evaluate, trace_trajectory, SimEvent, TraceConfig};
use oopdmp::solver::{
    solve, solve_finite_no_obs, solve_fully_observed, solve_indefinite, AnchorKey, Keep,
    Observations, Problem, Regime, SolveResult, SolveSpec, StoragePolicy,
};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load_fixture(name: &str) -> Scenario {
    let path = scenario_dir().join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    parse_scenario(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn build_fixture(name: &str, overrides: &Overrides) -> Problem {
    load_fixture(name)
        .build(&scenario_dir(), overrides)
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Mars paid-observation solve at the fixture resolution, shared by the
/// iteration-count and observation-region criteria.
fn mars_solve() -> &'static (Problem, SolveResult) {
    static CELL: OnceLock<(Problem, SolveResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut problem = build_fixture("mars.json", &Overrides::default());
        problem.spec.storage = StoragePolicy {
            stride: Some(8),
            keep: Keep::Fields(vec![(AnchorKey::Mode(0), 0), (AnchorKey::Distribution, 0)]),
        };
        let result = solve(&problem).expect("mars solve");
        (problem, result)
    })
}

#[test]
fn criterion_01_stationary_distributions() {
    let rotation = ModeChain::new(
        vec![
            vec![-1.0, 1.0, 0.0, 0.0],
            vec![0.0, -1.0, 1.0, 0.0],
            vec![0.0, 0.0, -1.0, 1.0],
            vec![1.0, 0.0, 0.0, -1.0],
        ],
        None,
    )
    .unwrap();
    let t0 = Instant::now();
    let q4 = rotation.stationary().unwrap();
    let rot_elapsed = t0.elapsed();
    for x in &q4 {
        assert!((x - 0.25).abs() < 1e-12, "rotation stationary {q4:?}");
    }

    let maze = load_fixture("maze.json");
    let chain = ModeChain::new(maze.lambda.clone(), None).unwrap();
    let t1 = Instant::now();
    let q10 = chain.stationary().unwrap();
    let maze_elapsed = t1.elapsed();
    let expected = [
        1.0 / 16.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 16.0,
        1.0 / 16.0,
        1.0 / 8.0,
        1.0 / 16.0,
    ];
    for (a, b) in q10.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-10, "maze stationary {q10:?}");
    }
    // Residual ||q_s Lambda||_inf <= 1e-10 for both.
    for (chain, q) in [(&rotation, &q4), (&chain, &q10)] {
        let m = chain.modes();
        for j in 0..m {
            let r: f64 = (0..m).map(|i| q[i] * chain.rate(i, j)).sum();
            assert!(r.abs() <= 1e-10, "residual {r}");
        }
    }
    assert!(
        rot_elapsed.as_micros() < 1000,
        "rotation took {rot_elapsed:?}"
    );
    assert!(
        maze_elapsed.as_micros() < 1000,
        "maze took {maze_elapsed:?}"
    );
    println!(
        "PASS criterion 1: stationary distributions exact (residual <= 1e-10), {} us / {} us",
        rot_elapsed.as_micros(),
        maze_elapsed.as_micros()
    );
}

#[test]
fn criterion_02_conditioned_belief_limit() {
    let chain = ModeChain::new(
        vec![vec![-5.0, 5.0], vec![0.0, 0.0]],
        Some(vec![1.0, 12.33]),
    )
    .unwrap();
    let b = chain.conditioned(&[1.0, 0.0], 10.0).unwrap();
    assert!(
        (b[0] - 0.5587).abs() <= 1e-3 && (b[1] - 0.4413).abs() <= 1e-3,
        "limiting belief {b:?}"
    );
    let mut worst: f64 = 0.0;
    for k in 0..=50 {
        let t = 5.0 * k as f64 / 50.0;
        let closed = chain.conditioned(&[1.0, 0.0], t).unwrap();
        let ode = chain.conditioned_ode_oracle(&[1.0, 0.0], t, 2000).unwrap();
        for (a, b) in closed.iter().zip(&ode) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "closed form vs RK4 oracle gap {worst:.3e}");
    println!(
        "PASS criterion 2: conditioned-belief limit [{:.4}, {:.4}], oracle gap {worst:.2e}",
        b[0], b[1]
    );
}

#[test]
fn criterion_03_horizon_bounds() {
    let t0 = Instant::now();
    let mut reported = Vec::new();
    for (name, target) in [
        ("barriers.json", 14.83),
        ("maze.json", 37.68),
        ("mars.json", 5.46),
    ] {
        let problem = build_fixture(name, &Overrides::default());
        let (k_min, k_max, psi_max, _) = oopdmp::solver::cost_bounds(&problem);
        let z = solve_min_time(&problem.grid, &problem.speed).unwrap();
        let bound = horizon_bound(&z, k_min, k_max, psi_max).unwrap();
        assert!(
            (bound - target).abs() <= 0.05 * target,
            "{name}: bound {bound:.4} vs {target} (5%)"
        );
        reported.push(format!("{name} {bound:.2}"));
    }
    // Formula correctness on a synthetic instance with a hand-computed value:
    // unit-speed disk target of radius 0.2 at the center gives max z at the
    // corners, distance sqrt(0.5) - 0.2; with K in [0.5, 2] and psi_max = 3
    // the bound is z_max * 4 + 6.
    let grid = Grid2D::from_predicates(
        200,
        |_, _| false,
        |x, y| (x - 0.5f64).powi(2) + (y - 0.5f64).powi(2) <= 0.04,
    )
    .unwrap();
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let z = solve_min_time(&grid, &speed).unwrap();
    let bound = horizon_bound(&z, 0.5, 2.0, 3.0).unwrap();
    let hand = (0.5f64.sqrt() - 0.2) * 4.0 + 6.0;
    assert!(
        (bound - hand).abs() <= 0.02 * hand,
        "synthetic bound {bound:.4} vs hand {hand:.4}"
    );
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 10, "bounds took {elapsed:?}");
    println!(
        "PASS criterion 3: horizon bounds {}, synthetic {bound:.3} vs {hand:.3}, {:.1} s",
        reported.join(", "),
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_04_iteration_counts() {
    // Iteration counts are grid-insensitive; run the periodic fixtures at
    // J = 100 to keep the suite quick.
    let over100 = Overrides {
        j: Some(100),
        ..Default::default()
    };
    let p05 = build_fixture("rotating_periodic_beta05.json", &over100);
    let r05 = solve(&p05).unwrap();
    assert!(r05.converged);
    assert!(
        (14..=24).contains(&r05.iterations_used),
        "beta = 0.5 took {} iterations (want 19 +/- 5)",
        r05.iterations_used
    );

    let p6 = build_fixture("rotating_periodic_beta6.json", &over100);
    let r6 = solve(&p6).unwrap();
    assert!(r6.converged);
    assert!(
        r6.iterations_used <= 3,
        "beta = 6 took {} iterations (want <= 3)",
        r6.iterations_used
    );

    let (_, mars) = mars_solve();
    assert!(mars.converged);
    assert!(
        (8..=18).contains(&mars.iterations_used),
        "mars paid-obs took {} iterations (want 13 +/- 5)",
        mars.iterations_used
    );

    // Residual histories must be non-increasing after the first entry.
    for (label, hist) in [
        ("beta05", &r05.residual_history),
        ("beta6", &r6.residual_history),
        ("mars", &mars.residual_history),
    ] {
        for w in hist[1..].windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "{label}: residuals not monotone: {:?}",
                hist
            );
        }
    }
    println!(
        "PASS criterion 4: iterations beta0.5 = {}, beta6 = {}, mars = {}; residuals monotone",
        r05.iterations_used, r6.iterations_used, mars.iterations_used
    );
}

fn disk_error(j: usize) -> f64 {
    let c = (0.5, 0.5);
    let r = 0.3;
    let grid = Grid2D::from_predicates(
        j,
        |_, _| false,
        move |x, y| (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r,
    )
    .unwrap();
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let z = solve_min_time(&grid, &speed).unwrap();
    let mut err: f64 = 0.0;
    for jy in 0..grid.n() {
        for ix in 0..grid.n() {
            if grid.kind(ix, jy) != oopdmp::grid::PointKind::Free {
                continue;
            }
            let (x, y) = grid.point(ix, jy);
            let exact = (((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() - r).max(0.0);
            err = err.max((z.at(ix, jy) - exact).abs());
        }
    }
    err
}

#[test]
fn criterion_05_eikonal_convergence() {
    let t0 = Instant::now();
    let errs: Vec<f64> = [50usize, 100, 200, 400]
        .iter()
        .map(|j| disk_error(*j))
        .collect();
    let mut orders = Vec::new();
    for w in errs.windows(2) {
        orders.push((w[0] / w[1]).log2());
    }
    let mean_order = orders.iter().sum::<f64>() / orders.len() as f64;
    assert!(
        (0.6..=1.4).contains(&mean_order),
        "observed order {mean_order:.3} outside 1.0 +/- 0.4 (errors {errs:?})"
    );

    // Dijkstra oracle agreement at J = 50 on a variable speed field.
    let j = 50;
    let grid = Grid2D::from_predicates(
        j,
        |_, _| false,
        |x, y| (x - 0.75f64).powi(2) + (y - 0.75f64).powi(2) <= 0.01,
    )
    .unwrap();
    let speed = SpeedField::new(
        &grid,
        GridSlice::from_fn(&grid, |x, y| {
            0.6 + 0.8 * (-8.0 * ((x - 0.3).powi(2) + (y - 0.4).powi(2))).exp()
        }),
    )
    .unwrap();
    let z = solve_min_time(&grid, &speed).unwrap();
    let oracle = dijkstra(&grid, &speed);
    let h = grid.h();
    let mut worst: f64 = 0.0;
    for jy in 0..grid.n() {
        for ix in 0..grid.n() {
            if grid.kind(ix, jy) == oopdmp::grid::PointKind::Free {
                worst = worst.max((z.at(ix, jy) - oracle[grid.idx(ix, jy)]).abs());
            }
        }
    }
    assert!(worst <= 3.0 * h, "Dijkstra gap {worst} > 3h");
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 10, "eikonal suite took {elapsed:?}");
    println!(
        "PASS criterion 5: eikonal order {mean_order:.2} (errors {:?}), dijkstra gap {worst:.4} <= 3h, {:.1} s",
        errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
}

fn dijkstra(grid: &Grid2D, speed: &SpeedField) -> Vec<f64> {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;
    struct E(f64, usize);
    impl PartialEq for E {
        fn eq(&self, o: &Self) -> bool {
            self.0 == o.0 && self.1 == o.1
        }
    }
    impl Eq for E {}
    impl PartialOrd for E {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for E {
        fn cmp(&self, o: &Self) -> Ordering {
            o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
        }
    }
    let n = grid.n();
    let h = grid.h();
    let mut dist = vec![INF_SENTINEL; n * n];
    let mut heap = BinaryHeap::new();
    for jy in 0..n {
        for ix in 0..n {
            if grid.kind(ix, jy) == oopdmp::grid::PointKind::TargetBoundary {
                dist[grid.idx(ix, jy)] = 0.0;
                heap.push(E(0.0, grid.idx(ix, jy)));
            }
        }
    }
    let offs: [(isize, isize); 8] = [
        (1, 0),
        (-1, 0),
        (0, 1),
        (0, -1),
        (1, 1),
        (1, -1),
        (-1, 1),
        (-1, -1),
    ];
    while let Some(E(d, idx)) = heap.pop() {
        if d > dist[idx] {
            continue;
        }
        let (ix, jy) = (idx % n, idx / n);
        for (ox, oy) in offs {
            let (nx, ny) = (ix as isize + ox, jy as isize + oy);
            if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if grid.kind(nx, ny) != oopdmp::grid::PointKind::Free {
                continue;
            }
            let len = h * ((ox * ox + oy * oy) as f64).sqrt();
            let w = len * (1.0 / speed.at(ix, jy) + 1.0 / speed.at(nx, ny)) / 2.0;
            let nidx = ny * n + nx;
            if d + w < dist[nidx] {
                dist[nidx] = d + w;
                heap.push(E(d + w, nidx));
            }
        }
    }
    dist
}

#[test]
fn criterion_06_oracle_equivalence() {
    // (a) Finite-horizon 2-mode fixture vs the quantized-direction DP oracle.
    let problem = build_fixture(
        "two_mode_finite.json",
        &Overrides {
            j: Some(10),
            ..Default::default()
        },
    );
    let out = solve_finite_no_obs(&problem, &Anchor::Mode(0)).unwrap();
    let v = out.field(AnchorKey::Mode(0), 0).unwrap().slice0();
    let oracle = common::dp_single(10, 1.0, 1.0, |_, _, t| {
        let b1 = (1.0 + (-2.0 * t).exp()) / 2.0;
        b1 + (1.0 - b1) * 3.0
    });
    let h = 0.1;
    let mut worst: f64 = 0.0;
    for (idx, w) in oracle.iter().enumerate() {
        worst = worst.max((v.at(idx % 11, idx / 11) - w).abs());
    }
    assert!(worst <= 5.0 * h, "DP oracle gap {worst}");

    // (b) M = 1 reduction matches the fully-observed solver bitwise.
    let grid = Grid2D::plain(12).unwrap();
    let chain = ModeChain::new(vec![vec![0.0]], None).unwrap();
    let costs = oopdmp::chain::CostBundle {
        running: vec![GridSlice::from_fn(&grid, |x, y| 1.0 + x + y)],
        terminal: vec![GridSlice::from_fn(&grid, |x, _| 0.3 * x)],
        premature: None,
    };
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let mut spec = SolveSpec::new(Regime::Finite, Anchor::Mode(0));
    spec.horizon = Some(0.8);
    let single = Problem {
        grid,
        speed,
        chain,
        costs,
        spec,
    };
    let a = solve_finite_no_obs(&single, &Anchor::Mode(0)).unwrap();
    let b = solve_fully_observed(&single).unwrap();
    let fa = a.field(AnchorKey::Mode(0), 0).unwrap();
    let fb = b.field(AnchorKey::Mode(0), 0).unwrap();
    let mut max_ulps = 0u64;
    for (sa, sb) in fa.slices().iter().zip(fb.slices()) {
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "M = 1 reduction not bitwise");
            max_ulps = max_ulps.max(x.to_bits() ^ y.to_bits());
        }
    }

    // (c) Fully-observed with zero rates decouples into single-mode solves.
    let grid = Grid2D::plain(12).unwrap();
    let k2 = GridSlice::from_fn(&grid, |x, y| 2.0 + (x - y).abs());
    let costs = oopdmp::chain::CostBundle {
        running: vec![GridSlice::constant(grid.n(), 1.0), k2.clone()],
        terminal: vec![GridSlice::constant(grid.n(), 0.0); 2],
        premature: None,
    };
    let chain = ModeChain::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]], None).unwrap();
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let mut spec = SolveSpec::new(Regime::Finite, Anchor::Mode(0));
    spec.horizon = Some(0.5);
    let coupled_problem = Problem {
        grid: grid.clone(),
        speed: speed.clone(),
        chain,
        costs,
        spec: spec.clone(),
    };
    let coupled = solve_fully_observed(&coupled_problem).unwrap();
    for m in 0..2 {
        let running = if m == 0 {
            GridSlice::constant(grid.n(), 1.0)
        } else {
            k2.clone()
        };
        let single = Problem {
            grid: grid.clone(),
            speed: speed.clone(),
            chain: ModeChain::new(vec![vec![0.0]], None).unwrap(),
            costs: oopdmp::chain::CostBundle {
                running: vec![running],
                terminal: vec![GridSlice::constant(grid.n(), 0.0)],
                premature: None,
            },
            spec: spec.clone(),
        };
        let alone = solve_finite_no_obs(&single, &Anchor::Mode(0)).unwrap();
        let fa = coupled.field(AnchorKey::Mode(m), 0).unwrap();
        let fb = alone.field(AnchorKey::Mode(0), 0).unwrap();
        for (sa, sb) in fa.slices().iter().zip(fb.slices()) {
            assert_eq!(sa.data(), sb.data(), "zero-rate decoupling not exact");
        }
    }
    println!(
        "PASS criterion 6: DP oracle gap {worst:.4} <= 5h, M=1 reduction bitwise, zero-rate decoupling exact"
    );
}

#[test]
fn criterion_07_qvi_dominance_and_feasibility() {
    // Maze at J = 100 with a budget of two observations: layer l has (2 - l)
    // observations remaining, so slices must dominate pointwise.
    let scenario = load_fixture("maze.json");
    let mut problem = scenario
        .build(
            &scenario_dir(),
            &Overrides {
                j: Some(100),
                ..Default::default()
            },
        )
        .unwrap();
    problem.spec.observations = Observations::Bounded(2);
    problem.spec.storage = StoragePolicy::slice0_only();
    let out = solve(&problem).unwrap();
    let n = problem.grid.n();
    for m in 0..problem.chain.modes() {
        let l0 = out.field(AnchorKey::Mode(m), 0).unwrap().slice0();
        let l1 = out.field(AnchorKey::Mode(m), 1).unwrap().slice0();
        let l2 = out.field(AnchorKey::Mode(m), 2).unwrap().slice0();
        for idx in 0..n * n {
            let (a, b, c) = (l0.data()[idx], l1.data()[idx], l2.data()[idx]);
            if c >= INF_SENTINEL {
                continue;
            }
            assert!(
                a <= b + 1e-9 && b <= c + 1e-9,
                "dominance violated at mode {m}, idx {idx}: {a} vs {b} vs {c}"
            );
        }
    }
    // The stationary-anchored field with two observation rights dominates the
    // no-observation one.
    let vq2 = out.field(AnchorKey::Distribution, 0).unwrap().slice0();
    let plain = solve_indefinite(&problem, &problem.spec.anchor.clone()).unwrap();
    let vq0 = plain.field(AnchorKey::Distribution, 0).unwrap().slice0();
    for idx in 0..n * n {
        if vq0.data()[idx] < INF_SENTINEL {
            assert!(vq2.data()[idx] <= vq0.data()[idx] + 1e-9);
        }
    }

    // Feasibility and complementarity on a small bounded fixture with full
    // slice storage.
    let (fproblem, fout) = feasibility_fixture(Observations::Bounded(1));
    check_feasibility_and_complementarity(&fproblem, &fout, None);
    let price = GridSlice::constant(fproblem.grid.n(), 0.05);
    let (pproblem, pout) = feasibility_fixture(Observations::Paid(price.clone()));
    check_feasibility_and_complementarity(&pproblem, &pout, Some(&price));
    println!(
        "PASS criterion 7: layer dominance on maze (J=100), QVI feasibility <= 1e-9, complementarity <= 10 tol"
    );
}

fn feasibility_fixture(obs: Observations) -> (Problem, SolveResult) {
    let grid = Grid2D::from_predicates(
        50,
        |_, _| false,
        |x, y| (x - 0.85f64).powi(2) + (y - 0.5f64).powi(2) <= 0.0064,
    )
    .unwrap();
    let chain = ModeChain::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], None).unwrap();
    let costs = oopdmp::chain::CostBundle {
        running: vec![
            GridSlice::from_fn(&grid, |x, y| {
                1.0 + 7.0 * (-40.0 * ((x - 0.45).powi(2) + (y - 0.3).powi(2))).exp()
            }),
            GridSlice::from_fn(&grid, |x, y| {
                1.0 + 7.0 * (-40.0 * ((x - 0.45).powi(2) + (y - 0.7).powi(2))).exp()
            }),
        ],
        terminal: vec![GridSlice::constant(grid.n(), 0.0); 2],
        premature: None,
    };
    let speed = SpeedField::constant(&grid, 1.0).unwrap();
    let mut spec = SolveSpec::new(Regime::Indefinite, Anchor::Mode(0));
    spec.observations = obs;
    spec.storage = StoragePolicy {
        stride: Some(1),
        keep: Keep::All,
    };
    let problem = Problem {
        grid,
        speed,
        chain,
        costs,
        spec,
    };
    let out = solve(&problem).unwrap();
    (problem, out)
}

/// Spot-check the variational structure: values never exceed the observation
/// branch, and where the branch is strictly slack the marching equation holds
/// to machine precision (sampled at 1000 points).
fn check_feasibility_and_complementarity(
    problem: &Problem,
    out: &SolveResult,
    price: Option<&GridSlice>,
) {
    use rand::{Rng, SeedableRng};
    let coupled_layer = match problem.spec.observations {
        Observations::Bounded(_) => 1,
        _ => 0,
    };
    let slice0s: Vec<&GridSlice> = (0..problem.chain.modes())
        .map(|m| {
            out.field(AnchorKey::Mode(m), coupled_layer)
                .unwrap()
                .slice0()
        })
        .collect();
    let field = out.field(AnchorKey::Mode(0), 0).unwrap();
    let n = problem.grid.n();
    let e0 = {
        let mut e = vec![0.0; problem.chain.modes()];
        e[0] = 1.0;
        e
    };
    // Feasibility on every stored non-terminal slice.
    for (si, t) in field.times().iter().enumerate() {
        if si + 1 == field.times().len() {
            continue;
        }
        let b = problem.chain.propagate(&e0, *t).unwrap();
        let slice = &field.slices()[si];
        for idx in 0..n * n {
            let v = slice.data()[idx];
            if v >= INF_SENTINEL {
                continue;
            }
            let mut branch: f64 = slice0s.iter().zip(&b).map(|(s, w)| w * s.data()[idx]).sum();
            if let Some(c) = price {
                branch += c.data()[idx];
            }
            assert!(v <= branch + 1e-9, "feasibility violated: {v} > {branch}");
        }
    }
    // Complementarity at random strictly-slack points.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let dt = out.dt;
    let mut checked = 0;
    while checked < 1000 {
        let si = rng.gen_range(1..field.times().len() - 1);
        let ix = rng.gen_range(1..n - 1);
        let jy = rng.gen_range(1..n - 1);
        if problem.grid.kind(ix, jy) != oopdmp::grid::PointKind::Free {
            continue;
        }
        let t = field.times()[si];
        let here = field.slices()[si - 1].at(ix, jy);
        let upper = field.slices()[si].at(ix, jy);
        if here >= INF_SENTINEL || upper >= INF_SENTINEL {
            continue;
        }
        let b_prev = problem.chain.propagate(&e0, field.times()[si - 1]).unwrap();
        let mut branch: f64 = slice0s
            .iter()
            .zip(&b_prev)
            .map(|(s, w)| w * s.at(ix, jy))
            .sum();
        if let Some(c) = price {
            branch += c.at(ix, jy);
        }
        if here >= branch - 10.0 * problem.spec.tol {
            continue; // contact set; the marching equation need not hold
        }
        let b = problem.chain.propagate(&e0, t).unwrap();
        let kbar: f64 = (0..problem.chain.modes())
            .map(|m| b[m] * problem.costs.running[m].at(ix, jy))
            .sum();
        let norm = upwind_gradient_norm(&field.slices()[si], &problem.grid, ix, jy);
        let residual = (upper - here) / dt + kbar - problem.speed.at(ix, jy) * norm;
        assert!(
            residual.abs() <= 10.0 * problem.spec.tol,
            "complementarity residual {residual:.3e} at ({ix},{jy},{si})"
        );
        checked += 1;
    }
}

#[test]
fn criterion_08_monte_carlo_consistency() {
    let t0 = Instant::now();
    // Two-mode finite fixture.
    let problem = build_fixture("two_mode_finite.json", &Overrides::default());
    let out = solve(&problem).unwrap();
    let start = (0.5, 0.5);
    let v = out
        .field(AnchorKey::Mode(0), 0)
        .unwrap()
        .sample(start.0, start.1, 0.0);
    let mc = mc_evaluate(&problem, &out, start, 10_000, 42).unwrap();
    let slack = 3.0 * mc.std_error + 5.0 * problem.grid.h();
    assert!(
        (mc.mean - v).abs() <= slack,
        "finite fixture: MC {} vs v {v} (slack {slack})",
        mc.mean
    );

    // Randomly-terminated corridor fixture.
    let cproblem = build_fixture("corridor_rt.json", &Overrides::default());
    let cout = solve(&cproblem).unwrap();
    let cstart = (0.1, 0.5);
    let cv = cout
        .field(AnchorKey::Mode(0), 0)
        .unwrap()
        .sample(cstart.0, cstart.1, 0.0);
    let cmc = mc_evaluate(&cproblem, &cout, cstart, 10_000, 7).unwrap();
    let cslack = 3.0 * cmc.std_error + 5.0 * cproblem.grid.h();
    assert!(
        (cmc.mean - cv).abs() <= cslack,
        "corridor fixture: MC {} vs v {cv} (slack {cslack})",
        cmc.mean
    );
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "MC suite took {elapsed:?}");
    println!(
        "PASS criterion 8: MC means {:.4} vs {v:.4} and {:.4} vs {cv:.4} within 3 SE + 5h, {:.1} s",
        mc.mean,
        cmc.mean,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_09_qualitative_figures() {
    // (a) Scheduled observations pull the early trajectory toward the center.
    let scenario = load_fixture("rotating_finite.json");
    let mut scheduled = scenario
        .build(&scenario_dir(), &Overrides::default())
        .unwrap();
    scheduled.spec.storage = StoragePolicy {
        stride: Some(4),
        keep: Keep::Fields(vec![
            (AnchorKey::Mode(0), 0),
            (AnchorKey::Mode(1), 1),
            (AnchorKey::Mode(2), 2),
            (AnchorKey::Mode(3), 3),
        ]),
    };
    let sched_out = solve(&scheduled).unwrap();
    let mut cfg = TraceConfig::new((0.5, 0.5), 1);
    cfg.scripted_observations = vec![1, 2, 3];
    let sched_trace = trace_trajectory(&scheduled, &sched_out, &cfg).unwrap();

    let mut none = scheduled.clone();
    none.spec.observations = Observations::None;
    none.spec.storage = StoragePolicy {
        stride: Some(8),
        keep: Keep::All,
    };
    let none_out = solve_finite_no_obs(&none, &Anchor::Mode(0)).unwrap();
    let none_trace = trace_trajectory(&none, &none_out, &TraceConfig::new((0.5, 0.5), 1)).unwrap();

    let dist_at = |trace: &oopdmp::sim::SimTrace, t: f64| -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (tt, x, y) in &trace.path {
            let d = (tt - t).abs();
            if d < best.0 {
                best = (d, ((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt());
            }
        }
        best.1
    };
    let d_sched = dist_at(&sched_trace, 1.0);
    let d_none = dist_at(&none_trace, 1.0);
    assert!(
        d_sched < d_none,
        "expected earlier centering with observations: {d_sched:.4} vs {d_none:.4}"
    );
    // Anticipated observations also dominate in value at the start.
    let v_sched = sched_out
        .field(AnchorKey::Mode(0), 0)
        .unwrap()
        .sample(0.5, 0.5, 0.0);
    let v_none = none_out
        .field(AnchorKey::Mode(0), 0)
        .unwrap()
        .sample(0.5, 0.5, 0.0);
    assert!(
        v_sched < v_none,
        "scheduled-observation value {v_sched:.4} must beat {v_none:.4} at the start"
    );

    // (b) Barriers with one free observation: the request falls after the
    // first barrier band and before the second.
    let bscenario = load_fixture("barriers.json");
    let mut barriers = bscenario
        .build(&scenario_dir(), &Overrides::default())
        .unwrap();
    barriers.spec.storage = StoragePolicy {
        stride: Some(16),
        keep: Keep::All,
    };
    let bout = solve(&barriers).unwrap();
    let mut bcfg = TraceConfig::new((0.1, 0.05), 2);
    bcfg.scripted_observations = vec![1];
    let btrace = trace_trajectory(&barriers, &bout, &bcfg).unwrap();
    let obs_pos = btrace
        .events
        .iter()
        .find_map(|e| match e {
            SimEvent::Observation { time, .. } => {
                let (_, x, y) = btrace
                    .path
                    .iter()
                    .min_by(|a, b| (a.0 - time).abs().total_cmp(&(b.0 - time).abs()))
                    .copied()
                    .unwrap();
                Some((x, y))
            }
            _ => None,
        })
        .expect("bounded trace must request its observation");
    let progress = (obs_pos.0 + obs_pos.1) / 2.0;
    assert!(
        (0.20..=0.58).contains(&progress),
        "observation at progress {progress:.3} (position {obs_pos:?}), want after the first barrier band (0.16) and before the second (0.58)"
    );
    assert!(
        btrace
            .events
            .iter()
            .any(|e| matches!(e, SimEvent::GoalReached { .. })),
        "barriers trace must reach the target"
    );

    // (c) Mars paid observations: the purchase region is nonempty at t = 0.
    let (mproblem, mout) = mars_solve();
    let modes = mproblem.chain.modes();
    let b0 = mproblem.spec.anchor.as_belief(modes);
    let slice0s: Vec<&GridSlice> = (0..modes)
        .map(|m| mout.field(AnchorKey::Mode(m), 0).unwrap().slice0())
        .collect();
    let vq = mout.field(AnchorKey::Distribution, 0).unwrap().slice0();
    let price = match &mproblem.spec.observations {
        Observations::Paid(c) => c,
        _ => unreachable!(),
    };
    let mut region = 0usize;
    for idx in 0..vq.data().len() {
        let v = vq.data()[idx];
        if v >= INF_SENTINEL {
            continue;
        }
        let mut theta = 0.0;
        let mut ok = true;
        for (m, s) in slice0s.iter().enumerate() {
            let vm = s.data()[idx];
            if vm >= INF_SENTINEL {
                ok = false;
                break;
            }
            theta += b0[m] * vm;
        }
        if ok && v >= price.data()[idx] + theta - 10.0 * mproblem.spec.tol {
            region += 1;
        }
    }
    assert!(region > 0, "mars purchase region is empty");
    println!(
        "PASS criterion 9: centering {d_sched:.3} < {d_none:.3}, barriers observation at progress {progress:.3}, mars region {region} points"
    );
}

#[test]
fn criterion_10_determinism() {
    let scenario = load_fixture("two_mode_finite.json");
    let overrides = Overrides {
        j: Some(50),
        ..Default::default()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let problem = scenario.build(&scenario_dir(), &overrides).unwrap();
        let out = solve(&problem).unwrap();
        let mut cfg = TraceConfig::new((0.5, 0.5), scenario.seed);
        cfg.stochastic = true;
        let traces = vec![
            trace_trajectory(&problem, &out, &cfg).unwrap(),
            trace_trajectory(
                &problem,
                &out,
                &TraceConfig {
                    seed: oopdmp::sim::derive_seed(scenario.seed, 1),
                    ..cfg.clone()
                },
            )
            .unwrap(),
        ];
        write_results(dir.path(), &scenario, &overrides, &out, &traces).unwrap();
    }
    let mut compared = 0;
    for entry in walk(dir_a.path()) {
        let rel = entry.strip_prefix(dir_a.path()).unwrap();
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(dir_b.path().join(rel)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", rel.display());
        compared += 1;
    }
    assert!(compared >= 4);
    println!("PASS criterion 10: {compared} files byte-identical across two seeded runs");
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
