//! Finite-horizon solvers: single backward sweep without observations, and
//! the scheduled-observation ladder coupled through interval terminal
//! conditions.

use super::march::{Sweep, SweepOut};
use super::{
    basis, belief_table, cost_extremes, timestep, AnchorKey, FieldEntry, Observations, Problem,
    Regime, SolveResult,
};
use crate::chain::{weighted_slice, Anchor};
use crate::error::{Error, Result};
use crate::grid::{GridSlice, TimeField, INF_SENTINEL};

fn require_horizon(problem: &Problem) -> Result<f64> {
    match problem.spec.horizon {
        Some(t) if t > 0.0 => Ok(t),
        Some(t) => Err(Error::InvalidInput(format!(
            "horizon must be positive, got {t}"
        ))),
        None => Err(Error::InvalidInput(
            "finite-horizon solves need a horizon".into(),
        )),
    }
}

fn mask_sentinels(problem: &Problem, slice: &mut GridSlice) {
    let grid = &problem.grid;
    for jy in 0..grid.n() {
        for ix in 0..grid.n() {
            if grid.is_sentinel_point(ix, jy) {
                *slice.at_mut(ix, jy) = INF_SENTINEL;
            }
        }
    }
}

fn finite_value_cap(problem: &Problem, horizon: f64) -> f64 {
    let ext = cost_extremes(problem);
    super::padded_cap(ext.k_max * horizon + ext.psi_max.max(ext.phi_max))
}

/// One anchored backward sweep over `[0, T]` with terminal cost
/// `psi_bar(x, T)` and running cost weighted by the propagated belief.
pub fn solve_finite_no_obs(problem: &Problem, anchor: &Anchor) -> Result<SolveResult> {
    let horizon = require_horizon(problem)?;
    let (dt, n_steps) = timestep(problem, horizon, 0.0)?;
    let q = anchor.as_belief(problem.chain.modes());
    let weights = belief_table(&problem.chain, &q, n_steps, dt, false)?;

    let psi_refs: Vec<&GridSlice> = problem.costs.terminal.iter().collect();
    let mut terminal = weighted_slice(&psi_refs, &weights[n_steps]);
    mask_sentinels(problem, &mut terminal);

    let key = match anchor {
        Anchor::Mode(m) => AnchorKey::Mode(*m),
        Anchor::Distribution(_) => AnchorKey::Distribution,
    };
    let stride = if problem.spec.storage.keeps_full(&key, 0) {
        problem.spec.storage.stride_for(n_steps)
    } else {
        usize::MAX
    };
    let SweepOut { field, .. } = Sweep {
        grid: &problem.grid,
        speed: &problem.speed,
        dt,
        n_steps,
        weights: &weights,
        running: &problem.costs.running,
        discount: None,
        terminal,
        boundary_psi: None,
        obstacle: None,
        termination: None,
        value_cap: finite_value_cap(problem, horizon),
        point_cap: None,
        mask_margin: 0.0,
        stride,
    }
    .run(None);

    Ok(SolveResult {
        entries: vec![FieldEntry {
            anchor: key,
            layer: 0,
            field,
            mask: None,
        }],
        iterations_used: 1,
        residual_history: Vec::new(),
        horizon_used: horizon,
        dt,
        converged: true,
    })
}

fn validate_schedule(times: &[f64], horizon: f64) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput(
            "scheduled observations need at least one time".into(),
        ));
    }
    for w in times.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidInput(format!(
                "observation times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    // The last time may coincide with the horizon (degenerate final
    // interval), anything beyond is rejected.
    if times[0] <= 0.0 || *times.last().unwrap() > horizon {
        return Err(Error::InvalidInput(format!(
            "observation times must lie in (0, {horizon}]"
        )));
    }
    Ok(())
}

/// Scheduled observations: for each interval `l = L..0` and anchor mode `m`,
/// sweep backwards over `[0, T_{l+1} - T_l]`; the terminal slice is the
/// expected terminal cost on the last interval and the expected
/// post-observation value of the next interval otherwise. When the problem's
/// anchor is a distribution, an extra first-interval field for that
/// distribution is appended.
pub fn solve_finite_scheduled(problem: &Problem) -> Result<SolveResult> {
    let horizon = require_horizon(problem)?;
    let times = match &problem.spec.observations {
        Observations::Scheduled(ts) => ts.clone(),
        _ => {
            return Err(Error::InvalidInput(
                "scheduled solver needs scheduled observation times".into(),
            ))
        }
    };
    if problem.spec.regime != Regime::Finite {
        return Err(Error::InvalidInput(
            "scheduled observations are a finite-horizon scheme".into(),
        ));
    }
    validate_schedule(&times, horizon)?;
    let modes = problem.chain.modes();
    let layers = times.len() + 1;
    let mut bounds = Vec::with_capacity(layers + 1);
    bounds.push(0.0);
    bounds.extend_from_slice(&times);
    bounds.push(horizon);

    let psi_refs: Vec<&GridSlice> = problem.costs.terminal.iter().collect();
    let mut per_layer: Vec<Vec<TimeField>> = vec![Vec::new(); layers];
    let mut dt_used = 0.0;

    for l in (0..layers).rev() {
        let span = bounds[l + 1] - bounds[l];
        let last = l == layers - 1;
        for m in 0..modes {
            let field = if span <= 0.0 {
                // Degenerate interval: the value is the terminal condition.
                let mut slice = if last {
                    problem.costs.terminal[m].clone()
                } else {
                    let next: Vec<&GridSlice> =
                        per_layer[l + 1].iter().map(|f| f.slice0()).collect();
                    weighted_slice(&next, &basis(m, modes))
                };
                mask_sentinels(problem, &mut slice);
                TimeField::single(slice)
            } else {
                let (dt, n_steps) = timestep(problem, span, 0.0)?;
                dt_used = dt;
                let weights = belief_table(&problem.chain, &basis(m, modes), n_steps, dt, false)?;
                let mut terminal = if last {
                    weighted_slice(&psi_refs, &weights[n_steps])
                } else {
                    let next: Vec<&GridSlice> =
                        per_layer[l + 1].iter().map(|f| f.slice0()).collect();
                    weighted_slice(&next, &weights[n_steps])
                };
                mask_sentinels(problem, &mut terminal);
                let key = AnchorKey::Mode(m);
                let stride = if problem.spec.storage.keeps_full(&key, l) {
                    problem.spec.storage.stride_for(n_steps)
                } else {
                    usize::MAX
                };
                Sweep {
                    grid: &problem.grid,
                    speed: &problem.speed,
                    dt,
                    n_steps,
                    weights: &weights,
                    running: &problem.costs.running,
                    discount: None,
                    terminal,
                    boundary_psi: None,
                    obstacle: None,
                    termination: None,
                    value_cap: finite_value_cap(problem, horizon),
                    point_cap: None,
                    mask_margin: 0.0,
                    stride,
                }
                .run(None)
                .field
            };
            per_layer[l].push(field);
        }
    }

    let mut entries = Vec::new();
    for (l, fields) in per_layer.iter_mut().enumerate() {
        for (m, field) in fields.drain(..).enumerate() {
            entries.push(FieldEntry {
                anchor: AnchorKey::Mode(m),
                layer: l,
                field,
                mask: None,
            });
        }
    }

    if let Anchor::Distribution(q) = &problem.spec.anchor {
        let span = bounds[1] - bounds[0];
        let (dt, n_steps) = timestep(problem, span, 0.0)?;
        let weights = belief_table(&problem.chain, q, n_steps, dt, false)?;
        let next: Vec<&GridSlice> = (0..modes)
            .map(|m| {
                entries
                    .iter()
                    .find(|e| e.anchor == AnchorKey::Mode(m) && e.layer == 1)
                    .map(|e| e.field.slice0())
                    .expect("layer 1 exists when a schedule is present")
            })
            .collect();
        let mut terminal = weighted_slice(&next, &weights[n_steps]);
        mask_sentinels(problem, &mut terminal);
        let stride = if problem.spec.storage.keeps_full(&AnchorKey::Distribution, 0) {
            problem.spec.storage.stride_for(n_steps)
        } else {
            usize::MAX
        };
        let out = Sweep {
            grid: &problem.grid,
            speed: &problem.speed,
            dt,
            n_steps,
            weights: &weights,
            running: &problem.costs.running,
            discount: None,
            terminal,
            boundary_psi: None,
            obstacle: None,
            termination: None,
            value_cap: finite_value_cap(problem, horizon),
            point_cap: None,
            mask_margin: 0.0,
            stride,
        }
        .run(None);
        entries.push(FieldEntry {
            anchor: AnchorKey::Distribution,
            layer: 0,
            field: out.field,
            mask: None,
        });
    }

    Ok(SolveResult {
        entries,
        iterations_used: 1,
        residual_history: Vec::new(),
        horizon_used: horizon,
        dt: dt_used,
        converged: true,
    })
}
