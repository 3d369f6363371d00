//! Discounted infinite-horizon solver with periodic mode observations. The
//! inter-observation interval is solved repeatedly, each pass feeding the
//! previous pass's time-zero slices into the terminal condition until the
//! fields stop changing.

use super::march::Sweep;
use super::{
    basis, belief_table, cost_extremes, timestep, AnchorKey, FieldEntry, Problem, Regime,
    SolveResult,
};
use crate::chain::{weighted_slice, Anchor};
use crate::error::{Error, Result};
use crate::grid::{GridSlice, TimeField, INF_SENTINEL};

pub fn solve_infinite_periodic(problem: &Problem) -> Result<SolveResult> {
    if problem.spec.regime != Regime::InfinitePeriodic {
        return Err(Error::InvalidInput(
            "periodic solver needs the infinite-periodic regime".into(),
        ));
    }
    let beta = match problem.spec.beta {
        Some(b) if b > 0.0 => b,
        _ => {
            return Err(Error::InvalidInput(
                "infinite-periodic regime needs a positive discount rate".into(),
            ))
        }
    };
    let period = match problem.spec.horizon {
        Some(t) if t > 0.0 => t,
        _ => {
            return Err(Error::InvalidInput(
                "infinite-periodic regime needs a positive observation period".into(),
            ))
        }
    };
    let modes = problem.chain.modes();
    let (dt, n_steps) = timestep(problem, period, 0.0)?;
    let ext = cost_extremes(problem);
    let value_cap = super::padded_cap(ext.k_max / beta);
    let stride = problem.spec.storage.stride_for(n_steps);
    let end_discount = (-beta * period).exp();

    let mut weights = Vec::with_capacity(modes);
    for m in 0..modes {
        weights.push(belief_table(
            &problem.chain,
            &basis(m, modes),
            n_steps,
            dt,
            false,
        )?);
    }

    let sweep_for = |m: usize, terminal: GridSlice, prev: Option<&TimeField>| {
        Sweep {
            grid: &problem.grid,
            speed: &problem.speed,
            dt,
            n_steps,
            weights: &weights[m],
            running: &problem.costs.running,
            discount: Some(beta),
            terminal,
            boundary_psi: None,
            obstacle: None,
            termination: None,
            value_cap,
            point_cap: None,
            stride,
            mask_margin: 0.0,
        }
        .run(prev)
    };

    let mask = |slice: &mut GridSlice| {
        for jy in 0..problem.grid.n() {
            for ix in 0..problem.grid.n() {
                if problem.grid.is_sentinel_point(ix, jy) {
                    *slice.at_mut(ix, jy) = INF_SENTINEL;
                }
            }
        }
    };

    // Initialization sweep: the terminal slice is the discounted cost of
    // staying in place indefinitely without switches.
    let mut fields: Vec<TimeField> = Vec::with_capacity(modes);
    for m in 0..modes {
        let mut terminal = GridSlice::from_vec(
            problem.grid.n(),
            problem.costs.running[m]
                .data()
                .iter()
                .map(|k| end_discount * k / beta)
                .collect(),
        );
        mask(&mut terminal);
        fields.push(sweep_for(m, terminal, None).field);
    }

    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < problem.spec.max_iters {
        iterations += 1;
        let slice0s: Vec<GridSlice> = fields.iter().map(|f| f.slice0().clone()).collect();
        let refs: Vec<&GridSlice> = slice0s.iter().collect();
        let mut next_fields = Vec::with_capacity(modes);
        let mut delta: f64 = 0.0;
        for m in 0..modes {
            let w_end: Vec<f64> = weights[m][n_steps]
                .iter()
                .map(|b| b * end_discount)
                .collect();
            let mut terminal = weighted_slice(&refs, &w_end);
            mask(&mut terminal);
            let out = sweep_for(m, terminal, Some(&fields[m]));
            delta = delta.max(out.residual);
            next_fields.push(out.field);
        }
        fields = next_fields;
        residual_history.push(delta);
        if delta <= problem.spec.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "periodic solver hit max_iters = {} (last residual {:.3e})",
            problem.spec.max_iters,
            residual_history.last().copied().unwrap_or(f64::NAN)
        );
    }

    let keep_entry = |key: &AnchorKey, field: TimeField| -> TimeField {
        if problem.spec.storage.keeps_full(key, 0) {
            field
        } else {
            TimeField::single(field.slice0().clone())
        }
    };

    let mut entries: Vec<FieldEntry> = Vec::new();
    let slice0s: Vec<GridSlice> = fields.iter().map(|f| f.slice0().clone()).collect();
    for (m, field) in fields.into_iter().enumerate() {
        entries.push(FieldEntry {
            anchor: AnchorKey::Mode(m),
            layer: 0,
            field: keep_entry(&AnchorKey::Mode(m), field),
            mask: None,
        });
    }

    if let Anchor::Distribution(q) = &problem.spec.anchor {
        let qw = belief_table(&problem.chain, q, n_steps, dt, false)?;
        let refs: Vec<&GridSlice> = slice0s.iter().collect();
        let w_end: Vec<f64> = qw[n_steps].iter().map(|b| b * end_discount).collect();
        let mut terminal = weighted_slice(&refs, &w_end);
        mask(&mut terminal);
        let out = Sweep {
            grid: &problem.grid,
            speed: &problem.speed,
            dt,
            n_steps,
            weights: &qw,
            running: &problem.costs.running,
            discount: Some(beta),
            terminal,
            boundary_psi: None,
            obstacle: None,
            termination: None,
            value_cap,
            point_cap: None,
            stride,
            mask_margin: 0.0,
        }
        .run(None);
        entries.push(FieldEntry {
            anchor: AnchorKey::Distribution,
            layer: 0,
            field: keep_entry(&AnchorKey::Distribution, out.field),
            mask: None,
        });
    }

    Ok(SolveResult {
        entries,
        iterations_used: iterations,
        residual_history,
        horizon_used: period,
        dt,
        converged,
    })
}
