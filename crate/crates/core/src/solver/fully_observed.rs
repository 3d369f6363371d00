//! Fully-observed baseline: every mode switch is seen immediately, so the
//! modes' value functions couple through an explicit exchange term instead of
//! beliefs. The finite regime marches the coupled system backward once;
//! stationary regimes march the time-dependent analogue in passes until the
//! fields stop changing.

use super::{
    cost_extremes, indefinite_horizon, supersolution_cap, timestep, AnchorKey, FieldEntry, Problem,
    Regime, SolveResult,
};
use crate::error::{Error, Result};
use crate::grid::{explicit_update, GridSlice, PointKind, TimeField, ZerothOrder, INF_SENTINEL};

pub fn solve_fully_observed(problem: &Problem) -> Result<SolveResult> {
    match problem.spec.regime {
        Regime::Finite => finite_coupled(problem),
        Regime::InfinitePeriodic => stationary_coupled(problem, Stationary::Discounted),
        Regime::Indefinite => stationary_coupled(problem, Stationary::ExitTime),
        Regime::RandomlyTerminated => stationary_coupled(problem, Stationary::Terminated),
    }
}

/// Coupled explicit step for every mode at once. The exchange and termination
/// terms enter through the zeroth-order channel: mode `i` relaxes at rate
/// `sum_j lambda_ij [+ gamma_i] [+ beta]` toward the rate-weighted blend of
/// the other modes' current slices [, phi_i][, zero].
fn coupled_step(
    problem: &Problem,
    slices: &[GridSlice],
    dt: f64,
    beta: Option<f64>,
    terminated: bool,
) -> Vec<GridSlice> {
    let modes = problem.chain.modes();
    let n = problem.grid.n();
    let mut out = Vec::with_capacity(modes);
    for i in 0..modes {
        let exit = -problem.chain.rate(i, i);
        let gamma_i = if terminated {
            problem.chain.gamma().map(|g| g[i]).unwrap_or(0.0)
        } else {
            0.0
        };
        let beta_i = beta.unwrap_or(0.0);
        let rate = exit + gamma_i + beta_i;
        let zeroth_parts = if rate > 0.0 {
            let mut reward = vec![0.0_f64; n * n];
            for (idx, r) in reward.iter_mut().enumerate() {
                let mut acc = 0.0;
                let mut sentinel = false;
                for j in 0..modes {
                    if j == i {
                        continue;
                    }
                    let lam = problem.chain.rate(i, j);
                    if lam == 0.0 {
                        continue;
                    }
                    let v = slices[j].data()[idx];
                    if v >= INF_SENTINEL {
                        sentinel = true;
                        break;
                    }
                    acc += lam * v;
                }
                if gamma_i > 0.0 && !sentinel {
                    let phi = problem
                        .costs
                        .premature
                        .as_ref()
                        .map(|p| p[i].data()[idx])
                        .unwrap_or_else(|| problem.costs.terminal[i].data()[idx]);
                    acc += gamma_i * phi;
                }
                // The beta share relaxes toward zero, adding nothing to acc.
                *r = if sentinel { INF_SENTINEL } else { acc / rate };
            }
            Some((GridSlice::constant(n, rate), GridSlice::from_vec(n, reward)))
        } else {
            None
        };
        let zeroth = zeroth_parts
            .as_ref()
            .map(|(rate, reward)| ZerothOrder { rate, reward });
        out.push(explicit_update(
            &slices[i],
            &problem.grid,
            &problem.speed,
            &problem.costs.running[i],
            dt,
            zeroth,
        ));
    }
    out
}

fn boundary_min(problem: &Problem, slices: &mut [GridSlice]) {
    for (i, slice) in slices.iter_mut().enumerate() {
        for idx in problem.grid.target_boundary_indices() {
            let psi = problem.costs.terminal[i].data()[idx];
            let v = &mut slice.data_mut()[idx];
            if psi < *v {
                *v = psi;
            }
        }
    }
}

fn capped(slice: &GridSlice, cap: f64) -> GridSlice {
    let mut out = slice.clone();
    for v in out.data_mut() {
        if *v > cap {
            *v = INF_SENTINEL;
        }
    }
    out
}

fn finite_coupled(problem: &Problem) -> Result<SolveResult> {
    let horizon = match problem.spec.horizon {
        Some(t) if t > 0.0 => t,
        _ => {
            return Err(Error::InvalidInput(
                "finite-horizon solves need a horizon".into(),
            ))
        }
    };
    let modes = problem.chain.modes();
    let extra = problem.chain.max_exit_rate();
    let (dt, n_steps) = timestep(problem, horizon, extra)?;
    let ext = cost_extremes(problem);
    let cap = super::padded_cap(ext.k_max * horizon + ext.psi_max.max(ext.phi_max));
    let stride = problem.spec.storage.stride_for(n_steps);

    let mut slices: Vec<GridSlice> = (0..modes)
        .map(|i| {
            let mut s = problem.costs.terminal[i].clone();
            for jy in 0..problem.grid.n() {
                for ix in 0..problem.grid.n() {
                    if problem.grid.is_sentinel_point(ix, jy) {
                        *s.at_mut(ix, jy) = INF_SENTINEL;
                    }
                }
            }
            s
        })
        .collect();

    let keep = |k: usize| k == 0 || k == n_steps || k % stride == 0;
    let mut stored: Vec<Vec<(usize, GridSlice)>> = vec![Vec::new(); modes];
    for (i, s) in slices.iter().enumerate() {
        if keep(n_steps) {
            stored[i].push((n_steps, capped(s, cap)));
        }
    }
    for k in (1..=n_steps).rev() {
        slices = coupled_step(problem, &slices, dt, None, false);
        if keep(k - 1) {
            for (i, s) in slices.iter().enumerate() {
                stored[i].push((k - 1, capped(s, cap)));
            }
        }
    }

    let entries = stored
        .into_iter()
        .enumerate()
        .map(|(i, mut ks)| {
            ks.sort_by_key(|(k, _)| *k);
            let ts = ks.iter().map(|(k, _)| *k as f64 * dt).collect();
            let sl = ks.into_iter().map(|(_, s)| s).collect();
            FieldEntry {
                anchor: AnchorKey::Mode(i),
                layer: 0,
                field: TimeField::new(ts, sl),
                mask: None,
            }
        })
        .collect();

    Ok(SolveResult {
        entries,
        iterations_used: 1,
        residual_history: Vec::new(),
        horizon_used: horizon,
        dt,
        converged: true,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Stationary {
    Discounted,
    ExitTime,
    Terminated,
}

fn stationary_coupled(problem: &Problem, kind: Stationary) -> Result<SolveResult> {
    let modes = problem.chain.modes();
    let ext = cost_extremes(problem);
    let beta = match kind {
        Stationary::Discounted => match problem.spec.beta {
            Some(b) if b > 0.0 => Some(b),
            _ => {
                return Err(Error::InvalidInput(
                    "discounted stationary solve needs a positive discount rate".into(),
                ))
            }
        },
        _ => None,
    };
    if kind == Stationary::Terminated && problem.chain.gamma().is_none() {
        return Err(Error::MissingField(
            "termination rates (gamma) for the randomly-terminated regime",
        ));
    }
    let (pass_span, cap) = match kind {
        Stationary::Discounted => {
            let b = beta.unwrap();
            (2.0 / b, super::padded_cap(ext.k_max / b))
        }
        _ => {
            let t = indefinite_horizon(problem)?;
            (
                t,
                super::padded_cap(ext.k_max * t + ext.psi_max.max(ext.phi_max)),
            )
        }
    };
    let extra = problem.chain.max_exit_rate()
        + beta.unwrap_or(0.0)
        + if kind == Stationary::Terminated {
            problem.chain.gamma_max()
        } else {
            0.0
        };
    let (dt, steps_per_pass) = timestep(problem, pass_span, extra)?;

    let mut slices: Vec<GridSlice> = match kind {
        Stationary::Discounted => (0..modes)
            .map(|i| {
                let b = beta.unwrap();
                let mut s = GridSlice::from_vec(
                    problem.grid.n(),
                    problem.costs.running[i]
                        .data()
                        .iter()
                        .map(|k| k / b)
                        .collect(),
                );
                for jy in 0..problem.grid.n() {
                    for ix in 0..problem.grid.n() {
                        if problem.grid.is_sentinel_point(ix, jy) {
                            *s.at_mut(ix, jy) = INF_SENTINEL;
                        }
                    }
                }
                s
            })
            .collect(),
        _ => {
            if !problem.grid.has_target() {
                return Err(Error::EmptyTarget);
            }
            (0..modes)
                .map(|i| {
                    let mut s = GridSlice::constant(problem.grid.n(), INF_SENTINEL);
                    for jy in 0..problem.grid.n() {
                        for ix in 0..problem.grid.n() {
                            if problem.grid.kind(ix, jy) == PointKind::TargetBoundary {
                                *s.at_mut(ix, jy) = problem.costs.terminal[i].at(ix, jy);
                            }
                        }
                    }
                    s
                })
                .collect()
        }
    };

    let terminated = kind == Stationary::Terminated;
    let has_boundary = kind != Stationary::Discounted;
    let point_cap = if has_boundary {
        Some(supersolution_cap(problem, &ext)?)
    } else {
        None
    };
    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < problem.spec.max_iters {
        iterations += 1;
        let before: Vec<GridSlice> = slices.iter().map(|s| capped(s, cap)).collect();
        for _ in 0..steps_per_pass {
            slices = coupled_step(problem, &slices, dt, beta, terminated);
            if has_boundary {
                boundary_min(problem, &mut slices);
            }
            if let Some(cap) = &point_cap {
                for slice in &mut slices {
                    for jy in 0..problem.grid.n() {
                        for ix in 0..problem.grid.n() {
                            if problem.grid.is_sentinel_point(ix, jy) {
                                continue;
                            }
                            let c = cap.at(ix, jy);
                            let v = slice.at_mut(ix, jy);
                            if c < *v {
                                *v = c;
                            }
                        }
                    }
                }
            }
        }
        let delta = slices
            .iter()
            .zip(&before)
            .map(|(s, b)| capped(s, cap).sup_distance(b))
            .fold(0.0, f64::max);
        residual_history.push(delta);
        if delta <= problem.spec.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "fully-observed stationary solve hit max_iters = {} (last residual {:.3e})",
            problem.spec.max_iters,
            residual_history.last().copied().unwrap_or(f64::NAN)
        );
    }

    let entries = slices
        .into_iter()
        .enumerate()
        .map(|(i, s)| FieldEntry {
            anchor: AnchorKey::Mode(i),
            layer: 0,
            field: TimeField::single(capped(&s, cap)),
            mask: None,
        })
        .collect();

    Ok(SolveResult {
        entries,
        iterations_used: iterations,
        residual_history,
        horizon_used: pass_span,
        dt,
        converged,
    })
}
