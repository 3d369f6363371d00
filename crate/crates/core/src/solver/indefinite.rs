//! Indefinite-horizon solvers: the process stops on entering the target, the
//! time interval is truncated by the minimum-time bound, and the target
//! boundary takes the viscosity-sense min between entering and continuing.
//! On-demand observations add a pointwise branch: free but limited
//! observations solve layer-by-layer in one pass, paid observations iterate
//! to a fixed point. Randomly-terminated problems reuse the same passes with
//! survival-conditioned beliefs and the termination relaxation term.

use super::march::{Sweep, SweepObstacle, SweepTermination};
use super::{
    basis, belief_table, cost_extremes, indefinite_horizon, timestep, AnchorKey, FieldEntry,
    Observations, Problem, Regime, SolveResult,
};
use crate::chain::Anchor;
use crate::error::{Error, Result};
use crate::grid::{GridSlice, PointKind, TimeField, INF_SENTINEL};

/// Contact-mask margin in units of one step's expected accrual; see
/// `Sweep::mask_margin`.
const MASK_MARGIN: f64 = 0.1;

struct Setup<'a> {
    problem: &'a Problem,
    horizon: f64,
    dt: f64,
    n_steps: usize,
    conditioned: bool,
    gamma: Option<&'a [f64]>,
    phi: Option<&'a [GridSlice]>,
    value_cap: f64,
    point_cap: GridSlice,
}

impl<'a> Setup<'a> {
    fn build(problem: &'a Problem) -> Result<Self> {
        if !problem.grid.has_target() {
            return Err(Error::EmptyTarget);
        }
        let (conditioned, gamma, phi, extra_rate) =
            if problem.spec.regime == Regime::RandomlyTerminated {
                let gamma = problem.chain.gamma().ok_or(Error::MissingField(
                    "termination rates (gamma) for the randomly-terminated regime",
                ))?;
                let phi = problem
                    .costs
                    .premature
                    .as_deref()
                    .ok_or(Error::MissingField("premature-termination cost (phi)"))?;
                (true, Some(gamma), Some(phi), problem.chain.gamma_max())
            } else {
                (false, None, None, 0.0)
            };
        let horizon = indefinite_horizon(problem)?;
        let (dt, n_steps) = timestep(problem, horizon, extra_rate)?;
        let ext = cost_extremes(problem);
        let value_cap = super::padded_cap(ext.k_max * horizon + ext.psi_max.max(ext.phi_max));
        let point_cap = super::supersolution_cap(problem, &ext)?;
        Ok(Self {
            problem,
            horizon,
            dt,
            n_steps,
            conditioned,
            gamma,
            phi,
            value_cap,
            point_cap,
        })
    }

    fn weights_for(&self, q: &[f64]) -> Result<Vec<Vec<f64>>> {
        belief_table(
            &self.problem.chain,
            q,
            self.n_steps,
            self.dt,
            self.conditioned,
        )
    }

    /// Terminal slice: sentinel off the target, expected terminal cost on the
    /// target boundary, sentinel inside obstacles and the target interior.
    fn terminal(&self, weights_end: &[f64]) -> GridSlice {
        let grid = &self.problem.grid;
        let mut out = GridSlice::constant(grid.n(), INF_SENTINEL);
        for jy in 0..grid.n() {
            for ix in 0..grid.n() {
                if grid.kind(ix, jy) == PointKind::TargetBoundary {
                    let bar: f64 = self
                        .problem
                        .costs
                        .terminal
                        .iter()
                        .zip(weights_end)
                        .map(|(f, w)| w * f.at(ix, jy))
                        .sum();
                    *out.at_mut(ix, jy) = bar;
                }
            }
        }
        out
    }

    fn sweep(
        &self,
        weights: &[Vec<f64>],
        obstacle: Option<SweepObstacle<'_>>,
        stride: usize,
        prev: Option<&TimeField>,
    ) -> super::march::SweepOut {
        let termination = match (self.gamma, self.phi) {
            (Some(g), Some(p)) => Some(SweepTermination { gamma: g, phi: p }),
            _ => None,
        };
        Sweep {
            grid: &self.problem.grid,
            speed: &self.problem.speed,
            dt: self.dt,
            n_steps: self.n_steps,
            weights,
            running: &self.problem.costs.running,
            discount: None,
            terminal: self.terminal(&weights[self.n_steps]),
            boundary_psi: Some(&self.problem.costs.terminal),
            obstacle,
            termination,
            value_cap: self.value_cap,
            point_cap: Some(&self.point_cap),
            stride,
            mask_margin: MASK_MARGIN,
        }
        .run(prev)
    }

    fn stride_for(&self, key: &AnchorKey, layer: usize) -> usize {
        if self.problem.spec.storage.keeps_full(key, layer) {
            self.problem.spec.storage.stride_for(self.n_steps)
        } else {
            usize::MAX
        }
    }
}

fn anchor_key(anchor: &Anchor) -> AnchorKey {
    match anchor {
        Anchor::Mode(m) => AnchorKey::Mode(*m),
        Anchor::Distribution(_) => AnchorKey::Distribution,
    }
}

/// No observations: one backward sweep for the given anchor.
pub fn solve_indefinite(problem: &Problem, anchor: &Anchor) -> Result<SolveResult> {
    let setup = Setup::build(problem)?;
    let key = anchor_key(anchor);
    let weights = setup.weights_for(&anchor.as_belief(problem.chain.modes()))?;
    let out = setup.sweep(&weights, None, setup.stride_for(&key, 0), None);
    Ok(SolveResult {
        entries: vec![FieldEntry {
            anchor: key,
            layer: 0,
            field: out.field,
            mask: None,
        }],
        iterations_used: 1,
        residual_history: Vec::new(),
        horizon_used: setup.horizon,
        dt: setup.dt,
        converged: true,
    })
}

/// Up to `L` free on-demand observations, solved in a single pass from the
/// exhausted layer down. Layer `l` takes the pointwise min with the expected
/// post-observation value of layer `l + 1`.
pub fn solve_indefinite_bounded_obs(problem: &Problem) -> Result<SolveResult> {
    let max_obs = match &problem.spec.observations {
        Observations::Bounded(l) => *l,
        _ => {
            return Err(Error::InvalidInput(
                "bounded solver needs a bounded observation budget".into(),
            ))
        }
    };
    let setup = Setup::build(problem)?;
    let modes = problem.chain.modes();

    let mut mode_weights = Vec::with_capacity(modes);
    for m in 0..modes {
        mode_weights.push(setup.weights_for(&basis(m, modes))?);
    }

    let mut per_layer: Vec<Vec<(TimeField, Option<TimeField>)>> = Vec::new(); // index: max_obs - layer
    for l in (0..=max_obs).rev() {
        let mut fields = Vec::with_capacity(modes);
        for m in 0..modes {
            let obstacle = if l < max_obs {
                let next = &per_layer[per_layer.len() - 1];
                Some(SweepObstacle {
                    slice0s: next.iter().map(|(f, _)| f.slice0()).collect(),
                    surcharge: None,
                })
            } else {
                None
            };
            let stride = setup.stride_for(&AnchorKey::Mode(m), l);
            let out = setup.sweep(&mode_weights[m], obstacle, stride, None);
            fields.push((out.field, out.mask));
        }
        per_layer.push(fields);
    }
    per_layer.reverse(); // now indexed by layer l = 0..=max_obs

    let mut entries = Vec::new();
    if let Anchor::Distribution(q) = &problem.spec.anchor {
        let weights = setup.weights_for(q)?;
        let obstacle = (max_obs > 0).then(|| SweepObstacle {
            slice0s: per_layer[1].iter().map(|(f, _)| f.slice0()).collect(),
            surcharge: None,
        });
        let stride = setup.stride_for(&AnchorKey::Distribution, 0);
        let out = setup.sweep(&weights, obstacle, stride, None);
        entries.push(FieldEntry {
            anchor: AnchorKey::Distribution,
            layer: 0,
            field: out.field,
            mask: out.mask,
        });
    }
    for (l, fields) in per_layer.into_iter().enumerate() {
        for (m, (field, mask)) in fields.into_iter().enumerate() {
            entries.push(FieldEntry {
                anchor: AnchorKey::Mode(m),
                layer: l,
                field,
                mask,
            });
        }
    }

    Ok(SolveResult {
        entries,
        iterations_used: 1,
        residual_history: Vec::new(),
        horizon_used: setup.horizon,
        dt: setup.dt,
        converged: true,
    })
}

/// Unlimited observations at pointwise cost `C`: iterate sweeps whose
/// observation branch charges `C` plus the expected post-observation value
/// from the previous pass, until the fields stop changing.
pub fn solve_indefinite_paid_obs(problem: &Problem) -> Result<SolveResult> {
    let price = match &problem.spec.observations {
        Observations::Paid(c) => c.clone(),
        _ => {
            return Err(Error::InvalidInput(
                "paid solver needs an observation price field".into(),
            ))
        }
    };
    let setup = Setup::build(problem)?;
    let grid = &problem.grid;
    for jy in 0..grid.n() {
        for ix in 0..grid.n() {
            if !grid.is_sentinel_point(ix, jy) && !(price.at(ix, jy) > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "observation price must be positive, got {} at ({ix}, {jy})",
                    price.at(ix, jy)
                )));
            }
        }
    }
    let modes = problem.chain.modes();
    let mut mode_weights = Vec::with_capacity(modes);
    for m in 0..modes {
        mode_weights.push(setup.weights_for(&basis(m, modes))?);
    }
    // Internal stride: residuals compare stored slices, so keep time
    // resolution during the iteration regardless of the keep policy.
    let stride = problem.spec.storage.stride_for(setup.n_steps);

    let mut fields: Vec<TimeField> = (0..modes)
        .map(|m| setup.sweep(&mode_weights[m], None, stride, None).field)
        .collect();
    let mut masks: Vec<Option<TimeField>> = vec![None; modes];

    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < problem.spec.max_iters {
        iterations += 1;
        let slice0s: Vec<GridSlice> = fields.iter().map(|f| f.slice0().clone()).collect();
        let mut delta: f64 = 0.0;
        let mut next = Vec::with_capacity(modes);
        let mut next_masks = Vec::with_capacity(modes);
        for m in 0..modes {
            let obstacle = SweepObstacle {
                slice0s: slice0s.iter().collect(),
                surcharge: Some(&price),
            };
            let out = setup.sweep(&mode_weights[m], Some(obstacle), stride, Some(&fields[m]));
            delta = delta.max(out.residual);
            next.push(out.field);
            next_masks.push(out.mask);
        }
        fields = next;
        masks = next_masks;
        residual_history.push(delta);
        if delta <= problem.spec.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "paid-observation solver hit max_iters = {} (last residual {:.3e})",
            problem.spec.max_iters,
            residual_history.last().copied().unwrap_or(f64::NAN)
        );
    }

    let shrink = |key: &AnchorKey, field: TimeField| -> TimeField {
        if setup.problem.spec.storage.keeps_full(key, 0) {
            field
        } else {
            TimeField::single(field.slice0().clone())
        }
    };

    let mut entries = Vec::new();
    if let Anchor::Distribution(q) = &problem.spec.anchor {
        let weights = setup.weights_for(q)?;
        let slice0s: Vec<&GridSlice> = fields.iter().map(|f| f.slice0()).collect();
        let obstacle = SweepObstacle {
            slice0s,
            surcharge: Some(&price),
        };
        let out = setup.sweep(&weights, Some(obstacle), stride, None);
        entries.push(FieldEntry {
            anchor: AnchorKey::Distribution,
            layer: 0,
            field: shrink(&AnchorKey::Distribution, out.field),
            mask: out.mask.map(|m| shrink(&AnchorKey::Distribution, m)),
        });
    }
    for (m, (field, mask)) in fields.into_iter().zip(masks).enumerate() {
        entries.push(FieldEntry {
            anchor: AnchorKey::Mode(m),
            layer: 0,
            field: shrink(&AnchorKey::Mode(m), field),
            mask: mask.map(|mk| shrink(&AnchorKey::Mode(m), mk)),
        });
    }

    Ok(SolveResult {
        entries,
        iterations_used: iterations,
        residual_history,
        horizon_used: setup.horizon,
        dt: setup.dt,
        converged,
    })
}

/// Randomly-terminated problems: identical pass structure to the chosen
/// indefinite variant, with survival-conditioned beliefs, the termination
/// relaxation toward the expected premature cost, and the CFL step shrunk by
/// the largest termination rate.
pub fn solve_randomly_terminated(problem: &Problem) -> Result<SolveResult> {
    if problem.spec.regime != Regime::RandomlyTerminated {
        return Err(Error::InvalidInput(
            "randomly-terminated solver needs the randomly-terminated regime".into(),
        ));
    }
    match &problem.spec.observations {
        Observations::None => solve_indefinite(problem, &problem.spec.anchor),
        Observations::Bounded(_) => solve_indefinite_bounded_obs(problem),
        Observations::Paid(_) => solve_indefinite_paid_obs(problem),
        Observations::Scheduled(_) => Err(Error::InvalidInput(
            "scheduled observations are not defined for the randomly-terminated regime".into(),
        )),
    }
}
