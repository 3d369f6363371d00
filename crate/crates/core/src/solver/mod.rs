//! Value-function solvers: fully-observed baseline, finite horizon with and
//! without scheduled observations, infinite horizon with periodic
//! observations, indefinite horizon with no / bounded / paid on-demand
//! observations, and randomly-terminated variants of the indefinite family.
//!
//! All solvers march the same explicit upwind kernel backward in time; they
//! differ in terminal conditions, boundary treatment, observation branches,
//! and iteration structure.

mod finite;
mod fully_observed;
mod indefinite;
mod march;
mod periodic;

pub use finite::{solve_finite_no_obs, solve_finite_scheduled};
pub use fully_observed::solve_fully_observed;
pub use indefinite::{
    solve_indefinite, solve_indefinite_bounded_obs, solve_indefinite_paid_obs,
    solve_randomly_terminated,
};
pub use periodic::solve_infinite_periodic;

use crate::chain::{Anchor, CostBundle, ModeChain};
use crate::eikonal::{horizon_bound, solve_min_time};
use crate::error::{Error, Result};
use crate::grid::{cfl_timestep, Grid2D, GridSlice, PointKind, SpeedField, TimeField};

/// Planning-horizon regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Finite,
    InfinitePeriodic,
    Indefinite,
    RandomlyTerminated,
}

/// Mode-observation scheme.
#[derive(Debug, Clone)]
pub enum Observations {
    None,
    /// Exact observations at fixed times inside the horizon.
    Scheduled(Vec<f64>),
    /// At most this many free on-demand observations.
    Bounded(usize),
    /// Unlimited on-demand observations at a positive pointwise cost.
    Paid(GridSlice),
}

/// What the solver keeps of each computed field.
#[derive(Debug, Clone)]
pub enum Keep {
    /// Every marched slice, subsampled by the stride.
    All,
    /// Only the time-zero slice (plus the terminal slice).
    Slice0Only,
    /// Full time resolution for the listed `(anchor, layer)` pairs, slice 0
    /// for everything else.
    Fields(Vec<(AnchorKey, usize)>),
}

#[derive(Debug, Clone)]
pub struct StoragePolicy {
    /// Store every `stride`-th slice; `None` picks a stride that keeps at
    /// most ~129 slices per field.
    pub stride: Option<usize>,
    pub keep: Keep,
}

impl Default for StoragePolicy {
    fn default() -> Self {
        Self {
            stride: None,
            keep: Keep::All,
        }
    }
}

impl StoragePolicy {
    pub fn slice0_only() -> Self {
        Self {
            stride: None,
            keep: Keep::Slice0Only,
        }
    }

    fn stride_for(&self, n_steps: usize) -> usize {
        match self.stride {
            Some(s) => s.max(1),
            None => (n_steps / 128).max(1),
        }
    }

    fn keeps_full(&self, anchor: &AnchorKey, layer: usize) -> bool {
        match &self.keep {
            Keep::All => true,
            Keep::Slice0Only => false,
            Keep::Fields(list) => list.iter().any(|(a, l)| a == anchor && *l == layer),
        }
    }
}

/// Solver configuration shared by all regimes.
#[derive(Debug, Clone)]
pub struct SolveSpec {
    pub regime: Regime,
    pub observations: Observations,
    /// Horizon (finite), inter-observation period (infinite periodic), or an
    /// optional override of the computed bound (indefinite regimes).
    pub horizon: Option<f64>,
    /// Discount rate, required for the infinite-periodic regime.
    pub beta: Option<f64>,
    pub anchor: Anchor,
    pub tol: f64,
    pub max_iters: usize,
    /// Pin the marching step instead of deriving it from the CFL bound; must
    /// still satisfy the bound and divide the horizon evenly.
    pub explicit_dt: Option<f64>,
    pub storage: StoragePolicy,
}

impl SolveSpec {
    pub fn new(regime: Regime, anchor: Anchor) -> Self {
        Self {
            regime,
            observations: Observations::None,
            horizon: None,
            beta: None,
            anchor,
            tol: 1e-6,
            max_iters: 500,
            explicit_dt: None,
            storage: StoragePolicy::default(),
        }
    }
}

/// A fully assembled problem instance on one grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid2D,
    pub speed: SpeedField,
    pub chain: ModeChain,
    pub costs: CostBundle,
    pub spec: SolveSpec,
}

/// Identifies whose value function a stored field approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorKey {
    /// Anchored at an exactly observed mode.
    Mode(usize),
    /// Anchored at the problem's initial mode distribution.
    Distribution,
}

#[derive(Debug)]
pub struct FieldEntry {
    pub anchor: AnchorKey,
    pub layer: usize,
    pub field: TimeField,
    /// Contact set of the observation branch (1 where observing strictly
    /// beat continuing), on the field's time grid; QVI solves only.
    pub mask: Option<TimeField>,
}

/// Solver output: one field per (anchor, observation layer), plus iteration
/// diagnostics.
#[derive(Debug)]
pub struct SolveResult {
    pub entries: Vec<FieldEntry>,
    pub iterations_used: usize,
    pub residual_history: Vec<f64>,
    pub horizon_used: f64,
    pub dt: f64,
    pub converged: bool,
}

impl SolveResult {
    pub fn field(&self, anchor: AnchorKey, layer: usize) -> Option<&TimeField> {
        self.entries
            .iter()
            .find(|e| e.anchor == anchor && e.layer == layer)
            .map(|e| &e.field)
    }

    /// Observation-branch contact mask for one field, when the scheme has one.
    pub fn mask(&self, anchor: AnchorKey, layer: usize) -> Option<&TimeField> {
        self.entries
            .iter()
            .find(|e| e.anchor == anchor && e.layer == layer)
            .and_then(|e| e.mask.as_ref())
    }

    /// Per-mode time-zero slices of one layer, in mode order.
    pub fn slice0s(&self, layer: usize, modes: usize) -> Option<Vec<&GridSlice>> {
        let mut out = Vec::with_capacity(modes);
        for m in 0..modes {
            out.push(self.field(AnchorKey::Mode(m), layer)?.slice0());
        }
        Some(out)
    }

    pub fn layers(&self) -> usize {
        self.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }

    /// The spec'd non-convergence error, for callers that need a hard stop.
    pub fn require_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations_used,
                last: self.residual_history.last().copied().unwrap_or(f64::NAN),
                residual_history: self.residual_history.clone(),
            })
        }
    }
}

/// Dispatch on the spec's regime and observation scheme.
pub fn solve(problem: &Problem) -> Result<SolveResult> {
    let spec = &problem.spec;
    match (spec.regime, &spec.observations) {
        (Regime::Finite, Observations::None) => solve_finite_no_obs(problem, &spec.anchor),
        (Regime::Finite, Observations::Scheduled(_)) => solve_finite_scheduled(problem),
        (Regime::InfinitePeriodic, Observations::None) => solve_infinite_periodic(problem),
        (Regime::Indefinite, Observations::None) => solve_indefinite(problem, &spec.anchor),
        (Regime::Indefinite, Observations::Bounded(_)) => solve_indefinite_bounded_obs(problem),
        (Regime::Indefinite, Observations::Paid(_)) => solve_indefinite_paid_obs(problem),
        (Regime::RandomlyTerminated, _) => solve_randomly_terminated(problem),
        (regime, obs) => Err(Error::InvalidInput(format!(
            "unsupported regime/observation combination: {regime:?} with {}",
            match obs {
                Observations::None => "no observations",
                Observations::Scheduled(_) => "scheduled observations",
                Observations::Bounded(_) => "bounded observations",
                Observations::Paid(_) => "paid observations",
            }
        ))),
    }
}

/// Beliefs at every time slice `k = 0..=n_steps`, anchored at `q`.
pub(crate) fn belief_table(
    chain: &ModeChain,
    q: &[f64],
    n_steps: usize,
    dt: f64,
    conditioned: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let t = k as f64 * dt;
        out.push(if conditioned {
            chain.conditioned(q, t)?
        } else {
            chain.propagate(q, t)?
        });
    }
    Ok(out)
}

/// `(K_min, K_max, psi_max, phi_max)` over non-obstacle gridpoints.
pub fn cost_bounds(problem: &Problem) -> (f64, f64, f64, f64) {
    let e = cost_extremes(problem);
    (e.k_min, e.k_max, e.psi_max, e.phi_max)
}

/// Extremes of the running and terminal cost fields over non-obstacle points.
pub(crate) struct CostExtremes {
    pub k_min: f64,
    pub k_max: f64,
    pub psi_max: f64,
    pub phi_max: f64,
}

pub(crate) fn cost_extremes(problem: &Problem) -> CostExtremes {
    let grid = &problem.grid;
    let mut k_min = f64::INFINITY;
    let mut k_max = f64::NEG_INFINITY;
    let mut psi_max = 0.0_f64;
    let mut phi_max = 0.0_f64;
    for jy in 0..grid.n() {
        for ix in 0..grid.n() {
            if grid.kind(ix, jy) == PointKind::Obstacle {
                continue;
            }
            for field in &problem.costs.running {
                let v = field.at(ix, jy);
                k_min = k_min.min(v);
                k_max = k_max.max(v);
            }
            for field in &problem.costs.terminal {
                psi_max = psi_max.max(field.at(ix, jy));
            }
            if let Some(phi) = &problem.costs.premature {
                for field in phi {
                    phi_max = phi_max.max(field.at(ix, jy));
                }
            }
        }
    }
    CostExtremes {
        k_min,
        k_max,
        psi_max,
        phi_max,
    }
}

/// Horizon for indefinite regimes: the user override when given, otherwise
/// the minimum-time bound `z_max K_max / K_min + psi_max / K_min`, padded so
/// the numerical-viscosity band seeded by the truncated terminal condition
/// has fully decayed by the time slices of interest.
pub(crate) fn indefinite_horizon(problem: &Problem) -> Result<f64> {
    if let Some(t) = problem.spec.horizon {
        if !(t > 0.0) {
            return Err(Error::InvalidInput(format!(
                "horizon override must be positive, got {t}"
            )));
        }
        return Ok(t);
    }
    let ext = cost_extremes(problem);
    if !(ext.k_min > 0.0) {
        return Err(Error::NonPositiveRunningCost(ext.k_min));
    }
    let z = solve_min_time(&problem.grid, &problem.speed)?;
    let bound = horizon_bound(&z, ext.k_min, ext.k_max, ext.psi_max)?;
    let dt_max = problem.grid.h() / (std::f64::consts::SQRT_2 * problem.speed.f_max());
    Ok(bound * 1.02 + 60.0 * dt_max)
}

/// Headroom on a-priori value bounds so exact-arithmetic equalities are not
/// misclassified as contamination.
pub(crate) fn padded_cap(raw: f64) -> f64 {
    raw * (1.0 + 1e-9) + 1e-9
}

/// Pointwise supersolution bound for exit-time regimes: running time-optimally
/// to the target costs at most `z(x) K_max` plus the worst terminal charge.
/// Unreachable points keep the sentinel.
pub(crate) fn supersolution_cap(problem: &Problem, ext: &CostExtremes) -> Result<GridSlice> {
    let z = solve_min_time(&problem.grid, &problem.speed)?;
    let worst_end = ext.psi_max.max(ext.phi_max);
    let n = problem.grid.n();
    let mut cap = GridSlice::constant(n, crate::grid::INF_SENTINEL);
    for jy in 0..n {
        for ix in 0..n {
            let zv = z.at(ix, jy);
            if zv < crate::grid::INF_SENTINEL {
                *cap.at_mut(ix, jy) = padded_cap(zv * ext.k_max + worst_end);
            }
        }
    }
    Ok(cap)
}

/// Marching step and slice count for a sweep of length `t_end`, honoring an
/// explicit dt when the spec pins one.
pub(crate) fn timestep(problem: &Problem, t_end: f64, extra_rate: f64) -> Result<(f64, usize)> {
    match problem.spec.explicit_dt {
        None => cfl_timestep(&problem.grid, &problem.speed, t_end, extra_rate),
        Some(dt) => {
            let bound = 1.0
                / (std::f64::consts::SQRT_2 * problem.speed.f_max() / problem.grid.h()
                    + extra_rate);
            if dt > bound * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "explicit dt {dt} violates the CFL bound {bound}"
                )));
            }
            let n = (t_end / dt).round();
            if n < 1.0 || ((t_end / dt) - n).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "explicit dt {dt} must divide the horizon {t_end} evenly"
                )));
            }
            Ok((t_end / n, n as usize))
        }
    }
}

/// Per-mode basis belief.
pub(crate) fn basis(m: usize, modes: usize) -> Vec<f64> {
    let mut e = vec![0.0; modes];
    e[m] = 1.0;
    e
}
