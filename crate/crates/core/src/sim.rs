//! Policy extraction and trajectory simulation: descend the value field,
//! trigger on-demand observations where the observation branch of the
//! variational inequality is active, sample mode switches and premature
//! terminations, and Monte Carlo-average realized costs.

use crate::chain::Anchor;
use crate::error::{Error, Result};
use crate::grid::{TimeField, INF_SENTINEL};
use crate::solver::{cost_bounds, AnchorKey, Observations, Problem, Regime, SolveResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Where a policy lookup reads its value: one field of a solve, at a position
/// and a time since the last observation.
pub struct PolicyQuery<'a> {
    pub values: &'a SolveResult,
    pub anchor: AnchorKey,
    pub layer: usize,
    pub position: (f64, f64),
    pub t: f64,
}

/// Negated normalized gradient of the interpolated value at the query point.
/// The gradient is the cell-local gradient of the bilinear interpolant,
/// time-interpolated linearly. Flat or sentinel-contaminated cells are
/// reported as degenerate; the tracer applies its tie-break instead.
pub fn policy_direction(query: &PolicyQuery<'_>, h: f64, eps_grad: f64) -> Result<(f64, f64)> {
    let field = query
        .values
        .field(query.anchor, query.layer)
        .ok_or_else(|| Error::InvalidInput("no field for the requested anchor/layer".into()))?;
    let (x, y) = query.position;
    gradient_direction(field, h, x, y, query.t, eps_grad)
}

fn gradient_direction(
    field: &TimeField,
    h: f64,
    x: f64,
    y: f64,
    t: f64,
    eps_grad: f64,
) -> Result<(f64, f64)> {
    // Centered differences of the bilinear interpolant at half-cell offsets,
    // one-sided where the domain edge clamps a sample.
    let d = 0.5 * h;
    let xp = (x + d).min(1.0);
    let xm = (x - d).max(0.0);
    let yp = (y + d).min(1.0);
    let ym = (y - d).max(0.0);
    let vxp = field.sample(xp, y, t);
    let vxm = field.sample(xm, y, t);
    let vyp = field.sample(x, yp, t);
    let vym = field.sample(x, ym, t);
    if vxp >= INF_SENTINEL || vxm >= INF_SENTINEL || vyp >= INF_SENTINEL || vym >= INF_SENTINEL {
        return Err(Error::DegenerateGradient { x, y });
    }
    let gx = (vxp - vxm) / (xp - xm);
    let gy = (vyp - vym) / (yp - ym);
    let norm = (gx * gx + gy * gy).sqrt();
    if norm < eps_grad {
        return Err(Error::DegenerateGradient { x, y });
    }
    Ok((-gx / norm, -gy / norm))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    ModeSwitch {
        time: f64,
        from: usize,
        to: usize,
    },
    Observation {
        time: f64,
        observed_mode: usize,
        cost_paid: f64,
    },
    PrematureTermination {
        time: f64,
        mode: usize,
    },
    GoalReached {
        time: f64,
    },
}

impl SimEvent {
    pub fn time(&self) -> f64 {
        match self {
            SimEvent::ModeSwitch { time, .. }
            | SimEvent::Observation { time, .. }
            | SimEvent::PrematureTermination { time, .. }
            | SimEvent::GoalReached { time } => *time,
        }
    }
}

/// One realized trajectory: path samples, events, and the accrued cost.
/// Deterministic traces accrue belief-expected costs; stochastic traces
/// accrue the sampled mode's costs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTrace {
    /// `(time, x, y)` samples; consecutive samples bound one accrual segment.
    pub path: Vec<(f64, f64, f64)>,
    pub events: Vec<SimEvent>,
    pub realized_cost: f64,
    pub seed: u64,
    pub stochastic: bool,
    /// Sampled true initial mode (stochastic runs only).
    pub initial_mode: Option<usize>,
    /// Hit the solved horizon without terminating.
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceConfig {
    pub start: (f64, f64),
    pub seed: u64,
    /// Sample true mode switches and premature terminations; observations
    /// reveal the sampled mode. When off, observations replay the scripted
    /// sequence and costs are belief-expected.
    pub stochastic: bool,
    /// Modes revealed by successive observations in deterministic replays.
    pub scripted_observations: Vec<usize>,
    /// Stop time for non-terminating regimes (finite defaults to the
    /// horizon, infinite-periodic to four periods).
    pub max_time: Option<f64>,
}

impl TraceConfig {
    pub fn new(start: (f64, f64), seed: u64) -> Self {
        Self {
            start,
            seed,
            stochastic: false,
            scripted_observations: Vec::new(),
            max_time: None,
        }
    }
}

/// An observation can fire only once the belief has moved at least this far
/// from a point mass; before that the branch tie carries no information.
const MIN_BELIEF_DRIFT: f64 = 0.02;

struct ModeTimeline {
    switches: Vec<(f64, usize)>,
    initial: usize,
}

impl ModeTimeline {
    fn mode_at(&self, t: f64) -> usize {
        let mut mode = self.initial;
        for (s, next) in &self.switches {
            if *s <= t {
                mode = *next;
            } else {
                break;
            }
        }
        mode
    }

    fn next_switch_after(&self, t: f64) -> Option<(f64, usize, usize)> {
        let mut prev = self.initial;
        for (s, next) in &self.switches {
            if *s > t {
                return Some((*s, prev, *next));
            }
            prev = *next;
        }
        None
    }
}

/// Follow the policy encoded by a solve from a starting point, producing the
/// realized path, its events, and the accrued cost.
pub fn trace_trajectory(
    problem: &Problem,
    solve: &SolveResult,
    cfg: &TraceConfig,
) -> Result<SimTrace> {
    Tracer::new(problem, solve, cfg)?.run()
}

struct Tracer<'a> {
    problem: &'a Problem,
    solve: &'a SolveResult,
    cfg: &'a TraceConfig,
    eps_grad: f64,
    eps_switch: f64,
    conditioned: bool,
}

struct Leg {
    anchor: Anchor,
    key: AnchorKey,
    layer: usize,
    t_since: f64,
}

impl<'a> Tracer<'a> {
    fn new(problem: &'a Problem, solve: &'a SolveResult, cfg: &'a TraceConfig) -> Result<Self> {
        let (x0, y0) = cfg.start;
        if !(0.0..=1.0).contains(&x0) || !(0.0..=1.0).contains(&y0) {
            return Err(Error::InvalidInput(format!(
                "start ({x0}, {y0}) outside the unit square"
            )));
        }
        let (_, k_max, _, _) = cost_bounds(problem);
        let h = problem.grid.h();
        Ok(Self {
            problem,
            solve,
            cfg,
            eps_grad: 1e-9 * (k_max * solve.horizon_used / h),
            eps_switch: 2.0 * h * k_max,
            conditioned: problem.spec.regime == Regime::RandomlyTerminated,
        })
    }

    fn belief(&self, anchor: &Anchor, dt: f64) -> Vec<f64> {
        let q = anchor.as_belief(self.problem.chain.modes());
        let res = if self.conditioned {
            self.problem.chain.conditioned(&q, dt)
        } else {
            self.problem.chain.propagate(&q, dt)
        };
        res.unwrap_or(q)
    }

    fn run(&self) -> Result<SimTrace> {
        let problem = self.problem;
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let leg_limit = self.solve.horizon_used;
        let horizon = match problem.spec.regime {
            Regime::Finite => problem.spec.horizon.unwrap_or(leg_limit),
            Regime::InfinitePeriodic => cfg.max_time.unwrap_or(4.0 * leg_limit),
            _ => cfg.max_time.unwrap_or(f64::INFINITY),
        };

        let timeline = if cfg.stochastic {
            let initial = match &problem.spec.anchor {
                Anchor::Mode(m) => *m,
                Anchor::Distribution(q) => sample_categorical(q, &mut rng),
            };
            let t_max = if horizon.is_finite() {
                horizon
            } else {
                50.0 * leg_limit
            };
            Some(ModeTimeline {
                switches: problem.chain.sample_path(initial, t_max, &mut rng)?,
                initial,
            })
        } else {
            None
        };
        let termination = match (&timeline, problem.chain.gamma()) {
            (Some(tl), Some(gamma)) => {
                let t_max = if horizon.is_finite() {
                    horizon
                } else {
                    50.0 * leg_limit
                };
                sample_termination(tl, gamma, t_max, &mut rng)
            }
            _ => None,
        };

        let mut leg = Leg {
            key: match &problem.spec.anchor {
                Anchor::Mode(m) => AnchorKey::Mode(*m),
                Anchor::Distribution(_) => AnchorKey::Distribution,
            },
            anchor: problem.spec.anchor.clone(),
            layer: 0,
            t_since: 0.0,
        };
        let mut script = cfg.scripted_observations.iter().copied();
        let mut events: Vec<SimEvent> = Vec::new();
        let mut path = vec![(0.0, cfg.start.0, cfg.start.1)];
        let mut pos = cfg.start;
        let mut t = 0.0_f64;
        let mut cost = 0.0_f64;
        let mut armed = true;
        let mut diverged = false;

        let scheduled: Vec<f64> = match &problem.spec.observations {
            Observations::Scheduled(ts) => ts.clone(),
            _ => Vec::new(),
        };

        if self.in_target(pos) {
            events.push(SimEvent::GoalReached { time: 0.0 });
            cost += self.terminal_charge(&timeline, &leg, pos, t);
            return Ok(self.finish(path, events, cost, timeline, false));
        }

        'outer: loop {
            if t >= horizon - 1e-12 {
                break;
            }
            if leg.t_since > leg_limit + 1e-9 {
                diverged = true;
                break;
            }

            let f_here = problem.speed.sample(pos.0, pos.1).max(1e-9);
            let mut ds = 0.5 * problem.grid.h() / f_here;
            let mut forced_obs = false;
            if horizon.is_finite() && t + ds > horizon {
                ds = horizon - t;
            }
            if let Some(ts) = scheduled.get(leg.layer) {
                if t + ds >= ts - 1e-12 && t < *ts {
                    ds = ts - t;
                    forced_obs = true;
                }
            }
            let periodic_due = problem.spec.regime == Regime::InfinitePeriodic
                && leg.t_since + ds >= leg_limit - 1e-12;
            if periodic_due {
                ds = (leg_limit - leg.t_since).max(0.0);
                forced_obs = true;
            }

            if let Some(tl) = &timeline {
                if let Some((s, from, to)) = tl.next_switch_after(t) {
                    if s < t + ds - 1e-15 {
                        let part = s - t;
                        if part > 1e-15 {
                            let moved = self.advance(&leg, pos, part)?;
                            cost += self.segment_cost(&timeline, &leg, pos, moved, t, part);
                            pos = moved;
                            leg.t_since += part;
                            path.push((s, pos.0, pos.1));
                        }
                        t = s;
                        events.push(SimEvent::ModeSwitch { time: s, from, to });
                        if self.in_target(pos) {
                            events.push(SimEvent::GoalReached { time: t });
                            cost += self.terminal_charge(&timeline, &leg, pos, t);
                            break 'outer;
                        }
                        continue 'outer;
                    }
                }
            }
            if let Some(tr) = termination {
                if tr < t + ds - 1e-15 {
                    let part = tr - t;
                    if part > 1e-15 {
                        let moved = self.advance(&leg, pos, part)?;
                        cost += self.segment_cost(&timeline, &leg, pos, moved, t, part);
                        pos = moved;
                        path.push((tr, pos.0, pos.1));
                    }
                    t = tr;
                    let mode = timeline.as_ref().map(|tl| tl.mode_at(tr)).unwrap_or(0);
                    events.push(SimEvent::PrematureTermination { time: tr, mode });
                    cost += self.premature_charge(mode, pos);
                    break 'outer;
                }
            }

            if ds > 1e-15 {
                let moved = self.advance(&leg, pos, ds)?;
                cost += self.segment_cost(&timeline, &leg, pos, moved, t, ds);
                pos = moved;
                t += ds;
                leg.t_since += ds;
                path.push((t, pos.0, pos.1));
            }

            if self.in_target(pos) {
                events.push(SimEvent::GoalReached { time: t });
                cost += self.terminal_charge(&timeline, &leg, pos, t);
                break;
            }

            if forced_obs && t < horizon - 1e-12 {
                let observed = self.observe(&timeline, &mut script, t)?;
                events.push(SimEvent::Observation {
                    time: t,
                    observed_mode: observed,
                    cost_paid: 0.0,
                });
                let next_layer = match &problem.spec.observations {
                    Observations::Scheduled(ts) => (leg.layer + 1).min(ts.len()),
                    _ => leg.layer,
                };
                leg = Leg {
                    anchor: Anchor::Mode(observed),
                    key: AnchorKey::Mode(observed),
                    layer: next_layer,
                    t_since: 0.0,
                };
                armed = true;
                continue;
            }

            if let Some(gap) = self.branch_gap(&leg, pos, leg.t_since)? {
                if armed && gap >= -self.eps_switch {
                    let observed = self.observe(&timeline, &mut script, t)?;
                    let paid = match &problem.spec.observations {
                        Observations::Paid(c) => c.sample(pos.0, pos.1),
                        _ => 0.0,
                    };
                    cost += paid;
                    events.push(SimEvent::Observation {
                        time: t,
                        observed_mode: observed,
                        cost_paid: paid,
                    });
                    let next_layer = match &problem.spec.observations {
                        Observations::Bounded(_) => leg.layer + 1,
                        _ => leg.layer,
                    };
                    leg = Leg {
                        anchor: Anchor::Mode(observed),
                        key: AnchorKey::Mode(observed),
                        layer: next_layer,
                        t_since: 0.0,
                    };
                    armed = false;
                    continue;
                }
                if !armed && gap < -2.0 * self.eps_switch {
                    armed = true;
                }
            }
        }

        if problem.spec.regime == Regime::Finite && !diverged {
            let has_end = events
                .iter()
                .any(|e| matches!(e, SimEvent::GoalReached { .. }));
            if !has_end {
                cost += self.terminal_charge(&timeline, &leg, pos, t);
            }
        }
        if diverged {
            log::warn!("trajectory exceeded the solved horizon without terminating");
        }
        Ok(self.finish(path, events, cost, timeline, diverged))
    }

    fn finish(
        &self,
        path: Vec<(f64, f64, f64)>,
        events: Vec<SimEvent>,
        cost: f64,
        timeline: Option<ModeTimeline>,
        diverged: bool,
    ) -> SimTrace {
        SimTrace {
            path,
            events,
            realized_cost: cost,
            seed: self.cfg.seed,
            stochastic: self.cfg.stochastic,
            initial_mode: timeline.map(|tl| tl.initial),
            diverged,
        }
    }

    fn observe(
        &self,
        timeline: &Option<ModeTimeline>,
        script: &mut impl Iterator<Item = usize>,
        t: f64,
    ) -> Result<usize> {
        if let Some(tl) = timeline {
            return Ok(tl.mode_at(t));
        }
        script.next().ok_or_else(|| {
            Error::InvalidInput("deterministic replay ran out of scripted observations".into())
        })
    }

    /// Gap between continuing and observing: `V - Theta` (bounded) or
    /// `V - (C + Theta)` (paid); near zero means the observation branch is
    /// active. Right after an exact observation the two branches tie while
    /// the belief is still concentrated (observing again is harmless but
    /// worthless), so the trigger stays quiet until the belief has actually
    /// drifted.
    fn branch_gap(&self, leg: &Leg, pos: (f64, f64), t_since: f64) -> Result<Option<f64>> {
        let problem = self.problem;
        let (coupled_layer, surcharge) = match &problem.spec.observations {
            Observations::Bounded(l) => {
                if leg.layer >= *l {
                    return Ok(None);
                }
                (leg.layer + 1, 0.0)
            }
            Observations::Paid(c) => (leg.layer, c.sample(pos.0, pos.1)),
            _ => return Ok(None),
        };
        let field = self
            .solve
            .field(leg.key, leg.layer)
            .ok_or_else(|| Error::InvalidInput("missing field for current leg".into()))?;
        let v = field.sample(pos.0, pos.1, t_since);
        if v >= INF_SENTINEL {
            return Ok(None);
        }
        let b = self.belief(&leg.anchor, t_since);
        let max_b = b.iter().copied().fold(0.0, f64::max);
        if 1.0 - max_b < MIN_BELIEF_DRIFT {
            return Ok(None);
        }
        // The solver's contact mask is the authoritative trigger: observing
        // must have strictly beaten continuing at the surrounding gridpoints.
        if let Some(mask) = self.solve.mask(leg.key, leg.layer) {
            if mask.sample(pos.0, pos.1, t_since) < 0.5 {
                return Ok(None);
            }
        }
        let mut theta = 0.0;
        for (m, weight) in b.iter().enumerate() {
            let s0 = self
                .solve
                .field(AnchorKey::Mode(m), coupled_layer)
                .ok_or_else(|| Error::InvalidInput("missing coupled-layer field".into()))?
                .slice0();
            let vm = s0.sample(pos.0, pos.1);
            if vm >= INF_SENTINEL {
                return Ok(None);
            }
            theta += weight * vm;
        }
        Ok(Some(v - (surcharge + theta)))
    }

    /// One midpoint (RK2) step of length `ds` along the policy direction;
    /// degenerate gradients fall back to the steepest sampled neighbor, or
    /// hold position.
    fn advance(&self, leg: &Leg, pos: (f64, f64), ds: f64) -> Result<(f64, f64)> {
        let field = self
            .solve
            .field(leg.key, leg.layer)
            .ok_or_else(|| Error::InvalidInput("missing field for current leg".into()))?;
        let clamp = |p: (f64, f64)| (p.0.clamp(0.0, 1.0), p.1.clamp(0.0, 1.0));
        let Some(d1) = self.direction_or_tiebreak(field, pos, leg.t_since) else {
            return Ok(pos);
        };
        let f1 = self.problem.speed.sample(pos.0, pos.1);
        let mid = clamp((pos.0 + 0.5 * ds * f1 * d1.0, pos.1 + 0.5 * ds * f1 * d1.1));
        let d2 = self
            .direction_or_tiebreak(field, mid, leg.t_since + 0.5 * ds)
            .unwrap_or(d1);
        let f2 = self.problem.speed.sample(mid.0, mid.1);
        Ok(clamp((pos.0 + ds * f2 * d2.0, pos.1 + ds * f2 * d2.1)))
    }

    fn direction_or_tiebreak(
        &self,
        field: &TimeField,
        pos: (f64, f64),
        t: f64,
    ) -> Option<(f64, f64)> {
        let h = self.problem.grid.h();
        match gradient_direction(field, h, pos.0, pos.1, t, self.eps_grad) {
            Ok(d) => Some(d),
            Err(_) => {
                // Near the target the interpolation cell may touch sentinel
                // interior points; entering an adjacent target cell is always
                // the right move there.
                let v0 = field.sample(pos.0, pos.1, t);
                let mut best: Option<((f64, f64), f64)> = None;
                for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                    let p = (
                        (pos.0 + dx * h).clamp(0.0, 1.0),
                        (pos.1 + dy * h).clamp(0.0, 1.0),
                    );
                    if self.in_target(p) {
                        return Some((dx, dy));
                    }
                    let v = field.sample(p.0, p.1, t);
                    let beats = match best {
                        Some((_, bv)) => v < bv,
                        None => v < v0 - 1e-12,
                    };
                    if v < INF_SENTINEL && beats {
                        best = Some(((dx, dy), v));
                    }
                }
                best.map(|(d, _)| d)
            }
        }
    }

    fn in_target(&self, pos: (f64, f64)) -> bool {
        let grid = &self.problem.grid;
        let j = grid.subdivisions();
        let ix = ((pos.0 * j as f64).round() as usize).min(j);
        let jy = ((pos.1 * j as f64).round() as usize).min(j);
        grid.is_target(ix, jy)
    }

    /// Running cost over one segment by the midpoint rule; stochastic runs
    /// charge the sampled mode's field, deterministic replays the
    /// belief-expected one.
    fn segment_cost(
        &self,
        timeline: &Option<ModeTimeline>,
        leg: &Leg,
        from: (f64, f64),
        to: (f64, f64),
        t: f64,
        ds: f64,
    ) -> f64 {
        let mid = ((from.0 + to.0) / 2.0, (from.1 + to.1) / 2.0);
        let t_mid = t + ds / 2.0;
        let base = match timeline {
            Some(tl) => {
                let mode = tl.mode_at(t_mid);
                self.problem.costs.running[mode].sample(mid.0, mid.1)
            }
            None => {
                let b = self.belief(&leg.anchor, leg.t_since + ds / 2.0);
                b.iter()
                    .enumerate()
                    .map(|(m, w)| w * self.problem.costs.running[m].sample(mid.0, mid.1))
                    .sum()
            }
        };
        ds * base * self.discount_at(t_mid)
    }

    fn discount_at(&self, t: f64) -> f64 {
        match (self.problem.spec.regime, self.problem.spec.beta) {
            (Regime::InfinitePeriodic, Some(beta)) => (-beta * t).exp(),
            _ => 1.0,
        }
    }

    fn terminal_charge(
        &self,
        timeline: &Option<ModeTimeline>,
        leg: &Leg,
        pos: (f64, f64),
        t: f64,
    ) -> f64 {
        let base = match timeline {
            Some(tl) => {
                let mode = tl.mode_at(t);
                self.problem.costs.terminal[mode].sample(pos.0, pos.1)
            }
            None => {
                let b = self.belief(&leg.anchor, leg.t_since);
                b.iter()
                    .enumerate()
                    .map(|(m, w)| w * self.problem.costs.terminal[m].sample(pos.0, pos.1))
                    .sum()
            }
        };
        base * self.discount_at(t)
    }

    fn premature_charge(&self, mode: usize, pos: (f64, f64)) -> f64 {
        match &self.problem.costs.premature {
            Some(phi) => phi[mode].sample(pos.0, pos.1),
            None => self.problem.costs.terminal[mode].sample(pos.0, pos.1),
        }
    }
}

fn sample_categorical(q: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut draw: f64 = rng.gen_range(0.0..1.0);
    for (i, p) in q.iter().enumerate() {
        if draw < *p {
            return i;
        }
        draw -= p;
    }
    q.len() - 1
}

/// Exact first termination time along a piecewise-constant mode timeline
/// with per-mode exponential rates.
fn sample_termination(
    timeline: &ModeTimeline,
    gamma: &[f64],
    t_max: f64,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    let mut t = 0.0;
    let mut mode = timeline.initial;
    let mut segments: Vec<(f64, usize)> = timeline.switches.clone();
    segments.push((t_max, mode));
    for (end, next) in segments {
        let span = end - t;
        if span > 0.0 && gamma[mode] > 0.0 {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let wait = -u.ln() / gamma[mode];
            if wait < span {
                return Some(t + wait);
            }
        }
        t = end;
        mode = next;
    }
    None
}

/// Recompute a trace's accrued cost from its serialized path and events,
/// using the same midpoint accrual rules as the tracer.
pub fn reconstruct_cost(problem: &Problem, trace: &SimTrace) -> f64 {
    let modes = problem.chain.modes();
    let conditioned = problem.spec.regime == Regime::RandomlyTerminated;
    let discount = |t: f64| match (problem.spec.regime, problem.spec.beta) {
        (Regime::InfinitePeriodic, Some(beta)) => (-beta * t).exp(),
        _ => 1.0,
    };
    let belief = |anchor: &Anchor, dt: f64| -> Vec<f64> {
        let q = anchor.as_belief(modes);
        let res = if conditioned {
            problem.chain.conditioned(&q, dt)
        } else {
            problem.chain.propagate(&q, dt)
        };
        res.unwrap_or(q)
    };

    let mut cost = 0.0;
    let mut anchor = problem.spec.anchor.clone();
    let mut anchor_time = 0.0;
    let mut mode_now = trace.initial_mode.unwrap_or(0);
    let mut pending = trace.events.iter().peekable();

    for w in trace.path.windows(2) {
        let (t0, x0, y0) = w[0];
        let (t1, x1, y1) = w[1];
        while let Some(e) = pending.peek() {
            if e.time() <= t0 + 1e-12 {
                match e {
                    SimEvent::ModeSwitch { to, .. } => mode_now = *to,
                    SimEvent::Observation {
                        observed_mode,
                        cost_paid,
                        time,
                    } => {
                        cost += cost_paid;
                        anchor = Anchor::Mode(*observed_mode);
                        anchor_time = *time;
                    }
                    _ => {}
                }
                pending.next();
            } else {
                break;
            }
        }
        let ds = t1 - t0;
        if ds <= 0.0 {
            continue;
        }
        let mid = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let t_mid = (t0 + t1) / 2.0;
        let base = if trace.stochastic {
            problem.costs.running[mode_now].sample(mid.0, mid.1)
        } else {
            let b = belief(&anchor, t_mid - anchor_time);
            b.iter()
                .enumerate()
                .map(|(m, wgt)| wgt * problem.costs.running[m].sample(mid.0, mid.1))
                .sum()
        };
        cost += ds * base * discount(t_mid);
    }

    let last = *trace.path.last().unwrap();
    let end_pos = (last.1, last.2);
    // Trailing events at the final sample.
    for e in pending {
        match e {
            SimEvent::ModeSwitch { to, .. } => mode_now = *to,
            SimEvent::Observation {
                observed_mode,
                cost_paid,
                time,
            } => {
                cost += cost_paid;
                anchor = Anchor::Mode(*observed_mode);
                anchor_time = *time;
            }
            SimEvent::GoalReached { time } => {
                let base = if trace.stochastic {
                    problem.costs.terminal[mode_now].sample(end_pos.0, end_pos.1)
                } else {
                    let b = belief(&anchor, *time - anchor_time);
                    b.iter()
                        .enumerate()
                        .map(|(m, wgt)| {
                            wgt * problem.costs.terminal[m].sample(end_pos.0, end_pos.1)
                        })
                        .sum()
                };
                cost += base * discount(*time);
            }
            SimEvent::PrematureTermination { mode, .. } => {
                cost += match &problem.costs.premature {
                    Some(phi) => phi[*mode].sample(end_pos.0, end_pos.1),
                    None => problem.costs.terminal[*mode].sample(end_pos.0, end_pos.1),
                };
            }
        }
    }
    let terminated = trace.events.iter().any(|e| {
        matches!(
            e,
            SimEvent::GoalReached { .. } | SimEvent::PrematureTermination { .. }
        )
    });
    if problem.spec.regime == Regime::Finite && !terminated && !trace.diverged {
        let base = if trace.stochastic {
            problem.costs.terminal[mode_now].sample(end_pos.0, end_pos.1)
        } else {
            let b = belief(&anchor, last.0 - anchor_time);
            b.iter()
                .enumerate()
                .map(|(m, wgt)| wgt * problem.costs.terminal[m].sample(end_pos.0, end_pos.1))
                .sum()
        };
        cost += base * discount(last.0);
    }
    cost
}

/// Monte Carlo estimate of the expected realized cost under the policy.
#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub mean: f64,
    pub std_error: f64,
    pub runs: usize,
    pub diverged: usize,
}

pub fn mc_evaluate(
    problem: &Problem,
    solve: &SolveResult,
    start: (f64, f64),
    n_runs: usize,
    seed: u64,
) -> Result<McSummary> {
    if n_runs == 0 {
        return Err(Error::InvalidInput("need at least one run".into()));
    }
    let results: Vec<Result<SimTrace>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut cfg = TraceConfig::new(start, derive_seed(seed, run as u64));
            cfg.stochastic = true;
            trace_trajectory(problem, solve, &cfg)
        })
        .collect();
    let mut costs = Vec::with_capacity(n_runs);
    let mut diverged = 0usize;
    for r in results {
        let trace = r?;
        if trace.diverged {
            diverged += 1;
        } else {
            costs.push(trace.realized_cost);
        }
    }
    if costs.is_empty() {
        return Err(Error::InvalidInput("all Monte Carlo runs diverged".into()));
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(McSummary {
        mean,
        std_error: (var / n).sqrt(),
        runs: costs.len(),
        diverged,
    })
}

/// Per-run seed derivation (splitmix64 step), so runs are independent and
/// reproducible regardless of scheduling.
pub fn derive_seed(base: u64, run: u64) -> u64 {
    let mut z = base ^ run.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
