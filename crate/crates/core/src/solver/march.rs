//! One backward sweep of the explicit upwind scheme over a time interval,
//! with optional observation branch, target-boundary treatment, and
//! zeroth-order termination term. Every solver is a composition of these
//! sweeps.
//!
//! Marching itself never caps values: slices near the truncated terminal
//! carry huge values that decay geometrically as the sweep proceeds, and
//! capping them would stall that decay. The cap is applied when a slice is
//! stored: anything above it is terminal-truncation contamination, not
//! information, and is reported as the sentinel.

use crate::chain::weighted_slice;
use crate::grid::{
    explicit_update, Grid2D, GridSlice, SpeedField, TimeField, ZerothOrder, INF_SENTINEL,
};

pub(crate) struct SweepObstacle<'a> {
    /// Time-zero value slices of the coupled layer, one per mode.
    pub slice0s: Vec<&'a GridSlice>,
    /// Added to the belief-weighted combination (observation price), if any.
    pub surcharge: Option<&'a GridSlice>,
}

pub(crate) struct SweepTermination<'a> {
    pub gamma: &'a [f64],
    pub phi: &'a [GridSlice],
}

pub(crate) struct Sweep<'a> {
    pub grid: &'a Grid2D,
    pub speed: &'a SpeedField,
    pub dt: f64,
    pub n_steps: usize,
    /// Belief at each slice `k = 0..=n_steps`.
    pub weights: &'a [Vec<f64>],
    /// Per-mode running-cost fields.
    pub running: &'a [GridSlice],
    /// Discount rate: scales the running cost by `exp(-beta t_k)`.
    pub discount: Option<f64>,
    /// Slice at `k = n_steps`.
    pub terminal: GridSlice,
    /// Per-mode terminal-cost fields for the viscosity-sense min applied on
    /// the target boundary; `None` for regimes without a target.
    pub boundary_psi: Option<&'a [GridSlice]>,
    /// Observation branch: pointwise min against the belief-weighted coupled
    /// slices (plus surcharge).
    pub obstacle: Option<SweepObstacle<'a>>,
    /// Mode-dependent termination rates and penalties.
    pub termination: Option<SweepTermination<'a>>,
    /// A priori bound on meaningful values; stored slices report anything
    /// above it as the sentinel.
    pub value_cap: f64,
    /// Pointwise supersolution bound (minimum time to target at maximal
    /// running cost plus the worst terminal charge). Marching takes the min
    /// with it, which keeps the terminal-truncation band identical across
    /// iteration passes.
    pub point_cap: Option<&'a GridSlice>,
    /// Store every `stride`-th slice (slice 0 and the terminal always kept).
    pub stride: usize,
    /// Contact-mask margin as a fraction of the per-step accrual `dt kbar`:
    /// the observation branch counts as active only where it beats the
    /// marching branch by more than scheme-accuracy noise.
    pub mask_margin: f64,
}

pub(crate) struct SweepOut {
    pub field: TimeField,
    /// Where the observation branch strictly won the pointwise min, stored on
    /// the same time grid as the field (1.0 inside the contact set). Present
    /// only for sweeps with an observation branch.
    pub mask: Option<TimeField>,
    /// Sup distance to `prev` over the stored slices, when supplied.
    pub residual: f64,
}

impl<'a> Sweep<'a> {
    /// March from the terminal slice down to `k = 0`. `prev` must be the
    /// output of an identically configured sweep (same stored times).
    pub fn run(self, prev: Option<&TimeField>) -> SweepOut {
        let n_steps = self.n_steps;
        let keep = |k: usize| k == 0 || k == n_steps || k % self.stride == 0;
        let mut stored: Vec<(usize, GridSlice)> = Vec::new();
        let mut stored_masks: Vec<(usize, GridSlice)> = Vec::new();
        let mut residual: f64 = 0.0;

        let mut store = |k: usize, slice: &GridSlice, residual: &mut f64| {
            let mut capped = slice.clone();
            for v in capped.data_mut() {
                if *v > self.value_cap {
                    *v = INF_SENTINEL;
                }
            }
            if let Some(prev) = prev {
                let t = k as f64 * self.dt;
                if let Some(i) = prev
                    .times()
                    .iter()
                    .position(|pt| (pt - t).abs() <= 0.5 * self.dt)
                {
                    *residual = residual.max(prev.slices()[i].sup_distance(&capped));
                }
            }
            stored.push((k, capped));
        };

        let mut current = self.terminal.clone();
        let n = self.grid.n();
        if keep(n_steps) {
            store(n_steps, &current, &mut residual);
            if self.obstacle.is_some() {
                stored_masks.push((n_steps, GridSlice::constant(n, 0.0)));
            }
        }

        for k in (1..=n_steps).rev() {
            let t_k = k as f64 * self.dt;
            let kbar = self.expected_running(k, t_k);
            let zeroth_parts = self.termination_parts(k);
            let zeroth = zeroth_parts
                .as_ref()
                .map(|(rate, reward)| ZerothOrder { rate, reward });
            let mut next = explicit_update(&current, self.grid, self.speed, &kbar, self.dt, zeroth);

            let mut mask = None;
            if let Some(obs) = &self.obstacle {
                let mut branch = weighted_slice(&obs.slice0s, &self.weights[k - 1]);
                if let Some(c) = obs.surcharge {
                    for (b, extra) in branch.data_mut().iter_mut().zip(c.data()) {
                        if *b < INF_SENTINEL {
                            *b += extra;
                        }
                    }
                }
                let mut won = GridSlice::constant(n, 0.0);
                for jy in 0..n {
                    for ix in 0..n {
                        if self.grid.is_sentinel_point(ix, jy) {
                            continue;
                        }
                        let o = branch.at(ix, jy);
                        let v = next.at_mut(ix, jy);
                        // Near-ties resolve to continuing: observing must
                        // beat the march by more than one step's accrual
                        // noise to count as the active branch.
                        let margin = self.mask_margin * self.dt * kbar.at(ix, jy).abs();
                        if o < INF_SENTINEL && *v < INF_SENTINEL && o < *v - margin {
                            *won.at_mut(ix, jy) = 1.0;
                        }
                        if o < *v {
                            *v = o;
                        }
                    }
                }
                mask = Some(won);
            }

            if let Some(psi) = self.boundary_psi {
                let w = &self.weights[k - 1];
                for idx in self.grid.target_boundary_indices() {
                    let bar: f64 = psi.iter().zip(w).map(|(f, wn)| wn * f.data()[idx]).sum();
                    let v = &mut next.data_mut()[idx];
                    if bar < *v {
                        *v = bar;
                    }
                }
            }

            if let Some(cap) = self.point_cap {
                let n = self.grid.n();
                for jy in 0..n {
                    for ix in 0..n {
                        if self.grid.is_sentinel_point(ix, jy) {
                            continue;
                        }
                        let c = cap.at(ix, jy);
                        let v = next.at_mut(ix, jy);
                        if c < *v {
                            *v = c;
                        }
                    }
                }
            }

            current = next;
            if keep(k - 1) {
                store(k - 1, &current, &mut residual);
                if let Some(m) = mask {
                    stored_masks.push((k - 1, m));
                }
            }
        }

        stored.sort_by_key(|(k, _)| *k);
        let ts: Vec<f64> = stored.iter().map(|(k, _)| *k as f64 * self.dt).collect();
        let slices = stored.into_iter().map(|(_, s)| s).collect();
        let mask = if self.obstacle.is_some() {
            stored_masks.sort_by_key(|(k, _)| *k);
            let mts = stored_masks
                .iter()
                .map(|(k, _)| *k as f64 * self.dt)
                .collect();
            let ms = stored_masks.into_iter().map(|(_, s)| s).collect();
            Some(TimeField::new(mts, ms))
        } else {
            None
        };
        SweepOut {
            field: TimeField::new(ts, slices),
            mask,
            residual,
        }
    }

    fn expected_running(&self, k: usize, t_k: f64) -> GridSlice {
        let w = &self.weights[k];
        let refs: Vec<&GridSlice> = self.running.iter().collect();
        match self.discount {
            None => weighted_slice(&refs, w),
            Some(beta) => {
                let factor = (-beta * t_k).exp();
                let scaled: Vec<f64> = w.iter().map(|x| x * factor).collect();
                weighted_slice(&refs, &scaled)
            }
        }
    }

    /// Zeroth-order inputs at slice `k`: rate `sum_n b_n gamma_n` and reward
    /// `sum_n b_n gamma_n phi_n / rate`.
    fn termination_parts(&self, k: usize) -> Option<(GridSlice, GridSlice)> {
        let term = self.termination.as_ref()?;
        let w = &self.weights[k];
        let rate: f64 = w.iter().zip(term.gamma).map(|(b, g)| b * g).sum();
        if rate <= 0.0 {
            return None;
        }
        let mix: Vec<f64> = w
            .iter()
            .zip(term.gamma)
            .map(|(b, g)| b * g / rate)
            .collect();
        let refs: Vec<&GridSlice> = term.phi.iter().collect();
        let reward = weighted_slice(&refs, &mix);
        Some((GridSlice::constant(reward.n(), rate), reward))
    }
}
