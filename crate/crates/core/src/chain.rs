//! Continuous-time Markov chain mathematics for the mode process: belief
//! propagation by matrix exponential, stationary distributions,
//! survival-conditioned beliefs, belief-weighted expected costs, and exact
//! sample paths.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently.

use crate::error::{Error, Result};
use crate::grid::{GridSlice, INF_SENTINEL};
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;

/// Row-sum violations of the rate matrix up to this size are repaired by
/// adjusting the diagonal; anything larger is rejected.
const ROW_SUM_REPAIR: f64 = 1e-12;

/// Belief drift above this size before renormalization is logged as a warning.
const DRIFT_WARN: f64 = 1e-8;

/// The mode process: `M` modes, an `M x M` rate matrix with zero row sums,
/// and optional per-mode termination rates.
#[derive(Debug, Clone)]
pub struct ModeChain {
    m: usize,
    lambda: DMatrix<f64>,
    gamma: Option<Vec<f64>>,
}

impl ModeChain {
    pub fn new(lambda: Vec<Vec<f64>>, gamma: Option<Vec<f64>>) -> Result<Self> {
        let m = lambda.len();
        if m == 0 {
            return Err(Error::InvalidInput("rate matrix must be non-empty".into()));
        }
        if lambda.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidInput(format!(
                "rate matrix must be square ({m} rows)"
            )));
        }
        let mut mat = DMatrix::zeros(m, m);
        for (i, row) in lambda.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite rate at ({i}, {j})"
                    )));
                }
                if i != j && v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "off-diagonal rate lambda[{i}][{j}] = {v} must be nonnegative"
                    )));
                }
                mat[(i, j)] = v;
            }
        }
        for i in 0..m {
            let row_sum: f64 = (0..m).map(|j| mat[(i, j)]).sum();
            if row_sum.abs() > ROW_SUM_REPAIR {
                return Err(Error::InvalidInput(format!(
                    "row {i} of the rate matrix sums to {row_sum:.3e} (must be 0 within {ROW_SUM_REPAIR:.0e})"
                )));
            }
            mat[(i, i)] -= row_sum;
        }
        if let Some(g) = &gamma {
            if g.len() != m {
                return Err(Error::InvalidInput(format!(
                    "termination rates must have length {m}, got {}",
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "termination rates must be nonnegative, got {bad}"
                )));
            }
        }
        Ok(Self {
            m,
            lambda: mat,
            gamma,
        })
    }

    pub fn modes(&self) -> usize {
        self.m
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.lambda[(i, j)]
    }

    pub fn gamma(&self) -> Option<&[f64]> {
        self.gamma.as_deref()
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma
            .as_ref()
            .map(|g| g.iter().copied().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    /// Largest total exit rate `max_i sum_{j != i} lambda_ij`, the explicit
    /// coupling rate in fully-observed solves.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.m)
            .map(|i| -self.lambda[(i, i)])
            .fold(0.0, f64::max)
    }

    pub fn has_switching(&self) -> bool {
        self.max_exit_rate() > 0.0
    }

    fn check_simplex(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.m {
            return Err(Error::InvalidInput(format!(
                "belief must have length {}, got {}",
                self.m,
                q.len()
            )));
        }
        let sum: f64 = q.iter().sum();
        if q.iter().any(|v| *v < -1e-12 || *v > 1.0 + 1e-12) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "belief is not on the probability simplex (sum = {sum})"
            )));
        }
        Ok(())
    }

    fn normalized(raw: RowDVector<f64>, context: &str) -> Vec<f64> {
        let mut v: Vec<f64> = raw.iter().map(|x| x.max(0.0)).collect();
        let sum: f64 = v.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift > DRIFT_WARN {
            log::warn!("belief drift {drift:.3e} before renormalization in {context}");
        }
        for x in &mut v {
            *x /= sum;
        }
        v
    }

    /// Belief after an unobserved interval: `q * exp(t * Lambda)`,
    /// renormalized to absorb rounding drift.
    pub fn propagate(&self, q: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_simplex(q)?;
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "propagation time must be nonnegative, got {t}"
            )));
        }
        let e = (self.lambda.clone() * t).exp();
        let q_row = RowDVector::from_row_slice(q);
        Ok(Self::normalized(q_row * e, "propagate"))
    }

    /// Belief conditioned on survival to time `t` under termination rates
    /// `gamma`: `normalize(q * exp(t (Lambda - diag(gamma))))`. Surviving
    /// sub-population proportions come from a pure death process with mixing.
    pub fn conditioned(&self, q: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_simplex(q)?;
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "propagation time must be nonnegative, got {t}"
            )));
        }
        let gamma = match &self.gamma {
            Some(g) => g,
            None => return self.propagate(q, t),
        };
        let mut killed = self.lambda.clone();
        for i in 0..self.m {
            killed[(i, i)] -= gamma[i];
        }
        let e = (killed * t).exp();
        let r = RowDVector::from_row_slice(q) * e;
        let mass: f64 = r.iter().sum();
        if !(mass > 1e-300) {
            return Err(Error::SurvivalUnderflow { mass });
        }
        // Same normalization path as `propagate`, so a zero gamma vector
        // reproduces it bit for bit.
        let mut v: Vec<f64> = r.iter().map(|x| x.max(0.0)).collect();
        let sum: f64 = v.iter().sum();
        for x in &mut v {
            *x /= sum;
        }
        Ok(v)
    }

    /// Fixed-step RK4 integration of the nonlinear survival-conditioned
    /// belief ODE
    /// `b_i' = sum_{j != i} (lambda_ji b_j - lambda_ij b_i)
    ///         + sum_j b_j (gamma_j - gamma_i) b_i`,
    /// starting from `b(0) = q`. Verification oracle only; the closed form
    /// in [`ModeChain::conditioned`] is the production path.
    pub fn conditioned_ode_oracle(&self, q: &[f64], t: f64, steps: usize) -> Result<Vec<f64>> {
        self.check_simplex(q)?;
        if steps == 0 {
            return Err(Error::InvalidInput("oracle needs at least one step".into()));
        }
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "integration time must be nonnegative, got {t}"
            )));
        }
        let zeros = vec![0.0; self.m];
        let gamma: &[f64] = self.gamma.as_deref().unwrap_or(&zeros);
        let deriv = |b: &[f64]| -> Vec<f64> {
            // The full quadratic form conserves the coordinate sum exactly;
            // replacing sum(b_j) by 1 would make rounding drift in the sum
            // grow like exp(kill * t).
            let kill: f64 = b.iter().zip(gamma).map(|(bj, gj)| bj * gj).sum();
            let total: f64 = b.iter().sum();
            (0..self.m)
                .map(|i| {
                    let mix: f64 = (0..self.m)
                        .filter(|&j| j != i)
                        .map(|j| self.lambda[(j, i)] * b[j] - self.lambda[(i, j)] * b[i])
                        .sum();
                    mix + (kill - gamma[i] * total) * b[i]
                })
                .collect()
        };
        let h = t / steps as f64;
        let mut b = q.to_vec();
        for _ in 0..steps {
            let k1 = deriv(&b);
            let b2: Vec<f64> = b.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
            let k2 = deriv(&b2);
            let b3: Vec<f64> = b.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
            let k3 = deriv(&b3);
            let b4: Vec<f64> = b.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
            let k4 = deriv(&b4);
            for i in 0..self.m {
                b[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Ok(b)
    }

    /// Stationary distribution `q_s` with `q_s * Lambda = 0`. Requires an
    /// irreducible rate graph; otherwise the distribution is not unique and
    /// the call is rejected.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        if self.m == 1 {
            return Ok(vec![1.0]);
        }
        if !self.strongly_connected() {
            return Err(Error::ReducibleChain);
        }
        // Solve Lambda^T x = 0 with the last equation replaced by sum(x) = 1.
        let mut a = self.lambda.transpose();
        for j in 0..self.m {
            a[(self.m - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(self.m);
        rhs[self.m - 1] = 1.0;
        let lu = a.lu();
        let mut q = lu
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidInput("singular stationary system".into()))?;
        for x in q.iter_mut() {
            *x = x.max(0.0);
        }
        let sum: f64 = q.iter().sum();
        for x in q.iter_mut() {
            *x /= sum;
        }
        // Polish with uniformized power steps if the direct solve left residual.
        let sigma = self.max_exit_rate() * 2.0 + 1.0;
        let mut qv: Vec<f64> = q.iter().copied().collect();
        for _ in 0..200 {
            if self.stationary_residual(&qv) <= 1e-13 {
                break;
            }
            let mut next = vec![0.0; self.m];
            for (i, item) in next.iter_mut().enumerate() {
                let mut acc = qv[i];
                for j in 0..self.m {
                    acc += qv[j] * self.lambda[(j, i)] / sigma;
                }
                *item = acc.max(0.0);
            }
            let s: f64 = next.iter().sum();
            for x in &mut next {
                *x /= s;
            }
            qv = next;
        }
        let residual = self.stationary_residual(&qv);
        if residual > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "stationary solve residual {residual:.3e} exceeds 1e-10"
            )));
        }
        Ok(qv)
    }

    fn stationary_residual(&self, q: &[f64]) -> f64 {
        (0..self.m)
            .map(|j| {
                (0..self.m)
                    .map(|i| q[i] * self.lambda[(i, j)])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    fn strongly_connected(&self) -> bool {
        let reach = |forward: bool| -> usize {
            let mut seen = vec![false; self.m];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(i) = stack.pop() {
                for j in 0..self.m {
                    let edge = if forward {
                        self.lambda[(i, j)]
                    } else {
                        self.lambda[(j, i)]
                    };
                    if i != j && edge > 0.0 && !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
            count
        };
        reach(true) == self.m && reach(false) == self.m
    }

    /// Exact CTMC sample path up to `t_end`: holding times are exponential
    /// with the mode's total exit rate, the next mode is drawn proportionally
    /// to the outgoing rates. Returns `(switch time, new mode)` pairs.
    pub fn sample_path(
        &self,
        initial_mode: usize,
        t_end: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<(f64, usize)>> {
        if initial_mode >= self.m {
            return Err(Error::InvalidInput(format!(
                "initial mode {initial_mode} out of range (M = {})",
                self.m
            )));
        }
        if !(t_end >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "t_end must be nonnegative, got {t_end}"
            )));
        }
        let mut switches = Vec::new();
        let mut mode = initial_mode;
        let mut t = 0.0;
        loop {
            let exit = -self.lambda[(mode, mode)];
            if exit <= 0.0 {
                break;
            }
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            t += -u.ln() / exit;
            if t >= t_end {
                break;
            }
            let mut draw = rng.gen_range(0.0..exit);
            let mut next = mode;
            for j in 0..self.m {
                if j == mode {
                    continue;
                }
                let r = self.lambda[(mode, j)];
                if draw < r {
                    next = j;
                    break;
                }
                draw -= r;
            }
            if next == mode {
                // Rounding pushed the draw past the last positive rate.
                next = (0..self.m)
                    .rfind(|&j| j != mode && self.lambda[(mode, j)] > 0.0)
                    .unwrap_or(mode);
            }
            switches.push((t, next));
            mode = next;
        }
        Ok(switches)
    }
}

/// Which anchor the belief clock is measured from.
#[derive(Debug, Clone, PartialEq)]
pub enum Anchor {
    /// Last exactly observed mode.
    Mode(usize),
    /// Initial distribution over modes (before any observation).
    Distribution(Vec<f64>),
}

impl Anchor {
    pub fn as_belief(&self, m: usize) -> Vec<f64> {
        match self {
            Anchor::Mode(i) => {
                let mut b = vec![0.0; m];
                b[*i] = 1.0;
                b
            }
            Anchor::Distribution(q) => q.clone(),
        }
    }
}

/// Probability distribution over modes together with its anchor bookkeeping.
#[derive(Debug, Clone)]
pub struct Belief {
    pub b: Vec<f64>,
    pub t_since_anchor: f64,
    pub anchor: Anchor,
}

impl Belief {
    pub fn at_anchor(anchor: Anchor, m: usize) -> Self {
        Self {
            b: anchor.as_belief(m),
            t_since_anchor: 0.0,
            anchor,
        }
    }

    /// Advance the belief clock, re-deriving the belief from the anchor so no
    /// integration drift accumulates. Uses the survival-conditioned form when
    /// `conditioned` is set.
    pub fn advance(&mut self, chain: &ModeChain, dt: f64, conditioned: bool) -> Result<()> {
        self.t_since_anchor += dt;
        let q = self.anchor.as_belief(chain.modes());
        self.b = if conditioned {
            chain.conditioned(&q, self.t_since_anchor)?
        } else {
            chain.propagate(&q, self.t_since_anchor)?
        };
        Ok(())
    }
}

/// Per-mode cost fields on a shared grid.
#[derive(Debug, Clone)]
pub struct CostBundle {
    /// Running cost per mode (cost / time).
    pub running: Vec<GridSlice>,
    /// Terminal cost per mode.
    pub terminal: Vec<GridSlice>,
    /// Premature-termination cost per mode, present in randomly-terminated
    /// problems.
    pub premature: Option<Vec<GridSlice>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Running,
    Terminal,
    Premature,
}

impl CostBundle {
    pub fn fields(&self, which: CostKind) -> Result<&[GridSlice]> {
        match which {
            CostKind::Running => Ok(&self.running),
            CostKind::Terminal => Ok(&self.terminal),
            CostKind::Premature => self
                .premature
                .as_deref()
                .ok_or(Error::MissingField("premature-termination cost (phi)")),
        }
    }

    /// Belief-weighted expected cost at one gridpoint: `sum_n b_n field_n(x)`.
    pub fn expected_cost(&self, b: &[f64], which: CostKind, ix: usize, jy: usize) -> Result<f64> {
        let fields = self.fields(which)?;
        Ok(fields.iter().zip(b).map(|(f, w)| w * f.at(ix, jy)).sum())
    }
}

/// Pointwise belief-weighted combination of per-mode slices. Any combination
/// that touches a sentinel is itself the sentinel.
pub fn weighted_slice(slices: &[&GridSlice], weights: &[f64]) -> GridSlice {
    assert_eq!(slices.len(), weights.len());
    assert!(!slices.is_empty());
    let n = slices[0].n();
    let len = n * n;
    let mut out = vec![0.0; len];
    for (idx, item) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut hit_sentinel = false;
        for (s, w) in slices.iter().zip(weights) {
            let v = s.data()[idx];
            if v >= INF_SENTINEL {
                hit_sentinel = true;
                break;
            }
            acc += w * v;
        }
        *item = if hit_sentinel { INF_SENTINEL } else { acc };
    }
    GridSlice::from_vec(n, out)
}

/// Expected cost-to-go if an observation were taken a time `t` after anchoring
/// in `anchor_mode`: the belief-weighted combination of the modes' time-zero
/// value slices.
pub fn post_observation_value(
    values_at_zero: &[&GridSlice],
    chain: &ModeChain,
    anchor_mode: usize,
    t: f64,
    conditioned: bool,
) -> Result<GridSlice> {
    if values_at_zero.len() != chain.modes() {
        return Err(Error::InvalidInput(format!(
            "need one slice per mode ({}), got {}",
            chain.modes(),
            values_at_zero.len()
        )));
    }
    let n = values_at_zero[0].n();
    if values_at_zero.iter().any(|s| s.n() != n) {
        return Err(Error::InvalidInput(
            "value slices must share one grid shape".into(),
        ));
    }
    let mut e = vec![0.0; chain.modes()];
    e[anchor_mode] = 1.0;
    let b = if conditioned {
        chain.conditioned(&e, t)?
    } else {
        chain.propagate(&e, t)?
    };
    Ok(weighted_slice(values_at_zero, &b))
}
