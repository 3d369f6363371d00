//! Scenario description format: a single JSON document naming the grid, the
//! mode chain, cost/speed fields (constants, Gaussian sums, or external
//! rasters), obstacle and target shapes, the solve regime, and simulation
//! defaults. Mode indices are zero-based everywhere.

use crate::chain::{Anchor, CostBundle, ModeChain};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridSlice, SpeedField};
use crate::solver::{Observations, Problem, Regime, SolveSpec, StoragePolicy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub grid: GridSpec,
    pub modes: Vec<ModeSpec>,
    pub lambda: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    pub speed: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broken_speed: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Shape>,
    pub regime: RegimeSpec,
    #[serde(default)]
    pub observations: ObservationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub initial_belief: BeliefSpec,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSpec>,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Subdivisions per axis; the grid has `(j + 1)^2 ` points.
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub cost: FieldSpec,
    #[serde(default = "zero_field")]
    pub psi: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<FieldSpec>,
}

fn zero_field() -> FieldSpec {
    FieldSpec::Constant(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSpec {
    Constant(f64),
    GaussianSum {
        #[serde(default)]
        base: f64,
        terms: Vec<GaussianTerm>,
    },
    Raster {
        path: String,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTerm {
    pub amp: f64,
    pub center: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    RasterMask {
        path: String,
        #[serde(default = "half")]
        threshold: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSpec {
    Finite,
    InfinitePeriodic,
    Indefinite,
    RandomlyTerminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSpec {
    #[default]
    None,
    Scheduled {
        times: Vec<f64>,
    },
    Bounded {
        count: usize,
    },
    Paid {
        cost: FieldSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefSpec {
    Mode(usize),
    Distribution(Vec<f64>),
    /// Stationary distribution of the rate matrix, resolved at build time.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub start: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scripted_observations: Vec<usize>,
    #[serde(default)]
    pub stochastic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time: Option<f64>,
}

/// Command-line overrides; they win over scenario-file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Parse and validate a scenario document. Validation failures are collected
/// exhaustively rather than reported one at a time.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| {
        Error::ScenarioInvalid(vec![format!(
            "schema violation at line {}, column {}: {e}",
            e.line(),
            e.column()
        )])
    })?;
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let m = self.modes.len();
        if self.grid.j < 2 {
            problems.push(format!("grid.j must be at least 2, got {}", self.grid.j));
        }
        if m == 0 {
            problems.push("at least one mode is required".into());
        }
        if self.lambda.len() != m || self.lambda.iter().any(|r| r.len() != m) {
            problems.push(format!(
                "lambda must be a {m}x{m} matrix matching the mode count"
            ));
        } else {
            for (i, row) in self.lambda.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if sum.abs() > 1e-12 {
                    problems.push(format!(
                        "lambda row {i} sums to {sum:.3e}; rows must sum to 0 within 1e-12"
                    ));
                }
                for (jx, v) in row.iter().enumerate() {
                    if i != jx && *v < 0.0 {
                        problems.push(format!("lambda[{i}][{jx}] = {v} must be nonnegative"));
                    }
                }
            }
        }
        if let Some(g) = &self.gamma {
            if g.len() != m {
                problems.push(format!(
                    "gamma must have one rate per mode ({m}), got {}",
                    g.len()
                ));
            }
            if g.iter().any(|v| !(*v >= 0.0)) {
                problems.push("gamma rates must be nonnegative".into());
            }
        }
        for (i, mode) in self.modes.iter().enumerate() {
            for (label, field) in [("cost", Some(&mode.cost)), ("psi", Some(&mode.psi))]
                .into_iter()
                .chain(std::iter::once(("phi", mode.phi.as_ref())))
            {
                if let Some(f) = field {
                    if let Err(msg) = f.check() {
                        problems.push(format!("mode {i} {label}: {msg}"));
                    }
                }
            }
        }
        if let Err(msg) = self.speed.check() {
            problems.push(format!("speed: {msg}"));
        }
        if let Some(b) = &self.broken_speed {
            if let Err(msg) = b.check() {
                problems.push(format!("broken_speed: {msg}"));
            }
        }
        for (i, shape) in self.obstacles.iter().enumerate() {
            if let Err(msg) = shape.check() {
                problems.push(format!("obstacle {i}: {msg}"));
            }
        }
        if let Some(t) = &self.target {
            if let Err(msg) = t.check() {
                problems.push(format!("target: {msg}"));
            }
        }
        match self.regime {
            RegimeSpec::Finite => {
                if self.horizon.is_none() {
                    problems.push("finite regime requires a horizon".into());
                }
                if !matches!(
                    self.observations,
                    ObservationSpec::None | ObservationSpec::Scheduled { .. }
                ) {
                    problems.push(
                        "finite regime supports no observations or scheduled observations".into(),
                    );
                }
            }
            RegimeSpec::InfinitePeriodic => {
                match self.beta {
                    Some(b) if b > 0.0 => {}
                    _ => problems.push("infinite_periodic regime requires beta > 0".into()),
                }
                if self.horizon.is_none() {
                    problems.push("infinite_periodic regime requires a horizon (period)".into());
                }
                if !matches!(self.observations, ObservationSpec::None) {
                    problems.push(
                        "infinite_periodic observations are implied by the period; use observations = none"
                            .into(),
                    );
                }
            }
            RegimeSpec::Indefinite | RegimeSpec::RandomlyTerminated => {
                if self.target.is_none() {
                    problems.push("exit-time regimes require a target shape".into());
                }
                if matches!(self.observations, ObservationSpec::Scheduled { .. }) {
                    problems.push(
                        "scheduled observations are only defined for the finite regime".into(),
                    );
                }
                if self.regime == RegimeSpec::RandomlyTerminated && self.gamma.is_none() {
                    problems.push("randomly_terminated regime requires gamma".into());
                }
            }
        }
        if let ObservationSpec::Scheduled { times } = &self.observations {
            if times.is_empty() {
                problems.push("scheduled observations need at least one time".into());
            }
            if times.windows(2).any(|w| w[0] >= w[1]) {
                problems.push("scheduled observation times must be strictly increasing".into());
            }
            if let Some(t_end) = self.horizon {
                if times.first().is_some_and(|t| *t <= 0.0)
                    || times.last().is_some_and(|t| *t > t_end)
                {
                    problems.push(format!(
                        "scheduled observation times must lie in (0, {t_end}]"
                    ));
                }
            }
        }
        if let ObservationSpec::Paid { cost } = &self.observations {
            if let Err(msg) = cost.check() {
                problems.push(format!("observation cost: {msg}"));
            }
        }
        match &self.initial_belief {
            BeliefSpec::Mode(i) => {
                if *i >= m {
                    problems.push(format!(
                        "initial_belief mode {i} out of range (modes are 0..{})",
                        m.saturating_sub(1)
                    ));
                }
            }
            BeliefSpec::Distribution(q) => {
                if q.len() != m {
                    problems.push(format!(
                        "initial_belief distribution must have {m} entries, got {}",
                        q.len()
                    ));
                }
                let sum: f64 = q.iter().sum();
                if (sum - 1.0).abs() > 1e-10 || q.iter().any(|v| *v < 0.0) {
                    problems.push(format!(
                        "initial_belief distribution must be on the simplex (sum = {sum})"
                    ));
                }
            }
            BeliefSpec::Stationary => {}
        }
        if !(self.tol > 0.0) {
            problems.push(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            problems.push("max_iters must be at least 1".into());
        }
        if let Some(sim) = &self.sim {
            let (x, y) = (sim.start[0], sim.start[1]);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                problems.push(format!("sim.start ({x}, {y}) outside the unit square"));
            }
            if sim.scripted_observations.iter().any(|o| *o >= m) {
                problems.push("sim.scripted_observations contains an out-of-range mode".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ScenarioInvalid(problems))
        }
    }

    /// Assemble a solver-ready problem, rasterizing all fields onto the grid.
    /// Relative raster paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path, overrides: &Overrides) -> Result<Problem> {
        self.validate()?;
        let j = overrides.j.unwrap_or(self.grid.j);
        let obstacles = self.obstacles.clone();
        let target = self.target.clone();
        let obstacle_masks: Vec<ShapeMask> = obstacles
            .iter()
            .map(|s| ShapeMask::prepare(s, base_dir))
            .collect::<Result<_>>()?;
        let target_mask = target
            .as_ref()
            .map(|s| ShapeMask::prepare(s, base_dir))
            .transpose()?;
        let grid = Grid2D::from_predicates(
            j,
            |x, y| obstacle_masks.iter().any(|s| s.contains(x, y)),
            |x, y| target_mask.as_ref().is_some_and(|s| s.contains(x, y)),
        )?;
        if target.is_some() && !grid.has_target() {
            return Err(Error::EmptyTarget);
        }

        let speed_slice = rasterize_field(&self.speed, &grid, base_dir)?;
        let speed = SpeedField::new(&grid, speed_slice)?;
        let chain = ModeChain::new(self.lambda.clone(), self.gamma.clone())?;

        let mut running = Vec::with_capacity(self.modes.len());
        let mut terminal = Vec::with_capacity(self.modes.len());
        let mut phis: Vec<Option<GridSlice>> = Vec::with_capacity(self.modes.len());
        for mode in &self.modes {
            running.push(nonnegative(
                rasterize_field(&mode.cost, &grid, base_dir)?,
                "cost",
            )?);
            terminal.push(nonnegative(
                rasterize_field(&mode.psi, &grid, base_dir)?,
                "psi",
            )?);
            phis.push(match &mode.phi {
                Some(f) => Some(nonnegative(rasterize_field(f, &grid, base_dir)?, "phi")?),
                None => None,
            });
        }
        let premature = if phis.iter().all(|p| p.is_some()) {
            Some(phis.into_iter().map(|p| p.unwrap()).collect())
        } else if phis.iter().any(|p| p.is_some()) {
            return Err(Error::ScenarioInvalid(vec![
                "either every mode defines phi or none does (breakdown speed fills the gap)".into(),
            ]));
        } else if let Some(bs) = &self.broken_speed {
            // Post-breakdown cost-to-target shared by all modes.
            let broken_slice = rasterize_field(bs, &grid, base_dir)?;
            let broken = SpeedField::new(&grid, broken_slice)?;
            let phi = crate::eikonal::solve_breakdown_cost(&grid, &broken)?;
            Some(vec![phi.values().clone(); self.modes.len()])
        } else {
            None
        };

        let anchor = match &self.initial_belief {
            BeliefSpec::Mode(i) => Anchor::Mode(*i),
            BeliefSpec::Distribution(q) => Anchor::Distribution(q.clone()),
            BeliefSpec::Stationary => Anchor::Distribution(chain.stationary()?),
        };
        let observations = match &self.observations {
            ObservationSpec::None => Observations::None,
            ObservationSpec::Scheduled { times } => Observations::Scheduled(times.clone()),
            ObservationSpec::Bounded { count } => Observations::Bounded(*count),
            ObservationSpec::Paid { cost } => {
                Observations::Paid(rasterize_field(cost, &grid, base_dir)?)
            }
        };
        let regime = match self.regime {
            RegimeSpec::Finite => Regime::Finite,
            RegimeSpec::InfinitePeriodic => Regime::InfinitePeriodic,
            RegimeSpec::Indefinite => Regime::Indefinite,
            RegimeSpec::RandomlyTerminated => Regime::RandomlyTerminated,
        };
        let spec = SolveSpec {
            regime,
            observations,
            horizon: overrides.horizon.or(self.horizon),
            beta: self.beta,
            anchor,
            tol: overrides.tol.unwrap_or(self.tol),
            max_iters: self.max_iters,
            explicit_dt: None,
            storage: StoragePolicy::default(),
        };
        Ok(Problem {
            grid,
            speed,
            chain,
            costs: CostBundle {
                running,
                terminal,
                premature,
            },
            spec,
        })
    }

    pub fn effective_seed(&self, overrides: &Overrides) -> u64 {
        overrides.seed.unwrap_or(self.seed)
    }
}

fn nonnegative(slice: GridSlice, label: &str) -> Result<GridSlice> {
    match slice.data().iter().find(|v| !(**v >= 0.0)) {
        Some(v) => Err(Error::ScenarioInvalid(vec![format!(
            "{label} field evaluates to a negative or non-finite value ({v})"
        )])),
        None => Ok(slice),
    }
}

impl FieldSpec {
    fn check(&self) -> std::result::Result<(), String> {
        match self {
            FieldSpec::Constant(c) => {
                if !c.is_finite() {
                    return Err(format!("constant {c} is not finite"));
                }
            }
            FieldSpec::GaussianSum { base, terms } => {
                if !base.is_finite() {
                    return Err(format!("base {base} is not finite"));
                }
                for (i, term) in terms.iter().enumerate() {
                    match (term.sigma, term.covariance) {
                        (Some(s), None) => {
                            if !(s > 0.0) {
                                return Err(format!("term {i}: sigma must be positive, got {s}"));
                            }
                        }
                        (None, Some(c)) => {
                            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                            if (c[0][1] - c[1][0]).abs() > 1e-12 || c[0][0] <= 0.0 || det <= 0.0 {
                                return Err(format!(
                                    "term {i}: covariance must be symmetric positive definite"
                                ));
                            }
                        }
                        _ => {
                            return Err(format!(
                                "term {i}: exactly one of sigma or covariance is required"
                            ))
                        }
                    }
                }
            }
            FieldSpec::Raster { path, scale } => {
                if path.is_empty() {
                    return Err("raster path is empty".into());
                }
                if !scale.is_finite() {
                    return Err(format!("scale {scale} is not finite"));
                }
            }
        }
        Ok(())
    }
}

impl Shape {
    fn check(&self) -> std::result::Result<(), String> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        match self {
            Shape::Rect {
                xmin,
                xmax,
                ymin,
                ymax,
            } => {
                if !(xmin < xmax && ymin < ymax) {
                    return Err("rect bounds must satisfy xmin < xmax and ymin < ymax".into());
                }
                if ![*xmin, *xmax, *ymin, *ymax].iter().copied().all(inside) {
                    return Err("rect must lie within the unit square".into());
                }
            }
            Shape::Circle { center, radius } => {
                if !(inside(center[0]) && inside(center[1])) {
                    return Err("circle center must lie within the unit square".into());
                }
                if !(*radius > 0.0) {
                    return Err(format!("circle radius must be positive, got {radius}"));
                }
            }
            Shape::RasterMask { path, .. } => {
                if path.is_empty() {
                    return Err("raster mask path is empty".into());
                }
            }
        }
        Ok(())
    }
}

/// A shape with any raster mask pre-loaded, usable as a point predicate.
enum ShapeMask {
    Rect {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
    },
    Circle {
        cx: f64,
        cy: f64,
        r2: f64,
    },
    Raster {
        data: RasterData,
        threshold: f64,
    },
}

impl ShapeMask {
    fn prepare(shape: &Shape, base_dir: &Path) -> Result<Self> {
        Ok(match shape {
            Shape::Rect {
                xmin,
                xmax,
                ymin,
                ymax,
            } => ShapeMask::Rect {
                xmin: *xmin,
                xmax: *xmax,
                ymin: *ymin,
                ymax: *ymax,
            },
            Shape::Circle { center, radius } => ShapeMask::Circle {
                cx: center[0],
                cy: center[1],
                r2: radius * radius,
            },
            Shape::RasterMask { path, threshold } => ShapeMask::Raster {
                data: load_raster(&resolve(base_dir, path))?,
                threshold: *threshold,
            },
        })
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeMask::Rect {
                xmin,
                xmax,
                ymin,
                ymax,
            } => x >= *xmin && x <= *xmax && y >= *ymin && y <= *ymax,
            ShapeMask::Circle { cx, cy, r2 } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= *r2,
            ShapeMask::Raster { data, threshold } => data.sample(x, y) >= *threshold,
        }
    }
}

fn resolve(base_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// External raster values on a source grid over the unit square; row 0 holds
/// `y = 0`.
pub struct RasterData {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl RasterData {
    /// Bilinear sample, exact on constant rasters.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        if self.rows == 1 && self.cols == 1 {
            return self.values[0];
        }
        let fx = x.clamp(0.0, 1.0) * (self.cols.max(2) - 1) as f64;
        let fy = y.clamp(0.0, 1.0) * (self.rows.max(2) - 1) as f64;
        let ix = (fx.floor() as usize).min(self.cols.saturating_sub(2));
        let jy = (fy.floor() as usize).min(self.rows.saturating_sub(2));
        let tx = fx - ix as f64;
        let ty = fy - jy as f64;
        let at = |c: usize, r: usize| self.values[r * self.cols + c];
        if self.cols == 1 {
            let v0 = at(0, jy);
            return v0 + ty * (at(0, jy + 1) - v0);
        }
        if self.rows == 1 {
            let v0 = at(ix, 0);
            return v0 + tx * (at(ix + 1, 0) - v0);
        }
        let v00 = at(ix, jy);
        let v10 = at(ix + 1, jy);
        let v01 = at(ix, jy + 1);
        let v11 = at(ix + 1, jy + 1);
        v00 + tx * (v10 - v00) + ty * (v01 - v00) + tx * ty * (v11 - v10 - v01 + v00)
    }
}

pub fn load_raster(path: &Path) -> Result<RasterData> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path),
        Some("png") => load_png(path),
        other => Err(Error::Raster(format!(
            "unsupported raster extension {other:?} for {}",
            path.display()
        ))),
    }
}

fn load_csv(path: &Path) -> Result<RasterData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| {
                    Error::Raster(format!(
                        "{}:{}: bad number {cell:?}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Raster(format!(
                    "{}:{}: ragged row ({} cells, expected {c})",
                    path.display(),
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Raster(format!("{}: empty raster", path.display())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Raster(format!(
            "{}: raster contains non-finite values",
            path.display()
        )));
    }
    Ok(RasterData { rows, cols, values })
}

/// 16-bit grayscale PNG; pixel values map to `[0, 1]` and are multiplied by
/// the field's scale. Row 0 of the file is `y = 0`.
fn load_png(path: &Path) -> Result<RasterData> {
    let img = image::open(path).map_err(|e| Error::Raster(format!("{}: {e}", path.display())))?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Raster(format!("{}: empty raster", path.display())));
    }
    let mut values = vec![0.0f64; (w * h) as usize];
    for (x, y, pixel) in gray.enumerate_pixels() {
        values[(y * w + x) as usize] = pixel.0[0] as f64 / 65535.0;
    }
    Ok(RasterData {
        rows: h as usize,
        cols: w as usize,
        values,
    })
}

/// Evaluate a field spec onto the grid: constants and Gaussian sums
/// pointwise, rasters by bilinear resampling times the scale.
pub fn rasterize_field(spec: &FieldSpec, grid: &Grid2D, base_dir: &Path) -> Result<GridSlice> {
    spec.check().map_err(|m| Error::ScenarioInvalid(vec![m]))?;
    Ok(match spec {
        FieldSpec::Constant(c) => GridSlice::constant(grid.n(), *c),
        FieldSpec::GaussianSum { base, terms } => GridSlice::from_fn(grid, |x, y| {
            let mut acc = *base;
            for term in terms {
                let dx = x - term.center[0];
                let dy = y - term.center[1];
                let quad = match (term.sigma, term.covariance) {
                    (Some(s), _) => (dx * dx + dy * dy) / (s * s),
                    (_, Some(c)) => {
                        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                        (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det
                    }
                    _ => unreachable!("checked above"),
                };
                acc += term.amp * (-0.5 * quad).exp();
            }
            acc
        }),
        FieldSpec::Raster { path, scale } => {
            let data = load_raster(&resolve(base_dir, path))?;
            GridSlice::from_fn(grid, |x, y| data.sample(x, y) * scale)
        }
    })
}
