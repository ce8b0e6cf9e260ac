//! Free transport, Strang splitting and the time loop.

use std::f64::consts::{PI, TAU};
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;

use crate::collision::{CollisionOperator, Coupling};
use crate::diagnostics::{
    comparison_defect, dissipation_from_field, entropy, moment_s, test_function_library,
    ComparisonReport, DiagnosticsRecord, ResidualAccumulator, COMPARISON_CONSTANTS,
};
use crate::error::{Error, Result};
use crate::kernels::{build_spatial_kernel, AngularProfile, CollisionKernelSpec, DEFAULT_IMAGES};
use crate::phase_space::{maxwellian_slice, moments, DistributionFunction, PhaseGrid};
use crate::snapshot;

/// Smallest substep relative to the configured step.
pub const SUBSTEP_FLOOR: u32 = 10;

/// Angular profile family of the collision kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileKind {
    /// `b ≡ supb`.
    Constant,
    /// `b(θ) = supb · cos θ`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub mu: f64,
    pub profile: ProfileKind,
    pub supb: f64,
    pub cap: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            profile: ProfileKind::Constant,
            supb: 1.0 / (2.0 * PI),
            cap: None,
        }
    }
}

impl KernelConfig {
    pub fn build(&self) -> Result<CollisionKernelSpec> {
        let supb = self.supb;
        let profile = match self.profile {
            ProfileKind::Constant => AngularProfile::Constant(supb),
            ProfileKind::Cosine => AngularProfile::tabulate(|t| supb * t.cos().abs()),
        };
        CollisionKernelSpec::new(self.mu, profile, self.cap)
    }
}

/// Collision partner selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Local,
    Fuzzy { sigma: f64 },
}

/// Library of initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Maxwellian { rho: f64, u: [f64; 2], temp: f64 },
    /// Equal mixture of Maxwellians centred at `(±offset, 0)`, uniform in x.
    TwoBumpV { rho: f64, offset: f64, temp: f64 },
    /// Maxwellian with density `ρ(1 + a cos(2πx₁/Lx))`.
    XModulatedMaxwellian { rho: f64, u: [f64; 2], temp: f64, amplitude: f64 },
    /// Constant on `|v₁|, |v₂| ≤ half_width`, scaled to the given total mass.
    IndicatorBox { half_width: f64, mass: f64 },
    CustomSnapshot { path: PathBuf },
}

impl InitialCondition {
    pub fn id(&self) -> &'static str {
        match self {
            InitialCondition::Maxwellian { .. } => "maxwellian",
            InitialCondition::TwoBumpV { .. } => "two_bump_v",
            InitialCondition::XModulatedMaxwellian { .. } => "x_modulated_maxwellian",
            InitialCondition::IndicatorBox { .. } => "indicator_box",
            InitialCondition::CustomSnapshot { .. } => "custom_snapshot",
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

/// Samples an initial condition on `grid`.
pub fn initial_condition(ic: &InitialCondition, grid: &Arc<PhaseGrid>) -> Result<DistributionFunction> {
    let uniform = |slice: Vec<f64>| -> Result<DistributionFunction> {
        DistributionFunction::new(grid.clone(), slice.repeat(grid.n_space()))
    };
    match ic {
        InitialCondition::Maxwellian { rho, u, temp } => {
            check_positive("ic.rho", *rho)?;
            check_positive("ic.T", *temp)?;
            uniform(maxwellian_slice(grid, *rho, *u, *temp))
        }
        InitialCondition::TwoBumpV { rho, offset, temp } => {
            check_positive("ic.rho", *rho)?;
            check_positive("ic.T", *temp)?;
            let a = maxwellian_slice(grid, 0.5 * rho, [*offset, 0.0], *temp);
            let b = maxwellian_slice(grid, 0.5 * rho, [-offset, 0.0], *temp);
            uniform(a.iter().zip(&b).map(|(x, y)| x + y).collect())
        }
        InitialCondition::XModulatedMaxwellian { rho, u, temp, amplitude } => {
            check_positive("ic.rho", *rho)?;
            check_positive("ic.T", *temp)?;
            if !(amplitude.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "ic.amplitude must satisfy |a| < 1, got {amplitude}"
                )));
            }
            let slice = maxwellian_slice(grid, *rho, *u, *temp);
            let mut values = Vec::with_capacity(grid.len());
            for ix in 0..grid.n_space() {
                let x = grid.x_coords(ix)[0];
                let factor = 1.0 + amplitude * (TAU * x / grid.length()).cos();
                values.extend(slice.iter().map(|m| m * factor));
            }
            DistributionFunction::new(grid.clone(), values)
        }
        InitialCondition::IndicatorBox { half_width, mass } => {
            check_positive("ic.half_width", *half_width)?;
            check_positive("ic.mass", *mass)?;
            let inside: Vec<bool> = (0..grid.n_vel())
                .map(|j| {
                    let v = grid.velocity(j);
                    v[0].abs() <= *half_width && v[1].abs() <= *half_width
                })
                .collect();
            let count = inside.iter().filter(|&&b| b).count() * grid.n_space();
            if count == 0 {
                return Err(Error::InvalidArgument(
                    "indicator box contains no velocity nodes".into(),
                ));
            }
            let level = mass / (count as f64 * grid.cell());
            uniform(inside.iter().map(|&b| if b { level } else { 0.0 }).collect())
        }
        InitialCondition::CustomSnapshot { path } => {
            let (f, _) = snapshot::read(path)?;
            if *f.grid() != **grid {
                return Err(Error::GridMismatch);
            }
            DistributionFunction::new(grid.clone(), f.into_values())
        }
    }
}

/// Which diagnostics to record and how often.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagConfig {
    /// Steps between records; 0 disables records.
    pub stride: usize,
    /// Steps between dissipation evaluations; 0 disables them.
    pub dissipation_stride: usize,
    /// Evaluate the comparison inequality whenever the dissipation is evaluated.
    pub comparison: bool,
    /// Orders `s` of the recorded `M_s`.
    pub moments: Vec<f64>,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            dissipation_stride: 5,
            comparison: true,
            moments: Vec::new(),
        }
    }
}

/// Complete description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dim_x: usize,
    pub length: f64,
    pub nx: usize,
    pub vmax: f64,
    pub nv: usize,
    pub nomega: usize,
    pub kernel: KernelConfig,
    pub mode: Mode,
    pub images: usize,
    pub ic: InitialCondition,
    pub t_final: f64,
    /// `None` picks the step from the positivity condition on the initial data.
    pub dt: Option<f64>,
    pub cfl_eta: f64,
    /// Steps between snapshots.
    pub output_stride: usize,
    pub diag: DiagConfig,
    pub seed: u64,
    /// Scale the gain so that sampled Maxwellians are fixed points.
    pub equilibrium_correction: bool,
    /// Record running renormalised residuals with this `α`.
    pub residual_alpha: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim_x: 1,
            length: 1.0,
            nx: 32,
            vmax: 6.0,
            nv: 32,
            nomega: 16,
            kernel: KernelConfig::default(),
            mode: Mode::Fuzzy { sigma: 0.1 },
            images: DEFAULT_IMAGES,
            ic: InitialCondition::XModulatedMaxwellian {
                rho: 1.0,
                u: [0.0, 0.0],
                temp: 1.0,
                amplitude: 0.3,
            },
            t_final: 1.0,
            dt: None,
            cfl_eta: 0.5,
            output_stride: 1,
            diag: DiagConfig::default(),
            seed: 0,
            equilibrium_correction: true,
            residual_alpha: None,
        }
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<PhaseGrid> {
        PhaseGrid::new(self.dim_x, self.length, self.nx, self.vmax, self.nv, self.nomega)
    }

    /// Checks the invariants not covered by grid and kernel construction.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return bad(format!("time.T must be >= 0, got {}", self.t_final));
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return bad(format!("time.dt must be > 0, got {dt}"));
            }
            if self.t_final > 0.0 && self.t_final < dt {
                return bad(format!("time.T = {} is smaller than time.dt = {dt}", self.t_final));
            }
        }
        if !(self.cfl_eta > 0.0 && self.cfl_eta < 1.0) {
            return bad(format!("time.eta must lie in (0, 1), got {}", self.cfl_eta));
        }
        if self.output_stride == 0 {
            return bad("output.stride must be >= 1".into());
        }
        if let Mode::Fuzzy { sigma } = self.mode {
            if !(sigma > 0.0 && sigma <= 1.0) {
                return Err(Error::SigmaOutOfRange(sigma));
            }
        }
        if self.images == 0 {
            return bad("kernel.images must be >= 1".into());
        }
        if let Some(s) = self.diag.moments.iter().find(|s| !(**s >= 0.0)) {
            return bad(format!("diag.moments entries must be >= 0, got {s}"));
        }
        if let Some(a) = self.residual_alpha {
            if !(a > 0.0) {
                return bad(format!("residual.alpha must be > 0, got {a}"));
            }
            if self.output_stride != 1 || self.diag.stride != 1 {
                return bad("the renormalised residual needs output.stride = 1 and diag.stride = 1".into());
            }
        }
        Ok(())
    }

    pub fn coupling(&self, grid: &PhaseGrid) -> Result<Coupling> {
        match self.mode {
            Mode::Local => Ok(Coupling::Local),
            Mode::Fuzzy { sigma } => Ok(Coupling::Fuzzy(build_spatial_kernel(sigma, grid, self.images)?)),
        }
    }

    /// Same configuration in the classical limit.
    pub fn local(&self) -> Self {
        Self { mode: Mode::Local, ..self.clone() }
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self { mode: Mode::Fuzzy { sigma }, ..self.clone() }
    }
}

/// Semi-Lagrangian transport `f(x − v dt, v)` with periodic linear
/// interpolation in `x`, one spatial axis at a time.
pub fn advect(f: &DistributionFunction, dt: f64) -> DistributionFunction {
    let grid = f.grid();
    let mut values = f.values().to_vec();
    for axis in 0..grid.dim_x() {
        values = shift_axis(grid, &values, axis, dt);
    }
    DistributionFunction::from_raw(f.grid_arc().clone(), values)
}

fn shift_axis(grid: &PhaseGrid, src: &[f64], axis: usize, dt: f64) -> Vec<f64> {
    let nvel = grid.n_vel();
    let n = grid.nx() as i64;
    // Per velocity node: integer part and fraction of the displacement in cells.
    let shifts: Vec<(i64, f64)> = (0..nvel)
        .map(|j| {
            let s = grid.velocity(j)[axis] * dt / grid.spacing_x();
            let a = s.floor();
            (a as i64, s - a)
        })
        .collect();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nvel).enumerate().for_each(|(ix, row)| {
        let m = grid.x_multi(ix);
        for (j, o) in row.iter_mut().enumerate() {
            let (a, t) = shifts[j];
            let mut m0 = m;
            m0[axis] = (m[axis] as i64 - a).rem_euclid(n) as usize;
            let mut m1 = m;
            m1[axis] = (m[axis] as i64 - a - 1).rem_euclid(n) as usize;
            let p = src[grid.x_flat(m0) * nvel + j];
            let q = src[grid.x_flat(m1) * nvel + j];
            *o = p + t * (q - p);
        }
    });
    out
}

/// Result of one successful split step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub f: DistributionFunction,
    /// Mass removed by clipping negative values.
    pub clipped_mass: f64,
    /// `dt` times the mean `L¹` size of the two stage projections.
    pub projection_l1: f64,
}

/// Explicit midpoint step on `∂_t f = Q̃(f)` followed by clipping of negative
/// values and proportional rescaling of the positive part to the pre-clip mass.
pub fn collide(
    f: &DistributionFunction,
    dt: f64,
    op: &CollisionOperator,
    coupling: &Coupling,
    eta: f64,
) -> Result<StepOutcome> {
    let first = op.collide(f, coupling)?;
    let rate_dt = dt * first.max_loss_rate;
    if rate_dt > eta {
        return Err(Error::SubstepRequired {
            rate_dt,
            admissible_dt: eta / first.max_loss_rate,
        });
    }
    let k1 = first.net();
    let mid: Vec<f64> = f.values().iter().zip(k1.iter()).map(|(v, q)| v + 0.5 * dt * q).collect();
    let mid = DistributionFunction::from_raw(f.grid_arc().clone(), mid);
    let second = op.collide(&mid, coupling)?;
    let k2 = second.net();
    let mut values: Vec<f64> = f.values().iter().zip(k2.iter()).map(|(v, q)| v + dt * q).collect();
    let cell = f.grid().cell();
    let clipped_mass = clip_and_rebalance(&mut values) * cell;
    let l1 = |c: &crate::collision::CollisionField| c.projection.as_ref().map_or(0.0, |p| p.l1);
    Ok(StepOutcome {
        f: DistributionFunction::from_raw(f.grid_arc().clone(), values),
        clipped_mass,
        projection_l1: 0.5 * dt * (l1(&first) + l1(&second)),
    })
}

/// Zeroes negative entries and rescales the rest to the original sum.
/// Returns the removed negative mass (unweighted sum).
fn clip_and_rebalance(values: &mut [f64]) -> f64 {
    let negative: f64 = values.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    if negative == 0.0 {
        return 0.0;
    }
    let total: f64 = values.iter().sum();
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let positive: f64 = values.iter().sum();
    if positive > 0.0 && total > 0.0 {
        let scale = total / positive;
        for v in values.iter_mut() {
            *v *= scale;
        }
    }
    negative
}

/// `advect(dt/2) ∘ collide(dt) ∘ advect(dt/2)`.
pub fn strang_step(
    f: &DistributionFunction,
    dt: f64,
    op: &CollisionOperator,
    coupling: &Coupling,
    eta: f64,
) -> Result<StepOutcome> {
    let half = advect(f, 0.5 * dt);
    let mut out = collide(&half, dt, op, coupling, eta)?;
    out.f = advect(&out.f, 0.5 * dt);
    Ok(out)
}

/// Snapshots and diagnostics of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<(f64, DistributionFunction)>,
    pub records: Vec<DiagnosticsRecord>,
    pub output_stride: usize,
    pub dt: f64,
    pub steps: usize,
    /// Steps that needed positivity substepping.
    pub substepped_steps: usize,
    pub clipped_mass: f64,
    pub projection_l1: f64,
    /// Names of the residual test functions, when residuals were recorded.
    pub residual_names: Vec<String>,
}

impl Trajectory {
    pub fn initial(&self) -> &DistributionFunction {
        &self.snapshots[0].1
    }

    pub fn last(&self) -> &DistributionFunction {
        &self.snapshots.last().expect("trajectory has an initial snapshot").1
    }
}

/// Step size from the positivity condition on `f₀`, rounded so that it divides `T`.
pub fn preview_dt(config: &SimConfig, op: &CollisionOperator, coupling: &Coupling, f0: &DistributionFunction) -> Result<f64> {
    let ff = coupling.mollify(f0)?;
    let max_rate = op.loss_rate(&ff)?.into_iter().fold(0.0, f64::max);
    if config.t_final == 0.0 {
        return Ok(1.0);
    }
    let target = if max_rate > 0.0 { 0.5 * config.cfl_eta / max_rate } else { config.t_final };
    let n = (config.t_final / target).ceil().max(1.0);
    Ok(config.t_final / n)
}

struct Recorder {
    diag: DiagConfig,
    residual: Option<ResidualAccumulator>,
    clipped: f64,
    projection: f64,
}

impl Recorder {
    fn record(
        &mut self,
        step: usize,
        t: f64,
        f: &DistributionFunction,
        op: &CollisionOperator,
        coupling: &Coupling,
    ) -> Result<DiagnosticsRecord> {
        let grid = f.grid();
        let mut dissipation = f64::NAN;
        let mut comparison: Option<ComparisonReport> = None;
        if self.diag.dissipation_stride > 0 && step % self.diag.dissipation_stride == 0 {
            let h = op.dissipation_field(f, coupling)?;
            dissipation = dissipation_from_field(grid, &h);
            if self.diag.comparison {
                let ff = coupling.mollify(f)?;
                let (gain, loss) = op.raw_fields(f, &ff)?;
                comparison = Some(comparison_defect(&gain, &loss, &h, &COMPARISON_CONSTANTS)?);
            }
        }
        let moments_s = self
            .diag
            .moments
            .iter()
            .map(|&s| moment_s(f, s).map(|m| (s, m)))
            .collect::<Result<Vec<_>>>()?;
        let residuals = match &mut self.residual {
            Some(acc) => {
                let q = op.collide(f, coupling)?;
                acc.push(t, f, &q.net())
            }
            None => Vec::new(),
        };
        Ok(DiagnosticsRecord {
            t,
            moments: moments(f).at(t),
            entropy: entropy(f),
            dissipation,
            clipped_mass: self.clipped,
            projection_l1: self.projection,
            comparison,
            moments_s,
            residuals,
        })
    }
}

/// Builds the operator and coupling for a configuration.
pub fn build_operator(config: &SimConfig) -> Result<(Arc<PhaseGrid>, CollisionOperator, Coupling)> {
    config.validate()?;
    let grid = Arc::new(config.grid()?);
    let spec = config.kernel.build()?;
    spec.validate_cap(&grid)?;
    let coupling = config.coupling(&grid)?;
    let op = CollisionOperator::new(grid.clone(), spec).with_equilibrium_correction(config.equilibrium_correction);
    Ok((grid, op, coupling))
}

/// Integrates from the initial condition to `T`.
pub fn run(config: &SimConfig) -> Result<Trajectory> {
    let (grid, op, coupling) = build_operator(config)?;
    let f0 = initial_condition(&config.ic, &grid)?;
    run_from(config, &op, &coupling, f0)
}

/// Integrates from a given initial state with a prebuilt operator.
pub fn run_from(
    config: &SimConfig,
    op: &CollisionOperator,
    coupling: &Coupling,
    f0: DistributionFunction,
) -> Result<Trajectory> {
    config.validate()?;
    let dt = match config.dt {
        Some(dt) => dt,
        None => preview_dt(config, op, coupling, &f0)?,
    };
    let steps = if config.t_final == 0.0 {
        0
    } else {
        ((config.t_final / dt) * (1.0 - 1e-12)).ceil() as usize
    };
    let residual = match config.residual_alpha {
        Some(alpha) => Some(ResidualAccumulator::new(f0.grid(), alpha, test_function_library())?),
        None => None,
    };
    let residual_names = residual
        .as_ref()
        .map(|r| r.tests().iter().map(|t| t.name()).collect())
        .unwrap_or_default();
    let mut recorder = Recorder {
        diag: config.diag.clone(),
        residual,
        clipped: 0.0,
        projection: 0.0,
    };
    let mut records = Vec::new();
    if config.diag.stride > 0 {
        records.push(recorder.record(0, 0.0, &f0, op, coupling)?);
    }
    let mut snapshots = vec![(0.0, f0.clone())];
    let mut f = f0;
    let mut substepped_steps = 0;
    let mut t = 0.0;
    for step in 1..=steps {
        let t_next = if step == steps { config.t_final } else { step as f64 * dt };
        let h = t_next - t;
        let (next, clipped, proj, halvings) = advance(&f, h, op, coupling, config.cfl_eta, step)?;
        if halvings > 0 {
            substepped_steps += 1;
        }
        if next.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        recorder.clipped += clipped;
        recorder.projection += proj;
        f = next;
        t = t_next;
        let last = step == steps;
        if step % config.output_stride == 0 || last {
            snapshots.push((t, f.clone()));
        }
        if config.diag.stride > 0 && (step % config.diag.stride == 0 || last) {
            records.push(recorder.record(step, t, &f, op, coupling)?);
        }
    }
    Ok(Trajectory {
        snapshots,
        records,
        output_stride: config.output_stride,
        dt,
        steps,
        substepped_steps,
        clipped_mass: recorder.clipped,
        projection_l1: recorder.projection,
        residual_names,
    })
}

/// Advances by `h`, halving the substep whenever the positivity condition fails.
fn advance(
    f: &DistributionFunction,
    h: f64,
    op: &CollisionOperator,
    coupling: &Coupling,
    eta: f64,
    step: usize,
) -> Result<(DistributionFunction, f64, f64, u32)> {
    let mut level = 0u32;
    let mut remaining: u64 = 1;
    let mut cur = f.clone();
    let (mut clipped, mut proj) = (0.0, 0.0);
    while remaining > 0 {
        let sub = h / (1u64 << level) as f64;
        match strang_step(&cur, sub, op, coupling, eta) {
            Ok(out) => {
                cur = out.f;
                clipped += out.clipped_mass;
                proj += out.projection_l1;
                remaining -= 1;
            }
            Err(Error::SubstepRequired { .. }) => {
                level += 1;
                if level > SUBSTEP_FLOOR {
                    return Err(Error::SubstepFailed {
                        step,
                        dt_min: h / (1u64 << SUBSTEP_FLOOR) as f64,
                    });
                }
                remaining *= 2;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((cur, clipped, proj, level))
}
