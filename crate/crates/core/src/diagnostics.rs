//! Entropy, dissipation, moment functionals, Povzner decomposition,
//! inequality checks and the renormalised weak-form residual.

use std::f64::consts::{E, FRAC_PI_2, TAU};
use std::str::FromStr;

use crate::collision::{CollisionOperator, Coupling};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::kernels::{CollisionKernelSpec, SpatialKernelSpec};
use crate::phase_space::{discrete_maxwellian, moments, AngularQuadrature, DistributionFunction, MomentVector, PhaseGrid};

/// Angular nodes for the alternating Povzner sum.
pub const POVZNER_ANGLES: usize = 1024;
/// Midpoint nodes on `[0, π/2]` for the coercive Povzner part.
pub const POVZNER_THETA_NODES: usize = 256;
/// Default constants of the comparison inequality.
pub const COMPARISON_CONSTANTS: [f64; 3] = [E, 10.0, 100.0];

/// `Σ f log f Δx^dx Δv²` with `0 log 0 = 0`.
pub fn entropy(f: &DistributionFunction) -> f64 {
    let s: f64 = f
        .values()
        .iter()
        .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
        .sum();
    s * f.grid().cell()
}

/// `Σ |v|^s f Δx^dx Δv²`.
pub fn moment_s(f: &DistributionFunction, s: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::InvalidArgument(format!("moment order must be >= 0, got {s}")));
    }
    let grid = f.grid();
    let nvel = grid.n_vel();
    let weight: Vec<f64> = (0..nvel)
        .map(|j| {
            let v = grid.velocity(j);
            (v[0] * v[0] + v[1] * v[1]).powf(0.5 * s)
        })
        .collect();
    let mut total = 0.0;
    for slice in f.values().chunks_exact(nvel) {
        for (val, w) in slice.iter().zip(&weight) {
            total += w * val;
        }
    }
    Ok(total * grid.cell())
}

/// `D = ¼ Σ h Δx^dx Δv²` from a dissipation integrand field.
pub fn dissipation_from_field(grid: &PhaseGrid, h: &[f64]) -> f64 {
    0.25 * h.iter().sum::<f64>() * grid.cell()
}

/// Entropy dissipation of `f` under the given coupling.
pub fn dissipation(op: &CollisionOperator, f: &DistributionFunction, coupling: &Coupling) -> Result<f64> {
    let h = op.dissipation_field(f, coupling)?;
    let d = dissipation_from_field(f.grid(), &h);
    assert!(d >= 0.0, "negative dissipation {d}");
    Ok(d)
}

/// Both sides of `‖Q^±‖_{L¹} ≤ 2π supb ⟨2vmax⟩^mu max(w) mass²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct APrioriBound {
    pub gain_l1: f64,
    pub loss_l1: f64,
    pub bound: f64,
}

impl APrioriBound {
    pub fn holds(&self) -> bool {
        self.gain_l1 <= self.bound && self.loss_l1 <= self.bound
    }
}

/// Evaluates the a-priori estimate of the fuzzy operator on `f`.
pub fn a_priori_bound(op: &CollisionOperator, f: &DistributionFunction, kernel: &SpatialKernelSpec) -> Result<APrioriBound> {
    let grid = f.grid();
    let ff = crate::kernels::convolve_x(f, kernel)?;
    let (gain, loss) = op.raw_fields(f, &ff)?;
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() * grid.cell();
    let mass = moments(f).mass;
    let bracket = (1.0 + 4.0 * grid.vmax() * grid.vmax()).sqrt();
    let spec = op.spec();
    Ok(APrioriBound {
        gain_l1: l1(&gain),
        loss_l1: l1(&loss),
        bound: TAU * spec.sup_b() * bracket.powf(spec.mu()) * kernel.max_weight() * mass * mass,
    })
}

/// Largest defect of `gain ≤ C loss + h / log C` over phase space and `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonReport {
    pub max_violation: f64,
    /// `max gain`, the scale for the tolerance.
    pub scale: f64,
}

impl ComparisonReport {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.max_violation / self.scale
        } else {
            self.max_violation
        }
    }
}

/// Pointwise comparison defect from precomputed gain, loss and dissipation fields.
pub fn comparison_defect(gain: &[f64], loss: &[f64], h: &[f64], c_values: &[f64]) -> Result<ComparisonReport> {
    if let Some(&c) = c_values.iter().find(|&&c| !(c > 1.0)) {
        return Err(Error::InvalidArgument(format!("comparison constant must exceed 1, got {c}")));
    }
    let mut worst: f64 = 0.0;
    for &c in c_values {
        let lc = c.ln();
        for ((g, l), hv) in gain.iter().zip(loss).zip(h) {
            worst = worst.max(g - c * l - hv / lc);
        }
    }
    let scale = gain.iter().copied().fold(0.0, f64::max);
    Ok(ComparisonReport { max_violation: worst, scale })
}

/// Evaluates the comparison inequality for `f` and its mollified partner.
pub fn comparison_check(
    op: &CollisionOperator,
    f: &DistributionFunction,
    coupling: &Coupling,
    c_values: &[f64],
) -> Result<ComparisonReport> {
    let ff = coupling.mollify(f)?;
    let (gain, loss) = op.raw_fields(f, &ff)?;
    let h = op.dissipation_field(f, coupling)?;
    comparison_defect(&gain, &loss, &h, c_values)
}

/// Spatially uniform discrete Maxwellian `exp(λ₀ + λ₁v₁ + λ₂v₂ + λ₃|v|²)`
/// whose discrete mass, momentum and energy equal those of `f`. It minimises
/// the discrete entropy under those constraints.
pub fn matched_maxwellian(f: &DistributionFunction) -> Result<DistributionFunction> {
    let grid = f.grid();
    let nvel = grid.n_vel();
    let mut mean = vec![0.0; nvel];
    for slice in f.values().chunks_exact(nvel) {
        for (m, v) in mean.iter_mut().zip(slice) {
            *m += v;
        }
    }
    let n = grid.n_space() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let slice = discrete_maxwellian(grid, &mean)
        .ok_or_else(|| Error::InvalidArgument("no discrete Maxwellian matches these moments".into()))?;
    DistributionFunction::new(f.grid_arc().clone(), slice.repeat(grid.n_space()))
}

/// Convex test function of the Povzner decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psi {
    /// `Ψ(x) = x`.
    Linear,
    /// `Ψ(x) = x^{1+r}`.
    Power(f64),
    /// `Ψ(x) = x log(1 + x)`.
    PaperPsi,
}

impl Psi {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Psi::Linear => x,
            Psi::Power(r) => x.powf(1.0 + r),
            Psi::PaperPsi => x * x.ln_1p(),
        }
    }
}

impl FromStr for Psi {
    type Err = Error;

    /// Accepts `linear`, `paper_Psi` and `power_1_plus_r(<r>)` (or `power_1_plus_r:<r>`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "linear" => return Ok(Psi::Linear),
            "paper_Psi" => return Ok(Psi::PaperPsi),
            _ => {}
        }
        let r = s
            .strip_prefix("power_1_plus_r")
            .map(|rest| rest.trim_start_matches([':', '(']).trim_end_matches(')'))
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|r| *r > 0.0);
        r.map(Psi::Power).ok_or_else(|| Error::UnknownPsi(s.to_string()))
    }
}

/// `K = G − H` at one velocity pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PovznerTerms {
    pub k: f64,
    pub g: f64,
    pub h: f64,
}

/// Povzner decomposition for an arbitrary `Ψ`.
///
/// `K` sums `b(θ)(Ψ(|v'|²) + Ψ(|v*'|²) − Ψ(|v|²) − Ψ(|v*|²))` over
/// [`POVZNER_ANGLES`] directions. The coercive part is
/// `H = 4 ∫₀^{π/2} (b(θ) + b(π/2−θ)) (Ψ(|v|²)cos²θ + Ψ(|v*|²)sin²θ − Ψ(|v|²cos²θ + |v*|²sin²θ)) dθ`,
/// the circle form of the angular measure, so that `G = K + H` vanishes at `v* = 0`.
pub fn povzner_terms_with(
    v: [f64; 2],
    v_star: [f64; 2],
    psi: impl Fn(f64) -> f64,
    spec: &CollisionKernelSpec,
) -> PovznerTerms {
    let quad = AngularQuadrature::new(POVZNER_ANGLES);
    let e = v[0] * v[0] + v[1] * v[1];
    let es = v_star[0] * v_star[0] + v_star[1] * v_star[1];
    let u = [v[0] - v_star[0], v[1] - v_star[1]];
    let un = u[0].hypot(u[1]);
    let base = psi(e) + psi(es);
    let mut k = 0.0;
    if un > 0.0 {
        for &w in quad.nodes() {
            let vw = v[0] * w[0] + v[1] * w[1];
            let sw = v_star[0] * w[0] + v_star[1] * w[1];
            let cos = ((u[0] * w[0] + u[1] * w[1]).abs() / un).min(1.0);
            let post = e - vw * vw + sw * sw;
            let post_star = es - sw * sw + vw * vw;
            k += spec.b(cos.acos()) * (psi(post.max(0.0)) + psi(post_star.max(0.0)) - base);
        }
        k *= quad.weight();
    }
    let dt = FRAC_PI_2 / POVZNER_THETA_NODES as f64;
    let mut h = 0.0;
    for i in 0..POVZNER_THETA_NODES {
        let t = (i as f64 + 0.5) * dt;
        let (s, c) = t.sin_cos();
        let (c2, s2) = (c * c, s * s);
        let gap = psi(e) * c2 + psi(es) * s2 - psi(e * c2 + es * s2);
        h += (spec.b(t) + spec.b(FRAC_PI_2 - t)) * gap;
    }
    h *= 4.0 * dt;
    PovznerTerms { k, g: k + h, h }
}

/// Povzner decomposition for one of the library test functions.
pub fn povzner_terms(v: [f64; 2], v_star: [f64; 2], psi: Psi, spec: &CollisionKernelSpec) -> PovznerTerms {
    povzner_terms_with(v, v_star, |x| psi.eval(x), spec)
}

/// One row of diagnostics along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub moments: MomentVector,
    pub entropy: f64,
    pub dissipation: f64,
    /// Mass removed by clipping since `t = 0`.
    pub clipped_mass: f64,
    /// Accumulated `L¹` size of the conservation projection, times the step.
    pub projection_l1: f64,
    pub comparison: Option<ComparisonReport>,
    /// `(s, M_s)` pairs.
    pub moments_s: Vec<(f64, f64)>,
    /// Running renormalised residuals, one per test function.
    pub residuals: Vec<f64>,
}

/// Summary of `S(t) = H(f_t) − H(f₀) + ∫₀ᵗ D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub times: Vec<f64>,
    pub s: Vec<f64>,
    pub max_s: f64,
    pub max_abs_s: f64,
    /// Largest increase of `H` between consecutive records (≤ 0 when monotone).
    pub max_h_increase: f64,
}

impl EntropyReport {
    pub fn passes(&self, tol_h: f64) -> bool {
        self.max_s <= tol_h
    }

    pub fn h_monotone(&self) -> bool {
        self.max_h_increase <= 0.0
    }
}

/// Entropy inequality check over the trajectory's records, trapezoid rule in time.
pub fn entropy_inequality_check(traj: &Trajectory) -> Result<EntropyReport> {
    entropy_inequality_from_records(&traj.records)
}

pub fn entropy_inequality_from_records(records: &[DiagnosticsRecord]) -> Result<EntropyReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::MissingSeries("no diagnostics records".into()))?;
    if records.iter().any(|r| !r.dissipation.is_finite()) {
        return Err(Error::MissingSeries("dissipation".into()));
    }
    let h0 = first.entropy;
    let mut integral = 0.0;
    let mut s = vec![0.0];
    let mut max_inc = f64::NEG_INFINITY;
    for pair in records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        integral += 0.5 * (b.t - a.t) * (a.dissipation + b.dissipation);
        s.push(b.entropy - h0 + integral);
        max_inc = max_inc.max(b.entropy - a.entropy);
    }
    let max_s = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_abs_s = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(EntropyReport {
        times: records.iter().map(|r| r.t).collect(),
        s,
        max_s,
        max_abs_s,
        max_h_increase: if records.len() > 1 { max_inc } else { 0.0 },
    })
}

/// Time factor of a separable test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeFactor {
    One,
    Decay,
}

/// Spatial factor, a function of the first coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceFactor {
    One,
    Cos,
    Sin,
}

/// Velocity factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityFactor {
    Gaussian,
    FirstMoment,
}

/// `φ(t,x,v) = τ(t) ξ(x₁) ζ(v)` with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunction {
    pub time: TimeFactor,
    pub space: SpaceFactor,
    pub velocity: VelocityFactor,
}

impl TestFunction {
    pub fn name(&self) -> String {
        let t = match self.time {
            TimeFactor::One => "1",
            TimeFactor::Decay => "exp",
        };
        let x = match self.space {
            SpaceFactor::One => "1",
            SpaceFactor::Cos => "cos",
            SpaceFactor::Sin => "sin",
        };
        let v = match self.velocity {
            VelocityFactor::Gaussian => "g",
            VelocityFactor::FirstMoment => "v1g",
        };
        format!("{t}_{x}_{v}")
    }

    /// `(τ, τ')`.
    fn time_parts(&self, t: f64) -> (f64, f64) {
        match self.time {
            TimeFactor::One => (1.0, 0.0),
            TimeFactor::Decay => {
                let e = (-t).exp();
                (e, -e)
            }
        }
    }

    /// `(ξ, ξ')` at `x₁` on a torus of period `length`.
    fn space_parts(&self, x: f64, length: f64) -> (f64, f64) {
        let k = TAU / length;
        match self.space {
            SpaceFactor::One => (1.0, 0.0),
            SpaceFactor::Cos => ((k * x).cos(), -k * (k * x).sin()),
            SpaceFactor::Sin => ((k * x).sin(), k * (k * x).cos()),
        }
    }

    fn velocity_part(&self, v: [f64; 2]) -> f64 {
        let g = (-0.5 * (v[0] * v[0] + v[1] * v[1])).exp();
        match self.velocity {
            VelocityFactor::Gaussian => g,
            VelocityFactor::FirstMoment => v[0] * g,
        }
    }
}

/// The fixed twelve-member library: time factors {1, e^{−t}}, spatial factors
/// {1, cos, sin} of `2πx₁/Lx`, velocity factors {e^{−|v|²/2}, v₁e^{−|v|²/2}}.
pub fn test_function_library() -> Vec<TestFunction> {
    let mut out = Vec::with_capacity(12);
    for time in [TimeFactor::One, TimeFactor::Decay] {
        for space in [SpaceFactor::One, SpaceFactor::Cos, SpaceFactor::Sin] {
            for velocity in [VelocityFactor::Gaussian, VelocityFactor::FirstMoment] {
                out.push(TestFunction { time, space, velocity });
            }
        }
    }
    out
}

/// Running weak-form residual of the renormalised equation
/// `R_t(φ) = ∫₀ᵗ Σ (g ∂_tφ + g v·∇φ + φ Q^α) + Σ g₀ φ(0) − Σ g_t φ(t)`,
/// with `g = α⁻¹ log(1 + αf)`, `Q^α = Q / (1 + αf)` and the trapezoid rule in time.
#[derive(Debug, Clone)]
pub struct ResidualAccumulator {
    alpha: f64,
    tests: Vec<TestFunction>,
    /// Per test: `(ξ(x), ξ'(x))` per spatial node.
    space: Vec<Vec<(f64, f64)>>,
    /// Per test: `ζ(v)` per velocity node.
    velocity: Vec<Vec<f64>>,
    v1: Vec<f64>,
    cell: f64,
    initial: Option<Vec<f64>>,
    integral: Vec<f64>,
    last: Option<(f64, Vec<f64>)>,
}

impl ResidualAccumulator {
    pub fn new(grid: &PhaseGrid, alpha: f64, tests: Vec<TestFunction>) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0 for the residual, got {alpha}")));
        }
        let space = tests
            .iter()
            .map(|tf| {
                (0..grid.n_space())
                    .map(|ix| tf.space_parts(grid.x_coords(ix)[0], grid.length()))
                    .collect()
            })
            .collect();
        let velocity = tests
            .iter()
            .map(|tf| (0..grid.n_vel()).map(|j| tf.velocity_part(grid.velocity(j))).collect())
            .collect();
        let n = tests.len();
        Ok(Self {
            alpha,
            tests,
            space,
            velocity,
            v1: (0..grid.n_vel()).map(|j| grid.velocity(j)[0]).collect(),
            cell: grid.cell(),
            initial: None,
            integral: vec![0.0; n],
            last: None,
        })
    }

    pub fn tests(&self) -> &[TestFunction] {
        &self.tests
    }

    /// Adds the state at time `t` with its collision field `q` (projected net
    /// rate). Returns the running residuals.
    pub fn push(&mut self, t: f64, f: &DistributionFunction, q: &[f64]) -> Vec<f64> {
        let nvel = f.grid().n_vel();
        let a = self.alpha;
        let n = self.tests.len();
        let mut integrand = vec![0.0; n];
        let mut state = vec![0.0; n];
        for (ix, (fs, qs)) in f.values().chunks_exact(nvel).zip(q.chunks_exact(nvel)).enumerate() {
            for k in 0..n {
                let (tau, dtau) = self.tests[k].time_parts(t);
                let (xi, dxi) = self.space[k][ix];
                let zeta = &self.velocity[k];
                let (mut si, mut ss) = (0.0, 0.0);
                for j in 0..nvel {
                    let g = (a * fs[j]).ln_1p() / a;
                    let qa = qs[j] / (1.0 + a * fs[j]);
                    let phi = tau * xi * zeta[j];
                    si += g * (dtau * xi * zeta[j] + self.v1[j] * tau * dxi * zeta[j]) + phi * qa;
                    ss += g * phi;
                }
                integrand[k] += si;
                state[k] += ss;
            }
        }
        for k in 0..n {
            integrand[k] *= self.cell;
            state[k] *= self.cell;
        }
        if let Some((t0, prev)) = &self.last {
            for k in 0..n {
                self.integral[k] += 0.5 * (t - t0) * (prev[k] + integrand[k]);
            }
        }
        let initial = self.initial.get_or_insert_with(|| state.clone());
        let out = (0..n).map(|k| self.integral[k] + initial[k] - state[k]).collect();
        self.last = Some((t, integrand));
        out
    }
}

/// `|R(φ)|` at the final time for every library member. Requires a trajectory
/// with a snapshot at every step.
pub fn renorm_residual(
    traj: &Trajectory,
    op: &CollisionOperator,
    coupling: &Coupling,
    alpha: f64,
) -> Result<Vec<f64>> {
    if traj.output_stride != 1 {
        return Err(Error::InvalidArgument(format!(
            "renormalised residual needs output stride 1, trajectory has {}",
            traj.output_stride
        )));
    }
    let first = traj
        .snapshots
        .first()
        .ok_or_else(|| Error::MissingSeries("snapshots".into()))?;
    let mut acc = ResidualAccumulator::new(first.1.grid(), alpha, test_function_library())?;
    let mut last = Vec::new();
    for (t, f) in &traj.snapshots {
        let q = op.collide(f, coupling)?;
        last = acc.push(*t, f, &q.net());
    }
    Ok(last.into_iter().map(f64::abs).collect())
}
