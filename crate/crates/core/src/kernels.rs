//! Collision kernel `B(v − v*, ω) = |v − v*|^μ b(θ)`, its angular integral
//! `A`, the spatial mollifier `κ^σ`, and convolution in `x`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phase_space::{AngularQuadrature, DistributionFunction, PhaseGrid};

/// Number of uniform θ-nodes on `[0, π]` for tabulated angular profiles.
pub const PROFILE_NODES: usize = 256;

/// `∫_ℝ exp(−⟨x⟩) dx = 2 K₁(1)`.
pub const NORMALISER_1D: f64 = 1.203_814_460_394_469_1;

/// `∫_ℝ² exp(−⟨x⟩) dx = 4π / e`.
pub const NORMALISER_2D: f64 = 4.0 * PI / std::f64::consts::E;

/// Default number of periodic images per side when sampling `κ^σ`.
pub const DEFAULT_IMAGES: usize = 3;

/// Angular part `b(θ)` of the collision kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum AngularProfile {
    Constant(f64),
    /// Values at `PROFILE_NODES` uniform nodes on `[0, π]`, linearly interpolated.
    Tabulated(Vec<f64>),
}

impl AngularProfile {
    pub fn tabulate(b: impl Fn(f64) -> f64) -> Self {
        let h = PI / (PROFILE_NODES - 1) as f64;
        AngularProfile::Tabulated((0..PROFILE_NODES).map(|k| b(k as f64 * h)).collect())
    }

    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            AngularProfile::Constant(b) => *b,
            AngularProfile::Tabulated(table) => {
                let s = (theta.clamp(0.0, PI) / PI) * (table.len() - 1) as f64;
                let k = (s.floor() as usize).min(table.len() - 2);
                let t = s - k as f64;
                table[k] + t * (table[k + 1] - table[k])
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            AngularProfile::Constant(b) => *b,
            AngularProfile::Tabulated(table) => table.iter().copied().fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            AngularProfile::Constant(b) => b.is_finite() && *b >= 0.0,
            AngularProfile::Tabulated(t) => {
                t.len() == PROFILE_NODES && t.iter().all(|b| b.is_finite() && *b >= 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidKernel(
                "angular profile must be finite, nonnegative and tabulated at 256 nodes".into(),
            ))
        }
    }
}

/// Variable-hard-sphere kernel with growth exponent `mu ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionKernelSpec {
    mu: f64,
    profile: AngularProfile,
    cap: f64,
}

impl CollisionKernelSpec {
    /// `cap` is the declared constant `C_B` in `B ≤ C_B ⟨v⟩^μ`; it defaults to `sup b`.
    pub fn new(mu: f64, profile: AngularProfile, cap: Option<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidKernel(format!("mu must lie in [0, 1], got {mu}")));
        }
        profile.validate()?;
        let cap = cap.unwrap_or_else(|| profile.sup());
        if !(cap.is_finite() && cap >= 0.0) {
            return Err(Error::InvalidKernel(format!("invalid cap {cap}")));
        }
        Ok(Self { mu, profile, cap })
    }

    /// Maxwell molecules normalised so that `A ≡ 1`.
    pub fn maxwell() -> Self {
        Self::new(0.0, AngularProfile::Constant(1.0 / (2.0 * PI)), None).unwrap()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn profile(&self) -> &AngularProfile {
        &self.profile
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn b(&self, theta: f64) -> f64 {
        self.profile.eval(theta)
    }

    pub fn sup_b(&self) -> f64 {
        self.profile.sup()
    }

    /// `B(v_rel, ω)`; `omega` must be a unit vector to 1e-12.
    pub fn eval_b_checked(&self, v_rel: [f64; 2], omega: [f64; 2]) -> Result<f64> {
        let norm = omega[0].hypot(omega[1]);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::NonUnitOmega(norm));
        }
        Ok(self.eval_b(v_rel, omega))
    }

    /// Unchecked kernel evaluation.
    ///
    /// θ = arccos(|⟨v_rel, ω⟩| / |v_rel|). At `v_rel = 0` the kernel is 0 for
    /// `mu > 0` and `b(π/2)` for `mu = 0`.
    #[inline]
    pub(crate) fn eval_b(&self, v_rel: [f64; 2], omega: [f64; 2]) -> f64 {
        let speed = v_rel[0].hypot(v_rel[1]);
        if speed == 0.0 {
            return if self.mu > 0.0 { 0.0 } else { self.b(0.5 * PI) };
        }
        let b = match &self.profile {
            AngularProfile::Constant(b) => *b,
            p => {
                let c = ((v_rel[0] * omega[0] + v_rel[1] * omega[1]).abs() / speed).min(1.0);
                p.eval(c.acos())
            }
        };
        speed.powf(self.mu) * b
    }

    /// `A(v_rel) = Σ_ω B(v_rel, ω) Δω`. For a constant profile the quadrature
    /// of the constant is exact and the closed form `2π b |v_rel|^μ` is returned.
    pub fn eval_a(&self, v_rel: [f64; 2], quad: &AngularQuadrature) -> f64 {
        match &self.profile {
            AngularProfile::Constant(b) => {
                let speed = v_rel[0].hypot(v_rel[1]);
                if speed == 0.0 && self.mu > 0.0 {
                    0.0
                } else {
                    2.0 * PI * b * speed.powf(self.mu)
                }
            }
            AngularProfile::Tabulated(_) => {
                let s: f64 = quad.nodes().iter().map(|&w| self.eval_b(v_rel, w)).sum();
                s * quad.weight()
            }
        }
    }

    /// Scans all grid relative velocities and angular nodes; returns the largest
    /// ratio `B / ⟨v_rel⟩^μ`, or an error if it exceeds the declared cap.
    pub fn validate_cap(&self, grid: &PhaseGrid) -> Result<f64> {
        let nv = grid.nv() as i64;
        let h = grid.spacing_v();
        let mut worst: f64 = 0.0;
        for a in -(nv - 1)..nv {
            for c in -(nv - 1)..nv {
                let u = [a as f64 * h, c as f64 * h];
                let bracket = (1.0 + u[0] * u[0] + u[1] * u[1]).sqrt().powf(self.mu);
                for &w in grid.angles().nodes() {
                    worst = worst.max(self.eval_b(u, w) / bracket);
                }
            }
        }
        if worst > self.cap * (1.0 + 1e-12) {
            return Err(Error::InvalidKernel(format!(
                "kernel exceeds cap: max B/<v>^mu = {worst} > {}",
                self.cap
            )));
        }
        Ok(worst)
    }
}

/// Unnormalised mollifier profile `exp(−⟨x⟩)` evaluated at `|x|² = r2`.
#[inline]
fn bump(r2: f64) -> f64 {
    (-(1.0 + r2).sqrt()).exp()
}

/// `‖exp(−⟨·⟩)‖_{L¹(ℝ^d)}` for `d ∈ {1, 2}`.
pub fn continuum_normaliser(dim_x: usize) -> f64 {
    if dim_x == 1 {
        NORMALISER_1D
    } else {
        NORMALISER_2D
    }
}

/// Discretised, periodised and renormalised `κ^σ` on the grid's spatial offsets.
#[derive(Debug, Clone)]
pub struct SpatialKernelSpec {
    sigma: f64,
    images: usize,
    weights: Vec<f64>,
    cell_x: f64,
}

impl SpatialKernelSpec {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Weights indexed by the flat spatial offset `x − x*`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// `Σ w Δx^dx`, equal to 1 up to rounding.
    pub fn total(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.cell_x
    }
}

/// Samples `κ^σ_per(x) = Σ_{|k|∞ ≤ K} κ^σ(x + k Lx)` at the grid offsets and
/// renormalises so that `Σ w Δx^dx = 1`.
pub fn build_spatial_kernel(sigma: f64, grid: &PhaseGrid, images: usize) -> Result<SpatialKernelSpec> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::SigmaOutOfRange(sigma));
    }
    if images < 1 {
        return Err(Error::InvalidArgument("K_images must be >= 1".into()));
    }
    let d = grid.dim_x();
    let scale = 1.0 / sigma.sqrt();
    let prefactor = sigma.powf(-(d as f64) / 2.0) / continuum_normaliser(d);
    let period = grid.length();
    let k = images as i64;
    let mut weights = Vec::with_capacity(grid.n_space());
    for ix in 0..grid.n_space() {
        // |x| per component: the image sum is even in each coordinate, so the
        // mirrored offsets get bitwise identical weights.
        let xc = grid.x_centered(ix);
        let (a0, a1) = (xc[0].abs(), xc[1].abs());
        let mut s = 0.0;
        for k0 in -k..=k {
            let y0 = (a0 + k0 as f64 * period) * scale;
            if d == 1 {
                s += bump(y0 * y0);
            } else {
                for k1 in -k..=k {
                    let y1 = (a1 + k1 as f64 * period) * scale;
                    s += bump(y0 * y0 + y1 * y1);
                }
            }
        }
        weights.push(prefactor * s);
    }
    let cell_x = grid.cell_x();
    let total: f64 = weights.iter().sum::<f64>() * cell_x;
    for w in &mut weights {
        *w /= total;
    }
    Ok(SpatialKernelSpec {
        sigma,
        images,
        weights,
        cell_x,
    })
}

/// `𝕗(x, v) = Σ_{x*} f(x*, v) w(x − x*) Δx^dx` per velocity node.
///
/// Velocity slices that are constant in `x` are copied unchanged, so
/// x-uniform data passes through bitwise.
pub fn convolve_x(f: &DistributionFunction, kernel: &SpatialKernelSpec) -> Result<DistributionFunction> {
    let grid = f.grid();
    if kernel.weights.len() != grid.n_space() || kernel.cell_x != grid.cell_x() {
        return Err(Error::GridMismatch);
    }
    let nvel = grid.n_vel();
    let nsp = grid.n_space();
    let src = f.values();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nvel).enumerate().for_each(|(ix, row)| {
        for iy in 0..nsp {
            let w = kernel.weights[grid.x_offset(ix, iy)] * kernel.cell_x;
            let s = &src[iy * nvel..(iy + 1) * nvel];
            for (o, v) in row.iter_mut().zip(s) {
                *o += w * v;
            }
        }
    });
    for j in 0..nvel {
        let first = src[j];
        if (1..nsp).all(|ix| src[ix * nvel + j] == first) {
            for ix in 0..nsp {
                out[ix * nvel + j] = first;
            }
        }
    }
    Ok(DistributionFunction::from_raw(f.grid_arc().clone(), out))
}
