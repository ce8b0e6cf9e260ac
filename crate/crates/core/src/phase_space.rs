//! Discrete phase space: a periodic spatial lattice, a truncated cell-centred
//! velocity box in two dimensions, and a midpoint angular rule on the circle.
//!
//! Values are stored row-major with the spatial index outer and the velocity
//! index inner. A velocity index `j` maps to `(v_nodes[j / nv], v_nodes[j % nv])`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

/// Uniform midpoint rule on the unit circle.
#[derive(Debug, Clone)]
pub struct AngularQuadrature {
    nodes: Vec<[f64; 2]>,
    weight: f64,
}

impl AngularQuadrature {
    /// `n` nodes at angles `(k + 1/2) 2π / n`. Even `n` makes the node set
    /// closed under `ω ↦ −ω`.
    pub fn new(n: usize) -> Self {
        let weight = 2.0 * PI / n as f64;
        let nodes = (0..n)
            .map(|k| {
                let phi = (k as f64 + 0.5) * weight;
                [phi.cos(), phi.sin()]
            })
            .collect();
        Self { nodes, weight }
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    /// The weight Δω = 2π / n shared by every node.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Phase-space lattice `T^dx × [-vmax, vmax]^2` plus the angular rule.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    dim_x: usize,
    length: f64,
    nx: usize,
    vmax: f64,
    nv: usize,
    spacing_x: f64,
    spacing_v: f64,
    v_nodes: Vec<f64>,
    angles: AngularQuadrature,
}

impl PartialEq for PhaseGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim_x == other.dim_x
            && self.length == other.length
            && self.nx == other.nx
            && self.vmax == other.vmax
            && self.nv == other.nv
            && self.angles.len() == other.angles.len()
    }
}

impl PhaseGrid {
    /// Builds a grid with `dim_x ∈ {1, 2}` spatial axes of period `length`
    /// and `nx` points each, `nv` cell-centred velocity points per axis on
    /// `[-vmax, vmax]`, and `nomega` angular nodes.
    pub fn new(
        dim_x: usize,
        length: f64,
        nx: usize,
        vmax: f64,
        nv: usize,
        nomega: usize,
    ) -> Result<Self> {
        if !(dim_x == 1 || dim_x == 2) {
            return Err(Error::InvalidGrid(format!(
                "spatial dimension must be 1 or 2, got {dim_x}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "torus period must be positive, got {length}"
            )));
        }
        if !(vmax.is_finite() && vmax > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "velocity half-width must be positive, got {vmax}"
            )));
        }
        if nx < 2 {
            return Err(Error::InvalidGrid(format!("Nx must be >= 2, got {nx}")));
        }
        if nv < 4 || nv % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "Nv must be even and >= 4, got {nv}"
            )));
        }
        if nomega < 4 || nomega % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "Nomega must be even and >= 4, got {nomega}"
            )));
        }
        let spacing_v = 2.0 * vmax / nv as f64;
        // Mirror pairs are built from the same magnitude so that v ↦ −v is exact.
        let mut v_nodes = vec![0.0; nv];
        for k in 0..nv / 2 {
            let mag = (k as f64 + 0.5) * spacing_v;
            v_nodes[nv / 2 + k] = mag;
            v_nodes[nv / 2 - 1 - k] = -mag;
        }
        Ok(Self {
            dim_x,
            length,
            nx,
            vmax,
            nv,
            spacing_x: length / nx as f64,
            spacing_v,
            v_nodes,
            angles: AngularQuadrature::new(nomega),
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    /// Torus period per spatial axis.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Points per spatial axis.
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    /// Points per velocity axis.
    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn nomega(&self) -> usize {
        self.angles.len()
    }

    pub fn spacing_x(&self) -> f64 {
        self.spacing_x
    }

    pub fn spacing_v(&self) -> f64 {
        self.spacing_v
    }

    /// Spatial cell volume Δx^dx.
    pub fn cell_x(&self) -> f64 {
        self.spacing_x.powi(self.dim_x as i32)
    }

    /// Velocity cell volume Δv².
    pub fn cell_v(&self) -> f64 {
        self.spacing_v * self.spacing_v
    }

    /// Phase-space cell volume Δx^dx Δv².
    pub fn cell(&self) -> f64 {
        self.cell_x() * self.cell_v()
    }

    /// Number of spatial nodes, Nx^dx.
    pub fn n_space(&self) -> usize {
        self.nx.pow(self.dim_x as u32)
    }

    /// Number of velocity nodes, Nv².
    pub fn n_vel(&self) -> usize {
        self.nv * self.nv
    }

    /// Total number of phase-space nodes.
    pub fn len(&self) -> usize {
        self.n_space() * self.n_vel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total spatial volume Lx^dx.
    pub fn volume_x(&self) -> f64 {
        self.length.powi(self.dim_x as i32)
    }

    pub fn v_nodes(&self) -> &[f64] {
        &self.v_nodes
    }

    pub fn angles(&self) -> &AngularQuadrature {
        &self.angles
    }

    /// Velocity vector of flat velocity index `j`.
    #[inline]
    pub fn velocity(&self, j: usize) -> [f64; 2] {
        [self.v_nodes[j / self.nv], self.v_nodes[j % self.nv]]
    }

    /// Spatial multi-index of flat spatial index `ix` (second entry 0 when dx = 1).
    #[inline]
    pub fn x_multi(&self, ix: usize) -> [usize; 2] {
        if self.dim_x == 1 {
            [ix, 0]
        } else {
            [ix / self.nx, ix % self.nx]
        }
    }

    /// Flat spatial index of a multi-index.
    #[inline]
    pub fn x_flat(&self, m: [usize; 2]) -> usize {
        if self.dim_x == 1 {
            m[0]
        } else {
            m[0] * self.nx + m[1]
        }
    }

    /// Node coordinates in `[0, Lx)^dx`.
    pub fn x_coords(&self, ix: usize) -> [f64; 2] {
        let m = self.x_multi(ix);
        let mut out = [0.0; 2];
        for a in 0..self.dim_x {
            out[a] = m[a] as f64 * self.spacing_x;
        }
        out
    }

    /// Centred torus representative in `[-Lx/2, Lx/2)^dx`.
    pub fn x_centered(&self, ix: usize) -> [f64; 2] {
        let m = self.x_multi(ix);
        let mut out = [0.0; 2];
        for a in 0..self.dim_x {
            let k = m[a] as i64;
            let k = if 2 * k >= self.nx as i64 { k - self.nx as i64 } else { k };
            out[a] = k as f64 * self.spacing_x;
        }
        out
    }

    /// Flat index of the spatial difference `ix - iy` on the torus.
    #[inline]
    pub fn x_offset(&self, ix: usize, iy: usize) -> usize {
        let a = self.x_multi(ix);
        let b = self.x_multi(iy);
        let n = self.nx;
        let d0 = (a[0] + n - b[0]) % n;
        if self.dim_x == 1 {
            d0
        } else {
            d0 * n + (a[1] + n - b[1]) % n
        }
    }
}

/// Nonnegative finite density values on a [`PhaseGrid`].
#[derive(Debug, Clone)]
pub struct DistributionFunction {
    grid: Arc<PhaseGrid>,
    values: Vec<f64>,
}

impl DistributionFunction {
    /// Wraps `values` after checking shape, finiteness and sign.
    pub fn new(grid: Arc<PhaseGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidDistribution(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidDistribution(format!(
                "value {v} at index {i} is negative or non-finite"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<PhaseGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Samples `g(x, v)` at every node; `x` is the node coordinate in `[0, Lx)^dx`.
    pub fn from_fn(grid: Arc<PhaseGrid>, g: impl Fn([f64; 2], [f64; 2]) -> f64) -> Result<Self> {
        let nvel = grid.n_vel();
        let mut values = Vec::with_capacity(grid.len());
        for ix in 0..grid.n_space() {
            let x = grid.x_coords(ix);
            for j in 0..nvel {
                values.push(g(x, grid.velocity(j)));
            }
        }
        Self::new(grid, values)
    }

    pub(crate) fn from_raw(grid: Arc<PhaseGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Velocity slice at spatial node `ix`.
    pub fn slice(&self, ix: usize) -> &[f64] {
        let n = self.grid.n_vel();
        &self.values[ix * n..(ix + 1) * n]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    /// True when every velocity slice is bitwise identical across x.
    pub fn is_x_uniform(&self) -> bool {
        let n = self.grid.n_vel();
        let first = &self.values[..n];
        self.values.chunks_exact(n).all(|s| s == first)
    }
}

/// Mass, momentum and the unweighted second moment `∫|v|²f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentVector {
    pub mass: f64,
    pub momentum: [f64; 2],
    pub energy: f64,
    pub t: f64,
}

impl MomentVector {
    pub fn at(mut self, t: f64) -> Self {
        self.t = t;
        self
    }
}

/// Discrete mass, momentum and energy. Sums run sequentially, x outer and v inner.
///
/// Momentum pairs each node with its mirror `−v`, so data even in `v` has
/// exactly zero momentum.
pub fn moments(f: &DistributionFunction) -> MomentVector {
    let grid = f.grid();
    let nvel = grid.n_vel();
    let (mut m, mut p0, mut p1, mut e) = (0.0, 0.0, 0.0, 0.0);
    for slice in f.values().chunks_exact(nvel) {
        for (j, &val) in slice.iter().enumerate() {
            let v = grid.velocity(j);
            m += val;
            e += (v[0] * v[0] + v[1] * v[1]) * val;
        }
        for j in 0..nvel / 2 {
            let v = grid.velocity(j);
            let d = slice[j] - slice[nvel - 1 - j];
            p0 += v[0] * d;
            p1 += v[1] * d;
        }
    }
    let c = grid.cell();
    MomentVector {
        mass: m * c,
        momentum: [p0 * c, p1 * c],
        energy: e * c,
        t: 0.0,
    }
}

/// `Σ (⟨x⟩^p + ⟨v⟩^q) f Δx^dx Δv²` with `⟨z⟩ = √(1+|z|²)` and `x` the centred
/// torus representative.
pub fn weighted_norm(f: &DistributionFunction, p: f64, q: f64) -> f64 {
    let grid = f.grid();
    let nvel = grid.n_vel();
    let vweight: Vec<f64> = (0..nvel)
        .map(|j| {
            let v = grid.velocity(j);
            (1.0 + v[0] * v[0] + v[1] * v[1]).powf(0.5 * q)
        })
        .collect();
    let mut total = 0.0;
    for (ix, slice) in f.values().chunks_exact(nvel).enumerate() {
        let x = grid.x_centered(ix);
        let xw = (1.0 + x[0] * x[0] + x[1] * x[1]).powf(0.5 * p);
        for (val, vw) in slice.iter().zip(&vweight) {
            total += (xw + vw) * val;
        }
    }
    total * grid.cell()
}

/// Density, bulk velocity and temperature of one velocity slice, with
/// `T = (∫|v|²f / ρ − |u|²) / 2`. Returns `None` when the slice has no mass.
pub fn slice_hydrodynamics(grid: &PhaseGrid, slice: &[f64]) -> Option<(f64, [f64; 2], f64)> {
    let (mut m, mut p0, mut p1, mut e) = (0.0, 0.0, 0.0, 0.0);
    for (j, &val) in slice.iter().enumerate() {
        let v = grid.velocity(j);
        m += val;
        p0 += v[0] * val;
        p1 += v[1] * val;
        e += (v[0] * v[0] + v[1] * v[1]) * val;
    }
    if m <= 0.0 {
        return None;
    }
    let u = [p0 / m, p1 / m];
    let temp = 0.5 * (e / m - u[0] * u[0] - u[1] * u[1]);
    Some((m * grid.cell_v(), u, temp))
}

/// Samples `ρ (2πT)^{-1} exp(−|v−u|²/2T)` at the velocity nodes.
pub fn maxwellian_slice(grid: &PhaseGrid, rho: f64, u: [f64; 2], temp: f64) -> Vec<f64> {
    let norm = rho / (2.0 * std::f64::consts::PI * temp);
    (0..grid.n_vel())
        .map(|j| {
            let v = grid.velocity(j);
            let d0 = v[0] - u[0];
            let d1 = v[1] - u[1];
            norm * (-(d0 * d0 + d1 * d1) / (2.0 * temp)).exp()
        })
        .collect()
}

/// Discrete Maxwellian `exp(λ₀ + λ₁v₁ + λ₂v₂ + λ₃|v|²)` at the velocity nodes
/// whose discrete mass, momentum and energy equal those of `slice`, found by
/// Newton's method on the moment equations. A sampled Maxwellian is returned
/// unchanged up to rounding. `None` when the slice has no mass, no positive
/// temperature, or the iteration does not converge.
pub fn discrete_maxwellian(grid: &PhaseGrid, slice: &[f64]) -> Option<Vec<f64>> {
    let (rho, u, temp) = slice_hydrodynamics(grid, slice)?;
    if !(temp > 0.0 && rho.is_finite()) {
        return None;
    }
    let psi: Vec<Vector4<f64>> = (0..grid.n_vel())
        .map(|j| {
            let v = grid.velocity(j);
            Vector4::new(1.0, v[0], v[1], v[0] * v[0] + v[1] * v[1])
        })
        .collect();
    let mut target = Vector4::zeros();
    for (p, &fv) in psi.iter().zip(slice) {
        target += p * fv;
    }
    let mut lambda = Vector4::new(
        (rho / (2.0 * PI * temp)).ln() - (u[0] * u[0] + u[1] * u[1]) / (2.0 * temp),
        u[0] / temp,
        u[1] / temp,
        -0.5 / temp,
    );
    let tol = 1e-14 * (target[0].abs() + target[3].abs());
    for _ in 0..60 {
        let mut grad = -target;
        let mut hess = Matrix4::<f64>::zeros();
        for p in &psi {
            let w = lambda.dot(p).exp();
            grad += p * w;
            hess += p * p.transpose() * w;
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return None;
        }
        if grad.amax() <= tol {
            return Some(psi.iter().map(|p| lambda.dot(p).exp()).collect());
        }
        let d = Vector4::from_fn(|i, _| 1.0 / hess[(i, i)].sqrt());
        let scaled = Matrix4::from_fn(|i, k| hess[(i, k)] * d[i] * d[k]);
        let step = scaled.cholesky()?.solve(&grad.component_mul(&d)).component_mul(&d);
        lambda -= step;
    }
    None
}

/// `Σ |f − g| Δx^dx Δv²`.
pub fn l1_distance(f: &DistributionFunction, g: &DistributionFunction) -> Result<f64> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch);
    }
    Ok(l1_raw(f.values(), g.values()) * f.grid().cell())
}

pub(crate) fn l1_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
