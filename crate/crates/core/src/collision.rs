//! Collision transform, gain/loss operators, fuzzy and classical collision
//! operators, renormalised fields and the conservative moment projection.
//!
//! Post-collision velocities fall between velocity nodes; the gain term
//! evaluates `f(x, v')` and `𝕗(x, v*')` by bilinear interpolation with zero
//! extension outside the velocity box. The fractional position of `v'`
//! relative to the lattice depends only on `(v − v*, ω)`, so the interpolation
//! stencils are tabulated once per grid and shared by every spatial node.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{convolve_x, CollisionKernelSpec, SpatialKernelSpec};
use crate::phase_space::{discrete_maxwellian, slice_hydrodynamics, DistributionFunction, PhaseGrid};

/// `(v, v*, ω) ↦ (v − ⟨v−v*, ω⟩ω, v* + ⟨v−v*, ω⟩ω)`.
pub fn collision_transform(
    v: [f64; 2],
    v_star: [f64; 2],
    omega: [f64; 2],
) -> Result<([f64; 2], [f64; 2])> {
    let norm = omega[0].hypot(omega[1]);
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::NonUnitOmega(norm));
    }
    let c = (v[0] - v_star[0]) * omega[0] + (v[1] - v_star[1]) * omega[1];
    Ok((
        [v[0] - c * omega[0], v[1] - c * omega[1]],
        [v_star[0] + c * omega[0], v_star[1] + c * omega[1]],
    ))
}

/// How collision partners are selected in space.
#[derive(Debug, Clone)]
pub enum Coupling {
    /// Classical operator: partners share the same position.
    Local,
    /// Delocalised operator with spatial kernel `κ^σ`.
    Fuzzy(SpatialKernelSpec),
}

impl Coupling {
    /// `𝕗 = f ∗ₓ κ^σ`, or `f` itself for the local operator.
    pub fn mollify<'a>(&self, f: &'a DistributionFunction) -> Result<Cow<'a, DistributionFunction>> {
        match self {
            Coupling::Local => Ok(Cow::Borrowed(f)),
            Coupling::Fuzzy(k) => Ok(Cow::Owned(convolve_x(f, k)?)),
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self {
            Coupling::Local => None,
            Coupling::Fuzzy(k) => Some(k.sigma()),
        }
    }
}

/// One `(v − v*, ω)` pair: kernel weight and the two bilinear stencils.
#[derive(Debug, Clone)]
struct StencilEntry {
    /// `B Δv² Δω`.
    weight: f64,
    /// Index difference `v − v*`.
    shift: [i32; 2],
    /// Lower stencil corner of `v'` relative to the index of `v`.
    off_post: [i32; 2],
    /// Lower stencil corner of `v*'` relative to the index of `v`.
    off_partner: [i32; 2],
    w_post: [f64; 4],
    w_partner: [f64; 4],
    /// Half-open index ranges of `v` per axis with a possibly nonzero gain.
    range: [(u32, u32); 2],
    /// Half-open index ranges of `v` per axis with both `v` and `v*` in the box.
    full: [(u32, u32); 2],
}

/// Bilinear weights in padded-stencil order (00, 01, 10, 11).
fn bilinear(t: [f64; 2]) -> [f64; 4] {
    [
        (1.0 - t[0]) * (1.0 - t[1]),
        (1.0 - t[0]) * t[1],
        t[0] * (1.0 - t[1]),
        t[0] * t[1],
    ]
}

/// Copies `n` velocity slices into a velocity-major array with a one-node
/// zero border: entry `(r, c, x)` of the `(nv+2)² × n` result sits at
/// `((r p) + c) n + x` with `p = nv + 2`.
fn pad_transposed(values: &[f64], nv: usize, n: usize) -> Vec<f64> {
    let p = nv + 2;
    let mut out = vec![0.0; p * p * n];
    for (x, slice) in values.chunks_exact(nv * nv).enumerate() {
        for (j, &v) in slice.iter().enumerate() {
            out[((j / nv + 1) * p + j % nv + 1) * n + x] = v;
        }
    }
    out
}

/// Gain, loss, and the corrected/projected net collision field.
#[derive(Debug, Clone)]
pub struct CollisionField {
    grid: Arc<PhaseGrid>,
    /// `Σ B f(x,v') 𝕗(x,v*') Δv²Δω`.
    pub raw_gain: Vec<f64>,
    /// `f(x,v) L(𝕗)(x,v)`.
    pub raw_loss: Vec<f64>,
    /// `gain − r·gain` for the equilibrium gain scaling `r`, when enabled on the operator.
    pub correction: Option<Vec<f64>>,
    pub projected: Option<Vec<f64>>,
    pub projection: Option<ProjectionReport>,
    /// `max L(𝕗)` over phase space.
    pub max_loss_rate: f64,
}

impl CollisionField {
    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    /// `gain − loss − correction`, before the moment projection.
    pub fn unprojected_net(&self) -> Vec<f64> {
        let mut net: Vec<f64> = self
            .raw_gain
            .iter()
            .zip(&self.raw_loss)
            .map(|(g, l)| g - l)
            .collect();
        if let Some(c) = &self.correction {
            for (n, c) in net.iter_mut().zip(c) {
                *n -= c;
            }
        }
        net
    }

    /// The projected net field if present, else the unprojected one.
    pub fn net(&self) -> Cow<'_, [f64]> {
        match &self.projected {
            Some(p) => Cow::Borrowed(p.as_slice()),
            None => Cow::Owned(self.unprojected_net()),
        }
    }
}

/// Outcome of the conservative projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionReport {
    /// `Σ |Σ_j λ_j ψ_j f| Δx^dx Δv²`.
    pub l1: f64,
    /// Spatial nodes whose moment matrix was singular; left uncorrected.
    pub skipped: Vec<usize>,
}

/// Discrete collision operator for a fixed grid and kernel.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    grid: Arc<PhaseGrid>,
    spec: CollisionKernelSpec,
    entries: Vec<StencilEntry>,
    /// `A(u) Δv²` on the difference lattice, `(2nv−1)²` entries.
    a_table: Vec<f64>,
    /// Border width that keeps every stencil corner of a full-range pair in bounds.
    wide_pad: usize,
    equilibrium_correction: bool,
}

impl CollisionOperator {
    /// Tabulates stencils for every `(v − v*, ω)` on the grid. The equilibrium
    /// correction starts disabled.
    pub fn new(grid: Arc<PhaseGrid>, spec: CollisionKernelSpec) -> Self {
        let nv = grid.nv() as i64;
        let h = grid.spacing_v();
        let dw = grid.angles().weight();
        let cell_v = grid.cell_v();
        let mut entries = Vec::new();
        let mut reach = 0usize;
        let mut a_table = Vec::with_capacity(((2 * nv - 1) * (2 * nv - 1)) as usize);
        // ω and −ω give the same post-collision pair and the same kernel value,
        // and an even midpoint rule pairs node k with node k + n/2.
        let nodes = grid.angles().nodes();
        let (nodes, multiplicity) = if nodes.len() % 2 == 0 {
            (&nodes[..nodes.len() / 2], 2.0)
        } else {
            (nodes, 1.0)
        };
        for u0 in -(nv - 1)..nv {
            for u1 in -(nv - 1)..nv {
                let u_idx = [u0, u1];
                let u = [u0 as f64 * h, u1 as f64 * h];
                a_table.push(spec.eval_a(u, grid.angles()) * cell_v);
                for &w in nodes {
                    let b = spec.eval_b(u, w);
                    if b == 0.0 {
                        continue;
                    }
                    let c = u[0] * w[0] + u[1] * w[1];
                    let mut off_post = [0i32; 2];
                    let mut off_partner = [0i32; 2];
                    let mut t_post = [0.0; 2];
                    let mut t_partner = [0.0; 2];
                    let mut range = [(0u32, 0u32); 2];
                    let mut full = [(0u32, 0u32); 2];
                    for a in 0..2 {
                        // Displacement in index units: v' = v − s, v*' = v* + s.
                        let s = c * w[a] / h;
                        let fl_post = (-s).floor();
                        let fl_partner = s.floor();
                        off_post[a] = fl_post as i32;
                        t_post[a] = -s - fl_post;
                        off_partner[a] = fl_partner as i32 - u_idx[a] as i32;
                        t_partner[a] = s - fl_partner;
                        // j ∈ [0, nv), j − u ∈ [0, nv), and both stencil corners in [−1, nv−1].
                        let mut lo = 0i64.max(u_idx[a]);
                        let mut hi = nv.min(nv + u_idx[a]);
                        full[a] = (lo as u32, hi as u32);
                        for off in [off_post[a] as i64, off_partner[a] as i64] {
                            lo = lo.max(-1 - off);
                            hi = hi.min(nv - off);
                        }
                        range[a] = if lo < hi { (lo as u32, hi as u32) } else { (0, 0) };
                        reach = reach.max(fl_post.abs() as usize).max(fl_partner.abs() as usize);
                    }
                    entries.push(StencilEntry {
                        weight: multiplicity * b * cell_v * dw,
                        shift: [u0 as i32, u1 as i32],
                        off_post,
                        off_partner,
                        w_post: bilinear(t_post),
                        w_partner: bilinear(t_partner),
                        range,
                        full,
                    });
                }
            }
        }
        Self {
            grid,
            spec,
            entries,
            a_table,
            wide_pad: reach + 2,
            equilibrium_correction: false,
        }
    }

    /// Scale the gain by its defect on the local discrete Maxwellian, so that
    /// sampled equilibria are discrete fixed points.
    pub fn with_equilibrium_correction(mut self, on: bool) -> Self {
        self.equilibrium_correction = on;
        self
    }

    pub fn equilibrium_correction(&self) -> bool {
        self.equilibrium_correction
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn spec(&self) -> &CollisionKernelSpec {
        &self.spec
    }

    fn check(&self, f: &DistributionFunction) -> Result<()> {
        if Arc::ptr_eq(f.grid_arc(), &self.grid) || *f.grid() == *self.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// `L(g)(v) = Σ_{v*} g(v*) A(v − v*) Δv²` for `n` slices at once,
    /// returned slice by slice.
    fn loss_rate_slices(&self, g: &[f64], n: usize) -> Vec<f64> {
        let nv = self.grid.nv();
        let nvel = nv * nv;
        let m = 2 * nv - 1;
        let mut gt = vec![0.0; nvel * n];
        for (x, slice) in g.chunks_exact(nvel).enumerate() {
            for (k, &v) in slice.iter().enumerate() {
                gt[k * n + x] = v;
            }
        }
        let mut out_t = vec![0.0; nvel * n];
        out_t.par_chunks_mut(n).enumerate().for_each(|(j, o)| {
            let (j0, j1) = (j / nv, j % nv);
            for k in 0..nvel {
                let (k0, k1) = (k / nv, k % nv);
                let a = self.a_table[(j0 + nv - 1 - k0) * m + (j1 + nv - 1 - k1)];
                for (o, &gv) in o.iter_mut().zip(&gt[k * n..(k + 1) * n]) {
                    *o += gv * a;
                }
            }
        });
        let mut out = vec![0.0; nvel * n];
        for (j, vals) in out_t.chunks_exact(n).enumerate() {
            for (x, &v) in vals.iter().enumerate() {
                out[x * nvel + j] = v;
            }
        }
        out
    }

    /// Gain `Σ_{v*,ω} B Ĩf(v') Ĩg(v*') Δv² Δω` for `n` slice pairs at once,
    /// returned slice by slice.
    fn gain_slices(&self, f: &[f64], g: &[f64], n: usize) -> Vec<f64> {
        let nv = self.grid.nv();
        let fp = pad_transposed(f, nv, n);
        let gp = pad_transposed(g, nv, n);
        let mut out_t = vec![0.0; nv * nv * n];
        out_t.par_chunks_mut(nv * n).enumerate().for_each(|(j0, row)| {
            // Wider vectors only; the operation order per element is unchanged,
            // so both paths give identical bits.
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { self.gain_row_avx2(&fp, &gp, n, j0, row) };
                return;
            }
            self.gain_row(&fp, &gp, n, j0, row);
        });
        let mut out = vec![0.0; nv * nv * n];
        for (j, vals) in out_t.chunks_exact(n).enumerate() {
            for (x, &v) in vals.iter().enumerate() {
                out[x * nv * nv + j] = v;
            }
        }
        out
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn gain_row_avx2(&self, fp: &[f64], gp: &[f64], n: usize, j0: usize, row: &mut [f64]) {
        self.gain_row(fp, gp, n, j0, row);
    }

    /// One output velocity row `j0`, all slices, in velocity-major layout.
    #[inline(always)]
    fn gain_row(&self, fp: &[f64], gp: &[f64], n: usize, j0: usize, row: &mut [f64]) {
        let p = self.grid.nv() + 2;
        for e in &self.entries {
            let (lo0, hi0) = (e.range[0].0 as usize, e.range[0].1 as usize);
            if j0 < lo0 || j0 >= hi0 {
                continue;
            }
            let (lo1, hi1) = (e.range[1].0 as usize, e.range[1].1 as usize);
            let r1 = (j0 as i64 + e.off_post[0] as i64 + 1) as usize;
            let r2 = (j0 as i64 + e.off_partner[0] as i64 + 1) as usize;
            let [a0, a1, a2, a3] = e.w_post;
            let [c0, c1, c2, c3] = e.w_partner;
            let wt = e.weight;
            for j1 in lo1..hi1 {
                let b1 = (r1 * p + (j1 as i64 + e.off_post[1] as i64 + 1) as usize) * n;
                let b2 = (r2 * p + (j1 as i64 + e.off_partner[1] as i64 + 1) as usize) * n;
                let f00 = &fp[b1..b1 + n];
                let f01 = &fp[b1 + n..b1 + 2 * n];
                let f10 = &fp[b1 + p * n..b1 + (p + 1) * n];
                let f11 = &fp[b1 + (p + 1) * n..b1 + (p + 2) * n];
                let g00 = &gp[b2..b2 + n];
                let g01 = &gp[b2 + n..b2 + 2 * n];
                let g10 = &gp[b2 + p * n..b2 + (p + 1) * n];
                let g11 = &gp[b2 + (p + 1) * n..b2 + (p + 2) * n];
                let o = &mut row[j1 * n..(j1 + 1) * n];
                for x in 0..n {
                    let fi = a0 * f00[x] + a1 * f01[x] + a2 * f10[x] + a3 * f11[x];
                    let gi = c0 * g00[x] + c1 * g01[x] + c2 * g10[x] + c3 * g11[x];
                    o[x] += wt * fi * gi;
                }
            }
        }
    }

    /// `L(f)(x, v) = Σ_{v*} f(x, v*) A(v − v*) Δv²`.
    pub fn loss_rate(&self, f: &DistributionFunction) -> Result<Vec<f64>> {
        self.check(f)?;
        let nvel = self.grid.n_vel();
        let n_eval = if f.is_x_uniform() { 1 } else { self.grid.n_space() };
        let out = self.loss_rate_slices(&f.values()[..n_eval * nvel], n_eval);
        Ok(self.spread(out, n_eval))
    }

    /// Gain term with first argument `f` and partner field `ff`.
    pub fn q_gain(&self, f: &DistributionFunction, ff: &DistributionFunction) -> Result<Vec<f64>> {
        self.check(f)?;
        self.check(ff)?;
        let n_eval = if f.is_x_uniform() && ff.is_x_uniform() { 1 } else { self.grid.n_space() };
        let m = n_eval * self.grid.n_vel();
        let out = self.gain_slices(&f.values()[..m], &ff.values()[..m], n_eval);
        Ok(self.spread(out, n_eval))
    }

    /// Gain and loss with explicit partner field `ff`; no correction or projection.
    pub fn raw_fields(
        &self,
        f: &DistributionFunction,
        ff: &DistributionFunction,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (gain, loss, _) = self.raw_fields_with_rate(f, ff)?;
        Ok((gain, loss))
    }

    fn raw_fields_with_rate(
        &self,
        f: &DistributionFunction,
        ff: &DistributionFunction,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let gain = self.q_gain(f, ff)?;
        let mut loss = self.loss_rate(ff)?;
        let max_rate = loss.iter().copied().fold(0.0, f64::max);
        for (l, fv) in loss.iter_mut().zip(f.values()) {
            *l *= fv;
        }
        Ok((gain, loss, max_rate))
    }

    /// Per-node gain scaling `M̂ L(M̂) / Q⁺(M̂, M̂)` for the discrete Maxwellian
    /// `M̂` matching the local moments of `f`, so that sampled equilibria are
    /// discrete fixed points. It is 1 where `M̂` is not resolved by the
    /// velocity grid or its gain vanishes.
    fn equilibrium_ratio(&self, f: &DistributionFunction) -> Vec<f64> {
        let grid = &*self.grid;
        let nvel = grid.n_vel();
        let min_temp = grid.cell_v();
        // Identical slices give identical ratios.
        let n_eval = if f.is_x_uniform() { 1 } else { grid.n_space() };
        let fitted: Vec<Option<Vec<f64>>> = f.values()[..n_eval * nvel]
            .par_chunks(nvel)
            .map(|a| match slice_hydrodynamics(grid, a) {
                Some((_, _, temp)) if temp >= min_temp => discrete_maxwellian(grid, a),
                _ => None,
            })
            .collect();
        let maxwellians: Vec<f64> = fitted
            .iter()
            .flat_map(|m| m.clone().unwrap_or_else(|| vec![0.0; nvel]))
            .collect();
        let gain = self.gain_slices(&maxwellians, &maxwellians, n_eval);
        let rates = self.loss_rate_slices(&maxwellians, n_eval);
        let ratio = gain
            .iter()
            .zip(&rates)
            .zip(&maxwellians)
            .map(|((g, l), m)| if *g > 0.0 { m * l / g } else { 1.0 })
            .collect();
        self.spread(ratio, n_eval)
    }

    /// Replicates a single evaluated slice over all spatial nodes.
    fn spread(&self, out: Vec<f64>, n_eval: usize) -> Vec<f64> {
        if n_eval == 1 && self.grid.n_space() > 1 {
            out.repeat(self.grid.n_space())
        } else {
            out
        }
    }

    /// Full collision field `Q(f, 𝕗)` for the given coupling, with the optional
    /// equilibrium correction and the conservative projection applied.
    pub fn collide(&self, f: &DistributionFunction, coupling: &Coupling) -> Result<CollisionField> {
        let ff = coupling.mollify(f)?;
        let (raw_gain, raw_loss, max_loss_rate) = self.raw_fields_with_rate(f, &ff)?;
        let correction = self.equilibrium_correction.then(|| {
            let ratio = self.equilibrium_ratio(f);
            raw_gain.iter().zip(&ratio).map(|(g, r)| g - g * r).collect()
        });
        let mut field = CollisionField {
            grid: self.grid.clone(),
            raw_gain,
            raw_loss,
            correction,
            projected: None,
            projection: None,
            max_loss_rate,
        };
        let (projected, report) = conserve_project(&field, f)?;
        field.projected = Some(projected);
        field.projection = Some(report);
        Ok(field)
    }

    /// Fuzzy operator `Q(f, f ∗ₓ κ^σ)`.
    pub fn q_fuzzy(&self, f: &DistributionFunction, kernel: &SpatialKernelSpec) -> Result<CollisionField> {
        self.collide(f, &Coupling::Fuzzy(kernel.clone()))
    }

    /// Classical local operator `Q(f, f)`.
    pub fn q_classical(&self, f: &DistributionFunction) -> Result<CollisionField> {
        self.collide(f, &Coupling::Local)
    }

    /// Gain and loss divided pointwise by `1 + α f`.
    pub fn q_renormalized(
        &self,
        f: &DistributionFunction,
        ff: &DistributionFunction,
        alpha: f64,
    ) -> Result<CollisionField> {
        if !(alpha >= 0.0) {
            return Err(Error::NegativeAlpha(alpha));
        }
        let (mut raw_gain, mut raw_loss, max_loss_rate) = self.raw_fields_with_rate(f, ff)?;
        if alpha > 0.0 {
            for ((g, l), fv) in raw_gain.iter_mut().zip(raw_loss.iter_mut()).zip(f.values()) {
                let d = 1.0 + alpha * fv;
                *g /= d;
                *l /= d;
            }
        }
        Ok(CollisionField {
            grid: self.grid.clone(),
            raw_gain,
            raw_loss,
            correction: None,
            projected: None,
            projection: None,
            max_loss_rate,
        })
    }
}

/// `ln ε` for the clamped logarithms in the dissipation integrand.
pub const LOG_FLOOR: f64 = -69.077_552_789_821_37;

/// Per-spatial-node gathered values for one stencil entry.
#[derive(Default)]
struct Gathered {
    post: Vec<f64>,
    log_post: Vec<f64>,
    partner: Vec<f64>,
    log_partner: Vec<f64>,
    pre: Vec<f64>,
    log_pre: Vec<f64>,
    pre_partner: Vec<f64>,
    log_pre_partner: Vec<f64>,
    /// Mollified field at `v*'` and at `v*` (fuzzy coupling only).
    moll_partner: Vec<f64>,
    moll_pre_partner: Vec<f64>,
}

impl Gathered {
    fn sized(n: usize, mollified: bool) -> Self {
        let z = || vec![0.0; n];
        let m = if mollified { n } else { 0 };
        Self {
            post: z(),
            log_post: z(),
            partner: z(),
            log_partner: z(),
            pre: z(),
            log_pre: z(),
            pre_partner: z(),
            log_pre_partner: z(),
            moll_partner: vec![0.0; m],
            moll_pre_partner: vec![0.0; m],
        }
    }
}

fn ln0(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Copies each velocity slice into a zero-bordered `(nv + 2 pad)²` block.
fn pad_wide(values: &[f64], nv: usize, pad: usize, n: usize) -> Vec<f64> {
    let w = nv + 2 * pad;
    let mut wide = vec![0.0; n * w * w];
    for (block, slice) in wide.chunks_exact_mut(w * w).zip(values.chunks_exact(nv * nv)) {
        for (r, row) in slice.chunks_exact(nv).enumerate() {
            block[(r + pad) * w + pad..(r + pad) * w + pad + nv].copy_from_slice(row);
        }
    }
    wide
}

/// `max(0, (a − b)(max(la, floor) − max(lb, floor)))`.
#[inline(always)]
fn clamped_term(a: f64, b: f64, la: f64, lb: f64) -> f64 {
    let la = if la > LOG_FLOOR { la } else { LOG_FLOOR };
    let lb = if lb > LOG_FLOOR { lb } else { LOG_FLOOR };
    let t = (a - b) * (la - lb);
    if t > 0.0 {
        t
    } else {
        0.0
    }
}

/// Velocity pairs of one stencil entry that need the direct sum over
/// `(x, x*)`, copied into contiguous per-node rows.
#[derive(Default)]
struct DirectPairs {
    idx: Vec<usize>,
    /// Per node, eight rows of `idx.len()`: post, partner, pre, pre-partner
    /// values followed by their logarithms.
    rows: Vec<f64>,
    /// Per node, the kernel-weighted sum over partners.
    out: Vec<f64>,
}

impl DirectPairs {
    fn compact(&mut self, scratch: &[Gathered], direct: &[bool]) {
        self.idx.clear();
        self.idx.extend(direct.iter().enumerate().filter(|(_, &d)| d).map(|(r, _)| r));
        let nd = self.idx.len();
        self.rows.clear();
        for g in scratch {
            for src in [
                &g.post,
                &g.partner,
                &g.pre,
                &g.pre_partner,
                &g.log_post,
                &g.log_partner,
                &g.log_pre,
                &g.log_pre_partner,
            ] {
                self.rows.extend(self.idx.iter().map(|&r| src[r]));
            }
        }
        self.out.clear();
        self.out.resize(scratch.len() * nd, 0.0);
    }

    fn sum(&mut self, wmat: &[f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { self.sum_avx2(wmat) };
            return;
        }
        self.sum_impl(wmat);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn sum_avx2(&mut self, wmat: &[f64]) {
        self.sum_impl(wmat);
    }

    #[inline(always)]
    fn sum_impl(&mut self, wmat: &[f64]) {
        let nd = self.idx.len();
        if nd == 0 {
            return;
        }
        let n = self.out.len() / nd;
        let rows = &self.rows;
        let row = |ix: usize, k: usize| &rows[(8 * ix + k) * nd..(8 * ix + k + 1) * nd];
        self.out.par_chunks_mut(nd).enumerate().for_each(|(ix, acc)| {
            let (p, f, lp, lf) = (row(ix, 0), row(ix, 2), row(ix, 4), row(ix, 6));
            for iy in 0..n {
                let wt = wmat[ix * n + iy];
                let (s, fs, ls, lfs) = (row(iy, 1), row(iy, 3), row(iy, 5), row(iy, 7));
                for q in 0..nd {
                    acc[q] += wt * clamped_term(p[q] * s[q], f[q] * fs[q], lp[q] + ls[q], lf[q] + lfs[q]);
                }
            }
        });
    }
}

impl CollisionOperator {
    #[allow(clippy::too_many_arguments)]
    fn gather(
        &self,
        e: &StencilEntry,
        wide: &[f64],
        wide_moll: Option<&[f64]>,
        f: &[f64],
        logf: &[f64],
        moll: Option<&[f64]>,
        out: &mut Gathered,
    ) {
        let nv = self.grid.nv();
        let p = self.wide_pad as i64;
        let w = nv + 2 * self.wide_pad;
        let (lo0, hi0) = (e.full[0].0 as usize, e.full[0].1 as usize);
        let (lo1, hi1) = (e.full[1].0 as usize, e.full[1].1 as usize);
        let [a0, a1, a2, a3] = e.w_post;
        let [c0, c1, c2, c3] = e.w_partner;
        let interp = |arr: &[f64], b: usize, c: [f64; 4]| {
            c[0] * arr[b] + c[1] * arr[b + 1] + c[2] * arr[b + w] + c[3] * arr[b + w + 1]
        };
        let mut r = 0;
        for j0 in lo0..hi0 {
            for j1 in lo1..hi1 {
                let b1 = (j0 as i64 + e.off_post[0] as i64 + p) as usize * w
                    + (j1 as i64 + e.off_post[1] as i64 + p) as usize;
                let b2 = (j0 as i64 + e.off_partner[0] as i64 + p) as usize * w
                    + (j1 as i64 + e.off_partner[1] as i64 + p) as usize;
                let pv = interp(wide, b1, [a0, a1, a2, a3]);
                let sv = interp(wide, b2, [c0, c1, c2, c3]);
                let j = j0 * nv + j1;
                let k = (j0 as i64 - e.shift[0] as i64) as usize * nv + (j1 as i64 - e.shift[1] as i64) as usize;
                out.post[r] = pv;
                out.log_post[r] = ln0(pv);
                out.partner[r] = sv;
                out.log_partner[r] = ln0(sv);
                out.pre[r] = f[j];
                out.log_pre[r] = logf[j];
                out.pre_partner[r] = f[k];
                out.log_pre_partner[r] = logf[k];
                if let (Some(wm), Some(m)) = (wide_moll, moll) {
                    out.moll_partner[r] = interp(wm, b2, [c0, c1, c2, c3]);
                    out.moll_pre_partner[r] = m[k];
                }
                r += 1;
            }
        }
    }

    /// Dissipation integrand field
    /// `h(x,v) = Σ_{x*,v*,ω} w(x−x*) B (a − b)(ln a − ln b) Δx^dx Δv² Δω`
    /// with `a = Ĩf(x,v') Ĩf(x*,v*')`, `b = f(x,v) f(x*,v*)` and both logarithms
    /// clamped below at [`LOG_FLOOR`]. For the local coupling `x* = x` with unit weight.
    ///
    /// Spatially uniform data takes the local path for any coupling, since the
    /// kernel weights sum to one.
    ///
    /// Where no clamp can bind, the summand splits into products of a factor at
    /// `x` and a factor at `x*`, and the sum over `x*` becomes a convolution:
    /// two linear ones read from the mollified field and two nonlinear ones done
    /// as one matrix product with the kernel matrix. The remaining velocity
    /// pairs use the direct double sum over `(x, x*)`.
    pub fn dissipation_field(&self, f: &DistributionFunction, coupling: &Coupling) -> Result<Vec<f64>> {
        self.check(f)?;
        let grid = &*self.grid;
        let nv = grid.nv();
        let nvel = grid.n_vel();
        let nsp = grid.n_space();
        let pad = self.wide_pad;
        let w = nv + 2 * pad;
        let uniform = f.is_x_uniform();
        let n_eval = if uniform { 1 } else { nsp };

        let kernel = match coupling {
            Coupling::Fuzzy(k) if !uniform => {
                if k.weights().len() != nsp {
                    return Err(Error::GridMismatch);
                }
                Some(k)
            }
            _ => None,
        };
        let wide = pad_wide(&f.values()[..n_eval * nvel], nv, pad, n_eval);
        let logf: Vec<f64> = f.values()[..n_eval * nvel].iter().map(|&v| ln0(v)).collect();
        // Kernel matrix (row-major) and the mollified field, fuzzy only.
        let (wmat, moll) = match kernel {
            Some(k) => {
                let wmat: Vec<f64> = (0..nsp * nsp)
                    .map(|i| k.weights()[grid.x_offset(i / nsp, i % nsp)] * grid.cell_x())
                    .collect();
                (wmat, Some(convolve_x(f, k)?.into_values()))
            }
            None => (Vec::new(), None),
        };
        let wide_moll = moll.as_ref().map(|m| pad_wide(m, nv, pad, nsp));

        let mut scratch: Vec<Gathered> = (0..n_eval).map(|_| Gathered::sized(nvel, kernel.is_some())).collect();
        let mut h = vec![0.0; n_eval * nvel];
        let mut acc_all = vec![0.0; n_eval * nvel];
        // Separable sums: per x, [Σ w S β | Σ w F* β] with β = ln S − ln F*.
        let mut lhs = vec![0.0; n_eval * 2 * nvel];
        let mut conv = vec![0.0; n_eval * 2 * nvel];
        let mut direct = vec![false; nvel];
        let mut mins: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; nvel]);
        let mut pairs = DirectPairs::default();
        for e in &self.entries {
            let len1 = (e.full[1].1 - e.full[1].0) as usize;
            let len = (e.full[0].1 - e.full[0].0) as usize * len1;
            if len == 0 {
                continue;
            }
            scratch.par_iter_mut().enumerate().for_each(|(ix, g)| {
                let s = ix * nvel..(ix + 1) * nvel;
                self.gather(
                    e,
                    &wide[ix * w * w..(ix + 1) * w * w],
                    wide_moll.as_ref().map(|m| &m[ix * w * w..(ix + 1) * w * w]),
                    &f.values()[s.clone()],
                    &logf[s.clone()],
                    moll.as_ref().map(|m| &m[s]),
                    g,
                )
            });
            if kernel.is_some() {
                self.separable_sums(&scratch, &wmat, len, &mut mins, &mut direct, &mut lhs, &mut conv);
                pairs.compact(&scratch, &direct[..len]);
                pairs.sum(&wmat);
            }
            let scratch_ref = &scratch;
            let (conv, direct, pairs) = (&conv, &direct, &pairs);
            acc_all
                .par_chunks_mut(nvel)
                .zip(h.par_chunks_mut(nvel))
                .enumerate()
                .for_each(|(ix, (acc, hx))| {
                    let acc = &mut acc[..len];
                    let gx = &scratch_ref[ix];
                    if kernel.is_none() {
                        for r in 0..len {
                            acc[r] = clamped_term(
                                gx.post[r] * gx.partner[r],
                                gx.pre[r] * gx.pre_partner[r],
                                gx.log_post[r] + gx.log_partner[r],
                                gx.log_pre[r] + gx.log_pre_partner[r],
                            );
                        }
                    } else {
                        let (c1, c2) = conv[ix * 2 * nvel..ix * 2 * nvel + 2 * len].split_at(len);
                        for r in 0..len {
                            if !direct[r] {
                                let alpha = gx.log_post[r] - gx.log_pre[r];
                                let t = alpha * (gx.post[r] * gx.moll_partner[r] - gx.pre[r] * gx.moll_pre_partner[r])
                                    + gx.post[r] * c1[r]
                                    - gx.pre[r] * c2[r];
                                acc[r] = if t > 0.0 { t } else { 0.0 };
                            }
                        }
                        let nd = pairs.idx.len();
                        for (q, &r) in pairs.idx.iter().enumerate() {
                            acc[r] = pairs.out[ix * nd + q];
                        }
                    }
                    let mut r = 0;
                    for j0 in e.full[0].0 as usize..e.full[0].1 as usize {
                        let row = &mut hx[j0 * nv + e.full[1].0 as usize..j0 * nv + e.full[1].1 as usize];
                        for o in row.iter_mut() {
                            *o += e.weight * acc[r];
                            r += 1;
                        }
                    }
                });
        }
        if uniform {
            Ok(self.spread(h, 1))
        } else {
            Ok(h)
        }
    }

    /// Flags the velocity pairs where a clamp may bind and fills `conv` with
    /// the kernel-weighted sums over `x*` of `S β` and `F* β` for the rest.
    #[allow(clippy::too_many_arguments)]
    fn separable_sums(
        &self,
        scratch: &[Gathered],
        wmat: &[f64],
        len: usize,
        mins: &mut [Vec<f64>; 4],
        direct: &mut [bool],
        lhs: &mut [f64],
        conv: &mut [f64],
    ) {
        let n = scratch.len();
        let nvel = self.grid.n_vel();
        for m in mins.iter_mut() {
            m[..len].fill(f64::INFINITY);
        }
        for g in scratch {
            for (m, src) in mins.iter_mut().zip([&g.log_post, &g.log_partner, &g.log_pre, &g.log_pre_partner]) {
                for (m, &v) in m[..len].iter_mut().zip(&src[..len]) {
                    *m = if v < *m { v } else { *m };
                }
            }
        }
        for (r, d) in direct[..len].iter_mut().enumerate() {
            let a = mins[0][r] + mins[1][r];
            let b = mins[2][r] + mins[3][r];
            *d = !(a >= LOG_FLOOR && b >= LOG_FLOOR);
        }
        for (iy, g) in scratch.iter().enumerate() {
            let row = &mut lhs[iy * 2 * len..(iy + 1) * 2 * len];
            let (s1, s2) = row.split_at_mut(len);
            for r in 0..len {
                if direct[r] {
                    s1[r] = 0.0;
                    s2[r] = 0.0;
                } else {
                    let beta = g.log_partner[r] - g.log_pre_partner[r];
                    s1[r] = g.partner[r] * beta;
                    s2[r] = g.pre_partner[r] * beta;
                }
            }
        }
        let cols = 2 * len;
        debug_assert!(conv.len() >= n * 2 * nvel);
        // SAFETY: all three matrices are row-major and lie within their buffers:
        // wmat is n×n, lhs holds n rows of `cols`, conv rows have stride 2·nvel ≥ cols.
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                cols,
                1.0,
                wmat.as_ptr(),
                n as isize,
                1,
                lhs.as_ptr(),
                cols as isize,
                1,
                0.0,
                conv.as_mut_ptr(),
                (2 * nvel) as isize,
                1,
            );
        }
    }
}

/// Removes the moment error of `gain − loss − correction` at every spatial node:
/// returns `Q̃ = net − Σ_j λ_j ψ_j f` with `ψ ∈ {1, v₁, v₂, |v|²}` and `λ`
/// solving the local 4×4 moment system, so that `Σ_v Q̃ ψ Δv² = 0`.
pub fn conserve_project(
    field: &CollisionField,
    f: &DistributionFunction,
) -> Result<(Vec<f64>, ProjectionReport)> {
    let grid = field.grid();
    if *f.grid() != *grid || field.raw_gain.len() != f.values().len() {
        return Err(Error::GridMismatch);
    }
    let nvel = grid.n_vel();
    let mut net = field.unprojected_net();
    let psi: Vec<[f64; 4]> = (0..nvel)
        .map(|j| {
            let v = grid.velocity(j);
            [1.0, v[0], v[1], v[0] * v[0] + v[1] * v[1]]
        })
        .collect();
    let mut report = ProjectionReport::default();
    let mut l1 = 0.0;
    for (ix, (q, fs)) in net.chunks_exact_mut(nvel).zip(f.values().chunks_exact(nvel)).enumerate() {
        let mut gram = Matrix4::<f64>::zeros();
        let mut rhs = Vector4::<f64>::zeros();
        for j in 0..nvel {
            let p = &psi[j];
            let fj = fs[j];
            for a in 0..4 {
                rhs[a] += q[j] * p[a];
                if fj != 0.0 {
                    for b in a..4 {
                        gram[(a, b)] += p[a] * p[b] * fj;
                    }
                }
            }
        }
        for a in 0..4 {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let Some(lambda) = solve_gram(gram, rhs) else {
            report.skipped.push(ix);
            continue;
        };
        for j in 0..nvel {
            let p = &psi[j];
            let corr = (lambda[0] * p[0] + lambda[1] * p[1] + lambda[2] * p[2] + lambda[3] * p[3]) * fs[j];
            q[j] -= corr;
            l1 += corr.abs();
        }
    }
    report.l1 = l1 * grid.cell();
    Ok((net, report))
}

/// Cholesky solve after diagonal scaling; `None` when the matrix is (numerically) singular.
fn solve_gram(gram: Matrix4<f64>, rhs: Vector4<f64>) -> Option<Vector4<f64>> {
    if !(gram[(0, 0)] > 0.0) {
        return None;
    }
    let d = Vector4::from_fn(|i, _| 1.0 / gram[(i, i)].sqrt());
    let scaled = Matrix4::from_fn(|i, k| gram[(i, k)] * d[i] * d[k]);
    let chol = scaled.cholesky()?;
    let l = chol.l();
    if (0..4).any(|i| !(l[(i, i)] > 1e-7)) {
        return None;
    }
    let y = chol.solve(&rhs.component_mul(&d));
    Some(y.component_mul(&d))
}
