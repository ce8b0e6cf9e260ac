//! Naive direct-sum reference implementations of the collision and
//! dissipation sums. Written independently of the tabulated kernels: every
//! post-collision velocity is computed from coordinates and interpolated on
//! the spot. Only usable on tiny grids.

use crate::collision::{CollisionOperator, Coupling, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::kernels::{CollisionKernelSpec, SpatialKernelSpec};
use crate::phase_space::{DistributionFunction, PhaseGrid};

/// Largest `Nx^dx · Nv² · Nω` the oracle accepts.
pub const ORACLE_MAX_SIZE: usize = 1 << 15;

fn check_size(grid: &PhaseGrid) -> Result<()> {
    let size = grid.n_space() * grid.n_vel() * grid.nomega();
    if size > ORACLE_MAX_SIZE {
        return Err(Error::InvalidArgument(format!(
            "oracle grid too large: Nx^dx*Nv^2*Nomega = {size} > {ORACLE_MAX_SIZE}"
        )));
    }
    Ok(())
}

/// Bilinear interpolation of one velocity slice at an arbitrary point, zero
/// outside the node lattice.
fn interpolate(grid: &PhaseGrid, slice: &[f64], v: [f64; 2]) -> f64 {
    let nv = grid.nv() as i64;
    let h = grid.spacing_v();
    let v0 = grid.v_nodes()[0];
    let p0 = (v[0] - v0) / h;
    let p1 = (v[1] - v0) / h;
    let (i0, i1) = (p0.floor() as i64, p1.floor() as i64);
    let (t0, t1) = (p0 - i0 as f64, p1 - i1 as f64);
    let at = |a: i64, b: i64| -> f64 {
        if a < 0 || b < 0 || a >= nv || b >= nv {
            0.0
        } else {
            slice[(a * nv + b) as usize]
        }
    };
    (1.0 - t0) * (1.0 - t1) * at(i0, i1)
        + (1.0 - t0) * t1 * at(i0, i1 + 1)
        + t0 * (1.0 - t1) * at(i0 + 1, i1)
        + t0 * t1 * at(i0 + 1, i1 + 1)
}

fn post_collision(v: [f64; 2], vs: [f64; 2], w: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let c = (v[0] - vs[0]) * w[0] + (v[1] - vs[1]) * w[1];
    ([v[0] - c * w[0], v[1] - c * w[1]], [vs[0] + c * w[0], vs[1] + c * w[1]])
}

/// `Σ_{x*} f(x*, v) w(x − x*) Δx^dx` by a direct double loop.
pub fn mollify(f: &DistributionFunction, kernel: &SpatialKernelSpec) -> Vec<f64> {
    let grid = f.grid();
    let nvel = grid.n_vel();
    let mut out = vec![0.0; f.values().len()];
    for ix in 0..grid.n_space() {
        for j in 0..nvel {
            let mut s = 0.0;
            for iy in 0..grid.n_space() {
                s += f.values()[iy * nvel + j] * kernel.weights()[grid.x_offset(ix, iy)] * grid.cell_x();
            }
            out[ix * nvel + j] = s;
        }
    }
    out
}

/// Direct triple sum for the gain and loss fields of `Q(f, ff)`.
pub fn gain_loss(
    f: &DistributionFunction,
    ff: &[f64],
    spec: &CollisionKernelSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = f.grid();
    check_size(grid)?;
    if ff.len() != f.values().len() {
        return Err(Error::GridMismatch);
    }
    let nvel = grid.n_vel();
    let dv2 = grid.cell_v();
    let dw = grid.angles().weight();
    let mut gain = vec![0.0; nvel * grid.n_space()];
    let mut loss = vec![0.0; nvel * grid.n_space()];
    for ix in 0..grid.n_space() {
        let fs = f.slice(ix);
        let gs = &ff[ix * nvel..(ix + 1) * nvel];
        for j in 0..nvel {
            let v = grid.velocity(j);
            let (mut g, mut l) = (0.0, 0.0);
            for k in 0..nvel {
                let vs = grid.velocity(k);
                for &w in grid.angles().nodes() {
                    let b = spec.eval_b_checked([v[0] - vs[0], v[1] - vs[1]], w)?;
                    let (vp, vsp) = post_collision(v, vs, w);
                    g += b * interpolate(grid, fs, vp) * interpolate(grid, gs, vsp) * dv2 * dw;
                    l += b * gs[k] * dv2 * dw;
                }
            }
            gain[ix * nvel + j] = g;
            loss[ix * nvel + j] = fs[j] * l;
        }
    }
    Ok((gain, loss))
}

/// Direct quintuple sum for `D`, with the same logarithm clamping as the
/// optimised kernel.
pub fn dissipation(f: &DistributionFunction, coupling: &Coupling, spec: &CollisionKernelSpec) -> Result<f64> {
    let grid = f.grid();
    check_size(grid)?;
    let nvel = grid.n_vel();
    let dv2 = grid.cell_v();
    let dw = grid.angles().weight();
    let mut total = 0.0;
    for ix in 0..grid.n_space() {
        let partners: Vec<(usize, f64)> = match coupling {
            Coupling::Local => vec![(ix, 1.0)],
            Coupling::Fuzzy(k) => (0..grid.n_space())
                .map(|iy| (iy, k.weights()[grid.x_offset(ix, iy)] * grid.cell_x()))
                .collect(),
        };
        for (iy, wt) in partners {
            let fa = f.slice(ix);
            let fb = f.slice(iy);
            for j in 0..nvel {
                let v = grid.velocity(j);
                for k in 0..nvel {
                    let vs = grid.velocity(k);
                    for &w in grid.angles().nodes() {
                        let b = spec.eval_b_checked([v[0] - vs[0], v[1] - vs[1]], w)?;
                        let (vp, vsp) = post_collision(v, vs, w);
                        let (p, q) = (interpolate(grid, fa, vp), interpolate(grid, fb, vsp));
                        let pa = p * q;
                        let pb = fa[j] * fb[k];
                        let la = log_product(p, q);
                        let lb = log_product(fa[j], fb[k]);
                        total += wt * b * ((pa - pb) * (la - lb)).max(0.0) * dv2 * dw * dv2;
                    }
                }
            }
        }
    }
    Ok(0.25 * total * grid.cell_x())
}

fn log_product(p: f64, q: f64) -> f64 {
    if p > 0.0 && q > 0.0 {
        (p.ln() + q.ln()).max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Result of comparing the optimised operator with the direct sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub gain_fuzzy: f64,
    pub loss_fuzzy: f64,
    pub gain_local: f64,
    pub loss_local: f64,
    pub dissipation_fuzzy: f64,
    pub dissipation_local: f64,
}

impl OracleReport {
    /// Largest deviation among the collision fields.
    pub fn max_field(&self) -> f64 {
        self.gain_fuzzy
            .max(self.loss_fuzzy)
            .max(self.gain_local)
            .max(self.loss_local)
    }

    pub fn max_dissipation(&self) -> f64 {
        self.dissipation_fuzzy.max(self.dissipation_local)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares gain, loss (fuzzy and local) and dissipation of `op` with the
/// direct sums on `f`. Dissipation deviations are relative to the oracle value.
pub fn cross_check(
    op: &CollisionOperator,
    f: &DistributionFunction,
    kernel: &SpatialKernelSpec,
) -> Result<OracleReport> {
    let fuzzy = Coupling::Fuzzy(kernel.clone());
    let ff = mollify(f, kernel);
    let (g_o, l_o) = gain_loss(f, &ff, op.spec())?;
    let cf = op.collide(f, &fuzzy)?;
    let (g_l, l_l) = gain_loss(f, f.values(), op.spec())?;
    let cl = op.collide(f, &Coupling::Local)?;
    let d_fo = dissipation(f, &fuzzy, op.spec())?;
    let d_lo = dissipation(f, &Coupling::Local, op.spec())?;
    let d_f = crate::diagnostics::dissipation(op, f, &fuzzy)?;
    let d_l = crate::diagnostics::dissipation(op, f, &Coupling::Local)?;
    Ok(OracleReport {
        gain_fuzzy: max_abs_diff(&cf.raw_gain, &g_o),
        loss_fuzzy: max_abs_diff(&cf.raw_loss, &l_o),
        gain_local: max_abs_diff(&cl.raw_gain, &g_l),
        loss_local: max_abs_diff(&cl.raw_loss, &l_l),
        dissipation_fuzzy: (d_f - d_fo).abs() / d_fo.abs().max(f64::MIN_POSITIVE),
        dissipation_local: (d_l - d_lo).abs() / d_lo.abs().max(f64::MIN_POSITIVE),
    })
}
