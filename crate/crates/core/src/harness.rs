//! Configuration files, σ-sweeps against the local reference, rate fitting,
//! CSV reports and the tiny-grid oracle driver.
//!
//! Config files are flat UTF-8 `key = value` lines; `#` starts a comment and
//! keys carry dotted section prefixes (`grid.Nx = 32`). [`CONFIG_KEYS`] lists
//! every key with its default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diagnostics::DiagnosticsRecord;
use crate::dynamics::{
    run, DiagConfig, InitialCondition, KernelConfig, Mode, ProfileKind, SimConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::kernels::{build_spatial_kernel, DEFAULT_IMAGES};
use crate::oracle::{cross_check, OracleReport};
use crate::phase_space::{l1_distance, DistributionFunction};

/// One documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct ConfigKey {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> ConfigKey {
    ConfigKey { key, default, doc }
}

/// Every accepted key with its default. `auto` and `none` are literal values.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("grid.dx", "1", "spatial dimension, 1 or 2"),
    key("grid.Lx", "1", "torus period per spatial axis"),
    key("grid.Nx", "32", "spatial points per axis, >= 2"),
    key("grid.vmax", "6", "velocity box half-width"),
    key("grid.Nv", "32", "velocity points per axis, even, >= 4"),
    key("grid.Nomega", "16", "angular nodes, even, >= 4"),
    key("kernel.mu", "0", "hardness exponent in [0, 1]"),
    key("kernel.profile", "constant", "angular profile: constant | cosine"),
    key("kernel.supb", "0.15915494309189535", "sup of the angular profile (default 1/2pi)"),
    key("kernel.cap", "none", "declared bound on B/<v>^mu; none uses supb"),
    key("kernel.images", "3", "periodic images per side when sampling the mollifier"),
    key("mode", "fuzzy", "collision coupling: fuzzy | local"),
    key("sigma", "0.1", "mollifier width in (0, 1]; fuzzy mode only"),
    key("ic", "x_modulated_maxwellian", "maxwellian | two_bump_v | x_modulated_maxwellian | indicator_box | custom_snapshot"),
    key("ic.rho", "1", "density (maxwellian, two_bump_v, x_modulated_maxwellian)"),
    key("ic.u1", "0", "bulk velocity, first component (maxwellian, x_modulated_maxwellian)"),
    key("ic.u2", "0", "bulk velocity, second component (maxwellian, x_modulated_maxwellian)"),
    key("ic.T", "1", "temperature (maxwellian, two_bump_v, x_modulated_maxwellian)"),
    key("ic.amplitude", "0.3", "density modulation amplitude, |a| < 1 (x_modulated_maxwellian)"),
    key("ic.offset", "1.5", "bump centres at (+-offset, 0) (two_bump_v)"),
    key("ic.half_width", "2", "box half-width in velocity (indicator_box)"),
    key("ic.mass", "1", "total mass (indicator_box)"),
    key("ic.path", "none", "FBZ1 snapshot on the same grid (custom_snapshot)"),
    key("time.T", "1", "final time, >= 0"),
    key("time.dt", "auto", "step size; auto takes it from the positivity condition on f0"),
    key("time.eta", "0.5", "positivity margin: dt * max L must stay below it"),
    key("output.stride", "1", "steps between stored snapshots"),
    key("diag.stride", "1", "steps between diagnostics records; 0 disables them"),
    key("diag.dissipation_stride", "5", "steps between dissipation evaluations; 0 disables them"),
    key("diag.comparison", "true", "check the comparison inequality with every dissipation evaluation"),
    key("diag.moments", "", "comma-separated orders s of the recorded M_s"),
    key("scheme.equilibrium_correction", "true", "scale the gain so that sampled Maxwellians are fixed points"),
    key("residual.alpha", "none", "record running renormalised residuals with this alpha"),
    key("seed", "0", "seed of the random data used by the oracle check"),
];

/// Keys read by each initial condition.
fn ic_keys(ic: &str) -> &'static [&'static str] {
    match ic {
        "maxwellian" => &["ic.rho", "ic.u1", "ic.u2", "ic.T"],
        "two_bump_v" => &["ic.rho", "ic.offset", "ic.T"],
        "x_modulated_maxwellian" => &["ic.rho", "ic.u1", "ic.u2", "ic.T", "ic.amplitude"],
        "indicator_box" => &["ic.half_width", "ic.mass"],
        "custom_snapshot" => &["ic.path"],
        _ => &[],
    }
}

/// Values collected from a config file, keyed by their table entry.
struct Fields<'a> {
    origin: &'a str,
    set: BTreeMap<&'static str, (usize, String)>,
}

impl Fields<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.origin.to_string(),
            line: self.set.get(key).map_or(0, |(l, _)| *l),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn is_set(&self, key: &str) -> bool {
        self.set.contains_key(key)
    }

    fn raw(&self, key: &'static str) -> &str {
        match self.set.get(key) {
            Some((_, v)) => v,
            None => CONFIG_KEYS
                .iter()
                .find(|k| k.key == key)
                .map(|k| k.default)
                .expect("key is in the table"),
        }
    }

    fn f64_where(&self, key: &'static str, ok: impl Fn(f64) -> bool, want: &str) -> Result<f64> {
        let raw = self.raw(key);
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(key, format!("expected a number, got `{raw}`")))?;
        if !v.is_finite() || !ok(v) {
            return Err(self.err(key, format!("must be {want}, got {v}")));
        }
        Ok(v)
    }

    fn usize_where(&self, key: &'static str, ok: impl Fn(usize) -> bool, want: &str) -> Result<usize> {
        let raw = self.raw(key);
        let v: usize = raw
            .parse()
            .map_err(|_| self.err(key, format!("expected a non-negative integer, got `{raw}`")))?;
        if !ok(v) {
            return Err(self.err(key, format!("must be {want}, got {v}")));
        }
        Ok(v)
    }

    fn bool(&self, key: &'static str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.err(key, format!("expected true or false, got `{other}`"))),
        }
    }

    /// `None` for the literal `none` (or `auto`).
    fn optional_f64(&self, key: &'static str, literal: &str, ok: impl Fn(f64) -> bool, want: &str) -> Result<Option<f64>> {
        if self.raw(key) == literal {
            Ok(None)
        } else {
            self.f64_where(key, ok, want).map(Some)
        }
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Parses config text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<SimConfig> {
    let mut f = Fields { origin, set: BTreeMap::new() };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let config_err = |key: &str, message: String| Error::Config {
            path: origin.to_string(),
            line,
            key: key.to_string(),
            message,
        };
        let Some((k, v)) = content.split_once('=') else {
            return Err(config_err(content, "expected `key = value`".into()));
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(spec) = CONFIG_KEYS.iter().find(|s| s.key == k) else {
            return Err(config_err(k, "unknown key".into()));
        };
        if let Some((first, _)) = f.set.get(spec.key) {
            return Err(config_err(k, format!("duplicate key (first set on line {first})")));
        }
        f.set.insert(spec.key, (line, v.to_string()));
    }
    build_config(&f)
}

fn build_config(f: &Fields) -> Result<SimConfig> {
    let positive = |v: f64| v > 0.0;
    let dim_x = f.usize_where("grid.dx", |v| v == 1 || v == 2, "1 or 2")?;
    let length = f.f64_where("grid.Lx", positive, "positive")?;
    let nx = f.usize_where("grid.Nx", |v| v >= 2, ">= 2")?;
    let vmax = f.f64_where("grid.vmax", positive, "positive")?;
    let nv = f.usize_where("grid.Nv", |v| v >= 4 && v % 2 == 0, "even and >= 4")?;
    let nomega = f.usize_where("grid.Nomega", |v| v >= 4 && v % 2 == 0, "even and >= 4")?;

    let profile = match f.raw("kernel.profile") {
        "constant" => ProfileKind::Constant,
        "cosine" => ProfileKind::Cosine,
        other => return Err(f.err("kernel.profile", format!("expected constant or cosine, got `{other}`"))),
    };
    let kernel = KernelConfig {
        mu: f.f64_where("kernel.mu", |v| (0.0..=1.0).contains(&v), "in [0, 1]")?,
        profile,
        supb: f.f64_where("kernel.supb", |v| v >= 0.0, ">= 0")?,
        cap: f.optional_f64("kernel.cap", "none", |v| v >= 0.0, ">= 0")?,
    };
    let images = f.usize_where("kernel.images", |v| v >= 1, ">= 1")?;

    let mode = match f.raw("mode") {
        "local" => {
            if f.is_set("sigma") {
                return Err(f.err("sigma", "sigma is not used with mode = local"));
            }
            Mode::Local
        }
        "fuzzy" => {
            let raw = f.raw("sigma");
            let sigma: f64 = raw
                .parse()
                .map_err(|_| f.err("sigma", format!("expected a number, got `{raw}`")))?;
            if sigma == 0.0 {
                return Err(f.err("sigma", "sigma must lie in (0, 1]; use mode=local for the classical limit"));
            }
            if !(sigma > 0.0 && sigma <= 1.0) {
                return Err(f.err("sigma", format!("sigma must lie in (0, 1], got {sigma}")));
            }
            Mode::Fuzzy { sigma }
        }
        other => return Err(f.err("mode", format!("expected fuzzy or local, got `{other}`"))),
    };

    let ic_name = f.raw("ic").to_string();
    let used = ic_keys(&ic_name);
    if used.is_empty() {
        return Err(f.err("ic", format!("unknown initial condition `{ic_name}`")));
    }
    for k in CONFIG_KEYS.iter().map(|k| k.key).filter(|k| k.starts_with("ic.")) {
        if f.is_set(k) && !used.contains(&k) {
            return Err(f.err(k, format!("not used by ic = {ic_name}")));
        }
    }
    let any = |_: f64| true;
    let ic = match ic_name.as_str() {
        "maxwellian" => InitialCondition::Maxwellian {
            rho: f.f64_where("ic.rho", positive, "positive")?,
            u: [f.f64_where("ic.u1", any, "finite")?, f.f64_where("ic.u2", any, "finite")?],
            temp: f.f64_where("ic.T", positive, "positive")?,
        },
        "two_bump_v" => InitialCondition::TwoBumpV {
            rho: f.f64_where("ic.rho", positive, "positive")?,
            offset: f.f64_where("ic.offset", any, "finite")?,
            temp: f.f64_where("ic.T", positive, "positive")?,
        },
        "x_modulated_maxwellian" => InitialCondition::XModulatedMaxwellian {
            rho: f.f64_where("ic.rho", positive, "positive")?,
            u: [f.f64_where("ic.u1", any, "finite")?, f.f64_where("ic.u2", any, "finite")?],
            temp: f.f64_where("ic.T", positive, "positive")?,
            amplitude: f.f64_where("ic.amplitude", |a| a.abs() < 1.0, "in (-1, 1)")?,
        },
        "indicator_box" => InitialCondition::IndicatorBox {
            half_width: f.f64_where("ic.half_width", positive, "positive")?,
            mass: f.f64_where("ic.mass", positive, "positive")?,
        },
        _ => {
            let p = f.raw("ic.path");
            if p == "none" {
                return Err(f.err("ic.path", "custom_snapshot needs a snapshot path"));
            }
            InitialCondition::CustomSnapshot { path: PathBuf::from(p) }
        }
    };

    let t_final = f.f64_where("time.T", |v| v >= 0.0, ">= 0")?;
    let dt = f.optional_f64("time.dt", "auto", positive, "positive or auto")?;
    if let Some(dt) = dt {
        if t_final > 0.0 && t_final < dt {
            return Err(f.err("time.dt", format!("exceeds time.T = {t_final}")));
        }
    }
    let cfl_eta = f.f64_where("time.eta", |v| v > 0.0 && v < 1.0, "in (0, 1)")?;
    let output_stride = f.usize_where("output.stride", |v| v >= 1, ">= 1")?;

    let moments_raw = f.raw("diag.moments");
    let moments = if moments_raw.is_empty() {
        Vec::new()
    } else {
        moments_raw
            .split(',')
            .map(|s| match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(f.err("diag.moments", format!("expected non-negative numbers, got `{}`", s.trim()))),
            })
            .collect::<Result<Vec<_>>>()?
    };
    let diag = DiagConfig {
        stride: f.usize_where("diag.stride", |_| true, "")?,
        dissipation_stride: f.usize_where("diag.dissipation_stride", |_| true, "")?,
        comparison: f.bool("diag.comparison")?,
        moments,
    };
    let residual_alpha = f.optional_f64("residual.alpha", "none", positive, "positive")?;
    if residual_alpha.is_some() && (output_stride != 1 || diag.stride != 1) {
        return Err(f.err("residual.alpha", "needs output.stride = 1 and diag.stride = 1"));
    }
    let seed_raw = f.raw("seed");
    let seed: u64 = seed_raw
        .parse()
        .map_err(|_| f.err("seed", format!("expected a non-negative integer, got `{seed_raw}`")))?;

    let config = SimConfig {
        dim_x,
        length,
        nx,
        vmax,
        nv,
        nomega,
        kernel,
        mode,
        images,
        ic,
        t_final,
        dt,
        cfl_eta,
        output_stride,
        diag,
        seed,
        equilibrium_correction: f.bool("scheme.equilibrium_correction")?,
        residual_alpha,
    };
    // Remaining cross-key checks (profile and cap against the grid).
    let spec = config.kernel.build().map_err(|e| f.err("kernel.cap", e.to_string()))?;
    let grid = config.grid().map_err(|e| f.err("grid.Nv", e.to_string()))?;
    spec.validate_cap(&grid).map_err(|e| f.err("kernel.cap", e.to_string()))?;
    config.validate().map_err(|e| f.err("time.T", e.to_string()))?;
    Ok(config)
}

/// The default acceptance sweep configuration: a density-modulated Maxwellian
/// on `Nx = 32`, `Nv = 32`, `Nω = 16`, Maxwell molecules, `T = 1`, `dt = 0.01`.
/// Same as `configs/default_sweep.cfg`.
pub fn default_sweep_config() -> SimConfig {
    let base = SimConfig::default();
    SimConfig {
        dt: Some(0.01),
        images: DEFAULT_IMAGES,
        diag: DiagConfig { stride: 10, dissipation_stride: 50, ..base.diag.clone() },
        ..base
    }
}

/// Least-squares slope of `log d` against `log σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub p_hat: f64,
    pub r_squared: f64,
    /// Points dropped because their distance was exactly zero.
    pub excluded_zero: usize,
    /// Slope not positive: the distances do not shrink with σ.
    pub non_convergent: bool,
}

/// Fits `d ≈ C σ^p`. Zero distances are excluded and counted; negative ones
/// are errors; fewer than two usable points is an error.
pub fn fit_rate(distances: &[f64], sigmas: &[f64]) -> Result<RateFit> {
    if distances.len() != sigmas.len() {
        return Err(Error::InvalidArgument("distances and sigmas differ in length".into()));
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("distances must be finite and >= 0, got {d}")));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("sigmas must be positive, got {s}")));
    }
    let pts: Vec<(f64, f64)> = sigmas
        .iter()
        .zip(distances)
        .filter(|(_, d)| **d > 0.0)
        .map(|(s, d)| (s.ln(), d.ln()))
        .collect();
    let excluded_zero = distances.len() - pts.len();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least 2 positive distances, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("rate fit needs at least two distinct sigmas".into()));
    }
    let p_hat = sxy / sxx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - my - p_hat * (p.0 - mx)).powi(2)).sum();
    // A constant series is fitted exactly by the flat line.
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        p_hat,
        r_squared,
        excluded_zero,
        non_convergent: p_hat <= 0.0,
    })
}

/// Distances of one fuzzy run from the local reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    /// `sup_t ‖f^σ_t − f_t‖_{L¹}` over the stored snapshots.
    pub sup_l1: f64,
    pub final_l1: f64,
    /// `sup_t Σ_x |Σ_v (f^σ − f) φ Δv²| Δx^dx` for `φ ≡ 1`.
    pub vavg_one: f64,
    /// Same with `φ = ⟨v⟩⁻²`.
    pub vavg_weighted: f64,
}

impl SweepRow {
    /// Larger of the two velocity-average distances.
    pub fn vavg_l1(&self) -> f64 {
        self.vavg_one.max(self.vavg_weighted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// One row per σ, in decreasing σ.
    pub rows: Vec<SweepRow>,
    /// Fit of `sup_l1`; `None` when undefined (fewer than two usable points).
    pub fit: Option<RateFit>,
    /// Fit of `vavg_l1`.
    pub vavg_fit: Option<RateFit>,
    pub reference: String,
    /// Largest relative comparison defect over all recorded evaluations.
    pub max_comparison: Option<f64>,
    /// Largest relative drift of mass, momentum and energy over all runs.
    pub max_drift: [f64; 3],
}

impl SweepReport {
    pub fn sup_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].sup_l1 < w[0].sup_l1)
    }

    pub fn vavg_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].vavg_l1() < w[0].vavg_l1())
    }
}

fn describe(config: &SimConfig, dt: f64) -> String {
    format!(
        "local collision run, dx={} Lx={} Nx={} vmax={} Nv={} Nomega={} mu={} dt={} T={} ic={}",
        config.dim_x,
        config.length,
        config.nx,
        config.vmax,
        config.nv,
        config.nomega,
        config.kernel.mu,
        dt,
        config.t_final,
        config.ic.id()
    )
}

fn vavg_distance(f: &DistributionFunction, g: &DistributionFunction, weight: &[f64]) -> f64 {
    let grid = f.grid();
    let nvel = grid.n_vel();
    let mut total = 0.0;
    for (a, b) in f.values().chunks_exact(nvel).zip(g.values().chunks_exact(nvel)) {
        let s: f64 = a.iter().zip(b).zip(weight).map(|((x, y), w)| (x - y) * w).sum();
        total += s.abs();
    }
    total * grid.cell()
}

fn compare(reference: &Trajectory, run: &Trajectory, sigma: f64) -> Result<SweepRow> {
    if reference.snapshots.len() != run.snapshots.len() {
        return Err(Error::GridMismatch);
    }
    let grid = reference.initial().grid();
    let one = vec![1.0; grid.n_vel()];
    let bracket: Vec<f64> = (0..grid.n_vel())
        .map(|j| {
            let v = grid.velocity(j);
            1.0 / (1.0 + v[0] * v[0] + v[1] * v[1])
        })
        .collect();
    let mut row = SweepRow { sigma, sup_l1: 0.0, final_l1: 0.0, vavg_one: 0.0, vavg_weighted: 0.0 };
    for ((ta, a), (tb, b)) in reference.snapshots.iter().zip(&run.snapshots) {
        if ta != tb {
            return Err(Error::InvalidArgument(format!("snapshot times differ: {ta} vs {tb}")));
        }
        let d = l1_distance(b, a)?;
        row.sup_l1 = row.sup_l1.max(d);
        row.final_l1 = d;
        row.vavg_one = row.vavg_one.max(vavg_distance(b, a, &one));
        row.vavg_weighted = row.vavg_weighted.max(vavg_distance(b, a, &bracket));
    }
    Ok(row)
}

/// Relative drifts of mass, momentum (scaled by `mass·√energy/mass`) and energy.
pub fn conservation_drift(traj: &Trajectory) -> [f64; 3] {
    let m0 = crate::phase_space::moments(traj.initial());
    let p_scale = (m0.mass * m0.energy).sqrt().max(f64::MIN_POSITIVE);
    let mut out = [0.0f64; 3];
    for (_, f) in &traj.snapshots {
        let m = crate::phase_space::moments(f);
        out[0] = out[0].max((m.mass - m0.mass).abs() / m0.mass.abs().max(f64::MIN_POSITIVE));
        let dp = (m.momentum[0] - m0.momentum[0]).hypot(m.momentum[1] - m0.momentum[1]);
        out[1] = out[1].max(dp / p_scale);
        out[2] = out[2].max((m.energy - m0.energy).abs() / m0.energy.abs().max(f64::MIN_POSITIVE));
    }
    out
}

/// Largest relative comparison defect among the records, if any was evaluated.
pub fn max_comparison(records: &[DiagnosticsRecord]) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| r.comparison.as_ref().map(|c| c.relative()))
        .reduce(f64::max)
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("sigma list is empty".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Error::SigmaOutOfRange(*s));
    }
    if sigmas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("sigma list must be strictly decreasing".into()));
    }
    Ok(())
}

/// Runs the local reference once, then one fuzzy run per σ on the same grid,
/// initial condition and step. `parallel` runs the σ cases concurrently; the
/// report is identical either way.
pub fn run_sweep(base: &SimConfig, sigmas: &[f64], parallel: bool) -> Result<SweepReport> {
    check_sigmas(sigmas)?;
    let reference_config = base.local();
    let reference = run(&reference_config)?;
    // Fix the step of the fuzzy runs to the reference step.
    let mut fuzzy_base = base.clone();
    fuzzy_base.dt = Some(reference.dt);
    let one = |&sigma: &f64| -> Result<(SweepRow, Option<f64>, [f64; 3])> {
        let traj = run(&fuzzy_base.with_sigma(sigma))?;
        Ok((compare(&reference, &traj, sigma)?, max_comparison(&traj.records), conservation_drift(&traj)))
    };
    let results: Vec<_> = if parallel {
        sigmas.par_iter().map(one).collect::<Result<_>>()?
    } else {
        sigmas.iter().map(one).collect::<Result<_>>()?
    };
    let mut max_cmp = max_comparison(&reference.records);
    let mut max_drift = conservation_drift(&reference);
    let mut rows = Vec::with_capacity(results.len());
    for (row, cmp, drift) in results {
        rows.push(row);
        max_cmp = match (max_cmp, cmp) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        for k in 0..3 {
            max_drift[k] = max_drift[k].max(drift[k]);
        }
    }
    let s: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    let sup: Vec<f64> = rows.iter().map(|r| r.sup_l1).collect();
    let vavg: Vec<f64> = rows.iter().map(|r| r.vavg_l1()).collect();
    Ok(SweepReport {
        fit: fit_rate(&sup, &s).ok(),
        vavg_fit: fit_rate(&vavg, &s).ok(),
        rows,
        reference: describe(&reference_config, reference.dt),
        max_comparison: max_cmp,
        max_drift,
    })
}

/// Fixed 17-significant-digit formatting used by every CSV writer.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sweep CSV: one row per σ, then the `p_hat` and `r_squared` footer rows
/// (empty values when the fit is undefined).
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("sigma,sup_l1,final_l1,vavg_l1\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", fmt17(r.sigma), fmt17(r.sup_l1), fmt17(r.final_l1), fmt17(r.vavg_l1()));
    }
    let (p, r2) = report
        .fit
        .map_or((String::new(), String::new()), |f| (fmt17(f.p_hat), fmt17(f.r_squared)));
    let _ = writeln!(out, "p_hat,{p}");
    let _ = writeln!(out, "r_squared,{r2}");
    out
}

/// Human-readable summary of a sweep.
pub fn sweep_summary(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "sigma sweep against {}", report.reference);
    let _ = writeln!(out, "{:>8}  {:>12}  {:>12}  {:>12}  {:>12}", "sigma", "sup_l1", "final_l1", "vavg(1)", "vavg(<v>^-2)");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:>8}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>12.4e}",
            r.sigma, r.sup_l1, r.final_l1, r.vavg_one, r.vavg_weighted
        );
    }
    let fit_line = |name: &str, fit: &Option<RateFit>| match fit {
        Some(f) => format!(
            "{name}: p_hat = {:.4}, R^2 = {:.4}{}{}",
            f.p_hat,
            f.r_squared,
            if f.non_convergent { " [non-convergent]" } else { "" },
            if f.excluded_zero > 0 { format!(" [{} zero distances excluded]", f.excluded_zero) } else { String::new() }
        ),
        None => format!("{name}: p_hat undefined [fewer than two usable points]"),
    };
    let _ = writeln!(out, "{}", fit_line("sup_l1 fit", &report.fit));
    let _ = writeln!(out, "{}", fit_line("vavg_l1 fit", &report.vavg_fit));
    let _ = writeln!(
        out,
        "sup_l1 strictly decreasing: {}; vavg_l1 strictly decreasing: {}",
        report.sup_strictly_decreasing(),
        report.vavg_strictly_decreasing()
    );
    let _ = writeln!(
        out,
        "max relative drift: mass {:.3e}, momentum {:.3e}, energy {:.3e}",
        report.max_drift[0], report.max_drift[1], report.max_drift[2]
    );
    match report.max_comparison {
        Some(c) => {
            let _ = writeln!(out, "max relative comparison defect: {c:.3e}");
        }
        None => {
            let _ = writeln!(out, "comparison inequality not evaluated");
        }
    }
    out
}

/// Diagnostics CSV. `D` is empty in rows where it was not evaluated.
pub fn diagnostics_csv(records: &[DiagnosticsRecord], residual_names: &[String]) -> String {
    let mut out = String::from("t,mass,px,py,energy,H,D,clipped_mass,projection_l1");
    if let Some(first) = records.first() {
        for (s, _) in &first.moments_s {
            let _ = write!(out, ",M_{s}");
        }
    }
    for name in residual_names {
        let _ = write!(out, ",R_{name}");
    }
    out.push('\n');
    for r in records {
        let d = if r.dissipation.is_finite() { fmt17(r.dissipation) } else { String::new() };
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt17(r.t),
            fmt17(r.moments.mass),
            fmt17(r.moments.momentum[0]),
            fmt17(r.moments.momentum[1]),
            fmt17(r.moments.energy),
            fmt17(r.entropy),
            d,
            fmt17(r.clipped_mass),
            fmt17(r.projection_l1)
        );
        for (_, m) in &r.moments_s {
            let _ = write!(out, ",{}", fmt17(*m));
        }
        for v in &r.residuals {
            let _ = write!(out, ",{}", fmt17(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tolerances of the oracle comparison.
pub const ORACLE_FIELD_TOL: f64 = 1e-12;
pub const ORACLE_DISSIPATION_TOL: f64 = 1e-10;

/// Uniform random values in `[0.05, 1)` on the configured grid, seeded by `config.seed`.
pub fn random_distribution(config: &SimConfig) -> Result<DistributionFunction> {
    let grid = Arc::new(config.grid()?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let values = (0..grid.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    DistributionFunction::new(grid, values)
}

/// Cross-checks the optimised operator against the direct sums on random data.
/// The fuzzy coupling uses the configured σ, or 0.1 in local mode.
pub fn oracle_check(config: &SimConfig) -> Result<OracleReport> {
    config.validate()?;
    let f = random_distribution(config)?;
    let spec = config.kernel.build()?;
    let op = crate::collision::CollisionOperator::new(f.grid_arc().clone(), spec);
    let sigma = match config.mode {
        Mode::Fuzzy { sigma } => sigma,
        Mode::Local => 0.1,
    };
    let kernel = build_spatial_kernel(sigma, f.grid(), config.images)?;
    let report = cross_check(&op, &f, &kernel)?;
    if report.max_field() > ORACLE_FIELD_TOL {
        return Err(Error::OracleMismatch { deviation: report.max_field(), tolerance: ORACLE_FIELD_TOL });
    }
    if report.max_dissipation() > ORACLE_DISSIPATION_TOL {
        return Err(Error::OracleMismatch {
            deviation: report.max_dissipation(),
            tolerance: ORACLE_DISSIPATION_TOL,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SimConfig> {
        parse_config_str(text, "test.cfg")
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.dt, None);
        assert_eq!(c.cfl_eta, 0.5);
        assert_eq!(c.images, 3);
        assert_eq!(c.mode, Mode::Fuzzy { sigma: 0.1 });
        assert_eq!((c.nx, c.nv, c.nomega), (32, 32, 16));
        assert!((c.kernel.supb - 1.0 / std::f64::consts::TAU).abs() < 1e-17);
        assert_eq!(c, SimConfig::default());
    }

    #[test]
    fn shipped_sweep_file_matches_builtin() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default_sweep.cfg");
        assert_eq!(parse_config(std::path::Path::new(path)).unwrap(), default_sweep_config());
    }

    #[test]
    fn minimal_grid_and_ic_file() {
        let c = parse("# tiny\ngrid.Nx = 8\ngrid.Nv = 12   # even\nic = maxwellian\nic.T = 0.5\n").unwrap();
        assert_eq!(c.nx, 8);
        assert_eq!(c.nv, 12);
        assert_eq!(c.ic, InitialCondition::Maxwellian { rho: 1.0, u: [0.0, 0.0], temp: 0.5 });
        assert_eq!(c.dt, None);
    }

    #[test]
    fn errors_name_key_and_line() {
        let cases = [
            ("grid.Nx = 8\nsigma = 0\n", "sigma", 2, "use mode=local for the classical limit"),
            ("grid.Nx = 8\ngrid.Nx = 9\n", "grid.Nx", 2, "duplicate key (first set on line 1)"),
            ("\n\ngrid.bogus = 1\n", "grid.bogus", 3, "unknown key"),
            ("grid.Nv = seven\n", "grid.Nv", 1, "expected a non-negative integer"),
            ("grid.Nv = 7\n", "grid.Nv", 1, "even"),
            ("ic = maxwellian\nic.offset = 1\n", "ic.offset", 2, "not used by ic = maxwellian"),
            ("mode = local\nsigma = 0.2\n", "sigma", 2, "not used with mode = local"),
            ("time.T = 0.1\ntime.dt = 0.2\n", "time.dt", 2, "exceeds time.T"),
            ("diag.moments = 2, x\n", "diag.moments", 1, "non-negative numbers"),
            ("just text\n", "just text", 1, "expected `key = value`"),
        ];
        for (text, key, line, msg) in cases {
            match parse(text) {
                Err(Error::Config { key: k, line: l, message, .. }) => {
                    assert_eq!((k.as_str(), l), (key, line), "{text}");
                    assert!(message.contains(msg), "{message}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_file_names_path() {
        let e = parse_config("/nonexistent/dir/run.cfg").unwrap_err();
        assert!(e.to_string().contains("/nonexistent/dir/run.cfg"));
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn every_default_parses() {
        for k in CONFIG_KEYS {
            let text = format!("{} = {}\n", k.key, k.default);
            // The ic.* keys are rejected unless the default IC reads them.
            let ok = parse(&text).is_ok() || (k.key.starts_with("ic.") && !ic_keys("x_modulated_maxwellian").contains(&k.key));
            assert!(ok, "{}", k.key);
        }
    }

    #[test]
    fn rate_fit_examples() {
        let s = [0.4, 0.2, 0.1, 0.05];
        let lin: Vec<f64> = s.to_vec();
        let f = fit_rate(&lin, &s).unwrap();
        assert!((f.p_hat - 1.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let quad: Vec<f64> = s.iter().map(|x| x * x).collect();
        let f = fit_rate(&quad, &s).unwrap();
        assert!((f.p_hat - 2.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let f = fit_rate(&[0.3; 4], &s).unwrap();
        assert!(f.p_hat.abs() < 1e-12 && f.non_convergent);
        let f = fit_rate(&[0.4, 0.0, 0.1, 0.05], &s).unwrap();
        assert_eq!(f.excluded_zero, 1);
        assert!(fit_rate(&[0.1], &[0.1]).is_err());
        assert!(fit_rate(&[0.1, -0.1], &[0.2, 0.1]).is_err());
    }

    #[test]
    fn sigma_list_validation() {
        assert!(check_sigmas(&[0.4, 0.2]).is_ok());
        assert!(check_sigmas(&[0.2, 0.4]).is_err());
        assert!(check_sigmas(&[0.2, 0.2]).is_err());
        assert!(check_sigmas(&[1.5]).is_err());
        assert!(check_sigmas(&[]).is_err());
    }

    #[test]
    fn csv_formats() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        let report = SweepReport {
            rows: vec![SweepRow { sigma: 0.4, sup_l1: 1.0, final_l1: 0.5, vavg_one: 0.25, vavg_weighted: 0.125 }],
            fit: None,
            vavg_fit: None,
            reference: String::new(),
            max_comparison: None,
            max_drift: [0.0; 3],
        };
        let csv = sweep_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sigma,sup_l1,final_l1,vavg_l1");
        assert_eq!(lines[1].split(',').count(), 4);
        assert_eq!(lines[2], "p_hat,");
        assert_eq!(lines[3], "r_squared,");
        assert!(sweep_summary(&report).contains("p_hat undefined"));
    }
}
