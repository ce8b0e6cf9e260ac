//! Command-line driver: `run`, `sweep`, `diag`, `oracle`, `residual`.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use fuzzy_boltzmann::collision::{CollisionOperator, Coupling};
use fuzzy_boltzmann::diagnostics::{comparison_defect, dissipation_from_field, entropy, moment_s, COMPARISON_CONSTANTS};
use fuzzy_boltzmann::dynamics::{run, KernelConfig};
use fuzzy_boltzmann::harness::{
    conservation_drift, diagnostics_csv, max_comparison, oracle_check, parse_config, run_sweep, sweep_csv,
    sweep_summary, write_text,
};
use fuzzy_boltzmann::kernels::{build_spatial_kernel, DEFAULT_IMAGES};
use fuzzy_boltzmann::{moments, snapshot, Error, Result};

#[derive(Parser)]
#[command(name = "fbz", version, about = "Fuzzy Boltzmann solver and verification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write diagnostics.csv and final.fbz.
    Run {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write every stored snapshot as snap_<step>.fbz.
        #[arg(long)]
        snapshots: bool,
    },
    /// Sweep sigma against the local reference; writes sweep.csv and sweep_summary.txt.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.2,0.1,0.05")]
        sigmas: Vec<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Run the sigma cases concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Diagnostics of a single FBZ1 snapshot.
    Diag {
        snapshot: PathBuf,
        /// Evaluate the entropy dissipation and the comparison inequality.
        #[arg(long)]
        dissipation: bool,
        #[arg(long, value_delimiter = ',')]
        moments: Vec<f64>,
        /// Fuzzy coupling width for the dissipation; local when absent.
        #[arg(long)]
        sigma: Option<f64>,
        /// Kernel hardness exponent for the dissipation.
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
    },
    /// Brute-force cross-check on a tiny grid; exits 2 on mismatch.
    Oracle { config: PathBuf },
    /// Run with running renormalised residuals; writes residual.csv.
    Residual {
        config: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn cmd_run(config: &Path, out: &Path, snapshots: bool) -> Result<()> {
    let config = parse_config(config)?;
    let traj = run(&config)?;
    ensure_dir(out)?;
    write_text(out.join("diagnostics.csv"), &diagnostics_csv(&traj.records, &traj.residual_names))?;
    let (t_end, last) = traj.snapshots.last().expect("initial snapshot");
    snapshot::write(out.join("final.fbz"), last, *t_end)?;
    if snapshots {
        for (i, (t, f)) in traj.snapshots.iter().enumerate() {
            let step = (i * traj.output_stride).min(traj.steps);
            snapshot::write(out.join(format!("snap_{step:06}.fbz")), f, *t)?;
        }
    }
    let drift = conservation_drift(&traj);
    println!("steps {} dt {:.6e} substepped {}", traj.steps, traj.dt, traj.substepped_steps);
    println!("relative drift: mass {:.3e} momentum {:.3e} energy {:.3e}", drift[0], drift[1], drift[2]);
    println!("clipped mass {:.3e} projection l1 {:.3e}", traj.clipped_mass, traj.projection_l1);
    if let Some(c) = max_comparison(&traj.records) {
        println!("max relative comparison defect {c:.3e}");
    }
    Ok(())
}

fn cmd_sweep(config: &Path, sigmas: &[f64], out: &Path, parallel: bool) -> Result<()> {
    let config = parse_config(config)?;
    let report = run_sweep(&config, sigmas, parallel)?;
    ensure_dir(out)?;
    write_text(out.join("sweep.csv"), &sweep_csv(&report))?;
    let summary = sweep_summary(&report);
    write_text(out.join("sweep_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_diag(path: &Path, with_d: bool, orders: &[f64], sigma: Option<f64>, mu: f64) -> Result<()> {
    let (f, t) = snapshot::read(path)?;
    let m = moments(&f);
    println!("t {t}");
    println!("mass {:.17e}", m.mass);
    println!("momentum {:.17e} {:.17e}", m.momentum[0], m.momentum[1]);
    println!("energy {:.17e}", m.energy);
    println!("H {:.17e}", entropy(&f));
    for &s in orders {
        println!("M_{s} {:.17e}", moment_s(&f, s)?);
    }
    if with_d {
        let spec = KernelConfig { mu, ..KernelConfig::default() }.build()?;
        let grid = f.grid_arc().clone();
        let op = CollisionOperator::new(Arc::clone(&grid), spec);
        let coupling = match sigma {
            Some(s) => Coupling::Fuzzy(build_spatial_kernel(s, &grid, DEFAULT_IMAGES)?),
            None => Coupling::Local,
        };
        let h = op.dissipation_field(&f, &coupling)?;
        println!("D {:.17e}", dissipation_from_field(&grid, &h));
        let ff = coupling.mollify(&f)?;
        let (gain, loss) = op.raw_fields(&f, &ff)?;
        let c = comparison_defect(&gain, &loss, &h, &COMPARISON_CONSTANTS)?;
        println!("comparison defect {:.3e} (relative {:.3e})", c.max_violation, c.relative());
    }
    Ok(())
}

fn cmd_oracle(config: &Path) -> Result<()> {
    let r = oracle_check(&parse_config(config)?)?;
    println!("gain fuzzy {:.3e} loss fuzzy {:.3e}", r.gain_fuzzy, r.loss_fuzzy);
    println!("gain local {:.3e} loss local {:.3e}", r.gain_local, r.loss_local);
    println!("dissipation fuzzy {:.3e} local {:.3e} (relative)", r.dissipation_fuzzy, r.dissipation_local);
    println!("max deviation {:.3e}", r.max_field());
    Ok(())
}

fn cmd_residual(config: &Path, alpha: f64, out: &Path) -> Result<()> {
    let mut config = parse_config(config)?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("--alpha must be > 0, got {alpha}")));
    }
    config.residual_alpha = Some(alpha);
    config.output_stride = 1;
    config.diag.stride = 1;
    let traj = run(&config)?;
    ensure_dir(out)?;
    write_text(out.join("residual.csv"), &diagnostics_csv(&traj.records, &traj.residual_names))?;
    let last = traj.records.last().expect("initial record");
    let mut worst: f64 = 0.0;
    for (name, r) in traj.residual_names.iter().zip(&last.residuals) {
        println!("{name} {:.6e}", r.abs());
        worst = worst.max(r.abs());
    }
    println!("max |R| {worst:.6e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run { config, out, snapshots } => cmd_run(config, out, *snapshots),
        Command::Sweep { config, sigmas, out, parallel } => cmd_sweep(config, sigmas, out, *parallel),
        Command::Diag { snapshot, dissipation, moments, sigma, mu } => {
            cmd_diag(snapshot, *dissipation, moments, *sigma, *mu)
        }
        Command::Oracle { config } => cmd_oracle(config),
        Command::Residual { config, alpha, out } => cmd_residual(config, *alpha, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
