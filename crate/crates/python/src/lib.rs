//! Python bindings: grids, distributions, the collision operator, runs and snapshots.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fuzzy_boltzmann::diagnostics::{dissipation, entropy, moment_s};
use fuzzy_boltzmann::dynamics::{InitialCondition, KernelConfig, Mode};
use fuzzy_boltzmann::harness::{conservation_drift, diagnostics_csv, oracle_check, parse_config, parse_config_str};
use fuzzy_boltzmann::kernels::DEFAULT_IMAGES;
use fuzzy_boltzmann::phase_space::{l1_distance, maxwellian_slice};
use fuzzy_boltzmann::{build_spatial_kernel, moments, snapshot, CollisionOperator, Coupling, Error};

fn to_py(e: Error) -> PyErr {
    if e.exit_code() == 2 {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn coupling(grid: &fuzzy_boltzmann::PhaseGrid, sigma: Option<f64>) -> PyResult<Coupling> {
    match sigma {
        Some(s) => Ok(Coupling::Fuzzy(build_spatial_kernel(s, grid, DEFAULT_IMAGES).map_err(to_py)?)),
        None => Ok(Coupling::Local),
    }
}

#[pyclass(name = "PhaseGrid", frozen, from_py_object)]
#[derive(Clone)]
struct PyGrid(Arc<fuzzy_boltzmann::PhaseGrid>);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (nx, nv, nomega, vmax = 6.0, length = 1.0, dim_x = 1))]
    fn new(nx: usize, nv: usize, nomega: usize, vmax: f64, length: f64, dim_x: usize) -> PyResult<Self> {
        fuzzy_boltzmann::PhaseGrid::new(dim_x, length, nx, vmax, nv, nomega)
            .map(|g| Self(Arc::new(g)))
            .map_err(to_py)
    }

    #[getter]
    fn nx(&self) -> usize {
        self.0.nx()
    }

    #[getter]
    fn nv(&self) -> usize {
        self.0.nv()
    }

    #[getter]
    fn nomega(&self) -> usize {
        self.0.nomega()
    }

    #[getter]
    fn dim_x(&self) -> usize {
        self.0.dim_x()
    }

    /// Total number of phase-space nodes.
    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn velocities(&self) -> Vec<[f64; 2]> {
        (0..self.0.n_vel()).map(|j| self.0.velocity(j)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "PhaseGrid(dim_x={}, nx={}, nv={}, nomega={}, vmax={})",
            self.0.dim_x(),
            self.0.nx(),
            self.0.nv(),
            self.0.nomega(),
            self.0.vmax()
        )
    }
}

/// Phase-space density, x-major then velocity.
#[pyclass(name = "Distribution", frozen, from_py_object)]
#[derive(Clone)]
struct PyDistribution(fuzzy_boltzmann::DistributionFunction);

#[pymethods]
impl PyDistribution {
    #[new]
    fn new(grid: &PyGrid, values: Vec<f64>) -> PyResult<Self> {
        fuzzy_boltzmann::DistributionFunction::new(grid.0.clone(), values)
            .map(Self)
            .map_err(to_py)
    }

    /// Spatially uniform Maxwellian sampled on `grid`.
    #[staticmethod]
    #[pyo3(signature = (grid, rho = 1.0, u = [0.0, 0.0], temp = 1.0))]
    fn maxwellian(grid: &PyGrid, rho: f64, u: [f64; 2], temp: f64) -> PyResult<Self> {
        let slice = maxwellian_slice(&grid.0, rho, u, temp);
        Self::new(grid, slice.repeat(grid.0.n_space()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, f64)> {
        snapshot::read(path).map(|(f, t)| (Self(f), t)).map_err(to_py)
    }

    #[pyo3(signature = (path, time = 0.0))]
    fn save(&self, path: &str, time: f64) -> PyResult<()> {
        snapshot::write(path, &self.0, time).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(self.0.grid_arc().clone())
    }

    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    /// Mass, momentum and energy.
    fn moments<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = moments(&self.0);
        let d = PyDict::new(py);
        d.set_item("mass", m.mass)?;
        d.set_item("momentum", m.momentum)?;
        d.set_item("energy", m.energy)?;
        Ok(d)
    }

    fn entropy(&self) -> f64 {
        entropy(&self.0)
    }

    fn moment(&self, s: f64) -> PyResult<f64> {
        moment_s(&self.0, s).map_err(to_py)
    }

    fn l1_distance(&self, other: &PyDistribution) -> PyResult<f64> {
        l1_distance(&self.0, &other.0).map_err(to_py)
    }
}

/// Discrete collision operator with kernel `|v − v*|^mu b(θ)`.
#[pyclass(name = "CollisionOperator", frozen)]
struct PyOperator(CollisionOperator);

#[pymethods]
impl PyOperator {
    #[new]
    #[pyo3(signature = (grid, mu = 0.0, equilibrium_correction = true))]
    fn new(grid: &PyGrid, mu: f64, equilibrium_correction: bool) -> PyResult<Self> {
        let spec = KernelConfig { mu, ..KernelConfig::default() }.build().map_err(to_py)?;
        Ok(Self(
            CollisionOperator::new(grid.0.clone(), spec).with_equilibrium_correction(equilibrium_correction),
        ))
    }

    /// Gain, loss and projected net rate; local coupling when `sigma` is None.
    #[pyo3(signature = (f, sigma = None))]
    fn collide(&self, f: &PyDistribution, sigma: Option<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let c = coupling(self.0.grid(), sigma)?;
        let q = self.0.collide(&f.0, &c).map_err(to_py)?;
        let net = q.net().into_owned();
        Ok((q.raw_gain, q.raw_loss, net))
    }

    #[pyo3(signature = (f, sigma = None))]
    fn dissipation(&self, f: &PyDistribution, sigma: Option<f64>) -> PyResult<f64> {
        let c = coupling(self.0.grid(), sigma)?;
        dissipation(&self.0, &f.0, &c).map_err(to_py)
    }
}

/// Run configuration, parsed from the key=value format.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig(fuzzy_boltzmann::SimConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        parse_config_str(text, "<python>").map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        parse_config(path).map(Self).map_err(to_py)
    }

    #[getter]
    fn sigma(&self) -> Option<f64> {
        match self.0.mode {
            Mode::Fuzzy { sigma } => Some(sigma),
            Mode::Local => None,
        }
    }

    /// None selects local collisions.
    #[setter]
    fn set_sigma(&mut self, sigma: Option<f64>) {
        self.0.mode = sigma.map_or(Mode::Local, |sigma| Mode::Fuzzy { sigma });
    }

    #[getter]
    fn t_final(&self) -> f64 {
        self.0.t_final
    }

    #[setter]
    fn set_t_final(&mut self, t: f64) {
        self.0.t_final = t;
    }

    #[getter]
    fn dt(&self) -> Option<f64> {
        self.0.dt
    }

    #[setter]
    fn set_dt(&mut self, dt: Option<f64>) {
        self.0.dt = dt;
    }

    #[getter]
    fn ic(&self) -> &'static str {
        self.0.ic.id()
    }

    /// Use a spatially uniform Maxwellian as the initial condition.
    #[pyo3(signature = (rho = 1.0, u = [0.0, 0.0], temp = 1.0))]
    fn use_maxwellian(&mut self, rho: f64, u: [f64; 2], temp: f64) {
        self.0.ic = InitialCondition::Maxwellian { rho, u, temp };
    }

    fn grid(&self) -> PyResult<PyGrid> {
        self.0.grid().map(|g| PyGrid(Arc::new(g))).map_err(to_py)
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory(fuzzy_boltzmann::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    #[getter]
    fn clipped_mass(&self) -> f64 {
        self.0.clipped_mass
    }

    fn times(&self) -> Vec<f64> {
        self.0.snapshots.iter().map(|(t, _)| *t).collect()
    }

    fn snapshot(&self, i: usize) -> PyResult<PyDistribution> {
        self.0
            .snapshots
            .get(i)
            .map(|(_, f)| PyDistribution(f.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("snapshot index {i} out of range")))
    }

    fn last(&self) -> PyDistribution {
        PyDistribution(self.0.last().clone())
    }

    /// Relative drift of mass, momentum and energy.
    fn drift(&self) -> [f64; 3] {
        conservation_drift(&self.0)
    }

    /// Entropy per record.
    fn entropy(&self) -> Vec<f64> {
        self.0.records.iter().map(|r| r.entropy).collect()
    }

    fn diagnostics_csv(&self) -> String {
        diagnostics_csv(&self.0.records, &self.0.residual_names)
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyTrajectory> {
    let c = config.0.clone();
    py.detach(|| fuzzy_boltzmann::run(&c)).map(PyTrajectory).map_err(to_py)
}

/// Brute-force cross-check; returns the largest relative field deviation.
#[pyfunction]
fn oracle(py: Python<'_>, config: &PyConfig) -> PyResult<f64> {
    let c = config.0.clone();
    py.detach(|| oracle_check(&c)).map(|r| r.max_field()).map_err(to_py)
}

#[pymodule]
fn pyfbz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
