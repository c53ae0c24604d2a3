use morrey_lab::error::Error as CoreError;
use morrey_lab::fields::{eval_field, hardy_criticality as core_hardy, VectorFieldSpec};
use morrey_lab::lattice::{LatticeGrid, SampleMode, ScalarLattice, VectorLattice};
use morrey_lab::morrey::{self, CylinderSampling};
use morrey_lab::potentials::{build_kernel_plan, potential_apply as core_apply, Direction};
use morrey_lab::sde::{self, EulerConfig, PathEnsemble};
use morrey_lab::solver::{self, SolveOptions};
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: CoreError) -> PyErr {
    match e {
        CoreError::GateRefused { .. } => PyRuntimeError::new_err(e.to_string()),
        CoreError::Divergence { .. } | CoreError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Drift field built from a JSON specification.
#[pyclass(name = "Field", from_py_object)]
#[derive(Clone)]
struct PyField {
    spec: VectorFieldSpec,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(spec_json: &str) -> PyResult<Self> {
        let spec: VectorFieldSpec =
            serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        spec.validate().map_err(err)?;
        Ok(Self { spec })
    }

    #[staticmethod]
    fn hardy(dim: usize, delta: f64) -> PyResult<Self> {
        let spec = VectorFieldSpec::hardy(dim, delta);
        spec.validate().map_err(err)?;
        Ok(Self { spec })
    }

    #[staticmethod]
    fn constant(value: Vec<f64>) -> Self {
        Self { spec: VectorFieldSpec::constant(value) }
    }

    #[staticmethod]
    fn zero(dim: usize) -> Self {
        Self { spec: VectorFieldSpec::zero(dim) }
    }

    fn scaled(&self, factor: f64) -> Self {
        Self { spec: VectorFieldSpec::scaled(factor, self.spec.clone()) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn eval(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(eval_field(&self.spec, t, &x).map_err(err)?.0)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("field spec serializes")
    }

    fn __repr__(&self) -> String {
        format!("Field({})", self.to_json())
    }
}

/// Uniform space-time lattice on `[-L, L]^d × [t0, t1]`.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    grid: LatticeGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (dim, n_space, dx, n_time, dt, t0 = 0.0))]
    fn new(dim: usize, n_space: usize, dx: f64, n_time: usize, dt: f64, t0: f64) -> PyResult<Self> {
        Ok(Self { grid: LatticeGrid::with_counts(dim, n_space, dx, t0, n_time, dt).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.grid.dim
    }

    #[getter]
    fn n_space(&self) -> usize {
        self.grid.n_space()
    }

    #[getter]
    fn n_time(&self) -> usize {
        self.grid.n_time()
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.grid.dx
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.grid.dt
    }

    /// `(n_time, n_space, ..., n_space)`.
    #[getter]
    fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.grid.n_time()];
        s.extend(std::iter::repeat_n(self.grid.n_space(), self.grid.dim));
        s
    }

    fn coords(&self) -> Vec<f64> {
        (0..self.grid.n_space()).map(|i| self.grid.coord(i)).collect()
    }

    fn times(&self) -> Vec<f64> {
        (0..self.grid.n_time()).map(|j| self.grid.time(j)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Grid({})", serde_json::to_string(&self.grid).expect("grid serializes"))
    }
}

/// Scalar function on a grid; values are time-major, then row-major.
#[pyclass(name = "Lattice")]
struct PyLattice {
    lattice: ScalarLattice,
}

#[pymethods]
impl PyLattice {
    #[new]
    fn new(grid: &PyGrid, values: Vec<f64>) -> PyResult<Self> {
        if values.len() != grid.grid.len() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", grid.grid.len(), values.len())));
        }
        Ok(Self { lattice: ScalarLattice { grid: grid.grid.clone(), values } })
    }

    /// Centred Gaussian `amplitude · t^time_power · exp(-|x|²/(2 width²))`.
    #[staticmethod]
    #[pyo3(signature = (grid, amplitude, width, time_power = 0))]
    fn gaussian(grid: &PyGrid, amplitude: f64, width: f64, time_power: i32) -> Self {
        let lattice = ScalarLattice::from_fn(&grid.grid, |t, x| {
            amplitude * t.powi(time_power) * (-x.iter().map(|v| v * v).sum::<f64>() / (2.0 * width * width)).exp()
        });
        Self { lattice }
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid { grid: self.lattice.grid.clone() }
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.lattice.values.clone()
    }

    fn norm_p(&self, p: f64) -> f64 {
        self.lattice.norm_p(p)
    }

    fn interpolate(&self, t: f64, x: Vec<f64>) -> PyResult<f64> {
        self.lattice.interpolate(t, &x).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.lattice.values.len()
    }
}

/// Simulated ensemble; paths are replayed on demand rather than stored.
#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    ens: PathEnsemble,
}

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn paths(&self) -> usize {
        self.ens.finals.len() / self.ens.dim()
    }

    #[getter]
    fn finals(&self) -> Vec<Vec<f64>> {
        self.ens.finals.chunks(self.ens.dim()).map(<[f64]>::to_vec).collect()
    }

    /// Indices of paths aborted on a non-finite position.
    #[getter]
    fn flagged(&self) -> Vec<usize> {
        self.ens.flagged.clone()
    }

    /// `E|X_T|²` as `(value, stderr)`.
    fn second_moment(&self) -> (f64, f64) {
        let e = self.ens.terminal_mean(|x| x.iter().map(|v| v * v).sum());
        (e.value, e.stderr)
    }

    fn tail_mass(&self, r: f64) -> f64 {
        sde::tail_mass(&self.ens, r)
    }

    /// Log-log fit of the windowed occupation integral of `|b_k|`.
    fn krylov_fit<'py>(
        &self,
        py: Python<'py>,
        base: &PyField,
        level: f64,
        windows: Vec<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &sde::krylov_fit(&self.ens, &base.spec, level, &windows).map_err(err)?)
    }
}

/// Parabolic Morrey norm lower bound over dyadic cylinders.
#[pyfunction]
#[pyo3(signature = (field, q, r_min, levels, anchor_extent = 0, anchor_step = 0.25, elliptic = false))]
#[allow(clippy::too_many_arguments)]
fn morrey_norm<'py>(
    py: Python<'py>,
    field: &PyField,
    q: f64,
    r_min: f64,
    levels: usize,
    anchor_extent: usize,
    anchor_step: f64,
    elliptic: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let anchors = CylinderSampling::cube_anchors(field.spec.dim(), 0.0, anchor_extent, anchor_step);
    let sampling = CylinderSampling::new(r_min, levels, anchors);
    let est = if elliptic {
        morrey::elliptic_morrey_norm(&field.spec, q, &sampling)
    } else {
        morrey::morrey_norm(&field.spec, q, &sampling)
    };
    to_py(py, &est.map_err(err)?)
}

#[pyfunction]
fn lps_classify<'py>(py: Python<'py>, dim: usize, p: f64, l: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &morrey::lps_classify(dim, p, l).map_err(err)?)
}

#[pyfunction]
fn hardy_criticality<'py>(py: Python<'py>, dim: usize, delta: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_hardy(dim, delta).map_err(err)?)
}

/// Applies the heat potential of order `alpha` with mass `lam`.
#[pyfunction]
#[pyo3(signature = (h, alpha, lam, backward = false))]
fn potential_apply(h: &PyLattice, alpha: f64, lam: f64, backward: bool) -> PyResult<PyLattice> {
    let dir = if backward { Direction::Backward } else { Direction::Forward };
    let plan = build_kernel_plan(&h.lattice.grid, dir, alpha, lam).map_err(err)?;
    Ok(PyLattice { lattice: core_apply(&plan, &h.lattice).map_err(err)? })
}

/// Gated Neumann-series solve of `(λ + ∂t − Δ + b·∇) u = f`.
#[pyfunction]
#[pyo3(signature = (field, f, lam, p = 2.0, level = None, probes = 64, seed = 0, force = false))]
#[allow(clippy::too_many_arguments)]
fn neumann_solve<'py>(
    py: Python<'py>,
    field: &PyField,
    f: &PyLattice,
    lam: f64,
    p: f64,
    level: Option<f64>,
    probes: usize,
    seed: u64,
    force: bool,
) -> PyResult<(PyLattice, Bound<'py, PyAny>)> {
    let spec = match level {
        Some(n) => morrey_lab::fields::regularize(&field.spec, n).map_err(err)?,
        None => field.spec.clone(),
    };
    let b = VectorLattice::sample(&spec, &f.lattice.grid, SampleMode::CellAverage { order: 4 }).map_err(err)?;
    let opts = SolveOptions { probes, seed, force, ..SolveOptions::new(p, lam) };
    let mut report = solver::neumann_solve(&b, &f.lattice, &opts).map_err(err)?;
    let u = report.u.take().expect("solve report carries its solution");
    Ok((PyLattice { lattice: u }, to_py(py, &report)?))
}

/// Euler–Maruyama ensemble for the drift truncated at `level`.
#[pyfunction]
#[pyo3(signature = (field, x0, t_end, dt, paths, seed = 0, level = 1e6))]
fn simulate(
    field: &PyField,
    x0: Vec<f64>,
    t_end: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    level: f64,
) -> PyResult<PyEnsemble> {
    let cfg = EulerConfig::new(x0, t_end, dt, paths, seed, level);
    Ok(PyEnsemble { ens: sde::simulate(&cfg, &field.spec).map_err(err)? })
}

#[pymodule]
fn morrey_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", morrey_lab::VERSION)?;
    m.add_class::<PyField>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyLattice>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(morrey_norm, m)?)?;
    m.add_function(wrap_pyfunction!(lps_classify, m)?)?;
    m.add_function(wrap_pyfunction!(hardy_criticality, m)?)?;
    m.add_function(wrap_pyfunction!(potential_apply, m)?)?;
    m.add_function(wrap_pyfunction!(neumann_solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
