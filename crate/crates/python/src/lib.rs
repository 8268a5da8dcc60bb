//! Python bindings: voxel grids, procedural shapes, occlusion, metrics,
//! marching cubes, training and inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use moe::config::RunConfig;
use moe::gan::{load_checkpoint, save_checkpoint, MoeModel, Trainer};
use moe::metrics::{self, EvalSettings};
use moe::voxel::{self, Dataset, OcclusionMode, PointCloud, ProceduralShapeSpec, ShapeFamily, Split, VoxelGrid};

fn py_err(e: moe::Error) -> PyErr {
    match &e {
        moe::Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        moe::Error::Io(_) => PyOSError::new_err(e.to_string()),
        moe::Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Parses a kebab-case enum name through its serde representation.
fn by_name<T: serde::de::DeserializeOwned>(name: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{name}`")))
}

fn name_of<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Cubic occupancy grid, x-fastest.
#[pyclass(name = "VoxelGrid", module = "moe_cgan", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVoxelGrid {
    inner: VoxelGrid,
}

impl From<VoxelGrid> for PyVoxelGrid {
    fn from(inner: VoxelGrid) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyVoxelGrid {
    #[new]
    #[pyo3(signature = (resolution, values = None))]
    fn new(resolution: usize, values: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = match values {
            Some(v) => VoxelGrid::from_values(resolution, v).map_err(py_err)?,
            None => VoxelGrid::zeros(resolution),
        };
        Ok(inner.into())
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        self.check(x, y, z)?;
        Ok(self.inner.get(x, y, z))
    }

    fn set(&mut self, x: usize, y: usize, z: usize, value: f64) -> PyResult<()> {
        self.check(x, y, z)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(PyValueError::new_err(format!("occupancy {value} outside [0, 1]")));
        }
        self.inner.set(x, y, z, value);
        Ok(())
    }

    #[pyo3(signature = (threshold = 0.5))]
    fn occupied_count(&self, threshold: f64) -> usize {
        self.inner.occupied_count(threshold)
    }

    #[pyo3(signature = (threshold = 0.5))]
    fn binarize(&self, threshold: f64) -> Self {
        self.inner.binarize(threshold).into()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_vox_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(VoxelGrid::from_vox_bytes(data).map_err(py_err)?.into())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        voxel::write_vox(&self.inner, path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(voxel::read_vox(path).map_err(py_err)?.into())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "VoxelGrid(resolution={}, occupied={})",
            self.inner.resolution(),
            self.inner.occupied_count(0.5)
        )
    }
}

impl PyVoxelGrid {
    fn check(&self, x: usize, y: usize, z: usize) -> PyResult<()> {
        let r = self.inner.resolution();
        if x >= r || y >= r || z >= r {
            return Err(PyValueError::new_err(format!("({x}, {y}, {z}) outside a {r}³ grid")));
        }
        Ok(())
    }
}

/// Names accepted by `synthesize`.
#[pyfunction]
fn families() -> Vec<String> {
    ShapeFamily::ALL.iter().map(|f| f.name().to_string()).collect()
}

/// One procedural solid with randomized parameters.
#[pyfunction]
#[pyo3(signature = (family, resolution = 16, seed = 0))]
fn synthesize(family: &str, resolution: usize, seed: u64) -> PyResult<PyVoxelGrid> {
    let family: ShapeFamily = by_name(family, "shape family")?;
    let spec = ProceduralShapeSpec::sample(family, seed);
    Ok(voxel::synthesize_shape(&spec, resolution).map_err(py_err)?.into())
}

/// `(id, split, grid)` triples of a procedural dataset.
#[pyfunction]
#[pyo3(signature = (count, resolution = 16, seed = 0))]
fn synthesize_dataset(count: usize, resolution: usize, seed: u64) -> PyResult<Vec<(usize, String, PyVoxelGrid)>> {
    let ds = Dataset::synthesize(count, resolution, seed).map_err(py_err)?;
    Ok(ds
        .items
        .into_iter()
        .map(|i| (i.id, name_of(&i.split), i.grid.into()))
        .collect())
}

/// Removes `ratio` of the occupied cells; returns `(partial, mask)` where the
/// mask marks observed cells with 1.
#[pyfunction]
#[pyo3(signature = (grid, ratio, mode = "random-cells", seed = 0))]
fn occlude(grid: PyRef<'_, PyVoxelGrid>, ratio: f64, mode: &str, seed: u64) -> PyResult<(PyVoxelGrid, PyVoxelGrid)> {
    let mode: OcclusionMode = by_name(mode, "occlusion mode")?;
    let (partial, mask) = voxel::apply_occlusion(&grid.inner, ratio, mode, seed).map_err(py_err)?;
    Ok((partial.into(), mask.to_grid().into()))
}

#[pyfunction]
#[pyo3(signature = (grid, n_points = 1024, threshold = 0.5, seed = 0))]
fn point_cloud(grid: PyRef<'_, PyVoxelGrid>, n_points: usize, threshold: f64, seed: u64) -> PyResult<Vec<[f64; 3]>> {
    Ok(voxel::voxel_to_pointcloud(&grid.inner, n_points, threshold, seed)
        .map_err(py_err)?
        .points)
}

#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::chamfer(&PointCloud::new(a), &PointCloud::new(b)).map_err(py_err)
}

#[pyfunction]
fn hausdorff(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::hausdorff(&PointCloud::new(a), &PointCloud::new(b)).map_err(py_err)
}

#[pyfunction]
fn emd(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::emd(&PointCloud::new(a), &PointCloud::new(b)).map_err(py_err)
}

/// Percent of occupied partial-input cells still occupied in the output.
#[pyfunction]
#[pyo3(signature = (partial, output, threshold = 0.5))]
fn prr(partial: PyRef<'_, PyVoxelGrid>, output: PyRef<'_, PyVoxelGrid>, threshold: f64) -> PyResult<f64> {
    metrics::prr(&partial.inner, &output.inner, threshold).map_err(py_err)
}

/// Dict with raw `cd`, `hd`, `emd` and (given a partial input) `prr`.
#[pyfunction]
#[pyo3(signature = (truth, prediction, partial = None, points = 1024, threshold = 0.5, seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    truth: PyRef<'_, PyVoxelGrid>,
    prediction: PyRef<'_, PyVoxelGrid>,
    partial: Option<PyRef<'_, PyVoxelGrid>>,
    points: usize,
    threshold: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let settings = EvalSettings { points, threshold, seed };
    let r = metrics::evaluate(&truth.inner, &prediction.inner, partial.as_ref().map(|p| &p.inner), &settings)
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("cd", r.cd)?;
    d.set_item("hd", r.hd)?;
    d.set_item("emd", r.emd)?;
    d.set_item("prr", r.prr)?;
    Ok(d)
}

/// `(vertices, triangles)` of the isosurface.
#[pyfunction]
#[pyo3(signature = (grid, iso = 0.5))]
fn marching_cubes(grid: PyRef<'_, PyVoxelGrid>, iso: f64) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let m = moe::mesh::marching_cubes(&grid.inner, iso);
    (m.vertices, m.triangles)
}

#[pyfunction]
fn write_obj(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, path: PathBuf) -> PyResult<()> {
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
        return Err(PyValueError::new_err(format!("triangle {t:?} indexes past {} vertices", vertices.len())));
    }
    let mesh = moe::mesh::TriangleMesh { vertices, triangles };
    moe::mesh::write_obj(&mesh, path).map_err(py_err)
}

/// Resolved configuration as JSON, from a profile plus `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (profile = "desk", overrides = Vec::new()))]
fn config(profile: &str, overrides: Vec<String>) -> PyResult<String> {
    Ok(resolve(profile, &overrides)?.to_json())
}

fn resolve(profile: &str, overrides: &[String]) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::profile(profile).map_err(py_err)?;
    for o in overrides {
        cfg.set(o).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn grids(shapes: &[PyRef<'_, PyVoxelGrid>]) -> Vec<VoxelGrid> {
    shapes.iter().map(|g| g.inner.clone()).collect()
}

fn infer_generate(model: &mut MoeModel, count: usize, seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
    Ok(model
        .generate(count, seed)
        .map_err(py_err)?
        .into_iter()
        .map(Into::into)
        .collect())
}

fn infer_complete(model: &mut MoeModel, partials: &[PyRef<'_, PyVoxelGrid>], seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
    Ok(model
        .complete(&grids(partials), seed)
        .map_err(py_err)?
        .into_iter()
        .map(Into::into)
        .collect())
}

/// A trained mixture of experts loaded from a checkpoint.
#[pyclass(name = "Model", module = "moe_cgan", unsendable)]
pub struct PyModel {
    inner: MoeModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(path).map_err(py_err)?.into_model().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    #[getter]
    fn task(&self) -> String {
        name_of(&self.inner.config.task)
    }

    #[pyo3(signature = (count, seed = 0))]
    fn generate(&mut self, count: usize, seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
        infer_generate(&mut self.inner, count, seed)
    }

    #[pyo3(signature = (partials, seed = 0))]
    fn complete(&mut self, partials: Vec<PyRef<'_, PyVoxelGrid>>, seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
        infer_complete(&mut self.inner, &partials, seed)
    }
}

/// Training loop over a list of shapes (the procedural train split when
/// none are given).
#[pyclass(name = "Trainer", module = "moe_cgan", unsendable)]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (profile = "desk", overrides = Vec::new(), shapes = None))]
    fn new(profile: &str, overrides: Vec<String>, shapes: Option<Vec<PyRef<'_, PyVoxelGrid>>>) -> PyResult<Self> {
        let cfg = resolve(profile, &overrides)?;
        let data = match shapes {
            Some(s) => grids(&s),
            None => Dataset::synthesize(cfg.data.count, cfg.data.resolution, cfg.data.seed)
                .map_err(py_err)?
                .split(Split::Train)
                .map(|i| i.grid.clone())
                .collect(),
        };
        Ok(Self {
            inner: Trainer::new(&cfg, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, shapes))]
    fn resume(path: PathBuf, shapes: Vec<PyRef<'_, PyVoxelGrid>>) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(py_err)?;
        Ok(Self {
            inner: ck.into_trainer(grids(&shapes)).map_err(py_err)?,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn total_iterations(&self) -> u64 {
        self.inner.total_iterations()
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    /// One iteration; returns losses, per-expert loads and the temperature.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.train_step().map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("iteration", r.iteration)?;
        d.set_item("epoch", r.epoch)?;
        d.set_item("d_loss", r.losses.d_loss)?;
        d.set_item("g_loss", r.losses.g_loss)?;
        d.set_item("geom", r.losses.geom)?;
        d.set_item("total", r.losses.total)?;
        d.set_item("gate_loss", r.gate_loss)?;
        d.set_item("loads", r.loads)?;
        d.set_item("overflow", r.overflow)?;
        d.set_item("tau", r.tau)?;
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[pyo3(signature = (count, seed = 0))]
    fn generate(&mut self, count: usize, seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
        infer_generate(&mut self.inner.model, count, seed)
    }

    #[pyo3(signature = (partials, seed = 0))]
    fn complete(&mut self, partials: Vec<PyRef<'_, PyVoxelGrid>>, seed: u64) -> PyResult<Vec<PyVoxelGrid>> {
        infer_complete(&mut self.inner.model, &partials, seed)
    }
}

#[pymodule]
fn moe_cgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVoxelGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(families, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(occlude, m)?)?;
    m.add_function(wrap_pyfunction!(point_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(prr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(marching_cubes, m)?)?;
    m.add_function(wrap_pyfunction!(write_obj, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    Ok(())
}
