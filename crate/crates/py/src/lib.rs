//! Python bindings. Configs and reports cross the boundary as plain dicts.

use std::path::PathBuf;

use geoloc::error::Error;
use geoloc::eval::{evaluate, EvalOptions, EvalReport, LocalizeMode};
use geoloc::geo::{classify, geodesic_distance_m, iou_vs_aligned, AerialTile, GeoPoint, Offset2D, TileGeometry, TileId};
use geoloc::model::{Model as CoreModel, OffsetMode};
use geoloc::synth::{generate, load_split, make_splits, SplitMode, SyntheticWorld, WorldConfig};
use geoloc::train::{train as core_train, EvalSet, TrainConfig, TrainData};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Applies `overrides` on top of `base`, refusing keys that `base` does not have.
pub fn merge_overrides(base: &mut Value, overrides: &Value, path: &str) -> Result<(), String> {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| format!("unknown config key `{here}`"))?;
                merge_overrides(slot, v, &here)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Resolves a config from its defaults and an optional override object.
pub fn resolve<T: serde::Serialize + serde::de::DeserializeOwned + Default>(overrides: Option<&Value>) -> Result<T, String> {
    let mut base = serde_json::to_value(T::default()).map_err(|e| e.to_string())?;
    if let Some(o) = overrides {
        if !o.is_object() {
            return Err("config overrides must be a dict".into());
        }
        merge_overrides(&mut base, o, "")?;
    }
    serde_json::from_value(base).map_err(|e| e.to_string())
}

pub fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown {what} `{s}`"))
}

fn to_json(obj: Option<&Bound<'_, PyAny>>) -> PyResult<Option<Value>> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else { return Ok(None) };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map(Some).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn point((lat, lon): (f64, f64)) -> PyResult<GeoPoint> {
    GeoPoint::new(lat, lon).map_err(to_py_err)
}

fn geometry(side_len_m: Option<f64>) -> PyResult<TileGeometry> {
    side_len_m.map_or(Ok(TileGeometry::default()), |s| TileGeometry::from_side_len(s).map_err(to_py_err))
}

/// IOU between a tile and a copy displaced by (dx_m east, dy_m north).
#[pyfunction]
#[pyo3(signature = (dx_m, dy_m, side_len_m=None))]
fn iou(dx_m: f64, dy_m: f64, side_len_m: Option<f64>) -> PyResult<f64> {
    Ok(iou_vs_aligned(Offset2D::new(dx_m, dy_m), &geometry(side_len_m)?))
}

/// Label of a (lat, lon) query against a tile center: (class, dx_m, dy_m, iou).
#[pyfunction]
#[pyo3(name = "classify", signature = (query, tile_center, side_len_m=None))]
fn classify_py(query: (f64, f64), tile_center: (f64, f64), side_len_m: Option<f64>) -> PyResult<(String, f64, f64, f64)> {
    let geom = geometry(side_len_m)?;
    let tile = AerialTile { id: TileId(0), center: point(tile_center)?, geom, row: 0, col: 0 };
    let (class, off) = classify(point(query)?, &tile);
    Ok((format!("{class:?}"), off.dx_m, off.dy_m, iou_vs_aligned(off, &geom)))
}

#[pyfunction]
fn distance_m(a: (f64, f64), b: (f64, f64)) -> PyResult<f64> {
    Ok(geodesic_distance_m(point(a)?, point(b)?))
}

#[pyclass(name = "World", module = "geoloc")]
struct World {
    inner: SyntheticWorld,
}

#[pymethods]
impl World {
    /// Generates a synthetic world; `config` overrides individual defaults.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: WorldConfig = resolve(to_json(config)?.as_ref()).map_err(PyValueError::new_err)?;
        Ok(Self { inner: generate(&cfg).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SyntheticWorld::load(&dir).map_err(to_py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(to_py_err)
    }

    #[getter]
    fn n_tiles(&self) -> usize {
        self.inner.grid.len()
    }

    #[getter]
    fn n_queries(&self) -> usize {
        self.inner.queries.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.config.feature_dim
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        from_json(py, &self.inner.config)
    }

    /// Ids of the test tiles under a split.
    #[pyo3(signature = (split="same-area"))]
    fn test_tiles(&self, split: &str) -> PyResult<Vec<u32>> {
        let mode: SplitMode = parse_enum("split", split).map_err(PyValueError::new_err)?;
        Ok(make_splits(&self.inner, mode).test_tiles.iter().map(|t| t.0).collect())
    }
}

#[pyclass(name = "Model", module = "geoloc")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::load(&stem).map_err(to_py_err)?.0 })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        self.inner.save(&stem, 0, Value::Object(Default::default())).map_err(to_py_err)
    }

    fn encode_ground(&self, raw: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_ground(&raw).map_err(to_py_err)?.values().to_vec())
    }

    fn encode_aerial(&self, raw: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_aerial(&raw).map_err(to_py_err)?.values().to_vec())
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        from_json(py, &self.inner.config)
    }
}

/// Trains on a world and returns the model with its per-epoch log.
#[pyfunction]
#[pyo3(signature = (world, split="same-area", config=None))]
fn train<'py>(
    py: Python<'py>,
    world: &World,
    split: &str,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let mode: SplitMode = parse_enum("split", split).map_err(PyValueError::new_err)?;
    let overrides = to_json(config)?;
    let mut cfg: TrainConfig = resolve(overrides.as_ref()).map_err(PyValueError::new_err)?;
    if overrides.as_ref().and_then(|o| o.pointer("/model/input_dim")).is_none() {
        cfg.model.input_dim = world.inner.config.feature_dim;
    }
    let split = make_splits(&world.inner, mode);
    let data = TrainData::from_world(&world.inner, &split).map_err(to_py_err)?;
    let outcome = core_train(&data, &cfg).map_err(to_py_err)?;
    Ok((Model { inner: outcome.model }, from_json(py, &outcome.log)?))
}

/// Evaluates on the test split; `options` overrides individual defaults.
/// Without an explicit mode the model's own offset head is used.
#[pyfunction]
#[pyo3(name = "evaluate", signature = (model, world, split="same-area", options=None))]
fn evaluate_py<'py>(
    py: Python<'py>,
    model: &Model,
    world: &World,
    split: &str,
    options: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode: SplitMode = parse_enum("split", split).map_err(PyValueError::new_err)?;
    let overrides = to_json(options)?;
    let mut opts: EvalOptions = resolve(overrides.as_ref()).map_err(PyValueError::new_err)?;
    if overrides.as_ref().and_then(|o| o.get("mode")).is_none() {
        opts.mode = match model.inner.config.offset_mode {
            OffsetMode::None => LocalizeMode::RetrievalOnly,
            OffsetMode::Regression => LocalizeMode::Regression,
            OffsetMode::Classification => LocalizeMode::Classification,
        };
    }
    let split = make_splits(&world.inner, mode);
    let report = run_eval(&model.inner, &world.inner, &split, &opts).map_err(to_py_err)?;
    from_json(py, &report)
}

fn run_eval(model: &CoreModel, world: &SyntheticWorld, split: &geoloc::synth::Split, opts: &EvalOptions) -> geoloc::error::Result<EvalReport> {
    let test = EvalSet::test_split(world, split)?;
    evaluate(model, &test.queries, &test.database(model)?, &world.grid, opts)
}

/// Reads the split a saved world was written with.
#[pyfunction]
#[pyo3(signature = (dir, split="same-area"))]
fn saved_test_tiles(dir: PathBuf, split: &str) -> PyResult<Vec<u32>> {
    let mode: SplitMode = parse_enum("split", split).map_err(PyValueError::new_err)?;
    let s = load_split(&dir, mode).map_err(to_py_err)?;
    Ok(s.test_tiles.iter().map(|t| t.0).collect())
}

#[pymodule(name = "geoloc")]
fn geoloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(classify_py, m)?)?;
    m.add_function(wrap_pyfunction!(distance_m, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_py, m)?)?;
    m.add_function(wrap_pyfunction!(saved_test_tiles, m)?)?;
    m.add_class::<World>()?;
    m.add_class::<Model>()?;
    Ok(())
}
