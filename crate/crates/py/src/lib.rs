//! Python bindings: the feeder simulator, dataset generation, controller
//! training and prediction, exposed as a small extension module.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use adsmpc::closed_loop::clamp_controls;
use adsmpc::dataset::{assemble_all, split_dataset, SplitMode};
use adsmpc::feeder::{
    compute_efficiency, generate_scenarios, solve_power_flow, Conditions, ControlVector,
    FeederSpec, StateVector,
};
use adsmpc::model::{build_model, Category, CellKind, Model, ModelSpec};
use adsmpc::trainer::{evaluate_metrics, train, TrainConfig};
use adsmpc::util::derive_seed;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Radial feeder with the tap / capacitor / PV-angle controls.
#[pyclass]
struct Feeder {
    spec: FeederSpec,
}

#[pymethods]
impl Feeder {
    /// The built-in six-bus feeder.
    #[new]
    fn new() -> Feeder {
        Feeder {
            spec: FeederSpec::default_feeder(),
        }
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Feeder> {
        let text = std::fs::read_to_string(&path).map_err(value_err)?;
        Ok(Feeder {
            spec: FeederSpec::parse(&text).map_err(value_err)?,
        })
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.spec.n_buses()
    }

    #[getter]
    fn delta_max(&self) -> f64 {
        self.spec.delta_max()
    }

    /// Solve one operating point; returns efficiency, losses and head/PV
    /// powers in MW, iteration count, and per-bus voltage magnitudes.
    #[pyo3(signature = (tap, cap_on, delta, load_scale=1.0, irradiance=1.0))]
    fn solve(
        &self,
        py: Python<'_>,
        tap: f64,
        cap_on: bool,
        delta: f64,
        load_scale: f64,
        irradiance: f64,
    ) -> PyResult<HashMap<String, Py<PyAny>>> {
        let u = ControlVector::new(tap, cap_on, delta);
        let sol = solve_power_flow(
            &self.spec,
            &u,
            Conditions {
                load_scale,
                irradiance,
            },
        )
        .map_err(runtime_err)?;
        let eff = compute_efficiency(&sol).map_err(runtime_err)?;
        let base = self.spec.base_mva;
        let mut out: HashMap<String, Py<PyAny>> = HashMap::new();
        let put_f = |out: &mut HashMap<String, Py<PyAny>>, k: &str, v: f64| -> PyResult<()> {
            out.insert(k.to_string(), v.into_pyobject(py)?.unbind().into_any());
            Ok(())
        };
        put_f(&mut out, "efficiency", eff)?;
        put_f(&mut out, "losses_mw", sol.losses * base)?;
        put_f(&mut out, "head_mw", sol.head_power.re * base)?;
        put_f(&mut out, "head_mvar", sol.head_power.im * base)?;
        put_f(&mut out, "pv_mw", sol.pv_power.re * base)?;
        put_f(&mut out, "load_mw", sol.total_load.re * base)?;
        out.insert(
            "iterations".to_string(),
            sol.iterations.into_pyobject(py)?.unbind().into_any(),
        );
        let volts: Vec<f64> = sol.voltages.iter().map(|v| v.abs()).collect();
        out.insert(
            "bus_voltages".to_string(),
            volts.into_pyobject(py)?.unbind().into_any(),
        );
        Ok(out)
    }

    /// Feasibility clamp: snap a raw control triple onto the control grid.
    fn clamp(&self, tap: f64, cap: f64, delta: f64) -> PyResult<(f64, bool, f64)> {
        let u = clamp_controls([tap, cap, delta], self.spec.delta_max()).map_err(value_err)?;
        Ok((u.tap, u.cap_on, u.delta))
    }
}

/// Supervised inverse-dynamics dataset generated from feeder scenarios.
#[pyclass]
struct Dataset {
    inner: adsmpc::dataset::Dataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n_examples(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.inner.split.train.len(),
            self.inner.split.dev.len(),
            self.inner.split.test.len(),
        )
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: adsmpc::dataset::Dataset::load(Path::new(&path)).map_err(value_err)?,
        })
    }
}

/// Simulate scenarios on the built-in feeder and assemble the dataset.
#[pyfunction]
#[pyo3(signature = (scenarios=26, steps=155, seed=42, t=2))]
fn generate_dataset(scenarios: usize, steps: usize, seed: u64, t: usize) -> PyResult<Dataset> {
    let feeder = FeederSpec::default_feeder();
    let trajs = generate_scenarios(&feeder, scenarios, steps, seed).map_err(runtime_err)?;
    let examples = assemble_all(&trajs, t).map_err(value_err)?;
    let mut ds = split_dataset(
        examples,
        derive_seed(seed, 0xDA7A),
        feeder.delta_max(),
        SplitMode::Example,
    )
    .map_err(value_err)?;
    ds.normalize_features();
    Ok(Dataset { inner: ds })
}

/// A trained control model; predicts the next feasible control triple.
#[pyclass(unsendable)]
struct Controller {
    model: Model,
    metrics: HashMap<String, f64>,
}

#[pymethods]
impl Controller {
    /// Train one architecture on a dataset. `arch` is CATEGORY-CELL, e.g.
    /// "B-dense" or "AM_simple-lstm".
    #[staticmethod]
    #[pyo3(signature = (dataset, arch="AM_simple-lstm", hidden=16, d_k=8, heads=4, epochs=60, lr=0.01, seed=42))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        dataset: &Dataset,
        arch: &str,
        hidden: usize,
        d_k: usize,
        heads: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Controller> {
        let (cat_s, cell_s) = arch
            .split_once('-')
            .ok_or_else(|| value_err(format!("bad arch `{arch}`; expected CATEGORY-CELL")))?;
        let category = Category::parse(cat_s)
            .ok_or_else(|| value_err(format!("unknown category `{cat_s}`")))?;
        let cell = CellKind::parse(cell_s)
            .ok_or_else(|| value_err(format!("unknown cell `{cell_s}`")))?;
        let data = &dataset.inner;
        let mut spec = ModelSpec::new(category, cell, data.d_x);
        spec.t = data.t;
        spec.delta_max = data.delta_max;
        spec.hidden = hidden;
        spec.d_k = d_k;
        spec.heads = if category == Category::A { 1 } else { heads };
        spec.seed = seed;
        let cfg = TrainConfig {
            learning_rate: lr,
            max_epochs: epochs,
            seed: derive_seed(seed, 0x9),
            repeats: 1,
            ..TrainConfig::default()
        };
        let mut model = build_model(&spec).map_err(value_err)?;
        let report = train(&mut model, data, &cfg).map_err(runtime_err)?;
        let m = evaluate_metrics(&model, data, &report).map_err(runtime_err)?;
        let metrics = HashMap::from([
            ("test_mse".to_string(), m.test_mse),
            ("accuracy".to_string(), m.accuracy),
            ("epochs".to_string(), m.epochs as f64),
            ("best_dev_loss".to_string(), m.best_dev_loss),
            ("train_seconds".to_string(), m.train_seconds),
        ]);
        Ok(Controller { model, metrics })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Controller> {
        let model = Model::load_checkpoint(&path).map_err(value_err)?;
        Ok(Controller {
            model,
            metrics: HashMap::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save_checkpoint(&path).map_err(runtime_err)
    }

    #[getter]
    fn metrics(&self) -> HashMap<String, f64> {
        self.metrics.clone()
    }

    #[getter]
    fn arch(&self) -> String {
        self.model.spec.arch_name()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    /// Predict the next control from the previous control and the
    /// (previous, desired) state feature vectors; the result is clamped
    /// to the feasible control grid.
    fn predict(
        &self,
        tap: f64,
        cap_on: bool,
        delta: f64,
        x_prev: Vec<f64>,
        x_desired: Vec<f64>,
    ) -> PyResult<(f64, bool, f64)> {
        let u_prev = ControlVector::new(tap, cap_on, delta);
        let states = [
            StateVector::from_features(&x_prev),
            StateVector::from_features(&x_desired),
        ];
        let enc = self
            .model
            .predict_encoded(&u_prev, &states)
            .map_err(runtime_err)?;
        let raw = ControlVector::decode(enc, self.model.spec.delta_max);
        let u = clamp_controls([raw.0, raw.1, raw.2], self.model.spec.delta_max)
            .map_err(runtime_err)?;
        Ok((u.tap, u.cap_on, u.delta))
    }
}

/// Worst finite-difference relative error over a few random dense and
/// attention layers; a quick numeric health probe.
#[pyfunction]
fn gradient_selftest() -> PyResult<f64> {
    use adsmpc::autodiff::{finite_difference_check_all, Activation, Tensor};
    use adsmpc::layers::{multi_head_attention, AttentionParams, DenseParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = DenseParams::init(&mut rng, 4, 3, Activation::Tanh);
        let x = Tensor::leaf(&[1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(runtime_err)?;
        let target = Tensor::leaf(&[1, 3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(runtime_err)?;
        let f = || dense.forward(&x)?.mse_loss(&target);
        worst = worst
            .max(finite_difference_check_all(f, &dense.params(), 1e-5).map_err(runtime_err)?);

        let attn = AttentionParams::init_multi(&mut rng, 3, 2, 2, 2, 3);
        let xs: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::leaf(&[1, 3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .expect("leaf")
            })
            .collect();
        let t3 = Tensor::leaf(&[1, 3], vec![0.1, -0.4, 0.2]).map_err(runtime_err)?;
        let g = || multi_head_attention(&attn, &xs)?.mse_loss(&t3);
        worst = worst
            .max(finite_difference_check_all(g, &attn.params(), 1e-5).map_err(runtime_err)?);
    }
    Ok(worst)
}

#[pymodule]
fn adsmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Feeder>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Controller>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_selftest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
