//! Python bindings. Rasters cross the boundary as flat float lists plus a
//! `(T, P, H, W)` shape tuple; reports come back as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikefool::attacks::{AttackResult, AttackSpec};
use spikefool::event_data::{synth_dataset, Dataset, SynthSpec};
use spikefool::harness::{run_campaign, CampaignOptions};
use spikefool::snn::{desk_network, load_model, save_model, Classifier, Mode, Network};
use spikefool::training::{evaluate, raster_examples, train_bptt, AdamConfig, Example, TrainConfig};
use spikefool::Tensor;

type Shape = (usize, usize, usize, usize);
type Samples = Vec<(Vec<f64>, usize)>;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Flat data plus shape to a 4-D tensor.
pub fn to_tensor(data: Vec<f64>, shape: Shape) -> spikefool::Result<Tensor> {
    Tensor::from_vec(&[shape.0, shape.1, shape.2, shape.3], data)
}

fn samples(data: &Dataset) -> Samples {
    raster_examples(data).into_iter().map(|e| (e.input.into_vec(), e.label)).collect()
}

pub fn examples(data: Samples, shape: Shape) -> spikefool::Result<Vec<Example>> {
    data.into_iter().map(|(x, label)| Ok(Example { input: to_tensor(x, shape)?, label })).collect()
}

/// Synthetic moving-bar dataset as `(train, test, shape)`, each split a
/// list of `(flat_raster, label)`.
#[pyfunction]
#[pyo3(signature = (n_classes, size, n_bins, n_train, n_test, seed, noise_rate = 0.0))]
fn synth(
    n_classes: usize,
    size: usize,
    n_bins: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    noise_rate: f64,
) -> PyResult<(Samples, Samples, Shape)> {
    let spec = SynthSpec { n_classes, height: size, width: size, n_bins, n_train, n_test, noise_rate };
    let d = synth_dataset(&spec, seed).map_err(py_err)?;
    Ok((samples(&d.train), samples(&d.test), (n_bins, 2, size, size)))
}

#[pyclass(module = "spikefool_py")]
struct Model {
    net: Network,
}

fn result_dict<'py>(py: Python<'py>, r: &AttackResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("success", r.success)?;
    d.set_item("l0", r.l0)?;
    d.set_item("queries", r.queries)?;
    d.set_item("original_label", r.original_label)?;
    d.set_item("adversarial_label", r.adversarial_label)?;
    d.set_item("elapsed_s", r.elapsed_s)?;
    d.set_item("diagnostic", r.diagnostic.clone())?;
    d.set_item("x_adv", r.x_adv.data().to_vec())?;
    Ok(d)
}

#[pymethods]
impl Model {
    /// Untrained desk-scale spiking network.
    #[staticmethod]
    #[pyo3(signature = (n_classes, channels, size, widths = (8, 16), seed = 0))]
    fn desk(n_classes: usize, channels: usize, size: usize, widths: (usize, usize), seed: u64) -> PyResult<Self> {
        let mut net =
            desk_network(Mode::Spiking, [channels, size, size], n_classes, [widths.0, widths.1]).map_err(py_err)?;
        net.init_weights(&mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        Ok(Model { net })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model { net: load_model(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.net).map_err(py_err)
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.net.n_classes()
    }

    /// Trains in place with BPTT and returns the final training accuracy.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (train, shape, epochs = 10, lr = 1e-3, batch_size = 32, seed = 0))]
    fn train(
        &mut self,
        py: Python<'_>,
        train: Samples,
        shape: Shape,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let ex = examples(train, shape).map_err(py_err)?;
        let cfg = TrainConfig { optimizer: AdamConfig { lr, ..AdamConfig::default() }, batch_size, epochs, seed };
        let (net, report) = py.detach(|| train_bptt(&self.net, &ex, None, &cfg)).map_err(py_err)?;
        self.net = net;
        Ok(report.final_train_accuracy)
    }

    fn accuracy(&self, py: Python<'_>, data: Samples, shape: Shape) -> PyResult<f64> {
        let ex = examples(data, shape).map_err(py_err)?;
        py.detach(|| evaluate(&self.net, &ex)).map_err(py_err)
    }

    fn logits(&self, x: Vec<f64>, shape: Shape) -> PyResult<Vec<f64>> {
        let t = to_tensor(x, shape).map_err(py_err)?;
        Classifier::logits(&self.net, &t).map_err(py_err)
    }

    /// One attack; `spec_json` is an attack spec such as
    /// `{"kind": "spike_fool", "lambda": 2.0}`.
    #[pyo3(signature = (x, shape, label, spec_json, seed = 0))]
    fn attack<'py>(
        &self,
        py: Python<'py>,
        x: Vec<f64>,
        shape: Shape,
        label: usize,
        spec_json: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec: AttackSpec = serde_json::from_str(spec_json).map_err(py_err)?;
        let t = to_tensor(x, shape).map_err(py_err)?;
        let r = py.detach(|| spec.run(&self.net, &t, label, seed)).map_err(py_err)?;
        result_dict(py, &r)
    }

    /// Campaign over `data`; returns the report as JSON.
    #[pyo3(signature = (data, shape, spec_json, seed = 0))]
    fn campaign(&self, py: Python<'_>, data: Samples, shape: Shape, spec_json: &str, seed: u64) -> PyResult<String> {
        let spec: AttackSpec = serde_json::from_str(spec_json).map_err(py_err)?;
        let ex = examples(data, shape).map_err(py_err)?;
        let c = py.detach(|| run_campaign(&self.net, &ex, &spec, seed, &CampaignOptions::default())).map_err(py_err)?;
        serde_json::to_string(&c.report).map_err(py_err)
    }
}

#[pymodule]
fn spikefool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
