//! Python bindings: synthetic data, model construction and inference,
//! checkpoints, loss functions and cost models.

use luna_core::bench::{ratio_report, CostModel, Point};
use luna_core::signal::{EegSegment, MontageLayout};
use luna_core::synth::{synth_eeg, SynthConfig};
use luna_core::{io, losses, Luna, LunaError, ModelConfig, ModelSize, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::sync::Arc;

fn err(e: LunaError) -> PyErr {
    match e {
        LunaError::Io(_) | LunaError::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn montage(name: &str) -> PyResult<MontageLayout> {
    match name {
        "standard_1020" => Ok(MontageLayout::standard_1020()),
        "double_banana" => Ok(MontageLayout::double_banana()),
        "seed62" => Ok(MontageLayout::seed62()),
        other => match other.strip_prefix("spherical") {
            Some(n) => MontageLayout::spherical(n.parse().map_err(|_| PyValueError::new_err("bad channel count"))?)
                .map_err(err),
            None => io::read_montage(other).map_err(err),
        },
    }
}

fn size(name: &str) -> PyResult<ModelConfig> {
    let s: ModelSize = name.parse().map_err(err)?;
    Ok(ModelConfig::preset(s))
}

/// Channel labels of a built-in montage (`standard_1020`, `double_banana`,
/// `seed62`, `sphericalN`) or a montage file.
#[pyfunction]
fn montage_labels(name: &str) -> PyResult<Vec<String>> {
    Ok(montage(name)?.labels().into_iter().map(String::from).collect())
}

type Segments = (Vec<Vec<Vec<f64>>>, Vec<Option<u32>>);

/// `n` synthetic segments as `(data, labels)`; `data[i]` is `C` lists of
/// samples.
#[pyfunction]
#[pyo3(signature = (montage_name, n, seed, classes=None))]
fn synth(montage_name: &str, n: usize, seed: u64, classes: Option<usize>) -> PyResult<Segments> {
    let m = Arc::new(montage(montage_name)?);
    let cfg = SynthConfig {
        n_classes: classes,
        ..SynthConfig::default()
    };
    let d = synth_eeg(m, n, seed, &cfg).map_err(err)?;
    let data = d
        .segments
        .iter()
        .map(|s| (0..s.channels()).map(|c| s.channel(c).to_vec()).collect())
        .collect();
    Ok((data, d.labels()))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Luna,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (size_name="tiny", seed=0))]
    fn new(size_name: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Luna::new(size(size_name)?, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_checkpoint(path, &self.inner).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.inner.config.hidden_size()
    }

    /// Encode one segment (`C` lists of samples at `rate`). Returns a dict with
    /// `e_out` (`S` rows of `Q·E`) and `affinity` (`S` × `Q` × `C`).
    #[pyo3(signature = (data, montage_name, rate=256.0))]
    fn encode<'py>(
        &self,
        py: Python<'py>,
        data: Vec<Vec<f64>>,
        montage_name: &str,
        rate: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = Arc::new(montage(montage_name)?);
        let seg = EegSegment::from_channels(data, rate, m).map_err(err)?;
        let inf = self.inner.infer(&[&seg]).map_err(err)?;
        let rows = |t: &Tensor, width: usize| -> Vec<Vec<f64>> { t.data().chunks(width).map(|r| r.to_vec()).collect() };
        let d = self.inner.config.hidden_size();
        let sh = inf.affinity.shape().to_vec();
        let affinity: Vec<Vec<Vec<f64>>> = inf
            .affinity
            .data()
            .chunks(sh[1] * sh[2])
            .map(|p| p.chunks(sh[2]).map(|r| r.to_vec()).collect())
            .collect();
        let out = PyDict::new(py);
        out.set_item("e_out", rows(&inf.e_out, d))?;
        out.set_item("affinity", affinity)?;
        Ok(out)
    }
}

/// Elementwise smooth-L1 loss between two equal-length sequences, averaged.
#[pyfunction]
#[pyo3(signature = (x, y, beta=1.0))]
fn smooth_l1(x: Vec<f64>, y: Vec<f64>, beta: f64) -> PyResult<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(PyValueError::new_err("inputs must be non-empty and of equal length"));
    }
    Ok(x.iter()
        .zip(&y)
        .map(|(a, b)| losses::smooth_l1(*a, *b, beta))
        .sum::<f64>()
        / x.len() as f64)
}

/// Query specialization penalty of one `Q × C` affinity matrix.
#[pyfunction]
#[pyo3(signature = (affinity, lambda_spec=0.8))]
fn specialization_loss(affinity: Vec<Vec<f64>>, lambda_spec: f64) -> PyResult<f64> {
    let t = Tensor::from_rows(&affinity).map_err(err)?;
    let (q, c) = (t.shape()[0], t.shape()[1]);
    let t = t.reshape(&[1, q, c]).map_err(err)?;
    losses::specialization_loss(&t, lambda_spec).map_err(err)
}

/// Analytic forward FLOPs of a cost model.
#[pyfunction]
#[pyo3(signature = (model, size_name, batch, patches, channels))]
fn flops(model: &str, size_name: &str, batch: usize, patches: usize, channels: usize) -> PyResult<u64> {
    let m: CostModel = model.parse().map_err(err)?;
    Ok(m.flops(
        &size(size_name)?,
        Point {
            batch,
            patches,
            channels,
        },
    )
    .matmul_flops)
}

/// `flops(a) / flops(b)`.
#[pyfunction]
#[pyo3(signature = (a, b, size_name, batch, patches, channels))]
fn flops_ratio(a: &str, b: &str, size_name: &str, batch: usize, patches: usize, channels: usize) -> PyResult<f64> {
    let (a, b): (CostModel, CostModel) = (a.parse().map_err(err)?, b.parse().map_err(err)?);
    Ok(ratio_report(
        a,
        b,
        &size(size_name)?,
        Point {
            batch,
            patches,
            channels,
        },
    ))
}

#[pymodule]
fn luna_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(montage_labels, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(specialization_loss, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(flops_ratio, m)?)?;
    Ok(())
}
