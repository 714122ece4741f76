//! Python bindings. Images cross the boundary as flat row-major lists of
//! intensities in `[0, 1]` (1 = paper); embeddings as lists of floats.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use markmatch_core::objective::{dual_loss as core_dual_loss, similarity_matrix};
use markmatch_core::segmentation::{rle, segment as core_segment, SegmentOptions};
use markmatch_core::synth::{self, sample_writer};
use markmatch_core::trainer::{self, Objective, TrainConfig};
use markmatch_core::{EmbeddingVector, EncoderConfig, EncoderParams, Error, GrayImage, LossConfig, SegmentPrompt};

create_exception!(markmatch, NoMarkFound, PyValueError, "No ink qualifies at the prompt.");
create_exception!(markmatch, ConflictError, PyValueError, "Duplicate enrollment or alias clash.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NoMarkFound => NoMarkFound::new_err("no mark found"),
        Error::Conflict(m) => ConflictError::new_err(m),
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::InvalidArgument(_) | Error::Parse { .. } | Error::Version { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

type R<T> = PyResult<T>;

fn loss_config(temperature: f64, alpha: f64) -> R<LossConfig> {
    let cfg = LossConfig { temperature, alpha };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Grayscale image, row-major, 1.0 = white paper.
#[pyclass(module = "markmatch", name = "Image", skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: GrayImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> R<Self> {
        Ok(PyImage {
            inner: GrayImage::from_pixels(width, height, pixels).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read_pgm(path: &str) -> R<Self> {
        Ok(PyImage {
            inner: GrayImage::read_pgm(path).map_err(to_py)?,
        })
    }

    fn write_pgm(&self, path: &str) -> R<()> {
        self.inner.write_pgm(path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Mark crop at encoder input size.
#[pyclass(module = "markmatch", name = "MarkImage", skip_from_py_object)]
#[derive(Clone)]
struct PyMark {
    inner: markmatch_core::MarkImage,
}

#[pymethods]
impl PyMark {
    #[new]
    #[pyo3(signature = (image, mark_id = String::new(), ballot_id = String::new()))]
    fn new(image: PyRef<'_, PyImage>, mark_id: String, ballot_id: String) -> Self {
        PyMark {
            inner: markmatch_core::MarkImage::new(image.inner.clone(), mark_id, ballot_id),
        }
    }

    #[getter]
    fn mark_id(&self) -> String {
        self.inner.mark_id.clone()
    }

    #[getter]
    fn ballot_id(&self) -> String {
        self.inner.ballot_id.clone()
    }

    #[getter]
    fn image(&self) -> PyImage {
        PyImage {
            inner: self.inner.image.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!("MarkImage({:?}, {}x{})", self.inner.mark_id, self.inner.width(), self.inner.height())
    }
}

#[pyclass(module = "markmatch", name = "WriterStyle", skip_from_py_object)]
#[derive(Clone)]
struct PyWriterStyle {
    inner: markmatch_core::WriterStyle,
}

#[pymethods]
impl PyWriterStyle {
    /// Deterministic style for `writer_id` under dataset `seed`.
    #[staticmethod]
    fn sample(writer_id: u64, seed: u64) -> Self {
        PyWriterStyle {
            inner: sample_writer(writer_id, seed),
        }
    }

    #[getter]
    fn writer_id(&self) -> u64 {
        self.inner.writer_id
    }
    #[getter]
    fn stroke_width_mean(&self) -> f64 {
        self.inner.stroke_width_mean
    }
    #[getter]
    fn stroke_width_jitter(&self) -> f64 {
        self.inner.stroke_width_jitter
    }
    #[getter]
    fn slant(&self) -> f64 {
        self.inner.slant
    }
    #[getter]
    fn fill_density(&self) -> f64 {
        self.inner.fill_density
    }
    #[getter]
    fn wobble_amplitude(&self) -> f64 {
        self.inner.wobble_amplitude
    }
    #[getter]
    fn wobble_frequency(&self) -> f64 {
        self.inner.wobble_frequency
    }
    #[getter]
    fn overshoot(&self) -> f64 {
        self.inner.overshoot
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyfunction]
#[pyo3(signature = (style, instance_seed, size = 64))]
fn render_mark(style: PyRef<'_, PyWriterStyle>, instance_seed: u64, size: usize) -> PyMark {
    PyMark {
        inner: synth::render_mark_sized(&style.inner, instance_seed, size).0,
    }
}

/// `[(writer_id, [MarkImage, ...]), ...]`
#[pyfunction]
#[pyo3(signature = (writers, marks_per_writer, seed, size = 64))]
fn generate_dataset(writers: usize, marks_per_writer: usize, seed: u64, size: usize) -> R<Vec<(u64, Vec<PyMark>)>> {
    let groups = synth::generate_dataset_sized(writers, marks_per_writer, seed, size).map_err(to_py)?;
    Ok(groups
        .into_iter()
        .map(|g| (g.writer_id, g.marks.into_iter().map(|inner| PyMark { inner }).collect()))
        .collect())
}

#[pyclass(module = "markmatch", name = "Encoder")]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    /// Freshly initialised encoder with the default three-layer stack.
    #[new]
    #[pyo3(signature = (seed = 0, input_size = 64, embedding_dim = 32))]
    fn new(seed: u64, input_size: usize, embedding_dim: usize) -> R<Self> {
        let config = EncoderConfig {
            input_size,
            embedding_dim,
            ..Default::default()
        };
        Ok(PyEncoder {
            inner: EncoderParams::init(config, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> R<Self> {
        Ok(PyEncoder {
            inner: EncoderParams::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> R<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn embed(&self, mark: PyRef<'_, PyMark>) -> R<Vec<f64>> {
        Ok(self.inner.embed(&mark.inner).map_err(to_py)?.values().to_vec())
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version().to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(input_size={}, embedding_dim={}, params={}, version={:?})",
            self.inner.config().input_size,
            self.inner.embedding_dim(),
            self.inner.num_params(),
            self.inner.version()
        )
    }
}

/// `{"total", "row_ce", "col_ce", "diag_bce"}` for aligned embedding sets.
#[pyfunction]
#[pyo3(signature = (a, b, temperature = 0.07, alpha = 1.0))]
fn dual_loss(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, temperature: f64, alpha: f64) -> R<HashMap<&'static str, f64>> {
    let cfg = loss_config(temperature, alpha)?;
    let s = similarity_matrix(&a, &b, &cfg).map_err(to_py)?;
    let l = core_dual_loss(&s, &cfg).map_err(to_py)?;
    Ok(HashMap::from([("total", l.total), ("row_ce", l.row_ce), ("col_ce", l.col_ce), ("diag_bce", l.diag_bce)]))
}

fn embedding(values: Vec<f64>) -> R<EmbeddingVector> {
    EmbeddingVector::new(values).map_err(to_py)
}

#[pyclass(module = "markmatch", name = "Pool")]
struct PyPool {
    inner: markmatch_core::Pool,
}

#[pymethods]
impl PyPool {
    #[new]
    fn new(dim: usize) -> Self {
        PyPool {
            inner: markmatch_core::Pool::new(dim),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> R<Self> {
        Ok(PyPool {
            inner: markmatch_core::Pool::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> R<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Enrolls a unit-norm embedding and returns its `alias<ballot>_<mark>`.
    #[pyo3(signature = (embedding, ballot_id, mark_index = None))]
    fn enroll(&mut self, embedding: Vec<f64>, ballot_id: &str, mark_index: Option<usize>) -> R<String> {
        let index = mark_index.unwrap_or_else(|| self.inner.marks_for_ballot(ballot_id));
        self.inner
            .enroll(self::embedding(embedding)?, ballot_id, index)
            .map_err(to_py)
    }

    /// `[(rank, alias, softmax_score, raw_logit), ...]`
    #[pyo3(signature = (embedding, k = 5, temperature = 0.07))]
    fn query(&self, embedding: Vec<f64>, k: usize, temperature: f64) -> R<Vec<(usize, String, f64, f64)>> {
        let cfg = loss_config(temperature, 1.0)?;
        Ok(self
            .inner
            .query(&self::embedding(embedding)?, k, &cfg)
            .map_err(to_py)?
            .into_iter()
            .map(|m| (m.rank, m.alias, m.softmax_score, m.raw_logit))
            .collect())
    }

    /// `(pool_aliases, query_labels, cells)` with `cells[pool_row][query_col]`.
    #[pyo3(signature = (queries, temperature = 0.07))]
    #[allow(clippy::type_complexity)]
    fn heatmap(&self, queries: Vec<(String, Vec<f64>)>, temperature: f64) -> R<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
        let cfg = loss_config(temperature, 1.0)?;
        let embs = queries
            .iter()
            .map(|(_, v)| embedding(v.clone()))
            .collect::<R<Vec<_>>>()?;
        let refs: Vec<(&str, &EmbeddingVector)> = queries.iter().map(|(l, _)| l.as_str()).zip(&embs).collect();
        let h = self.inner.heatmap(&refs, &cfg).map_err(to_py)?;
        Ok((h.pool_aliases, h.query_aliases, h.cells))
    }

    fn aliases(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.alias.clone()).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "markmatch", name = "Segment")]
struct PySegment {
    #[pyo3(get)]
    bbox: (usize, usize, usize, usize),
    #[pyo3(get)]
    rle_mask: String,
    #[pyo3(get)]
    crop: PyMark,
}

/// Extracts the mark at `prompt` (`"point:x,y"` or `"box:x0,y0,x1,y1"`);
/// raises `NoMarkFound` over blank paper.
#[pyfunction]
#[pyo3(signature = (image, prompt, ballot_id = "ballot", crop_size = 64))]
fn segment(image: PyRef<'_, PyImage>, prompt: &str, ballot_id: &str, crop_size: usize) -> R<PySegment> {
    let prompt = SegmentPrompt::parse(prompt).map_err(to_py)?;
    let opts = SegmentOptions {
        crop_size,
        ..Default::default()
    };
    let s = core_segment(&image.inner, prompt, ballot_id, &opts).map_err(to_py)?;
    Ok(PySegment {
        bbox: (s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1),
        rle_mask: rle::encode(&s.mask),
        crop: PyMark { inner: s.crop },
    })
}

/// Trains on a dataset directory written by `markmatch synth`; returns the
/// encoder and per-epoch mean losses.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (data_dir, epochs = 30, batch_size = 16, learning_rate = 1e-3, seed = 0, baseline = false, holdout = 0))]
fn train(
    py: Python<'_>,
    data_dir: &str,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    baseline: bool,
    holdout: usize,
) -> R<(PyEncoder, Vec<f64>)> {
    let groups = synth::read_dataset(data_dir).map_err(to_py)?;
    let groups = if holdout == 0 {
        &groups[..]
    } else {
        trainer::holdout_split(&groups, holdout).map_err(to_py)?.0
    };
    let mut cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        ..Default::default()
    };
    if let Some(m) = groups.first().and_then(|g| g.marks.first()) {
        cfg.encoder.input_size = m.width();
    }
    let objective = if baseline { Objective::PairwiseBaseline } else { Objective::Contrastive };
    let report = py
        .detach(|| trainer::train(groups, &cfg, objective, &mut |_, _| {}))
        .map_err(to_py)?;
    Ok((PyEncoder { inner: report.params }, report.epoch_losses))
}

#[pymodule]
fn markmatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyMark>()?;
    m.add_class::<PyWriterStyle>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyPool>()?;
    m.add_class::<PySegment>()?;
    m.add_function(wrap_pyfunction!(render_mark, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dual_loss, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("NoMarkFound", m.py().get_type::<NoMarkFound>())?;
    m.add("ConflictError", m.py().get_type::<ConflictError>())?;
    Ok(())
}
