//! Python bindings for the crowdgroup detector. Values cross the boundary as plain lists and dicts.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crowdgroup::grouping::{self, PropagationConfig};
use crowdgroup::metrics::{self, Summary};
use crowdgroup::pipeline;
use crowdgroup::scene::{self, Schema, SynthParams};
use crowdgroup::{Error, Model};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Training { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn square(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("score matrix must be square"));
    }
    Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn summary_dict<'py>(py: Python<'py>, s: &Summary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("frames", s.frames)?;
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    d.set_item("iou_auc", s.iou_auc)?;
    d.set_item("iou_gm", s.iou_gm)?;
    d.set_item("macro_f1", s.macro_f1)?;
    d.set_item("macro_iou_auc", s.macro_iou_auc)?;
    d.set_item("macro_iou_gm", s.macro_iou_gm)?;
    Ok(d)
}

/// IoU of two groups given as subject-index lists.
#[pyfunction]
fn group_iou(pred: Vec<usize>, gt: Vec<usize>) -> f64 {
    metrics::group_iou(&pred, &gt)
}

/// (precision, recall, f1) of greedy group matching at an IoU threshold.
#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.5))]
fn half_metrics(pred: Vec<Vec<usize>>, gt: Vec<Vec<usize>>, threshold: f64) -> (f64, f64, f64) {
    let r = metrics::half_metrics(&pred, &gt, threshold);
    (r.precision, r.recall, r.f1)
}

/// Normalised area under the F1-versus-IoU-threshold curve on 0.50..1.00.
#[pyfunction]
fn iou_auc(pred: Vec<Vec<usize>>, gt: Vec<Vec<usize>>) -> PyResult<f64> {
    Ok(metrics::iou_auc(&pred, &gt, &metrics::default_thresholds()).map_err(to_py)?.auc)
}

/// Groups found by label propagation over a square score matrix; singletons are dropped.
#[pyfunction]
#[pyo3(signature = (scores, presence = None, threshold = 0.5))]
fn partition(scores: Vec<Vec<f64>>, presence: Option<Vec<bool>>, threshold: f64) -> PyResult<Vec<Vec<usize>>> {
    let r = square(scores)?;
    let presence = presence.unwrap_or_else(|| vec![true; r.nrows()]);
    let cfg = PropagationConfig {
        threshold,
        ..Default::default()
    };
    Ok(grouping::partition_from_relations(&r, &presence, 0, &cfg).map_err(to_py)?.groups)
}

/// Synthetic clips in the native text format.
#[pyfunction]
#[pyo3(signature = (count, seed = 0, n_groups = 4, n_loners = 6))]
fn synth_clips(count: usize, seed: u64, n_groups: usize, n_loners: usize) -> PyResult<String> {
    let clips = (0..count)
        .map(|k| {
            let mut clip = scene::generate_synthetic_scene(&SynthParams {
                n_groups,
                n_loners,
                seed: seed.wrapping_add(k as u64),
                ..Default::default()
            })?;
            clip.clip_id = format!("clip-{k:03}");
            Ok(clip)
        })
        .collect::<crowdgroup::Result<Vec<_>>>()
        .map_err(to_py)?;
    Ok(scene::write_native(&clips))
}

/// Ids of the clips in a native clip file.
#[pyfunction]
fn clip_ids(path: PathBuf) -> PyResult<Vec<String>> {
    let clips = scene::load_clip_dataset(&path, Schema::Native).map_err(to_py)?;
    Ok(clips.into_iter().map(|c| c.clip_id).collect())
}

/// Scores a stage-2 checkpoint on labeled clips; returns model and baseline summaries.
#[pyfunction]
#[pyo3(signature = (checkpoint, clips, threshold = 0.5))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, clips: PathBuf, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let model = Model::load(&checkpoint).map_err(to_py)?;
    let clips = scene::load_clip_dataset(&clips, Schema::Native).map_err(to_py)?;
    let prop = PropagationConfig {
        threshold,
        ..Default::default()
    };
    let ours = pipeline::evaluate_model(&model, &clips, &prop).map_err(to_py)?;
    let base = pipeline::evaluate_baseline(&clips, &prop).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("model", summary_dict(py, &ours.summary())?)?;
    out.set_item("baseline", summary_dict(py, &base.summary())?)?;
    Ok(out)
}

#[pymodule(name = "crowdgroup")]
fn crowdgroup_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(group_iou, m)?)?;
    m.add_function(wrap_pyfunction!(half_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(iou_auc, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clips, m)?)?;
    m.add_function(wrap_pyfunction!(clip_ids, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
