//! Python bindings: the triggering-model primitives, threshold sweeps,
//! checkpoint access, and the end-to-end simulation entry point.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedsim::analysis::{sweep_thresholds, ScoredImpression};
use fedsim::checkpoint::CheckpointData;
use fedsim::config::ExperimentConfig;
use fedsim::error::FedSimError;
use fedsim::server::RoundKind;

fn to_py_err(err: FedSimError) -> PyErr {
    match err {
        FedSimError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Probability of a click for a logit-space score.
#[pyfunction]
fn predict_prob(score: f64) -> f64 {
    fedsim::model::predict_prob(score)
}

/// Show/hide decision at a threshold; ties show.
#[pyfunction]
fn trigger(score: f64, tau: f64) -> bool {
    fedsim::model::threshold_decision(score, tau) == fedsim::model::TriggerDecision::Show
}

/// Threshold sweep over scored impressions.
///
/// Returns one dict per threshold with keys `tau`, `delta_ctr` (None when
/// undefined), `retained_impressions`, `retained_clicks`.
#[pyfunction]
fn threshold_sweep<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    clicked: Vec<bool>,
    taus: Vec<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    if scores.len() != clicked.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} click labels",
            scores.len(),
            clicked.len()
        )));
    }
    let data: Vec<ScoredImpression> = scores
        .into_iter()
        .zip(clicked)
        .map(|(score, clicked)| ScoredImpression { score, clicked })
        .collect();
    let metrics = sweep_thresholds(&data, &taus).map_err(to_py_err)?;
    metrics
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("tau", m.tau)?;
            d.set_item("delta_ctr", m.delta_ctr)?;
            d.set_item("retained_impressions", m.retained_impressions)?;
            d.set_item("retained_clicks", m.retained_clicks)?;
            Ok(d)
        })
        .collect()
}

/// Runs the full simulation for a config file, writes the usual outputs
/// to `out_dir`, and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed=None))]
fn run_simulation<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    out_dir: PathBuf,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ExperimentConfig::load(&config_path).map_err(to_py_err)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    let outcome = fedsim::cli::simulate_to_dir(&cfg, &out_dir).map_err(to_py_err)?;

    let d = PyDict::new(py);
    d.set_item(
        "committed_train_rounds",
        outcome.committed(RoundKind::Train),
    )?;
    d.set_item("committed_eval_rounds", outcome.committed(RoundKind::Eval))?;
    d.set_item(
        "abandoned_rounds",
        outcome.abandoned(RoundKind::Train) + outcome.abandoned(RoundKind::Eval),
    )?;
    d.set_item("model_version", outcome.final_params.round_version())?;
    d.set_item("impressions", outcome.generated_impressions)?;
    d.set_item("clicks", outcome.generated_clicks)?;
    d.set_item("straggler_reports", outcome.counters.straggler_reports)?;
    d.set_item("overlap_rate", outcome.counters.overlap_rate())?;
    d.set_item("out_dir", out_dir)?;
    Ok(d)
}

/// Loads a checkpoint as `(feature_names, weights, bias)`.
#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<(Vec<String>, Vec<f64>, f64)> {
    let text =
        std::fs::read_to_string(Path::new(&path)).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let ckpt = CheckpointData::parse(&text).map_err(to_py_err)?;
    let names = ckpt.entries.iter().map(|(n, _)| n.clone()).collect();
    let weights = ckpt.weights();
    Ok((names, weights, ckpt.bias))
}

/// The built-in default experiment configuration as a TOML string.
#[pyfunction]
fn default_config_toml() -> PyResult<String> {
    ExperimentConfig::default()
        .to_toml_string()
        .map_err(to_py_err)
}

#[pymodule]
fn fedsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(predict_prob, m)?)?;
    m.add_function(wrap_pyfunction!(trigger, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_toml, m)?)?;
    Ok(())
}
