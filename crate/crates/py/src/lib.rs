//! Python bindings for the metric, statistics and Deauville helpers.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use impress_core::deauville;
use impress_core::metrics::{lexical, normalize};
use impress_core::stats::{self, BootstrapConfig, ExceedanceResult, Verdict};
use impress_core::synth::{self, SynthConfig};

fn value_error<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(trials: usize, level: f64, seed: u64) -> BootstrapConfig {
    BootstrapConfig { trials, level, seed }
}

/// Lowercased word tokens; punctuation marks are separate tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    normalize(text)
}

/// ROUGE-N (precision, recall, f) on normalized tokens.
#[pyfunction]
#[pyo3(signature = (hypothesis, reference, n = 1))]
fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> PyResult<(f64, f64, f64)> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be at least 1"));
    }
    let p = lexical::rouge_n(&normalize(hypothesis), &normalize(reference), n);
    Ok((p.precision, p.recall, p.f))
}

/// ROUGE-L (precision, recall, f) on normalized tokens.
#[pyfunction]
fn rouge_l(hypothesis: &str, reference: &str) -> (f64, f64, f64) {
    let p = lexical::rouge_l(&normalize(hypothesis), &normalize(reference));
    (p.precision, p.recall, p.f)
}

#[pyfunction]
fn bleu(hypothesis: &str, reference: &str) -> f64 {
    lexical::bleu(&normalize(hypothesis), &normalize(reference))
}

/// Every lexical metric by name, each on a 0-1 scale.
#[pyfunction]
fn lexical_metrics(hypothesis: &str, reference: &str) -> BTreeMap<String, f64> {
    lexical::lexical_metrics(hypothesis, reference)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

#[pyfunction]
fn spearman_rho(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    stats::spearman_rho(&x, &y).map_err(value_error)
}

/// Percentile bootstrap of the mean: (estimate, ci_low, ci_high).
#[pyfunction]
#[pyo3(signature = (values, trials = 10_000, level = 0.95, seed = 0))]
fn bootstrap_mean(values: Vec<f64>, trials: usize, level: f64, seed: u64) -> PyResult<(f64, f64, f64)> {
    let s = stats::bootstrap_mean(&values, config(trials, level, seed)).map_err(value_error)?;
    Ok((s.estimate, s.ci_low, s.ci_high))
}

fn exceedance_tuple(r: ExceedanceResult) -> (f64, bool, f64) {
    (r.exceedance, r.verdict == Verdict::Significant, r.p_value)
}

/// Tests mean(a) > mean(b): (exceedance, significant, p_value).
#[pyfunction]
#[pyo3(signature = (a, b, paired = true, trials = 10_000, seed = 0))]
fn exceedance_test(a: Vec<f64>, b: Vec<f64>, paired: bool, trials: usize, seed: u64) -> PyResult<(f64, bool, f64)> {
    let c = config(trials, 0.95, seed);
    let r = if paired {
        stats::paired_exceedance_test(&a, &b, c)
    } else {
        stats::two_sample_exceedance_test(&a, &b, c)
    };
    r.map(exceedance_tuple).map_err(value_error)
}

#[pyfunction]
fn min_max_normalize(values: Vec<f64>) -> Vec<f64> {
    stats::benchmark::min_max_normalize(&values)
}

/// Linearly weighted Cohen's kappa over labels 1-5.
#[pyfunction]
fn weighted_kappa(pred: Vec<u8>, reference: Vec<u8>) -> PyResult<f64> {
    deauville::weighted_kappa(&pred, &reference).map_err(value_error)
}

/// Exam-level Deauville score of an impression, or None.
#[pyfunction]
fn extract_ds(text: &str) -> Option<u8> {
    deauville::extract_ds("", text).ds
}

/// Synthetic corpus as a JSON string: `{reports, styles, planted_ds}`.
#[pyfunction]
#[pyo3(signature = (n_reports = 20, n_ds = 0, physicians_per_style = 1, findings_min = 20, findings_max = 40, seed = 0))]
fn synth_corpus(
    n_reports: usize,
    n_ds: usize,
    physicians_per_style: usize,
    findings_min: usize,
    findings_max: usize,
    seed: u64,
) -> PyResult<String> {
    if n_ds > n_reports || findings_min > findings_max || physicians_per_style == 0 {
        return Err(PyValueError::new_err("invalid synthetic corpus configuration"));
    }
    let corpus = synth::generate(&SynthConfig {
        n_reports,
        n_ds,
        physicians_per_style,
        findings_words: (findings_min, findings_max),
        seed,
        ..Default::default()
    });
    serde_json::to_string(&corpus).map_err(value_error)
}

#[pymodule]
fn impress_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_mean, m)?)?;
    m.add_function(wrap_pyfunction!(exceedance_test, m)?)?;
    m.add_function(wrap_pyfunction!(min_max_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(extract_ds, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    Ok(())
}
