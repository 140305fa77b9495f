//! Python module `medvqa`: answer scoring, prompt assembly and trainable
//! parameter accounting. Training stays on the Rust side.

use medvqa_core::eval::{self, parse_jsonl, rule_classify, Prediction, Regime, SynonymTable, VerdictRecord};
use medvqa_core::finetune::count_trainable_for_config;
use medvqa_core::prompt::{self, InstructionPool};
use medvqa_core::{AnswerType, ModelConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serde wire name of a unit enum, e.g. `RULE_CORRECT` or `synonym`.
fn wire_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[pyfunction]
fn normalize(answer: &str) -> String {
    eval::normalize(answer)
}

#[pyfunction]
fn exact_match(generated: &str, ground_truth: &str) -> bool {
    eval::exact_match(generated, ground_truth)
}

/// Returns `(auto, reason)`, e.g. `("RULE_CORRECT", "synonym")`.
#[pyfunction]
#[pyo3(signature = (question, ground_truth, generated, answer_type = "open"))]
fn classify(question: &str, ground_truth: &str, generated: &str, answer_type: &str) -> PyResult<(String, Option<String>)> {
    let answer_type = match answer_type {
        "open" => AnswerType::Open,
        "closed" => AnswerType::Closed,
        other => return Err(value_err(format!("answer_type must be open or closed, got {other:?}"))),
    };
    let p = Prediction {
        id: String::new(),
        question: question.into(),
        ground_truth: ground_truth.into(),
        generated: generated.into(),
        answer_type,
    };
    let c = rule_classify(&p, &SynonymTable::default());
    Ok((wire_name(&c.auto), c.reason.as_ref().map(wire_name)))
}

/// Percentage in tenths, rounded half-up; `None` when `n` is 0.
#[pyfunction]
fn tenths_half_up(correct: usize, n: usize) -> Option<u64> {
    eval::tenths_half_up(correct, n)
}

/// `(n_open, n_closed, correct_open, correct_closed)` tuples whose rounded
/// accuracies (in tenths of a percent) hit the targets.
#[pyfunction]
fn find_counts(total: usize, open: u64, closed: u64, overall: u64) -> Vec<(usize, usize, usize, usize)> {
    eval::find_counts(total, open, closed, overall)
        .into_iter()
        .map(|s| (s.n_open, s.n_closed, s.correct_open, s.correct_closed))
        .collect()
}

/// Accuracy over a verdict file's contents under `"exact"` or `"assisted"`.
#[pyfunction]
#[pyo3(signature = (verdicts_jsonl, regime = "assisted"))]
fn aggregate<'py>(py: Python<'py>, verdicts_jsonl: &str, regime: &str) -> PyResult<Bound<'py, PyDict>> {
    let regime = match regime {
        "exact" => Regime::Exact,
        "assisted" => Regime::Assisted,
        other => return Err(value_err(format!("regime must be exact or assisted, got {other:?}"))),
    };
    let records: Vec<VerdictRecord> = parse_jsonl(verdicts_jsonl).map_err(value_err)?;
    let r = eval::aggregate(&records, regime).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("n_open", r.n_open)?;
    d.set_item("n_closed", r.n_closed)?;
    d.set_item("correct_open", r.correct_open)?;
    d.set_item("correct_closed", r.correct_closed)?;
    d.set_item("acc_open", r.acc_open)?;
    d.set_item("acc_closed", r.acc_closed)?;
    d.set_item("acc_overall", r.acc_overall)?;
    Ok(d)
}

#[pyfunction]
fn vqa_prompt(question: &str) -> PyResult<String> {
    prompt::assemble_vqa_prompt(question).map(|p| p.full_text()).map_err(value_err)
}

#[pyfunction]
fn caption_prompt(index: usize) -> PyResult<String> {
    prompt::assemble_caption_prompt(&InstructionPool::default(), index)
        .map(|p| p.full_text())
        .map_err(value_err)
}

/// Trainable parameter counts for `"full"` or `"toy"` model dimensions.
#[pyfunction]
#[pyo3(signature = (scale = "full"))]
fn count_trainable(scale: &str) -> PyResult<(u64, u64, u64)> {
    let cfg = match scale {
        "full" => ModelConfig::full_scale(),
        "toy" => ModelConfig::toy(),
        other => return Err(value_err(format!("scale must be full or toy, got {other:?}"))),
    };
    let c = count_trainable_for_config(&cfg);
    Ok((c.lora_total as u64, c.projector_total as u64, c.grand_total as u64))
}

#[pymodule]
fn medvqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(tenths_half_up, m)?)?;
    m.add_function(wrap_pyfunction!(find_counts, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(vqa_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(caption_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(count_trainable, m)?)?;
    Ok(())
}
