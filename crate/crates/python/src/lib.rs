//! Python bindings for the `tokenalign` scoring, loss, retrieval, localization
//! and cache functions. Matrices cross the boundary as lists of rows of
//! floats and are computed in 64-bit.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tokenalign::aggregation::{self, ClipKind, ClipSimilarityMatrix, TokenSet};
use tokenalign::cache::{self, CacheRecord};
use tokenalign::localization::{encode_pgm, min_max, Heatmap};
use tokenalign::objective::{self, GradCheckOptions, Objective, ObjectiveConfig, Temperature};
use tokenalign::retrieval::{self, Direction, RetrievalReport};
use tokenalign::tensor::{MaskVector, Matrix};
use tokenalign::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::WriteAt { .. } => PyIOError::new_err(e.to_string()),
        Error::BackwardWithoutForward => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix<f64>> {
    Matrix::from_f64_rows(rows).map_err(to_py)
}

fn mask(bits: Vec<u8>) -> PyResult<MaskVector> {
    MaskVector::new(bits).map_err(to_py)
}

fn direction(name: &str) -> PyResult<Direction> {
    Direction::BOTH
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("direction must be a2v or v2a, got {name}")))
}

fn audio_sets(audio: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<u8>>) -> PyResult<Vec<TokenSet<f64>>> {
    if audio.len() != masks.len() {
        return Err(PyValueError::new_err("audio and masks must have the same length"));
    }
    audio
        .iter()
        .zip(masks)
        .map(|(a, m)| TokenSet::audio(matrix(a)?, mask(m)?).map_err(to_py))
        .collect()
}

fn visual_sets(visual: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<TokenSet<f64>>> {
    visual.iter().map(|v| Ok(TokenSet::visual(matrix(v)?))).collect()
}

/// Masked max-mean of one similarity matrix `[audio tokens × patches]`.
#[pyfunction]
#[pyo3(signature = (s, mask_bits, eps = 1e-6))]
fn phi(s: Vec<Vec<f64>>, mask_bits: Vec<u8>, eps: f64) -> PyResult<f64> {
    aggregation::phi_with_argmax(&matrix(&s)?, &mask(mask_bits)?, eps).map(|(v, _)| v).map_err(to_py)
}

/// Mean over patches of the max over tokens.
#[pyfunction]
fn psi(s: Vec<Vec<f64>>) -> PyResult<f64> {
    aggregation::psi_with_argmax(&matrix(&s)?).map(|(v, _)| v).map_err(to_py)
}

/// Clip similarity matrix; `kind` is `dense`, `global` or `symmetric`.
#[pyfunction]
#[pyo3(signature = (audio, masks, visual, kind = "dense", eps = 1e-6, renormalize = true))]
fn clip_matrix(
    audio: Vec<Vec<Vec<f64>>>,
    masks: Vec<Vec<u8>>,
    visual: Vec<Vec<Vec<f64>>>,
    kind: &str,
    eps: f64,
    renormalize: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let (a, v) = (audio_sets(audio, masks)?, visual_sets(visual)?);
    let c = match kind {
        "dense" => aggregation::clip_matrix_dense(&a, &v, eps),
        "global" => aggregation::clip_matrix_global(&a, &v, eps, renormalize),
        "symmetric" => aggregation::clip_matrix_symmetric(&a, &v, eps),
        other => return Err(PyValueError::new_err(format!("unknown kind {other}"))),
    }
    .map_err(to_py)?;
    Ok(c.values.to_rows_f64())
}

/// Symmetric InfoNCE of a square clip matrix at temperature `tau`.
#[pyfunction]
fn infonce(c: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let c = ClipSimilarityMatrix::new(matrix(&c)?, ClipKind::Dense).map_err(to_py)?;
    Ok(objective::infonce(&c, &Temperature::new(tau).map_err(to_py)?))
}

/// One-based rank of every query's true match.
#[pyfunction]
#[pyo3(signature = (c, direction_name = "a2v"))]
fn ranks(c: Vec<Vec<f64>>, direction_name: &str) -> PyResult<Vec<usize>> {
    let c = ClipSimilarityMatrix::new(matrix(&c)?, ClipKind::Dense).map_err(to_py)?;
    retrieval::ranks(&c, direction(direction_name)?).map_err(to_py)
}

fn report_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("direction", r.direction.name())?;
    d.set_item("n", r.n)?;
    for (k, v) in &r.recall_at {
        d.set_item(format!("r@{k}"), v)?;
    }
    d.set_item("mean_rank", r.mean_rank)?;
    d.set_item("median_rank", r.median_rank)?;
    Ok(d)
}

/// Recall@{1,5,10,50} in percent, mean and median rank.
#[pyfunction]
#[pyo3(signature = (rank_list, direction_name = "a2v"))]
fn retrieval_report<'py>(py: Python<'py>, rank_list: Vec<usize>, direction_name: &str) -> PyResult<Bound<'py, PyDict>> {
    let r = retrieval::report(&rank_list, direction(direction_name)?).map_err(to_py)?;
    report_dict(py, &r)
}

/// Averaged report of uniformly random scores over `trials` draws.
#[pyfunction]
fn random_baseline<'py>(py: Python<'py>, n: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let b = retrieval::random_baseline(n, trials, seed).map_err(to_py)?;
    let d = report_dict(py, &b.report)?;
    d.set_item("trials", b.trials)?;
    d.set_item("expected_mean_rank", b.expected_mean_rank)?;
    Ok(d)
}

/// `100 · (new − base) / base`.
#[pyfunction]
fn relative_improvement(new: f64, base: f64) -> PyResult<f64> {
    retrieval::relative_improvement(new, base).map_err(to_py)
}

/// Worst finite-difference relative error for one objective on a random batch.
#[pyfunction]
#[pyo3(signature = (objective_name, seed = 0, lambda_ = 0.7))]
fn grad_check(objective_name: &str, seed: u64, lambda_: f64) -> PyResult<f64> {
    let o: Objective = objective_name.parse().map_err(to_py)?;
    let mut cfg = ObjectiveConfig::new(o);
    cfg.lambda = lambda_;
    objective::grad_check(&GradCheckOptions::new(cfg, seed)).map(|r| r.worst).map_err(to_py)
}

/// Min-max normalized square grid encoded as binary PGM.
#[pyfunction]
#[pyo3(signature = (values, side, upscale = 1))]
fn heatmap_pgm<'py>(py: Python<'py>, values: Vec<f64>, side: usize, upscale: usize) -> PyResult<Bound<'py, PyBytes>> {
    if side == 0 || values.len() != side * side {
        return Err(PyValueError::new_err(format!("{} values do not form a {side}x{side} grid", values.len())));
    }
    let (norm, lo, hi) = min_max(&values);
    let h = Heatmap {
        grid: Matrix::from_vec(side, side, norm).map_err(to_py)?,
        token: 0,
        raw_min: lo,
        raw_max: hi,
    };
    Ok(PyBytes::new(py, &encode_pgm(&h, upscale).map_err(to_py)?))
}

type InRecord = (Vec<Vec<f64>>, Option<Vec<u8>>, Vec<u8>);
type OutRecord<'py> = (Vec<Vec<f64>>, Option<Vec<u8>>, Bound<'py, PyBytes>);

/// Writes `(matrix, mask or None, label bytes)` records as a 64-bit VESC file.
#[pyfunction]
fn write_cache(records: Vec<InRecord>, path: PathBuf) -> PyResult<()> {
    let recs = records
        .into_iter()
        .map(|(m, k, label)| Ok(CacheRecord::new(matrix(&m)?, k.map(mask).transpose()?, label)))
        .collect::<PyResult<Vec<_>>>()?;
    cache::write_cache(&recs, &path).map_err(to_py)
}

/// Reads a VESC file of either dtype as 64-bit records; masks and labels come back as bytes.
#[pyfunction]
fn read_cache<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<OutRecord<'py>>> {
    let rows = match cache::peek_dtype(&path).map_err(to_py)? {
        tokenalign::tensor::DType::F32 => cache::read_cache::<f32>(&path)
            .map_err(to_py)?
            .into_iter()
            .map(|r| (r.matrix.to_rows_f64(), r.mask, r.label))
            .collect::<Vec<_>>(),
        tokenalign::tensor::DType::F64 => cache::read_cache::<f64>(&path)
            .map_err(to_py)?
            .into_iter()
            .map(|r| (r.matrix.to_rows_f64(), r.mask, r.label))
            .collect(),
    };
    Ok(rows
        .into_iter()
        .map(|(m, k, l)| (m, k.map(|k| k.bits().to_vec()), PyBytes::new(py, &l)))
        .collect())
}

#[pymodule]
fn tokenalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phi, m)?)?;
    m.add_function(wrap_pyfunction!(psi, m)?)?;
    m.add_function(wrap_pyfunction!(clip_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(ranks, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_report, m)?)?;
    m.add_function(wrap_pyfunction!(random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_cache, m)?)?;
    m.add_function(wrap_pyfunction!(read_cache, m)?)?;
    Ok(())
}
