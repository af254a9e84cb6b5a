//! Python bindings: metric, feature and phantom helpers over plain lists.
//! Voxel arrays are flat with x varying fastest.

use std::fs::File;
use std::path::Path;

use gliomkit::cohort::{load_subject, write_subject};
use gliomkit::phantom::{cohort_rows, generate_phantom, PhantomConfig};
use gliomkit::radiomics::{assemble_features, full_feature_names, write_cohort_csv, FeatureSpec};
use gliomkit::segmetrics::{evaluate_case, Region, TumorCoreMode};
use gliomkit::survival::eval::{self, Buckets};
use gliomkit::volume::{Grid, LabelVolume, Modality};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Accuracy, MSE, MedianSE, stdSE and SpearmanR of survival predictions.
#[pyfunction]
#[pyo3(signature = (pred, truth, short_max = 304.0, long_min = 456.0))]
fn evaluate_survival(pred: Vec<f64>, truth: Vec<f64>, short_max: f64, long_min: f64) -> PyResult<Vec<(String, f64)>> {
    let e = eval::evaluate_survival(&pred, &truth, Buckets { short_max, long_min }).map_err(value_err)?;
    Ok(vec![
        ("Cases".into(), e.cases as f64),
        ("Accuracy".into(), e.accuracy),
        ("MSE".into(), e.mse),
        ("MedianSE".into(), e.median_se),
        ("stdSE".into(), e.std_se),
        ("SpearmanR".into(), e.spearman_r),
    ])
}

/// Dice and Hausdorff scores per merged region; Hausdorff is `None` when a
/// region is empty in either volume.
#[pyfunction]
#[pyo3(signature = (pred, truth, dims, spacing = [1.0, 1.0, 1.0], mode = "standard"))]
fn segmentation_scores(
    pred: Vec<u8>,
    truth: Vec<u8>,
    dims: [usize; 3],
    spacing: [f64; 3],
    mode: &str,
) -> PyResult<Vec<(String, Option<f64>)>> {
    let mode = match mode {
        "standard" => TumorCoreMode::Standard,
        "strict_paper" => TumorCoreMode::StrictPaper,
        other => return Err(value_err(format!("unknown region-merge mode {other:?}"))),
    };
    let grid = Grid::new(dims, spacing).map_err(value_err)?;
    let p = LabelVolume::new(grid, pred).map_err(value_err)?;
    let t = LabelVolume::new(grid, truth).map_err(value_err)?;
    let m = evaluate_case("case", &p, &t, mode).map_err(value_err)?;
    let mut out = Vec::new();
    for r in Region::ALL {
        let s = m.get(r);
        out.push((format!("Dice_{}", r.name()), Some(s.dice)));
        out.push((format!("Hausdorff_{}", r.name()), s.hd));
        out.push((format!("Hausdorff95_{}", r.name()), s.hd95));
    }
    Ok(out)
}

/// Feature names of `paper50` or `all`, in column order.
#[pyfunction]
#[pyo3(signature = (spec = "paper50"))]
fn feature_names(spec: &str) -> PyResult<Vec<String>> {
    if spec == "all" {
        return Ok(full_feature_names());
    }
    FeatureSpec::by_name(spec)
        .map(|s| s.features)
        .ok_or_else(|| value_err(format!("unknown feature spec {spec:?}")))
}

/// Features of one subject of a cohort directory, using its ground-truth
/// segmentation.
#[pyfunction]
#[pyo3(signature = (cohort_dir, subject_id, age, spec = "paper50"))]
fn subject_features(cohort_dir: &str, subject_id: &str, age: f64, spec: &str) -> PyResult<Vec<(String, f64)>> {
    let spec = FeatureSpec::by_name(spec).ok_or_else(|| value_err(format!("unknown feature spec {spec:?}")))?;
    let s = load_subject(Path::new(cohort_dir), subject_id, &Modality::ALL).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let labels = s.labels.ok_or_else(|| value_err(format!("subject {subject_id} has no segmentation")))?;
    let v = assemble_features(&labels, &s.stack, age, &spec).map_err(value_err)?;
    Ok(v.names.into_iter().zip(v.values).collect())
}

/// Writes `n` phantom subjects plus `survival.csv` under `out_dir`; returns
/// their ids.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0, first_index = 0, drop_necrotic = false, drop_edema = false))]
fn generate_phantoms(out_dir: &str, n: usize, seed: u64, first_index: usize, drop_necrotic: bool, drop_edema: bool) -> PyResult<Vec<String>> {
    let cfg = PhantomConfig {
        drop_necrotic,
        drop_edema,
        ..Default::default()
    };
    let root = Path::new(out_dir);
    let io = |e: &dyn std::fmt::Display| PyIOError::new_err(e.to_string());
    let phantoms: Vec<_> = (first_index..first_index + n).map(|i| generate_phantom(seed, i, &cfg)).collect();
    for p in &phantoms {
        write_subject(&root.join("subjects"), &p.stack, Some(&p.labels)).map_err(|e| io(&e))?;
    }
    let f = File::create(root.join("survival.csv")).map_err(|e| io(&e))?;
    write_cohort_csv(f, &cohort_rows(&phantoms)).map_err(|e| io(&e))?;
    Ok(phantoms.iter().map(|p| p.stack.subject_id().to_string()).collect())
}

#[pymodule]
fn gliomkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(evaluate_survival, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_scores, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(subject_features, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    Ok(())
}
