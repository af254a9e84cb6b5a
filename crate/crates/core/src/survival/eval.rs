//! Bucket accuracy, squared-error statistics, Spearman correlation and
//! seeded k-fold cross-validation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_model, CohortTable, ModelConfig, ModelKind, SurvivalError};

/// Short < `short_max` ≤ mid < `long_min` ≤ long, in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Buckets {
    pub short_max: f64,
    pub long_min: f64,
}

impl Default for Buckets {
    fn default() -> Self {
        Self {
            short_max: 304.0,
            long_min: 456.0,
        }
    }
}

impl Buckets {
    pub fn bucket(&self, days: f64) -> usize {
        if days < self.short_max {
            0
        } else if days < self.long_min {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEval {
    pub cases: usize,
    pub accuracy: f64,
    pub mse: f64,
    pub median_se: f64,
    pub std_se: f64,
    pub spearman_r: f64,
    pub buckets: Buckets,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho as the Pearson correlation of average ranks; 0 when either
/// side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn evaluate_survival(pred: &[f64], truth: &[f64], buckets: Buckets) -> Result<SurvivalEval, SurvivalError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(SurvivalError::Shape(format!(
            "need equal nonzero lengths, got {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| buckets.bucket(**p) == buckets.bucket(**t))
        .count();
    let mut se: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).collect();
    let mse = se.iter().sum::<f64>() / n as f64;
    let std_se = if n > 1 {
        (se.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SurvivalEval {
        cases: n,
        accuracy: hits as f64 / n as f64,
        mse,
        median_se: median(&mut se),
        std_se,
        spearman_r: spearman(pred, truth),
        buckets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub predictions: Vec<f64>,
    pub eval: SurvivalEval,
    /// ANN only: training and held-out fold MSE per epoch.
    pub train_curve: Vec<f64>,
    pub test_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: ModelKind,
    pub folds: Vec<FoldResult>,
    /// Unweighted mean of the per-fold metrics.
    pub mean: SurvivalEval,
    /// Metrics over all out-of-fold predictions pooled together.
    pub pooled: SurvivalEval,
}

/// Seeded shuffle into `k` contiguous folds whose sizes differ by at most one.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, SurvivalError> {
    if k < 2 || k > n {
        return Err(SurvivalError::Folds { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + (f < extra) as usize;
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// k-fold cross-validation; every model (and its standardization) is fitted
/// on the training folds only. Fold `f` trains with seed `seed + f`.
pub fn cross_validate(
    table: &CohortTable,
    kind: ModelKind,
    config: &ModelConfig,
    k: usize,
    seed: u64,
) -> Result<CvReport, SurvivalError> {
    let (_, y) = table.labelled()?;
    let folds = fold_indices(table.len(), k, seed)?;
    let mut results = Vec::with_capacity(k);
    let mut pooled_pred = vec![0.0; table.len()];
    for (f, test) in folds.iter().enumerate() {
        let mut test_sorted = test.clone();
        test_sorted.sort_unstable();
        let train: Vec<usize> = (0..table.len()).filter(|i| !test.contains(i)).collect();
        let (tr, te) = (table.subset(&train), table.subset(&test_sorted));
        let model = fit_model(kind, &tr, config, seed.wrapping_add(f as u64), Some(&te))?;
        let pred = model.predict_all(&te.x())?;
        let truth: Vec<f64> = test_sorted.iter().map(|&i| y[i]).collect();
        for (&i, &p) in test_sorted.iter().zip(&pred) {
            pooled_pred[i] = p;
        }
        let (train_curve, test_curve) = match &model.body {
            super::ModelBody::Ann(a) => (a.train_curve.clone(), a.monitor_curve.clone()),
            _ => (Vec::new(), Vec::new()),
        };
        results.push(FoldResult {
            fold: f,
            train_ids: tr.rows.iter().map(|r| r.subject_id.clone()).collect(),
            test_ids: te.rows.iter().map(|r| r.subject_id.clone()).collect(),
            eval: evaluate_survival(&pred, &truth, config.buckets)?,
            predictions: pred,
            train_curve,
            test_curve,
        });
    }
    let m = results.len() as f64;
    let avg = |g: fn(&SurvivalEval) -> f64| results.iter().map(|r| g(&r.eval)).sum::<f64>() / m;
    let mean = SurvivalEval {
        cases: table.len(),
        accuracy: avg(|e| e.accuracy),
        mse: avg(|e| e.mse),
        median_se: avg(|e| e.median_se),
        std_se: avg(|e| e.std_se),
        spearman_r: avg(|e| e.spearman_r),
        buckets: config.buckets,
    };
    let pooled = evaluate_survival(&pooled_pred, &y, config.buckets)?;
    Ok(CvReport {
        kind,
        folds: results,
        mean,
        pooled,
    })
}

const METRIC_HEADER: [&str; 5] = ["Accuracy", "MSE", "MedianSE", "stdSE", "SpearmanR"];

fn metric_cells(e: &SurvivalEval) -> [String; 5] {
    [e.accuracy, e.mse, e.median_se, e.std_se, e.spearman_r].map(|v| v.to_string())
}

/// `Cases, Accuracy, MSE, MedianSE, stdSE, SpearmanR`
pub fn write_eval_csv<W: Write>(w: W, evals: &[SurvivalEval]) -> Result<(), SurvivalError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["Cases"];
    header.extend(METRIC_HEADER);
    out.write_record(&header)?;
    for e in evals {
        let mut rec = vec![e.cases.to_string()];
        rec.extend(metric_cells(e));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `Models, Accuracy, MSE, MedianSE, stdSE, SpearmanR`, one row per model.
pub fn write_comparison_csv<W: Write>(w: W, rows: &[(String, SurvivalEval)]) -> Result<(), SurvivalError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["Models"];
    header.extend(METRIC_HEADER);
    out.write_record(&header)?;
    for (name, e) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(metric_cells(e));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-fold rows followed by `mean` and `pooled` rows.
pub fn write_folds_csv<W: Write>(w: W, report: &CvReport) -> Result<(), SurvivalError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["Fold", "Cases"];
    header.extend(METRIC_HEADER);
    out.write_record(&header)?;
    let rows = report
        .folds
        .iter()
        .map(|f| (f.fold.to_string(), &f.eval))
        .chain([("mean".to_string(), &report.mean), ("pooled".to_string(), &report.pooled)]);
    for (name, e) in rows {
        let mut rec = vec![name, e.cases.to_string()];
        rec.extend(metric_cells(e));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format learning curves: fold, epoch, train_mse, test_mse.
pub fn write_curves_csv<W: Write>(w: W, report: &CvReport) -> Result<(), SurvivalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fold", "epoch", "train_mse", "test_mse"])?;
    for f in &report.folds {
        for (e, tr) in f.train_curve.iter().enumerate() {
            let te = f.test_curve.get(e).map(|v| v.to_string()).unwrap_or_default();
            out.write_record([f.fold.to_string(), (e + 1).to_string(), tr.to_string(), te])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let e = evaluate_survival(&[100.0, 400.0, 500.0], &[200.0, 400.0, 600.0], Buckets::default()).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!((e.mse - 20000.0 / 3.0).abs() < 1e-9);
        assert_eq!(e.median_se, 10000.0);
        // sample std of {10000, 0, 10000}: sqrt(((10000/3)²·2 + (20000/3)²) / 2)
        let want = ((2.0 * (1e4f64 / 3.0).powi(2) + (2e4f64 / 3.0).powi(2)) / 2.0).sqrt();
        assert!((e.std_se - want).abs() < 1e-9);
        assert!((e.spearman_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_fixtures() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&[10.0, 20.0, 30.0, 40.0, 50.0], &t) - 1.0).abs() < 1e-12);
        assert!((spearman(&[5.0, 4.0, 3.0, 2.0, 1.0], &t) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[7.0; 5], &t), 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let e = evaluate_survival(&[300.0], &[300.0], Buckets::default()).unwrap();
        assert_eq!((e.accuracy, e.mse, e.std_se, e.spearman_r), (1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_predictions() {
        let t = [100.0, 350.0, 700.0, 20.0];
        let e = evaluate_survival(&t, &t, Buckets::default()).unwrap();
        assert_eq!((e.accuracy, e.mse, e.spearman_r), (1.0, 0.0, 1.0));
        assert!(evaluate_survival(&[], &[], Buckets::default()).is_err());
        assert!(evaluate_survival(&[1.0], &[1.0, 2.0], Buckets::default()).is_err());
    }

    #[test]
    fn bucket_edges() {
        let b = Buckets::default();
        assert_eq!([b.bucket(303.9), b.bucket(304.0), b.bucket(455.9), b.bucket(456.0)], [0, 1, 1, 2]);
    }

    #[test]
    fn folds_partition() {
        let f = fold_indices(5, 5, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 1));
        let f = fold_indices(11, 3, 2).unwrap();
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 3]);
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(matches!(fold_indices(3, 4, 0), Err(SurvivalError::Folds { n: 3, k: 4 })));
    }

    fn cohort(n: usize) -> CohortTable {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y = x.iter().map(|r| 100.0 + 20.0 * r[0] + r[1]).collect();
        CohortTable::from_arrays(x, y).unwrap()
    }

    #[test]
    fn leave_one_out_and_determinism() {
        let t = cohort(5);
        let cfg = ModelConfig::default();
        let r = cross_validate(&t, ModelKind::Linear, &cfg, 5, 3).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert!(r.folds.iter().all(|f| f.eval.cases == 1));
        assert_eq!(r, cross_validate(&t, ModelKind::Linear, &cfg, 5, 3).unwrap());
        assert!(cross_validate(&t, ModelKind::Linear, &cfg, 6, 3).is_err());

        let mut small = ModelConfig::default();
        small.ann.epochs = 3;
        let a = cross_validate(&cohort(12), ModelKind::Ann, &small, 3, 1).unwrap();
        assert!(a.folds.iter().all(|f| f.train_curve.len() == 3 && f.test_curve.len() == 3));
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &a).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 9);
    }

    #[test]
    fn constant_predictor_is_at_chance() {
        // Truth cycles evenly through the three buckets; a constant guess
        // lands in exactly one of them.
        let truth: Vec<f64> = (0..300).map(|i| [150.0, 380.0, 600.0][i % 3] + (i % 7) as f64).collect();
        let e = evaluate_survival(&vec![390.0; 300], &truth, Buckets::default()).unwrap();
        assert!((e.accuracy - 1.0 / 3.0).abs() <= 0.1);
    }

    #[test]
    fn csv_layouts() {
        let e = evaluate_survival(&[100.0, 400.0, 500.0], &[200.0, 400.0, 600.0], Buckets::default()).unwrap();
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &[e.clone()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("Cases,Accuracy,MSE,MedianSE,stdSE,SpearmanR\n3,1,"));
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &[("ANN".into(), e)]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("Models,Accuracy,MSE,MedianSE,stdSE,SpearmanR\nANN,1,"));
        let r = cross_validate(&cohort(6), ModelKind::Linear, &ModelConfig::default(), 3, 0).unwrap();
        let mut buf = Vec::new();
        write_folds_csv(&mut buf, &r).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 3 + 2);
        assert!(s.contains("\nmean,6,") && s.contains("\npooled,6,"));
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariant(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..30)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let r = spearman(&a, &b);
            let a2: Vec<f64> = a.iter().map(|x| (x / 100.0).exp()).collect();
            let b2: Vec<f64> = b.iter().map(|x| -x.powi(3)).collect();
            prop_assert!((spearman(&a2, &b) - r).abs() < 1e-12);
            prop_assert!((spearman(&a, &b2) + r).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn permutation_invariant_metrics(v in proptest::collection::vec((1.0f64..900.0, 1.0f64..900.0), 1..30), k in 0usize..30) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let e = evaluate_survival(&p, &t, Buckets::default()).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.rotate_left(k % p.len());
            idx.reverse();
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let t2: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let f = evaluate_survival(&p2, &t2, Buckets::default()).unwrap();
            prop_assert_eq!(e.accuracy, f.accuracy);
            prop_assert_eq!(e.median_se, f.median_se);
            prop_assert!((e.spearman_r - f.spearman_r).abs() < 1e-12);
        }
    }
}
