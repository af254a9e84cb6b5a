//! Subcommand implementations behind the `gliomkit` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use gliomkit::cohort::{self, list_subjects, load_subject, modality_path, seg_path, Subject};
use gliomkit::net::{load_net, predict_volume, prepare_slices, save_net, PixelNet, Trainer};
use gliomkit::nifti;
use gliomkit::phantom::{cohort_rows, generate_phantom};
use gliomkit::radiomics::{assemble_features, read_cohort_csv, read_feature_csv, write_cohort_csv, write_feature_csv, CohortRow, FeatureTable};
use gliomkit::segmetrics::{aggregate, evaluate_case, label_dice, largest_component_filter, write_case_csv, write_summary_csv};
use gliomkit::survival::eval::{
    cross_validate, evaluate_survival, fold_indices, write_comparison_csv, write_curves_csv, write_eval_csv, write_folds_csv,
};
use gliomkit::survival::{fit_model, load_model, read_predictions_csv, save_model, write_predictions_csv, CohortTable, ModelBody, SurvivalError};
use gliomkit::volume::{LabelVolume, Modality};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::RunConfig;
use config::require;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    SegTrain,
    SegPredict,
    SegEval,
    Features,
    SurvTrain,
    SurvPredict,
    SurvEval,
    SurvCv,
    PhantomGen,
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cmd {
        Command::SegTrain => seg_train(cfg, out),
        Command::SegPredict => seg_predict(cfg, out),
        Command::SegEval => seg_eval(cfg, out),
        Command::Features => features(cfg, out),
        Command::SurvTrain => surv_train(cfg, out),
        Command::SurvPredict => surv_predict(cfg, out),
        Command::SurvEval => surv_eval(cfg, out),
        Command::SurvCv => surv_cv(cfg, out),
        Command::PhantomGen => phantom_gen(cfg, out),
    }
}

pub const CHECKPOINT_FINAL: &str = "checkpoint_final.gknet";
pub const PRED_SUFFIX: &str = "_pred.nii.gz";

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

/// Subject ids of a cohort, restricted to `cfg.subjects` when given.
fn subject_ids(cfg: &RunConfig, root: &Path) -> Result<Vec<String>> {
    let all = list_subjects(root)?;
    let Some(wanted) = &cfg.subjects else { return Ok(all) };
    let absent: Vec<&String> = wanted.iter().filter(|id| !all.contains(id)).collect();
    if !absent.is_empty() {
        bail!("subjects not found under {}: {absent:?}", root.display());
    }
    Ok(wanted.clone())
}

fn load_labelled(root: &Path, ids: &[String]) -> Result<Vec<Subject>> {
    ids.par_iter()
        .map(|id| {
            let s = load_subject(root, id, &[])?;
            if s.labels.is_none() {
                bail!("subject {id}: missing segmentation {}", seg_path(&root.join(id), id).display());
            }
            Ok(s)
        })
        .collect()
}

fn postprocess(cfg: &RunConfig, labels: LabelVolume) -> LabelVolume {
    if cfg.largest_component {
        largest_component_filter(&labels, cfg.connectivity)
    } else {
        labels
    }
}

const TUMOR_LABELS: [u8; 3] = [1, 2, 4];

/// Mean per-label Dice of `net` over `subjects` after post-processing.
pub fn mean_label_dice(cfg: &RunConfig, net: &PixelNet, subjects: &[Subject]) -> Result<[f64; 3]> {
    let per: Vec<[f64; 3]> = subjects
        .par_iter()
        .map(|s| -> Result<[f64; 3]> {
            let pred = postprocess(cfg, predict_volume(net, &s.stack)?);
            let truth = s.labels.as_ref().expect("labelled");
            let mut d = [0.0; 3];
            for (k, &l) in TUMOR_LABELS.iter().enumerate() {
                d[k] = label_dice(&pred, truth, l)?;
            }
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let mut mean = [0.0; 3];
    for d in &per {
        for k in 0..3 {
            mean[k] += d[k] / per.len() as f64;
        }
    }
    Ok(mean)
}

fn seg_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = require(&cfg.cohort_dir, "cohort_dir")?;
    let ids = subject_ids(cfg, root)?;
    let subjects = load_labelled(root, &ids)?;
    let mut slices = Vec::new();
    for s in &subjects {
        slices.extend(prepare_slices(&s.stack, s.labels.as_ref().expect("labelled"))?);
    }
    let validation = match &cfg.validation_dir {
        Some(v) => load_labelled(v, &list_subjects(v)?)?,
        None => Vec::new(),
    };
    if cfg.target_dice.is_some() && validation.is_empty() {
        bail!("config key `target_dice` needs a non-empty `validation_dir`");
    }
    let spec = cfg.net.resolve();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = PixelNet::new(spec, &mut rng)?;
    info!("training on {} slices from {} subjects, {} parameters", slices.len(), subjects.len(), net.param_count());
    let mut trainer = Trainer::new(net, cfg.train_config());
    let mut log = csv::Writer::from_writer(create(out, "loss_log.csv")?);
    let mut header = vec!["epoch".to_string(), "loss".to_string()];
    if !validation.is_empty() {
        header.extend(TUMOR_LABELS.iter().map(|l| format!("val_dice_{l}")));
    }
    log.write_record(&header)?;
    for epoch in 1..=cfg.epochs {
        let loss = trainer.train_epoch(&slices)?;
        let mut row = vec![epoch.to_string(), loss.to_string()];
        let mut reached = false;
        if !validation.is_empty() {
            let d = mean_label_dice(cfg, &trainer.net, &validation)?;
            row.extend(d.iter().map(|v| v.to_string()));
            info!("epoch {epoch}: loss {loss:.5}, validation Dice {:.4} {:.4} {:.4}", d[0], d[1], d[2]);
            reached = cfg.target_dice.is_some_and(|t| d.iter().all(|&v| v >= t));
        } else {
            info!("epoch {epoch}: loss {loss:.5}");
        }
        log.write_record(&row)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save_net(&trainer.net, create(out, &format!("checkpoint_epoch_{epoch:04}.gknet"))?)?;
        }
        if reached {
            info!("validation target reached at epoch {epoch}");
            break;
        }
    }
    log.flush()?;
    let mut w = create(out, CHECKPOINT_FINAL)?;
    save_net(&trainer.net, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs every item, then fails listing the ids whose step failed.
fn report_failures(what: &str, results: Vec<(String, Result<()>)>) -> Result<()> {
    let failed: Vec<String> = results
        .into_iter()
        .filter_map(|(id, r)| r.err().map(|e| format!("{id}: {e:#}")))
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    for f in &failed {
        log::error!("{f}");
    }
    bail!("{what} failed for {} subject(s): {}", failed.len(), failed.join("; "))
}

fn seg_predict(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = require(&cfg.cohort_dir, "cohort_dir")?;
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let net = load_net(open(ckpt)?)?;
    let ids = subject_ids(cfg, root)?;
    let results = ids
        .par_iter()
        .map(|id| {
            let r = (|| -> Result<()> {
                let s = load_subject(root, id, &[])?;
                let pred = postprocess(cfg, predict_volume(&net, &s.stack)?);
                nifti::write_labels(&pred, out.join(format!("{id}{PRED_SUFFIX}")))?;
                Ok(())
            })();
            (id.clone(), r)
        })
        .collect();
    report_failures("prediction", results)
}

fn seg_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = require(&cfg.cohort_dir, "cohort_dir")?;
    let preds = require(&cfg.labels_dir, "labels_dir")?;
    let ids = subject_ids(cfg, root)?;
    let cases = ids
        .par_iter()
        .map(|id| -> Result<_> {
            let truth = nifti::read_labels(seg_path(&root.join(id), id)).with_context(|| format!("subject {id}: ground truth"))?;
            let pred = nifti::read_labels(preds.join(format!("{id}{PRED_SUFFIX}"))).with_context(|| format!("subject {id}: prediction"))?;
            let m = evaluate_case(id, &pred, &truth, cfg.region_merge).with_context(|| format!("subject {id}"))?;
            let mut d = [0.0; 3];
            for (k, &l) in TUMOR_LABELS.iter().enumerate() {
                d[k] = label_dice(&pred, &truth, l)?;
            }
            Ok((m, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let (metrics, label_d): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
    write_case_csv(create(out, "case_metrics.csv")?, &metrics)?;
    write_summary_csv(create(out, "summary.csv")?, &aggregate(&metrics)?)?;
    let mut w = csv::Writer::from_writer(create(out, "label_dice.csv")?);
    w.write_record(["subject_id", "dice_1", "dice_2", "dice_4"])?;
    for (m, d) in metrics.iter().zip(&label_d) {
        w.write_record([m.subject_id.clone(), d[0].to_string(), d[1].to_string(), d[2].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_cohort(path: &Path) -> Result<Vec<CohortRow>> {
    read_cohort_csv(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn features(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = require(&cfg.cohort_dir, "cohort_dir")?;
    let cohort = read_cohort(require(&cfg.survival_csv, "survival_csv")?)?;
    let spec = cfg.feature_spec();
    let ids = subject_ids(cfg, root)?;
    let results: Vec<(String, Result<_>)> = ids
        .par_iter()
        .map(|id| {
            let r = (|| {
                let age = cohort
                    .iter()
                    .find(|c| &c.subject_id == id)
                    .map(|c| c.age)
                    .ok_or_else(|| anyhow!("no age in the cohort CSV"))?;
                let dir = root.join(id);
                let present: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| modality_path(&dir, id, m).exists()).collect();
                if present.is_empty() {
                    bail!("no modality images found in {}", dir.display());
                }
                let s = load_subject(root, id, &present)?;
                let labels = match &cfg.labels_dir {
                    Some(d) => nifti::read_labels(d.join(format!("{id}{PRED_SUFFIX}")))?,
                    None => s.labels.ok_or_else(|| anyhow!("missing segmentation"))?,
                };
                Ok(assemble_features(&labels, &s.stack, age, &spec)?)
            })();
            (id.clone(), r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut skip = csv::Writer::from_writer(create(out, "skipped.csv")?);
    skip.write_record(["subject_id", "reason"])?;
    for (id, r) in results {
        match r {
            Ok(v) => {
                if !v.missing.is_empty() {
                    info!("{id}: zero-filled {}", v.missing.join(", "));
                }
                rows.push(v)
            }
            Err(e) => {
                warn!("skipping {id}: {e:#}");
                skip.write_record([id, format!("{e:#}")])?;
            }
        }
    }
    skip.flush()?;
    let mut w = create(out, "features.csv")?;
    write_feature_csv(&mut w, &spec, &rows)?;
    w.flush()?;
    info!("wrote {} feature rows", rows.len());
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureTable> {
    read_feature_csv(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn survival_table(cfg: &RunConfig) -> Result<CohortTable> {
    let feats = read_features(require(&cfg.features_csv, "features_csv")?)?;
    let cohort = read_cohort(require(&cfg.survival_csv, "survival_csv")?)?;
    join(&feats, &cohort)
}

fn join(feats: &FeatureTable, cohort: &[CohortRow]) -> Result<CohortTable> {
    CohortTable::join(feats, cohort, true).map_err(|e| match e {
        SurvivalError::Join(ids) => anyhow!("no survival value for {} subject(s): {}", ids.len(), ids.join(", ")),
        e => e.into(),
    })
}

fn write_ann_curve(out: &Path, name: &str, body: &ModelBody) -> Result<()> {
    let ModelBody::Ann(a) = body else { return Ok(()) };
    let mut w = csv::Writer::from_writer(create(out, name)?);
    w.write_record(["epoch", "train_mse", "validation_mse"])?;
    for (e, t) in a.train_curve.iter().enumerate() {
        let v = a.validation_curve.get(e).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([(e + 1).to_string(), t.to_string(), v])?;
    }
    w.flush()?;
    Ok(())
}

fn surv_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let table = survival_table(cfg)?;
    let model = fit_model(cfg.model_kind, &table, &cfg.survival, cfg.seed, None)?;
    let mut w = create(out, "model.gksurv")?;
    save_model(&model, &mut w)?;
    w.flush()?;
    write_ann_curve(out, "train_curve.csv", &model.body)
}

fn predict_table(model_path: &Path, feats: &FeatureTable) -> Result<(Vec<String>, Vec<f64>)> {
    let model = load_model(open(model_path)?)?;
    if model.feature_names != feats.names {
        bail!("feature columns differ from the {} the model was trained on", model.feature_names.len());
    }
    let ids = feats.rows.iter().map(|r| r.subject_id.clone()).collect();
    let x: Vec<Vec<f64>> = feats.rows.iter().map(|r| r.values.clone()).collect();
    Ok((ids, model.predict_all(&x)?))
}

fn surv_predict(cfg: &RunConfig, out: &Path) -> Result<()> {
    let feats = read_features(require(&cfg.features_csv, "features_csv")?)?;
    let (ids, days) = predict_table(require(&cfg.model, "model")?, &feats)?;
    let mut w = create(out, "predictions.csv")?;
    write_predictions_csv(&mut w, &ids, &days)?;
    w.flush()?;
    Ok(())
}

/// Seeded train/held-out split with `round(n·fraction)` held-out rows.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_test = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    let perm: Vec<usize> = fold_indices(n, n, seed)?.into_iter().flatten().collect();
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

fn surv_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    if !cfg.compare.is_empty() {
        let table = survival_table(cfg)?;
        let (train, test) = holdout_split(table.len(), cfg.holdout_fraction, cfg.seed)?;
        let (tr, te) = (table.subset(&train), table.subset(&test));
        let (_, truth) = te.labelled()?;
        let mut rows = Vec::new();
        for &kind in &cfg.compare {
            info!("fitting {}", kind.display_name());
            let model = fit_model(kind, &tr, &cfg.survival, cfg.seed, Some(&te))?;
            let pred = model.predict_all(&te.x())?;
            rows.push((kind.display_name().to_string(), evaluate_survival(&pred, &truth, cfg.survival.buckets)?));
        }
        let mut w = create(out, "comparison.csv")?;
        write_comparison_csv(&mut w, &rows)?;
        w.flush()?;
        return Ok(());
    }
    let cohort = read_cohort(require(&cfg.survival_csv, "survival_csv")?)?;
    let (ids, pred) = match (&cfg.predictions_csv, &cfg.model) {
        (Some(p), _) => read_predictions_csv(open(p)?)?.into_iter().unzip(),
        (None, Some(m)) => {
            let feats = read_features(require(&cfg.features_csv, "features_csv")?)?;
            let (ids, days) = predict_table(m, &feats)?;
            let mut w = create(out, "predictions.csv")?;
            write_predictions_csv(&mut w, &ids, &days)?;
            w.flush()?;
            (ids, days)
        }
        (None, None) => bail!("surv-eval needs `predictions_csv`, `model` or a non-empty `compare` list"),
    };
    let mut truth = Vec::with_capacity(ids.len());
    let mut missing = Vec::new();
    for id in &ids {
        match cohort.iter().find(|c| &c.subject_id == id).and_then(|c| c.survival_days) {
            Some(d) => truth.push(d),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        bail!("no survival value for {} subject(s): {}", missing.len(), missing.join(", "));
    }
    let eval = evaluate_survival(&pred, &truth, cfg.survival.buckets)?;
    let mut w = create(out, "eval.csv")?;
    write_eval_csv(&mut w, &[eval])?;
    w.flush()?;
    Ok(())
}

fn surv_cv(cfg: &RunConfig, out: &Path) -> Result<()> {
    let table = survival_table(cfg)?;
    let mut rows = Vec::new();
    for kind in cfg.kinds() {
        info!("{}-fold cross-validation of {}", cfg.folds, kind.display_name());
        let report = cross_validate(&table, kind, &cfg.survival, cfg.folds, cfg.seed)?;
        let mut w = create(out, &format!("folds_{}.csv", kind.name()))?;
        write_folds_csv(&mut w, &report)?;
        w.flush()?;
        if report.folds.iter().any(|f| !f.train_curve.is_empty()) {
            let mut w = create(out, &format!("curves_{}.csv", kind.name()))?;
            write_curves_csv(&mut w, &report)?;
            w.flush()?;
        }
        rows.push((kind.display_name().to_string(), report.pooled));
    }
    let mut w = create(out, "comparison.csv")?;
    write_comparison_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn phantom_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let subjects = out.join("subjects");
    let phantoms: Vec<_> = (cfg.first_index..cfg.first_index + cfg.n_subjects)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let p = generate_phantom(cfg.seed, i, &cfg.phantom);
            cohort::write_subject(&subjects, &p.stack, Some(&p.labels))?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut w = create(out, "survival.csv")?;
    write_cohort_csv(&mut w, &cohort_rows(&phantoms))?;
    w.flush()?;
    info!("wrote {} phantom subjects to {}", phantoms.len(), subjects.display());
    Ok(())
}

/// Output directory: `--out` wins over the config's `out_dir`.
pub fn resolve_out(cli: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `out_dir`"))
}
