use std::fs;
use std::path::{Path, PathBuf};

use dlsa::cascade::{evaluate_cascade, fit_cascade, load_model, routing_csv, save_model, CascadeFit};
use dlsa::data::{gen_synthetic, load_dataset, save_dataset, DatasetManifest, FeatureDataset};
use dlsa::gmm::argmax;
use dlsa::metrics::{confusion_csv, oracle_split, MetricReport};
use dlsa::trainer::{derive_seed, trace_csv, train_residual_classifier};
use dlsa::{seeded_rng, DlsaError, Real, Result};
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig, MODEL_FILE, TEST_FILE, TRAIN_FILE};
use crate::manifest::write_run_manifest;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_config(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    write(&cfg.out.join(format!("config_{command}.json")), cfg.to_json() + "\n")
}

fn load_with_context(path: &Path) -> Result<FeatureDataset> {
    if !path.exists() {
        return Err(DlsaError::Config(format!(
            "dataset file {} not found (run `dlsa gen` first?)",
            path.display()
        )));
    }
    load_dataset(path)
}

/// Writes the train/test pair and its manifest. Returns a short summary.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String> {
    let DatasetSource::Synthetic(spec) = &cfg.dataset else {
        return Err(DlsaError::Config("`gen` needs a synthetic dataset spec".into()));
    };
    let (train, test) = gen_synthetic(spec)?;
    fs::create_dir_all(&cfg.out)?;
    save_dataset(&cfg.out.join(TRAIN_FILE), &train)?;
    save_dataset(&cfg.out.join(TEST_FILE), &test)?;
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        classes: spec.classes,
        dim: spec.dim,
        beta: spec.beta,
        seed: spec.seed,
        train_size: train.len(),
        test_size: test.len(),
        train_file: TRAIN_FILE.into(),
        test_file: TEST_FILE.into(),
    };
    write(
        &cfg.out.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_config(cfg, "gen")?;
    write_run_manifest(&cfg.out)?;
    let counts = train.counts();
    Ok(format!(
        "beta={} classes={} train={} test={} max_count={} min_count={}\n",
        spec.beta,
        spec.classes,
        train.len(),
        test.len(),
        counts.iter().max().copied().unwrap_or(0),
        counts.iter().min().copied().unwrap_or(0),
    ))
}

fn epoch_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", e + 1));
    }
    out
}

/// Fits the cascade and writes the model and its training traces.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<CascadeFit<Real>> {
    let (train_path, _) = cfg.dataset_paths();
    let train = load_with_context(&train_path)?;
    let fit = fit_cascade::<Real>(&train, &cfg.train, cfg.stages)?;
    fs::create_dir_all(&cfg.out)?;
    save_model(&cfg.out.join(MODEL_FILE), &fit.cascade)?;
    for (s, st) in fit.stages.iter().enumerate() {
        write(&cfg.out.join(format!("filter_trace_stage{}.csv", s + 1)), trace_csv(&st.filter_trace))?;
        write(
            &cfg.out.join(format!("classifier_trace_stage{}.csv", s + 1)),
            epoch_csv(&st.classifier_trace),
        )?;
    }
    write(&cfg.out.join("residual_trace.csv"), epoch_csv(&fit.residual_trace))?;
    write_config(cfg, "train")?;
    write_run_manifest(&cfg.out)?;
    Ok(fit)
}

/// One-line-per-stage summary of a fit, for stdout.
pub fn train_summary(fit: &CascadeFit<Real>) -> String {
    let mut out = String::new();
    for (s, st) in fit.stages.iter().enumerate() {
        out.push_str(&format!("stage={} input={} filtered={}\n", s + 1, st.input.len(), st.filtered.len()));
    }
    out.push_str(&format!("residual={}\n", fit.residual.len()));
    out
}

/// Evaluates a model on a dataset. The report is flagged `train` when the
/// data matches the model's training fingerprint. Artifacts are suffixed by split.
pub fn cmd_eval(cfg: &ExperimentConfig, model: Option<PathBuf>, data: Option<PathBuf>) -> Result<MetricReport> {
    let model_path = model.unwrap_or_else(|| cfg.out.join(MODEL_FILE));
    let data_path = data.unwrap_or_else(|| cfg.dataset_paths().1);
    if !model_path.exists() {
        return Err(DlsaError::Config(format!("model file {} not found", model_path.display())));
    }
    let cascade = load_model::<Real>(&model_path)?;
    let ds = load_with_context(&data_path)?;
    if ds.dim() != cascade.dim() || ds.num_classes() != cascade.classes() {
        return Err(DlsaError::Config(format!(
            "model expects D={} C={}, dataset has D={} C={}",
            cascade.dim(),
            cascade.classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    let (mut report, preds) = evaluate_cascade(&cascade, &ds, &cfg.metrics.into())?;
    if ds.fingerprint() == cascade.train_fingerprint() {
        report.split = "train".into();
    }
    let split = report.split.clone();
    write(
        &cfg.out.join(format!("report_{split}.json")),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write(&cfg.out.join(format!("confusion_{split}.csv")), confusion_csv(&report.confusion))?;
    write(&cfg.out.join(format!("routing_{split}.csv")), routing_csv(ds.labels(), &preds))?;
    write_config(cfg, "eval")?;
    write_run_manifest(&cfg.out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub p: f64,
    /// Overall test accuracy; `None` when the row failed.
    pub accuracy: Option<f64>,
    pub status: String,
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("p,accuracy,status\n");
    for r in rows {
        let acc = r.accuracy.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{},{acc},{}\n", r.p, r.status));
    }
    out
}

/// Oracle head/tail separation probe: for each `p`, split train and test
/// with [`oracle_split`], fit one residual classifier per group and score
/// the combined test predictions.
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<Vec<ProbeRow>> {
    let grid = &cfg.probe.p;
    if let Some(bad) = grid.iter().find(|p| !(0.5..=1.0).contains(*p)) {
        return Err(DlsaError::Config(format!("probe p must lie in [0.5, 1], got {bad}")));
    }
    let (train_path, test_path) = cfg.dataset_paths();
    let train = load_with_context(&train_path)?;
    let test = load_with_context(&test_path)?;
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(DlsaError::Config("train and test files disagree on D or C".into()));
    }
    let head = train.class_stats(cfg.metrics.head_threshold)?.head;
    let x_train = train.features_matrix::<Real>();
    let x_test = test.features_matrix::<Real>();
    let seed = cfg.train.seed;
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let row_seed = derive_seed(seed, p.to_bits());
        let mut rng = seeded_rng(row_seed);
        let g_train = oracle_split(train.labels(), &head, p, &mut rng)?;
        let g_test = oracle_split(test.labels(), &head, p, &mut rng)?;
        let mut correct = 0usize;
        let mut failure = None;
        for (g, group) in [true, false].into_iter().enumerate() {
            let tr: Vec<usize> = (0..train.len()).filter(|&i| g_train[i] == group).collect();
            let te: Vec<usize> = (0..test.len()).filter(|&i| g_test[i] == group).collect();
            if tr.is_empty() {
                failure = Some(format!("failed: group {} has no training samples", g + 1));
                break;
            }
            let labels: Vec<usize> = tr.iter().map(|&i| train.labels()[i]).collect();
            let fit = train_residual_classifier(
                &x_train.select_rows(&tr),
                &labels,
                train.num_classes(),
                cfg.probe.classifier,
                &cfg.train.classifier,
                derive_seed(row_seed, g as u64 + 1),
            )?;
            if te.is_empty() {
                continue;
            }
            let proba = fit.classifier.predict_proba(&x_test.select_rows(&te))?;
            correct += te
                .iter()
                .enumerate()
                .filter(|&(r, &i)| argmax(proba.row(r)) == test.labels()[i])
                .count();
        }
        rows.push(match failure {
            Some(status) => ProbeRow {
                p,
                accuracy: None,
                status,
            },
            None => ProbeRow {
                p,
                accuracy: Some(correct as f64 / test.len() as f64),
                status: "ok".into(),
            },
        });
    }
    write(&cfg.out.join("probe.csv"), probe_csv(&rows))?;
    write_config(cfg, "probe")?;
    write_run_manifest(&cfg.out)?;
    Ok(rows)
}
