//! The DLSA predictor: chained Flow Filters with first-accept routing,
//! per-stage cluster priors and cluster-aided classifiers, and a residual
//! classifier for samples that no stage accepts.

use std::path::Path;

use rayon::prelude::*;

use crate::classifier::{ClusterAidedClassifier, ResidualClassifier};
use crate::codec::{seal, unseal, ByteReader, ByteWriter};
use crate::data::{FeatureDataset, HEAD_THRESHOLD};
use crate::error::{DlsaError, Result};
use crate::flow::FlowStack;
use crate::gmm::{argmax, batch_density, GaussianMixtureLatent};
use crate::matrix::Matrix;
use crate::metrics::{
    binned_confusion, cluster_purity, cluster_sizes, grouped_accuracy, mcc, nmi, separation_accuracy, MetricReport,
    NmiNormalization, StageReport,
};
use crate::scalar::Scalar;
use crate::trainer::{
    derive_seed, train_cluster_classifier, train_flow_filter, train_residual_classifier, LossRecord, TrainConfig,
    TrainedFilter,
};

pub const MODEL_MAGIC: &[u8; 4] = b"DLSA";
pub const MODEL_VERSION: u32 = 1;
const MODEL_HEADER_LEN: usize = 24;
const PREDICT_CHUNK: usize = 256;

/// `P(y | h = k)` per cluster with training occupancy counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPriorTable<T> {
    table: Matrix<T>,
    occupancy: Vec<usize>,
}

/// Normalised label histogram per cluster; empty clusters get a uniform row.
pub fn build_cluster_prior<T: Scalar>(assignments: &[(usize, usize)], k: usize, c: usize) -> Result<ClusterPriorTable<T>> {
    let mut hist = vec![vec![0usize; c]; k];
    for &(h, y) in assignments {
        if h >= k || y >= c {
            return Err(DlsaError::contract(format!("assignment ({h}, {y}) outside {k} clusters × {c} classes")));
        }
        hist[h][y] += 1;
    }
    let mut table = Matrix::zeros(k, c);
    let mut occupancy = vec![0; k];
    for (h, row) in hist.iter().enumerate() {
        let n: usize = row.iter().sum();
        occupancy[h] = n;
        for (y, &cnt) in row.iter().enumerate() {
            table[(h, y)] = if n == 0 {
                T::one() / T::of_usize(c)
            } else {
                T::of_usize(cnt) / T::of_usize(n)
            };
        }
    }
    Ok(ClusterPriorTable { table, occupancy })
}

impl<T: Scalar> ClusterPriorTable<T> {
    pub fn row(&self, k: usize) -> &[T] {
        self.table.row(k)
    }

    pub fn table(&self) -> &Matrix<T> {
        &self.table
    }

    pub fn occupancy(&self) -> &[usize] {
        &self.occupancy
    }

    /// Prior rows for a sequence of clusters, one row each.
    pub fn rows_for(&self, clusters: &[usize]) -> Matrix<T> {
        self.table.select_rows(clusters)
    }
}

/// One cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub filter: TrainedFilter<T>,
    pub prior: ClusterPriorTable<T>,
    pub classifier: ClusterAidedClassifier<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlsaCascade<T> {
    dim: usize,
    classes: usize,
    stages: Vec<Stage<T>>,
    residual: ResidualClassifier<T>,
    /// Per-class counts of the full training set.
    train_counts: Vec<usize>,
    /// Fingerprint of the training dataset file.
    train_fingerprint: u32,
}

/// Where a sample was classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Stage(usize),
    Residual,
}

/// Path of one sample through the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    pub route: Route,
    /// Log-likelihood at every visited stage, in order.
    pub logliks: Vec<T>,
    /// Latent code at every visited stage.
    pub latents: Vec<Vec<T>>,
    /// Most probable cluster at the accepting stage.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub label: usize,
    pub record: RoutingRecord<T>,
}

impl<T: Scalar> DlsaCascade<T> {
    pub fn new(
        stages: Vec<Stage<T>>,
        residual: ResidualClassifier<T>,
        train_counts: Vec<usize>,
        train_fingerprint: u32,
    ) -> Result<Self> {
        let (dim, classes) = (residual.dim(), residual.classes());
        if train_counts.len() != classes {
            return Err(DlsaError::dim("DlsaCascade::new", "train counts do not match class count"));
        }
        for (s, st) in stages.iter().enumerate() {
            if st.filter.flow.dim() != dim || st.filter.mixture.dim() != dim || st.classifier.dim() != dim {
                return Err(DlsaError::dim("DlsaCascade::new", format!("stage {} has a different feature dimension", s + 1)));
            }
            if st.classifier.classes() != classes || st.prior.table.cols() != classes {
                return Err(DlsaError::dim("DlsaCascade::new", format!("stage {} has a different class count", s + 1)));
            }
            if st.prior.table.rows() != st.filter.mixture.k() {
                return Err(DlsaError::dim("DlsaCascade::new", format!("stage {} prior rows differ from clusters", s + 1)));
            }
        }
        Ok(DlsaCascade {
            dim,
            classes,
            stages,
            residual,
            train_counts,
            train_fingerprint,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn residual(&self) -> &ResidualClassifier<T> {
        &self.residual
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    pub fn train_fingerprint(&self) -> u32 {
        self.train_fingerprint
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(DlsaError::dim(
                "route",
                format!("features have {} columns, model expects {}", x.cols(), self.dim),
            ));
        }
        if !x.all_finite() {
            return Err(DlsaError::contract("features contain non-finite values"));
        }
        Ok(())
    }

    fn route_chunk(&self, x: &Matrix<T>) -> Result<Vec<RoutingRecord<T>>> {
        let mut records: Vec<RoutingRecord<T>> = (0..x.rows())
            .map(|_| RoutingRecord {
                route: Route::Residual,
                logliks: Vec::new(),
                latents: Vec::new(),
                cluster: None,
            })
            .collect();
        let mut pending: Vec<usize> = (0..x.rows()).collect();
        for (s, stage) in self.stages.iter().enumerate() {
            if pending.is_empty() {
                break;
            }
            let dens = batch_density(&stage.filter.flow, &stage.filter.mixture, &x.select_rows(&pending))?;
            let clusters = dens.clusters();
            let mut still = Vec::new();
            for (j, &i) in pending.iter().enumerate() {
                let rec = &mut records[i];
                rec.logliks.push(dens.loglik[j]);
                rec.latents.push(dens.latent.row(j).to_vec());
                if dens.loglik[j] >= stage.filter.threshold {
                    rec.route = Route::Stage(s);
                    rec.cluster = Some(clusters[j]);
                } else {
                    still.push(i);
                }
            }
            pending = still;
        }
        Ok(records)
    }

    fn predict_chunk(&self, x: &Matrix<T>) -> Result<Vec<Prediction<T>>> {
        let records = self.route_chunk(x)?;
        let mut labels = vec![0; x.rows()];
        for s in 0..=self.stages.len() {
            let rows: Vec<usize> = (0..x.rows())
                .filter(|&i| match records[i].route {
                    Route::Stage(t) => t == s,
                    Route::Residual => s == self.stages.len(),
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            let xs = x.select_rows(&rows);
            let probs = if s < self.stages.len() {
                let stage = &self.stages[s];
                let z = Matrix::from_rows(&rows.iter().map(|&i| records[i].latents[s].clone()).collect::<Vec<_>>())?;
                let clusters: Vec<usize> = rows.iter().map(|&i| records[i].cluster.expect("accepted")).collect();
                stage.classifier.predict_proba(&xs, &z, &stage.prior.rows_for(&clusters))?
            } else {
                self.residual.predict_proba(&xs)?
            };
            for (j, &i) in rows.iter().enumerate() {
                labels[i] = argmax(probs.row(j));
            }
        }
        Ok(records
            .into_iter()
            .zip(labels)
            .map(|(record, label)| Prediction { label, record })
            .collect())
    }

    /// Routes one sample: the first stage whose log-likelihood reaches its
    /// threshold accepts it, otherwise it goes to the residual classifier.
    pub fn route(&self, x: &[T]) -> Result<RoutingRecord<T>> {
        let m = Matrix::row_vector(x);
        self.check_input(&m)?;
        Ok(self.route_chunk(&m)?.remove(0))
    }

    pub fn predict(&self, x: &[T]) -> Result<Prediction<T>> {
        let m = Matrix::row_vector(x);
        self.check_input(&m)?;
        Ok(self.predict_chunk(&m)?.remove(0))
    }

    /// Row-wise predictions; identical to calling [`predict`](Self::predict) per row.
    pub fn predict_batch(&self, x: &Matrix<T>) -> Result<Vec<Prediction<T>>> {
        self.check_input(x)?;
        let starts: Vec<usize> = (0..x.rows()).step_by(PREDICT_CHUNK).collect();
        let chunks: Vec<Vec<Prediction<T>>> = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + PREDICT_CHUNK).min(x.rows())).collect();
                self.predict_chunk(&x.select_rows(&idx))
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Diagnostics of one fitted stage, indices referring to the full training set.
#[derive(Debug, Clone)]
pub struct StageFit {
    /// Training samples this stage was trained on.
    pub input: Vec<usize>,
    /// Most probable cluster of every input sample, aligned with `input`.
    pub input_clusters: Vec<usize>,
    pub filtered: Vec<usize>,
    /// Cluster of each filtered sample, aligned with `filtered`.
    pub clusters: Vec<usize>,
    pub filter_trace: Vec<LossRecord>,
    pub classifier_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CascadeFit<T> {
    pub cascade: DlsaCascade<T>,
    pub stages: Vec<StageFit>,
    /// Training samples that no stage filtered.
    pub residual: Vec<usize>,
    pub residual_trace: Vec<f64>,
    pub missing_residual_classes: Vec<usize>,
}

/// Fits a cascade of `stages` Flow Filters followed by a residual classifier.
pub fn fit_cascade<T: Scalar>(data: &FeatureDataset, cfg: &TrainConfig, stages: usize) -> Result<CascadeFit<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DlsaError::contract("cannot fit a cascade on an empty dataset"));
    }
    let c = data.num_classes();
    let mut remaining: Vec<usize> = (0..data.len()).collect();
    let mut built = Vec::with_capacity(stages);
    let mut fits = Vec::with_capacity(stages);
    for s in 0..stages {
        let sub = data.subset(&remaining);
        if sub.counts().iter().filter(|&&n| n > 0).count() < 2 {
            return Err(DlsaError::Training(format!(
                "residual training set exhausted before stage {}; use a smaller filter fraction or fewer stages",
                s + 1
            )));
        }
        let stage_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, 100 + s as u64),
            ..cfg.clone()
        };
        let fit = train_flow_filter::<T>(&sub, &stage_cfg)?;
        let prior = build_cluster_prior(&fit.filter.assignments, cfg.clusters, c)?;
        let local: Vec<usize> = (0..sub.len()).filter(|&i| fit.filtered[i]).collect();
        let xf: Matrix<T> = sub.subset(&local).features_matrix();
        let zf = batch_density(&fit.filter.flow, &fit.filter.mixture, &xf)?.latent;
        let clusters: Vec<usize> = local.iter().map(|&i| fit.clusters[i]).collect();
        let labels: Vec<usize> = local.iter().map(|&i| sub.labels()[i]).collect();
        let (classifier, classifier_trace) = train_cluster_classifier(
            &xf,
            &zf,
            &prior.rows_for(&clusters),
            &labels,
            c,
            &cfg.classifier,
            derive_seed(stage_cfg.seed, 7),
        )?;
        fits.push(StageFit {
            input: remaining.clone(),
            input_clusters: fit.clusters.clone(),
            filtered: local.iter().map(|&i| remaining[i]).collect(),
            clusters,
            filter_trace: fit.trace,
            classifier_trace,
        });
        built.push(Stage {
            filter: fit.filter,
            prior,
            classifier,
        });
        remaining = (0..sub.len()).filter(|&i| !fit.filtered[i]).map(|i| remaining[i]).collect();
        if remaining.is_empty() {
            return Err(DlsaError::Training(format!(
                "residual training set exhausted after stage {}; use a smaller filter fraction or fewer stages",
                s + 1
            )));
        }
    }
    let residual_set = if cfg.classifier.residual_on_full_set {
        data.clone()
    } else {
        data.subset(&remaining)
    };
    let rfit = train_residual_classifier::<T>(
        &residual_set.features_matrix(),
        residual_set.labels(),
        c,
        cfg.classifier.residual_kind,
        &cfg.classifier,
        derive_seed(cfg.seed, 99),
    )?;
    let cascade = DlsaCascade::new(built, rfit.classifier, data.counts(), data.fingerprint())?;
    Ok(CascadeFit {
        cascade,
        stages: fits,
        residual: remaining,
        residual_trace: rfit.trace,
        missing_residual_classes: rfit.missing_classes,
    })
}

fn write_header(w: &mut ByteWriter, c: &DlsaCascade<impl Scalar>) {
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.len_u32(c.dim);
    w.len_u32(c.classes);
    w.len_u32(c.stages.first().map_or(0, |s| s.filter.mixture.k()));
    w.len_u32(c.stages.len());
}

/// Encodes a cascade in the `DLSA` model container.
pub fn encode_model<T: Scalar>(c: &DlsaCascade<T>) -> Vec<u8> {
    let mut header = ByteWriter::new();
    write_header(&mut header, c);
    let mut w = ByteWriter::new();
    w.u32(c.train_fingerprint);
    for &n in &c.train_counts {
        w.len_u32(n);
    }
    for st in &c.stages {
        st.filter.flow.write_to(&mut w);
        st.filter.mixture.write_to(&mut w);
        w.f64(st.filter.threshold.widen());
        w.matrix(&st.prior.table);
        for &n in &st.prior.occupancy {
            w.len_u32(n);
        }
        w.len_u32(st.filter.assignments.len());
        for &(h, y) in &st.filter.assignments {
            w.len_u32(h);
            w.len_u32(y);
        }
        st.classifier.write_to(&mut w);
    }
    c.residual.write_to(&mut w);
    seal(header.into_inner(), w.into_inner())
}

/// Decodes and validates a `DLSA` model container.
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<DlsaCascade<T>> {
    let mut head = ByteReader::new(bytes, 0);
    if head.take(4)? != MODEL_MAGIC {
        return Err(DlsaError::format(0, "bad magic, expected \"DLSA\""));
    }
    let version = head.u32()?;
    if version != MODEL_VERSION {
        return Err(DlsaError::format(4, format!("unsupported version {version}")));
    }
    let (d, c, k, n_stages) = (head.usize32()?, head.usize32()?, head.usize32()?, head.usize32()?);
    let payload = unseal(bytes, MODEL_HEADER_LEN)?;
    let mut r = ByteReader::new(payload, MODEL_HEADER_LEN as u64);
    let fingerprint = r.u32()?;
    let train_counts = (0..c).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        let flow = FlowStack::read_from(&mut r, d)?;
        let mixture = GaussianMixtureLatent::read_from(&mut r, k, d)?;
        let threshold = T::of(r.f64()?);
        let table = r.matrix(k, c)?;
        let occupancy = (0..k).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let n_assign = r.usize32()?;
        let mut assignments = Vec::with_capacity(n_assign.min(r.remaining() / 8));
        for _ in 0..n_assign {
            assignments.push((r.usize32()?, r.usize32()?));
        }
        let classifier = ClusterAidedClassifier::read_from(&mut r, d, c)?;
        stages.push(Stage {
            filter: TrainedFilter {
                flow,
                mixture,
                threshold,
                assignments,
            },
            prior: ClusterPriorTable { table, occupancy },
            classifier,
        });
    }
    let residual = ResidualClassifier::read_from(&mut r, d, c)?;
    r.expect_end()?;
    let at = r.offset();
    DlsaCascade::new(stages, residual, train_counts, fingerprint).map_err(|e| DlsaError::format(at, e.to_string()))
}

pub fn save_model<T: Scalar>(path: &Path, c: &DlsaCascade<T>) -> Result<()> {
    std::fs::write(path, encode_model(c))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<DlsaCascade<T>> {
    decode_model(&std::fs::read(path)?)
}

/// Options of [`evaluate_cascade`].
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub confusion_bins: usize,
    pub nmi: NmiNormalization,
    pub head_threshold: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            confusion_bins: 20,
            nmi: NmiNormalization::Geometric,
            head_threshold: HEAD_THRESHOLD,
        }
    }
}

/// Predicts every test sample and summarises the results. Shot groups and
/// head flags come from the model's training counts. Returns the report and
/// the per-sample predictions.
pub fn evaluate_cascade<T: Scalar>(
    c: &DlsaCascade<T>,
    test: &FeatureDataset,
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<Prediction<T>>)> {
    if test.dim() != c.dim || test.num_classes() != c.classes {
        return Err(DlsaError::dim(
            "evaluate",
            format!(
                "dataset has D={} C={}, model has D={} C={}",
                test.dim(),
                test.num_classes(),
                c.dim,
                c.classes
            ),
        ));
    }
    if test.is_empty() {
        return Err(DlsaError::contract("cannot evaluate on an empty dataset"));
    }
    let preds = c.predict_batch(&test.features_matrix())?;
    let labels = test.labels();
    let yhat: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let stats = crate::data::ClassStats::from_counts(c.train_counts.clone(), opts.head_threshold);
    let head = stats.head_flags(labels);
    let mut stage_reports = Vec::with_capacity(c.stages.len());
    for (s, st) in c.stages.iter().enumerate() {
        let routed: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].record.route == Route::Stage(s)).collect();
        let clusters: Vec<usize> = routed.iter().map(|&i| preds[i].record.cluster.expect("accepted")).collect();
        let routed_labels: Vec<usize> = routed.iter().map(|&i| labels[i]).collect();
        let mask: Vec<bool> = (0..preds.len()).map(|i| preds[i].record.route == Route::Stage(s)).collect();
        stage_reports.push(StageReport {
            stage: s + 1,
            routed: routed.len(),
            separation_accuracy: separation_accuracy(&mask, &head)?,
            mean_purity: if routed.is_empty() {
                None
            } else {
                Some(cluster_purity(&clusters, &routed_labels)?.mean)
            },
            cluster_sizes: cluster_sizes(&clusters, st.filter.mixture.k()),
        });
    }
    let bins = opts.confusion_bins.min(c.classes);
    let report = MetricReport {
        split: "test".into(),
        samples: test.len(),
        accuracy: grouped_accuracy(&yhat, labels, &stats.groups)?,
        mcc: mcc(&yhat, labels)?,
        nmi: nmi(&yhat, labels, opts.nmi)?,
        nmi_normalization: opts.nmi,
        residual_routed: preds.iter().filter(|p| p.record.route == Route::Residual).count(),
        stages: stage_reports,
        confusion_bins: bins,
        confusion: binned_confusion(&yhat, labels, &c.train_counts, bins)?,
    };
    Ok((report, preds))
}

/// Per-sample routing table: 1-based label, prediction, stage and cluster;
/// `residual` marks samples no stage accepted; log-likelihoods are `;`-separated.
pub fn routing_csv<T: Scalar>(labels: &[usize], preds: &[Prediction<T>]) -> String {
    let mut out = String::from("sample,label,prediction,route,cluster,logliks\n");
    for (i, (y, p)) in labels.iter().zip(preds).enumerate() {
        let route = match p.record.route {
            Route::Stage(s) => (s + 1).to_string(),
            Route::Residual => "residual".into(),
        };
        let cluster = p.record.cluster.map_or(String::new(), |k| (k + 1).to_string());
        let lls: Vec<String> = p.record.logliks.iter().map(|l| format!("{}", l.widen())).collect();
        out.push_str(&format!("{i},{},{},{route},{cluster},{}\n", y + 1, p.label + 1, lls.join(";")));
    }
    out
}
