//! Cross-validated evaluation of the student on held-out subjects.
//!
//! Centrality metrics are computed per subject on antivectorized graphs with
//! negative weights clamped to zero, averaged over nodes and then over
//! subjects. Edge MAE uses the unclamped predictions.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::{self, antivectorize, ConnectivityMatrix};
use crate::dataio::{kfold, Dataset};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::pipeline::{self, predict, StudentArtifact, StudentInit, Variant};
use crate::rng;

pub const CLAMP_NOTE: &str =
    "negative predicted edge weights are clamped to 0 before node strength, eigenvector and PageRank";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub edge_mae: f64,
    pub node_strength_mae: f64,
    pub eigenvector_mae: f64,
    pub pagerank_mae: f64,
}

impl FoldMetrics {
    fn as_array(&self) -> [f64; 4] {
        [self.edge_mae, self.node_strength_mae, self.eigenvector_mae, self.pagerank_mae]
    }

    fn from_array(a: [f64; 4]) -> Self {
        FoldMetrics {
            edge_mae: a[0],
            node_strength_mae: a[1],
            eigenvector_mae: a[2],
            pagerank_mae: a[3],
        }
    }

    /// Arithmetic mean, summed in slice order.
    pub fn mean(folds: &[FoldMetrics]) -> FoldMetrics {
        let mut acc = [0.0; 4];
        for f in folds {
            for (a, v) in acc.iter_mut().zip(f.as_array()) {
                *a += v;
            }
        }
        FoldMetrics::from_array(acc.map(|a| a / folds.len() as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(flatten)]
    pub metrics: FoldMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub centrality_preprocessing: String,
    pub hyperparams: HyperParams,
    pub folds: Vec<FoldReport>,
    pub mean: FoldMetrics,
    pub run_config: serde_json::Value,
    /// Wall-clock seconds; kept out of report files so they stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub runtime_secs: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "variant,seed,folds,edge_mae,node_strength_mae,eigenvector_mae,pagerank_mae";

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Header plus one summary row of fold-mean metrics.
    pub fn to_csv(&self) -> String {
        let m = &self.mean;
        format!(
            "{REPORT_CSV_HEADER}\n{},{},{},{},{},{},{}\n",
            self.variant,
            self.seed,
            self.folds.len(),
            m.edge_mae,
            m.node_strength_mae,
            m.eigenvector_mae,
            m.pagerank_mae
        )
    }

    /// Writes `path` (JSON) and a sibling `.csv` summary.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))?;
        let csv_path = path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Metrics of predicted vs ground-truth HR features.
pub fn evaluate_predictions(predicted: &Tensor, truth: &Tensor, n_h: usize, damping: f64) -> Result<FoldMetrics> {
    predicted.check_same_shape("evaluate_predictions", truth)?;
    if predicted.rows() == 0 {
        return Err(Error::Contract("no subjects to evaluate".into()));
    }
    let edge_mae = mean_abs(predicted.data(), truth.data());
    let mut sums = [0.0; 3];
    for (p, t) in predicted.row_iter().zip(truth.row_iter()) {
        let p = antivectorize(p, n_h)?.clamp_negative();
        let t = antivectorize(t, n_h)?.clamp_negative();
        sums[0] += mean_abs(&connectome::node_strength(&p), &connectome::node_strength(&t));
        sums[1] += mean_abs(
            &connectome::eigenvector_centrality(&p),
            &connectome::eigenvector_centrality(&t),
        );
        sums[2] += mean_abs(&connectome::pagerank(&p, damping), &connectome::pagerank(&t, damping));
    }
    let n = predicted.rows() as f64;
    Ok(FoldMetrics {
        edge_mae,
        node_strength_mae: sums[0] / n,
        eigenvector_mae: sums[1] / n,
        pagerank_mae: sums[2] / n,
    })
}

pub fn evaluate_fold(student: &StudentArtifact, f_l_test: &Tensor, f_h_test: &Tensor, n_h: usize) -> Result<FoldMetrics> {
    let predicted = predict(student, f_l_test)?;
    evaluate_predictions(&predicted, f_h_test, n_h, student.manifest.hyperparams.damping)
}

/// `|X_h − X̂_h|` for one subject.
pub fn residual_matrix(student: &StudentArtifact, lr_row: &[f64], hr_row: &[f64], n_h: usize) -> Result<ConnectivityMatrix> {
    let predicted = predict(student, &Tensor::row_vector(lr_row))?;
    residual_from_prediction(predicted.row(0), hr_row, n_h)
}

pub fn residual_from_prediction(predicted: &[f64], truth: &[f64], n_h: usize) -> Result<ConnectivityMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "prediction has {} edges, ground truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    let diff: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| (t - p).abs()).collect();
    antivectorize(&diff, n_h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidationOptions {
    pub folds: usize,
    pub parallel: bool,
    /// Subjects (dataset row indices) whose residual matrix to keep.
    pub residual_subjects: Vec<usize>,
}

impl Default for CrossValidationOptions {
    fn default() -> Self {
        CrossValidationOptions {
            folds: 3,
            parallel: false,
            residual_subjects: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub report: EvalReport,
    /// `(subject index, residual)` for requested subjects, from the fold in
    /// which each was held out.
    pub residuals: Vec<(usize, ConnectivityMatrix)>,
}

struct FoldOutcome {
    report: FoldReport,
    residuals: Vec<(usize, ConnectivityMatrix)>,
}

fn run_fold(
    dataset: &Dataset,
    variant: Variant,
    hp: &HyperParams,
    seed: u64,
    split: &crate::dataio::FoldSplit,
    fold: usize,
    residual_subjects: &[usize],
) -> Result<FoldOutcome> {
    let fold_seed = rng::derive_seed(seed, "fold", fold as u64);
    let train_idx = split.train_indices(fold);
    let test_idx = split.test_indices(fold);
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(&test_idx);
    let (teacher, _) = pipeline::train_teacher(&train.lr, &train.hr, hp, variant, fold_seed)?;
    let (student, _) = pipeline::train_student(&train.lr, &teacher, hp, variant, fold_seed, StudentInit::Fresh)?;
    let n_h = dataset.manifest.n_h;
    let predicted = predict(&student, &test.lr)?;
    let metrics = evaluate_predictions(&predicted, &test.hr, n_h, hp.damping)?;
    let mut residuals = Vec::new();
    for (row, &subject) in test_idx.iter().enumerate() {
        if residual_subjects.contains(&subject) {
            residuals.push((
                subject,
                residual_from_prediction(predicted.row(row), test.hr.row(row), n_h)?,
            ));
        }
    }
    Ok(FoldOutcome {
        report: FoldReport {
            fold,
            n_train: train_idx.len(),
            n_test: test_idx.len(),
            metrics,
        },
        residuals,
    })
}

/// Trains teacher and student on all folds but one, evaluates the student on
/// the held-out fold, for every fold. Each fold's run depends only on
/// `(dataset, variant, hp, seed, fold)`.
pub fn cross_validate(
    dataset: &Dataset,
    variant: Variant,
    hp: &HyperParams,
    seed: u64,
    options: &CrossValidationOptions,
) -> Result<CrossValidation> {
    let start = Instant::now();
    let split = kfold(dataset.n_subjects(), options.folds, seed)?;
    let run = |fold: usize| run_fold(dataset, variant, hp, seed, &split, fold, &options.residual_subjects);
    let outcomes: Vec<FoldOutcome> = if options.parallel {
        (0..options.folds).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..options.folds).map(run).collect::<Result<_>>()?
    };

    let mut folds = Vec::with_capacity(outcomes.len());
    let mut residuals = Vec::new();
    for o in outcomes {
        folds.push(o.report);
        residuals.extend(o.residuals);
    }
    residuals.sort_by_key(|(s, _)| *s);
    let metrics: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics).collect();
    Ok(CrossValidation {
        report: EvalReport {
            variant,
            seed,
            centrality_preprocessing: CLAMP_NOTE.to_string(),
            hyperparams: hp.clone(),
            mean: FoldMetrics::mean(&metrics),
            folds,
            run_config: serde_json::Value::Null,
            runtime_secs: start.elapsed().as_secs_f64(),
        },
        residuals,
    })
}

/// Writes a residual matrix as headerless CSV.
pub fn write_residual(path: impl AsRef<Path>, residual: &ConnectivityMatrix) -> Result<()> {
    crate::dataio::write_matrix_csv(path, residual.weights())
}
