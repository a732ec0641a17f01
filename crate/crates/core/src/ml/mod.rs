//! ML pipeline for trace-window classification: min-max scaling, chi-square
//! feature selection, random forest and linear SVM classifiers, stratified
//! k-fold cross-validation, and classification/detection metrics.

pub mod svm;
pub mod tree;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureStage, FeatureVector, Label};

pub use svm::{fit_svm, LinearSvm, SvmParams};
pub use tree::{fit_forest, ForestParams, RandomForest};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("negative feature value {value} at row {row}, column {column}")]
    NegativeFeature {
        row: usize,
        column: usize,
        value: f64,
    },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("too few rows ({rows}) for {folds}-fold cross validation")]
    TooFewRows { rows: usize, folds: usize },
    #[error("no feature vectors to classify")]
    EmptyInput,
    #[error("mode-voting count must be odd, got {0}")]
    EvenVoteCount(usize),
    #[error("dataset row {row} has {got} values, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("bad dataset file {path}: {reason}")]
    BadDatasetFile { path: PathBuf, reason: String },
    #[error("bad model file {path}: {reason}")]
    BadModelFile { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Labeled feature matrix. Labels: 0 = normal, 1 = scanning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn from_vectors(stage: FeatureStage, vectors: &[FeatureVector]) -> Self {
        Dataset {
            x: vectors.iter().map(|v| v.values.clone()).collect(),
            y: vectors
                .iter()
                .map(|v| u8::from(v.label == Some(Label::Scanning)))
                .collect(),
            feature_names: stage
                .feature_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn validate(&self) -> Result<(), MlError> {
        if self.x.is_empty() {
            return Err(MlError::EmptyDataset);
        }
        let width = self.feature_names.len();
        for (i, row) in self.x.iter().enumerate() {
            if row.len() != width {
                return Err(MlError::RaggedRow {
                    row: i,
                    got: row.len(),
                    expected: width,
                });
            }
        }
        Ok(())
    }

    /// CSV with a header naming each feature plus a trailing `label` column.
    pub fn to_csv(&self) -> String {
        let mut out = self.feature_names.join(",");
        out.push_str(",label\n");
        for (row, &label) in self.x.iter().zip(&self.y) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(if label == 1 { "scanning" } else { "normal" });
            out.push('\n');
        }
        out
    }

    pub fn from_csv_file(path: &Path) -> Result<Self, MlError> {
        let text = std::fs::read_to_string(path).map_err(|source| MlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| MlError::BadDatasetFile {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut cols: Vec<&str> = header.split(',').collect();
        if cols.pop() != Some("label") {
            return Err(bad("last header column must be `label`".into()));
        }
        let width = cols.len();
        let feature_names = cols.iter().map(|s| s.to_string()).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width + 1 {
                return Err(bad(format!(
                    "line {} has {} columns, expected {}",
                    i + 2,
                    fields.len(),
                    width + 1
                )));
            }
            let row: Result<Vec<f64>, _> = fields[..width].iter().map(|f| f.parse()).collect();
            x.push(row.map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
            y.push(match fields[width] {
                "scanning" | "1" => 1,
                "normal" | "0" => 0,
                other => return Err(bad(format!("line {}: unknown label {other}", i + 2))),
            });
        }
        let d = Dataset {
            x,
            y,
            feature_names,
        };
        d.validate()?;
        Ok(d)
    }

    /// Seeded shuffle then split into (train, test) by `train_fraction`.
    pub fn train_test_split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_train = ((self.len() as f64) * train_fraction).round() as usize;
        let pick = |ids: &[usize]| Dataset {
            x: ids.iter().map(|&i| self.x[i].clone()).collect(),
            y: ids.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        };
        (pick(&idx[..n_train]), pick(&idx[n_train..]))
    }
}

/// Per-feature min-max scaler fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

/// Fit min-max scaling to [0, 1] per feature. Constant features map to 0.
pub fn fit_scaler(x: &[Vec<f64>]) -> Result<Scaler, MlError> {
    if x.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let width = x[0].len();
    let mut mins = vec![f64::INFINITY; width];
    let mut maxs = vec![f64::NEG_INFINITY; width];
    for row in x {
        for (j, &v) in row.iter().enumerate() {
            mins[j] = mins[j].min(v);
            maxs[j] = maxs[j].max(v);
        }
    }
    Ok(Scaler { mins, maxs })
}

impl Scaler {
    /// Affine extension: out-of-range values extrapolate past [0, 1]
    /// without clamping.
    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                let range = self.maxs[j] - self.mins[j];
                if range == 0.0 {
                    0.0
                } else {
                    (v - self.mins[j]) / range
                }
            })
            .collect()
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|row| self.apply_row(row)).collect()
    }
}

/// Per-feature chi-square statistics from class-conditional feature sums
/// (the classical feature-selection test on non-negative values).
pub fn chi2_stats(x: &[Vec<f64>], y: &[u8]) -> Result<Vec<f64>, MlError> {
    let n = x.len();
    if n == 0 {
        return Err(MlError::EmptyDataset);
    }
    let width = x[0].len();
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(MlError::NegativeFeature {
                    row: i,
                    column: j,
                    value: v,
                });
            }
        }
    }
    let n1 = y.iter().filter(|&&c| c == 1).count();
    let p1 = n1 as f64 / n as f64;
    let mut stats = vec![0.0; width];
    for (j, stat) in stats.iter_mut().enumerate() {
        let mut obs = [0.0f64; 2];
        for (row, &c) in x.iter().zip(y) {
            obs[c as usize] += row[j];
        }
        let total = obs[0] + obs[1];
        if total == 0.0 {
            continue;
        }
        let exp = [total * (1.0 - p1), total * p1];
        let mut chi2 = 0.0;
        for c in 0..2 {
            if exp[c] > 0.0 {
                chi2 += (obs[c] - exp[c]).powi(2) / exp[c];
            }
        }
        *stat = chi2;
    }
    Ok(stats)
}

/// Keep features whose chi-square statistic reaches the threshold; always
/// keep at least one (the argmax) as a fallback.
pub fn chi2_select(x: &[Vec<f64>], y: &[u8], threshold: f64) -> Result<Vec<usize>, MlError> {
    let stats = chi2_stats(x, y)?;
    let mut kept: Vec<usize> = stats
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(j, _)| j)
        .collect();
    if kept.is_empty() {
        let argmax = stats
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        kept.push(argmax);
    }
    Ok(kept)
}

/// Median of the per-feature chi-square statistics; the default selection
/// threshold.
pub fn chi2_median_threshold(stats: &[f64]) -> f64 {
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    LinearSvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    Forest(RandomForest),
    Svm(LinearSvm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Hyperparams {
    Forest(ForestParams),
    Svm(SvmParams),
}

/// A trained classification pipeline: scaler, selected feature indices and
/// the fitted classifier. Immutable once trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub kind: ModelKind,
    pub stage: FeatureStage,
    pub scaler: Scaler,
    pub selected: Vec<usize>,
    pub params: ModelParams,
    pub seed: u64,
}

impl TrainedModel {
    /// Predict the label for a raw (unscaled, full-width) feature row.
    pub fn predict_raw(&self, row: &[f64]) -> u8 {
        let scaled = self.scaler.apply_row(row);
        let projected: Vec<f64> = self.selected.iter().map(|&j| scaled[j]).collect();
        match &self.params {
            ModelParams::Forest(f) => f.predict(&projected),
            ModelParams::Svm(s) => s.predict(&projected),
        }
    }

    pub fn predict_vector(&self, fv: &FeatureVector) -> Label {
        if self.predict_raw(&fv.values) == 1 {
            Label::Scanning
        } else {
            Label::Normal
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MlError> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text).map_err(|source| MlError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MlError> {
        let text = std::fs::read_to_string(path).map_err(|source| MlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: TrainedModel =
            serde_json::from_str(&text).map_err(|e| MlError::BadModelFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(MlError::BadModelFile {
                path: path.to_path_buf(),
                reason: format!("unsupported model format version {}", model.version),
            });
        }
        Ok(model)
    }
}

fn check_two_classes(y: &[u8]) -> Result<(), MlError> {
    if y.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let ones = y.iter().filter(|&&c| c == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(MlError::SingleClass);
    }
    Ok(())
}

/// Train the full pipeline on a raw dataset: scale, chi-square select at the
/// median threshold, then fit the classifier with the given hyperparameters.
pub fn train_pipeline(
    d: &Dataset,
    stage: FeatureStage,
    hp: &Hyperparams,
) -> Result<TrainedModel, MlError> {
    d.validate()?;
    if d.len() < 2 {
        return Err(MlError::EmptyDataset);
    }
    check_two_classes(&d.y)?;
    let scaler = fit_scaler(&d.x)?;
    let scaled = scaler.apply(&d.x);
    let stats = chi2_stats(&scaled, &d.y)?;
    let threshold = chi2_median_threshold(&stats);
    let selected = chi2_select(&scaled, &d.y, threshold)?;
    let projected: Vec<Vec<f64>> = scaled
        .iter()
        .map(|row| selected.iter().map(|&j| row[j]).collect())
        .collect();
    let (kind, params, seed) = match hp {
        Hyperparams::Forest(fp) => (
            ModelKind::RandomForest,
            ModelParams::Forest(fit_forest(&projected, &d.y, fp)),
            fp.seed,
        ),
        Hyperparams::Svm(sp) => (
            ModelKind::LinearSvm,
            ModelParams::Svm(fit_svm(&projected, &d.y, sp)),
            sp.seed,
        ),
    };
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        kind,
        stage,
        scaler,
        selected,
        params,
        seed,
    })
}

/// Stratified fold assignment: class indices are distributed round-robin so
/// every fold sees both classes at desk scale.
fn stratified_folds(y: &[u8], k: usize) -> Vec<usize> {
    let mut fold_of = vec![0usize; y.len()];
    for class in [0u8, 1] {
        for (pos, idx) in y
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .enumerate()
        {
            fold_of[idx] = pos % k;
        }
    }
    fold_of
}

/// Grid search by stratified k-fold cross-validation on training data only.
/// Returns the grid point with the highest mean validation accuracy; ties
/// break by grid order.
pub fn kfold_cv(
    d: &Dataset,
    k: usize,
    grid: &[Hyperparams],
    stage: FeatureStage,
) -> Result<(Hyperparams, f64), MlError> {
    d.validate()?;
    if k < 2 || d.len() < k {
        return Err(MlError::TooFewRows {
            rows: d.len(),
            folds: k,
        });
    }
    check_two_classes(&d.y)?;
    let fold_of = stratified_folds(&d.y, k);
    let mut best: Option<(usize, f64)> = None;
    for (g, hp) in grid.iter().enumerate() {
        let mut scores = Vec::new();
        for fold in 0..k {
            let train_idx: Vec<usize> = (0..d.len()).filter(|&i| fold_of[i] != fold).collect();
            let val_idx: Vec<usize> = (0..d.len()).filter(|&i| fold_of[i] == fold).collect();
            if val_idx.is_empty() {
                continue;
            }
            let train = Dataset {
                x: train_idx.iter().map(|&i| d.x[i].clone()).collect(),
                y: train_idx.iter().map(|&i| d.y[i]).collect(),
                feature_names: d.feature_names.clone(),
            };
            let model = match train_pipeline(&train, stage, hp) {
                Ok(m) => m,
                // Folds of size 1 can leave a single-class training set.
                Err(MlError::SingleClass) => continue,
                Err(e) => return Err(e),
            };
            let correct = val_idx
                .iter()
                .filter(|&&i| model.predict_raw(&d.x[i]) == d.y[i])
                .count();
            scores.push(correct as f64 / val_idx.len() as f64);
        }
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((g, mean));
        }
    }
    let (g, score) = best.expect("non-empty grid");
    Ok((grid[g].clone(), score))
}

/// Confusion counts for binary classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn from_pairs(y_true: &[u8], y_pred: &[u8]) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t, p) {
                (1, 1) => cm.tp += 1,
                (0, 1) => cm.fp += 1,
                (1, 0) => cm.fn_ += 1,
                _ => cm.tn += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A ratio whose denominator may be zero; degenerate ratios report 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub degenerate: bool,
}

fn rate(num: usize, den: usize) -> Rate {
    if den == 0 {
        Rate {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Rate {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

/// Precision TP/(TP+FP) and recall TP/(TP+FN).
pub fn precision_recall(cm: &ConfusionMatrix) -> (Rate, Rate) {
    (rate(cm.tp, cm.tp + cm.fp), rate(cm.tp, cm.tp + cm.fn_))
}

/// Detection rate (fraction of positive traces correctly detected) and
/// missed-detection rate 1 - DR.
pub fn detection_rates(cm: &ConfusionMatrix) -> (Rate, Rate) {
    let dr = rate(cm.tp, cm.tp + cm.fn_);
    let mdr = Rate {
        value: if dr.degenerate { 0.0 } else { 1.0 - dr.value },
        degenerate: dr.degenerate,
    };
    (dr, mdr)
}

/// Majority label over the model's predictions for `n` consecutive windows
/// (the most recent `n` when more are supplied).
pub fn classify_with_mode(
    model: &TrainedModel,
    windows: &[FeatureVector],
    n: usize,
) -> Result<Label, MlError> {
    if windows.is_empty() {
        return Err(MlError::EmptyInput);
    }
    if n == 0 || n.is_multiple_of(2) {
        return Err(MlError::EvenVoteCount(n));
    }
    let start = windows.len().saturating_sub(n);
    let votes = &windows[start..];
    let scanning = votes
        .iter()
        .filter(|fv| model.predict_vector(fv) == Label::Scanning)
        .count();
    Ok(if 2 * scanning > votes.len() {
        Label::Scanning
    } else {
        Label::Normal
    })
}

/// Centred-mode smoothing of per-window predictions: position i takes the
/// majority over a window of up to n predictions centred on i (clipped at the
/// ends, ties resolved to the positive class).
pub fn mode_smooth(preds: &[u8], n: usize) -> Vec<u8> {
    let half = n / 2;
    preds
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let start = i.saturating_sub(half);
            let end = (i + half + 1).min(preds.len());
            let window = &preds[start..end];
            let ones = window.iter().filter(|&&p| p == 1).count();
            u8::from(2 * ones >= window.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        // Feature 0 is 10x the label, feature 1 constant.
        Dataset {
            x: vec![
                vec![0.0, 3.0],
                vec![0.0, 3.0],
                vec![10.0, 3.0],
                vec![10.0, 3.0],
            ],
            y: vec![0, 0, 1, 1],
            feature_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn scaler_maps_to_unit_interval() {
        let x = vec![vec![0.0], vec![5.0], vec![10.0]];
        let s = fit_scaler(&x).unwrap();
        assert_eq!(s.apply(&x), vec![vec![0.0], vec![0.5], vec![1.0]]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = vec![vec![3.0], vec![3.0], vec![3.0]];
        let s = fit_scaler(&x).unwrap();
        assert_eq!(s.apply(&x), vec![vec![0.0], vec![0.0], vec![0.0]]);
    }

    #[test]
    fn out_of_range_extends_affinely() {
        let s = fit_scaler(&[vec![0.0], vec![10.0]]).unwrap();
        assert_eq!(s.apply_row(&[20.0]), vec![2.0]);
    }

    #[test]
    fn chi2_hand_computed_toy() {
        let d = toy_dataset();
        let stats = chi2_stats(&d.x, &d.y).unwrap();
        // Feature 0: totals 20, class priors 0.5/0.5, obs (0, 20), exp (10, 10):
        // chi2 = 100/10 + 100/10 = 20.
        assert!((stats[0] - 20.0).abs() < 1e-12);
        // Feature 1 identical across classes: obs (6, 6) = exp.
        assert!(stats[1].abs() < 1e-12);
        let kept = chi2_select(&d.x, &d.y, 1.0).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn chi2_threshold_zero_keeps_all() {
        let d = toy_dataset();
        let kept = chi2_select(&d.x, &d.y, 0.0).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn chi2_fallback_keeps_argmax() {
        let d = toy_dataset();
        let kept = chi2_select(&d.x, &d.y, 1e9).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn chi2_rejects_negative() {
        let x = vec![vec![-1.0], vec![1.0]];
        assert!(matches!(
            chi2_stats(&x, &[0, 1]),
            Err(MlError::NegativeFeature { .. })
        ));
    }

    #[test]
    fn single_class_rejected() {
        let d = Dataset {
            x: vec![vec![1.0], vec![2.0]],
            y: vec![1, 1],
            feature_names: vec!["a".into()],
        };
        assert!(matches!(
            train_pipeline(
                &d,
                FeatureStage::Discovery,
                &Hyperparams::Forest(ForestParams::default())
            ),
            Err(MlError::SingleClass)
        ));
    }

    #[test]
    fn cv_single_grid_point_returned() {
        let d = toy_dataset();
        let grid = vec![Hyperparams::Forest(ForestParams::default())];
        let (best, _) = kfold_cv(&d, 2, &grid, FeatureStage::Discovery).unwrap();
        assert_eq!(best, grid[0]);
    }

    #[test]
    fn cv_prefers_separating_grid_point() {
        let mut d = toy_dataset();
        // Grow the toy set so folds stay two-class.
        for _ in 0..3 {
            d.x.extend(toy_dataset().x);
            d.y.extend(toy_dataset().y);
        }
        let grid = vec![
            Hyperparams::Forest(ForestParams {
                n_trees: 1,
                max_depth: 0, // depth-0 stumps cannot separate
                ..ForestParams::default()
            }),
            Hyperparams::Forest(ForestParams::default()),
        ];
        let (best, score) = kfold_cv(&d, 4, &grid, FeatureStage::Discovery).unwrap();
        assert_eq!(best, grid[1]);
        assert!(score > 0.9);
    }

    #[test]
    fn leave_one_out_completes() {
        let mut d = toy_dataset();
        d.x.extend(toy_dataset().x);
        d.y.extend(toy_dataset().y);
        d.x.extend(vec![vec![0.0, 3.0], vec![10.0, 3.0]]);
        d.y.extend(vec![0, 1]);
        assert_eq!(d.len(), 10);
        let grid = vec![Hyperparams::Forest(ForestParams::default())];
        kfold_cv(&d, 10, &grid, FeatureStage::Discovery).unwrap();
    }

    #[test]
    fn cv_too_few_rows() {
        let d = toy_dataset();
        let grid = vec![Hyperparams::Forest(ForestParams::default())];
        assert!(matches!(
            kfold_cv(&d, 10, &grid, FeatureStage::Discovery),
            Err(MlError::TooFewRows { .. })
        ));
    }

    #[test]
    fn precision_recall_direct() {
        let cm = ConfusionMatrix {
            tp: 3,
            fp: 1,
            fn_: 0,
            tn: 0,
        };
        let (pr, rc) = precision_recall(&cm);
        assert_eq!(pr.value, 0.75);
        assert_eq!(rc.value, 1.0);
        assert!(!pr.degenerate);
    }

    #[test]
    fn degenerate_precision_flagged() {
        let cm = ConfusionMatrix::default();
        let (pr, _) = precision_recall(&cm);
        assert_eq!(pr.value, 0.0);
        assert!(pr.degenerate);
    }

    #[test]
    fn perfect_detection_rates() {
        let cm = ConfusionMatrix {
            tp: 1000,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        let (dr, mdr) = detection_rates(&cm);
        assert_eq!(dr.value, 1.0);
        assert_eq!(mdr.value, 0.0);
    }

    #[test]
    fn mode_vote_majority() {
        assert_eq!(mode_smooth(&[1, 0, 1], 3), vec![1, 1, 1]);
        assert_eq!(mode_smooth(&[0, 0, 1, 0, 0], 5), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn classify_with_mode_on_toy_model() {
        let d = toy_dataset();
        let model = train_pipeline(
            &d,
            FeatureStage::Discovery,
            &Hyperparams::Forest(ForestParams::default()),
        )
        .unwrap();
        let fv = |v: f64| FeatureVector {
            stage: FeatureStage::Discovery,
            values: vec![v, 3.0],
            label: None,
        };
        // S, N, S -> S
        let windows = vec![fv(10.0), fv(0.0), fv(10.0)];
        assert_eq!(
            classify_with_mode(&model, &windows, 3).unwrap(),
            Label::Scanning
        );
        // n = 1 is a plain prediction of the last window.
        assert_eq!(
            classify_with_mode(&model, &windows[..2], 1).unwrap(),
            Label::Normal
        );
        assert!(matches!(
            classify_with_mode(&model, &[], 3),
            Err(MlError::EmptyInput)
        ));
    }

    #[test]
    fn model_save_load_round_trip() {
        let d = toy_dataset();
        let model = train_pipeline(
            &d,
            FeatureStage::Discovery,
            &Hyperparams::Svm(SvmParams::default()),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn csv_round_trip() {
        let d = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, d.to_csv()).unwrap();
        let back = Dataset::from_csv_file(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_bad_width_reports_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b,label\n1.0,normal\n").unwrap();
        match Dataset::from_csv_file(&path).unwrap_err() {
            MlError::BadDatasetFile { reason, .. } => assert!(reason.contains("2 columns")),
            other => panic!("unexpected {other}"),
        }
    }
}
