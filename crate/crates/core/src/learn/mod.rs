//! Meta classifiers over mention feature vectors and the LASSO feature analysis.

mod gboost;
mod lasso;
mod logistic;
mod standardize;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureDataset;
use crate::io::{self, FileHeader, SCHEMA_VERSION};

pub use gboost::{log_loss, GBoostConfig, GBoostFit, RegressionTree, TreeNode};
pub use lasso::{
    average_ranks, lasso_path, rank_features, AggregatedPath, AverageRank, LassoConfig, LassoPath,
    RankEntry, ATTENTION_FEATURE,
};
pub use logistic::{sigmoid, LogisticConfig, LogisticFit, LogisticObjective};
pub use standardize::{Standardizer, CONSTANT_STD};

/// Predicted probabilities are kept this far away from 0 and 1.
pub const PROBA_EPS: f64 = 1e-15;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl Matrix {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, n_cols: usize) -> Self {
        let mut data = Vec::new();
        let mut n_rows = 0;
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged matrix row");
            data.extend_from_slice(r);
            n_rows += 1;
        }
        Self { data, n_rows, n_cols }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols.max(1)).take(self.n_rows)
    }
}

/// Labeled rows plus the trace each row belongs to.
#[derive(Debug, Clone)]
pub struct Samples {
    pub columns: Vec<String>,
    pub x: Matrix,
    pub y: Vec<bool>,
    pub trace_ids: Vec<String>,
}

impl Samples {
    pub fn new(columns: Vec<String>, rows: &[Vec<f64>], y: Vec<bool>, trace_ids: Vec<String>) -> Result<Self> {
        let d = columns.len();
        if rows.len() != y.len() || rows.len() != trace_ids.len() {
            return Err(Error::InvalidInput("rows, labels and trace ids differ in length".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: r.len(),
            });
        }
        Ok(Self {
            x: Matrix::from_rows(rows.iter().map(Vec::as_slice), d),
            columns,
            y,
            trace_ids,
        })
    }

    pub fn from_dataset(ds: &FeatureDataset) -> Self {
        Self {
            columns: ds.columns.clone(),
            x: Matrix::from_rows(ds.rows.iter().map(|r| r.values.as_slice()), ds.columns.len()),
            y: ds.labels(),
            trace_ids: ds.rows.iter().map(|r| r.trace_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            columns: self.columns.clone(),
            x: Matrix::from_rows(idx.iter().map(|&i| self.x.row(i)), self.x.n_cols),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            trace_ids: idx.iter().map(|&i| self.trace_ids[i].clone()).collect(),
        }
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingFeature(format!("no column named `{name}`")))
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Logistic,
    Gboost,
}

impl Learner {
    pub fn short_name(self) -> &'static str {
        match self {
            Learner::Logistic => "LR",
            Learner::Gboost => "GB",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Gboost,
    SingleFeatureBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub logistic: LogisticConfig,
    pub gboost: GBoostConfig,
    /// Learner behind the single-feature baselines.
    pub baseline_learner: Learner,
    /// Decision cut on the predicted probability.
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            logistic: LogisticConfig::default(),
            gboost: GBoostConfig::default(),
            baseline_learner: Learner::Logistic,
            threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.logistic;
        if !(c.c.is_finite() && c.c > 0.0) || c.max_iter == 0 || !(c.tol > 0.0) {
            return Err(Error::Config("logistic needs c > 0, max_iter > 0, tol > 0".into()));
        }
        let g = &self.gboost;
        if !(g.learning_rate > 0.0) || g.min_samples_split < 2 || g.min_samples_leaf < 1 {
            return Err(Error::Config(
                "gboost needs learning_rate > 0, min_samples_split >= 2, min_samples_leaf >= 1".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// What a model is asked to fit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "column")]
pub enum ModelSpec {
    Full(Learner),
    /// One raw feature column, fitted with the configured baseline learner.
    Baseline(String),
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Full(l) => l.short_name().to_string(),
            ModelSpec::Baseline(c) => format!("baseline-{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ModelParams {
    Logistic(LogisticFit),
    Gboost(GBoostFit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub kind: ModelKind,
    pub learner: Learner,
    /// Column names of the dataset the model expects.
    pub columns: Vec<String>,
    /// Indices into `columns` the model actually reads.
    pub inputs: Vec<usize>,
    pub standardizer: Standardizer,
    pub params: ModelParams,
    pub threshold: f64,
    pub config_digest: String,
    /// Settings adopted as defaults rather than taken from a reference.
    pub assumed_defaults: Vec<String>,
}

fn check_two_classes(y: &[bool]) -> Result<()> {
    let pos = y.iter().filter(|&&v| v).count();
    if y.is_empty() {
        return Err(Error::EmptyInput("no training rows".into()));
    }
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate(format!(
            "training data has a single class ({} rows, {pos} positive)",
            y.len()
        )));
    }
    Ok(())
}

/// Fits `learner` on the given input columns of `samples`.
pub fn train_on_columns(
    samples: &Samples,
    inputs: &[usize],
    learner: Learner,
    kind: ModelKind,
    cfg: &ClassifierConfig,
) -> Result<MetaModel> {
    cfg.validate()?;
    check_two_classes(&samples.y)?;
    if let Some(&bad) = inputs.iter().find(|&&j| j >= samples.x.n_cols) {
        return Err(Error::InvalidInput(format!("input column {bad} out of range")));
    }
    let selected: Vec<Vec<f64>> = samples
        .x
        .rows()
        .map(|r| inputs.iter().map(|&j| r[j]).collect())
        .collect();
    let refs: Vec<&[f64]> = selected.iter().map(Vec::as_slice).collect();
    let standardizer = Standardizer::fit(&refs)?;
    let z: Vec<Vec<f64>> = standardizer.transform_all(&refs);
    let zm = Matrix::from_rows(z.iter().map(Vec::as_slice), inputs.len());
    let params = match learner {
        Learner::Logistic => ModelParams::Logistic(logistic::fit_saga(&zm, &samples.y, &cfg.logistic)),
        Learner::Gboost => ModelParams::Gboost(gboost::fit_gboost(&zm, &samples.y, &cfg.gboost)),
    };
    let mut assumed_defaults = vec!["class_weight=none".to_string()];
    if learner == Learner::Logistic {
        assumed_defaults.push(format!("logistic.c={}", cfg.logistic.c));
    }
    Ok(MetaModel {
        kind,
        learner,
        columns: samples.columns.clone(),
        inputs: inputs.to_vec(),
        standardizer,
        params,
        threshold: cfg.threshold,
        config_digest: io::digest(&(kind, learner, inputs, cfg)),
        assumed_defaults,
    })
}

pub fn train_logistic(samples: &Samples, cfg: &ClassifierConfig) -> Result<MetaModel> {
    let all: Vec<usize> = (0..samples.x.n_cols).collect();
    train_on_columns(samples, &all, Learner::Logistic, ModelKind::Logistic, cfg)
}

pub fn train_gboost(samples: &Samples, cfg: &ClassifierConfig) -> Result<MetaModel> {
    let all: Vec<usize> = (0..samples.x.n_cols).collect();
    train_on_columns(samples, &all, Learner::Gboost, ModelKind::Gboost, cfg)
}

/// One-dimensional baseline on a single named column (typically `L` or `E`).
pub fn train_baseline(samples: &Samples, column: &str, cfg: &ClassifierConfig) -> Result<MetaModel> {
    let j = samples.column_index(column)?;
    train_on_columns(
        samples,
        &[j],
        cfg.baseline_learner,
        ModelKind::SingleFeatureBaseline,
        cfg,
    )
}

pub fn train(samples: &Samples, spec: &ModelSpec, cfg: &ClassifierConfig) -> Result<MetaModel> {
    match spec {
        ModelSpec::Full(Learner::Logistic) => train_logistic(samples, cfg),
        ModelSpec::Full(Learner::Gboost) => train_gboost(samples, cfg),
        ModelSpec::Baseline(c) => train_baseline(samples, c, cfg),
    }
}

impl MetaModel {
    fn raw_score(&self, z: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Logistic(f) => logistic::dot(&f.weights, z) + f.intercept,
            ModelParams::Gboost(f) => f.raw_score(z),
        }
    }

    /// Probability that the mention is hallucinated.
    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                actual: row.len(),
            });
        }
        let picked: Vec<f64> = self.inputs.iter().map(|&j| row[j]).collect();
        let z = self.standardizer.transform(&picked);
        Ok(sigmoid(self.raw_score(&z)).clamp(PROBA_EPS, 1.0 - PROBA_EPS))
    }

    pub fn predict(&self, row: &[f64]) -> Result<bool> {
        Ok(self.predict_proba(row)? >= self.threshold)
    }

    pub fn predict_all(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.rows().map(|r| self.predict_proba(r)).collect()
    }

    pub fn check_columns(&self, columns: &[String]) -> Result<()> {
        if columns.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                actual: columns.len(),
            });
        }
        if columns != self.columns.as_slice() {
            return Err(Error::InvalidInput("feature columns differ from the model's".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    header: FileHeader,
    model: MetaModel,
}

pub fn model_to_json(header: &FileHeader, model: &MetaModel) -> Result<String> {
    io::to_pretty_json(&ModelFile {
        schema_version: SCHEMA_VERSION,
        header: header.clone(),
        model: model.clone(),
    })
}

pub fn model_from_json(text: &str) -> Result<(FileHeader, MetaModel)> {
    let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema {
        line: e.line(),
        message: e.to_string(),
    })?;
    if f.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema {
            line: 1,
            message: format!("unsupported schema_version {}", f.schema_version),
        });
    }
    let m = &f.model;
    let dim = m.inputs.len();
    let params_dim = match &m.params {
        ModelParams::Logistic(l) => Some(l.weights.len()),
        ModelParams::Gboost(_) => None,
    };
    if m.standardizer.dim() != dim
        || params_dim.is_some_and(|p| p != dim)
        || m.inputs.iter().any(|&j| j >= m.columns.len())
    {
        return Err(Error::Schema {
            line: 1,
            message: "model parameters do not match its column count".into(),
        });
    }
    Ok((f.header, f.model))
}

pub fn save_model(path: &Path, header: &FileHeader, model: &MetaModel) -> Result<()> {
    io::write_atomic(path, model_to_json(header, model)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<(FileHeader, MetaModel)> {
    model_from_json(&io::read_to_string(path)?)
}
