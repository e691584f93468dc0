//! Repeated caption-level train/validation splits and their aggregate report.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::is_attention_column;
use crate::learn::{self, ClassifierConfig, Learner, MetaModel, ModelKind, ModelSpec, RankEntry, Samples, ATTENTION_FEATURE};
use crate::metrics::{self, Confusion, ScoredSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_splits: usize,
    pub train_frac: f64,
    /// Candidate seeds tried per split before giving up on single-class draws.
    pub max_redraws: usize,
    pub ece_bins: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            train_frac: 0.8,
            max_redraws: 100,
            ece_bins: 10,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 || !(self.train_frac > 0.0 && self.train_frac < 1.0) || self.ece_bins == 0 {
            return Err(Error::Config(
                "protocol needs n_splits >= 1, train_frac in (0, 1), ece_bins >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
    pub skipped_seeds: Vec<u64>,
}

fn trace_hash(seed: u64, trace_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(trace_id.as_bytes());
    h.finalize().into()
}

/// Assigns whole traces to train or validation by their seeded hash order.
pub fn split_by_trace(samples: &Samples, seed: u64, train_frac: f64) -> Result<Split> {
    let ids: BTreeSet<&str> = samples.trace_ids.iter().map(String::as_str).collect();
    if ids.len() < 2 {
        return Err(Error::Degenerate("splitting needs at least two traces".into()));
    }
    let mut order: Vec<([u8; 32], &str)> = ids.iter().map(|id| (trace_hash(seed, id), *id)).collect();
    order.sort_unstable();
    let n_train = ((train_frac * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let train_ids: BTreeSet<&str> = order[..n_train].iter().map(|(_, id)| *id).collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in samples.trace_ids.iter().enumerate() {
        if train_ids.contains(id.as_str()) {
            train.push(i);
        } else {
            val.push(i);
        }
    }
    Ok(Split { seed, train, val })
}

fn has_both_classes(y: &[bool], idx: &[usize]) -> bool {
    let pos = idx.iter().filter(|&&i| y[i]).count();
    pos > 0 && pos < idx.len()
}

/// Draws `n_splits` splits from consecutive seeds, skipping single-class draws.
pub fn plan_splits(samples: &Samples, cfg: &ProtocolConfig, base_seed: u64) -> Result<SplitPlan> {
    cfg.validate()?;
    let mut splits = Vec::with_capacity(cfg.n_splits);
    let mut skipped_seeds = Vec::new();
    let mut seed = base_seed;
    while splits.len() < cfg.n_splits {
        if skipped_seeds.len() >= cfg.max_redraws {
            return Err(Error::Degenerate(format!(
                "{} consecutive split draws had a single-class side",
                skipped_seeds.len()
            )));
        }
        let s = split_by_trace(samples, seed, cfg.train_frac)?;
        if has_both_classes(&samples.y, &s.train) && has_both_classes(&samples.y, &s.val) {
            splits.push(s);
        } else {
            warn!("split seed {seed} has a single-class side; redrawing with seed {}", seed + 1);
            skipped_seeds.push(seed);
        }
        seed = seed.checked_add(1).ok_or_else(|| Error::Config("seed overflow".into()))?;
    }
    Ok(SplitPlan { splits, skipped_seeds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub acc: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub ece: f64,
    /// Absent when nothing in the validation side was flagged.
    pub precision: Option<f64>,
    pub recall: f64,
    pub fpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across splits; 0 for a single split.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: Summary,
    pub auroc: Summary,
    pub auprc: Summary,
    pub ece: Summary,
    pub precision: Option<Summary>,
    pub recall: Summary,
    pub fpr: Summary,
}

impl Aggregate {
    pub fn from_splits(splits: &[SplitMetrics]) -> Result<Self> {
        let col = |f: fn(&SplitMetrics) -> f64| -> Result<Summary> {
            Summary::of(&splits.iter().map(f).collect::<Vec<_>>())
                .ok_or_else(|| Error::EmptyInput("no splits to aggregate".into()))
        };
        let precision: Vec<f64> = splits.iter().filter_map(|s| s.precision).collect();
        Ok(Self {
            acc: col(|s| s.acc)?,
            auroc: col(|s| s.auroc)?,
            auprc: col(|s| s.auprc)?,
            ece: col(|s| s.ece)?,
            precision: Summary::of(&precision),
            recall: col(|s| s.recall)?,
            fpr: col(|s| s.fpr)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub spec: ModelSpec,
    pub seeds: Vec<u64>,
    pub skipped_seeds: Vec<u64>,
    pub splits: Vec<SplitMetrics>,
    pub aggregate: Aggregate,
}

fn split_metrics(model: &MetaModel, split: &Split, val: &Samples, ece_bins: usize) -> Result<SplitMetrics> {
    let set = ScoredSet::new(model.predict_all(&val.x)?, val.y.clone())?;
    let c = Confusion::at(&set, model.threshold);
    Ok(SplitMetrics {
        seed: split.seed,
        n_train: split.train.len(),
        n_val: split.val.len(),
        acc: metrics::accuracy(&set, model.threshold),
        auroc: metrics::auroc(&set)?,
        auprc: metrics::auprc(&set)?,
        ece: metrics::ece(&set, ece_bins)?,
        precision: c.precision(),
        recall: c
            .recall()
            .ok_or_else(|| Error::Internal("validation side lost its positives".into()))?,
        fpr: c
            .fpr()
            .ok_or_else(|| Error::Internal("validation side lost its negatives".into()))?,
        threshold: model.threshold,
    })
}

/// Trains and scores `spec` on every split of `plan`; splits run in parallel.
pub fn evaluate_on_plan(
    samples: &Samples,
    spec: &ModelSpec,
    cfg: &ClassifierConfig,
    plan: &SplitPlan,
    ece_bins: usize,
) -> Result<EvalReport> {
    let splits: Vec<SplitMetrics> = plan
        .splits
        .par_iter()
        .map(|split| {
            let model = learn::train(&samples.subset(&split.train), spec, cfg)?;
            split_metrics(&model, split, &samples.subset(&split.val), ece_bins)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        model: spec.label(),
        spec: spec.clone(),
        seeds: plan.splits.iter().map(|s| s.seed).collect(),
        skipped_seeds: plan.skipped_seeds.clone(),
        aggregate: Aggregate::from_splits(&splits)?,
        splits,
    })
}

pub fn run_split_protocol(
    samples: &Samples,
    spec: &ModelSpec,
    cfg: &ClassifierConfig,
    protocol: &ProtocolConfig,
    base_seed: u64,
) -> Result<EvalReport> {
    let plan = plan_splits(samples, protocol, base_seed)?;
    evaluate_on_plan(samples, spec, cfg, &plan, protocol.ece_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub features: Vec<String>,
    pub auprc: Summary,
}

/// Validation AUPRC when only the first `k` ranked features are used.
pub fn auprc_vs_k(
    samples: &Samples,
    ranking: &[RankEntry],
    learner: Learner,
    cfg: &ClassifierConfig,
    plan: &SplitPlan,
) -> Result<Vec<CurvePoint>> {
    let mut by_feature: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, c) in samples.columns.iter().enumerate() {
        let key = if is_attention_column(c) { ATTENTION_FEATURE } else { c.as_str() };
        by_feature.entry(key).or_default().push(j);
    }
    let kind = match learner {
        Learner::Logistic => ModelKind::Logistic,
        Learner::Gboost => ModelKind::Gboost,
    };
    let selected: Vec<&RankEntry> = ranking.iter().filter(|r| r.selected).collect();
    let mut out = Vec::with_capacity(selected.len());
    for k in 1..=selected.len() {
        let features: Vec<String> = selected[..k].iter().map(|r| r.feature.clone()).collect();
        let mut inputs: Vec<usize> = features
            .iter()
            .flat_map(|f| by_feature.get(f.as_str()).cloned().unwrap_or_default())
            .collect();
        inputs.sort_unstable();
        let values: Vec<f64> = plan
            .splits
            .par_iter()
            .map(|split| {
                let model = learn::train_on_columns(&samples.subset(&split.train), &inputs, learner, kind, cfg)?;
                let val = samples.subset(&split.val);
                metrics::auprc(&ScoredSet::new(model.predict_all(&val.x)?, val.y)?)
            })
            .collect::<Result<_>>()?;
        out.push(CurvePoint {
            k,
            features,
            auprc: Summary::of(&values).ok_or_else(|| Error::EmptyInput("no splits".into()))?,
        });
    }
    Ok(out)
}

fn cell(s: &Summary) -> String {
    format!("{:.2} (±{:.2})", 100.0 * s.mean, 100.0 * s.std)
}

/// Plain-text table of `mean (±std)` percentages, one row per model.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["model", "ACC", "AUROC", "AUPRC", "ECE"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                cell(&r.aggregate.acc),
                cell(&r.aggregate.auroc),
                cell(&r.aggregate.auprc),
                cell(&r.aggregate.ece),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..5)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    let n = reports.first().map_or(0, |r| r.splits.len());
    let _ = writeln!(out, "percent; mean (±sample std) over {n} validation splits");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy(seed: u64, traces: usize) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for t in 0..traces {
            for _ in 0..rng.random_range(1..4) {
                let h = rng.random_bool(0.3);
                let shift = if h { 1.5 } else { 0.0 };
                rows.push(vec![
                    rng.sample::<f64, _>(StandardNormal) + shift,
                    rng.sample(StandardNormal),
                ]);
                y.push(h);
                ids.push(format!("t{t:03}"));
            }
        }
        Samples::new(vec!["L".into(), "E".into()], &rows, y, ids).unwrap()
    }

    #[test]
    fn splits_keep_traces_together() {
        let s = toy(1, 50);
        let split = split_by_trace(&s, 3, 0.8).unwrap();
        let train: BTreeSet<&String> = split.train.iter().map(|&i| &s.trace_ids[i]).collect();
        let val: BTreeSet<&String> = split.val.iter().map(|&i| &s.trace_ids[i]).collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.len(), 40);
        assert_eq!(split.train.len() + split.val.len(), s.len());
    }

    #[test]
    fn report_ignores_row_order() {
        let s = toy(2, 60);
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.reverse();
        let shuffled = s.subset(&perm);
        let cfg = ClassifierConfig::default();
        let p = ProtocolConfig {
            n_splits: 3,
            ..ProtocolConfig::default()
        };
        let spec = ModelSpec::Baseline("L".into());
        let a = run_split_protocol(&s, &spec, &cfg, &p, 7).unwrap();
        let b = run_split_protocol(&shuffled, &spec, &cfg, &p, 7).unwrap();
        assert_eq!(a.seeds, b.seeds);
        for (x, y) in a.splits.iter().zip(&b.splits) {
            assert!((x.auroc - y.auroc).abs() < 1e-12);
            assert!((x.auprc - y.auprc).abs() < 1e-12);
        }
    }

    #[test]
    fn single_split_has_zero_std() {
        let s = toy(3, 40);
        let p = ProtocolConfig {
            n_splits: 1,
            ..ProtocolConfig::default()
        };
        let r = run_split_protocol(&s, &ModelSpec::Full(Learner::Logistic), &ClassifierConfig::default(), &p, 0)
            .unwrap();
        assert_eq!(r.aggregate.auroc.std, 0.0);
        assert_eq!(r.aggregate.auroc.mean, r.splits[0].auroc);
    }

    #[test]
    fn aggregate_recomputes_from_splits() {
        let s = toy(4, 80);
        let r = run_split_protocol(
            &s,
            &ModelSpec::Full(Learner::Logistic),
            &ClassifierConfig::default(),
            &ProtocolConfig::default(),
            11,
        )
        .unwrap();
        assert_eq!(r.splits.len(), 10);
        assert_eq!(Aggregate::from_splits(&r.splits).unwrap(), r.aggregate);
        let v: Vec<f64> = r.splits.iter().map(|s| s.acc).collect();
        let m = v.iter().sum::<f64>() / 10.0;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((r.aggregate.acc.std - sd).abs() < 1e-15);
        assert!(render_table(&[r]).contains("LR"));
    }

    #[test]
    fn single_class_splits_are_redrawn() {
        // Only one trace carries positives, so many draws put it in train.
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for t in 0..10 {
            for k in 0..2 {
                rows.push(vec![t as f64 + k as f64, 0.0]);
                y.push(t == 0 && k == 0);
                ids.push(format!("t{t}"));
            }
        }
        let s = Samples::new(vec!["L".into(), "E".into()], &rows, y, ids).unwrap();
        let plan = plan_splits(&s, &ProtocolConfig { n_splits: 1, max_redraws: 1000, ..ProtocolConfig::default() }, 0);
        // Train needs a positive too, which the single positive trace cannot give both sides.
        assert!(matches!(plan, Err(Error::Degenerate(_))));
        let mut y2 = s.y.clone();
        y2[2] = true;
        let s2 = Samples { y: y2, ..s };
        let plan = plan_splits(&s2, &ProtocolConfig { n_splits: 3, ..ProtocolConfig::default() }, 0).unwrap();
        assert_eq!(plan.splits.len(), 3);
        assert!(!plan.skipped_seeds.is_empty());
        for sp in &plan.splits {
            assert!(!plan.skipped_seeds.contains(&sp.seed));
        }
    }
}
