//! Per-mention input features and the feature-dataset file.
//!
//! Column order is fixed: `P, N, A0..A{G-1}, L, C, S, V, E, R, M, D` and an
//! optional trailing `CLIP`. Trained models and LASSO ranks refer to columns
//! by this order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chair::ObjectMention;
use crate::error::{Error, Result};
use crate::io::{self, FileHeader, SCHEMA_VERSION};
use crate::trace::{GenerationTrace, StepStats};

/// Names of the scalar features that follow the attention block.
pub const TAIL_COLUMNS: [&str; 8] = ["L", "C", "S", "V", "E", "R", "M", "D"];
pub const CLIP_COLUMN: &str = "CLIP";

pub fn column_names(num_heads: usize, extended: bool) -> Vec<String> {
    let mut cols = vec!["P".to_string(), "N".to_string()];
    cols.extend((0..num_heads).map(|g| format!("A{g}")));
    cols.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
    if extended {
        cols.push(CLIP_COLUMN.to_string());
    }
    cols
}

pub fn num_columns(num_heads: usize, extended: bool) -> usize {
    10 + num_heads + usize::from(extended)
}

/// True for the per-head attention columns `A0`, `A1`, ...
pub fn is_attention_column(name: &str) -> bool {
    name.len() > 1 && name.starts_with('A') && name[1..].bytes().all(|b| b.is_ascii_digit())
}

fn start_stats<'a>(m: &ObjectMention, t: &'a GenerationTrace) -> &'a StepStats {
    &t.tokens[m.start_token].stats
}

/// `o_js / (K + 1)`.
pub fn relative_position(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    m.start_token as f64 / t.tokens.len() as f64
}

/// Number of mentions in the caption sharing this mention's category.
pub fn absolute_occurrence(m: &ObjectMention, all: &[ObjectMention]) -> usize {
    all.iter().filter(|o| o.category == m.category).count()
}

pub fn attention_means(m: &ObjectMention, t: &GenerationTrace) -> Vec<f64> {
    t.tokens[m.start_token].attn_img_mean_abs.clone()
}

/// Sum of chosen-token log-probabilities over the mention's tokens.
pub fn log_probability(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    t.tokens[m.start_token..=m.end_token]
        .iter()
        .map(|tok| tok.stats.logp_chosen)
        .sum()
}

/// Sum of chosen-token log-probabilities from the first token through the mention's end.
pub fn cumulated_log_probability(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    t.tokens[..=m.end_token]
        .iter()
        .map(|tok| tok.stats.logp_chosen)
        .sum()
}

/// Length-penalized sequence score. A mention ending at token 0 uses denominator 1.
pub fn sequence_score(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    let c = cumulated_log_probability(m, t);
    if m.end_token == 0 {
        c
    } else {
        c / (m.end_token as f64).powf(t.length_penalty)
    }
}

pub fn vocab_variance(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    start_stats(m, t).logp_var
}

pub fn normalized_entropy(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    let s = start_stats(m, t);
    s.entropy_nats / f64::from(s.vocab_size).ln()
}

pub fn variation_ratio(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    1.0 - start_stats(m, t).p_max
}

pub fn probability_margin(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    variation_ratio(m, t) + start_stats(m, t).p_second
}

pub fn probability_difference(m: &ObjectMention, t: &GenerationTrace) -> f64 {
    let s = start_stats(m, t);
    s.logp_argmax - s.logp_chosen
}

/// Precomputed image/caption similarity score for the mention's category.
pub fn clip_feature(m: &ObjectMention, t: &GenerationTrace) -> Result<f64> {
    let scores = t.clip_scores.as_ref().ok_or_else(|| {
        Error::MissingFeature(format!(
            "trace `{}` carries no clip_scores; the extended set needs them",
            t.trace_id
        ))
    })?;
    let s = *scores.get(&m.category).ok_or_else(|| {
        Error::MissingFeature(format!(
            "trace `{}` has no clip score for `{}`",
            t.trace_id, m.category
        ))
    })?;
    if !(0.0..=100.0).contains(&s) {
        return Err(Error::InvalidInput(format!("clip score {s} outside [0, 100]")));
    }
    Ok(s)
}

/// All feature values for one mention in canonical column order.
pub fn feature_values(
    m: &ObjectMention,
    t: &GenerationTrace,
    all: &[ObjectMention],
    extended: bool,
) -> Result<Vec<f64>> {
    if m.start_token > m.end_token || m.end_token >= t.tokens.len() {
        return Err(Error::MalformedSpan {
            trace_id: t.trace_id.clone(),
            message: format!(
                "mention tokens {}..={} outside 0..{}",
                m.start_token,
                m.end_token,
                t.tokens.len()
            ),
        });
    }
    let mut v = Vec::with_capacity(num_columns(t.num_heads, extended));
    v.push(relative_position(m, t));
    v.push(absolute_occurrence(m, all) as f64);
    v.extend(attention_means(m, t));
    v.push(log_probability(m, t));
    v.push(cumulated_log_probability(m, t));
    v.push(sequence_score(m, t));
    v.push(vocab_variance(m, t));
    v.push(normalized_entropy(m, t));
    v.push(variation_ratio(m, t));
    v.push(probability_margin(m, t));
    v.push(probability_difference(m, t));
    if extended {
        v.push(clip_feature(m, t)?);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MentionRef {
    pub trace_id: String,
    pub mention_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureVector {
    pub trace_id: String,
    pub mention_index: usize,
    pub label: u8,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn mention_ref(&self) -> MentionRef {
        MentionRef {
            trace_id: self.trace_id.clone(),
            mention_index: self.mention_index,
        }
    }

    pub fn is_hallucinated(&self) -> bool {
        self.label == 1
    }
}

/// Builds the labeled feature vector for mention `index` of `all`.
pub fn build_feature_vector(
    index: usize,
    t: &GenerationTrace,
    all: &[ObjectMention],
    extended: bool,
) -> Result<FeatureVector> {
    let m = all.get(index).ok_or_else(|| {
        Error::InvalidInput(format!("mention index {index} out of range"))
    })?;
    let label = match m.label {
        Some(l @ (0 | 1)) => l,
        _ => {
            return Err(Error::InvalidInput(format!(
                "mention {index} of `{}` is not labeled",
                t.trace_id
            )))
        }
    };
    Ok(FeatureVector {
        trace_id: t.trace_id.clone(),
        mention_index: index,
        label,
        values: feature_values(m, t, all, extended)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeaderLine {
    schema_version: u32,
    header: FileHeader,
    num_heads: usize,
    extended: bool,
    columns: Vec<String>,
}

/// A labeled feature table: one row per object mention.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub header: FileHeader,
    pub num_heads: usize,
    pub extended: bool,
    pub columns: Vec<String>,
    pub rows: Vec<FeatureVector>,
}

impl FeatureDataset {
    pub fn new(header: FileHeader, num_heads: usize, extended: bool, rows: Vec<FeatureVector>) -> Result<Self> {
        let ds = Self {
            header,
            num_heads,
            extended,
            columns: column_names(num_heads, extended),
            rows,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns != column_names(self.num_heads, self.extended) {
            return Err(Error::InvalidInput(
                "dataset columns do not follow the canonical order".into(),
            ));
        }
        for r in &self.rows {
            if r.values.len() != self.columns.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.columns.len(),
                    actual: r.values.len(),
                });
            }
            if r.label > 1 {
                return Err(Error::InvalidInput(format!("label {} is not 0/1", r.label)));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite feature in `{}` mention {}",
                    r.trace_id, r.mention_index
                )));
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.values.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(FeatureVector::is_hallucinated).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = io::to_jsonl([DatasetHeaderLine {
            schema_version: SCHEMA_VERSION,
            header: self.header.clone(),
            num_heads: self.num_heads,
            extended: self.extended,
            columns: self.columns.clone(),
        }])?;
        out.push_str(&io::to_jsonl(&self.rows)?);
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = io::numbered_lines(text);
        let (line_no, first) = lines
            .next()
            .ok_or_else(|| Error::EmptyInput("dataset file has no header".into()))?;
        let head: DatasetHeaderLine = serde_json::from_str(first).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if head.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                line: line_no,
                message: format!("unsupported schema_version {}", head.schema_version),
            });
        }
        let rows = lines
            .map(|(n, l)| {
                serde_json::from_str::<FeatureVector>(l).map_err(|e| Error::Schema {
                    line: n,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            header: head.header,
            num_heads: head.num_heads,
            extended: head.extended,
            columns: head.columns,
            rows,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chair::{extract_mentions, label_mentions, SynonymMap};
    use crate::trace::fixtures::{simple, trace_from_words};
    use crate::trace::summarize_distribution;
    use proptest::prelude::*;

    const EPS: f64 = 1e-9;

    fn mention(start: usize, end: usize, cat: &str) -> ObjectMention {
        ObjectMention {
            category: cat.into(),
            matched_phrase: cat.into(),
            char_span: (0, 0),
            start_token: start,
            end_token: end,
            label: Some(0),
        }
    }

    /// Ten tokens whose chosen-token log-probabilities are given.
    fn trace_with_logps(logps: &[f64]) -> GenerationTrace {
        let words: Vec<String> = (0..logps.len()).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let mut t = simple("t", &refs, &[]);
        for (tok, &lp) in t.tokens.iter_mut().zip(logps) {
            tok.stats.logp_chosen = lp;
        }
        t
    }

    #[test]
    fn relative_position_examples() {
        let t = trace_with_logps(&[-0.1; 10]);
        assert_eq!(relative_position(&mention(0, 0, "x"), &t), 0.0);
        assert_eq!(relative_position(&mention(5, 5, "x"), &t), 0.5);
        assert!((relative_position(&mention(9, 9, "x"), &t) - 0.9).abs() < EPS);
    }

    #[test]
    fn occurrence_counts() {
        let all = vec![mention(0, 0, "dog"), mention(1, 1, "cat"), mention(2, 2, "dog")];
        assert_eq!(absolute_occurrence(&all[0], &all), 2);
        assert_eq!(absolute_occurrence(&all[1], &all), 1);
        let cars = vec![mention(0, 0, "car"), mention(1, 1, "car"), mention(2, 2, "car")];
        assert_eq!(absolute_occurrence(&cars[1], &cars), 3);
    }

    #[test]
    fn attention_pass_through() {
        let d = vec![(vec![0.6, 0.4], 0)];
        let t = trace_from_words("t", &["a", "car"], &d, &[vec![0.1, 0.3]]);
        assert_eq!(attention_means(&mention(1, 1, "car"), &t), vec![0.1, 0.3]);
        let t = trace_from_words("t", &["a", "car"], &d, &[vec![0.0, 0.0]]);
        assert_eq!(attention_means(&mention(1, 1, "car"), &t), vec![0.0, 0.0]);

        // Fixture producer: mean |attention| over two image tokens.
        let raw: [f64; 2] = [0.2, -0.4];
        let stored = raw.iter().map(|a| a.abs()).sum::<f64>() / raw.len() as f64;
        let t = trace_from_words("t", &["a", "car"], &d, &[vec![stored]]);
        assert!((attention_means(&mention(1, 1, "car"), &t)[0] - 0.3).abs() < EPS);
    }

    #[test]
    fn log_probability_sums() {
        let t = trace_with_logps(&[-0.5, -1.0, 0.5f64.ln(), 0.5f64.ln(), 0.5f64.ln()]);
        assert_eq!(log_probability(&mention(0, 0, "x"), &t), -0.5);
        assert_eq!(log_probability(&mention(0, 1, "x"), &t), -1.5);
        assert!((log_probability(&mention(2, 4, "x"), &t) - (-2.0794415416798357)).abs() < EPS);
    }

    #[test]
    fn cumulated_and_score() {
        let t = trace_with_logps(&[-1.0, -2.0, -3.0, -2.0]);
        assert_eq!(cumulated_log_probability(&mention(0, 0, "x"), &t), -1.0);
        let m = mention(0, 2, "x");
        assert_eq!(cumulated_log_probability(&m, &t), log_probability(&m, &t));
        assert_eq!(cumulated_log_probability(&mention(2, 2, "x"), &t), -6.0);

        assert_eq!(sequence_score(&mention(2, 2, "x"), &t), -3.0);
        assert_eq!(sequence_score(&mention(0, 0, "x"), &t), -1.0);
        let mut t2 = trace_with_logps(&[-3.0, -3.0, -2.0]);
        t2.length_penalty = 2.0;
        assert!((sequence_score(&mention(2, 2, "x"), &t2) - (-2.0)).abs() < EPS);
    }

    fn stats_trace(dist: &[f64], chosen: usize) -> GenerationTrace {
        trace_from_words("t", &["x"], &[(dist.to_vec(), chosen)], &[vec![0.0]])
    }

    #[test]
    fn distribution_features() {
        let m = mention(0, 0, "x");
        let uni = stats_trace(&[0.25; 4], 0);
        assert!(vocab_variance(&m, &uni).abs() < EPS);
        assert!((normalized_entropy(&m, &uni) - 1.0).abs() < EPS);
        assert!((variation_ratio(&m, &uni) - 0.75).abs() < EPS);

        // ((ln .9 - mu)^2 + (ln .1 - mu)^2) / 2 = (ln 9 / 2)^2
        let two = stats_trace(&[0.9, 0.1], 0);
        assert!((vocab_variance(&m, &two) - 1.206949_f64).abs() < 1e-6);
        assert!((vocab_variance(&m, &two) - (9f64.ln() / 2.0).powi(2)).abs() < EPS);

        let hot = stats_trace(&[1.0, 0.0, 0.0], 0);
        assert!(vocab_variance(&m, &hot) > 0.0);
        assert!(normalized_entropy(&m, &hot).abs() < 1e-9);
        assert_eq!(variation_ratio(&m, &hot), 0.0);
        assert_eq!(probability_margin(&m, &hot), 0.0);

        let dyadic = stats_trace(&[0.5, 0.25, 0.125, 0.125], 0);
        assert!((normalized_entropy(&m, &dyadic) - 0.875).abs() < EPS);

        let d = stats_trace(&[0.7, 0.2, 0.1], 1);
        assert!((variation_ratio(&m, &d) - 0.3).abs() < EPS);
        assert!((probability_margin(&m, &d) - 0.5).abs() < EPS);
        assert!((probability_difference(&m, &d) - 1.252762968495368).abs() < EPS);
        let d0 = stats_trace(&[0.7, 0.2, 0.1], 0);
        assert_eq!(probability_difference(&m, &d0), 0.0);

        let half = stats_trace(&[0.5, 0.5], 0);
        assert!((probability_margin(&m, &half) - 1.0).abs() < EPS);
    }

    #[test]
    fn clip_column() {
        let mut t = simple("t", &["a", "person"], &["person"]);
        let m = mention(1, 1, "person");
        assert!(matches!(clip_feature(&m, &t), Err(Error::MissingFeature(_))));
        t.clip_scores = Some([("person".to_string(), 31.7), ("car".to_string(), 0.0)].into());
        assert_eq!(clip_feature(&m, &t).unwrap(), 31.7);
        assert_eq!(clip_feature(&mention(1, 1, "car"), &t).unwrap(), 0.0);
        assert!(clip_feature(&mention(1, 1, "bus"), &t).is_err());
    }

    #[test]
    fn vector_shape() {
        assert_eq!(num_columns(32, false), 42);
        assert_eq!(column_names(32, false).len(), 42);
        assert_eq!(num_columns(2, true), 13);
        let names = column_names(2, true);
        assert_eq!(names, ["P", "N", "A0", "A1", "L", "C", "S", "V", "E", "R", "M", "D", "CLIP"]);
        assert!(is_attention_column("A12") && !is_attention_column("A") && !is_attention_column("C"));
    }

    #[test]
    fn build_vector_with_repeats() {
        let syn = SynonymMap::bdd100k();
        let mut t = simple("t", &["a", "car", "and", "a", "car"], &["car"]);
        t.clip_scores = Some([("car".to_string(), 12.0)].into());
        let ms = label_mentions(&extract_mentions(&t, &syn).unwrap(), &t).unwrap();
        let a = build_feature_vector(0, &t, &ms, true).unwrap();
        let b = build_feature_vector(1, &t, &ms, true).unwrap();
        assert_eq!(a.values.len(), 13);
        assert_eq!(a.values[1], 2.0);
        assert_eq!(b.values[1], 2.0);
        assert_eq!(a.values[12], 12.0);
        let again = build_feature_vector(0, &t, &ms, true).unwrap();
        assert_eq!(a, again);

        // Two mentions at the same span differ only through N.
        let dup = vec![ms[0].clone(), ms[0].clone()];
        let single = vec![ms[0].clone()];
        let x = build_feature_vector(0, &t, &dup, false).unwrap();
        let y = build_feature_vector(0, &t, &single, false).unwrap();
        assert_eq!(x.values[1], 2.0);
        assert_eq!(y.values[1], 1.0);
        assert_eq!(x.values[0], y.values[0]);
        assert_eq!(x.values[2..], y.values[2..]);
    }

    #[test]
    fn dataset_round_trip_and_validation() {
        let syn = SynonymMap::bdd100k();
        let t = simple("t", &["a", "car"], &["car"]);
        let ms = label_mentions(&extract_mentions(&t, &syn).unwrap(), &t).unwrap();
        let row = build_feature_vector(0, &t, &ms, false).unwrap();
        let ds = FeatureDataset::new(FileHeader::new("featurize", "x"), 2, false, vec![row.clone()]).unwrap();
        assert_eq!(FeatureDataset::parse(&ds.to_jsonl().unwrap()).unwrap(), ds);
        let mut short = row;
        short.values.pop();
        assert!(matches!(
            FeatureDataset::new(FileHeader::new("f", "x"), 2, false, vec![short]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn invariants_hold(
            dists in prop::collection::vec(
                prop::collection::vec(0.0f64..1.0, 3..8).prop_filter_map("mass", |v| {
                    let s: f64 = v.iter().sum();
                    (s > 1e-3).then(|| v.iter().map(|x| x / s).collect::<Vec<f64>>())
                }), 4..10),
            chosen in 0usize..3,
            start in 0usize..4,
            len in 0usize..3,
        ) {
            let words: Vec<String> = (0..dists.len()).map(|i| format!("w{i}")).collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let pairs: Vec<(Vec<f64>, usize)> = dists.iter().map(|d| (d.clone(), chosen)).collect();
            let t = trace_from_words("t", &refs, &pairs, &[vec![0.2, 0.0]]);
            let end = (start + len).min(t.tokens.len() - 1);
            let m = mention(start, end, "x");
            let v = feature_values(&m, &t, &[m.clone()], false).unwrap();
            let (p, n, l, c, s) = (v[0], v[1], v[4], v[5], v[6]);
            let (var, e, r, marg, d) = (v[7], v[8], v[9], v[10], v[11]);
            prop_assert!((0.0..1.0).contains(&p));
            prop_assert!(n >= 1.0);
            prop_assert!(l <= 0.0 && c <= l + 1e-12);
            prop_assert!(s <= 0.0);
            prop_assert!(var >= 0.0 && d >= 0.0);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&e));
            prop_assert!((0.0..1.0).contains(&r));
            prop_assert!((0.0..2.0).contains(&marg));
            let s0 = &t.tokens[start].stats;
            prop_assert_eq!(d == 0.0, s0.logp_chosen == s0.logp_argmax);
        }

        #[test]
        fn start_token_features_ignore_other_tokens(lp in -5.0f64..0.0, idx in 1usize..4) {
            let d = vec![(vec![0.6, 0.3, 0.1], 1)];
            let t = trace_from_words("t", &["a", "b", "c", "d"], &d, &[vec![0.1]]);
            let mut t2 = t.clone();
            t2.tokens[idx].stats = summarize_distribution(&[0.4, 0.35, 0.25], 2).unwrap();
            t2.tokens[idx].stats.logp_chosen = t2.tokens[idx].stats.logp_chosen.min(lp);
            let m = mention(0, 0, "x");
            prop_assert_eq!(normalized_entropy(&m, &t), normalized_entropy(&m, &t2));
            prop_assert_eq!(variation_ratio(&m, &t), variation_ratio(&m, &t2));
            prop_assert_eq!(probability_margin(&m, &t), probability_margin(&m, &t2));
            prop_assert_eq!(probability_difference(&m, &t), probability_difference(&m, &t2));
            prop_assert_eq!(vocab_variance(&m, &t), vocab_variance(&m, &t2));
        }

        #[test]
        fn margin_monotone_in_top_probability(p_max in 0.3f64..0.6, bump in 0.01f64..0.15) {
            let dist = |top: f64| {
                let mut d = vec![top, 0.2];
                d.extend(std::iter::repeat_n((0.8 - top) / 10.0, 10));
                d
            };
            let a = stats_trace(&dist(p_max), 0);
            let b = stats_trace(&dist(p_max + bump), 0);
            let m = mention(0, 0, "x");
            prop_assert_eq!(a.tokens[0].stats.p_second, b.tokens[0].stats.p_second);
            prop_assert!(variation_ratio(&m, &b) < variation_ratio(&m, &a));
            prop_assert!(probability_margin(&m, &b) < probability_margin(&m, &a));
        }
    }
}
