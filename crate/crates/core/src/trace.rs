//! Generation-trace data model.
//!
//! A trace records one generated caption together with per-step summary
//! statistics of the next-token distribution and per-head attention on the
//! image tokens. Full vocabulary distributions are never stored; every
//! downstream feature is computable from [`StepStats`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::{self, FileHeader, SCHEMA_VERSION};

/// Probabilities are clamped to this value before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

const TOL: f64 = 1e-9;

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

/// Summary of one next-token distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepStats {
    /// Natural log of the emitted token's probability.
    pub logp_chosen: f64,
    pub p_max: f64,
    pub p_second: f64,
    pub logp_argmax: f64,
    /// Unnormalized Shannon entropy in nats.
    pub entropy_nats: f64,
    /// Mean of the clamped log-probabilities over the vocabulary.
    pub logp_mean: f64,
    /// Population variance of the clamped log-probabilities.
    pub logp_var: f64,
    pub vocab_size: u32,
}

impl StepStats {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let fields = [
            self.logp_chosen,
            self.p_max,
            self.p_second,
            self.logp_argmax,
            self.entropy_nats,
            self.logp_mean,
            self.logp_var,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.vocab_size < 2 {
            return Err(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0 + TOL) {
            return Err(format!("p_max {} outside (0, 1]", self.p_max));
        }
        if self.p_second < 0.0 || self.p_second > self.p_max + TOL {
            return Err(format!(
                "p_second {} outside [0, p_max={}]",
                self.p_second, self.p_max
            ));
        }
        if self.p_max + self.p_second > 1.0 + TOL {
            return Err("p_max + p_second exceeds 1".into());
        }
        if self.logp_chosen > self.logp_argmax + TOL {
            return Err("logp_chosen exceeds logp_argmax".into());
        }
        if (self.logp_argmax - clamped_ln(self.p_max)).abs() > 1e-6 {
            return Err(format!(
                "logp_argmax {} is not ln(p_max) = {}",
                self.logp_argmax,
                clamped_ln(self.p_max)
            ));
        }
        let max_entropy = f64::from(self.vocab_size).ln();
        if self.entropy_nats < -TOL || self.entropy_nats > max_entropy + TOL {
            return Err(format!(
                "entropy_nats {} outside [0, ln |V| = {max_entropy}]",
                self.entropy_nats
            ));
        }
        if self.logp_var < 0.0 {
            return Err("logp_var is negative".into());
        }
        Ok(())
    }
}

/// Summarizes a dense next-token distribution.
///
/// `chosen` is the vocabulary index of the emitted token.
pub fn summarize_distribution(dense: &[f64], chosen: usize) -> Result<StepStats> {
    if dense.is_empty() {
        return Err(Error::EmptyInput("distribution has no entries".into()));
    }
    if dense.len() < 2 {
        return Err(Error::InvalidInput(
            "distribution needs at least two entries".into(),
        ));
    }
    if chosen >= dense.len() {
        return Err(Error::InvalidInput(format!(
            "chosen index {chosen} out of range for {} entries",
            dense.len()
        )));
    }
    if dense.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = dense.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "distribution sums to {total}, not 1"
        )));
    }

    let (mut p_max, mut p_second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in dense {
        if p > p_max {
            p_second = p_max;
            p_max = p;
        } else if p > p_second {
            p_second = p;
        }
    }

    let n = dense.len() as f64;
    let logs: Vec<f64> = dense.iter().map(|&p| clamped_ln(p)).collect();
    let logp_mean = logs.iter().sum::<f64>() / n;
    let logp_var = logs.iter().map(|l| (l - logp_mean).powi(2)).sum::<f64>() / n;
    let entropy_nats = -dense
        .iter()
        .zip(&logs)
        .map(|(p, l)| p * l)
        .sum::<f64>();

    Ok(StepStats {
        logp_chosen: logs[chosen],
        p_max,
        p_second,
        logp_argmax: clamped_ln(p_max),
        entropy_nats: entropy_nats.max(0.0),
        logp_mean,
        logp_var,
        vocab_size: dense.len() as u32,
    })
}

/// Summarizes a distribution given by an explicit head of probabilities
/// (sorted descending) plus the remaining mass spread uniformly over the
/// other `vocab_size - head.len()` entries.
///
/// Equivalent to [`summarize_distribution`] on the expanded dense vector,
/// but O(|head|) instead of O(|V|).
pub fn summarize_head_tail(head: &[f64], vocab_size: u32, chosen: usize) -> Result<StepStats> {
    let k = head.len();
    let v = vocab_size as usize;
    if k < 2 || k > v {
        return Err(Error::InvalidInput(format!(
            "head of {k} entries invalid for vocabulary of {v}"
        )));
    }
    if chosen >= k {
        return Err(Error::InvalidInput(format!(
            "chosen index {chosen} outside the explicit head"
        )));
    }
    if head.windows(2).any(|w| w[0] < w[1]) || head.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput(
            "head must be finite, non-negative and sorted descending".into(),
        ));
    }
    let head_mass: f64 = head.iter().sum();
    let tail_n = v - k;
    let tail_mass = 1.0 - head_mass;
    if tail_mass < -1e-6 || (tail_n == 0 && tail_mass.abs() > 1e-6) {
        return Err(Error::InvalidInput(format!(
            "head mass {head_mass} inconsistent with vocabulary"
        )));
    }
    let tail_mass = tail_mass.max(0.0);
    let q = if tail_n > 0 { tail_mass / tail_n as f64 } else { 0.0 };
    if q > head[k - 1] + TOL {
        return Err(Error::InvalidInput(
            "tail probability exceeds the smallest head entry".into(),
        ));
    }

    let nv = v as f64;
    let tn = tail_n as f64;
    let head_logs: Vec<f64> = head.iter().map(|&p| clamped_ln(p)).collect();
    let lq = clamped_ln(q);
    let logp_mean = (head_logs.iter().sum::<f64>() + tn * lq) / nv;
    let logp_var = (head_logs
        .iter()
        .map(|l| (l - logp_mean).powi(2))
        .sum::<f64>()
        + tn * (lq - logp_mean).powi(2))
        / nv;
    let entropy_nats =
        -(head.iter().zip(&head_logs).map(|(p, l)| p * l).sum::<f64>() + tail_mass * lq);

    Ok(StepStats {
        logp_chosen: head_logs[chosen],
        p_max: head[0],
        p_second: head[1],
        logp_argmax: head_logs[0],
        entropy_nats: entropy_nats.max(0.0),
        logp_mean,
        logp_var,
        vocab_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub surface: String,
    /// Byte offsets `[start, end)` of this token within the caption.
    pub char_span: (usize, usize),
    pub stats: StepStats,
    /// Per head, mean |attention| of this token on the image tokens.
    pub attn_img_mean_abs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Sampling,
    Beam,
}

fn default_length_penalty() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationTrace {
    pub trace_id: String,
    pub caption: String,
    pub tokens: Vec<TokenRecord>,
    pub num_heads: usize,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
    pub decoding: Decoding,
    /// Ground-truth categories present in the image. Absent at detection time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_objects: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_scores: Option<BTreeMap<String, f64>>,
}

impl GenerationTrace {
    /// Index of the last token (`K`).
    pub fn last_index(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, message: String| Error::TraceInvariant {
            trace_id: self.trace_id.clone(),
            field,
            message,
        };
        if self.trace_id.is_empty() {
            return Err(fail("trace_id", "empty identifier".into()));
        }
        if self.num_heads == 0 {
            return Err(fail("num_heads", "must be positive".into()));
        }
        if self.tokens.is_empty() {
            return Err(fail("tokens", "a trace needs at least one token".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(fail("length_penalty", "must be finite".into()));
        }

        let caption = self.caption.as_str();
        let mut covered_to = 0usize;
        for (i, tok) in self.tokens.iter().enumerate() {
            let (start, end) = tok.char_span;
            if start > end || end > caption.len() {
                return Err(fail(
                    "char_span",
                    format!("token {i} span ({start}, {end}) outside caption"),
                ));
            }
            if start < covered_to {
                return Err(fail(
                    "char_span",
                    format!("token {i} overlaps or precedes token {}", i.saturating_sub(1)),
                ));
            }
            if !caption.is_char_boundary(start) || !caption.is_char_boundary(end) {
                return Err(fail(
                    "char_span",
                    format!("token {i} span is not on a character boundary"),
                ));
            }
            if !caption[covered_to..start].chars().all(char::is_whitespace) {
                return Err(fail(
                    "char_span",
                    format!("caption text before token {i} is not covered by any token"),
                ));
            }
            if caption[start..end] != tok.surface {
                return Err(fail(
                    "surface",
                    format!(
                        "token {i} surface {:?} does not match caption text {:?}",
                        tok.surface,
                        &caption[start..end]
                    ),
                ));
            }
            covered_to = end;

            if tok.attn_img_mean_abs.len() != self.num_heads {
                return Err(fail(
                    "attn_img_mean_abs",
                    format!(
                        "token {i} has {} attention values, expected {}",
                        tok.attn_img_mean_abs.len(),
                        self.num_heads
                    ),
                ));
            }
            if tok
                .attn_img_mean_abs
                .iter()
                .any(|a| !a.is_finite() || *a < 0.0)
            {
                return Err(fail(
                    "attn_img_mean_abs",
                    format!("token {i} has a negative or non-finite attention value"),
                ));
            }
            tok.stats
                .validate()
                .map_err(|m| fail("stats", format!("token {i}: {m}")))?;
        }
        if !caption[covered_to..].chars().all(char::is_whitespace) {
            return Err(fail(
                "char_span",
                "caption tail is not covered by any token".into(),
            ));
        }

        if let Some(scores) = &self.clip_scores {
            if let Some((cat, s)) = scores
                .iter()
                .find(|(_, s)| !s.is_finite() || **s < 0.0 || **s > 100.0)
            {
                return Err(fail(
                    "clip_scores",
                    format!("score {s} for `{cat}` outside [0, 100]"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TraceLineOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    trace: &'a GenerationTrace,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema_version: u32,
    header: FileHeader,
}

/// A loaded trace file: optional header plus traces in file order.
#[derive(Debug, Clone, Default)]
pub struct TraceFile {
    pub header: Option<FileHeader>,
    pub traces: Vec<GenerationTrace>,
}

fn parse_line(line_no: usize, line: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Schema {
        line: line_no,
        message: e.to_string(),
    })?;
    match value.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(value),
        Some(v) => Err(Error::Schema {
            line: line_no,
            message: format!("unsupported schema_version {v}"),
        }),
        None => Err(Error::Schema {
            line: line_no,
            message: "missing field `schema_version`".into(),
        }),
    }
}

fn parse_trace(line_no: usize, mut value: Value) -> Result<GenerationTrace> {
    if let Some(obj) = value.as_object_mut() {
        obj.remove("schema_version");
    }
    let trace: GenerationTrace = serde_json::from_value(value).map_err(|e| Error::Schema {
        line: line_no,
        message: e.to_string(),
    })?;
    trace.validate()?;
    Ok(trace)
}

/// Parses trace-file text. The first record may be a header.
pub fn parse_traces(text: &str) -> Result<TraceFile> {
    let lines: Vec<(usize, &str)> = io::numbered_lines(text).collect();
    let mut header = None;
    let mut body = &lines[..];
    if let Some(&(line_no, first)) = lines.first() {
        let value = parse_line(line_no, first)?;
        if value.get("header").is_some() {
            let h: HeaderLine = serde_json::from_value(value).map_err(|e| Error::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
            header = Some(h.header);
            body = &lines[1..];
        }
    }

    let parsed: Vec<Result<GenerationTrace>> = body
        .par_iter()
        .map(|&(line_no, line)| parse_trace(line_no, parse_line(line_no, line)?))
        .collect();
    let traces = parsed.into_iter().collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    for t in &traces {
        if !seen.insert(t.trace_id.as_str()) {
            return Err(Error::TraceInvariant {
                trace_id: t.trace_id.clone(),
                field: "trace_id",
                message: "duplicate identifier".into(),
            });
        }
    }
    Ok(TraceFile { header, traces })
}

pub fn load_traces(path: &Path) -> Result<Vec<GenerationTrace>> {
    Ok(load_trace_file(path)?.traces)
}

pub fn load_trace_file(path: &Path) -> Result<TraceFile> {
    parse_traces(&io::read_to_string(path)?)
}

pub fn serialize_traces(header: Option<&FileHeader>, traces: &[GenerationTrace]) -> Result<String> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&io::to_jsonl([HeaderLine {
            schema_version: SCHEMA_VERSION,
            header: h.clone(),
        }])?);
    }
    out.push_str(&io::to_jsonl(traces.iter().map(|trace| TraceLineOut {
        schema_version: SCHEMA_VERSION,
        trace,
    }))?);
    Ok(out)
}

pub fn save_traces(path: &Path, header: Option<&FileHeader>, traces: &[GenerationTrace]) -> Result<()> {
    io::write_atomic(path, serialize_traces(header, traces)?.as_bytes())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// One token per whitespace-separated word; stats derived from `dists`.
    pub fn trace_from_words(
        id: &str,
        words: &[&str],
        dists: &[(Vec<f64>, usize)],
        attn: &[Vec<f64>],
    ) -> GenerationTrace {
        let caption = words.join(" ");
        let mut pos = 0;
        let tokens = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let span = (pos, pos + w.len());
                pos += w.len() + 1;
                let (d, c) = &dists[i % dists.len()];
                TokenRecord {
                    surface: w.to_string(),
                    char_span: span,
                    stats: summarize_distribution(d, *c).unwrap(),
                    attn_img_mean_abs: attn[i % attn.len()].clone(),
                }
            })
            .collect();
        GenerationTrace {
            trace_id: id.into(),
            caption,
            tokens,
            num_heads: attn[0].len(),
            length_penalty: 1.0,
            decoding: Decoding::Sampling,
            gt_objects: Some(BTreeSet::new()),
            clip_scores: None,
        }
    }

    pub fn simple(id: &str, words: &[&str], gt: &[&str]) -> GenerationTrace {
        let mut t = trace_from_words(id, words, &[(vec![0.7, 0.2, 0.1], 0)], &[vec![0.1, 0.3]]);
        t.gt_objects = Some(gt.iter().map(|s| s.to_string()).collect());
        t
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_four() {
        let s = summarize_distribution(&[0.25; 4], 0).unwrap();
        assert_eq!(s.p_max, 0.25);
        assert!((s.entropy_nats - 4f64.ln()).abs() < 1e-12);
        assert!(s.logp_var.abs() < 1e-20);
    }

    #[test]
    fn read_off_values() {
        let s = summarize_distribution(&[0.7, 0.2, 0.1], 1).unwrap();
        assert_eq!(s.p_max, 0.7);
        assert_eq!(s.p_second, 0.2);
        assert!((s.logp_chosen - 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dyadic_entropy() {
        // -(0.5 ln 0.5 + 0.25 ln 0.25 + 2 * 0.125 ln 0.125) = 1.75 ln 2
        let s = summarize_distribution(&[0.5, 0.25, 0.125, 0.125], 0).unwrap();
        assert!((s.entropy_nats - 1.213_007_1).abs() < 1e-6);
        assert!((s.entropy_nats - 1.75 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(matches!(
            summarize_distribution(&[], 0),
            Err(Error::EmptyInput(_))
        ));
        assert!(summarize_distribution(&[0.5, 0.4], 0).is_err());
        assert!(summarize_distribution(&[1.0], 0).is_err());
        assert!(summarize_distribution(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn zeros_stay_finite() {
        let s = summarize_distribution(&[1.0, 0.0, 0.0], 0).unwrap();
        assert!(s.logp_mean.is_finite() && s.logp_var > 0.0);
        assert_eq!(s.entropy_nats, 0.0);
        let s = summarize_distribution(&[1.0, 0.0, 0.0], 2).unwrap();
        assert!((s.logp_chosen - PROB_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn head_tail_matches_dense() {
        let head = [0.5, 0.2, 0.1];
        let v = 10u32;
        let q = 0.2 / 7.0;
        let mut dense = head.to_vec();
        dense.extend(std::iter::repeat_n(q, 7));
        let a = summarize_head_tail(&head, v, 1).unwrap();
        let b = summarize_distribution(&dense, 1).unwrap();
        for (x, y) in [
            (a.logp_chosen, b.logp_chosen),
            (a.p_max, b.p_max),
            (a.p_second, b.p_second),
            (a.entropy_nats, b.entropy_nats),
            (a.logp_mean, b.logp_mean),
            (a.logp_var, b.logp_var),
        ] {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_traces("").unwrap().traces.is_empty());
    }

    #[test]
    fn single_record_round_trip() {
        let t = simple("cap-1", &["a", "man", "rides", "a", "bike"], &["person"]);
        let text = serialize_traces(None, &[t.clone()]).unwrap();
        let back = parse_traces(&text).unwrap();
        assert_eq!(back.traces.len(), 1);
        assert_eq!(back.traces[0], t);
    }

    #[test]
    fn header_is_optional_first_line() {
        let t = simple("x", &["a", "car"], &["car"]);
        let h = FileHeader::new("synth", "abc").with_seed(7);
        let text = serialize_traces(Some(&h), &[t]).unwrap();
        let f = parse_traces(&text).unwrap();
        assert_eq!(f.header.unwrap().seed, Some(7));
        assert_eq!(f.traces.len(), 1);
    }

    #[test]
    fn short_attention_names_trace_and_field() {
        let mut t = simple("cap-7", &["a", "car"], &["car"]);
        t.tokens[1].attn_img_mean_abs.pop();
        let text = serialize_traces(None, &[t]).unwrap();
        match parse_traces(&text) {
            Err(Error::TraceInvariant {
                trace_id, field, ..
            }) => {
                assert_eq!(trace_id, "cap-7");
                assert_eq!(field, "attn_img_mean_abs");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected_with_line() {
        let t = simple("a", &["a", "car"], &["car"]);
        let good = serialize_traces(None, &[t]).unwrap();
        let bad = good.trim_end().trim_end_matches('}').to_string() + ",\"extra\":1}\n";
        let text = format!("{good}{bad}");
        match parse_traces(&text) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("extra"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_version_rejected() {
        let t = simple("a", &["a", "car"], &["car"]);
        let v = serde_json::to_string(&t).unwrap();
        assert!(matches!(parse_traces(&v), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = simple("a", &["a", "car"], &["car"]);
        let text = serialize_traces(None, &[t.clone(), t]).unwrap();
        assert!(matches!(
            parse_traces(&text),
            Err(Error::TraceInvariant { field: "trace_id", .. })
        ));
    }

    #[test]
    fn surface_must_match_caption() {
        let mut t = simple("a", &["a", "car"], &["car"]);
        t.tokens[1].surface = "cat".into();
        assert!(t.validate().is_err());
        let mut t = simple("a", &["a", "car"], &["car"]);
        t.tokens[1].char_span = (1, 5);
        assert!(t.validate().is_err());
    }

    fn dist_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(d in dist_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..d.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
            let a = summarize_distribution(&d, perm[0]).unwrap();
            let b = summarize_distribution(&shuffled, 0).unwrap();
            prop_assert_eq!(a.logp_chosen, b.logp_chosen);
            prop_assert_eq!(a.p_max, b.p_max);
            prop_assert_eq!(a.p_second, b.p_second);
            prop_assert!((a.entropy_nats - b.entropy_nats).abs() < 1e-12);
            prop_assert!((a.logp_mean - b.logp_mean).abs() < 1e-9);
            prop_assert!((a.logp_var - b.logp_var).abs() < 1e-9);
        }

        #[test]
        fn normalized_entropy_in_unit_interval(d in dist_strategy(), c in 0usize..2) {
            let s = summarize_distribution(&d, c).unwrap();
            let e = s.entropy_nats / (d.len() as f64).ln();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&e));
            prop_assert!(s.validate().is_ok());
        }
    }
}
