//! Object-mention extraction, hallucination labels and the CHAIR metrics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, FileHeader, SCHEMA_VERSION};
use crate::trace::GenerationTrace;

const BDD100K_JSON: &str = include_str!("../resources/bdd100k_synonyms.json");

/// Category → surface phrases. Phrases are lowercase with single spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymMap {
    entries: BTreeMap<String, Vec<String>>,
    /// (phrase, category), longest phrase first.
    by_length: Vec<(String, String)>,
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_ascii_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl SynonymMap {
    pub fn new(raw: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut owner: HashMap<String, String> = HashMap::new();
        for (cat, phrases) in raw {
            let cat = normalize_phrase(&cat);
            if cat.is_empty() {
                return Err(Error::SynonymMap("empty category name".into()));
            }
            if phrases.is_empty() {
                return Err(Error::SynonymMap(format!("category `{cat}` has no phrases")));
            }
            let mut list: Vec<String> = Vec::new();
            for p in std::iter::once(cat.clone()).chain(phrases.iter().map(|p| normalize_phrase(p))) {
                if p.is_empty() {
                    return Err(Error::SynonymMap(format!("empty phrase under `{cat}`")));
                }
                if !p.starts_with(|c: char| c.is_ascii_alphanumeric()) {
                    return Err(Error::SynonymMap(format!(
                        "phrase `{p}` must start with a letter or digit"
                    )));
                }
                match owner.get(&p) {
                    Some(other) if *other != cat => {
                        return Err(Error::SynonymMap(format!(
                            "phrase `{p}` maps to both `{other}` and `{cat}`"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        owner.insert(p.clone(), cat.clone());
                        list.push(p);
                    }
                }
            }
            if entries.insert(cat.clone(), list).is_some() {
                return Err(Error::SynonymMap(format!("category `{cat}` listed twice")));
            }
        }
        let mut by_length: Vec<(String, String)> = owner.into_iter().collect();
        by_length.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { entries, by_length })
    }

    /// One phrase per category: the category name itself.
    pub fn from_categories<S: AsRef<str>>(categories: &[S]) -> Result<Self> {
        Self::new(
            categories
                .iter()
                .map(|c| (c.as_ref().to_string(), vec![c.as_ref().to_string()]))
                .collect(),
        )
    }

    /// The bundled BDD100K street-scene synonym table.
    pub fn bdd100k() -> Self {
        Self::from_json(BDD100K_JSON).expect("bundled synonym table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::SynonymMap(format!("parse error: {e}")))?;
        Self::new(raw)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_pretty_json(&self.entries)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn category_of(&self, phrase: &str) -> Option<&str> {
        let p = normalize_phrase(phrase);
        self.by_length
            .iter()
            .find(|(ph, _)| *ph == p)
            .map(|(_, c)| c.as_str())
    }
}

/// Reserved path naming the bundled driving-scene synonym table.
pub const BUNDLED_SYNONYMS: &str = "bdd100k";

/// Loads a synonym map from a JSON file, or the bundled table for the
/// reserved name [`BUNDLED_SYNONYMS`].
pub fn load_synonym_map(path: &Path) -> Result<SynonymMap> {
    if path.as_os_str() == BUNDLED_SYNONYMS {
        return Ok(SynonymMap::bdd100k());
    }
    SynonymMap::from_json(&io::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMention {
    pub category: String,
    pub matched_phrase: String,
    /// Byte span of the matched text in the caption, plural suffix included.
    pub char_span: (usize, usize),
    pub start_token: usize,
    pub end_token: usize,
    /// 1 = hallucinated, 0 = present in the image. `None` until labeled.
    pub label: Option<u8>,
}

fn is_word_char(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

fn boundary_at(text: &[u8], pos: usize) -> bool {
    pos >= text.len() || !is_word_char(text[pos])
}

/// Length of `phrase` plus an optional plural suffix if it matches at `pos`.
fn match_len(text: &[u8], pos: usize, phrase: &str) -> Option<usize> {
    let p = phrase.as_bytes();
    if !text[pos..].starts_with(p) {
        return None;
    }
    let end = pos + p.len();
    if boundary_at(text, end) {
        return Some(p.len());
    }
    for suffix in [&b"es"[..], b"s"] {
        if text[end..].starts_with(suffix) && boundary_at(text, end + suffix.len()) {
            return Some(p.len() + suffix.len());
        }
    }
    None
}

/// Scans the caption left to right, taking the longest phrase at each word
/// start. Matches never overlap.
pub fn extract_mentions(trace: &GenerationTrace, syn: &SynonymMap) -> Result<Vec<ObjectMention>> {
    let lower = trace.caption.to_ascii_lowercase();
    let text = lower.as_bytes();
    let mut mentions = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let word_start = is_word_char(text[pos]) && (pos == 0 || !is_word_char(text[pos - 1]));
        if !word_start {
            pos += 1;
            continue;
        }
        let hit = syn
            .by_length
            .iter()
            .find_map(|(phrase, cat)| match_len(text, pos, phrase).map(|len| (phrase, cat, len)));
        match hit {
            Some((phrase, cat, len)) => {
                let span = (pos, pos + len);
                let (start_token, end_token) = token_range(trace, span)?;
                mentions.push(ObjectMention {
                    category: cat.clone(),
                    matched_phrase: phrase.clone(),
                    char_span: span,
                    start_token,
                    end_token,
                    label: None,
                });
                pos += len;
            }
            None => pos += 1,
        }
    }
    Ok(mentions)
}

fn token_range(trace: &GenerationTrace, (lo, hi): (usize, usize)) -> Result<(usize, usize)> {
    let mut overlapping = trace
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.char_span.0 < hi && t.char_span.1 > lo)
        .map(|(i, _)| i);
    let first = overlapping.next().ok_or_else(|| Error::MalformedSpan {
        trace_id: trace.trace_id.clone(),
        message: format!("caption bytes {lo}..{hi} are not covered by any token"),
    })?;
    let last = overlapping.last().unwrap_or(first);
    Ok((first, last))
}

/// Labels each mention 0 if its category is in the trace's ground truth, else 1.
pub fn label_mentions(mentions: &[ObjectMention], trace: &GenerationTrace) -> Result<Vec<ObjectMention>> {
    let gt = trace.gt_objects.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "trace `{}` has no gt_objects; labels need ground truth",
            trace.trace_id
        ))
    })?;
    Ok(mentions
        .iter()
        .map(|m| ObjectMention {
            label: Some(u8::from(!gt.contains(&m.category))),
            ..m.clone()
        })
        .collect())
}

fn label_of(m: &ObjectMention) -> Result<bool> {
    match m.label {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        Some(other) => Err(Error::InvalidInput(format!("label {other} is not 0/1"))),
        None => Err(Error::InvalidInput("mention is unlabeled".into())),
    }
}

/// Fraction of all mentions that are hallucinated.
pub fn chair_i<'a>(mentions: impl IntoIterator<Item = &'a ObjectMention>) -> Result<f64> {
    let (mut total, mut hallucinated) = (0usize, 0usize);
    for m in mentions {
        total += 1;
        hallucinated += usize::from(label_of(m)?);
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("CHAIR_i of an empty corpus".into()));
    }
    Ok(hallucinated as f64 / total as f64)
}

/// Fraction of captions with at least one hallucinated mention. Captions
/// without mentions count in the denominator.
pub fn chair_s<M: AsRef<[ObjectMention]>>(per_trace: &[M]) -> Result<f64> {
    if per_trace.is_empty() {
        return Err(Error::UndefinedMetric("CHAIR_s of an empty corpus".into()));
    }
    let mut bad = 0usize;
    for group in per_trace {
        let mut any = false;
        for m in group.as_ref() {
            any |= label_of(m)?;
        }
        bad += usize::from(any);
    }
    Ok(bad as f64 / per_trace.len() as f64)
}

/// One labeled mention as stored in a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRow {
    pub trace_id: String,
    pub mention_index: usize,
    #[serde(flatten)]
    pub mention: ObjectMention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSummary {
    pub num_traces: usize,
    pub num_mentions: usize,
    pub chair_i: Option<f64>,
    pub chair_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelHeaderLine {
    schema_version: u32,
    header: FileHeader,
    summary: LabelSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub header: FileHeader,
    pub summary: LabelSummary,
    pub rows: Vec<MentionRow>,
}

impl LabelFile {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = io::to_jsonl([LabelHeaderLine {
            schema_version: SCHEMA_VERSION,
            header: self.header.clone(),
            summary: self.summary.clone(),
        }])?;
        out.push_str(&io::to_jsonl(&self.rows)?);
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = io::numbered_lines(text);
        let (line_no, first) = lines
            .next()
            .ok_or_else(|| Error::EmptyInput("label file has no header".into()))?;
        let head: LabelHeaderLine = serde_json::from_str(first).map_err(|e| Error::Schema {
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
                serde_json::from_str::<MentionRow>(l).map_err(|e| Error::Schema {
                    line: n,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header: head.header,
            summary: head.summary,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_to_string(path)?)
    }
}
