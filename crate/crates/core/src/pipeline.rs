//! Command implementations behind the `hallu` binary.
//!
//! Every command returns its output file contents and a short human summary;
//! the binary decides where they go.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chair::{self, LabelFile, LabelSummary, MentionRow, ObjectMention, SynonymMap};
use crate::error::{Error, Result};
use crate::features::{self, column_names, FeatureDataset, CLIP_COLUMN};
use crate::io::{self, FileHeader, SCHEMA_VERSION};
use crate::learn::{
    self, rank_features, ClassifierConfig, LassoConfig, LassoPath, Learner, MetaModel, ModelSpec, RankEntry,
    Samples,
};
use crate::metrics::{self, ScoredSet};
use crate::protocol::{self, CurvePoint, EvalReport, ProtocolConfig};
use crate::synth::{self, SynthConfig};
use crate::trace::{self, GenerationTrace, TraceFile};

/// Replacement string for flagged mentions.
pub const IDK: &str = "[IDK]";

/// Output of a command: file contents plus a console summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub file: String,
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub traces: Option<PathBuf>,
    /// Synonym map JSON, or `bdd100k` for the bundled table.
    pub synonyms: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Lr,
    Gb,
    #[default]
    Both,
}

impl ModelChoice {
    pub fn learners(self) -> Vec<Learner> {
        match self {
            ModelChoice::Lr => vec![Learner::Logistic],
            ModelChoice::Gb => vec![Learner::Gboost],
            ModelChoice::Both => vec![Learner::Logistic, Learner::Gboost],
        }
    }
}

fn default_recall_targets() -> Vec<f64> {
    vec![0.7, 0.8, 0.9, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub synth: Option<SynthConfig>,
    /// Append the image/caption similarity column.
    pub extended: bool,
    pub model: ModelChoice,
    pub classifier: ClassifierConfig,
    pub protocol: ProtocolConfig,
    pub lasso: LassoConfig,
    pub recall_targets: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: PathsConfig::default(),
            synth: None,
            extended: false,
            model: ModelChoice::Both,
            classifier: ClassifierConfig::default(),
            protocol: ProtocolConfig::default(),
            lasso: LassoConfig::default(),
            recall_targets: default_recall_targets(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&io::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.traces,
            &mut p.labels,
            &mut p.features,
            &mut p.model,
            &mut p.validation,
            &mut p.detections,
        ] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        if let Some(v) = p.synonyms.as_mut() {
            if v.is_relative() && v.as_os_str() != chair::BUNDLED_SYNONYMS {
                *v = base.join(&*v);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.protocol.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if let Some(t) = self.recall_targets.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("recall target {t} outside (0, 1]")));
        }
        Ok(())
    }

    /// Input paths named in the config must exist.
    fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        for path in [&p.traces, &p.labels, &p.features, &p.model, &p.validation, &p.detections]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::Config(format!("configured path {} does not exist", path.display())));
            }
        }
        if let Some(s) = &p.synonyms {
            if s.as_os_str() != chair::BUNDLED_SYNONYMS && !s.exists() {
                return Err(Error::Config(format!("configured path {} does not exist", s.display())));
            }
        }
        Ok(())
    }
}

pub fn cmd_synth(cfg: &SynthConfig, seed: u64) -> Result<CommandOutput> {
    cfg.validate()?;
    let traces = synth::synthesize_traces(cfg, seed)?;
    let digest_cfg = SynthConfig {
        seed: None,
        ..cfg.clone()
    };
    let header = FileHeader::new("synth", &io::digest(&digest_cfg)).with_seed(seed);
    let tokens: usize = traces.iter().map(|t| t.tokens.len()).sum();
    Ok(CommandOutput {
        file: trace::serialize_traces(Some(&header), &traces)?,
        summary: format!("synthesized {} traces ({tokens} tokens), seed {seed}\n", traces.len()),
    })
}

pub fn label_traces(traces: &[GenerationTrace], syn: &SynonymMap) -> Result<LabelFile> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("trace file contains no traces".into()));
    }
    let mut per_trace = Vec::with_capacity(traces.len());
    let mut rows = Vec::new();
    for t in traces {
        let labeled = chair::label_mentions(&chair::extract_mentions(t, syn)?, t)?;
        for (i, m) in labeled.iter().enumerate() {
            rows.push(MentionRow {
                trace_id: t.trace_id.clone(),
                mention_index: i,
                mention: m.clone(),
            });
        }
        per_trace.push(labeled);
    }
    let chair_i = if rows.is_empty() {
        None
    } else {
        Some(chair::chair_i(rows.iter().map(|r| &r.mention))?)
    };
    Ok(LabelFile {
        header: FileHeader::new("label", &io::digest(syn.entries())),
        summary: LabelSummary {
            num_traces: traces.len(),
            num_mentions: rows.len(),
            chair_i,
            chair_s: chair::chair_s(&per_trace)?,
        },
        rows,
    })
}

pub fn cmd_label(traces: &[GenerationTrace], syn: &SynonymMap) -> Result<CommandOutput> {
    let lf = label_traces(traces, syn)?;
    let s = &lf.summary;
    let ci = s.chair_i.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    Ok(CommandOutput {
        file: lf.to_jsonl()?,
        summary: format!(
            "traces {}  mentions {}\nCHAIR_i {ci}\nCHAIR_s {:.3}\n",
            s.num_traces, s.num_mentions, s.chair_s
        ),
    })
}

fn shared_num_heads(traces: &[GenerationTrace]) -> Result<usize> {
    let first = traces
        .first()
        .ok_or_else(|| Error::EmptyInput("trace file contains no traces".into()))?;
    if let Some(t) = traces.iter().find(|t| t.num_heads != first.num_heads) {
        return Err(Error::InvalidInput(format!(
            "trace `{}` has {} heads, expected {}",
            t.trace_id, t.num_heads, first.num_heads
        )));
    }
    Ok(first.num_heads)
}

fn check_mention(t: &GenerationTrace, m: &ObjectMention) -> Result<()> {
    let (lo, hi) = m.char_span;
    let ok = lo < hi
        && m.end_token < t.tokens.len()
        && t.caption.get(lo..hi).is_some_and(|s| s.to_ascii_lowercase().starts_with(&m.matched_phrase));
    if ok {
        Ok(())
    } else {
        Err(Error::MalformedSpan {
            trace_id: t.trace_id.clone(),
            message: format!("mention `{}` at {lo}..{hi} does not match the caption", m.matched_phrase),
        })
    }
}

pub fn featurize(traces: &[GenerationTrace], labels: &LabelFile, extended: bool) -> Result<FeatureDataset> {
    let num_heads = shared_num_heads(traces)?;
    let by_id: HashMap<&str, &GenerationTrace> = traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let mut grouped: BTreeMap<&str, Vec<&MentionRow>> = BTreeMap::new();
    for r in &labels.rows {
        if !by_id.contains_key(r.trace_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "label file mentions unknown trace `{}`",
                r.trace_id
            )));
        }
        grouped.entry(r.trace_id.as_str()).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(labels.rows.len());
    for t in traces {
        let Some(group) = grouped.get(t.trace_id.as_str()) else {
            continue;
        };
        let mut group = group.clone();
        group.sort_by_key(|r| r.mention_index);
        if group.iter().enumerate().any(|(i, r)| r.mention_index != i) {
            return Err(Error::InvalidInput(format!(
                "mention indices of `{}` are not 0..n",
                t.trace_id
            )));
        }
        let mentions: Vec<ObjectMention> = group.iter().map(|r| r.mention.clone()).collect();
        for (i, m) in mentions.iter().enumerate() {
            check_mention(t, m)?;
            rows.push(features::build_feature_vector(i, t, &mentions, extended)?);
        }
    }
    let header = FileHeader::new("featurize", &io::digest(&("featurize", extended, num_heads)));
    FeatureDataset::new(header, num_heads, extended, rows)
}

pub fn cmd_featurize(traces: &[GenerationTrace], labels: &LabelFile, extended: bool) -> Result<CommandOutput> {
    let ds = featurize(traces, labels, extended)?;
    Ok(CommandOutput {
        file: ds.to_jsonl()?,
        summary: format!("{} rows x {} columns (G = {})\n", ds.rows.len(), ds.columns.len(), ds.num_heads),
    })
}

/// Classifier settings with the run seed applied.
fn seeded(cfg: &ClassifierConfig, seed: u64) -> ClassifierConfig {
    let mut c = cfg.clone();
    c.logistic.random_state = seed;
    c
}

pub fn cmd_train(ds: &FeatureDataset, spec: &ModelSpec, cfg: &ClassifierConfig, seed: u64) -> Result<CommandOutput> {
    let cfg = seeded(cfg, seed);
    let model = learn::train(&Samples::from_dataset(ds), spec, &cfg)?;
    let header = FileHeader::new("train", &io::digest(&("train", spec, &cfg))).with_seed(seed);
    Ok(CommandOutput {
        file: learn::model_to_json(&header, &model)?,
        summary: format!("trained {} on {} rows\n", spec.label(), ds.rows.len()),
    })
}

/// Models compared by `eval`: the two single-feature baselines, then the full models.
pub fn eval_specs(choice: ModelChoice, feature: Option<&str>) -> Vec<ModelSpec> {
    match feature {
        Some(f) => vec![ModelSpec::Baseline(f.to_string())],
        None => ["L", "E"]
            .iter()
            .map(|c| ModelSpec::Baseline(c.to_string()))
            .chain(choice.learners().into_iter().map(ModelSpec::Full))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDocument {
    pub schema_version: u32,
    pub header: FileHeader,
    pub protocol: ProtocolConfig,
    pub std_convention: String,
    pub reports: Vec<EvalReport>,
}

pub fn evaluate(
    ds: &FeatureDataset,
    specs: &[ModelSpec],
    cfg: &ClassifierConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<EvalDocument> {
    let cfg = seeded(cfg, seed);
    let samples = Samples::from_dataset(ds);
    let plan = protocol::plan_splits(&samples, protocol, seed)?;
    let reports = specs
        .iter()
        .map(|s| protocol::evaluate_on_plan(&samples, s, &cfg, &plan, protocol.ece_bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalDocument {
        schema_version: SCHEMA_VERSION,
        header: FileHeader::new("eval", &io::digest(&("eval", specs, &cfg, protocol))).with_seed(seed),
        protocol: protocol.clone(),
        std_convention: "sample standard deviation across splits (n - 1 denominator)".into(),
        reports,
    })
}

pub fn cmd_eval(
    ds: &FeatureDataset,
    specs: &[ModelSpec],
    cfg: &ClassifierConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<CommandOutput> {
    let doc = evaluate(ds, specs, cfg, protocol, seed)?;
    Ok(CommandOutput {
        file: io::to_pretty_json(&doc)?,
        summary: protocol::render_table(&doc.reports),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoDocument {
    pub schema_version: u32,
    pub header: FileHeader,
    pub path: LassoPath,
    pub ranking: Vec<RankEntry>,
    /// Validation AUPRC of a logistic model on the first `k` ranked features.
    pub auprc_vs_k: Vec<CurvePoint>,
}

pub fn lasso_analysis(
    ds: &FeatureDataset,
    lasso: &LassoConfig,
    cfg: &ClassifierConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<LassoDocument> {
    let cfg = seeded(cfg, seed);
    let samples = Samples::from_dataset(ds);
    let path = learn::lasso_path(&samples.x, &samples.y, &samples.columns, lasso)?;
    let ranking = rank_features(&path);
    let plan = protocol::plan_splits(&samples, protocol, seed)?;
    let auprc_vs_k = protocol::auprc_vs_k(&samples, &ranking, Learner::Logistic, &cfg, &plan)?;
    Ok(LassoDocument {
        schema_version: SCHEMA_VERSION,
        header: FileHeader::new("lasso", &io::digest(&("lasso", lasso, &cfg, protocol))).with_seed(seed),
        path,
        ranking,
        auprc_vs_k,
    })
}

pub fn render_ranking(doc: &LassoDocument) -> String {
    let mut out = String::from("rank  feature  entry  |coef|@entry  AUPRC@k\n");
    for (i, r) in doc.ranking.iter().enumerate() {
        let entry = r.entry_index.map_or("-".to_string(), |e| e.to_string());
        let curve = doc
            .auprc_vs_k
            .get(i)
            .filter(|_| r.selected)
            .map_or("-".to_string(), |c| format!("{:.2}", 100.0 * c.auprc.mean));
        let note = if r.selected { "" } else { "  (not selected)" };
        out.push_str(&format!(
            "{:>4}  {:<7}  {:>5}  {:>12.5}  {:>7}{note}\n",
            r.rank, r.feature, entry, r.abs_coef_at_entry, curve
        ));
    }
    out
}

pub fn cmd_lasso(
    ds: &FeatureDataset,
    lasso: &LassoConfig,
    cfg: &ClassifierConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<CommandOutput> {
    let doc = lasso_analysis(ds, lasso, cfg, protocol, seed)?;
    Ok(CommandOutput {
        file: io::to_pretty_json(&doc)?,
        summary: render_ranking(&doc),
    })
}

/// Where the detection threshold comes from.
#[derive(Debug, Clone)]
pub enum ThresholdSource<'a> {
    Model,
    Explicit(f64),
    RecallTarget { target: f64, validation: &'a FeatureDataset },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRow {
    pub trace_id: String,
    pub mention_index: usize,
    pub category: String,
    /// Caption text covered by the mention.
    pub surface: String,
    pub char_span: (usize, usize),
    pub start_token: usize,
    pub end_token: usize,
    pub probability: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionHeaderLine {
    schema_version: u32,
    header: FileHeader,
    threshold: f64,
    recall_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub header: FileHeader,
    pub threshold: f64,
    pub recall_target: Option<f64>,
    pub rows: Vec<DetectionRow>,
}

impl DetectionFile {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = io::to_jsonl([DetectionHeaderLine {
            schema_version: SCHEMA_VERSION,
            header: self.header.clone(),
            threshold: self.threshold,
            recall_target: self.recall_target,
        }])?;
        out.push_str(&io::to_jsonl(&self.rows)?);
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = io::numbered_lines(text);
        let (n, first) = lines
            .next()
            .ok_or_else(|| Error::EmptyInput("detection file has no header".into()))?;
        let head: DetectionHeaderLine =
            serde_json::from_str(first).map_err(|e| Error::Schema { line: n, message: e.to_string() })?;
        if head.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                line: n,
                message: format!("unsupported schema_version {}", head.schema_version),
            });
        }
        let rows = lines
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Schema { line: n, message: e.to_string() }))
            .collect::<Result<Vec<DetectionRow>>>()?;
        Ok(Self {
            header: head.header,
            threshold: head.threshold,
            recall_target: head.recall_target,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_to_string(path)?)
    }
}

fn resolve_threshold(model: &MetaModel, source: &ThresholdSource) -> Result<(f64, Option<f64>)> {
    match source {
        ThresholdSource::Model => Ok((model.threshold, None)),
        ThresholdSource::Explicit(t) => {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::InvalidInput(format!("threshold {t} outside [0, 1]")));
            }
            Ok((*t, None))
        }
        ThresholdSource::RecallTarget { target, validation } => {
            model.check_columns(&validation.columns)?;
            let v = Samples::from_dataset(validation);
            let set = ScoredSet::new(model.predict_all(&v.x)?, v.y)?;
            Ok((metrics::threshold_for_recall(&set, *target)?, Some(*target)))
        }
    }
}

/// Scores every mention without looking at ground truth.
pub fn detect(
    traces: &[GenerationTrace],
    model: &MetaModel,
    syn: &SynonymMap,
    source: &ThresholdSource,
) -> Result<DetectionFile> {
    let num_heads = shared_num_heads(traces)?;
    let extended = model.columns.last().is_some_and(|c| c == CLIP_COLUMN);
    let expected = column_names(num_heads, extended);
    if expected.len() != model.columns.len() {
        return Err(Error::DimensionMismatch {
            expected: model.columns.len(),
            actual: expected.len(),
        });
    }
    model.check_columns(&expected)?;
    let (threshold, recall_target) = resolve_threshold(model, source)?;
    let mut rows = Vec::new();
    for t in traces {
        let blind = GenerationTrace {
            gt_objects: None,
            ..t.clone()
        };
        let mentions = chair::extract_mentions(&blind, syn)?;
        for (i, m) in mentions.iter().enumerate() {
            let values = features::feature_values(m, &blind, &mentions, extended)?;
            let probability = model.predict_proba(&values)?;
            rows.push(DetectionRow {
                trace_id: blind.trace_id.clone(),
                mention_index: i,
                category: m.category.clone(),
                surface: blind.caption[m.char_span.0..m.char_span.1].to_string(),
                char_span: m.char_span,
                start_token: m.start_token,
                end_token: m.end_token,
                probability,
                flagged: probability >= threshold,
            });
        }
    }
    let digest = io::digest(&("detect", &model.config_digest, threshold, syn.entries()));
    Ok(DetectionFile {
        header: FileHeader::new("detect", &digest),
        threshold,
        recall_target,
        rows,
    })
}

pub fn cmd_detect(
    traces: &[GenerationTrace],
    model: &MetaModel,
    syn: &SynonymMap,
    source: &ThresholdSource,
) -> Result<CommandOutput> {
    let d = detect(traces, model, syn, source)?;
    let flagged = d.rows.iter().filter(|r| r.flagged).count();
    Ok(CommandOutput {
        file: d.to_jsonl()?,
        summary: format!(
            "{} mentions scored, {flagged} flagged at threshold {:.6}\n",
            d.rows.len(),
            d.threshold
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedCaption {
    pub trace_id: String,
    pub masked_caption: String,
    pub num_masked: usize,
}

/// Replaces the caption text of every flagged mention with `[IDK]`.
pub fn mask_caption(t: &GenerationTrace, flagged: &[&DetectionRow]) -> Result<MaskedCaption> {
    let mut spans: Vec<&DetectionRow> = flagged.to_vec();
    spans.sort_by_key(|r| r.char_span.0);
    for w in spans.windows(2) {
        if w[0].char_span.1 > w[1].char_span.0 {
            return Err(Error::MalformedSpan {
                trace_id: t.trace_id.clone(),
                message: "flagged mentions overlap".into(),
            });
        }
    }
    let mut out = t.caption.clone();
    for r in spans.iter().rev() {
        let (lo, hi) = r.char_span;
        if t.caption.get(lo..hi) != Some(r.surface.as_str()) {
            return Err(Error::MalformedSpan {
                trace_id: t.trace_id.clone(),
                message: format!("span {lo}..{hi} does not hold `{}`", r.surface),
            });
        }
        out.replace_range(lo..hi, IDK);
    }
    Ok(MaskedCaption {
        trace_id: t.trace_id.clone(),
        masked_caption: out,
        num_masked: spans.len(),
    })
}

pub fn mask(traces: &[GenerationTrace], detections: &DetectionFile) -> Result<Vec<MaskedCaption>> {
    let mut by_trace: HashMap<&str, Vec<&DetectionRow>> = HashMap::new();
    let ids: HashMap<&str, ()> = traces.iter().map(|t| (t.trace_id.as_str(), ())).collect();
    for r in &detections.rows {
        if !ids.contains_key(r.trace_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "detection refers to unknown trace `{}`",
                r.trace_id
            )));
        }
        if r.flagged {
            by_trace.entry(r.trace_id.as_str()).or_default().push(r);
        }
    }
    traces
        .iter()
        .map(|t| mask_caption(t, by_trace.get(t.trace_id.as_str()).map_or(&[][..], Vec::as_slice)))
        .collect()
}

#[derive(Serialize)]
struct MaskHeaderLine<'a> {
    schema_version: u32,
    header: &'a FileHeader,
}

pub fn cmd_mask(traces: &[GenerationTrace], detections: &DetectionFile) -> Result<CommandOutput> {
    let masked = mask(traces, detections)?;
    let header = FileHeader::new("mask", &io::digest(&("mask", IDK, &detections.header.config_digest)));
    let mut file = io::to_jsonl([MaskHeaderLine {
        schema_version: SCHEMA_VERSION,
        header: &header,
    }])?;
    file.push_str(&io::to_jsonl(&masked)?);
    let n: usize = masked.iter().map(|m| m.num_masked).sum();
    Ok(CommandOutput {
        file,
        summary: format!("masked {n} mentions in {} captions\n", masked.len()),
    })
}

/// Convenience: traces from a file, rejecting an empty one.
pub fn load_nonempty_traces(path: &Path) -> Result<TraceFile> {
    let tf = trace::load_trace_file(path)?;
    if tf.traces.is_empty() {
        return Err(Error::EmptyInput(format!("{} contains no traces", path.display())));
    }
    Ok(tf)
}
