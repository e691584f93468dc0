//! Synthetic generation traces with planted hallucination signal.
//!
//! Each caption is a short template sentence listing object mentions. A
//! mention is hallucinated with probability `hallucination_rate`; its
//! category is then drawn from outside the image's ground truth. Hallucinated
//! start tokens get lower confidence, a flatter head distribution and weaker
//! image attention, scaled by [`Signal`].
//!
//! Step distributions are softmax distributions over the vocabulary where
//! the top three tokens carry explicit logits and every other token has
//! logit 0, so summaries are exact for any vocabulary size.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::trace::{summarize_head_tail, Decoding, GenerationTrace, TokenRecord};

/// Effect sizes of the planted signal. Zero means no signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Signal {
    /// Shift of the start-token confidence logit for hallucinated mentions.
    pub logp: f64,
    /// Reduction of the top-to-runner-up logit gap (flatter distribution).
    pub entropy: f64,
    /// Log-scale attenuation of image attention, full strength on head 0
    /// and fading linearly over the heads.
    pub attention: f64,
    /// Probability that a true mention repeats an already mentioned true category.
    pub occurrence: f64,
}

impl Default for Signal {
    fn default() -> Self {
        Self {
            logp: 1.0,
            entropy: 0.5,
            attention: 0.4,
            occurrence: 0.5,
        }
    }
}

fn default_min_mentions() -> usize {
    1
}
fn default_max_mentions() -> usize {
    6
}
fn default_length_penalty() -> f64 {
    1.0
}
fn default_decoding() -> Decoding {
    Decoding::Sampling
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_traces: usize,
    pub vocab_size: u32,
    pub num_heads: usize,
    pub categories: Vec<String>,
    pub hallucination_rate: f64,
    #[serde(default)]
    pub signal: Signal,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_min_mentions")]
    pub min_mentions: usize,
    #[serde(default = "default_max_mentions")]
    pub max_mentions: usize,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
    #[serde(default = "default_decoding")]
    pub decoding: Decoding,
    /// Attach per-category image/caption similarity scores.
    #[serde(default)]
    pub clip_scores: bool,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.hallucination_rate) {
            return bad(format!(
                "hallucination_rate {} outside [0, 1]",
                self.hallucination_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.signal.occurrence) {
            return bad(format!(
                "signal.occurrence {} outside [0, 1]",
                self.signal.occurrence
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.num_heads == 0 {
            return bad("num_heads must be positive".into());
        }
        if self.categories.is_empty() {
            return bad("at least one category is required".into());
        }
        let distinct: BTreeSet<&String> = self.categories.iter().collect();
        if distinct.len() != self.categories.len() {
            return bad("categories must be distinct".into());
        }
        if self.hallucination_rate > 0.0 && self.categories.len() < 2 {
            return bad("hallucinations need at least two categories".into());
        }
        for c in &self.categories {
            let ok = !c.is_empty()
                && c.split(' ')
                    .all(|w| !w.is_empty() && w.bytes().all(|b| b.is_ascii_lowercase()));
            if !ok || FILLER_WORDS.contains(&c.as_str()) {
                return bad(format!(
                    "category `{c}` must be lowercase words separated by single spaces"
                ));
            }
        }
        if self.min_mentions == 0 || self.min_mentions > self.max_mentions {
            return bad("need 1 <= min_mentions <= max_mentions".into());
        }
        let s = &self.signal;
        if ![s.logp, s.entropy, s.attention, self.length_penalty]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("signal strengths and length_penalty must be finite".into());
        }
        Ok(())
    }
}

/// Ground-truth record of one synthesized mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedMention {
    pub category: String,
    pub hallucinated: bool,
    pub start_token: usize,
    pub end_token: usize,
}

const OPENINGS: [&str; 4] = [
    "the image shows",
    "this picture shows",
    "in this scene there is",
    "we can see",
];
const CONNECTORS: [&str; 8] = [
    "a", "the", "and a", "with a", "next to the", "near a", "behind the", "beside a",
];
/// Every word the templates can emit besides category names.
const FILLER_WORDS: [&str; 21] = [
    "the", "image", "shows", "this", "picture", "in", "scene", "there", "is", "we", "can",
    "see", "a", "and", "with", "next", "to", "near", "behind", "beside", ".",
];

const FILLER_CONF: f64 = 3.0;
const CONTINUATION_CONF: f64 = 3.5;
const OBJECT_CONF: f64 = 2.0;

fn sample_gt(rng: &mut ChaCha8Rng, categories: &[String]) -> BTreeSet<String> {
    loop {
        let gt: BTreeSet<String> = categories
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .cloned()
            .collect();
        let has_outside = gt.len() < categories.len() || categories.len() == 1;
        if !gt.is_empty() && has_outside {
            return gt;
        }
    }
}

struct Builder {
    caption: String,
    words: Vec<(String, f64, bool)>,
}

impl Builder {
    /// Pushes a word with its confidence mean and whether it starts a hallucinated mention.
    fn push(&mut self, word: &str, conf: f64, hallucinated_start: bool) -> usize {
        self.words.push((word.to_string(), conf, hallucinated_start));
        self.words.len() - 1
    }
}

fn step_stats(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    conf_mean: f64,
    gap_shift: f64,
) -> Result<crate::trace::StepStats> {
    let v = cfg.vocab_size;
    let k = v.min(3) as usize;
    let z: f64 = conf_mean + rng.sample::<f64, _>(StandardNormal);
    // Top logit relative to the tail logit 0.
    let top = (f64::from(v).ln() + z).max(0.0);
    let gap1 = (rng.random_range(0.5..2.5) - gap_shift).max(0.0);
    let gap2 = gap1 + rng.random_range(0.0..1.5);
    let logits = [top, (top - gap1).max(0.0), (top - gap2).max(0.0)];
    let tail = f64::from(v) - k as f64;
    // Normalize relative to the largest logit for stability.
    let scaled: Vec<f64> = logits[..k].iter().map(|l| (l - top).exp()).collect();
    let z_norm = scaled.iter().sum::<f64>() + tail * (-top).exp();
    let head: Vec<f64> = scaled.iter().map(|s| s / z_norm).collect();
    let non_argmax = match cfg.decoding {
        Decoding::Sampling => 0.08,
        Decoding::Beam => 0.02,
    };
    let chosen = usize::from(rng.random_bool(non_argmax));
    summarize_head_tail(&head, v, chosen)
}

fn attention(rng: &mut ChaCha8Rng, cfg: &SynthConfig, attenuate: bool) -> Vec<f64> {
    let g_total = cfg.num_heads as f64;
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    (0..cfg.num_heads)
        .map(|g| {
            let base = 0.02 * (1.0 + 0.5 * (g % 4) as f64);
            let weight = 1.0 - g as f64 / g_total;
            let shift = if attenuate {
                cfg.signal.attention * weight
            } else {
                0.0
            };
            base * (noise.sample(rng) - shift).exp()
        })
        .collect()
}

/// Generates traces plus the planted mention plan for each.
pub fn synthesize_with_plan(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<(GenerationTrace, Vec<PlantedMention>)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.num_traces);
    for i in 0..cfg.num_traces {
        let gt = sample_gt(&mut rng, &cfg.categories);
        let outside: Vec<&String> = cfg.categories.iter().filter(|c| !gt.contains(*c)).collect();
        let inside: Vec<&String> = gt.iter().collect();

        let n_mentions = rng.random_range(cfg.min_mentions..=cfg.max_mentions);
        let mut b = Builder {
            caption: String::new(),
            words: Vec::new(),
        };
        for w in OPENINGS.choose(&mut rng).expect("nonempty").split(' ') {
            b.push(w, FILLER_CONF, false);
        }
        let mut plan = Vec::with_capacity(n_mentions);
        let mut true_seen: Vec<&String> = Vec::new();
        for _ in 0..n_mentions {
            let hallucinated = rng.random_bool(cfg.hallucination_rate);
            let category: &String = if hallucinated {
                outside.choose(&mut rng).expect("outside set nonempty")
            } else if !true_seen.is_empty() && rng.random_bool(cfg.signal.occurrence) {
                true_seen.choose(&mut rng).expect("nonempty")
            } else {
                inside.choose(&mut rng).expect("gt nonempty")
            };
            if !hallucinated {
                true_seen.push(category);
            }
            for w in CONNECTORS.choose(&mut rng).expect("nonempty").split(' ') {
                b.push(w, FILLER_CONF, false);
            }
            let mut start = None;
            let mut end = 0;
            for (j, w) in category.split(' ').enumerate() {
                let conf = match (j, hallucinated) {
                    (0, false) => OBJECT_CONF,
                    (0, true) => OBJECT_CONF - cfg.signal.logp,
                    _ => CONTINUATION_CONF,
                };
                end = b.push(w, conf, j == 0 && hallucinated);
                start.get_or_insert(end);
            }
            plan.push(PlantedMention {
                category: category.clone(),
                hallucinated,
                start_token: start.expect("category has a word"),
                end_token: end,
            });
        }
        b.push(".", FILLER_CONF + 1.0, false);

        let mut tokens = Vec::with_capacity(b.words.len());
        for (idx, (word, conf, halluc_start)) in b.words.iter().enumerate() {
            let surface = if idx == 0 || word == "." {
                word.clone()
            } else {
                format!(" {word}")
            };
            let start = b.caption.len();
            b.caption.push_str(&surface);
            let gap_shift = if *halluc_start { cfg.signal.entropy } else { 0.0 };
            let stats = step_stats(&mut rng, cfg, *conf, gap_shift)?;
            let attn = attention(&mut rng, cfg, *halluc_start);
            tokens.push(TokenRecord {
                surface,
                char_span: (start, b.caption.len()),
                stats,
                attn_img_mean_abs: attn,
            });
        }

        let clip_scores = cfg.clip_scores.then(|| {
            cfg.categories
                .iter()
                .map(|c| {
                    let mean = if gt.contains(c) { 30.0 } else { 24.0 };
                    let s: f64 = mean + 3.0 * rng.sample::<f64, _>(StandardNormal);
                    (c.clone(), s.clamp(0.0, 100.0))
                })
                .collect::<BTreeMap<_, _>>()
        });

        let trace = GenerationTrace {
            trace_id: format!("syn-{seed}-{i:05}"),
            caption: b.caption,
            tokens,
            num_heads: cfg.num_heads,
            length_penalty: cfg.length_penalty,
            decoding: cfg.decoding,
            gt_objects: Some(gt),
            clip_scores,
        };
        trace.validate().map_err(|e| Error::Internal(format!("synthesized invalid trace: {e}")))?;
        out.push((trace, plan));
    }
    Ok(out)
}

pub fn synthesize_traces(cfg: &SynthConfig, seed: u64) -> Result<Vec<GenerationTrace>> {
    Ok(synthesize_with_plan(cfg, seed)?
        .into_iter()
        .map(|(t, _)| t)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chair::{extract_mentions, label_mentions, SynonymMap};
    use crate::trace::serialize_traces;

    fn small(rate: f64) -> SynthConfig {
        SynthConfig {
            num_traces: 40,
            vocab_size: 50,
            num_heads: 4,
            categories: ["person", "car", "traffic light", "bus", "bike"]
                .map(String::from)
                .to_vec(),
            hallucination_rate: rate,
            signal: Signal::default(),
            seed: None,
            min_mentions: 1,
            max_mentions: 6,
            length_penalty: 1.0,
            decoding: Decoding::Sampling,
            clip_scores: false,
        }
    }

    #[test]
    fn zero_rate_means_all_true() {
        for (t, plan) in synthesize_with_plan(&small(0.0), 3).unwrap() {
            let gt = t.gt_objects.as_ref().unwrap();
            assert!(plan.iter().all(|p| !p.hallucinated && gt.contains(&p.category)));
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = serialize_traces(None, &synthesize_traces(&small(0.3), 11).unwrap()).unwrap();
        let b = serialize_traces(None, &synthesize_traces(&small(0.3), 11).unwrap()).unwrap();
        let c = serialize_traces(None, &synthesize_traces(&small(0.3), 12).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_rate_concentrates() {
        let mut cfg = small(0.3);
        cfg.num_traces = 500;
        cfg.min_mentions = 2;
        cfg.max_mentions = 3;
        let plans: Vec<bool> = synthesize_with_plan(&cfg, 5)
            .unwrap()
            .into_iter()
            .flat_map(|(_, p)| p.into_iter().map(|m| m.hallucinated))
            .take(1000)
            .collect();
        assert_eq!(plans.len(), 1000);
        let frac = plans.iter().filter(|h| **h).count() as f64 / 1000.0;
        assert!((frac - 0.3).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn labels_recover_plan() {
        let cfg = small(0.35);
        let maps = [
            SynonymMap::from_categories(&cfg.categories).unwrap(),
            SynonymMap::bdd100k(),
        ];
        for syn in &maps {
            for (t, plan) in synthesize_with_plan(&cfg, 9).unwrap() {
                let ms = label_mentions(&extract_mentions(&t, syn).unwrap(), &t).unwrap();
                assert_eq!(ms.len(), plan.len(), "{}", t.caption);
                for (m, p) in ms.iter().zip(&plan) {
                    assert_eq!(m.category, p.category);
                    assert_eq!(m.label, Some(u8::from(p.hallucinated)));
                    assert_eq!((m.start_token, m.end_token), (p.start_token, p.end_token));
                }
            }
        }
    }

    #[test]
    fn tiny_vocabularies_are_valid() {
        for v in [2, 3, 4] {
            let mut cfg = small(0.3);
            cfg.vocab_size = v;
            cfg.num_traces = 5;
            assert!(synthesize_traces(&cfg, 1).is_ok());
        }
    }

    #[test]
    fn config_errors() {
        let mut cfg = small(1.5);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.hallucination_rate = 0.2;
        cfg.vocab_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small(0.2);
        cfg.categories = vec!["Car".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_config() {
        let cfg = SynthConfig::from_toml(
            r#"
            num_traces = 3
            vocab_size = 100
            num_heads = 2
            categories = ["car", "person"]
            hallucination_rate = 0.2
            [signal]
            attention = 1.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.signal.attention, 1.0);
        assert_eq!(cfg.signal.logp, Signal::default().logp);
        assert!(SynthConfig::from_toml("num_traces = 3\nbogus = 1").is_err());
    }

    #[test]
    fn clip_scores_cover_categories() {
        let mut cfg = small(0.3);
        cfg.clip_scores = true;
        for t in synthesize_traces(&cfg, 2).unwrap() {
            assert_eq!(t.clip_scores.unwrap().len(), cfg.categories.len());
        }
    }
}
