use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hallu_core::chair::{load_synonym_map, LabelFile, BUNDLED_SYNONYMS};
use hallu_core::features::FeatureDataset;
use hallu_core::io;
use hallu_core::learn::{self, Learner, ModelSpec};
use hallu_core::pipeline::{self, CommandOutput, DetectionFile, ModelChoice, PipelineConfig, ThresholdSource};
use hallu_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hallu", version, about = "Detect hallucinated objects in generated image captions")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; written atomically. Without it the output goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lr,
    Gb,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    L,
    E,
}

impl BaselineArg {
    fn column(self) -> &'static str {
        match self {
            BaselineArg::L => "L",
            BaselineArg::E => "E",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic generation traces from the config's [synth] table.
    Synth,
    /// Extract object mentions, label them against ground truth and report CHAIR.
    Label {
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Synonym map JSON, or `bdd100k` for the bundled table.
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Build the per-mention feature table.
    Featurize {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Append the image/caption similarity column.
        #[arg(long)]
        extended: bool,
    },
    /// Fit a meta classifier on the whole feature table.
    Train {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Train a single-feature baseline instead.
        #[arg(long, value_enum)]
        feature: Option<BaselineArg>,
    },
    /// Run the repeated train/validation protocol.
    Eval {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Evaluate only this single-feature baseline.
        #[arg(long, value_enum)]
        feature: Option<BaselineArg>,
    },
    /// LASSO path, feature ranking and AUPRC by number of features.
    Lasso {
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score mentions of new traces; ground truth is never read.
    Detect {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long, conflicts_with = "recall_target")]
        threshold: Option<f64>,
        /// Pick the threshold reaching this recall on --validation.
        #[arg(long)]
        recall_target: Option<f64>,
        /// Labeled feature table used to pick the threshold.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Replace flagged mentions with [IDK].
    Mask {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
}

fn need(arg: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn need_seed(cli_seed: Option<u64>, cfg: &PipelineConfig) -> Result<u64> {
    cli_seed
        .or(cfg.seed)
        .ok_or_else(|| Error::Config("this command needs --seed (or seed in the config)".into()))
}

fn model_choice(arg: Option<ModelArg>, cfg: &PipelineConfig) -> ModelChoice {
    match arg {
        Some(ModelArg::Lr) => ModelChoice::Lr,
        Some(ModelArg::Gb) => ModelChoice::Gb,
        Some(ModelArg::Both) => ModelChoice::Both,
        None => cfg.model,
    }
}

fn synonyms(arg: Option<PathBuf>, cfg: &PipelineConfig) -> Result<hallu_core::chair::SynonymMap> {
    let p = arg
        .or_else(|| cfg.paths.synonyms.clone())
        .unwrap_or_else(|| PathBuf::from(BUNDLED_SYNONYMS));
    load_synonym_map(&p)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let paths = &cfg.paths;
    let output: CommandOutput = match cli.command {
        Command::Synth => {
            let synth = cfg
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("synth needs a [synth] table in --config".into()))?;
            let seed = cli
                .seed
                .or(cfg.seed)
                .or(synth.seed)
                .ok_or_else(|| Error::Config("synth needs --seed (or a seed in the config)".into()))?;
            pipeline::cmd_synth(synth, seed)?
        }
        Command::Label { traces, synonyms: syn } => {
            let tf = hallu_core::trace::load_trace_file(&need(traces, &paths.traces, "traces")?)?;
            pipeline::cmd_label(&tf.traces, &synonyms(syn, &cfg)?)?
        }
        Command::Featurize {
            traces,
            labels,
            extended,
        } => {
            let tf = pipeline::load_nonempty_traces(&need(traces, &paths.traces, "traces")?)?;
            let lf = LabelFile::load(&need(labels, &paths.labels, "labels")?)?;
            pipeline::cmd_featurize(&tf.traces, &lf, extended || cfg.extended)?
        }
        Command::Train { features, model, feature } => {
            let seed = need_seed(cli.seed, &cfg)?;
            let ds = FeatureDataset::load(&need(features, &paths.features, "features")?)?;
            let spec = match (feature, model_choice(model, &cfg)) {
                (Some(f), _) => ModelSpec::Baseline(f.column().to_string()),
                (None, ModelChoice::Gb) => ModelSpec::Full(Learner::Gboost),
                (None, ModelChoice::Lr) => ModelSpec::Full(Learner::Logistic),
                (None, ModelChoice::Both) => {
                    return Err(Error::Config("train fits one model; pass --model lr or --model gb".into()))
                }
            };
            pipeline::cmd_train(&ds, &spec, &cfg.classifier, seed)?
        }
        Command::Eval { features, model, feature } => {
            let seed = need_seed(cli.seed, &cfg)?;
            let ds = FeatureDataset::load(&need(features, &paths.features, "features")?)?;
            let specs = pipeline::eval_specs(model_choice(model, &cfg), feature.map(BaselineArg::column));
            pipeline::cmd_eval(&ds, &specs, &cfg.classifier, &cfg.protocol, seed)?
        }
        Command::Lasso { features } => {
            let seed = need_seed(cli.seed, &cfg)?;
            let ds = FeatureDataset::load(&need(features, &paths.features, "features")?)?;
            pipeline::cmd_lasso(&ds, &cfg.lasso, &cfg.classifier, &cfg.protocol, seed)?
        }
        Command::Detect {
            traces,
            model,
            synonyms: syn,
            threshold,
            recall_target,
            validation,
        } => {
            let tf = pipeline::load_nonempty_traces(&need(traces, &paths.traces, "traces")?)?;
            let (_, meta) = learn::load_model(&need(model, &paths.model, "model")?)?;
            let validation_ds = match recall_target {
                Some(_) => {
                    let v = validation.or_else(|| paths.validation.clone()).ok_or_else(|| {
                        Error::Config("--recall-target needs --validation with a labeled feature table".into())
                    })?;
                    Some(FeatureDataset::load(&v)?)
                }
                None => None,
            };
            let source = match (threshold, recall_target, &validation_ds) {
                (Some(t), _, _) => ThresholdSource::Explicit(t),
                (None, Some(target), Some(v)) => ThresholdSource::RecallTarget { target, validation: v },
                _ => ThresholdSource::Model,
            };
            pipeline::cmd_detect(&tf.traces, &meta, &synonyms(syn, &cfg)?, &source)?
        }
        Command::Mask { traces, detections } => {
            let tf = pipeline::load_nonempty_traces(&need(traces, &paths.traces, "traces")?)?;
            let d = DetectionFile::load(&need(detections, &paths.detections, "detections")?)?;
            pipeline::cmd_mask(&tf.traces, &d)?
        }
    };
    match cli.out {
        Some(out) => {
            io::write_atomic(&out, output.file.as_bytes())?;
            print!("{}", output.summary);
        }
        None => {
            print!("{}", output.file);
            eprint!("{}", output.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
