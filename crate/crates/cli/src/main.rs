use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fingerdecode::bandselect::{self, BandScore, BinaryTask};
use fingerdecode::config::PipelineConfig;
use fingerdecode::csp::BandMoments;
use fingerdecode::ecoc::{self, ModelBundle, ModelMeta, PairModel};
use fingerdecode::eval;
use fingerdecode::rng;
use fingerdecode::synthgen::{self, SynthConfig};
use fingerdecode::trialstore::{self, Dataset};

#[derive(Parser)]
#[command(name = "fingerdecode", version, about = "Decode finger movements from EEG epochs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a synthesis config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces both the mixing and noise seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every filter-bank band for one class pair and select bands.
    ScoreBands {
        #[arg(long)]
        dataset: PathBuf,
        /// Class names or indices, positive class first.
        #[arg(long)]
        classes: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON output; a CSV with the same stem is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a pair model (with --classes) or the multiclass decoder.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeated stratified holdout; writes report.json and CSV tables.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict every trial of a dataset with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => synth(&config, &out, seed),
        Command::ScoreBands {
            dataset,
            classes,
            config,
            out,
            seed,
        } => score_bands(&dataset, &classes, config.as_deref(), &out, seed),
        Command::Train {
            dataset,
            config,
            model,
            classes,
            seed,
        } => train(&dataset, config.as_deref(), &model, classes.as_deref(), seed),
        Command::Evaluate {
            dataset,
            config,
            out,
            seed,
        } => evaluate(&dataset, config.as_deref(), &out, seed),
        Command::Predict { model, dataset, out } => predict(&model, &dataset, &out),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn pipeline_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(dir: &Path) -> Result<Dataset> {
    trialstore::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn parse_pair(dataset: &Dataset, text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [a, b] = parts[..] else {
        bail!("--classes expects two classes separated by a comma, got {text:?}");
    };
    let (a, b) = (dataset.class_index(a)?, dataset.class_index(b)?);
    if a == b {
        bail!("--classes names the same class twice");
    }
    Ok((a, b))
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig =
        serde_json::from_str(&read(config)?).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(s) = seed {
        cfg.mixing_seed = rng::derive_seed(s, &[0]);
        cfg.noise_seed = rng::derive_seed(s, &[1]);
    }
    let dataset = synthgen::generate(&cfg)?;
    trialstore::save_dataset(&dataset, out)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    pair: [&'a str; 2],
    scores: &'a [BandScore],
    threshold: f64,
    selected: &'a [usize],
    config: &'a PipelineConfig,
}

fn score_bands(dataset: &Path, classes: &str, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = pipeline_config(config, seed)?;
    let dataset = load(dataset)?;
    let (a, b) = parse_pair(&dataset, classes)?;
    let bank = cfg.bank(dataset.sample_rate)?;
    let moments = BandMoments::from_dataset(&dataset, &bank)?;
    let task = BinaryTask::pair(&moments.labels, a, b, None);
    let scores = bandselect::score_bands(&moments, &task, &cfg.score_config(), cfg.seed)?;
    let selection = bandselect::select_bands(&scores)?;

    let report = ScoreReport {
        pair: [&dataset.class_names[a], &dataset.class_names[b]],
        scores: &selection.scores,
        threshold: selection.threshold,
        selected: &selection.selected,
        config: &cfg,
    };
    write(out, &pretty(&report)?)?;
    let mut csv = String::from("band_low,band_high,center,score,selected\n");
    for (i, s) in selection.scores.iter().enumerate() {
        let center = (s.band.0 + s.band.1) / 2.0;
        let chosen = u8::from(selection.selected.contains(&i));
        let _ = writeln!(csv, "{},{},{center},{},{chosen}", s.band.0, s.band.1, s.f);
    }
    write(&out.with_extension("csv"), &csv)
}

fn train(dataset: &Path, config: Option<&Path>, model: &Path, classes: Option<&str>, seed: Option<u64>) -> Result<()> {
    let cfg = pipeline_config(config, seed)?;
    let dataset = load(dataset)?;
    let pair = classes.map(|c| parse_pair(&dataset, c)).transpose()?;
    let p = dataset.n_classes();
    if pair.is_none() && p < 3 {
        bail!("multiclass training needs at least 3 classes, dataset has {p}; pass --classes a,b for a binary model");
    }
    let bank = cfg.bank(dataset.sample_rate)?;
    let moments = BandMoments::from_dataset(&dataset, &bank)?;
    let meta = ModelMeta::of(&dataset, &bank);
    let all: Vec<usize> = (0..dataset.trials.len()).collect();
    let bundle = match pair {
        Some(classes) => ModelBundle::Binary {
            model: PairModel::fit(&moments, &meta, classes, &all, &cfg, cfg.seed)?,
            config: cfg,
        },
        None => {
            let code = ecoc::exhaustive_code(p)?;
            ModelBundle::Multiclass {
                model: ecoc::fit_ecoc_moments(&moments, &meta, &all, &code, &cfg, cfg.seed)?,
                config: cfg,
            }
        }
    };
    ecoc::save_bundle(&bundle, model)?;
    Ok(())
}

fn evaluate(dataset: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = pipeline_config(config, seed)?;
    let subject = dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let dataset = load(dataset)?;
    let report = eval::evaluate(&dataset, &cfg)?;
    eval::write_report(&report, &subject, out)?;
    Ok(())
}

fn predict(model: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let bundle = ecoc::load_bundle(model).with_context(|| format!("loading model {}", model.display()))?;
    let dataset = load(dataset)?;
    let predictions = bundle.predict_trials(&dataset.trials)?;
    let names = &bundle.meta().class_names;
    let mut csv = String::from("trial,predicted_index,predicted_name\n");
    for (t, &c) in predictions.iter().enumerate() {
        let _ = writeln!(csv, "{t},{c},{}", names[c]);
    }
    write(out, &csv)
}
