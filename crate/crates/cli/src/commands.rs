use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use regimelab::adaptloop::{
    labeled_examples, reward_stage, rl_stage, run_deployment, run_frozen_baseline, sft_stage, DeploymentConfig,
    DeploymentSummary, FeedbackStream, TrainingPhaseConfig,
};
use regimelab::dataset::{
    build_examples, make_preference_pairs, read_examples, read_preferences, split_dataset, write_examples,
    write_preferences, Example, LabelCounts, PreferenceRecord,
};
use regimelab::featurize::{compute_indicators, write_indicator_csv};
use regimelab::fsutil::{write_atomic, write_bytes_atomic};
use regimelab::igtools::{ig_report, EmbeddingSet, IgTask, PipelineConfig};
use regimelab::market_sim::{inject_regime_shift, returns_to_ohlcv_with, PriceSeries, RegimePath, RegimeSchedule};
use regimelab::metrics::MetricsReport;
use regimelab::models::{load_policy, load_reward_model, save_policy, save_reward_model, FeatureSpec, PreferenceSample};
use regimelab::rng::derive_seed;
use regimelab::trainer::save_metrics_csv;
use regimelab::Error;

use crate::config::RunConfig;
use crate::Failure;

// Sub-stream indices under the root seed, one per consumer.
const SEED_SIM: u64 = 0;
const SEED_OHLCV: u64 = 1;
const SEED_EXAMPLES: u64 = 2;
const SEED_SPLIT: u64 = 3;
const SEED_PAIRS: u64 = 4;
const SEED_TRAIN: u64 = 5;
const SEED_DEPLOY: u64 = 6;
const SEED_IG: u64 = 7;

type CmdResult = Result<(), Failure>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: u32,
    seed: u64,
    config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec_sha256: Option<String>,
    outputs: Vec<OutputEntry>,
}

/// Hash of the effective configuration, ignoring where outputs go.
fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
}

fn write_manifest(cfg: &RunConfig, command: &str, spec_hash: Option<String>, files: &[&str]) -> CmdResult {
    let outputs = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(cfg.out.join(f)).map_err(Error::from)?;
            Ok(OutputEntry { file: f.to_string(), sha256: sha256_hex(&bytes) })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let m = Manifest {
        command,
        version: cfg.version,
        seed: cfg.seed,
        config_sha256: config_hash(cfg),
        spec_sha256: spec_hash,
        outputs,
    };
    write_json(&cfg.out.join(format!("{command}.manifest.json")), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    Ok(write_bytes_atomic(path, &bytes)?)
}

/// Fails with a data error naming the command that produces `file`.
fn require(cfg: &RunConfig, file: &str, producer: &str) -> Result<PathBuf, Failure> {
    let p = cfg.out.join(file);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Failure::data(format!("missing {}; run `regimelab {producer}` first", p.display())))
    }
}

const PRICES: &str = "prices.csv";
const INDICATORS: &str = "indicators.csv";
const REGIMES: &str = "regimes.csv";

pub fn simulate(cfg: &RunConfig) -> CmdResult {
    let sim_cfg = &cfg.simulate;
    let schedule = match &sim_cfg.shift {
        Some(s) => inject_regime_shift(&sim_cfg.spec, s.at, s.params.clone())?,
        None => RegimeSchedule::constant(sim_cfg.spec.clone()),
    };
    let sim = schedule.simulate(sim_cfg.horizon, derive_seed(cfg.seed, SEED_SIM))?;
    let series = returns_to_ohlcv_with(&sim.returns, sim_cfg.init_price, derive_seed(cfg.seed, SEED_OHLCV), &sim_cfg.ohlcv)?;
    let indicators = compute_indicators(&series, &sim_cfg.indicators)?;

    write_atomic(&cfg.out.join(PRICES), |w| Ok(series.write_csv(w)?))?;
    write_atomic(&cfg.out.join(INDICATORS), |w| Ok(write_indicator_csv(&indicators, w)?))?;
    write_atomic(&cfg.out.join(REGIMES), |w| {
        writeln!(w, "day,regime")?;
        for (t, s) in sim.path.states.iter().enumerate() {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    })?;
    write_manifest(cfg, "simulate", Some(schedule.content_hash()), &[PRICES, INDICATORS, REGIMES])?;
    println!("simulated {} days into {}", series.len(), cfg.out.display());
    Ok(())
}

fn read_regimes(path: &Path) -> Result<RegimePath, Failure> {
    let file = std::fs::File::open(path).map_err(Error::from)?;
    let mut states = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let state = line
            .split(',')
            .nth(1)
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Failure::data(format!("{}:{}: malformed regime row", path.display(), i + 1)))?;
        states.push(state);
    }
    Ok(RegimePath { states })
}

#[derive(Serialize)]
struct DatasetStats {
    examples: usize,
    rise: usize,
    fall: usize,
    neutral: usize,
    train: usize,
    test: usize,
    eval: usize,
}

pub fn build_dataset(cfg: &RunConfig) -> CmdResult {
    let prices = require(cfg, PRICES, "simulate")?;
    let regimes = read_regimes(&require(cfg, REGIMES, "simulate")?)?;
    let file = std::fs::File::open(&prices).map_err(Error::from)?;
    let series = PriceSeries::read_csv(BufReader::new(file), &prices)?;
    let indicators = compute_indicators(&series, &cfg.simulate.indicators)?;
    let examples = build_examples(
        &series,
        &indicators,
        Some(&regimes),
        &cfg.dataset.build,
        derive_seed(cfg.seed, SEED_EXAMPLES),
    )?;
    let split = split_dataset(&examples, cfg.dataset.split, derive_seed(cfg.seed, SEED_SPLIT), cfg.dataset.shuffle)?;
    let pairs: Vec<PreferenceRecord> =
        make_preference_pairs(&split.train, derive_seed(cfg.seed, SEED_PAIRS)).iter().map(|p| p.record()).collect();

    write_examples(&cfg.out.join("examples.jsonl"), &examples)?;
    write_examples(&cfg.out.join("train.jsonl"), &split.train)?;
    write_examples(&cfg.out.join("test.jsonl"), &split.test)?;
    write_examples(&cfg.out.join("eval.jsonl"), &split.eval)?;
    write_preferences(&cfg.out.join("preferences.jsonl"), &pairs)?;

    let counts = LabelCounts::of(&examples);
    let stats = DatasetStats {
        examples: examples.len(),
        rise: counts.rise,
        fall: counts.fall,
        neutral: counts.neutral,
        train: split.train.len(),
        test: split.test.len(),
        eval: split.eval.len(),
    };
    write_json(&cfg.out.join("dataset_stats.json"), &stats)?;
    write_manifest(
        cfg,
        "build-dataset",
        None,
        &["examples.jsonl", "train.jsonl", "test.jsonl", "eval.jsonl", "preferences.jsonl", "dataset_stats.json"],
    )?;
    println!("examples    {}", stats.examples);
    println!("  rise      {}", stats.rise);
    println!("  fall      {}", stats.fall);
    println!("  neutral   {}", stats.neutral);
    println!("split       train {} / test {} / eval {}", stats.train, stats.test, stats.eval);
    println!("preferences {}", pairs.len());
    Ok(())
}

fn phase(cfg: &RunConfig) -> TrainingPhaseConfig {
    TrainingPhaseConfig { seed: derive_seed(cfg.seed, SEED_TRAIN), ..cfg.train.clone() }
}

fn load_split(cfg: &RunConfig, file: &str) -> Result<Vec<Example>, Failure> {
    let examples = read_examples(&require(cfg, file, "build-dataset")?)?;
    if examples.is_empty() {
        return Err(Failure::data(format!("{file} holds no examples")));
    }
    Ok(examples)
}

fn training_data(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<regimelab::models::Labeled>), Failure> {
    let train = load_split(cfg, "train.jsonl")?;
    let data = labeled_examples(&train, &cfg.features)?;
    Ok((train, data))
}

pub fn train_sft(cfg: &RunConfig) -> CmdResult {
    let (_, data) = training_data(cfg)?;
    let (sft, curve) = sft_stage(&phase(cfg), &data)?;
    save_policy(&cfg.out.join("sft.ckpt"), &sft)?;
    save_metrics_csv(&cfg.out.join("sft_metrics.csv"), &curve)?;
    write_manifest(cfg, "train-sft", None, &["sft.ckpt", "sft_metrics.csv"])?;
    report_curve("sft", &curve);
    Ok(())
}

fn preference_data(cfg: &RunConfig, train: &[Example], spec: &FeatureSpec) -> Result<Vec<PreferenceSample>, Failure> {
    let records = read_preferences(&require(cfg, "preferences.jsonl", "build-dataset")?)?;
    let by_id: HashMap<&str, &Example> = train.iter().map(|e| (e.id.as_str(), e)).collect();
    records
        .iter()
        .map(|r| {
            let ex = by_id
                .get(r.prompt_id.as_str())
                .ok_or_else(|| Failure::data(format!("preference prompt {} is not in the training split", r.prompt_id)))?;
            Ok(PreferenceSample { features: spec.encode(ex)?, chosen: r.chosen, rejected: r.rejected })
        })
        .collect()
}

pub fn train_rm(cfg: &RunConfig) -> CmdResult {
    let sft_path = require(cfg, "sft.ckpt", "train --stage sft")?;
    let (train, _) = training_data(cfg)?;
    let sft = load_policy(&sft_path, Some(cfg.features.dim()))?;
    let prefs = preference_data(cfg, &train, &cfg.features)?;
    let (rm, curve) = reward_stage(&phase(cfg), &sft, &prefs)?;
    save_reward_model(&cfg.out.join("rm.ckpt"), &rm)?;
    save_metrics_csv(&cfg.out.join("rm_metrics.csv"), &curve)?;
    write_manifest(cfg, "train-rm", None, &["rm.ckpt", "rm_metrics.csv"])?;
    report_curve("rm", &curve);
    Ok(())
}

pub fn train_rlmf(cfg: &RunConfig) -> CmdResult {
    let sft_path = require(cfg, "sft.ckpt", "train --stage sft")?;
    let rm_path = require(cfg, "rm.ckpt", "train --stage rm")?;
    let (_, data) = training_data(cfg)?;
    let dim = cfg.features.dim();
    let sft = load_policy(&sft_path, Some(dim))?;
    let rm = load_reward_model(&rm_path, Some(dim))?;
    let (teacher, curve) = rl_stage(&phase(cfg), &sft, &rm, &data)?;
    save_policy(&cfg.out.join("rlmf.ckpt"), &teacher)?;
    save_metrics_csv(&cfg.out.join("rlmf_metrics.csv"), &curve)?;
    write_manifest(cfg, "train-rlmf", None, &["rlmf.ckpt", "rlmf_metrics.csv"])?;
    report_curve("rlmf", &curve);
    Ok(())
}

fn report_curve(stage: &str, curve: &[regimelab::trainer::MetricsRow]) {
    if let Some(last) = curve.last() {
        let acc = last.acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let loss = last.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        println!("{stage}: {} rows, final loss {loss}, accuracy {acc}", curve.len());
    } else {
        println!("{stage}: skipped");
    }
}

pub fn deploy(cfg: &RunConfig) -> CmdResult {
    let teacher_path = require(cfg, "rlmf.ckpt", "train --stage rlmf")?;
    let rm_path = require(cfg, "rm.ckpt", "train --stage rm")?;
    let dim = cfg.features.dim();
    let teacher = load_policy(&teacher_path, Some(dim))?;
    let rm = load_reward_model(&rm_path, Some(dim))?;
    let examples = load_split(cfg, cfg.deploy.split.file())?;
    let data = labeled_examples(&examples, &cfg.features)?;
    let adapt = DeploymentConfig { seed: derive_seed(cfg.seed, SEED_DEPLOY), ..cfg.deploy.adapt.clone() };

    let adaptive = run_deployment(&teacher, &rm, &mut FeedbackStream::from_labeled(data.clone()), &adapt)?;
    let frozen = run_frozen_baseline(&teacher, &mut FeedbackStream::from_labeled(data), adapt.window)?;
    write_atomic(&cfg.out.join("deploy_adaptive.csv"), |w| adaptive.write_csv(w))?;
    write_atomic(&cfg.out.join("deploy_frozen.csv"), |w| frozen.write_csv(w))?;
    let summary = DeploymentSummary::new(&adaptive, Some(&frozen));
    write_json(&cfg.out.join("deploy_summary.json"), &summary)?;
    write_manifest(cfg, "deploy", None, &["deploy_adaptive.csv", "deploy_frozen.csv", "deploy_summary.json"])?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
    println!(
        "deployed {} steps, {} swaps: adaptive {} frozen {} delta {}",
        summary.steps,
        summary.swaps.len(),
        fmt(summary.adaptive_accuracy),
        fmt(summary.frozen_accuracy),
        fmt(summary.accuracy_delta)
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let ckpt = cfg.eval.checkpoint.checkpoint();
    let producer = match cfg.eval.checkpoint {
        crate::config::PolicyStage::Sft => "train --stage sft",
        crate::config::PolicyStage::Rlmf => "train --stage rlmf",
    };
    let policy = load_policy(&require(cfg, ckpt, producer)?, Some(cfg.features.dim()))?;
    let examples = load_split(cfg, cfg.eval.split.file())?;
    let data = labeled_examples(&examples, &cfg.features)?;
    let preds = data.iter().map(|s| policy.predict(&s.features)).collect::<Result<Vec<_>, _>>()?;
    let truths: Vec<_> = data.iter().map(|s| s.label).collect();
    let report = MetricsReport::from_labels(&preds, &truths)?;
    let stem = ckpt.trim_end_matches(".ckpt");
    let name = format!("eval_{stem}_{}.json", cfg.eval.split.as_str());
    write_json(&cfg.out.join(&name), &report)?;
    write_manifest(cfg, &format!("eval-{stem}-{}", cfg.eval.split.as_str()), None, &[&name])?;
    println!(
        "{stem} on {}: acc {:.4} f1_weighted {:.4} f1_macro {:.4} mcc {:.4}",
        cfg.eval.split.as_str(),
        report.acc,
        report.f1_weighted,
        report.f1_macro,
        report.mcc
    );
    Ok(())
}

fn task_name(t: IgTask) -> &'static str {
    match t {
        IgTask::Movement => "movement",
        IgTask::Categorical => "categorical",
    }
}

pub fn ig(cfg: &RunConfig) -> CmdResult {
    if cfg.ig.inputs.is_empty() {
        return Err(Failure::config("ig needs at least one input file".into()));
    }
    let pipeline = PipelineConfig {
        tsne: regimelab::igtools::TsneConfig { seed: derive_seed(cfg.seed, SEED_IG), ..cfg.ig.pipeline.tsne.clone() },
        ..cfg.ig.pipeline.clone()
    };
    let mut written = Vec::new();
    for input in &cfg.ig.inputs {
        let set = EmbeddingSet::load(input)?;
        for &task in &cfg.ig.tasks {
            let report = ig_report(&set, task, &pipeline)?;
            let name = format!("ig_{}_{}.json", set.model, task_name(task));
            write_json(&cfg.out.join(&name), &report)?;
            let score = match task {
                IgTask::Categorical => report.scores.information_gain,
                IgTask::Movement => report.scores.variance_reduction,
            };
            println!(
                "{} {}: {} clusters, {:.1}% outliers, score {}",
                set.model,
                task_name(task),
                report.clusters,
                100.0 * report.outlier_fraction,
                score.map_or_else(|| "-".into(), |s| format!("{s:.4}"))
            );
            written.push(name);
        }
    }
    let names: Vec<&str> = written.iter().map(String::as_str).collect();
    write_manifest(cfg, "ig", None, &names)
}
