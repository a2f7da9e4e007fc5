//! Supervised movement examples and preference pairs: labeling, prompt
//! assembly, headline filtering, splitting and JSONL serialization.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::featurize::{
    build_context_window, ContextRow, ContextWindow, IndicatorRow, CONTEXT_COLUMNS,
    DEFAULT_CONTEXT_DEPTH,
};
use crate::market_sim::{PriceSeries, RegimePath};
use crate::rng;

/// Movement label. Policies only ever emit the first three; `Surrender`
/// exists so reward models can score it as a rejected alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Rise,
    Fall,
    Neutral,
    Surrender,
}

impl Label {
    /// Policy output vocabulary, in head order.
    pub const POLICY: [Label; 3] = [Label::Rise, Label::Fall, Label::Neutral];
    /// Reward-model vocabulary, in one-hot order.
    pub const ALL: [Label; 4] = [Label::Rise, Label::Fall, Label::Neutral, Label::Surrender];

    pub fn index(self) -> usize {
        match self {
            Label::Rise => 0,
            Label::Fall => 1,
            Label::Neutral => 2,
            Label::Surrender => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// Index into the 3-way policy head.
    pub fn policy_index(self) -> Result<usize> {
        match self {
            Label::Surrender => Err(Error::LabelOutsideVocab(self.to_string())),
            other => Ok(other.index()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Rise => "Rise",
            Label::Fall => "Fall",
            Label::Neutral => "Neutral",
            Label::Surrender => "Surrender",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown label {s:?}")))
    }
}

pub const NEUTRAL_BAND: f64 = 0.5;

/// Fall below -0.5%, Rise above +0.5%, Neutral on the closed band between.
pub fn assign_label(pct: f64) -> Result<Label> {
    assign_label_with(pct, NEUTRAL_BAND)
}

pub fn assign_label_with(pct: f64, band: f64) -> Result<Label> {
    if pct.is_nan() {
        return Err(Error::InvalidInput("cannot label a NaN percentage change".into()));
    }
    Ok(if pct < -band {
        Label::Fall
    } else if pct > band {
        Label::Rise
    } else {
        Label::Neutral
    })
}

const INSTRUCTIONS: &str = include_str!("../templates/instructions.txt");

/// Placeholder substituted with the prediction date.
pub const DATE_PLACEHOLDER: &str = "DATE";

/// The shipped instruction variants, each containing [`DATE_PLACEHOLDER`].
pub fn instruction_templates() -> Vec<&'static str> {
    INSTRUCTIONS.lines().filter(|l| !l.trim().is_empty()).collect()
}

fn context_line(row: &ContextRow) -> String {
    let mut parts = vec![format!("{}: {}", CONTEXT_COLUMNS[0], row.date.format("%Y-%m-%d"))];
    for (name, value) in CONTEXT_COLUMNS[1..].iter().zip(row.numeric_columns()) {
        if let Some(v) = value {
            parts.push(format!("{name}: {v:.6}"));
        }
    }
    parts.join(", ")
}

/// Instruction, then one line per context day, then the news text.
pub fn assemble_prompt(
    question: &str,
    date: NaiveDate,
    context: &ContextWindow,
    news: Option<&str>,
) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::InvalidInput("question must be non-empty".into()));
    }
    let mut lines = vec![question.replace(DATE_PLACEHOLDER, &date.format("%Y-%m-%d").to_string())];
    lines.extend(context.rows.iter().map(context_line));
    if let Some(n) = news.filter(|n| !n.trim().is_empty()) {
        lines.push(n.to_string());
    }
    Ok(lines.join("\n"))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("zero-norm vector in similarity".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub const SIMILARITY_THRESHOLD: f64 = 0.2;

/// Indices of headlines whose best cosine similarity to any reference
/// headline reaches `threshold`.
pub fn filter_headlines_by_similarity(
    headlines: &[Vec<f64>],
    references: &[Vec<f64>],
    threshold: f64,
) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, h) in headlines.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for r in references {
            best = best.max(cosine_similarity(h, r)?);
        }
        if best >= threshold {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Document frequencies of a tokenized corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_documents<D: AsRef<[String]>>(docs: &[D]) -> Self {
        let mut doc_freq = HashMap::new();
        for d in docs {
            let mut seen: Vec<&String> = d.as_ref().iter().collect();
            seen.sort();
            seen.dedup();
            for tok in seen {
                *doc_freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        Self {
            num_docs: docs.len(),
            doc_freq,
        }
    }

    /// `ln(N / df)`; tokens missing from the corpus count as `df = 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(1).max(1);
        (self.num_docs as f64 / df as f64).ln()
    }
}

pub const TFIDF_THRESHOLD: f64 = 0.2;
pub const MAX_PROMPT_WORDS: usize = 3000;

/// For documents longer than `max_words`: drop tokens whose tf-idf
/// (`tf = count / len`, `idf = ln(N / df)`) is below `threshold`, then keep
/// the first `max_words`. Shorter documents pass through untouched.
pub fn prune_low_tfidf(
    document: &[String],
    stats: &CorpusStats,
    threshold: f64,
    max_words: usize,
) -> Result<Vec<String>> {
    if stats.num_docs == 0 {
        return Err(Error::InvalidInput("tf-idf needs a non-empty corpus".into()));
    }
    if document.len() <= max_words {
        return Ok(document.to_vec());
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in document {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let len = document.len() as f64;
    Ok(document
        .iter()
        .filter(|tok| counts[tok.as_str()] as f64 / len * stats.idf(tok) >= threshold)
        .take(max_words)
        .cloned()
        .collect())
}

/// One supervised query.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub date: NaiveDate,
    pub question: String,
    pub context: ContextWindow,
    pub news: Option<String>,
    pub news_embedding: Option<Vec<f64>>,
    pub response: Label,
    pub pct_change: f64,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::InvalidInput(format!("{}: empty question", self.id)));
        }
        if self.context.rows.is_empty() {
            return Err(Error::InvalidInput(format!("{}: empty context", self.id)));
        }
        if self.response == Label::Surrender {
            return Err(Error::LabelOutsideVocab(format!("{}: Surrender", self.id)));
        }
        let expected = assign_label(self.pct_change)?;
        if expected != self.response {
            return Err(Error::InvalidInput(format!(
                "{}: response {} disagrees with pct_change {} ({expected})",
                self.id, self.response, self.pct_change
            )));
        }
        Ok(())
    }

    pub fn prompt(&self) -> Result<String> {
        assemble_prompt(&self.question, self.date, &self.context, self.news.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferencePair<'a> {
    pub prompt: &'a Example,
    pub chosen: Label,
    pub rejected: Label,
}

/// Serialized form of a preference pair; the prompt is referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt_id: String,
    pub chosen: Label,
    pub rejected: Label,
}

impl PreferencePair<'_> {
    pub fn record(&self) -> PreferenceRecord {
        PreferenceRecord {
            prompt_id: self.prompt.id.clone(),
            chosen: self.chosen,
            rejected: self.rejected,
        }
    }
}

/// Uniform draw from the four-label vocabulary minus `chosen`.
pub fn random_rejection<R: Rng>(chosen: Label, rng: &mut R) -> Label {
    let alternatives: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != chosen).collect();
    *alternatives.choose(rng).expect("three alternatives")
}

pub fn make_preference_pair(example: &Example, seed: u64) -> PreferencePair<'_> {
    let mut rng = rng::seeded(seed);
    PreferencePair {
        prompt: example,
        chosen: example.response,
        rejected: random_rejection(example.response, &mut rng),
    }
}

/// Preference pair for every example, seeded per index.
pub fn make_preference_pairs(examples: &[Example], seed: u64) -> Vec<PreferencePair<'_>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| make_preference_pair(e, rng::derive_seed(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub eval: f64,
}

impl SplitRatios {
    /// 1477 / 317 / 317 out of 2111.
    pub fn nifty() -> Self {
        Self {
            train: 1477.0 / 2111.0,
            test: 317.0 / 2111.0,
            eval: 317.0 / 2111.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.test, self.eval];
        if all.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput("split ratios must be positive".into()));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput("split ratios must sum to 1".into()));
        }
        Ok(())
    }

    /// `(train, test, eval)` sizes: test and eval are floor-rounded, the
    /// remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
        let test = floor(self.test);
        let eval = floor(self.eval);
        (n - test - eval, test, eval)
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::nifty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub eval: Vec<T>,
}

/// Contiguous train/test/eval blocks in input (chronological) order, or in
/// a seeded random order when `shuffle` is set.
pub fn split_dataset<T: Clone>(
    examples: &[T],
    ratios: SplitRatios,
    seed: u64,
    shuffle: bool,
) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    if examples.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 examples to split, got {}",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut rng::seeded(seed));
    }
    let (n_train, n_test, _) = ratios.sizes(examples.len());
    let pick = |idx: &[usize]| idx.iter().map(|i| examples[*i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..n_train + n_test]),
        eval: pick(&order[n_train + n_test..]),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub rise: usize,
    pub fall: usize,
    pub neutral: usize,
}

impl LabelCounts {
    pub fn of(examples: &[Example]) -> Self {
        let mut c = Self::default();
        for e in examples {
            match e.response {
                Label::Rise => c.rise += 1,
                Label::Fall => c.fall += 1,
                Label::Neutral => c.neutral += 1,
                Label::Surrender => {}
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.rise + self.fall + self.neutral
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    date: String,
    question: String,
    context: Vec<Vec<Value>>,
    news: Option<String>,
    news_embedding: Option<Vec<f64>>,
    response: Label,
    pct_change: f64,
}

fn number(v: Option<f64>) -> Value {
    match v {
        Some(x) => serde_json::Number::from_f64(x)
            .map(Value::Number)
            .unwrap_or(Value::Null),
        None => Value::Null,
    }
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        let context = e
            .context
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![Value::String(r.date.format("%Y-%m-%d").to_string())];
                row.extend(r.numeric_columns().into_iter().map(number));
                row
            })
            .collect();
        ExampleRecord {
            id: e.id.clone(),
            date: e.date.format("%Y-%m-%d").to_string(),
            question: e.question.clone(),
            context,
            news: e.news.clone(),
            news_embedding: e.news_embedding.clone(),
            response: e.response,
            pct_change: e.pct_change,
        }
    }
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))
}

impl TryFrom<ExampleRecord> for Example {
    type Error = String;

    fn try_from(r: ExampleRecord) -> std::result::Result<Self, String> {
        let mut rows = Vec::with_capacity(r.context.len());
        for raw in &r.context {
            if raw.len() != CONTEXT_COLUMNS.len() {
                return Err(format!(
                    "context row has {} columns, expected {}",
                    raw.len(),
                    CONTEXT_COLUMNS.len()
                ));
            }
            let date = parse_date(raw[0].as_str().ok_or("context date must be a string")?)?;
            let mut cols = [None; 15];
            for (slot, v) in cols.iter_mut().zip(&raw[1..]) {
                *slot = match v {
                    Value::Null => None,
                    Value::Number(n) => Some(n.as_f64().ok_or("non-f64 number")?),
                    other => return Err(format!("unexpected context value {other}")),
                };
            }
            rows.push(ContextRow::from_columns(date, cols).map_err(|e| e.to_string())?);
        }
        Ok(Example {
            id: r.id,
            date: parse_date(&r.date)?,
            question: r.question,
            context: ContextWindow { rows },
            news: r.news,
            news_embedding: r.news_embedding,
            response: r.response,
            pct_change: r.pct_change,
        })
    }
}

pub fn write_examples_to<W: Write>(examples: &[Example], mut w: W) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples_from<R: BufRead>(r: R, path: &Path) -> Result<Vec<Example>> {
    read_jsonl(r, path, |line| {
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Example::try_from(rec)
    })
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    crate::fsutil::write_atomic(path, |w| write_examples_to(examples, w))
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path)?;
    read_examples_from(std::io::BufReader::new(f), path)
}

pub fn write_preferences_to<W: Write>(records: &[PreferenceRecord], mut w: W) -> Result<()> {
    for p in records {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_preferences(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    crate::fsutil::write_atomic(path, |w| write_preferences_to(records, w))
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f), path, |line| {
        let rec: PreferenceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if rec.chosen == rec.rejected {
            return Err("chosen and rejected labels coincide".into());
        }
        Ok(rec)
    })
}

fn read_jsonl<R, T, F>(r: R, path: &Path, mut parse: F) -> Result<Vec<T>>
where
    R: BufRead,
    F: FnMut(&str) -> std::result::Result<T, String>,
{
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

/// Synthetic stand-in for a day's news: a regime prototype vector plus
/// isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewsChannel {
    /// Embedding dimension; 0 disables the channel.
    pub dim: usize,
    pub signal: f64,
    pub noise: f64,
}

impl Default for NewsChannel {
    fn default() -> Self {
        Self {
            dim: 8,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub depth: usize,
    pub news: NewsChannel,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            depth: DEFAULT_CONTEXT_DEPTH,
            news: NewsChannel::default(),
        }
    }
}

/// One example per day `t >= 2`: the context ends at `t - 1`, the label is
/// the close-to-close change on `t`, and the news embedding reflects the
/// regime on `t` when a path is supplied.
pub fn build_examples(
    series: &PriceSeries,
    indicators: &[IndicatorRow],
    regimes: Option<&RegimePath>,
    cfg: &BuildConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    if let Some(p) = regimes {
        if p.len() != series.len() {
            return Err(Error::DimensionMismatch {
                expected: series.len(),
                got: p.len(),
            });
        }
    }
    let templates = instruction_templates();
    let mut question_rng = rng::seeded(rng::derive_seed(seed, 0));
    let mut news_rng = rng::seeded(rng::derive_seed(seed, 2));
    let num_regimes = regimes
        .map(|p| p.states.iter().max().map_or(1, |m| m + 1))
        .unwrap_or(0);
    let mut proto_rng = rng::seeded(rng::derive_seed(seed, 1));
    let prototypes: Vec<Vec<f64>> = (0..num_regimes)
        .map(|_| {
            (0..cfg.news.dim)
                .map(|_| proto_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut out = Vec::new();
    for t in 2..series.len() {
        let context = build_context_window(series, indicators, t - 1, cfg.depth)?;
        let pct = indicators[t]
            .pct_change
            .ok_or_else(|| Error::InvalidInput(format!("no percentage change on day {t}")))?;
        let question = templates[question_rng.random_range(0..templates.len())].to_string();
        let news_embedding = match regimes {
            Some(p) if cfg.news.dim > 0 => {
                let proto = &prototypes[p.states[t]];
                Some(
                    proto
                        .iter()
                        .map(|m| {
                            cfg.news.signal * m
                                + cfg.news.noise * news_rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        out.push(Example {
            id: format!("ex-{t:05}"),
            date: series.dates[t],
            question,
            context,
            news: None,
            news_embedding,
            response: assign_label(pct)?,
            pct_change: pct,
        });
    }
    Ok(out)
}
