//! Markov regime-switching return process and OHLCV synthesis.
//!
//! Returns follow the switching AR(1) recurrence
//!
//! ```text
//! o_t = mu[s_t] + phi[s_t] * o_{t-1} + sigma[s_t] * eps_t,   eps_t iid (0, 1)
//! ```
//!
//! where `s_t` is a Markov chain over `k` regimes. Returns are in percent.
//! Shocks are drawn from their own seeded stream, independently of the
//! regime parameters, so two simulations that share a seed see the same
//! shock sequence even if their parameters differ.

use std::io::{BufRead, Write};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Per-regime parameters of the switching AR(1) process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeParams {
    pub mu: f64,
    pub phi: f64,
    pub sigma: f64,
}

impl RegimeParams {
    pub fn new(mu: f64, phi: f64, sigma: f64) -> Self {
        Self { mu, phi, sigma }
    }

    fn validate(&self, regime: usize) -> Result<()> {
        if !(self.mu.is_finite() && self.phi.is_finite() && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "regime {regime}: parameters must be finite"
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "regime {regime}: sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if self.phi.abs() >= 1.0 {
            return Err(Error::InvalidSpec(format!(
                "regime {regime}: |phi| must be < 1 for stationarity, got {}",
                self.phi
            )));
        }
        Ok(())
    }
}

/// Distribution of the unit shocks `eps_t`. Both variants have mean 0 and
/// variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockDistribution {
    #[default]
    Normal,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    Uniform,
}

impl ShockDistribution {
    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            ShockDistribution::Normal => rng.sample(StandardNormal),
            ShockDistribution::Uniform => {
                let half_width = 3f64.sqrt();
                rng.random_range(-half_width..half_width)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegimeSpec {
    params: Vec<RegimeParams>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    #[serde(default)]
    shock: ShockDistribution,
}

/// Generative parameters of the regime-switching process. Construction
/// validates every invariant; there is no silent renormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegimeSpec")]
pub struct RegimeSpec {
    params: Vec<RegimeParams>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    shock: ShockDistribution,
}

impl TryFrom<RawRegimeSpec> for RegimeSpec {
    type Error = Error;

    fn try_from(raw: RawRegimeSpec) -> Result<Self> {
        Ok(RegimeSpec::new(raw.params, raw.transition, raw.initial)?.with_shock(raw.shock))
    }
}

fn check_distribution(what: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidSpec(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidSpec(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

impl RegimeSpec {
    pub fn new(
        params: Vec<RegimeParams>,
        transition: Vec<Vec<f64>>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let k = params.len();
        if k == 0 {
            return Err(Error::InvalidSpec("at least one regime required".into()));
        }
        for (s, p) in params.iter().enumerate() {
            p.validate(s)?;
        }
        if transition.len() != k {
            return Err(Error::InvalidSpec(format!(
                "transition matrix has {} rows for {k} regimes",
                transition.len()
            )));
        }
        for (s, row) in transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidSpec(format!(
                    "transition row {s} has {} entries for {k} regimes",
                    row.len()
                )));
            }
            check_distribution(&format!("transition row {s}"), row)?;
        }
        if initial.len() != k {
            return Err(Error::InvalidSpec(format!(
                "initial distribution has {} entries for {k} regimes",
                initial.len()
            )));
        }
        check_distribution("initial distribution", &initial)?;
        Ok(Self {
            params,
            transition,
            initial,
            shock: ShockDistribution::Normal,
        })
    }

    /// A single-regime spec.
    pub fn single(params: RegimeParams) -> Result<Self> {
        Self::new(vec![params], vec![vec![1.0]], vec![1.0])
    }

    pub fn with_shock(mut self, shock: ShockDistribution) -> Self {
        self.shock = shock;
        self
    }

    /// Same chain, new per-regime parameters.
    pub fn with_params(&self, params: Vec<RegimeParams>) -> Result<Self> {
        if params.len() != self.num_regimes() {
            return Err(Error::InvalidSpec(format!(
                "expected {} regime parameter sets, got {}",
                self.num_regimes(),
                params.len()
            )));
        }
        Ok(Self::new(params, self.transition.clone(), self.initial.clone())?.with_shock(self.shock))
    }

    pub fn num_regimes(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[RegimeParams] {
        &self.params
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn shock(&self) -> ShockDistribution {
        self.shock
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// A realized sequence of regime indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimePath {
    pub states: Vec<usize>,
}

impl RegimePath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check_against(&self, k: usize) -> Result<()> {
        if let Some(bad) = self.states.iter().find(|s| **s >= k) {
            return Err(Error::InvalidInput(format!(
                "regime path contains state {bad} but spec has {k} regimes"
            )));
        }
        Ok(())
    }
}

pub fn sample_regime_path(spec: &RegimeSpec, horizon: usize, seed: u64) -> Result<RegimePath> {
    RegimeSchedule::constant(spec.clone()).sample_path(horizon, seed)
}

/// Draws `horizon` unit shocks from `dist`.
pub fn draw_shocks(dist: ShockDistribution, horizon: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    (0..horizon).map(|_| dist.draw(&mut rng)).collect()
}

/// Runs the recurrence over explicit shocks. `previous` is `o_{-1}`.
pub fn returns_from_shocks(
    spec: &RegimeSpec,
    path: &RegimePath,
    shocks: &[f64],
    previous: f64,
) -> Result<Vec<f64>> {
    path.check_against(spec.num_regimes())?;
    if shocks.len() != path.len() {
        return Err(Error::DimensionMismatch {
            expected: path.len(),
            got: shocks.len(),
        });
    }
    let mut prev = previous;
    Ok(path
        .states
        .iter()
        .zip(shocks)
        .map(|(&s, &eps)| {
            let p = &spec.params[s];
            prev = p.mu + p.phi * prev + p.sigma * eps;
            prev
        })
        .collect())
}

/// Simulates returns along `path` with `o_{-1} = 0`.
pub fn simulate_returns(spec: &RegimeSpec, path: &RegimePath, seed: u64) -> Result<Vec<f64>> {
    simulate_returns_from(spec, path, seed, 0.0)
}

/// Simulates returns along `path` starting from an explicit `o_{-1}`.
pub fn simulate_returns_from(
    spec: &RegimeSpec,
    path: &RegimePath,
    seed: u64,
    previous: f64,
) -> Result<Vec<f64>> {
    let shocks = draw_shocks(spec.shock, path.len(), seed);
    returns_from_shocks(spec, path, &shocks, previous)
}

/// Piecewise-constant sequence of specs: segment `i` is active on
/// `[start_i, start_{i+1})`. All segments share the regime count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSchedule {
    segments: Vec<(usize, RegimeSpec)>,
}

/// Output of a full scheduled simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub path: RegimePath,
    pub shocks: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RegimeSchedule {
    pub fn constant(spec: RegimeSpec) -> Self {
        Self {
            segments: vec![(0, spec)],
        }
    }

    /// Appends a segment starting at `start`, which must follow every
    /// existing start.
    pub fn push(&mut self, start: usize, spec: RegimeSpec) -> Result<()> {
        let (last_start, last) = self.segments.last().expect("schedule is never empty");
        if start <= *last_start {
            return Err(Error::InvalidSpec(format!(
                "segment start {start} must exceed previous start {last_start}"
            )));
        }
        if spec.num_regimes() != last.num_regimes() {
            return Err(Error::InvalidSpec(
                "all schedule segments must have the same number of regimes".into(),
            ));
        }
        self.segments.push((start, spec));
        Ok(())
    }

    pub fn segments(&self) -> &[(usize, RegimeSpec)] {
        &self.segments
    }

    pub fn spec_at(&self, step: usize) -> &RegimeSpec {
        let idx = self.segments.partition_point(|(start, _)| *start <= step);
        &self.segments[idx - 1].1
    }

    fn check_horizon(&self, horizon: usize) -> Result<()> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        let last_start = self.segments.last().map(|(s, _)| *s).unwrap_or(0);
        if last_start >= horizon {
            return Err(Error::InvalidInput(format!(
                "segment starting at {last_start} lies beyond horizon {horizon}"
            )));
        }
        Ok(())
    }

    /// `s_0 ~ initial` of the first segment; `s_{t+1} ~ transition[s_t]` of
    /// the segment active at `t + 1`.
    pub fn sample_path(&self, horizon: usize, seed: u64) -> Result<RegimePath> {
        self.check_horizon(horizon)?;
        let mut rng = rng::seeded(seed);
        let mut states = Vec::with_capacity(horizon);
        let mut s = sample_categorical(self.segments[0].1.initial(), &mut rng);
        states.push(s);
        for t in 1..horizon {
            s = sample_categorical(&self.spec_at(t).transition[s], &mut rng);
            states.push(s);
        }
        Ok(RegimePath { states })
    }

    /// Returns along `path` with each step using the parameters of its
    /// active segment. Shocks come from the first segment's distribution.
    pub fn returns_from_shocks(
        &self,
        path: &RegimePath,
        shocks: &[f64],
        previous: f64,
    ) -> Result<Vec<f64>> {
        path.check_against(self.segments[0].1.num_regimes())?;
        if shocks.len() != path.len() {
            return Err(Error::DimensionMismatch {
                expected: path.len(),
                got: shocks.len(),
            });
        }
        let mut prev = previous;
        let mut out = Vec::with_capacity(path.len());
        for (t, (&s, &eps)) in path.states.iter().zip(shocks).enumerate() {
            let p = &self.spec_at(t).params[s];
            prev = p.mu + p.phi * prev + p.sigma * eps;
            out.push(prev);
        }
        Ok(out)
    }

    /// Full simulation: path from `derive_seed(seed, 0)`, shocks from
    /// `derive_seed(seed, 1)`, `o_{-1} = 0`.
    pub fn simulate(&self, horizon: usize, seed: u64) -> Result<Simulation> {
        let path = self.sample_path(horizon, rng::derive_seed(seed, 0))?;
        let shocks = draw_shocks(self.segments[0].1.shock, horizon, rng::derive_seed(seed, 1));
        let returns = self.returns_from_shocks(&path, &shocks, 0.0)?;
        Ok(Simulation {
            path,
            shocks,
            returns,
        })
    }

    pub fn content_hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("schedule serializes"))
    }
}

/// Schedule that switches `spec` to `new_params` from `at_step` onwards.
pub fn inject_regime_shift(
    spec: &RegimeSpec,
    at_step: usize,
    new_params: Vec<RegimeParams>,
) -> Result<RegimeSchedule> {
    if at_step == 0 {
        return Err(Error::InvalidInput(
            "a shift at step 0 is a plain spec; use RegimeSchedule::constant".into(),
        ));
    }
    let shifted = spec.with_params(new_params)?;
    let mut schedule = RegimeSchedule::constant(spec.clone());
    schedule.push(at_step, shifted)?;
    Ok(schedule)
}

/// Knobs for turning returns into daily bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhlcvConfig {
    /// Scale (in percent) of the half-normal excursion of high/low beyond
    /// the open/close body.
    pub intraday_sigma: f64,
    pub base_volume: f64,
    pub volume_log_sigma: f64,
    pub start_date: NaiveDate,
}

impl Default for OhlcvConfig {
    fn default() -> Self {
        Self {
            intraday_sigma: 0.5,
            base_volume: 1.0e6,
            volume_log_sigma: 0.25,
            start_date: NaiveDate::from_ymd_opt(2010, 1, 6).expect("valid date"),
        }
    }
}

/// Daily bars. `returns[t]` is the percent change of `close[t]` over the
/// previous close (the initial price for `t = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub adj_close: Vec<f64>,
    pub volume: Vec<f64>,
    pub returns: Vec<f64>,
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    let mut next = d + Days::new(1);
    while matches!(next.weekday(), Weekday::Sat | Weekday::Sun) {
        next = next + Days::new(1);
    }
    next
}

/// Successive weekdays starting at `start` (rolled forward if it is a
/// weekend).
pub fn trading_dates(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut d = start;
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d = d + Days::new(1);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(d);
        d = next_weekday(d);
    }
    out
}

pub fn returns_to_ohlcv(returns: &[f64], init_price: f64, seed: u64) -> Result<PriceSeries> {
    returns_to_ohlcv_with(returns, init_price, seed, &OhlcvConfig::default())
}

pub fn returns_to_ohlcv_with(
    returns: &[f64],
    init_price: f64,
    seed: u64,
    cfg: &OhlcvConfig,
) -> Result<PriceSeries> {
    if !(init_price > 0.0 && init_price.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "initial price must be positive, got {init_price}"
        )));
    }
    let n = returns.len();
    let mut rng = rng::seeded(seed);
    let mut series = PriceSeries {
        dates: trading_dates(cfg.start_date, n),
        open: Vec::with_capacity(n),
        high: Vec::with_capacity(n),
        low: Vec::with_capacity(n),
        close: Vec::with_capacity(n),
        adj_close: Vec::with_capacity(n),
        volume: Vec::with_capacity(n),
        returns: returns.to_vec(),
    };
    let mut prev_close = init_price;
    for (t, &r) in returns.iter().enumerate() {
        if !r.is_finite() || r <= -100.0 {
            return Err(Error::InvalidInput(format!(
                "return {r}% at step {t} would make the price non-positive"
            )));
        }
        let close = prev_close * (1.0 + r / 100.0);
        let open = prev_close;
        let up: f64 = rng.sample::<f64, _>(StandardNormal).abs() * cfg.intraday_sigma / 100.0;
        let down: f64 = rng.sample::<f64, _>(StandardNormal).abs() * cfg.intraday_sigma / 100.0;
        let vol_noise: f64 = rng.sample(StandardNormal);
        series.open.push(open);
        series.high.push(open.max(close) * (1.0 + up));
        series.low.push(open.min(close) * (1.0 - down.min(0.5)));
        series.close.push(close);
        series.adj_close.push(close);
        series
            .volume
            .push(cfg.base_volume * (cfg.volume_log_sigma * vol_noise).exp());
        prev_close = close;
    }
    Ok(series)
}

pub const PRICE_CSV_HEADER: &str = "date,open,high,low,close,adj_close,volume,pct_change";

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }

    /// Checks bar ordering, positivity, date monotonicity and field lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.close.len();
        let lens = [
            self.dates.len(),
            self.open.len(),
            self.high.len(),
            self.low.len(),
            self.adj_close.len(),
            self.volume.len(),
            self.returns.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(Error::InvalidInput("price series fields differ in length".into()));
        }
        for t in 0..n {
            let (o, h, l, c) = (self.open[t], self.high[t], self.low[t], self.close[t]);
            if !(l > 0.0 && l <= o.min(c) && o.max(c) <= h) {
                return Err(Error::InvalidInput(format!(
                    "bar {t} violates low <= min(open, close) <= max(open, close) <= high"
                )));
            }
            if self.volume[t] < 0.0 {
                return Err(Error::InvalidInput(format!("negative volume at {t}")));
            }
            if t > 0 && self.dates[t] <= self.dates[t - 1] {
                return Err(Error::InvalidInput(format!("dates not increasing at {t}")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PRICE_CSV_HEADER}")?;
        for t in 0..self.len() {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.dates[t].format("%Y-%m-%d"),
                self.open[t],
                self.high[t],
                self.low[t],
                self.close[t],
                self.adj_close[t],
                self.volume[t],
                self.returns[t]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, path: &std::path::Path) -> Result<Self> {
        let mut series = PriceSeries {
            dates: vec![],
            open: vec![],
            high: vec![],
            low: vec![],
            close: vec![],
            adj_close: vec![],
            volume: vec![],
            returns: vec![],
        };
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if i == 0 {
                if line.trim() != PRICE_CSV_HEADER {
                    return Err(parse_err(lineno, format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(parse_err(lineno, format!("expected 8 fields, got {}", fields.len())));
            }
            let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
                .map_err(|e| parse_err(lineno, format!("bad date: {e}")))?;
            let mut nums = [0.0; 7];
            for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
                *slot = raw
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("bad number {raw:?}: {e}")))?;
            }
            series.dates.push(date);
            series.open.push(nums[0]);
            series.high.push(nums[1]);
            series.low.push(nums[2]);
            series.close.push(nums[3]);
            series.adj_close.push(nums[4]);
            series.volume.push(nums[5]);
            series.returns.push(nums[6]);
        }
        Ok(series)
    }
}
