//! Technical indicators and the rolling market context shown to a policy.
//!
//! Conventions (all configurable through [`IndicatorConfig`]):
//!
//! * MACD = EMA(12) - EMA(26) of close; each EMA is seeded with the first
//!   close and uses `alpha = 2 / (n + 1)`. Absent until the slow EMA has
//!   seen `n` closes.
//! * Bollinger bands: SMA(20) basis +/- 2 population standard deviations.
//! * RSI(30): Wilder smoothing, seeded with the plain mean of the first 30
//!   gains/losses. A flat window (no gains, no losses) reads 50.
//! * CCI(30): typical price `(H + L + C) / 3`, constant 0.015, mean absolute
//!   deviation. Zero deviation reads 0.
//! * DX(30): `100 |+DI - -DI| / (+DI + -DI)` with Wilder-smoothed +DM, -DM
//!   and true range. No directional movement reads 0.
//!
//! Values inside an indicator's warm-up are `None`, never back-filled.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_sim::PriceSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub bollinger_window: usize,
    pub bollinger_k: f64,
    pub rsi_window: usize,
    pub cci_window: usize,
    pub cci_constant: f64,
    pub dx_window: usize,
    pub sma_short: usize,
    pub sma_long: usize,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            macd_fast: 12,
            macd_slow: 26,
            bollinger_window: 20,
            bollinger_k: 2.0,
            rsi_window: 30,
            cci_window: 30,
            cci_constant: 0.015,
            dx_window: 30,
            sma_short: 30,
            sma_long: 60,
        }
    }
}

pub fn pct_change(close: &[f64]) -> Result<Vec<Option<f64>>> {
    if close.len() < 2 {
        return Err(Error::InvalidInput(
            "percentage change needs at least two closes".into(),
        ));
    }
    if let Some(bad) = close.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::InvalidInput(format!("non-positive close {bad}")));
    }
    let mut out = vec![None];
    out.extend(
        close
            .windows(2)
            .map(|w| Some((w[1] - w[0]) / w[0] * 100.0)),
    );
    Ok(out)
}

fn check_window(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    Ok(())
}

/// Simple moving average; `None` for `t < n - 1`.
pub fn sma(values: &[f64], n: usize) -> Result<Vec<Option<f64>>> {
    check_window(n)?;
    Ok((0..values.len())
        .map(|t| {
            (t + 1 >= n).then(|| values[t + 1 - n..=t].iter().sum::<f64>() / n as f64)
        })
        .collect())
}

/// Exponential moving average seeded with the first value.
pub fn ema(values: &[f64], n: usize) -> Result<Vec<f64>> {
    check_window(n)?;
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(v) => *v,
        None => return Ok(out),
    };
    for v in values {
        acc = alpha * v + (1.0 - alpha) * acc;
        out.push(acc);
    }
    Ok(out)
}

pub fn macd(close: &[f64], fast: usize, slow: usize) -> Result<Vec<Option<f64>>> {
    if fast >= slow {
        return Err(Error::InvalidInput(format!(
            "MACD fast window {fast} must be shorter than slow window {slow}"
        )));
    }
    let f = ema(close, fast)?;
    let s = ema(close, slow)?;
    Ok((0..close.len())
        .map(|t| (t + 1 >= slow).then(|| f[t] - s[t]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bands {
    pub upper: f64,
    pub basis: f64,
    pub lower: f64,
}

pub fn bollinger(close: &[f64], n: usize, k: f64) -> Result<Vec<Option<Bands>>> {
    check_window(n)?;
    Ok((0..close.len())
        .map(|t| {
            (t + 1 >= n).then(|| {
                let w = &close[t + 1 - n..=t];
                let basis = w.iter().sum::<f64>() / n as f64;
                let var = w.iter().map(|x| (x - basis).powi(2)).sum::<f64>() / n as f64;
                let width = k * var.sqrt();
                Bands {
                    upper: basis + width,
                    basis,
                    lower: basis - width,
                }
            })
        })
        .collect())
}

fn rsi_from_averages(gain: f64, loss: f64) -> f64 {
    if loss == 0.0 {
        if gain == 0.0 {
            50.0
        } else {
            100.0
        }
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    }
}

/// Wilder RSI; `None` for `t < n`.
pub fn rsi(close: &[f64], n: usize) -> Result<Vec<Option<f64>>> {
    check_window(n)?;
    let mut out = vec![None; close.len()];
    if close.len() <= n {
        return Ok(out);
    }
    let diffs: Vec<f64> = close.windows(2).map(|w| w[1] - w[0]).collect();
    let nf = n as f64;
    let mut gain = diffs[..n].iter().map(|d| d.max(0.0)).sum::<f64>() / nf;
    let mut loss = diffs[..n].iter().map(|d| (-d).max(0.0)).sum::<f64>() / nf;
    out[n] = Some(rsi_from_averages(gain, loss));
    for t in (n + 1)..close.len() {
        let d = diffs[t - 1];
        gain = (gain * (nf - 1.0) + d.max(0.0)) / nf;
        loss = (loss * (nf - 1.0) + (-d).max(0.0)) / nf;
        out[t] = Some(rsi_from_averages(gain, loss));
    }
    Ok(out)
}

fn check_hlc(high: &[f64], low: &[f64], close: &[f64]) -> Result<()> {
    if high.len() != close.len() || low.len() != close.len() {
        return Err(Error::InvalidInput("high/low/close lengths differ".into()));
    }
    Ok(())
}

/// Commodity channel index; `None` for `t < n - 1`.
pub fn cci(
    high: &[f64],
    low: &[f64],
    close: &[f64],
    n: usize,
    constant: f64,
) -> Result<Vec<Option<f64>>> {
    check_window(n)?;
    check_hlc(high, low, close)?;
    let tp: Vec<f64> = (0..close.len())
        .map(|t| (high[t] + low[t] + close[t]) / 3.0)
        .collect();
    Ok((0..tp.len())
        .map(|t| {
            (t + 1 >= n).then(|| {
                let w = &tp[t + 1 - n..=t];
                let mean = w.iter().sum::<f64>() / n as f64;
                let dev = w.iter().map(|x| (x - mean).abs()).sum::<f64>() / n as f64;
                if dev == 0.0 {
                    0.0
                } else {
                    (tp[t] - mean) / (constant * dev)
                }
            })
        })
        .collect())
}

/// Directional movement index; `None` for `t < n`.
pub fn dx(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Result<Vec<Option<f64>>> {
    check_window(n)?;
    check_hlc(high, low, close)?;
    let len = close.len();
    let mut out = vec![None; len];
    if len <= n {
        return Ok(out);
    }
    let mut plus_dm = Vec::with_capacity(len - 1);
    let mut minus_dm = Vec::with_capacity(len - 1);
    let mut tr = Vec::with_capacity(len - 1);
    for t in 1..len {
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        plus_dm.push(if up > down && up > 0.0 { up } else { 0.0 });
        minus_dm.push(if down > up && down > 0.0 { down } else { 0.0 });
        tr.push(
            (high[t] - low[t])
                .max((high[t] - close[t - 1]).abs())
                .max((low[t] - close[t - 1]).abs()),
        );
    }
    let nf = n as f64;
    let mut sp: f64 = plus_dm[..n].iter().sum();
    let mut sm: f64 = minus_dm[..n].iter().sum();
    let mut st: f64 = tr[..n].iter().sum();
    let value = |sp: f64, sm: f64, st: f64| {
        if st == 0.0 {
            return 0.0;
        }
        let pdi = 100.0 * sp / st;
        let mdi = 100.0 * sm / st;
        if pdi + mdi == 0.0 {
            0.0
        } else {
            100.0 * (pdi - mdi).abs() / (pdi + mdi)
        }
    };
    out[n] = Some(value(sp, sm, st));
    for (t, slot) in out.iter_mut().enumerate().take(len).skip(n + 1) {
        let i = t - 1;
        sp = sp - sp / nf + plus_dm[i];
        sm = sm - sm / nf + minus_dm[i];
        st = st - st / nf + tr[i];
        *slot = Some(value(sp, sm, st));
    }
    Ok(out)
}

/// All indicators for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    pub date: NaiveDate,
    pub pct_change: Option<f64>,
    pub macd: Option<f64>,
    pub boll_up: Option<f64>,
    pub boll_basis: Option<f64>,
    pub boll_low: Option<f64>,
    pub rsi30: Option<f64>,
    pub cci30: Option<f64>,
    pub dx30: Option<f64>,
    pub sma30: Option<f64>,
    pub sma60: Option<f64>,
}

pub fn compute_indicators(series: &PriceSeries, cfg: &IndicatorConfig) -> Result<Vec<IndicatorRow>> {
    let c = &series.close;
    let pct = pct_change(c)?;
    let macd = macd(c, cfg.macd_fast, cfg.macd_slow)?;
    let bands = bollinger(c, cfg.bollinger_window, cfg.bollinger_k)?;
    let rsi = rsi(c, cfg.rsi_window)?;
    let cci = cci(&series.high, &series.low, c, cfg.cci_window, cfg.cci_constant)?;
    let dx = dx(&series.high, &series.low, c, cfg.dx_window)?;
    let s_short = sma(c, cfg.sma_short)?;
    let s_long = sma(c, cfg.sma_long)?;
    Ok((0..c.len())
        .map(|t| IndicatorRow {
            date: series.dates[t],
            pct_change: pct[t],
            macd: macd[t],
            boll_up: bands[t].map(|b| b.upper),
            boll_basis: bands[t].map(|b| b.basis),
            boll_low: bands[t].map(|b| b.lower),
            rsi30: rsi[t],
            cci30: cci[t],
            dx30: dx[t],
            sma30: s_short[t],
            sma60: s_long[t],
        })
        .collect())
}

pub const INDICATOR_CSV_HEADER: &str =
    "date,pct_change,macd,boll_up,boll_low,rsi30,cci30,dx30,sma30,sma60";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_indicator_csv<W: Write>(rows: &[IndicatorRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{INDICATOR_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.date.format("%Y-%m-%d"),
            opt_field(r.pct_change),
            opt_field(r.macd),
            opt_field(r.boll_up),
            opt_field(r.boll_low),
            opt_field(r.rsi30),
            opt_field(r.cci30),
            opt_field(r.dx30),
            opt_field(r.sma30),
            opt_field(r.sma60),
        )?;
    }
    Ok(())
}

/// Names of the context columns in prompt/serialization order.
pub const CONTEXT_COLUMNS: [&str; 16] = [
    "Date",
    "Open",
    "High",
    "Low",
    "Close",
    "Adj Close",
    "Volume",
    "Pct Change",
    "MACD",
    "Bollinger Upper",
    "Bollinger Lower",
    "RSI 30",
    "CCI 30",
    "DX 30",
    "SMA 30",
    "SMA 60",
];

/// One day of raw bars plus indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRow {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
    pub pct_change: Option<f64>,
    pub macd: Option<f64>,
    pub boll_up: Option<f64>,
    pub boll_low: Option<f64>,
    pub rsi30: Option<f64>,
    pub cci30: Option<f64>,
    pub dx30: Option<f64>,
    pub sma30: Option<f64>,
    pub sma60: Option<f64>,
}

impl ContextRow {
    /// Numeric columns after `Date`, in [`CONTEXT_COLUMNS`] order.
    pub fn numeric_columns(&self) -> [Option<f64>; 15] {
        [
            Some(self.open),
            Some(self.high),
            Some(self.low),
            Some(self.close),
            Some(self.adj_close),
            Some(self.volume),
            self.pct_change,
            self.macd,
            self.boll_up,
            self.boll_low,
            self.rsi30,
            self.cci30,
            self.dx30,
            self.sma30,
            self.sma60,
        ]
    }

    pub fn from_columns(date: NaiveDate, cols: [Option<f64>; 15]) -> Result<Self> {
        let req = |i: usize| {
            cols[i].ok_or_else(|| {
                Error::InvalidInput(format!("context column {} is required", CONTEXT_COLUMNS[i + 1]))
            })
        };
        Ok(Self {
            date,
            open: req(0)?,
            high: req(1)?,
            low: req(2)?,
            close: req(3)?,
            adj_close: req(4)?,
            volume: req(5)?,
            pct_change: cols[6],
            macd: cols[7],
            boll_up: cols[8],
            boll_low: cols[9],
            rsi30: cols[10],
            cci30: cols[11],
            dx30: cols[12],
            sma30: cols[13],
            sma60: cols[14],
        })
    }
}

/// Up to `depth` most recent days, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub rows: Vec<ContextRow>,
}

impl ContextWindow {
    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn last(&self) -> &ContextRow {
        self.rows.last().expect("context windows are never empty")
    }
}

pub const DEFAULT_CONTEXT_DEPTH: usize = 10;

/// Rows ending at day `t`. A row is complete once its percentage change
/// exists, so day 0 of a series is never part of a window.
pub fn build_context_window(
    series: &PriceSeries,
    indicators: &[IndicatorRow],
    t: usize,
    depth: usize,
) -> Result<ContextWindow> {
    if depth == 0 {
        return Err(Error::InvalidInput("context depth must be at least 1".into()));
    }
    if indicators.len() != series.len() {
        return Err(Error::DimensionMismatch {
            expected: series.len(),
            got: indicators.len(),
        });
    }
    if t >= series.len() {
        return Err(Error::InvalidInput(format!(
            "day {t} is outside a series of {} days",
            series.len()
        )));
    }
    let first_complete = indicators
        .iter()
        .position(|r| r.pct_change.is_some())
        .ok_or_else(|| Error::InvalidInput("series has no complete rows".into()))?;
    if t < first_complete {
        return Err(Error::InvalidInput(format!(
            "day {t} precedes the first complete row {first_complete}"
        )));
    }
    let start = (t + 1).saturating_sub(depth).max(first_complete);
    let rows = (start..=t)
        .map(|i| {
            let ind = &indicators[i];
            ContextRow {
                date: series.dates[i],
                open: series.open[i],
                high: series.high[i],
                low: series.low[i],
                close: series.close[i],
                adj_close: series.adj_close[i],
                volume: series.volume[i],
                pct_change: ind.pct_change,
                macd: ind.macd,
                boll_up: ind.boll_up,
                boll_low: ind.boll_low,
                rsi30: ind.rsi30,
                cci30: ind.cci30,
                dx30: ind.dx30,
                sma30: ind.sma30,
                sma60: ind.sma60,
            }
        })
        .collect();
    Ok(ContextWindow { rows })
}
