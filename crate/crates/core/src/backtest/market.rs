//! Price series and per-day external features, loaded from CSV or synthesized.

use std::io::Read;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::BacktestError;
use crate::agents::ExternalFeatures;

/// Closing prices visible to the technical analyst.
pub const PRICE_LOOKBACK: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

/// Daily OHLCV rows with strictly increasing dates and positive prices.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    pub symbol: String,
    rows: Vec<Bar>,
}

impl MarketSeries {
    pub fn new(symbol: impl Into<String>, rows: Vec<Bar>) -> Result<Self, BacktestError> {
        for (i, bar) in rows.iter().enumerate() {
            let line = i + 2;
            if !(bar.close > 0.0 && bar.open > 0.0 && bar.high > 0.0 && bar.low > 0.0) {
                return Err(BacktestError::NonPositivePrice { line });
            }
            if i > 0 {
                let prev = rows[i - 1].date;
                if bar.date == prev {
                    return Err(BacktestError::DuplicateDate { line, date: bar.date });
                }
                if bar.date < prev {
                    return Err(BacktestError::UnsortedDates { line });
                }
            }
        }
        Ok(MarketSeries {
            symbol: symbol.into(),
            rows,
        })
    }

    pub fn rows(&self) -> &[Bar] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.rows[day].date
    }

    pub fn closes(&self) -> Vec<f64> {
        self.rows.iter().map(|b| b.close).collect()
    }

    /// Simple returns `close_t / close_{t-1} - 1`; one fewer than rows.
    pub fn returns(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].close / w[0].close - 1.0).collect()
    }

    /// Return earned by holding from `day` to `day + 1`, if that day exists.
    pub fn next_return(&self, day: usize) -> Option<f64> {
        let next = self.rows.get(day + 1)?;
        Some(next.close / self.rows[day].close - 1.0)
    }
}

#[derive(Debug, Deserialize)]
struct MarketRow {
    date: NaiveDate,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

pub fn load_market_csv(path: &Path) -> Result<MarketSeries, BacktestError> {
    let file = std::fs::File::open(path).map_err(|e| BacktestError::Io(format!("{}: {e}", path.display())))?;
    let symbol = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("SYMBOL")
        .to_string();
    parse_market_csv(file, symbol)
}

/// Parses `date,open,high,low,close,volume` rows with ISO-8601 dates.
pub fn parse_market_csv<R: Read>(reader: R, symbol: impl Into<String>) -> Result<MarketSeries, BacktestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(&mut rdr, &["date", "open", "high", "low", "close", "volume"])?;
    let mut rows = Vec::new();
    for result in rdr.deserialize::<MarketRow>() {
        let row = result.map_err(csv_error)?;
        rows.push(Bar {
            date: row.date,
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
            volume: row.volume,
        });
    }
    MarketSeries::new(symbol, rows)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), BacktestError> {
    let headers = rdr.headers().map_err(csv_error)?;
    let got: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if got != expected {
        return Err(BacktestError::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> BacktestError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    BacktestError::Parse {
        line,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayFeatures {
    pub date: NaiveDate,
    pub sentiment: f64,
    pub fundamental: f64,
}

/// External features aligned one-to-one with a market series.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureView {
    days: Vec<DayFeatures>,
}

impl FeatureView {
    /// Aligns `features` to the series dates; every trading day needs a row.
    pub fn aligned(series: &MarketSeries, features: &[DayFeatures]) -> Result<Self, BacktestError> {
        let mut by_date = std::collections::HashMap::with_capacity(features.len());
        for f in features {
            by_date.insert(f.date, *f);
        }
        let days = series
            .rows()
            .iter()
            .map(|bar| {
                by_date
                    .get(&bar.date)
                    .copied()
                    .ok_or(BacktestError::MissingFeatures { date: bar.date })
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureView { days })
    }

    pub fn days(&self) -> &[DayFeatures] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// The view handed to source agents on `day`: that day's features and
    /// the closes up to and including it.
    pub fn external(&self, series: &MarketSeries, day: usize) -> ExternalFeatures {
        let rows = series.rows();
        let from = (day + 1).saturating_sub(PRICE_LOOKBACK);
        ExternalFeatures {
            day,
            sentiment: self.days[day].sentiment,
            fundamental: self.days[day].fundamental,
            closes: rows[from..=day].iter().map(|b| b.close).collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct FeatureRow {
    date: NaiveDate,
    sentiment: f64,
    fundamental: f64,
}

/// Parses `date,sentiment,fundamental` rows.
pub fn parse_feature_csv<R: Read>(reader: R) -> Result<Vec<DayFeatures>, BacktestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(&mut rdr, &["date", "sentiment", "fundamental"])?;
    rdr.deserialize::<FeatureRow>()
        .map(|r| {
            let r = r.map_err(csv_error)?;
            Ok(DayFeatures {
                date: r.date,
                sentiment: r.sentiment,
                fundamental: r.fundamental,
            })
        })
        .collect()
}

pub fn load_feature_csv(path: &Path) -> Result<Vec<DayFeatures>, BacktestError> {
    let file = std::fs::File::open(path).map_err(|e| BacktestError::Io(format!("{}: {e}", path.display())))?;
    parse_feature_csv(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Bull,
    Bear,
    Sideways,
}

impl Regime {
    pub fn daily_drift(self) -> f64 {
        match self {
            Regime::Bull => 0.0015,
            Regime::Bear => -0.0015,
            Regime::Sideways => 0.0,
        }
    }
}

pub const SYNTHETIC_VOLATILITY: f64 = 0.015;

/// Seeded geometric random walk with regime drift.
///
/// `signal_strength` in `[0, 1]` is the correlation between a day's
/// sentiment feature and the next day's return shock. The fundamental
/// feature is a slow AR(1) blend of the same signal and independent noise.
pub fn synthesize_market(
    seed: u64,
    days: usize,
    regime: Regime,
    signal_strength: f64,
) -> Result<(MarketSeries, FeatureView), BacktestError> {
    if days < 2 {
        return Err(BacktestError::InsufficientData { days, needed: 2 });
    }
    let rho = signal_strength.clamp(0.0, 1.0);
    let idio = (1.0 - rho * rho).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // shocks[t] drives the return from day t-1 to day t; one extra so the
    // last day's features have a (never realized) forward shock
    let shocks: Vec<f64> = (0..=days).map(|_| rng.sample(StandardNormal)).collect();
    let start = NaiveDate::from_ymd_opt(2024, 1, 2).expect("valid date");
    let mut rows = Vec::with_capacity(days);
    let mut features = Vec::with_capacity(days);
    let mut close = 100.0;
    let mut fundamental = 0.0;
    let mut date = start;
    for t in 0..days {
        let open = close;
        if t > 0 {
            let r = (regime.daily_drift() + SYNTHETIC_VOLATILITY * shocks[t]).max(-0.5);
            close *= 1.0 + r;
        }
        let wick: f64 = rng.gen_range(0.0..0.005);
        let volume = 1.0e6 * (1.0 + rng.gen_range(0.0..0.2));
        rows.push(Bar {
            date,
            open,
            high: open.max(close) * (1.0 + wick),
            low: open.min(close) * (1.0 - wick),
            close,
            volume,
        });
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let sentiment = rho * shocks[t + 1] + idio * e1;
        fundamental = 0.8 * fundamental + 0.2 * (rho * shocks[t + 1] + idio * e2);
        features.push(DayFeatures {
            date,
            sentiment: 0.5 * sentiment,
            fundamental,
        });
        date = next_weekday(date);
    }
    let series = MarketSeries::new(format!("SYN-{regime:?}-{seed}").to_uppercase(), rows)?;
    let view = FeatureView::aligned(&series, &features)?;
    Ok((series, view))
}

/// Signal-free features for a loaded series that came without a feature
/// file: sentiment is seeded noise and fundamental an AR(1) of noise.
pub fn synthesize_features(series: &MarketSeries, seed: u64) -> FeatureView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fundamental = 0.0;
    let days = series
        .rows()
        .iter()
        .map(|bar| {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            fundamental = 0.8 * fundamental + 0.2 * e2;
            DayFeatures {
                date: bar.date,
                sentiment: 0.5 * e1,
                fundamental,
            }
        })
        .collect();
    FeatureView { days }
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    use chrono::Datelike;
    let mut next = d + Days::new(1);
    while matches!(next.weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun) {
        next = next + Days::new(1);
    }
    next
}
