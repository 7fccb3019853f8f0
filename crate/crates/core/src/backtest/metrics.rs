//! Return-series metrics and the baseline position rules.

use serde::{Deserialize, Serialize};

use super::BacktestError;
use crate::agents::TradeAction;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

/// Buy is long, Sell is short, Hold is flat. The position earns the next
/// day's return.
pub fn decision_to_position(action: TradeAction) -> i8 {
    match action {
        TradeAction::Buy => 1,
        TradeAction::Hold => 0,
        TradeAction::Sell => -1,
    }
}

/// Raw (per-period) Sharpe ratio with sample standard deviation.
/// Zero variance gives 0.
pub fn sharpe(returns: &[f64], rf_daily: f64) -> Result<f64, BacktestError> {
    if returns.len() < 2 {
        return Err(BacktestError::TooFewReturns(returns.len()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Ok(0.0);
    }
    Ok((mean - rf_daily) / sd)
}

/// Sharpe when defined, 0 for series too short to have a deviation.
pub fn sharpe_or_zero(returns: &[f64], rf_daily: f64) -> f64 {
    sharpe(returns, rf_daily).unwrap_or(0.0)
}

/// Equity path starting at 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve(Vec<f64>);

impl EquityCurve {
    pub fn new(points: Vec<f64>) -> Self {
        EquityCurve(points)
    }

    pub fn from_returns(returns: &[f64]) -> Self {
        let mut points = Vec::with_capacity(returns.len() + 1);
        let mut equity = 1.0;
        points.push(equity);
        for r in returns {
            equity *= 1.0 + r;
            points.push(equity);
        }
        EquityCurve(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }
}

/// Largest running-peak-to-trough decline as a fraction of the peak.
pub fn max_drawdown(equity: &EquityCurve) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &e in equity.points() {
        peak = peak.max(e);
        if peak > 0.0 {
            worst = worst.max(1.0 - e / peak);
        }
    }
    worst
}

pub fn total_return(equity: &EquityCurve) -> f64 {
    match (equity.points().first(), equity.points().last()) {
        (Some(first), Some(last)) => last / first - 1.0,
        _ => 0.0,
    }
}

/// Headline metrics of one return series. Sharpe is annualized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub total_return: f64,
    pub sharpe: f64,
    pub max_drawdown: f64,
}

impl StrategyMetrics {
    pub fn from_returns(returns: &[f64], rf_daily: f64) -> Self {
        let curve = EquityCurve::from_returns(returns);
        StrategyMetrics {
            total_return: total_return(&curve),
            sharpe: sharpe_or_zero(returns, rf_daily) * TRADING_DAYS_PER_YEAR.sqrt(),
            max_drawdown: max_drawdown(&curve),
        }
    }
}

/// Realized returns of holding `positions[t]` over `next_returns[t]`, less
/// `trade_cost` per unit of position change (starting flat).
pub fn strategy_returns(positions: &[i8], next_returns: &[f64], trade_cost: f64) -> Vec<f64> {
    let mut prev = 0i8;
    positions
        .iter()
        .zip(next_returns)
        .map(|(&p, &r)| {
            let cost = trade_cost * f64::from((p - prev).abs());
            prev = p;
            f64::from(p) * r - cost
        })
        .collect()
}

pub fn buy_and_hold_positions(days: usize) -> Vec<i8> {
    vec![1; days]
}

/// Long while the fast simple average is above the slow one, flat otherwise
/// and before the slow average has a full window.
pub fn sma_crossover_positions(closes: &[f64], fast: usize, slow: usize) -> Vec<i8> {
    (0..closes.len())
        .map(|t| {
            if t + 1 < slow {
                return 0;
            }
            let avg = |len: usize| closes[t + 1 - len..=t].iter().sum::<f64>() / len as f64;
            i8::from(avg(fast) > avg(slow))
        })
        .collect()
}

fn ema(xs: &[f64], span: usize) -> Vec<f64> {
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut prev = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for &x in xs {
        prev = alpha * x + (1.0 - alpha) * prev;
        out.push(prev);
    }
    out
}

/// Long while the MACD line is above its signal line, flat otherwise and
/// during the `slow + signal - 1` day warm-up.
pub fn macd_positions(closes: &[f64], fast: usize, slow: usize, signal: usize) -> Vec<i8> {
    let fast_ema = ema(closes, fast);
    let slow_ema = ema(closes, slow);
    let line: Vec<f64> = fast_ema.iter().zip(&slow_ema).map(|(f, s)| f - s).collect();
    let sig = ema(&line, signal);
    let warmup = slow + signal - 1;
    (0..closes.len())
        .map(|t| if t + 1 < warmup { 0 } else { i8::from(line[t] > sig[t]) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn positions() {
        assert_eq!(decision_to_position(TradeAction::Buy), 1);
        assert_eq!(decision_to_position(TradeAction::Hold), 0);
        assert_eq!(decision_to_position(TradeAction::Sell), -1);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn sharpe_examples() {
        assert_eq!(sharpe(&[0.01, 0.01, 0.01], 0.0).unwrap(), 0.0);
        // mean 0.01, sample sd = sqrt(2 * 0.01^2 / 1) = 0.0141421...
        let s = sharpe(&[0.02, 0.0], 0.0).unwrap();
        assert!((s - 0.01 / 0.0002f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.70711).abs() < 1e-4);
        assert_eq!(sharpe(&[0.001, 0.001], 0.001).unwrap(), 0.0);
        assert!(matches!(sharpe(&[0.1], 0.0), Err(BacktestError::TooFewReturns(1))));
    }

    #[test]
    fn drawdown_examples() {
        assert_eq!(max_drawdown(&EquityCurve::new(vec![1.0, 1.2, 0.9, 1.1])), 0.25);
        assert_eq!(max_drawdown(&EquityCurve::new(vec![1.0, 1.1, 1.2])), 0.0);
        assert_eq!(max_drawdown(&EquityCurve::new(vec![1.0])), 0.0);
    }

    #[test]
    fn total_return_examples() {
        assert!((total_return(&EquityCurve::new(vec![1.0, 1.1])) - 0.10).abs() < 1e-15);
        assert_eq!(total_return(&EquityCurve::new(vec![1.0, 1.0])), 0.0);
        let c = EquityCurve::from_returns(&[0.10, -0.10]);
        assert!((total_return(&c) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn next_day_alignment() {
        let next = [0.10, -0.10];
        assert_eq!(strategy_returns(&[1, 1], &next, 0.0), vec![0.10, -0.10]);
        assert_eq!(strategy_returns(&[0, 0], &next, 0.0), vec![0.0, 0.0]);
        let shifted = strategy_returns(&[0, 1], &next, 0.0);
        assert_eq!(shifted, vec![0.0, -0.10]);
    }

    #[test]
    fn trade_cost_charged_on_changes() {
        let r = strategy_returns(&[1, 1, -1, 0], &[0.0; 4], 0.001);
        assert_eq!(r, vec![-0.001, 0.0, -0.002, -0.001]);
    }

    #[test]
    fn sma_rule_on_trend() {
        let up: Vec<f64> = (0..60).map(|i| 100.0 + i as f64).collect();
        let p = sma_crossover_positions(&up, 20, 50);
        assert!(p[..49].iter().all(|&x| x == 0));
        assert!(p[49..].iter().all(|&x| x == 1));
        let down: Vec<f64> = (0..60).map(|i| 200.0 - i as f64).collect();
        assert!(sma_crossover_positions(&down, 20, 50).iter().all(|&x| x == 0));
    }

    #[test]
    fn macd_rule_on_accelerating_trend() {
        let up: Vec<f64> = (0..80).map(|i| 100.0 * 1.01f64.powi(i)).collect();
        let p = macd_positions(&up, 12, 26, 9);
        assert!(p[..33].iter().all(|&x| x == 0));
        assert_eq!(p[79], 1);
    }

    proptest! {
        #[test]
        fn compounding_identity(
            returns in prop::collection::vec(-0.05f64..0.05, 2..60),
            cut in 1usize..59,
        ) {
            let cut = cut.min(returns.len() - 1);
            let whole = total_return(&EquityCurve::from_returns(&returns));
            let a = total_return(&EquityCurve::from_returns(&returns[..cut]));
            let b = total_return(&EquityCurve::from_returns(&returns[cut..]));
            prop_assert!((whole - ((1.0 + a) * (1.0 + b) - 1.0)).abs() < 1e-12);
        }

        #[test]
        fn drawdown_in_unit_interval(returns in prop::collection::vec(-0.5f64..0.5, 0..60)) {
            let dd = max_drawdown(&EquityCurve::from_returns(&returns));
            prop_assert!((0.0..=1.0).contains(&dd));
        }
    }
}
