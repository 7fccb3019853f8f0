use std::path::{Path, PathBuf};

use coalcredit::backtest::Regime;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Exact,
    Dag,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_days")]
        days: usize,
        #[serde(default = "default_regime")]
        regime: Regime,
        #[serde(default = "default_signal")]
        signal_strength: f64,
    },
    Csv {
        market: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
    },
}

fn default_days() -> usize {
    60
}

fn default_regime() -> Regime {
    Regime::Bull
}

fn default_signal() -> f64 {
    0.5
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            seed: None,
            days: default_days(),
            regime: default_regime(),
            signal_strength: default_signal(),
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Reference graph when absent.
    pub graph: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub data: DataSource,
    pub seed: u64,
    pub window_len: usize,
    pub threshold: f64,
    pub rf_daily: f64,
    pub lesson_cap: Option<usize>,
    pub trade_cost: f64,
    pub engine: Engine,
    pub out: PathBuf,
    pub parallel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: None,
            prompts: None,
            data: DataSource::default(),
            seed: 42,
            window_len: 5,
            threshold: 0.0,
            rf_daily: 0.0,
            lesson_cap: Some(5),
            trade_cost: 0.0,
            engine: Engine::Both,
            out: PathBuf::from("out"),
            parallel: 1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.graph.as_mut().map(fix);
        self.prompts.as_mut().map(fix);
        fix(&mut self.out);
        if let DataSource::Csv { market, features } = &mut self.data {
            fix(market);
            features.as_mut().map(fix);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window_len < 2 {
            return Err(format!("window_len must be at least 2, got {}", self.window_len));
        }
        if self.parallel < 1 {
            return Err("parallel must be at least 1".into());
        }
        if let DataSource::Synth {
            days, signal_strength, ..
        } = self.data
        {
            if days < 2 {
                return Err(format!("synthetic data needs at least 2 days, got {days}"));
            }
            if !(0.0..=1.0).contains(&signal_strength) {
                return Err(format!("signal_strength must be in [0, 1], got {signal_strength}"));
            }
        }
        Ok(())
    }
}
