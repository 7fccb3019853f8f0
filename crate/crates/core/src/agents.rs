//! Agent execution contract, prompt state, and deterministic mock agents for
//! the analyst / outlook / trader roles.
//!
//! A mock's behavior is a pure function of its rendered prompt, its upstream
//! outputs and (for sources only) the day's external features. The prompt
//! matters through calibration directives embedded in lesson blocks, which
//! shift the mock's sensitivity.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AgentId, WorkflowGraph};
use crate::shapley::{BoxError, NodeExecutor};

/// Lesson directive that lowers a mock's sensitivity by [`SENSITIVITY_STEP`].
pub const DIRECTIVE_DAMPEN: &str = "[[calibrate:dampen]]";
/// Lesson directive that raises a mock's sensitivity by [`SENSITIVITY_STEP`].
pub const DIRECTIVE_SHARPEN: &str = "[[calibrate:sharpen]]";
pub const SENSITIVITY_STEP: f64 = 0.1;

/// Separator line placed between prompt sections when rendering.
pub const LESSON_DELIMITER: &str = "\n---\n";

pub const DEFAULT_TRADER_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("source agent `{0}` executed without external data")]
    MissingExternalData(String),
    #[error("agent `{0}` is not a source and may not read external data")]
    ForbiddenExternalAccess(String),
    #[error("agent `{agent}` failed: {message}")]
    Executor { agent: String, message: String },
    #[error("failed to read prompt file {path}: {message}")]
    PromptIo { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    NewsAnalyst,
    TechnicalAnalyst,
    FundamentalAnalyst,
    BullishOutlook,
    BearishOutlook,
    NeutralOutlook,
    Trader,
}

impl AgentRole {
    pub fn is_analyst(self) -> bool {
        matches!(
            self,
            AgentRole::NewsAnalyst | AgentRole::TechnicalAnalyst | AgentRole::FundamentalAnalyst
        )
    }

    /// Role of an agent carrying one of the reference abbreviations.
    pub fn from_reference_name(name: &str) -> Option<AgentRole> {
        Some(match name {
            "NAA" => AgentRole::NewsAnalyst,
            "TAA" => AgentRole::TechnicalAnalyst,
            "FAA" => AgentRole::FundamentalAnalyst,
            "BOA" => AgentRole::BullishOutlook,
            "BeOA" => AgentRole::BearishOutlook,
            "NOA" => AgentRole::NeutralOutlook,
            "TRA" => AgentRole::Trader,
            _ => return None,
        })
    }

    pub fn default_prompt(self) -> &'static str {
        match self {
            AgentRole::NewsAnalyst => {
                "You are a news analyst. Rate today's news sentiment for the stock from -1 (bearish) to 1 (bullish)."
            }
            AgentRole::TechnicalAnalyst => {
                "You are a technical analyst. Rate the price trend from -1 to 1 using moving-average crossovers."
            }
            AgentRole::FundamentalAnalyst => {
                "You are a fundamental analyst. Rate the company's valuation outlook from -1 to 1."
            }
            AgentRole::BullishOutlook => {
                "You argue the bullish case. Combine the analyst reports into a bullish outlook score."
            }
            AgentRole::BearishOutlook => {
                "You argue the bearish case. Combine the analyst reports into a bearish outlook score."
            }
            AgentRole::NeutralOutlook => {
                "You give a balanced view. Combine the analyst reports into a neutral outlook score."
            }
            AgentRole::Trader => "You are the trader. Weigh the competing outlooks and decide to BUY, HOLD or SELL.",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Assigns roles by reference name when every agent carries one; otherwise by
/// position: sources cycle through the analyst roles, the sink trades, and
/// intermediate agents cycle through the outlook roles.
pub fn infer_roles(graph: &WorkflowGraph) -> Vec<AgentRole> {
    let named: Option<Vec<AgentRole>> = graph
        .names()
        .iter()
        .map(|n| AgentRole::from_reference_name(n))
        .collect();
    if let Some(roles) = named {
        return roles;
    }
    const ANALYSTS: [AgentRole; 3] = [
        AgentRole::NewsAnalyst,
        AgentRole::TechnicalAnalyst,
        AgentRole::FundamentalAnalyst,
    ];
    const OUTLOOKS: [AgentRole; 3] = [
        AgentRole::BullishOutlook,
        AgentRole::BearishOutlook,
        AgentRole::NeutralOutlook,
    ];
    let (mut src, mut mid) = (0, 0);
    graph
        .agents()
        .map(|a| {
            if a == graph.sink() {
                AgentRole::Trader
            } else if graph.is_source(a) {
                src += 1;
                ANALYSTS[(src - 1) % 3]
            } else {
                mid += 1;
                OUTLOOKS[(mid - 1) % 3]
            }
        })
        .collect()
}

/// Base prompt plus appended lesson blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub base_text: String,
    pub lesson_blocks: Vec<String>,
    pub version: u32,
}

impl PromptState {
    pub fn new(base_text: impl Into<String>) -> Self {
        PromptState {
            base_text: base_text.into(),
            lesson_blocks: Vec::new(),
            version: 0,
        }
    }

    /// Base text followed by each non-empty lesson block, separated by
    /// [`LESSON_DELIMITER`].
    pub fn render(&self) -> String {
        let mut out = self.base_text.clone();
        for block in self.lesson_blocks.iter().filter(|b| !b.is_empty()) {
            out.push_str(LESSON_DELIMITER);
            out.push_str(block);
        }
        out
    }
}

/// Reads `<dir>/<agent name>.txt` for each agent, falling back to the role's
/// default prompt when the file is absent.
pub fn load_prompt_bases(dir: &Path, graph: &WorkflowGraph, roles: &[AgentRole]) -> Result<Vec<String>, AgentError> {
    graph
        .agents()
        .map(|a| {
            let path = dir.join(format!("{}.txt", graph.name(a)));
            if path.exists() {
                std::fs::read_to_string(&path)
                    .map(|s| s.trim_end().to_string())
                    .map_err(|e| AgentError::PromptIo {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
            } else {
                Ok(roles[a.index()].default_prompt().to_string())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TradeAction {
    Buy,
    Hold,
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rationale {
    Bullish,
    Bearish,
    Neutral,
}

impl Rationale {
    fn of(score: f64) -> Self {
        if score > 0.05 {
            Rationale::Bullish
        } else if score < -0.05 {
            Rationale::Bearish
        } else {
            Rationale::Neutral
        }
    }
}

/// Role-specific agent payload. Scores lie in `[-1, 1]`, confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AgentOutput {
    Signal { score: f64, rationale: Rationale },
    Outlook { score: f64 },
    Decision { action: TradeAction, confidence: f64 },
}

impl AgentOutput {
    /// Signed strength of the payload; decisions map to `±confidence`.
    pub fn score(&self) -> f64 {
        match *self {
            AgentOutput::Signal { score, .. } | AgentOutput::Outlook { score } => score,
            AgentOutput::Decision { action, confidence } => match action {
                TradeAction::Buy => confidence,
                TradeAction::Hold => 0.0,
                TradeAction::Sell => -confidence,
            },
        }
    }

    pub fn action(&self) -> Option<TradeAction> {
        match *self {
            AgentOutput::Decision { action, .. } => Some(action),
            _ => None,
        }
    }

    pub fn in_range(&self) -> bool {
        match *self {
            AgentOutput::Signal { score, .. } | AgentOutput::Outlook { score } => (-1.0..=1.0).contains(&score),
            AgentOutput::Decision { confidence, .. } => (0.0..=1.0).contains(&confidence),
        }
    }
}

/// External market features visible to source agents on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalFeatures {
    pub day: usize,
    pub sentiment: f64,
    pub fundamental: f64,
    /// Closing prices up to and including `day`, oldest first.
    pub closes: Vec<f64>,
}

/// Executes one agent from its rendered prompt, upstream outputs and optional
/// external features. Implementations must be deterministic.
pub trait AgentExecutor: Send + Sync {
    fn execute(
        &self,
        prompt: &str,
        upstream: &BTreeMap<AgentId, AgentOutput>,
        external: Option<&ExternalFeatures>,
    ) -> Result<AgentOutput, AgentError>;
}

/// splitmix64 finalizer; the counter-based source of all mock randomness.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` keyed on `(seed, agent, counter)`.
fn unit(seed: u64, agent: usize, counter: u64) -> f64 {
    let h = mix64(seed ^ mix64((agent as u64) << 32 ^ counter));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const BASELINE_COUNTER: u64 = 0xBA5E;

/// Sensitivity before any directive: uniform in `[0.4, 0.6)` keyed on
/// `(seed, agent)`.
pub fn baseline_sensitivity(seed: u64, agent: usize) -> f64 {
    0.4 + 0.2 * unit(seed, agent, BASELINE_COUNTER)
}

/// Baseline shifted by one step per sharpen directive and back per dampen
/// directive found in `prompt`, clamped to `[0, 1]`.
pub fn sensitivity_for_prompt(seed: u64, agent: usize, prompt: &str) -> f64 {
    let up = prompt.matches(DIRECTIVE_SHARPEN).count() as f64;
    let down = prompt.matches(DIRECTIVE_DAMPEN).count() as f64;
    (baseline_sensitivity(seed, agent) + SENSITIVITY_STEP * (up - down)).clamp(0.0, 1.0)
}

/// Deterministic stand-in for an LLM-backed agent.
///
/// * news analyst: `tanh(g * (sentiment + noise))`
/// * technical analyst: `tanh(g * 50 * (sma3 - sma8) / sma8)`
/// * fundamental analyst: `tanh(g * (fundamental + noise))`
/// * outlooks: mean upstream score `m` scaled by `g`; bullish keeps the
///   positive part, bearish the negative part, neutral halves it
/// * trader: Buy above `+threshold`, Sell below `-threshold` on `g * sum`
///
/// `g = 4s` for analysts and `2s` otherwise, with `s` the prompt-dependent
/// sensitivity. Noise is keyed on `(seed, agent, day)`.
#[derive(Debug, Clone)]
pub struct MockAgent {
    pub role: AgentRole,
    pub agent_index: usize,
    pub seed: u64,
    pub trader_threshold: f64,
}

impl MockAgent {
    pub fn new(role: AgentRole, agent_index: usize, seed: u64) -> Self {
        MockAgent {
            role,
            agent_index,
            seed,
            trader_threshold: DEFAULT_TRADER_THRESHOLD,
        }
    }

    pub fn sensitivity(&self, prompt: &str) -> f64 {
        sensitivity_for_prompt(self.seed, self.agent_index, prompt)
    }

    fn noise(&self, day: usize, amplitude: f64) -> f64 {
        amplitude * (2.0 * unit(self.seed, self.agent_index, day as u64) - 1.0)
    }
}

fn sma(xs: &[f64], len: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(len)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn clamp_score(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

impl AgentExecutor for MockAgent {
    fn execute(
        &self,
        prompt: &str,
        upstream: &BTreeMap<AgentId, AgentOutput>,
        external: Option<&ExternalFeatures>,
    ) -> Result<AgentOutput, AgentError> {
        let s = self.sensitivity(prompt);
        let mean_upstream = if upstream.is_empty() {
            0.0
        } else {
            upstream.values().map(AgentOutput::score).sum::<f64>() / upstream.len() as f64
        };
        let missing = || AgentError::MissingExternalData(format!("{}#{}", self.role, self.agent_index));
        let out = match self.role {
            AgentRole::NewsAnalyst => {
                let f = external.ok_or_else(missing)?;
                let score = clamp_score((4.0 * s * (f.sentiment + self.noise(f.day, 0.3))).tanh());
                AgentOutput::Signal {
                    score,
                    rationale: Rationale::of(score),
                }
            }
            AgentRole::TechnicalAnalyst => {
                let f = external.ok_or_else(missing)?;
                let score = if f.closes.len() < 2 {
                    0.0
                } else {
                    let long = sma(&f.closes, 8);
                    let spread = (sma(&f.closes, 3) - long) / long;
                    clamp_score((4.0 * s * 50.0 * spread).tanh())
                };
                AgentOutput::Signal {
                    score,
                    rationale: Rationale::of(score),
                }
            }
            AgentRole::FundamentalAnalyst => {
                let f = external.ok_or_else(missing)?;
                let score = clamp_score((4.0 * s * (f.fundamental + self.noise(f.day, 0.2))).tanh());
                AgentOutput::Signal {
                    score,
                    rationale: Rationale::of(score),
                }
            }
            AgentRole::BullishOutlook => AgentOutput::Outlook {
                score: clamp_score((2.0 * s * mean_upstream).max(0.0)),
            },
            AgentRole::BearishOutlook => AgentOutput::Outlook {
                score: clamp_score((2.0 * s * mean_upstream).min(0.0)),
            },
            AgentRole::NeutralOutlook => AgentOutput::Outlook {
                score: clamp_score(s * mean_upstream),
            },
            AgentRole::Trader => {
                let total = 2.0 * s * upstream.values().map(AgentOutput::score).sum::<f64>();
                let action = if total > self.trader_threshold {
                    TradeAction::Buy
                } else if total < -self.trader_threshold {
                    TradeAction::Sell
                } else {
                    TradeAction::Hold
                };
                AgentOutput::Decision {
                    action,
                    confidence: total.abs().min(1.0),
                }
            }
        };
        Ok(out)
    }
}

/// One agent of a running system.
#[derive(Clone)]
pub struct AgentSpec {
    pub id: AgentId,
    pub name: String,
    pub role: AgentRole,
    pub prompt: PromptState,
    /// Only source agents may read external market data.
    pub external_access: bool,
    pub executor: Arc<dyn AgentExecutor>,
}

impl fmt::Debug for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentSpec")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("role", &self.role)
            .field("prompt", &self.prompt)
            .field("external_access", &self.external_access)
            .finish_non_exhaustive()
    }
}

impl AgentSpec {
    /// Sensitivity a [`MockAgent`] with `seed` would use under this prompt.
    pub fn mock_sensitivity(&self, seed: u64) -> f64 {
        sensitivity_for_prompt(seed, self.id.index(), &self.prompt.render())
    }
}

/// Runs `spec` after enforcing the information-flow rule: sources must get
/// external data, every other agent must not.
pub fn execute_agent(
    spec: &AgentSpec,
    upstream: &BTreeMap<AgentId, AgentOutput>,
    external: Option<&ExternalFeatures>,
) -> Result<AgentOutput, AgentError> {
    match (spec.external_access, external.is_some()) {
        (true, false) => return Err(AgentError::MissingExternalData(spec.name.clone())),
        (false, true) => return Err(AgentError::ForbiddenExternalAccess(spec.name.clone())),
        _ => {}
    }
    let out = spec.executor.execute(&spec.prompt.render(), upstream, external)?;
    if !out.in_range() {
        return Err(AgentError::Executor {
            agent: spec.name.clone(),
            message: format!("output out of range: {out:?}"),
        });
    }
    Ok(out)
}

/// The full agent system aligned with a graph's agent indices.
#[derive(Debug, Clone)]
pub struct AgentRoster {
    specs: Vec<AgentSpec>,
    rendered: Vec<String>,
}

impl AgentRoster {
    pub fn new(specs: Vec<AgentSpec>) -> Self {
        let rendered = specs.iter().map(|s| s.prompt.render()).collect();
        AgentRoster { specs, rendered }
    }

    /// Mock agents for every node of `graph`, with roles and prompt bases as
    /// given. Source nodes receive external data access.
    pub fn mock(graph: &WorkflowGraph, seed: u64, roles: &[AgentRole], bases: &[String]) -> Self {
        assert_eq!(roles.len(), graph.agent_count());
        assert_eq!(bases.len(), graph.agent_count());
        let specs = graph
            .agents()
            .map(|a| AgentSpec {
                id: a,
                name: graph.name(a).to_string(),
                role: roles[a.index()],
                prompt: PromptState::new(bases[a.index()].clone()),
                external_access: graph.is_source(a),
                executor: Arc::new(MockAgent::new(roles[a.index()], a.index(), seed)),
            })
            .collect();
        AgentRoster::new(specs)
    }

    /// Mock roster with inferred roles and default prompts.
    pub fn mock_default(graph: &WorkflowGraph, seed: u64) -> Self {
        let roles = infer_roles(graph);
        let bases: Vec<String> = roles.iter().map(|r| r.default_prompt().to_string()).collect();
        AgentRoster::mock(graph, seed, &roles, &bases)
    }

    pub fn specs(&self) -> &[AgentSpec] {
        &self.specs
    }

    pub fn spec(&self, agent: AgentId) -> &AgentSpec {
        &self.specs[agent.index()]
    }

    pub fn prompts(&self) -> Vec<PromptState> {
        self.specs.iter().map(|s| s.prompt.clone()).collect()
    }

    pub fn set_prompt(&mut self, agent: AgentId, prompt: PromptState) {
        self.rendered[agent.index()] = prompt.render();
        self.specs[agent.index()].prompt = prompt;
    }

    pub fn prompt_versions(&self) -> Vec<u32> {
        self.specs.iter().map(|s| s.prompt.version).collect()
    }
}

impl NodeExecutor for AgentRoster {
    type Output = AgentOutput;
    type Episode = ExternalFeatures;

    fn execute(
        &self,
        agent: AgentId,
        upstream: &BTreeMap<AgentId, AgentOutput>,
        episode: &ExternalFeatures,
    ) -> Result<AgentOutput, BoxError> {
        let spec = &self.specs[agent.index()];
        let external = spec.external_access.then_some(episode);
        let out = spec
            .executor
            .execute(&self.rendered[agent.index()], upstream, external)?;
        if !out.in_range() {
            return Err(Box::new(AgentError::Executor {
                agent: spec.name.clone(),
                message: format!("output out of range: {out:?}"),
            }));
        }
        Ok(out)
    }
}
