//! The contribution-guided optimization cycle: measure contributions, pick
//! the weakest agent, reflect on its recent cases, and append the resulting
//! lessons to its prompt.

use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentOutput, AgentRoster, PromptState, DIRECTIVE_DAMPEN, DIRECTIVE_SHARPEN};
use crate::coalition::Coalition;
use crate::graph::{AgentId, WorkflowGraph};
use crate::shapley::{shapley_dag, BoxError, ShapleyError};

pub const DEFAULT_THRESHOLD: f64 = 0.0;
pub const DEFAULT_LESSON_CAP: usize = 5;

/// Instruction text placed ahead of the formatted case context.
pub const REFLECTION_TEMPLATE: &str = "Review the agent's recent decisions below. Identify systematic \
weaknesses in the failure cases and patterns worth keeping in the success cases, then state concise \
lessons the agent should follow.";

#[derive(Debug, Error)]
pub enum CgopoError {
    #[error("window {window} spans {days} trading day(s); at least 2 are required")]
    WindowTooShort { window: usize, days: usize },
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error("reflector failed: {0}")]
    Reflector(#[source] BoxError),
}

/// A contiguous run of trading days `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, day: usize) -> bool {
        (self.start..self.end).contains(&day)
    }
}

/// One `(state, action, reward)` observation for an agent on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub day: usize,
    pub date: NaiveDate,
    pub agent: AgentId,
    pub state: String,
    pub action: AgentOutput,
    /// System-level portfolio return realized by that day's decision; shared
    /// by every agent.
    pub reward: f64,
}

/// Append-only history of agent observations.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    records: Vec<HistoryRecord>,
}

impl HistoryStore {
    pub fn append(&mut self, record: HistoryRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Splits an agent's records inside `window` into failures (`reward < 0`)
/// and successes (`reward >= 0`), keeping chronological order.
pub fn extract_cases(
    history: &[HistoryRecord],
    agent: AgentId,
    window: &Window,
) -> (Vec<HistoryRecord>, Vec<HistoryRecord>) {
    history
        .iter()
        .filter(|r| r.agent == agent && window.contains(r.day))
        .cloned()
        .partition(|r| r.reward < 0.0)
}

/// Agent with the minimum contribution if it falls below `threshold`.
/// Ties go to the lower index.
pub fn identify_bottleneck(values: &[f64], threshold: f64) -> Option<AgentId> {
    let (idx, &min) = argmin(values)?;
    (min < threshold).then(|| AgentId::new(idx))
}

fn argmin(values: &[f64]) -> Option<(usize, &f64)> {
    values
        .iter()
        .enumerate()
        .reduce(|best, cur| if cur.1 < best.1 { cur } else { best })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LessonSet {
    pub cycle: usize,
    pub target: AgentId,
    pub text_blocks: Vec<String>,
    pub failure_count: usize,
    pub success_count: usize,
}

/// Everything a reflector sees for one bottleneck agent.
#[derive(Debug, Clone)]
pub struct ReflectionRequest<'a> {
    pub target: AgentId,
    pub target_name: &'a str,
    pub phi: f64,
    pub failures: &'a [HistoryRecord],
    pub successes: &'a [HistoryRecord],
    /// Template followed by the formatted case context.
    pub prompt: String,
}

/// Turns a reflection request into lesson text blocks.
pub trait Reflector {
    fn reflect(&self, request: &ReflectionRequest<'_>) -> Result<Vec<String>, BoxError>;
}

/// Deterministic reflector: emits a statistics block and, when there were
/// failures, one calibration directive (dampen when at least half of the
/// cases failed, sharpen otherwise).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockReflector;

impl Reflector for MockReflector {
    fn reflect(&self, request: &ReflectionRequest<'_>) -> Result<Vec<String>, BoxError> {
        let nf = request.failures.len();
        let total = nf + request.successes.len();
        let failure_rate = if total == 0 { 0.0 } else { nf as f64 / total as f64 };
        let mean_negative = if nf == 0 {
            0.0
        } else {
            request.failures.iter().map(|r| r.reward).sum::<f64>() / nf as f64
        };
        let mut blocks = vec![format!(
            "Lesson for {}: contribution={:.6} failure_rate={:.3} mean_negative_reward={:.6} failures={} successes={}",
            request.target_name,
            request.phi,
            failure_rate,
            mean_negative,
            nf,
            request.successes.len()
        )];
        if nf > 0 {
            let directive = if failure_rate >= 0.5 {
                DIRECTIVE_DAMPEN
            } else {
                DIRECTIVE_SHARPEN
            };
            blocks.push(directive.to_string());
        }
        Ok(blocks)
    }
}

/// Case context handed to the reflector after [`REFLECTION_TEMPLATE`].
pub fn format_context(target_name: &str, phi: f64, failures: &[HistoryRecord], successes: &[HistoryRecord]) -> String {
    let mut out = format!("Agent: {target_name}\nContribution: {phi:.6}\n");
    for (label, cases) in [("Failure cases", failures), ("Success cases", successes)] {
        let _ = writeln!(out, "{label} ({}):", cases.len());
        for r in cases {
            let _ = writeln!(
                out,
                "- {} state={} action={:?} reward={:.6}",
                r.date, r.state, r.action, r.reward
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn reflect<R: Reflector + ?Sized>(
    cycle: usize,
    target: AgentId,
    target_name: &str,
    phi: f64,
    failures: &[HistoryRecord],
    successes: &[HistoryRecord],
    reflector: &R,
) -> Result<LessonSet, CgopoError> {
    let context = format_context(target_name, phi, failures, successes);
    let request = ReflectionRequest {
        target,
        target_name,
        phi,
        failures,
        successes,
        prompt: format!("{REFLECTION_TEMPLATE}\n\n{context}"),
    };
    let text_blocks = reflector.reflect(&request).map_err(CgopoError::Reflector)?;
    Ok(LessonSet {
        cycle,
        target,
        text_blocks,
        failure_count: failures.len(),
        success_count: successes.len(),
    })
}

/// Appends the lesson set as one prompt block and bumps the version.
///
/// The base text is never touched. With `cap = Some(k)` only the `k` most
/// recent lesson blocks are kept. An empty lesson still bumps the version but
/// adds no block.
pub fn metamorphose(prompt: &PromptState, lessons: &LessonSet, cap: Option<usize>) -> PromptState {
    let mut next = prompt.clone();
    let block = lessons
        .text_blocks
        .iter()
        .filter(|b| !b.is_empty())
        .cloned()
        .collect::<Vec<_>>()
        .join("\n");
    if !block.is_empty() {
        next.lesson_blocks.push(block);
    }
    if let Some(cap) = cap {
        let excess = next.lesson_blocks.len().saturating_sub(cap);
        next.lesson_blocks.drain(..excess);
    }
    next.version += 1;
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgopoConfig {
    pub threshold: f64,
    /// `None` keeps every lesson.
    pub lesson_cap: Option<usize>,
}

impl Default for CgopoConfig {
    fn default() -> Self {
        CgopoConfig {
            threshold: DEFAULT_THRESHOLD,
            lesson_cap: Some(DEFAULT_LESSON_CAP),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationCycleRecord {
    pub cycle: usize,
    pub window: Window,
    pub shapley: Vec<f64>,
    /// Minimum-contribution agent, whether or not it fell below threshold.
    pub bottleneck: Option<AgentId>,
    pub triggered: bool,
    pub lessons: Option<LessonSet>,
    pub prompt_versions_after: Vec<u32>,
}

/// Coalition values for one window: every viable coalition and its worth.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionGame {
    pub coalitions: Vec<Coalition>,
    pub values: Vec<f64>,
}

impl CoalitionGame {
    pub fn value_map(&self) -> HashMap<Coalition, f64> {
        self.coalitions
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .collect()
    }
}

/// Runs one optimization cycle over `window` and updates `roster` in place.
///
/// Contributions come from the pruned Shapley engine over `game`; only the
/// bottleneck's prompt can change, and only when the cycle triggers.
#[allow(clippy::too_many_arguments)]
pub fn run_cycle<R: Reflector + ?Sized>(
    cycle: usize,
    graph: &WorkflowGraph,
    roster: &mut AgentRoster,
    history: &HistoryStore,
    window: &Window,
    game: &CoalitionGame,
    reflector: &R,
    config: &CgopoConfig,
) -> Result<OptimizationCycleRecord, CgopoError> {
    if window.len() < 2 {
        return Err(CgopoError::WindowTooShort {
            window: window.id,
            days: window.len(),
        });
    }
    let values = game.value_map();
    let mut v = |s: Coalition| -> Result<f64, BoxError> { Ok(values.get(&s).copied().unwrap_or(0.0)) };
    let attribution = shapley_dag(graph, &mut v)?;
    let phi = attribution.values;

    let bottleneck = argmin(&phi).map(|(i, _)| AgentId::new(i));
    let target = identify_bottleneck(&phi, config.threshold);
    let mut lessons = None;
    if let Some(target) = target {
        let (failures, successes) = extract_cases(history.records(), target, window);
        let set = reflect(
            cycle,
            target,
            graph.name(target),
            phi[target.index()],
            &failures,
            &successes,
            reflector,
        )?;
        let updated = metamorphose(&roster.spec(target).prompt, &set, config.lesson_cap);
        roster.set_prompt(target, updated);
        lessons = Some(set);
    }

    Ok(OptimizationCycleRecord {
        cycle,
        window: *window,
        shapley: phi,
        bottleneck,
        triggered: target.is_some(),
        lessons,
        prompt_versions_after: roster.prompt_versions(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{TradeAction, LESSON_DELIMITER};
    use crate::coalition::enumerate_viable;
    use proptest::prelude::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(d as u64)
    }

    fn window(id: usize, start: usize, end: usize) -> Window {
        Window {
            id,
            start,
            end,
            start_date: date(start as u32 + 1),
            end_date: date(end as u32),
        }
    }

    fn record(day: usize, agent: usize, reward: f64) -> HistoryRecord {
        HistoryRecord {
            day,
            date: date(day as u32 + 1),
            agent: AgentId::new(agent),
            state: format!("d{day}"),
            action: AgentOutput::Decision {
                action: TradeAction::Buy,
                confidence: 0.5,
            },
            reward,
        }
    }

    #[test]
    fn bottleneck_examples() {
        assert_eq!(identify_bottleneck(&[0.3, -0.1, 0.2], 0.0), Some(AgentId::new(1)));
        assert_eq!(identify_bottleneck(&[0.3, 0.1], 0.0), None);
        assert_eq!(identify_bottleneck(&[-0.2, -0.2], 0.0), Some(AgentId::new(0)));
        assert_eq!(identify_bottleneck(&[], 0.0), None);
    }

    #[test]
    fn bottleneck_tie_break_survives_swap() {
        // same tied values, different placement: lowest index always wins
        assert_eq!(identify_bottleneck(&[0.5, -0.2, -0.2], 0.0), Some(AgentId::new(1)));
        assert_eq!(identify_bottleneck(&[-0.2, 0.5, -0.2], 0.0), Some(AgentId::new(0)));
    }

    #[test]
    fn zero_reward_counts_as_success() {
        let h = vec![record(0, 0, -0.01), record(1, 0, 0.0), record(2, 0, 0.02)];
        let (f, s) = extract_cases(&h, AgentId::new(0), &window(0, 0, 3));
        assert_eq!((f.len(), s.len()), (1, 2));
        assert_eq!(s[0].day, 1);
    }

    #[test]
    fn empty_window_yields_no_cases() {
        let h = vec![record(0, 0, -0.01)];
        let (f, s) = extract_cases(&h, AgentId::new(0), &window(0, 5, 5));
        assert!(f.is_empty() && s.is_empty());
    }

    #[test]
    fn all_negative_week() {
        let h: Vec<_> = (0..5).map(|d| record(d, 2, -0.01 * (d as f64 + 1.0))).collect();
        let (f, s) = extract_cases(&h, AgentId::new(2), &window(0, 0, 5));
        assert_eq!((f.len(), s.len()), (5, 0));
        assert!(f.windows(2).all(|w| w[0].day < w[1].day));
    }

    #[test]
    fn reflection_on_all_failures_dampens() {
        let failures: Vec<_> = (0..5).map(|d| record(d, 0, -0.02)).collect();
        let set = reflect(3, AgentId::new(0), "TRA", -0.3, &failures, &[], &MockReflector).unwrap();
        assert_eq!((set.failure_count, set.success_count), (5, 0));
        assert!(set.text_blocks[0].contains("failure_rate=1.000"));
        assert!(set.text_blocks[0].contains("mean_negative_reward=-0.020000"));
        assert_eq!(set.text_blocks[1], DIRECTIVE_DAMPEN);
    }

    #[test]
    fn reflection_without_failures_has_no_directive() {
        let successes: Vec<_> = (0..5).map(|d| record(d, 0, 0.01)).collect();
        let set = reflect(0, AgentId::new(0), "TRA", -0.1, &[], &successes, &MockReflector).unwrap();
        assert!(set.text_blocks[0].contains("failure_rate=0.000"));
        assert_eq!(set.text_blocks.len(), 1);
        assert!(!set.text_blocks.iter().any(|b| b.contains("[[calibrate")));
    }

    #[test]
    fn reflection_is_deterministic() {
        let cases: Vec<_> = (0..4)
            .map(|d| record(d, 1, if d % 2 == 0 { -0.01 } else { 0.01 }))
            .collect();
        let (f, s) = extract_cases(&cases, AgentId::new(1), &window(0, 0, 4));
        let a = reflect(1, AgentId::new(1), "TAA", -0.05, &f, &s, &MockReflector).unwrap();
        let b = reflect(1, AgentId::new(1), "TAA", -0.05, &f, &s, &MockReflector).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflector_sees_template_and_context() {
        struct Capture(std::cell::RefCell<String>);
        impl Reflector for Capture {
            fn reflect(&self, request: &ReflectionRequest<'_>) -> Result<Vec<String>, BoxError> {
                *self.0.borrow_mut() = request.prompt.clone();
                Ok(vec![])
            }
        }
        let c = Capture(Default::default());
        let failures = vec![record(0, 0, -0.01)];
        reflect(0, AgentId::new(0), "NAA", -0.2, &failures, &[], &c).unwrap();
        let prompt = c.0.borrow();
        assert!(prompt.starts_with(REFLECTION_TEMPLATE));
        assert!(prompt.contains("Agent: NAA"));
        assert!(prompt.contains("Failure cases (1)"));
    }

    fn lessons(blocks: &[&str]) -> LessonSet {
        LessonSet {
            cycle: 0,
            target: AgentId::new(0),
            text_blocks: blocks.iter().map(|s| s.to_string()).collect(),
            failure_count: 0,
            success_count: 0,
        }
    }

    #[test]
    fn metamorphosis_appends_and_versions() {
        let mut p = PromptState::new("base");
        p.version = 3;
        let next = metamorphose(&p, &lessons(&["L"]), None);
        assert_eq!(next.version, 4);
        assert_eq!(next.base_text, "base");
        assert!(next.render().ends_with("L"));

        let again = metamorphose(&next, &lessons(&["M"]), None);
        assert_eq!(again.render(), format!("base{LESSON_DELIMITER}L{LESSON_DELIMITER}M"));
    }

    #[test]
    fn empty_lessons_still_bump_version() {
        let p = PromptState::new("base");
        let next = metamorphose(&p, &lessons(&[]), None);
        assert_eq!(next.version, 1);
        assert_eq!(next.render(), p.render());
    }

    #[test]
    fn lesson_cap_evicts_oldest() {
        let mut p = PromptState::new("base");
        for i in 0..7 {
            p = metamorphose(&p, &lessons(&[&format!("L{i}")]), Some(5));
        }
        assert_eq!(p.version, 7);
        assert_eq!(p.lesson_blocks, vec!["L2", "L3", "L4", "L5", "L6"]);
    }

    #[test]
    fn window_too_short() {
        let g = WorkflowGraph::reference();
        let mut roster = AgentRoster::mock_default(&g, 0);
        let game = CoalitionGame {
            coalitions: vec![],
            values: vec![],
        };
        let err = run_cycle(
            0,
            &g,
            &mut roster,
            &HistoryStore::default(),
            &window(0, 0, 1),
            &game,
            &MockReflector,
            &CgopoConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CgopoError::WindowTooShort { days: 1, .. }));
    }

    /// Additive game on the reference graph where each agent adds its own
    /// weight to every viable coalition containing it.
    fn additive_game(g: &WorkflowGraph, weights: &[f64]) -> CoalitionGame {
        let coalitions = enumerate_viable(g).unwrap();
        let values = coalitions
            .iter()
            .map(|s| s.iter().map(|a| weights[a.index()]).sum())
            .collect();
        CoalitionGame { coalitions, values }
    }

    fn history_for(agent: usize, days: std::ops::Range<usize>, reward: f64) -> HistoryStore {
        let mut h = HistoryStore::default();
        for d in days {
            h.append(record(d, agent, reward));
        }
        h
    }

    #[test]
    fn untriggered_cycle_changes_nothing() {
        let g = WorkflowGraph::reference();
        let mut roster = AgentRoster::mock_default(&g, 0);
        let before = roster.prompts();
        let game = additive_game(&g, &[0.1; 7]);
        let rec = run_cycle(
            0,
            &g,
            &mut roster,
            &HistoryStore::default(),
            &window(0, 0, 5),
            &game,
            &MockReflector,
            &CgopoConfig::default(),
        )
        .unwrap();
        assert!(!rec.triggered);
        assert!(rec.lessons.is_none());
        assert_eq!(roster.prompts(), before);
        assert_eq!(rec.prompt_versions_after, vec![0; 7]);
    }

    #[test]
    fn trader_bottleneck_is_optimized() {
        let g = WorkflowGraph::reference();
        let tra = g.agent("TRA").unwrap();
        let mut roster = AgentRoster::mock_default(&g, 0);
        let mut w = [0.1; 7];
        w[tra.index()] = -0.5;
        let game = additive_game(&g, &w);
        let history = history_for(tra.index(), 0..5, -0.01);
        let rec = run_cycle(
            0,
            &g,
            &mut roster,
            &history,
            &window(0, 0, 5),
            &game,
            &MockReflector,
            &CgopoConfig::default(),
        )
        .unwrap();

        // stage-by-stage replay of the same cycle
        let values = game.value_map();
        let mut v = |s: Coalition| -> Result<f64, BoxError> { Ok(values.get(&s).copied().unwrap_or(0.0)) };
        let phi = shapley_dag(&g, &mut v).unwrap().values;
        assert_eq!(rec.shapley, phi);
        assert_eq!(identify_bottleneck(&phi, 0.0), Some(tra));
        let (f, s) = extract_cases(history.records(), tra, &window(0, 0, 5));
        let expected = reflect(0, tra, "TRA", phi[tra.index()], &f, &s, &MockReflector).unwrap();

        assert!(rec.triggered);
        assert_eq!(rec.bottleneck, Some(tra));
        assert_eq!(rec.lessons.as_ref(), Some(&expected));
        let mut versions = vec![0; 7];
        versions[tra.index()] = 1;
        assert_eq!(rec.prompt_versions_after, versions);
        assert!(roster.spec(tra).prompt.render().contains(DIRECTIVE_DAMPEN));
    }

    #[test]
    fn lesson_flips_next_bottleneck() {
        // agent contributions depend on their prompts: a dampen directive
        // neutralizes the agent's negative weight
        let g = WorkflowGraph::reference();
        let naa = g.agent("NAA").unwrap();
        let taa = g.agent("TAA").unwrap();
        let mut roster = AgentRoster::mock_default(&g, 0);
        let game_for = |roster: &AgentRoster| {
            let mut w = [0.1; 7];
            w[naa.index()] = -0.6;
            w[taa.index()] = -0.3;
            for a in [naa, taa] {
                if roster.spec(a).prompt.render().contains(DIRECTIVE_DAMPEN) {
                    w[a.index()] = 0.05;
                }
            }
            additive_game(&g, &w)
        };
        let mut history = history_for(naa.index(), 0..10, -0.01);
        for r in history_for(taa.index(), 0..10, -0.01).records() {
            history.append(r.clone());
        }
        let cfg = CgopoConfig::default();
        let g1 = game_for(&roster);
        let r1 = run_cycle(
            0,
            &g,
            &mut roster,
            &history,
            &window(0, 0, 5),
            &g1,
            &MockReflector,
            &cfg,
        )
        .unwrap();
        let g2 = game_for(&roster);
        let r2 = run_cycle(
            1,
            &g,
            &mut roster,
            &history,
            &window(1, 5, 10),
            &g2,
            &MockReflector,
            &cfg,
        )
        .unwrap();
        assert_eq!(r1.bottleneck, Some(naa));
        assert_eq!(r2.bottleneck, Some(taa));
        assert!(r2.triggered);
        assert_eq!(r2.prompt_versions_after[naa.index()], 1);
        assert_eq!(r2.prompt_versions_after[taa.index()], 1);
    }

    proptest! {
        #[test]
        fn bottleneck_invariant_under_positive_scaling(
            values in prop::collection::vec(-1.0f64..1.0, 1..10),
            tau in -0.5f64..0.5,
            alpha in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = values.iter().map(|v| v * alpha).collect();
            prop_assert_eq!(
                identify_bottleneck(&values, tau),
                identify_bottleneck(&scaled, tau * alpha)
            );
        }

        #[test]
        fn case_partition_is_exhaustive(rewards in prop::collection::vec(-0.05f64..0.05, 0..20)) {
            let h: Vec<_> = rewards.iter().enumerate().map(|(d, &r)| record(d, 0, r)).collect();
            let w = window(0, 0, rewards.len());
            let (f, s) = extract_cases(&h, AgentId::new(0), &w);
            prop_assert_eq!(f.len() + s.len(), rewards.len());
            prop_assert!(f.iter().all(|r| r.reward < 0.0));
            prop_assert!(s.iter().all(|r| r.reward >= 0.0));
        }
    }
}
