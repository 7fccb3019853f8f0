//! Plain-text renderings of graphs, costs, attributions and backtest runs.
//!
//! Everything here is a pure function of its inputs so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::replay::EngineComparison;
use super::{BacktestOutcome, PassResult, Summary, WindowReport};
use crate::agents::AgentRoster;
use crate::coalition::{Coalition, CoalitionCounts};
use crate::graph::WorkflowGraph;
use crate::shapley::{AttributionResult, ClassicalCost, PredictedCost};

pub fn coalition_label(graph: &WorkflowGraph, coalition: Coalition) -> String {
    let names: Vec<&str> = coalition.iter().map(|a| graph.name(a)).collect();
    format!("{{{}}}", names.join(","))
}

pub fn format_counts(counts: &CoalitionCounts) -> String {
    format!(
        "{}/{} ({:.1}% pruned)",
        counts.viable,
        counts.total,
        counts.reduction_fraction * 100.0
    )
}

pub fn format_validation(graph: &WorkflowGraph) -> String {
    let mut out = format!(
        "{} layers, {} sources, sink {}\n",
        graph.layers().len(),
        graph.sources().len(),
        graph.name(graph.sink())
    );
    for (i, layer) in graph.layers().iter().enumerate() {
        let names: Vec<&str> = layer.iter().map(|&a| graph.name(a)).collect();
        let tag = if graph.mandatory_flags()[i] {
            "mandatory"
        } else {
            "optional"
        };
        let _ = writeln!(out, "layer {i} ({tag}): {}", names.join(" "));
    }
    let _ = writeln!(out, "edges: {}", graph.edges().len());
    out
}

pub fn format_coalitions(graph: &WorkflowGraph, viable: &[Coalition], counts: &CoalitionCounts) -> String {
    let mut out = String::new();
    for (i, &s) in viable.iter().enumerate() {
        let _ = writeln!(out, "{:>4}  {}", i + 1, coalition_label(graph, s));
    }
    let _ = writeln!(out, "{}", format_counts(counts));
    out
}

pub fn format_cost_table(layer_sizes: &[usize], predicted: &PredictedCost, classical: &ClassicalCost) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8}{:>8}{:>12}{:>12}",
        "layer", "agents", "configs", "executions"
    );
    for (i, (&size, &configs)) in layer_sizes.iter().zip(&predicted.unique_configs).enumerate() {
        let _ = writeln!(out, "{:<8}{:>8}{:>12}{:>12}", i, size, configs, configs * size as u64);
    }
    let _ = writeln!(
        out,
        "unique configurations: [{}], total {}",
        predicted
            .unique_configs
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", "),
        predicted.total_executions
    );
    let _ = writeln!(out, "{:<12}{:>14}{:>14}", "engine", "coalitions", "executions");
    let _ = writeln!(
        out,
        "{:<12}{:>14}{:>14}",
        "classical", classical.coalitions, classical.executions
    );
    let _ = writeln!(
        out,
        "{:<12}{:>14}{:>14}",
        "dag", predicted.viable_coalitions, predicted.total_executions
    );
    let saved = 1.0 - predicted.total_executions as f64 / classical.executions as f64;
    let _ = writeln!(out, "execution reduction: {:.1}%", saved * 100.0);
    out
}

fn phi_table(graph: &WorkflowGraph, columns: &[(&str, &AttributionResult)]) -> String {
    let mut out = format!("{:<10}", "agent");
    for (label, _) in columns {
        let _ = write!(out, "{label:>16}");
    }
    out.push('\n');
    for a in graph.agents() {
        let _ = write!(out, "{:<10}", graph.name(a));
        for (_, r) in columns {
            let _ = write!(out, "{:>16.9}", r.values[a.index()]);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "total");
    for (_, r) in columns {
        let _ = write!(out, "{:>16.9}", r.total());
    }
    out.push('\n');
    out
}

pub fn format_attribution(graph: &WorkflowGraph, label: &str, result: &AttributionResult) -> String {
    let mut out = phi_table(graph, &[(label, result)]);
    let _ = writeln!(
        out,
        "{label}: {} coalitions, {} agent executions per episode",
        result.coalition_evaluations, result.agent_executions
    );
    out
}

pub fn format_comparison(graph: &WorkflowGraph, cmp: &EngineComparison) -> String {
    let mut out = phi_table(graph, &[("exact", &cmp.exact), ("dag", &cmp.dag)]);
    let _ = writeln!(out, "max |exact - dag|: {:.3e}", cmp.max_abs_diff);
    let _ = writeln!(out, "{:<12}{:>14}{:>14}", "engine", "coalitions", "executions");
    let _ = writeln!(
        out,
        "{:<12}{:>14}{:>14}",
        "classical", cmp.classical_coalitions, cmp.classical_executions_per_episode
    );
    let _ = writeln!(
        out,
        "{:<12}{:>14}{:>14}",
        "dag", cmp.dag_coalitions, cmp.dag_executions_per_episode
    );
    out
}

pub fn format_window(graph: &WorkflowGraph, report: &WindowReport) -> String {
    let w = &report.window;
    let mut out = format!(
        "window {} days {}..{} ({} to {})\n",
        w.id, w.start, w.end, w.start_date, w.end_date
    );
    let versions: Vec<String> = report.prompt_versions.iter().map(u32::to_string).collect();
    let _ = writeln!(out, "prompt versions: {}", versions.join(" "));
    let _ = writeln!(
        out,
        "grand coalition: return {:.6} sharpe {:.6} maxdd {:.6}",
        report.metrics.total_return, report.metrics.sharpe, report.metrics.max_drawdown
    );
    let c = &report.cost;
    let _ = writeln!(
        out,
        "cost: {}/{} coalitions, {} executions ({} per day), {} cache hits",
        c.coalitions_evaluated, c.coalitions_total, c.agent_executions, c.executions_per_day, c.cache_hits
    );
    out.push_str("\nshapley\n");
    for a in graph.agents() {
        let _ = writeln!(out, "{:<10}{:>16.9}", graph.name(a), report.shapley[a.index()]);
    }
    out.push_str("\ncoalition sharpe\n");
    for (&s, v) in report.coalitions.iter().zip(&report.coalition_sharpe) {
        let _ = writeln!(out, "{:>16.9}  {}", v, coalition_label(graph, s));
    }
    out
}

pub fn format_summary(summary: &Summary) -> String {
    let mut out = format!(
        "{} {} to {}: {} windows, {} decision days, {} triggered cycles\n",
        summary.symbol, summary.start, summary.end, summary.windows, summary.decision_days, summary.triggered_cycles
    );
    let _ = writeln!(out, "{:<10}{:>12}{:>12}{:>12}", "strategy", "return", "sharpe", "maxdd");
    for row in &summary.rows {
        let m = &row.metrics;
        let _ = writeln!(
            out,
            "{:<10}{:>12.6}{:>12.6}{:>12.6}",
            row.strategy, m.total_return, m.sharpe, m.max_drawdown
        );
    }
    out
}

fn write(path: &Path, text: &str, written: &mut Vec<PathBuf>) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    written.push(path.to_path_buf());
    Ok(())
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> io::Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).map_err(io::Error::other)?);
        out.push('\n');
    }
    Ok(out)
}

fn write_windows(dir: &Path, graph: &WorkflowGraph, pass: &PassResult, written: &mut Vec<PathBuf>) -> io::Result<()> {
    for report in &pass.windows {
        let path = dir.join(format!("window_{:03}.txt", report.window.id));
        write(&path, &format_window(graph, report), written)?;
    }
    Ok(())
}

/// Writes every backtest artifact under `dir` and returns the paths written.
pub fn write_backtest_reports(
    dir: &Path,
    graph: &WorkflowGraph,
    initial: &AgentRoster,
    outcome: &BacktestOutcome,
) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    write(
        &dir.join("summary.txt"),
        &format_summary(&outcome.summary),
        &mut written,
    )?;
    write_windows(&dir.join("windows"), graph, &outcome.optimized, &mut written)?;
    write_windows(&dir.join("frozen"), graph, &outcome.frozen, &mut written)?;
    write(
        &dir.join("cycles.jsonl"),
        &jsonl(&outcome.optimized.cycles)?,
        &mut written,
    )?;
    let lessons = outcome.optimized.cycles.iter().filter_map(|c| c.lessons.as_ref());
    write(&dir.join("lessons.jsonl"), &jsonl(lessons)?, &mut written)?;
    for spec in initial.specs() {
        let path = dir
            .join("prompts")
            .join(&spec.name)
            .join(format!("v{}.txt", spec.prompt.version));
        write(&path, &spec.prompt.render(), &mut written)?;
    }
    for rev in &outcome.optimized.revisions {
        let name = graph.name(rev.agent);
        let path = dir
            .join("prompts")
            .join(name)
            .join(format!("v{}.txt", rev.prompt.version));
        write(&path, &rev.prompt.render(), &mut written)?;
    }
    Ok(written)
}
