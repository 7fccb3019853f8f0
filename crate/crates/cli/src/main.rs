mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coalcredit::agents::{infer_roles, load_prompt_bases, AgentError, AgentRoster};
use coalcredit::backtest::market::{
    load_feature_csv, load_market_csv, synthesize_features, synthesize_market, FeatureView, MarketSeries,
};
use coalcredit::backtest::replay::{classical_window_values, compare_engines, evaluate_window};
use coalcredit::backtest::report::{
    format_attribution, format_coalitions, format_comparison, format_cost_table, format_summary, format_validation,
    write_backtest_reports,
};
use coalcredit::backtest::{partition_windows, run_backtest, with_threads, BacktestConfig, BacktestError, Regime};
use coalcredit::cgopo::{CgopoConfig, MockReflector};
use coalcredit::coalition::{coalition_counts, enumerate_viable};
use coalcredit::graph::{load_graph, GraphError, WorkflowGraph};
use coalcredit::shapley::{
    attribution_from_viable, classical_cost, predicted_cost, shapley_from_table, AttributionResult, GhmOptions,
    ShapleyError,
};
use config::{DataSource, Engine, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "coalcredit",
    version,
    about = "Shapley credit assignment for layered agent workflows"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a graph file and print its structure.
    Validate { graph: PathBuf },
    /// List viable coalitions and the pruning ratio.
    Coalitions { graph: Option<PathBuf> },
    /// Attribute one window of a run with the classical and/or pruned engine.
    Shapley {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        engine: Option<Engine>,
        /// Window index to attribute.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Predicted execution counts for a layered topology.
    Cost {
        /// Layer sizes, e.g. 3,3,1. Defaults to the configured graph.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Mandatory flag per layer, e.g. true,true,false. Defaults to all true.
        #[arg(long, value_delimiter = ',')]
        mandatory: Option<Vec<bool>>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Full windowed backtest with and without prompt optimization.
    Backtest {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    lesson_cap: Option<usize>,
    #[arg(long)]
    rf_daily: Option<f64>,
    /// Market CSV; switches the data source from synthetic to CSV.
    #[arg(long)]
    market: Option<PathBuf>,
    #[arg(long, requires = "market")]
    features: Option<PathBuf>,
    #[arg(long, conflicts_with = "market")]
    days: Option<usize>,
    #[arg(long, value_enum, conflicts_with = "market")]
    regime: Option<RegimeArg>,
    #[arg(long, conflicts_with = "market")]
    signal_strength: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RegimeArg {
    Bull,
    Bear,
    Sideways,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Bull => Regime::Bull,
            RegimeArg::Bear => Regime::Bear,
            RegimeArg::Sideways => Regime::Sideways,
        }
    }
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<BacktestError> for Failure {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Io(_) => Failure::Io(e.to_string()),
            BacktestError::NonPositivePrice { .. }
            | BacktestError::DuplicateDate { .. }
            | BacktestError::UnsortedDates { .. }
            | BacktestError::Parse { .. }
            | BacktestError::MissingFeatures { .. }
            | BacktestError::InsufficientData { .. }
            | BacktestError::TooFewReturns(_)
            | BacktestError::Config(_) => Failure::Invalid(e.to_string()),
            BacktestError::Shapley(ShapleyError::Coalition(_)) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ShapleyError> for Failure {
    fn from(e: ShapleyError) -> Self {
        match e {
            ShapleyError::ExecutorFailure { .. }
            | ShapleyError::NonDeterminismDetected { .. }
            | ShapleyError::Evaluation { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::PromptIo { .. } => Failure::Io(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            let mut cfg = RunConfig::parse(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.parallel {
        cfg.parallel = p;
    }
    Ok(cfg)
}

fn apply_run_args(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(g) = &args.graph {
        cfg.graph = Some(g.clone());
    }
    if let Some(w) = args.window_len {
        cfg.window_len = w;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    if let Some(c) = args.lesson_cap {
        cfg.lesson_cap = Some(c);
    }
    if let Some(rf) = args.rf_daily {
        cfg.rf_daily = rf;
    }
    if let Some(market) = &args.market {
        cfg.data = DataSource::Csv {
            market: market.clone(),
            features: args.features.clone(),
        };
    }
    if let DataSource::Synth {
        days,
        regime,
        signal_strength,
        ..
    } = &mut cfg.data
    {
        if let Some(d) = args.days {
            *days = d;
        }
        if let Some(r) = args.regime {
            *regime = r.into();
        }
        if let Some(s) = args.signal_strength {
            *signal_strength = s;
        }
    }
}

fn graph_for(path: Option<&Path>) -> Result<WorkflowGraph, Failure> {
    match path {
        Some(p) => Ok(load_graph(p)?),
        None => Ok(WorkflowGraph::reference()),
    }
}

fn load_data(cfg: &RunConfig) -> Result<(MarketSeries, FeatureView), Failure> {
    match &cfg.data {
        DataSource::Synth {
            seed,
            days,
            regime,
            signal_strength,
        } => Ok(synthesize_market(
            seed.unwrap_or(cfg.seed),
            *days,
            *regime,
            *signal_strength,
        )?),
        DataSource::Csv { market, features } => {
            let series = load_market_csv(market)?;
            let view = match features {
                Some(path) => FeatureView::aligned(&series, &load_feature_csv(path)?)?,
                None => synthesize_features(&series, cfg.seed),
            };
            Ok((series, view))
        }
    }
}

fn roster_for(cfg: &RunConfig, graph: &WorkflowGraph) -> Result<AgentRoster, Failure> {
    let roles = infer_roles(graph);
    let bases = match &cfg.prompts {
        Some(dir) => load_prompt_bases(dir, graph, &roles)?,
        None => roles.iter().map(|r| r.default_prompt().to_string()).collect(),
    };
    Ok(AgentRoster::mock(graph, cfg.seed, &roles, &bases))
}

fn backtest_config(cfg: &RunConfig) -> BacktestConfig {
    BacktestConfig {
        window_len: cfg.window_len,
        cgopo: CgopoConfig {
            threshold: cfg.threshold,
            lesson_cap: cfg.lesson_cap,
        },
        rf_daily: cfg.rf_daily,
        trade_cost: cfg.trade_cost,
        parallelism: cfg.parallel,
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Validate { graph } => {
            let g = load_graph(graph)?;
            print!("{}", format_validation(&g));
        }
        Command::Coalitions { graph } => {
            let g = graph_for(graph.as_deref().or(cfg.graph.as_deref()))?;
            let viable = enumerate_viable(&g).map_err(ShapleyError::from)?;
            let counts = coalition_counts(&g).map_err(ShapleyError::from)?;
            print!("{}", format_coalitions(&g, &viable, &counts));
        }
        Command::Cost {
            layers,
            mandatory,
            graph,
        } => {
            let (sizes, flags) = match layers {
                Some(sizes) => {
                    let flags = mandatory.clone().unwrap_or_else(|| vec![true; sizes.len()]);
                    (sizes.clone(), flags)
                }
                None => {
                    let g = graph_for(graph.as_deref().or(cfg.graph.as_deref()))?;
                    let flags = mandatory.clone().unwrap_or_else(|| g.mandatory_flags().to_vec());
                    (g.layer_sizes(), flags)
                }
            };
            let predicted = predicted_cost(&sizes, &flags)?;
            let classical = classical_cost(sizes.iter().sum());
            print!("{}", format_cost_table(&sizes, &predicted, &classical));
        }
        Command::Shapley { run, engine, window } => {
            apply_run_args(&mut cfg, run);
            if let Some(e) = engine {
                cfg.engine = *e;
            }
            cfg.validate().map_err(Failure::Invalid)?;
            shapley(&cfg, *window)?;
        }
        Command::Backtest { run } => {
            apply_run_args(&mut cfg, run);
            cfg.validate().map_err(Failure::Invalid)?;
            backtest(&cfg)?;
        }
    }
    Ok(())
}

fn shapley(cfg: &RunConfig, window: usize) -> Result<(), Failure> {
    let g = graph_for(cfg.graph.as_deref())?;
    let roster = roster_for(cfg, &g)?;
    let (series, view) = load_data(cfg)?;
    let windows = partition_windows(&series, cfg.window_len)?;
    let w = *windows
        .get(window)
        .ok_or_else(|| Failure::Invalid(format!("window {window} out of range, {} windows", windows.len())))?;
    let viable = enumerate_viable(&g).map_err(ShapleyError::from)?;
    let n = g.agent_count();
    let options = GhmOptions::default();
    println!("window {} ({} to {}), {} agents", w.id, w.start_date, w.end_date, n);

    let measured = with_threads(cfg.parallel, || -> Result<Option<u64>, Failure> {
        match cfg.engine {
            Engine::Both => {
                let cmp = compare_engines(&g, &roster, &series, &view, &w, &viable, options, cfg.rf_daily)?;
                print!("{}", format_comparison(&g, &cmp));
                Ok(Some(cmp.dag_executions_per_episode))
            }
            Engine::Dag => {
                let eval = evaluate_window(&g, &roster, &series, &view, &w, &viable, options, true, cfg.rf_daily)?;
                let mut dag = attribution_from_viable(n, &viable, &eval.values)?;
                dag.agent_executions = eval.days[0].stats.agent_executions;
                dag.cache_hits = eval.days[0].stats.cache_hits;
                print!("{}", format_attribution(&g, "dag", &dag));
                Ok(Some(dag.agent_executions))
            }
            Engine::Exact => {
                let (table, executions) = classical_window_values(&g, &roster, &series, &view, &w, cfg.rf_daily)?;
                let exact = AttributionResult {
                    values: shapley_from_table(n, &table)?,
                    coalition_evaluations: table.len() as u64,
                    agent_executions: executions,
                    cache_hits: 0,
                    elapsed: Default::default(),
                };
                print!("{}", format_attribution(&g, "exact", &exact));
                Ok(None)
            }
        }
    })??;
    if let Some(measured) = measured {
        let predicted = predicted_cost(&g.layer_sizes(), g.mandatory_flags())?;
        println!(
            "predicted dag executions {}, measured {}",
            predicted.total_executions, measured
        );
    }
    Ok(())
}

fn backtest(cfg: &RunConfig) -> Result<(), Failure> {
    let g = graph_for(cfg.graph.as_deref())?;
    let roster = roster_for(cfg, &g)?;
    let (series, view) = load_data(cfg)?;
    let outcome = run_backtest(&g, &roster, &series, &view, &backtest_config(cfg), &MockReflector)?;
    let written = write_backtest_reports(&cfg.out, &g, &roster, &outcome)
        .map_err(|e| Failure::Io(format!("{}: {e}", cfg.out.display())))?;
    print!("{}", format_summary(&outcome.summary));
    println!("{} report files in {}", written.len(), cfg.out.display());
    Ok(())
}
