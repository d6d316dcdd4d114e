//! Benchmark harness: task files, routing strategies, metrics, trade-off
//! sweeps and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::adapter::{self, AdapterWeights};
use crate::alphatree::{self, initial_allocation, median, parse_verdict};
use crate::backend::{Backends, ChatRequest, Prompt};
use crate::decompose::{decompose_with_cost, ExemplarSet};
use crate::error::{Error, Result};
use crate::execute::{ExecConfig, Executor, TaskTrace};
use crate::schedule::{schedule_with_cost, DependencyGraph};
use crate::types::{merge_ledgers, AllocationScheme, CostLedger, Metrics, ModelTier, SubTask, Task};
use crate::uncertainty::{rank_by_difficulty, DEFAULT_ALPHA};

/// Default cloud fractions for [`Bench::tradeoff_sweep`].
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Route each sub-task with a trained adapter.
    AdapterDoT,
    /// Device answers first; sub-tasks scoring at or below θ are redone on the cloud.
    ThresholdDoT { theta: Option<f64>, alpha: f64 },
    AllDevice,
    AllCloud,
    /// One cloud judgment per task sends the whole task to one tier.
    SimpleReferral,
    /// Threshold routing over a plain chain instead of the dependency graph.
    SequentialNoGraph { theta: Option<f64>, alpha: f64 },
}

impl Strategy {
    pub fn threshold(theta: Option<f64>) -> Self {
        Strategy::ThresholdDoT { theta, alpha: DEFAULT_ALPHA }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::AdapterDoT => "adapter",
            Strategy::ThresholdDoT { .. } => "threshold",
            Strategy::AllDevice => "all-device",
            Strategy::AllCloud => "all-cloud",
            Strategy::SimpleReferral => "simple-referral",
            Strategy::SequentialNoGraph { .. } => "sequential",
        }
    }

    /// Replaces θ and α on the threshold strategies.
    pub fn with_threshold(self, theta: Option<f64>, alpha: f64) -> Self {
        match self {
            Strategy::ThresholdDoT { .. } => Strategy::ThresholdDoT { theta, alpha },
            Strategy::SequentialNoGraph { .. } => Strategy::SequentialNoGraph { theta, alpha },
            other => other,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "adapter" | "adapter-dot" => Strategy::AdapterDoT,
            "threshold" | "threshold-dot" => Strategy::threshold(None),
            "all-device" | "device" => Strategy::AllDevice,
            "all-cloud" | "cloud" => Strategy::AllCloud,
            "simple-referral" | "referral" => Strategy::SimpleReferral,
            "sequential" | "sequential-no-graph" | "no-graph" => Strategy::SequentialNoGraph {
                theta: None,
                alpha: DEFAULT_ALPHA,
            },
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub cloud_fraction: f64,
    pub metrics: Metrics,
}

/// A decomposed and scheduled task.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub subtasks: Vec<SubTask>,
    pub graph: DependencyGraph,
    pub overhead: CostLedger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    /// Tier that decomposes and schedules.
    pub planner_tier: ModelTier,
    /// Tier whose hidden states feed the adapter.
    pub embed_tier: ModelTier,
    pub workers: usize,
    pub exec: ExecConfig,
    pub plan_max_tokens: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            planner_tier: ModelTier::Device,
            embed_tier: ModelTier::Device,
            workers: 4,
            exec: ExecConfig::default(),
            plan_max_tokens: 512,
        }
    }
}

pub struct Bench<'a> {
    backends: &'a Backends,
    exemplars: &'a ExemplarSet,
    config: BenchConfig,
    pool: rayon::ThreadPool,
}

pub fn referral_prompt(task: &Task) -> Prompt {
    Prompt::new(
        "You judge whether a question is simple enough for a small on-device language model or needs a large cloud model.",
        format!(
            "Task to route: {}\nReply \"simple\" if the small model can answer the whole task reliably, or \"complex\" if it needs the large cloud model.\nAnswer:",
            task.query.trim()
        ),
    )
}

impl<'a> Bench<'a> {
    pub fn new(backends: &'a Backends, exemplars: &'a ExemplarSet, config: BenchConfig) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Bench {
            backends,
            exemplars,
            config,
            pool,
        })
    }

    pub fn executor(&self) -> Executor<'a> {
        Executor::new(self.backends, self.config.exec)
    }

    /// Runs `f` over `items` on the worker pool, keeping input order.
    pub fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    pub fn plan(&self, task: &Task) -> Result<Plan> {
        let tier = self.config.planner_tier;
        let exemplars = self.exemplars.for_category(&task.category);
        let (subtasks, decompose_cost) =
            decompose_with_cost(self.backends, task, exemplars, tier, self.config.plan_max_tokens)?;
        let (graph, schedule_cost) = schedule_with_cost(self.backends, task, &subtasks, tier, self.config.plan_max_tokens)?;
        Ok(Plan {
            subtasks,
            graph,
            overhead: decompose_cost + schedule_cost,
        })
    }

    pub fn plan_all(&self, tasks: &[Task]) -> Vec<Result<Plan>> {
        self.map(tasks, |t| self.plan(t))
    }

    pub fn run_suite(
        &self,
        tasks: &[Task],
        strategy: Strategy,
        weights: Option<&AdapterWeights>,
    ) -> Result<(Metrics, Vec<TaskTrace>)> {
        let plans = self.plan_all(tasks);
        self.run_planned(tasks, &plans, strategy, weights)
    }

    /// Like [`run_suite`](Self::run_suite) with plans made beforehand.
    pub fn run_planned(
        &self,
        tasks: &[Task],
        plans: &[Result<Plan>],
        strategy: Strategy,
        weights: Option<&AdapterWeights>,
    ) -> Result<(Metrics, Vec<TaskTrace>)> {
        if strategy == Strategy::AdapterDoT && weights.is_none() {
            return Err(Error::Config("the adapter strategy needs a weights file".into()));
        }
        let jobs: Vec<(&Task, &Result<Plan>)> = tasks.iter().zip(plans).collect();
        let traces = self.map(&jobs, |(task, plan)| match plan {
            Ok(plan) => self.run_task(task, plan, strategy, weights),
            Err(e) => {
                log::warn!("task {}: planning failed: {e}", task.id);
                TaskTrace::failed(&task.id, AllocationScheme::default(), e)
            }
        });
        Ok((compute_metrics(&traces), traces))
    }

    fn run_task(&self, task: &Task, plan: &Plan, strategy: Strategy, weights: Option<&AdapterWeights>) -> TaskTrace {
        let executor = self.executor();
        let subtasks = &plan.subtasks;
        let run = |graph: &DependencyGraph, scheme: &AllocationScheme, cache, extra: CostLedger| {
            let mut trace = executor.run_on_graph_cached(task, subtasks, graph, scheme, cache);
            trace.overhead = plan.overhead + extra;
            trace
        };
        let fail = |scheme: AllocationScheme, err: &Error, extra: CostLedger| {
            log::warn!("task {}: {err}", task.id);
            let mut trace = TaskTrace::failed(&task.id, scheme, err);
            trace.overhead = plan.overhead + extra;
            trace
        };

        match strategy {
            Strategy::AllDevice | Strategy::AllCloud => {
                let tier = if strategy == Strategy::AllDevice { ModelTier::Device } else { ModelTier::Cloud };
                run(&plan.graph, &AllocationScheme::uniform(subtasks, tier), None, CostLedger::zero())
            }
            Strategy::ThresholdDoT { theta, alpha } | Strategy::SequentialNoGraph { theta, alpha } => {
                let chain;
                let graph = if matches!(strategy, Strategy::SequentialNoGraph { .. }) {
                    chain = DependencyGraph::chain(subtasks);
                    &chain
                } else {
                    &plan.graph
                };
                match alphatree::probe(&executor, task, subtasks, graph, alpha) {
                    Ok(probe) => {
                        let theta = theta.or_else(|| median(probe.scores.values().copied())).unwrap_or(0.0);
                        let scheme = initial_allocation(&probe.scores, theta);
                        run(graph, &scheme, Some(&probe.cache), probe.cost)
                    }
                    Err(e) => fail(AllocationScheme::uniform(subtasks, ModelTier::Device), &e, CostLedger::zero()),
                }
            }
            Strategy::AdapterDoT => {
                let weights = weights.expect("checked by run_planned");
                let mut scheme = AllocationScheme::default();
                for s in subtasks {
                    match adapter::allocate(weights, self.backends, &s.description, self.config.embed_tier) {
                        Ok(tier) => scheme.set(s.index, tier),
                        Err(e) => return fail(scheme, &e, CostLedger::zero()),
                    }
                }
                run(&plan.graph, &scheme, None, CostLedger::zero())
            }
            Strategy::SimpleReferral => {
                let request = ChatRequest::new(referral_prompt(task)).with_max_tokens(16);
                match self.backends.complete(ModelTier::Cloud, &request) {
                    Ok((response, ledger)) => {
                        let tier = parse_verdict(&response.text).unwrap_or_else(|| {
                            log::warn!("task {}: unclear referral verdict {:?}; using cloud", task.id, response.text);
                            ModelTier::Cloud
                        });
                        run(&plan.graph, &AllocationScheme::uniform(subtasks, tier), None, ledger)
                    }
                    Err(e) => fail(AllocationScheme::uniform(subtasks, ModelTier::Cloud), &e.into(), CostLedger::zero()),
                }
            }
        }
    }

    /// For each fraction f, sends the ⌈f·k⌉ least confident sub-tasks of
    /// every task to the cloud and the rest to the device. Confidence comes
    /// from one all-device probe per task, which is not charged to the
    /// points; each point runs from scratch so its endpoints coincide with
    /// the uniform strategies.
    pub fn tradeoff_sweep(&self, tasks: &[Task], fractions: &[f64], alpha: f64) -> Result<Vec<TradeoffPoint>> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("cloud fractions must lie in [0, 1]".into()));
        }
        if fractions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("cloud fractions must be sorted ascending".into()));
        }
        let plans = self.plan_all(tasks);
        let executor = self.executor();
        let jobs: Vec<(&Task, &Result<Plan>)> = tasks.iter().zip(&plans).collect();
        let rankings: Vec<Option<Vec<usize>>> = self.map(&jobs, |(task, plan)| {
            let plan = plan.as_ref().ok()?;
            match alphatree::probe(&executor, task, &plan.subtasks, &plan.graph, alpha) {
                Ok(p) => Some(rank_by_difficulty(&p.scores)),
                Err(e) => {
                    log::warn!("task {}: probe failed: {e}", task.id);
                    None
                }
            }
        });

        let mut points = Vec::with_capacity(fractions.len());
        for &f in fractions {
            let work: Vec<(&Task, &Result<Plan>, &Option<Vec<usize>>)> =
                tasks.iter().zip(&plans).zip(&rankings).map(|((t, p), r)| (t, p, r)).collect();
            let traces = self.map(&work, |(task, plan, ranking)| match (plan, ranking) {
                (Ok(plan), Some(ranking)) => {
                    let scheme = hardest_to_cloud(&plan.subtasks, ranking, f);
                    let mut trace = executor.run_on_graph(task, &plan.subtasks, &plan.graph, &scheme);
                    trace.overhead = plan.overhead;
                    trace
                }
                (Err(e), _) => TaskTrace::failed(&task.id, AllocationScheme::default(), e),
                (Ok(plan), None) => {
                    let err = Error::Config("difficulty probe failed".into());
                    let mut trace = TaskTrace::failed(&task.id, AllocationScheme::default(), &err);
                    trace.overhead = plan.overhead;
                    trace
                }
            });
            points.push(TradeoffPoint {
                cloud_fraction: f,
                metrics: compute_metrics(&traces),
            });
        }
        Ok(points)
    }
}

/// The first ⌈f·k⌉ entries of `ranking` (hardest first) go to Cloud.
pub fn hardest_to_cloud(subtasks: &[SubTask], ranking: &[usize], fraction: f64) -> AllocationScheme {
    let k = subtasks.len();
    let cloud = ((fraction * k as f64) - 1e-9).ceil().clamp(0.0, k as f64) as usize;
    let hard: BTreeSet<usize> = ranking.iter().take(cloud).copied().collect();
    AllocationScheme::from_pairs(subtasks.iter().map(|s| {
        let tier = if hard.contains(&s.index) { ModelTier::Cloud } else { ModelTier::Device };
        (s.index, tier)
    }))
}

/// Aggregates traces in the order given. Means are per task and include
/// planning overhead.
pub fn compute_metrics(traces: &[TaskTrace]) -> Metrics {
    if traces.is_empty() {
        return Metrics::default();
    }
    let n = traces.len() as f64;
    let totals = merge_ledgers(&traces.iter().map(TaskTrace::grand_total).collect::<Vec<_>>());

    let mut device_time = Vec::new();
    let mut all_time = Vec::new();
    for trace in traces {
        for step in &trace.steps {
            all_time.push(step.ledger.wall_seconds);
            if step.tier_used == ModelTier::Device {
                device_time.push(step.ledger.wall_seconds);
            }
        }
        if trace.error.is_none() {
            all_time.push(trace.final_ledger.wall_seconds);
            if trace.final_tier == ModelTier::Device {
                device_time.push(trace.final_ledger.wall_seconds);
            }
        }
    }
    let seconds = |v: Vec<f64>| {
        merge_ledgers(&v.into_iter().map(|s| CostLedger { wall_seconds: s, ..CostLedger::zero() }).collect::<Vec<_>>())
            .wall_seconds
    };
    let (device_time, all_time) = (seconds(device_time), seconds(all_time));

    let assigned: usize = traces.iter().map(|t| t.scheme.len()).sum();
    let on_device: usize = traces.iter().map(|t| t.scheme.count(ModelTier::Device)).sum();

    Metrics {
        accuracy: traces.iter().filter(|t| t.correct).count() as f64 / n,
        mean_wall_seconds: totals.wall_seconds / n,
        mean_api_cents: totals.api_cents / n,
        slm_time_fraction: if all_time > 0.0 { device_time / all_time } else { 0.0 },
        slm_subtask_fraction: if assigned > 0 { on_device as f64 / assigned as f64 } else { 0.0 },
    }
}

/// One task per line. Lines without a `checker` default to exact match.
pub fn load_benchmark(path: &Path) -> Result<Vec<Task>> {
    let text = fs::read_to_string(path)?;
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let missing_checker = value.get("checker").is_none();
        let task: Task = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        task.validate().map_err(|e| parse_err(e.to_string()))?;
        if missing_checker {
            log::warn!("task {}: no checker given; using exact_match", task.id);
        }
        if !seen.insert(task.id.clone()) {
            return Err(Error::DuplicateTask(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

fn round_to(value: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (value * scale).round() / scale
}

fn metrics_json(m: &Metrics) -> Value {
    json!({
        "accuracy": m.accuracy,
        "mean_wall_seconds": round_to(m.mean_wall_seconds, 1),
        "mean_api_cents": round_to(m.mean_api_cents, 2),
        "slm_time_fraction": m.slm_time_fraction,
        "slm_subtask_fraction": m.slm_subtask_fraction,
    })
}

fn csv_fields(m: &Metrics) -> [String; 5] {
    [
        m.accuracy.to_string(),
        format!("{:.1}", m.mean_wall_seconds),
        format!("{:.2}", m.mean_api_cents),
        m.slm_time_fraction.to_string(),
        m.slm_subtask_fraction.to_string(),
    ]
}

const METRIC_COLUMNS: [&str; 5] = [
    "accuracy",
    "mean_wall_seconds",
    "mean_api_cents",
    "slm_time_fraction",
    "slm_subtask_fraction",
];

fn write_csv<'r>(first: &str, rows: impl Iterator<Item = (String, &'r Metrics)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once(first).chain(METRIC_COLUMNS);
    w.write_record(header).map_err(csv_err)?;
    for (label, m) in rows {
        w.write_record(std::iter::once(label).chain(csv_fields(m))).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Report JSON with sorted keys. Cents carry two decimals, seconds one.
pub fn report_json(results: &BTreeMap<String, Metrics>, sweep: Option<&[TradeoffPoint]>) -> Result<String> {
    let mut root = Map::new();
    let strategies: Map<String, Value> = results.iter().map(|(k, m)| (k.clone(), metrics_json(m))).collect();
    root.insert("strategies".into(), Value::Object(strategies));
    if let Some(points) = sweep {
        let rows = points
            .iter()
            .map(|p| {
                let mut row = metrics_json(&p.metrics);
                row["cloud_fraction"] = json!(p.cloud_fraction);
                row
            })
            .collect();
        root.insert("tradeoff".into(), Value::Array(rows));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(root))?;
    text.push('\n');
    Ok(text)
}

pub fn report_csv(results: &BTreeMap<String, Metrics>) -> Result<String> {
    write_csv("strategy", results.iter().map(|(name, m)| (name.clone(), m)))
}

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> Result<String> {
    write_csv("cloud_fraction", points.iter().map(|p| (p.cloud_fraction.to_string(), &p.metrics)))
}

/// Writes `report.json`, `report.csv`, `tradeoff.csv` when a sweep is
/// given, and `traces/<strategy>/<task_id>.json` per trace.
pub fn emit_report(
    dir: &Path,
    results: &BTreeMap<String, Metrics>,
    sweep: Option<&[TradeoffPoint]>,
    traces: &BTreeMap<String, Vec<TaskTrace>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(results, sweep)?)?;
    fs::write(dir.join("report.csv"), report_csv(results)?)?;
    if let Some(points) = sweep {
        fs::write(dir.join("tradeoff.csv"), tradeoff_csv(points)?)?;
    }
    for (strategy, traces) in traces {
        let trace_dir = dir.join("traces").join(sanitize(strategy));
        fs::create_dir_all(&trace_dir)?;
        for trace in traces {
            let name = sanitize(&trace.task_id);
            fs::write(trace_dir.join(format!("{name}.json")), serde_json::to_string_pretty(trace)?)?;
        }
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}
