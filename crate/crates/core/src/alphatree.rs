//! Allocation search for building adapter training data.
//!
//! The α-Tree search ranks sub-tasks by the α-quantile of the device
//! model's token probabilities, splits them at a threshold, and then walks
//! one root-to-leaf path: while the task stays correct it moves the most
//! confident cloud sub-tasks to the device, while it stays wrong it moves
//! the least confident device sub-tasks to the cloud, and it stops once
//! correctness flips or one side runs out. Binary-search and zero-shot
//! searchers are included as baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use num_traits::Float;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, ChatRequest, Prompt};
use crate::error::{Error, Result};
use crate::execute::{Executor, StepCache, TaskTrace};
use crate::schedule::DependencyGraph;
use crate::types::{merge_ledgers, AllocationScheme, CostLedger, ModelTier, SubTask, Task};
use crate::uncertainty::{alpha_quantile, DEFAULT_ALPHA};

/// Retries per halving round in the binary-search baseline.
pub const DEFAULT_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub scheme: AllocationScheme,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub task_id: String,
    pub final_scheme: AllocationScheme,
    pub final_correct: bool,
    pub evaluations: usize,
    /// Every evaluated scheme in order; the first is the starting allocation.
    pub path: Vec<PathEntry>,
    /// All model calls the search made, probing included.
    pub cost: CostLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchOutcome {
    fn from_path(task_id: &str, path: Vec<PathEntry>, cost: CostLedger) -> Self {
        let chosen = path
            .iter()
            .rev()
            .find(|p| p.correct)
            .or(path.last())
            .cloned()
            .expect("search evaluates at least once");
        SearchOutcome {
            task_id: task_id.to_string(),
            final_scheme: chosen.scheme,
            final_correct: chosen.correct,
            evaluations: path.len(),
            path,
            cost,
            error: None,
        }
    }

    fn failed(task_id: &str, path: Vec<PathEntry>, cost: CostLedger, error: String) -> Self {
        let final_scheme = path.last().map(|p| p.scheme.clone()).unwrap_or_default();
        SearchOutcome {
            task_id: task_id.to_string(),
            final_scheme,
            final_correct: false,
            evaluations: path.len(),
            path,
            cost,
            error: Some(error),
        }
    }
}

/// One line of the adapter dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub task_id: String,
    pub subtask_index: usize,
    pub text: String,
    /// 0: device (simple), 1: cloud (complex).
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

/// Device if the score clears `theta` strictly, otherwise Cloud.
pub fn initial_allocation<F: Float>(scores: &BTreeMap<usize, F>, theta: F) -> AllocationScheme {
    AllocationScheme::from_pairs(scores.iter().map(|(i, s)| {
        let tier = if *s > theta { ModelTier::Device } else { ModelTier::Cloud };
        (*i, tier)
    }))
}

pub fn median<F: Float>(values: impl IntoIterator<Item = F>) -> Option<F> {
    let mut v: Vec<F> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / (F::one() + F::one())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaTreeConfig {
    /// Sub-tasks moved per step.
    pub n: usize,
    /// Initial split; `None` uses the median of the task's own scores.
    pub theta: Option<f64>,
    pub alpha: f64,
}

impl Default for AlphaTreeConfig {
    fn default() -> Self {
        AlphaTreeConfig {
            n: 1,
            theta: None,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Deterministic per-task random stream.
pub fn task_rng(seed: u64, task_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(task_id.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(key)
}

fn sum_step_cost(steps: &[crate::execute::StepResult], wall_seconds: f64) -> CostLedger {
    let mut total = merge_ledgers(&steps.iter().map(|s| s.ledger).collect::<Vec<_>>());
    total.wall_seconds = wall_seconds;
    total
}

/// Result of answering every sub-task on the device tier.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub cache: StepCache,
    /// α-quantile score per sub-task; lower means harder.
    pub scores: BTreeMap<usize, f64>,
    pub cost: CostLedger,
}

/// Answers every sub-task on the device in graph order and scores each
/// answer's token probabilities.
pub fn probe(
    executor: &Executor<'_>,
    task: &Task,
    subtasks: &[SubTask],
    graph: &DependencyGraph,
    alpha: f64,
) -> Result<Probe> {
    let all_device = AllocationScheme::uniform(subtasks, ModelTier::Device);
    let run = executor.run_steps(task, subtasks, graph, &all_device, None)?;
    let mut scores = BTreeMap::new();
    for step in &run.steps {
        scores.insert(step.index, alpha_quantile(&step.token_probs, alpha)?);
    }
    let cost = sum_step_cost(&run.steps, run.wall_seconds);
    Ok(Probe {
        cache: run.steps.into_iter().map(|s| (s.index, s)).collect(),
        scores,
        cost,
    })
}

/// Indices on `from` ordered by how readily they should move: for moves to
/// the device the most confident first, for moves to the cloud the least
/// confident first. Ties go to the lower index.
fn move_order(scheme: &AllocationScheme, scores: &BTreeMap<usize, f64>, from: ModelTier) -> Vec<usize> {
    let mut movable = scheme.assigned_to(from);
    movable.sort_by(|a, b| {
        let (sa, sb) = (scores[a], scores[b]);
        let by_score = match from {
            ModelTier::Cloud => sb.total_cmp(&sa),
            ModelTier::Device => sa.total_cmp(&sb),
        };
        by_score.then(a.cmp(b))
    });
    movable
}

/// Runs the search strategies against one executor.
pub struct Searcher<'a> {
    executor: Executor<'a>,
}

impl<'a> Searcher<'a> {
    pub fn new(executor: Executor<'a>) -> Self {
        Searcher { executor }
    }

    pub fn executor(&self) -> &Executor<'a> {
        &self.executor
    }

    fn evaluate(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        scheme: &AllocationScheme,
        cache: Option<&StepCache>,
    ) -> TaskTrace {
        self.executor.run_on_graph_cached(task, subtasks, graph, scheme, cache)
    }

    pub fn alpha_tree_search(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        config: &AlphaTreeConfig,
    ) -> SearchOutcome {
        if config.n == 0 {
            let err = Error::Config("α-Tree step size n must be at least 1".into());
            return SearchOutcome::failed(&task.id, Vec::new(), CostLedger::zero(), err.to_string());
        }
        let probe = match probe(&self.executor, task, subtasks, graph, config.alpha) {
            Ok(p) => p,
            Err(e) => return SearchOutcome::failed(&task.id, Vec::new(), CostLedger::zero(), e.to_string()),
        };
        let mut cost = probe.cost;
        let theta = config
            .theta
            .or_else(|| median(probe.scores.values().copied()))
            .unwrap_or(0.0);
        let mut scheme = initial_allocation(&probe.scores, theta);
        let mut path = Vec::new();

        let trace = self.evaluate(task, subtasks, graph, &scheme, Some(&probe.cache));
        cost += trace.total;
        path.push(PathEntry { scheme: scheme.clone(), correct: trace.correct });
        if let Some(err) = trace.error {
            return SearchOutcome::failed(&task.id, path, cost, err);
        }
        let result = trace.correct;

        loop {
            let (from, to) = if result {
                (ModelTier::Cloud, ModelTier::Device)
            } else {
                (ModelTier::Device, ModelTier::Cloud)
            };
            let order = move_order(&scheme, &probe.scores, from);
            if order.is_empty() {
                break;
            }
            let mut candidate = scheme.clone();
            for index in order.iter().take(config.n) {
                candidate.set(*index, to);
            }
            let trace = self.evaluate(task, subtasks, graph, &candidate, Some(&probe.cache));
            cost += trace.total;
            path.push(PathEntry { scheme: candidate.clone(), correct: trace.correct });
            if let Some(err) = trace.error {
                return SearchOutcome::failed(&task.id, path, cost, err);
            }
            if trace.correct != result {
                break;
            }
            scheme = candidate;
        }
        SearchOutcome::from_path(&task.id, path, cost)
    }

    /// Start all-cloud; while correct, move a random half of the remaining
    /// cloud sub-tasks to the device, retrying a failed halving up to
    /// `attempts` times.
    pub fn binary_search_baseline(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        attempts: usize,
        seed: u64,
    ) -> SearchOutcome {
        let mut rng = task_rng(seed, &task.id);
        let mut scheme = AllocationScheme::uniform(subtasks, ModelTier::Cloud);
        let mut path = Vec::new();
        let mut cost = CostLedger::zero();

        let trace = self.evaluate(task, subtasks, graph, &scheme, None);
        cost += trace.total;
        path.push(PathEntry { scheme: scheme.clone(), correct: trace.correct });
        if let Some(err) = trace.error {
            return SearchOutcome::failed(&task.id, path, cost, err);
        }
        if !trace.correct {
            return SearchOutcome::from_path(&task.id, path, cost);
        }

        loop {
            let cloud = scheme.assigned_to(ModelTier::Cloud);
            if cloud.is_empty() {
                break;
            }
            let half = cloud.len().div_ceil(2);
            let mut accepted = None;
            for _ in 0..attempts.max(1) {
                let mut candidate = scheme.clone();
                for index in cloud.choose_multiple(&mut rng, half) {
                    candidate.set(*index, ModelTier::Device);
                }
                let trace = self.evaluate(task, subtasks, graph, &candidate, None);
                cost += trace.total;
                path.push(PathEntry { scheme: candidate.clone(), correct: trace.correct });
                if let Some(err) = trace.error {
                    return SearchOutcome::failed(&task.id, path, cost, err);
                }
                if trace.correct {
                    accepted = Some(candidate);
                    break;
                }
            }
            match accepted {
                Some(next) => scheme = next,
                None => break,
            }
        }
        SearchOutcome::from_path(&task.id, path, cost)
    }

    /// Asks the cloud model, once per sub-task, whether it is simple enough
    /// for the device. Unclear verdicts default to Cloud.
    pub fn zero_shot_baseline(
        &self,
        task: &Task,
        subtasks: &[SubTask],
    ) -> Result<(AllocationScheme, CostLedger), BackendError> {
        let backends = self.executor.backends();
        let mut scheme = AllocationScheme::default();
        let mut ledgers = Vec::new();
        for subtask in subtasks {
            let request = ChatRequest::new(zero_shot_prompt(task, subtasks, subtask)).with_max_tokens(16);
            let (response, ledger) = backends.complete(ModelTier::Cloud, &request)?;
            ledgers.push(ledger);
            let tier = parse_verdict(&response.text).unwrap_or_else(|| {
                log::warn!(
                    "task {} sub-task {}: unclear difficulty verdict {:?}; using cloud",
                    task.id,
                    subtask.index,
                    response.text
                );
                ModelTier::Cloud
            });
            scheme.set(subtask.index, tier);
        }
        Ok((scheme, merge_ledgers(&ledgers)))
    }

    /// Zero-shot allocation followed by its single evaluation.
    pub fn zero_shot_search(&self, task: &Task, subtasks: &[SubTask], graph: &DependencyGraph) -> SearchOutcome {
        let (scheme, judging) = match self.zero_shot_baseline(task, subtasks) {
            Ok(v) => v,
            Err(e) => return SearchOutcome::failed(&task.id, Vec::new(), CostLedger::zero(), e.to_string()),
        };
        let trace = self.evaluate(task, subtasks, graph, &scheme, None);
        let cost = judging + trace.total;
        let path = vec![PathEntry { scheme, correct: trace.correct }];
        match trace.error {
            Some(err) => SearchOutcome::failed(&task.id, path, cost, err),
            None => SearchOutcome::from_path(&task.id, path, cost),
        }
    }
}

pub fn zero_shot_prompt(task: &Task, subtasks: &[SubTask], current: &SubTask) -> Prompt {
    let mut user = String::new();
    let _ = writeln!(user, "Task: {}", task.query.trim());
    user.push_str("All sub-tasks:\n");
    for s in subtasks {
        let _ = writeln!(user, "{}. {}", s.index, s.description.trim());
    }
    let _ = writeln!(user, "Current sub-task: {}. {}", current.index, current.description.trim());
    user.push_str("Question: Can the current sub-task be answered reliably by a small on-device language model? Reply \"simple\" if the small model suffices or \"complex\" if it needs the large cloud model.\nAnswer:");
    Prompt::new(
        "You judge the difficulty of reasoning sub-tasks for routing between a small and a large language model.",
        user,
    )
}

/// Maps a verdict to a tier by whichever keyword appears first:
/// "simple"/"easy" to Device, "complex"/"hard"/"difficult" to Cloud.
pub fn parse_verdict(text: &str) -> Option<ModelTier> {
    let lower = text.to_ascii_lowercase();
    let first = |words: &[&str]| words.iter().filter_map(|w| lower.find(w)).min();
    match (first(&["simple", "easy"]), first(&["complex", "hard", "difficult"])) {
        (Some(s), Some(c)) => Some(if s < c { ModelTier::Device } else { ModelTier::Cloud }),
        (Some(_), None) => Some(ModelTier::Device),
        (None, Some(_)) => Some(ModelTier::Cloud),
        (None, None) => None,
    }
}

/// One record per sub-task of every correct outcome, labelled by its final tier.
pub fn emit_adapter_dataset(
    outcomes: &[SearchOutcome],
    subtasks_by_task: &BTreeMap<String, Vec<SubTask>>,
) -> Result<Vec<AdapterRecord>> {
    if outcomes.is_empty() {
        return Err(Error::EmptyDataset("no search outcomes".into()));
    }
    let mut records = Vec::new();
    for outcome in outcomes {
        if !outcome.final_correct {
            log::info!("task {}: no correct allocation found; excluded from dataset", outcome.task_id);
            continue;
        }
        let Some(subtasks) = subtasks_by_task.get(&outcome.task_id) else {
            log::warn!("task {}: sub-tasks unknown; excluded from dataset", outcome.task_id);
            continue;
        };
        for st in subtasks {
            let Some(tier) = outcome.final_scheme.get(st.index) else { continue };
            records.push(AdapterRecord {
                task_id: outcome.task_id.clone(),
                subtask_index: st.index,
                text: st.description.clone(),
                label: tier.label(),
                embedding: None,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset("no search outcome ended correct".into()));
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<AdapterRecord>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AdapterRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if record.label > 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("label must be 0 or 1, got {}", record.label),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Population-level comparison axes for searchers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub tasks: usize,
    /// Device share of sub-tasks across all final schemes.
    pub slm_ratio: f64,
    /// Share of tasks whose final scheme is correct.
    pub success_rate: f64,
    pub mean_evaluations: f64,
    pub mean_api_cents: f64,
}

pub fn summarize(outcomes: &[SearchOutcome]) -> SearchSummary {
    let n = outcomes.len().max(1) as f64;
    let subtasks: usize = outcomes.iter().map(|o| o.final_scheme.len()).sum();
    let device: usize = outcomes.iter().map(|o| o.final_scheme.count(ModelTier::Device)).sum();
    let cents = merge_ledgers(&outcomes.iter().map(|o| o.cost).collect::<Vec<_>>()).api_cents;
    SearchSummary {
        tasks: outcomes.len(),
        slm_ratio: if subtasks == 0 { 0.0 } else { device as f64 / subtasks as f64 },
        success_rate: outcomes.iter().filter(|o| o.final_correct).count() as f64 / n,
        mean_evaluations: outcomes.iter().map(|o| o.evaluations).sum::<usize>() as f64 / n,
        mean_api_cents: cents / n,
    }
}
