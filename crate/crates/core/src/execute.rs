//! On-graph reasoning.
//!
//! Batches run in depth order; members of a batch are issued concurrently,
//! each seeing only its direct prerequisites' answers. A final query over
//! all step answers produces the task's answer, which is then judged.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::backend::{Backends, ChatRequest, Prompt};
use crate::error::{Error, Result};
use crate::schedule::DependencyGraph;
use crate::types::{merge_ledgers, AllocationScheme, CostLedger, ModelTier, SubTask, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub index: usize,
    pub question: String,
    pub tier_used: ModelTier,
    pub answer: String,
    pub token_probs: Vec<f64>,
    pub ledger: CostLedger,
    /// Reused from an earlier pass. The ledger is the original call's and is
    /// left out of this run's totals.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: String,
    pub scheme: AllocationScheme,
    pub steps: Vec<StepResult>,
    pub final_answer: String,
    pub final_tier: ModelTier,
    pub final_ledger: CostLedger,
    pub correct: bool,
    /// Steps plus the final call. Counters and cents are sums; wall time
    /// follows the critical path (slowest member of each batch).
    pub total: CostLedger,
    /// Planning and probing calls made before execution.
    #[serde(default)]
    pub overhead: CostLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskTrace {
    pub fn failed(task_id: &str, scheme: AllocationScheme, error: &Error) -> Self {
        TaskTrace {
            task_id: task_id.to_string(),
            scheme,
            steps: Vec::new(),
            final_answer: String::new(),
            final_tier: ModelTier::Device,
            final_ledger: CostLedger::zero(),
            correct: false,
            total: CostLedger::zero(),
            overhead: CostLedger::zero(),
            error: Some(error.to_string()),
        }
    }

    /// Everything the task cost, including planning.
    pub fn grand_total(&self) -> CostLedger {
        self.total + self.overhead
    }
}

/// Step results by index, typically from an all-device probing pass.
pub type StepCache = BTreeMap<usize, StepResult>;

const STEP_SYSTEM_TEMPLATE: &str = "I have broken this math question down into several smaller questions. I will assign you sub-questions one by one, and provide the results of previous sub-questions as a reference for your reasoning.\nPlease solve the question according to mathematical logic.";

pub fn step_system_prompt(task: &Task) -> String {
    format!(
        "Here is a math word problem. I will first provide a passage of the problem to set the context. Then, I will ask a specific question that requires you to use the information from the problem description, along with calculation and reasoning, to solve it.\nPassage:\n{}\n\n{STEP_SYSTEM_TEMPLATE}",
        task.query.trim()
    )
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn answer_line(step: &StepResult) -> String {
    format!(
        "Sub-question-Id: {}; Sub-question: {}; Answer: {}\n",
        step.index,
        single_line(&step.question),
        single_line(&step.answer)
    )
}

/// Prompt for one sub-task. Only direct prerequisites' answers are included.
pub fn assemble_step_prompt(task: &Task, subtask: &SubTask, predecessors: &[&StepResult]) -> Prompt {
    let mut user = String::new();
    if !predecessors.is_empty() {
        user.push_str("So far, the answers to the resolved sub-questions are as follows: The format is Sub-question-Id: xxx; Sub-question: xxx; Answer: xxx.\n");
        for step in predecessors {
            user.push_str(&answer_line(step));
        }
        let ids: Vec<String> = predecessors.iter().map(|s| s.index.to_string()).collect();
        let _ = writeln!(
            user,
            "Among them, sub-questions {{{}}} are directly related to this sub-question, so please pay special attention to them.",
            ids.join(", ")
        );
    }
    let _ = writeln!(
        user,
        "The sub-question to solve now is {}: {}",
        subtask.index,
        single_line(&subtask.description)
    );
    user.push_str("Based on the information above, please provide a concise and clear answer");
    Prompt::new(step_system_prompt(task), user)
}

/// Prompt for the closing query that turns step answers into a final answer.
pub fn final_answer_prompt(task: &Task, steps: &[StepResult]) -> Prompt {
    let mut user = String::new();
    let _ = writeln!(user, "All sub-questions have been answered. The original question is: {}", task.query.trim());
    user.push_str("The answers to the sub-questions are as follows: The format is Sub-question-Id: xxx; Sub-question: xxx; Answer: xxx.\n");
    for step in steps {
        user.push_str(&answer_line(step));
    }
    user.push_str("Based on these answers, give the final answer to the original question. Put only the final answer on the last line.");
    Prompt::new(step_system_prompt(task), user)
}

/// The deepest batch's majority tier answers the final query; ties go to Device.
pub fn final_tier(graph: &DependencyGraph, scheme: &AllocationScheme) -> ModelTier {
    let Some(last) = graph.batches.last() else {
        return ModelTier::Device;
    };
    let cloud = last.iter().filter(|i| scheme.get(**i) == Some(ModelTier::Cloud)).count();
    if cloud * 2 > last.len() {
        ModelTier::Cloud
    } else {
        ModelTier::Device
    }
}

/// Last nonblank line of the response with markdown decoration removed.
pub fn extract_answer(response: &str) -> String {
    let line = response.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    let line = line.trim().trim_start_matches(['#', '>', '-']).trim();
    line.replace("**", "").replace(['`', '*'], "").trim().to_string()
}

pub fn judge(final_answer: &str, task: &Task) -> bool {
    task.checker.check(&extract_answer(final_answer), &task.ground_truth)
}

/// Outcome of running the step batches without the final query.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRun {
    /// Ordered by sub-task index.
    pub steps: Vec<StepResult>,
    /// Sum over batches of the slowest freshly run member's time.
    pub wall_seconds: f64,
}

enum Pending<'scope> {
    Running(thread::ScopedJoinHandle<'scope, Result<StepResult>>),
    Reused(StepResult),
}

#[derive(Clone, Copy)]
pub struct Executor<'a> {
    backends: &'a Backends,
    config: ExecConfig,
}

impl<'a> Executor<'a> {
    pub fn new(backends: &'a Backends, config: ExecConfig) -> Self {
        Executor { backends, config }
    }

    pub fn backends(&self) -> &'a Backends {
        self.backends
    }

    fn request(&self, prompt: Prompt, want_probs: bool) -> ChatRequest {
        ChatRequest::new(prompt)
            .with_max_tokens(self.config.max_tokens)
            .with_temperature(self.config.temperature)
            .with_token_probs(want_probs)
    }

    fn answer_step(
        &self,
        task: &Task,
        subtask: &SubTask,
        tier: ModelTier,
        predecessors: &[&StepResult],
    ) -> Result<StepResult> {
        let prompt = assemble_step_prompt(task, subtask, predecessors);
        // Device answers feed the confidence scores, so they must carry probabilities.
        let request = self.request(prompt, tier == ModelTier::Device);
        let (response, ledger) = self.backends.complete(tier, &request)?;
        Ok(StepResult {
            index: subtask.index,
            question: subtask.description.clone(),
            tier_used: tier,
            answer: response.text,
            token_probs: response.token_probs,
            ledger,
            cached: false,
        })
    }

    /// Runs every batch in depth order. Device-assigned steps found in
    /// `cache` are reused instead of re-asked.
    pub fn run_steps(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        scheme: &AllocationScheme,
        cache: Option<&StepCache>,
    ) -> Result<StepRun> {
        scheme.check_total(subtasks)?;
        let by_index: BTreeMap<usize, &SubTask> = subtasks.iter().map(|s| (s.index, s)).collect();
        let mut done: BTreeMap<usize, StepResult> = BTreeMap::new();
        let mut wall_seconds = 0.0;

        for batch in &graph.batches {
            let mut results: Vec<Result<StepResult>> = Vec::with_capacity(batch.len());
            thread::scope(|scope| {
                let pending: Vec<_> = batch
                    .iter()
                    .map(|index| {
                        let tier = scheme.get(*index).expect("scheme checked total");
                        let hit = cache
                            .filter(|_| tier == ModelTier::Device)
                            .and_then(|c| c.get(index))
                            .filter(|c| c.tier_used == ModelTier::Device);
                        if let Some(hit) = hit {
                            let mut reused = hit.clone();
                            reused.cached = true;
                            return Pending::Reused(reused);
                        }
                        let subtask = by_index[index];
                        let preds: Vec<&StepResult> =
                            graph.predecessors(*index).iter().map(|p| &done[p]).collect();
                        Pending::Running(scope.spawn(move || self.answer_step(task, subtask, tier, &preds)))
                    })
                    .collect();
                for p in pending {
                    results.push(match p {
                        Pending::Running(h) => h.join().expect("step worker panicked"),
                        Pending::Reused(step) => Ok(step),
                    });
                }
            });

            let mut slowest: f64 = 0.0;
            for result in results {
                let step = result?;
                if !step.cached {
                    slowest = slowest.max(step.ledger.wall_seconds);
                }
                done.insert(step.index, step);
            }
            wall_seconds += slowest;
        }
        Ok(StepRun {
            steps: done.into_values().collect(),
            wall_seconds,
        })
    }

    /// Runs the task under `scheme`. Backend failures produce a trace with
    /// `correct = false` and the error recorded.
    pub fn run_on_graph(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        scheme: &AllocationScheme,
    ) -> TaskTrace {
        self.run_on_graph_cached(task, subtasks, graph, scheme, None)
    }

    pub fn run_on_graph_cached(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        scheme: &AllocationScheme,
        cache: Option<&StepCache>,
    ) -> TaskTrace {
        match self.try_run(task, subtasks, graph, scheme, cache) {
            Ok(trace) => trace,
            Err(err) => {
                log::warn!("task {} failed: {err}", task.id);
                TaskTrace::failed(&task.id, scheme.clone(), &err)
            }
        }
    }

    fn try_run(
        &self,
        task: &Task,
        subtasks: &[SubTask],
        graph: &DependencyGraph,
        scheme: &AllocationScheme,
        cache: Option<&StepCache>,
    ) -> Result<TaskTrace> {
        let run = self.run_steps(task, subtasks, graph, scheme, cache)?;
        let tier = final_tier(graph, scheme);
        let request = self.request(final_answer_prompt(task, &run.steps), false);
        let (response, final_ledger) = self.backends.complete(tier, &request)?;

        let mut parts: Vec<CostLedger> = run.steps.iter().filter(|s| !s.cached).map(|s| s.ledger).collect();
        parts.push(final_ledger);
        let mut total = merge_ledgers(&parts);
        total.wall_seconds = run.wall_seconds + final_ledger.wall_seconds;

        Ok(TaskTrace {
            task_id: task.id.clone(),
            scheme: scheme.clone(),
            correct: judge(&response.text, task),
            final_answer: response.text,
            final_tier: tier,
            final_ledger,
            steps: run.steps,
            total,
            overhead: CostLedger::zero(),
            error: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Checker;

    fn task(checker: Checker, truth: &str) -> Task {
        Task {
            id: "t".into(),
            query: "q".into(),
            category: "math".into(),
            ground_truth: truth.into(),
            checker,
        }
    }

    fn step(index: usize, answer: &str) -> StepResult {
        StepResult {
            index,
            question: format!("question {index}"),
            tier_used: ModelTier::Device,
            answer: answer.into(),
            token_probs: vec![0.9],
            ledger: CostLedger::zero(),
            cached: false,
        }
    }

    #[test]
    fn judge_examples() {
        assert!(judge("42", &task(Checker::ExactMatch, "42")));
        assert!(judge("42.0000001", &task(Checker::NumericMatch, "42")));
        assert!(judge("The answer is (B).", &task(Checker::ContainsMatch, "(B)")));
        assert!(judge("Working...\n\n**42**\n", &task(Checker::ExactMatch, "42")));
        assert!(!judge("42\nactually 43", &task(Checker::ExactMatch, "42")));
    }

    #[test]
    fn step_prompt_without_predecessors() {
        let t = task(Checker::ExactMatch, "1");
        let p = assemble_step_prompt(&t, &SubTask::new(1, "find x"), &[]);
        assert!(!p.user.contains("Sub-question-Id"));
        assert!(!p.user.contains("Among them"));
        assert!(p.user.contains("The sub-question to solve now is 1: find x"));
        assert!(p.system.contains("Passage:\nq"));
    }

    #[test]
    fn step_prompt_lists_predecessors() {
        let t = task(Checker::ExactMatch, "1");
        let (a, b) = (step(1, "x is 3"), step(2, "y is\n4\n"));
        let p = assemble_step_prompt(&t, &SubTask::new(3, "add x and y"), &[&a, &b]);
        assert!(p.user.contains("The format is Sub-question-Id: xxx; Sub-question: xxx; Answer: xxx."));
        assert!(p.user.contains("Sub-question-Id: 1; Sub-question: question 1; Answer: x is 3\n"));
        assert!(p.user.contains("Sub-question-Id: 2; Sub-question: question 2; Answer: y is 4\n"));
        assert!(p.user.contains("sub-questions {1, 2} are directly related"));
    }

    #[test]
    fn final_tier_majority_rule() {
        use crate::schedule::build_graph;
        let st: Vec<SubTask> = (1..=3).map(|i| SubTask::new(i, format!("s{i}"))).collect();
        let g = build_graph(&st, &[]);
        let scheme = |tiers: [ModelTier; 3]| AllocationScheme::from_pairs((1..=3).zip(tiers));
        use ModelTier::{Cloud as C, Device as D};
        assert_eq!(final_tier(&g, &scheme([C, C, D])), C);
        assert_eq!(final_tier(&g, &scheme([C, D, D])), D);
        let g2 = build_graph(&st[..2], &[]);
        let tie = AllocationScheme::from_pairs([(1, C), (2, D)]);
        assert_eq!(final_tier(&g2, &tie), D);
    }
}
