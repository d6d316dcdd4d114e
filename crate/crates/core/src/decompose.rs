//! Task decomposition: few-shot meta-prompt and numbered-list parsing.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backends, ChatRequest, Prompt};
use crate::error::{Error, Result};
use crate::types::{CostLedger, ModelTier, SubTask, Task};

/// Decompositions longer than this are truncated.
pub const MAX_SUBTASKS: usize = 20;

/// A hand-written decomposition shown to the model as an example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposeExemplar {
    pub question: String,
    pub steps: Vec<String>,
}

impl DecomposeExemplar {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Config(format!(
                "exemplar {:?} needs at least one nonempty step",
                self.question
            )));
        }
        Ok(())
    }
}

/// Exemplars keyed by task category. The `"default"` entry serves
/// categories without their own list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExemplarSet(pub BTreeMap<String, Vec<DecomposeExemplar>>);

#[derive(Deserialize)]
#[serde(untagged)]
enum ExemplarFile {
    ByCategory(BTreeMap<String, Vec<DecomposeExemplar>>),
    Flat(Vec<DecomposeExemplar>),
}

impl ExemplarSet {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ExemplarFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let set = match file {
            ExemplarFile::ByCategory(map) => ExemplarSet(map),
            ExemplarFile::Flat(list) => ExemplarSet(BTreeMap::from([("default".to_string(), list)])),
        };
        for ex in set.0.values().flatten() {
            ex.validate()?;
        }
        Ok(set)
    }

    pub fn for_category(&self, category: &str) -> &[DecomposeExemplar] {
        self.0
            .get(category)
            .or_else(|| self.0.get("default"))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn write_step_block(out: &mut String, question: &str, steps: &[String]) {
    let _ = writeln!(out, "To solve the question \"{question}\", we need to know:");
    for (i, step) in steps.iter().enumerate() {
        let end = if i + 1 == steps.len() { "." } else { "," };
        let _ = writeln!(out, "\"{}. {}\"{end}", i + 1, step.trim());
    }
}

/// Builds the decomposition meta-prompt. The output depends only on its inputs.
pub fn build_decompose_prompt(task: &Task, exemplars: &[DecomposeExemplar]) -> Result<Prompt> {
    if exemplars.is_empty() {
        return Err(Error::Config(format!(
            "no decomposition exemplars for category {:?}",
            task.category
        )));
    }
    for ex in exemplars {
        ex.validate()?;
    }
    let kind = if task.category.trim().is_empty() {
        "reasoning"
    } else {
        task.category.trim()
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "I will now give you a {kind} problem. The type of problem is {kind}. Please break this problem down into several easy-to-solve steps."
    );
    out.push('\n');
    let _ = writeln!(out, "{} examples are as follows:", exemplars.len());
    for ex in exemplars {
        let _ = writeln!(out, "Question: {}", ex.question.trim());
        write_step_block(&mut out, ex.question.trim(), &ex.steps);
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "Now the command is {}, please decompose it into easy-to-solve steps like the examples.",
        task.query.trim()
    );
    out.push_str(
        "Answer Format: (Please write each broken-down question step on a separate line, starting with a number.)\n\n",
    );
    out.push_str("To solve the question \"xxx\", we need to know:\n");
    out.push_str("\"1. question step_1\",\n\"2. question step_2\",\n\"3. question step_3\".\n...\n");
    Ok(Prompt::user(out))
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)\.\s*(.*)$").expect("static regex"));

/// Extracts numbered lines (optionally wrapped in double quotes) and
/// renumbers them 1..k in order of appearance.
pub fn parse_subtasks(response: &str) -> Result<Vec<SubTask>> {
    let mut steps = Vec::new();
    for line in response.lines() {
        let line = line.trim();
        let (quoted, body) = match line.strip_prefix('"') {
            Some(rest) => (true, rest),
            None => (false, line),
        };
        let Some(caps) = NUMBERED.captures(body) else { continue };
        let mut text = caps[2].trim();
        if quoted {
            text = text.strip_suffix(',').or_else(|| text.strip_suffix('.')).unwrap_or(text);
            text = text.strip_suffix('"').unwrap_or(text).trim();
        }
        if !text.is_empty() {
            steps.push(text.to_string());
        }
    }
    if steps.is_empty() {
        return Err(Error::DecomposeParse {
            task_id: None,
            raw: response.to_string(),
        });
    }
    if steps.len() > MAX_SUBTASKS {
        log::warn!("decomposition has {} steps; keeping the first {MAX_SUBTASKS}", steps.len());
        steps.truncate(MAX_SUBTASKS);
    }
    Ok(steps
        .into_iter()
        .enumerate()
        .map(|(i, d)| SubTask::new(i + 1, d))
        .collect())
}

/// Renders sub-tasks in the canonical `"<i>. <text>"` form.
pub fn format_subtasks(subtasks: &[SubTask]) -> String {
    subtasks
        .iter()
        .map(|s| format!("{}. {}\n", s.index, s.description))
        .collect()
}

pub(crate) fn decompose_with_cost(
    backends: &Backends,
    task: &Task,
    exemplars: &[DecomposeExemplar],
    tier: ModelTier,
    max_tokens: u32,
) -> Result<(Vec<SubTask>, CostLedger)> {
    let prompt = build_decompose_prompt(task, exemplars)?;
    let request = ChatRequest::new(prompt).with_max_tokens(max_tokens);
    let (response, ledger) = backends.complete(tier, &request)?;
    let subtasks = parse_subtasks(&response.text).map_err(|e| e.for_task(&task.id))?;
    Ok((subtasks, ledger))
}

/// Asks the model on `tier` to split `task` into sub-tasks.
pub fn decompose(
    backends: &Backends,
    task: &Task,
    exemplars: &[DecomposeExemplar],
    tier: ModelTier,
) -> Result<Vec<SubTask>> {
    decompose_with_cost(backends, task, exemplars, tier, 512).map(|(s, _)| s)
}
