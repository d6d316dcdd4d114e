//! Dependency judgement and graph construction.
//!
//! The model lists `Step i [..] -> Step j [..]` edges; those become a DAG
//! whose longest-path depth from the sources defines the inference batches.
//! Sub-tasks in one batch do not depend on each other and run in parallel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backends, ChatRequest, Prompt};
use crate::error::Result;
use crate::types::{CostLedger, ModelTier, SubTask, Task};

/// `from_index` must be answered before `to_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dependency {
    pub from_index: usize,
    pub to_index: usize,
}

impl Dependency {
    pub fn new(from_index: usize, to_index: usize) -> Self {
        Dependency { from_index, to_index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: Vec<usize>,
    /// Edges kept after cycle repair, sorted.
    pub edges: Vec<Dependency>,
    pub depth: BTreeMap<usize, usize>,
    /// `batches[d]` holds the nodes of depth `d`, ascending.
    pub batches: Vec<Vec<usize>>,
    /// Edges dropped to break cycles, in removal order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<Dependency>,
}

impl DependencyGraph {
    /// Direct prerequisites of `index`, ascending.
    pub fn predecessors(&self, index: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.to_index == index)
            .map(|e| e.from_index)
            .collect()
    }

    /// Strictly sequential graph 1 -> 2 -> ... -> k.
    pub fn chain(subtasks: &[SubTask]) -> Self {
        let deps: Vec<Dependency> = subtasks
            .windows(2)
            .map(|w| Dependency::new(w[0].index, w[1].index))
            .collect();
        build_graph(subtasks, &deps)
    }

    /// Nodes in batch order, which is a topological order.
    pub fn topological_order(&self) -> Vec<usize> {
        self.batches.iter().flatten().copied().collect()
    }

    /// Graphviz rendering with one cluster-free node per sub-task.
    pub fn to_dot(&self, task_id: &str, subtasks: &[SubTask]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape_dot(task_id));
        let _ = writeln!(out, "  rankdir=LR;");
        for st in subtasks {
            let depth = self.depth.get(&st.index).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                "  n{} [label=\"{}: {}\\n(batch {})\"];",
                st.index,
                st.index,
                escape_dot(&st.description),
                depth
            );
        }
        for e in &self.edges {
            let _ = writeln!(out, "  n{} -> n{};", e.from_index, e.to_index);
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

pub const DEPENDENCY_SYSTEM_PROMPT: &str = "Now we have a problem, which we have broken down into many sub-problems. I want you to understand the connection between these sub-problems";

/// Square brackets delimit step text in the answer format, so brackets
/// inside a description are swapped for parentheses.
fn bracket_safe(text: &str) -> String {
    text.trim().replace('[', "(").replace(']', ")")
}

pub fn build_dependency_prompt(task: &Task, subtasks: &[SubTask]) -> Prompt {
    let query = task.query.trim();
    let listing: String = subtasks
        .iter()
        .map(|s| format!("Step {} [ {} ]\n", s.index, bracket_safe(&s.description)))
        .collect();
    let inline: Vec<String> = subtasks
        .iter()
        .map(|s| format!("{}. {}", s.index, s.description.trim()))
        .collect();

    let mut user = String::new();
    let _ = writeln!(
        user,
        "The init problem is {query}. And the sub-problems are {}. Please provide your understanding of the relationships between these sub-problems. Your response must be concise.",
        inline.join(" ")
    );
    user.push('\n');
    user.push_str("Now we need to create standardized connections for the relationships between these sub-problems.\n");
    let _ = writeln!(
        user,
        "Now Given the following subtasks for question: {query}, determine the dependencies between them:"
    );
    user.push('\n');
    user.push_str(&listing);
    user.push('\n');
    user.push_str("Please list the dependencies in the format 'Subproblem A [xxx] -> Subproblem B [xxx]' indicating that Sub-problem A must be completed before Sub-problem B can start.\n");
    user.push_str("Please identify any potential conditional dependencies from a logical perspective.\n\n");
    user.push_str("Answer format: (Please strictly follow the format. Each dependency should be separated by a new line. No explanation is required.)\n");
    user.push_str("Step ID_i [ sub-problem i ] -> Step ID_j [ sub-problem j ]\n");
    user.push_str("Step ID_j [ sub-problem m ] -> Step ID_n [ sub-problem n ] ...\n");
    Prompt::new(DEPENDENCY_SYSTEM_PROMPT, user)
}

/// Removes bracketed spans (tracking nesting) so arrows inside step text
/// are not mistaken for edges.
fn strip_brackets(line: &str) -> String {
    let mut depth = 0usize;
    let mut out = String::with_capacity(line.len());
    for c in line.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

static EDGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:step|subproblem|sub-problem)\s*(\d+)\s*-+>\s*(?:step|subproblem|sub-problem)\s*(\d+)")
        .expect("static regex")
});

/// Parses edge lines. Self-loops and unknown indices are dropped with a
/// warning; duplicates collapse. Unparseable text yields no edges.
pub fn parse_dependencies(response: &str, subtasks: &[SubTask]) -> Vec<Dependency> {
    let known: BTreeSet<usize> = subtasks.iter().map(|s| s.index).collect();
    let mut edges = BTreeSet::new();
    let mut ordered = Vec::new();
    for line in response.lines() {
        let cleaned = strip_brackets(line);
        let Some(caps) = EDGE.captures(&cleaned) else { continue };
        let (Ok(from), Ok(to)) = (caps[1].parse::<usize>(), caps[2].parse::<usize>()) else {
            continue;
        };
        if from == to {
            log::warn!("dropping self-loop on step {from}");
            continue;
        }
        if !known.contains(&from) || !known.contains(&to) {
            log::warn!("dropping edge {from} -> {to}: unknown step");
            continue;
        }
        let dep = Dependency::new(from, to);
        if edges.insert(dep) {
            ordered.push(dep);
        }
    }
    ordered
}

/// Back edges found by a DFS that visits roots and neighbours in ascending
/// index order, in discovery order.
fn back_edges(nodes: &[usize], adjacency: &BTreeMap<usize, BTreeSet<usize>>) -> Vec<Dependency> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: BTreeMap<usize, Mark> = nodes.iter().map(|n| (*n, Mark::New)).collect();
    let mut found = Vec::new();
    for &root in nodes {
        if mark[&root] != Mark::New {
            continue;
        }
        // Explicit stack of (node, remaining successors).
        let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
        mark.insert(root, Mark::Active);
        stack.push((root, adjacency[&root].iter().rev().copied().collect()));
        while let Some((node, pending)) = stack.last_mut() {
            let node = *node;
            match pending.pop() {
                Some(next) => match mark[&next] {
                    Mark::New => {
                        mark.insert(next, Mark::Active);
                        stack.push((next, adjacency[&next].iter().rev().copied().collect()));
                    }
                    Mark::Active => found.push(Dependency::new(node, next)),
                    Mark::Done => {}
                },
                None => {
                    mark.insert(node, Mark::Done);
                    stack.pop();
                }
            }
        }
    }
    found
}

/// Builds the DAG and its batches. Cycles are repaired by repeatedly
/// deleting the last back edge a DFS discovers.
pub fn build_graph(subtasks: &[SubTask], deps: &[Dependency]) -> DependencyGraph {
    let nodes: Vec<usize> = {
        let set: BTreeSet<usize> = subtasks.iter().map(|s| s.index).collect();
        set.into_iter().collect()
    };
    let mut adjacency: BTreeMap<usize, BTreeSet<usize>> = nodes.iter().map(|n| (*n, BTreeSet::new())).collect();
    for d in deps {
        if d.from_index != d.to_index && adjacency.contains_key(&d.to_index) {
            if let Some(out) = adjacency.get_mut(&d.from_index) {
                out.insert(d.to_index);
            }
        }
    }

    let mut removed = Vec::new();
    while let Some(edge) = back_edges(&nodes, &adjacency).pop() {
        log::warn!("dependency cycle: dropping edge {} -> {}", edge.from_index, edge.to_index);
        if let Some(out) = adjacency.get_mut(&edge.from_index) {
            out.remove(&edge.to_index);
        }
        removed.push(edge);
    }

    let edges: Vec<Dependency> = adjacency
        .iter()
        .flat_map(|(from, tos)| tos.iter().map(move |to| Dependency::new(*from, *to)))
        .collect();

    // Longest-path depth in Kahn order.
    let mut indegree: BTreeMap<usize, usize> = nodes.iter().map(|n| (*n, 0)).collect();
    for e in &edges {
        *indegree.get_mut(&e.to_index).expect("known node") += 1;
    }
    let mut depth: BTreeMap<usize, usize> = nodes.iter().map(|n| (*n, 0)).collect();
    let mut ready: Vec<usize> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    while let Some(node) = ready.pop() {
        let here = depth[&node];
        for next in &adjacency[&node] {
            let d = depth.get_mut(next).expect("known node");
            *d = (*d).max(here + 1);
            let deg = indegree.get_mut(next).expect("known node");
            *deg -= 1;
            if *deg == 0 {
                ready.push(*next);
            }
        }
    }

    let levels = depth.values().max().map_or(0, |d| d + 1);
    let mut batches = vec![Vec::new(); levels];
    for (node, d) in &depth {
        batches[*d].push(*node);
    }
    DependencyGraph {
        nodes,
        edges,
        depth,
        batches,
        removed,
    }
}

pub(crate) fn schedule_with_cost(
    backends: &Backends,
    task: &Task,
    subtasks: &[SubTask],
    tier: ModelTier,
    max_tokens: u32,
) -> Result<(DependencyGraph, CostLedger)> {
    if subtasks.len() < 2 {
        return Ok((build_graph(subtasks, &[]), CostLedger::zero()));
    }
    let request = ChatRequest::new(build_dependency_prompt(task, subtasks)).with_max_tokens(max_tokens);
    let (response, ledger) = backends.complete(tier, &request)?;
    let deps = parse_dependencies(&response.text, subtasks);
    Ok((build_graph(subtasks, &deps), ledger))
}

/// Elicits dependencies on `tier` and builds the graph.
pub fn schedule(backends: &Backends, task: &Task, subtasks: &[SubTask], tier: ModelTier) -> Result<DependencyGraph> {
    schedule_with_cost(backends, task, subtasks, tier, 512).map(|(g, _)| g)
}
