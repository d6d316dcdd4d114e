//! Shared domain types: tasks, sub-tasks, model tiers, allocation schemes
//! and cost ledgers.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a sub-task is answered: the on-device small model or the cloud model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTier {
    Device,
    Cloud,
}

impl ModelTier {
    pub const ALL: [ModelTier; 2] = [ModelTier::Device, ModelTier::Cloud];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTier::Device => "device",
            ModelTier::Cloud => "cloud",
        }
    }

    /// Training label: 0 for simple (device), 1 for complex (cloud).
    pub fn label(self) -> u8 {
        match self {
            ModelTier::Device => 0,
            ModelTier::Cloud => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(ModelTier::Device),
            1 => Some(ModelTier::Cloud),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            ModelTier::Device => ModelTier::Cloud,
            ModelTier::Cloud => ModelTier::Device,
        }
    }
}

impl fmt::Display for ModelTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "device" | "slm" | "edge" => Ok(ModelTier::Device),
            "cloud" | "llm" => Ok(ModelTier::Cloud),
            other => Err(Error::Config(format!("unknown model tier {other:?}"))),
        }
    }
}

/// How a final answer is compared against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checker {
    #[default]
    #[serde(alias = "ExactMatch", alias = "exact")]
    ExactMatch,
    #[serde(alias = "NumericMatch", alias = "numeric")]
    NumericMatch,
    #[serde(alias = "ContainsMatch", alias = "contains")]
    ContainsMatch,
}

/// Absolute tolerance used by [`Checker::NumericMatch`].
pub const NUMERIC_TOLERANCE: f64 = 1e-6;

impl Checker {
    pub fn check(self, answer: &str, ground_truth: &str) -> bool {
        match self {
            Checker::ExactMatch => answer.trim() == ground_truth.trim(),
            Checker::NumericMatch => match (parse_decimal(answer), parse_decimal(ground_truth)) {
                (Some(a), Some(b)) => (a - b).abs() <= NUMERIC_TOLERANCE,
                _ => false,
            },
            Checker::ContainsMatch => {
                let needle = ground_truth.trim();
                !needle.is_empty() && answer.contains(needle)
            }
        }
    }
}

/// Parses a decimal, falling back to the last number embedded in the text
/// (so "x = 42" reads as 42). Thousands separators are ignored.
pub fn parse_decimal(text: &str) -> Option<f64> {
    let cleaned: String = text.trim().chars().filter(|c| *c != ',').collect();
    let cleaned = cleaned.trim_end_matches('.');
    if let Ok(v) = cleaned.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    static NUMBER: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?").expect("static regex"));
    NUMBER
        .find_iter(cleaned)
        .last()
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub category: String,
    pub ground_truth: String,
    #[serde(default)]
    pub checker: Checker,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::InvalidTask("task id is empty".into()));
        }
        if self.query.trim().is_empty() {
            return Err(Error::InvalidTask(format!("task {} has an empty query", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub index: usize,
    pub description: String,
}

impl SubTask {
    pub fn new(index: usize, description: impl Into<String>) -> Self {
        SubTask {
            index,
            description: description.into(),
        }
    }
}

/// Checks that indices run 1..=k without gaps and that no description is blank.
pub fn validate_subtasks(subtasks: &[SubTask]) -> Result<()> {
    if subtasks.is_empty() {
        return Err(Error::Empty("sub-task list"));
    }
    for (pos, st) in subtasks.iter().enumerate() {
        if st.index != pos + 1 {
            return Err(Error::InvalidTask(format!(
                "sub-task indices must run 1..={} in order; found {} at position {}",
                subtasks.len(),
                st.index,
                pos + 1
            )));
        }
        if st.description.trim().is_empty() {
            return Err(Error::InvalidTask(format!("sub-task {} has an empty description", st.index)));
        }
    }
    Ok(())
}

/// Total map from sub-task index to the tier that answers it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocationScheme(BTreeMap<usize, ModelTier>);

impl AllocationScheme {
    pub fn new(assignment: BTreeMap<usize, ModelTier>) -> Self {
        AllocationScheme(assignment)
    }

    pub fn uniform(subtasks: &[SubTask], tier: ModelTier) -> Self {
        AllocationScheme(subtasks.iter().map(|s| (s.index, tier)).collect())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, ModelTier)>) -> Self {
        AllocationScheme(pairs.into_iter().collect())
    }

    pub fn get(&self, index: usize) -> Option<ModelTier> {
        self.0.get(&index).copied()
    }

    pub fn set(&mut self, index: usize, tier: ModelTier) {
        self.0.insert(index, tier);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, ModelTier)> + '_ {
        self.0.iter().map(|(i, t)| (*i, *t))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.keys().copied()
    }

    /// Indices assigned to `tier`, ascending.
    pub fn assigned_to(&self, tier: ModelTier) -> Vec<usize> {
        self.iter().filter(|(_, t)| *t == tier).map(|(i, _)| i).collect()
    }

    pub fn count(&self, tier: ModelTier) -> usize {
        self.0.values().filter(|t| **t == tier).count()
    }

    pub fn as_map(&self) -> &BTreeMap<usize, ModelTier> {
        &self.0
    }

    /// Fails unless the scheme's domain is exactly the sub-task index set.
    pub fn check_total(&self, subtasks: &[SubTask]) -> Result<()> {
        let expected = AllocationScheme::uniform(subtasks, ModelTier::Device);
        domain_diff(&expected, self)
    }
}

fn domain_diff(a: &AllocationScheme, b: &AllocationScheme) -> Result<()> {
    let missing: Vec<usize> = a.indices().filter(|i| !b.0.contains_key(i)).collect();
    let extra: Vec<usize> = b.indices().filter(|i| !a.0.contains_key(i)).collect();
    if missing.is_empty() && extra.is_empty() {
        Ok(())
    } else {
        Err(Error::DomainMismatch { missing, extra })
    }
}

/// Hamming distance between two schemes over the same index set.
pub fn scheme_distance(a: &AllocationScheme, b: &AllocationScheme) -> Result<usize> {
    domain_diff(a, b)?;
    Ok(a.iter().filter(|(i, t)| b.get(*i) != Some(*t)).count())
}

/// Wall time, API spend and call/token counters for some unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub wall_seconds: f64,
    pub api_cents: f64,
    pub device_calls: u64,
    pub cloud_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl CostLedger {
    pub fn zero() -> Self {
        CostLedger::default()
    }

    pub fn calls(&self) -> u64 {
        self.device_calls + self.cloud_calls
    }
}

impl Add for CostLedger {
    type Output = CostLedger;

    fn add(self, rhs: CostLedger) -> CostLedger {
        CostLedger {
            wall_seconds: self.wall_seconds + rhs.wall_seconds,
            api_cents: self.api_cents + rhs.api_cents,
            device_calls: self.device_calls + rhs.device_calls,
            cloud_calls: self.cloud_calls + rhs.cloud_calls,
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        *self = *self + rhs;
    }
}

/// Component-wise sum. Real-valued components are summed in ascending
/// order, so the result does not depend on the order of `parts`.
pub fn merge_ledgers(parts: &[CostLedger]) -> CostLedger {
    fn ordered_sum(mut values: Vec<f64>) -> f64 {
        values.sort_by(f64::total_cmp);
        values.into_iter().fold(0.0, |acc, v| acc + v)
    }
    CostLedger {
        wall_seconds: ordered_sum(parts.iter().map(|p| p.wall_seconds).collect()),
        api_cents: ordered_sum(parts.iter().map(|p| p.api_cents).collect()),
        device_calls: parts.iter().map(|p| p.device_calls).sum(),
        cloud_calls: parts.iter().map(|p| p.cloud_calls).sum(),
        prompt_tokens: parts.iter().map(|p| p.prompt_tokens).sum(),
        completion_tokens: parts.iter().map(|p| p.completion_tokens).sum(),
    }
}

/// Suite-level results.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_wall_seconds: f64,
    pub mean_api_cents: f64,
    /// Device share of reasoning time (steps plus the final call).
    pub slm_time_fraction: f64,
    /// Device share of allocated sub-tasks.
    pub slm_subtask_fraction: f64,
}
