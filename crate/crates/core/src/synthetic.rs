//! Scripted task populations for offline runs.
//!
//! Every sub-task carries a hidden bit saying whether the device model can
//! answer it. The device answers solvable sub-tasks correctly with high
//! token probabilities and the rest wrongly with low ones; the cloud always
//! answers correctly. A task comes out right exactly when no device-answered
//! sub-task was unsolvable, so the best allocation is known in closed form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{BackendProfile, Backends, DifficultyRule, MockReply, MockRule, MockScript};
use crate::decompose::{DecomposeExemplar, ExemplarSet};
use crate::error::Result;
use crate::schedule::Dependency;
use crate::types::{AllocationScheme, Checker, ModelTier, SubTask, Task};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationConfig {
    pub tasks: usize,
    pub min_subtasks: usize,
    pub max_subtasks: usize,
    /// Chance that the device can answer a sub-task.
    pub solvable_rate: f64,
    /// Chance of an edge between each ordered pair of sub-tasks.
    pub edge_rate: f64,
    /// Chance the cloud's zero-shot judge calls a device-solvable sub-task complex.
    pub zero_shot_overrate: f64,
    /// Chance the zero-shot judge calls an unsolvable sub-task simple.
    pub zero_shot_miss: f64,
    pub device_seconds: f64,
    pub cloud_seconds: f64,
    pub tokens_per_answer: usize,
    pub cloud_prompt_cents: f64,
    pub cloud_completion_cents: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            tasks: 100,
            min_subtasks: 3,
            max_subtasks: 8,
            solvable_rate: 0.7,
            edge_rate: 0.3,
            zero_shot_overrate: 0.6,
            zero_shot_miss: 0.05,
            device_seconds: 1.0,
            cloud_seconds: 2.0,
            tokens_per_answer: 6,
            cloud_prompt_cents: 0.00025,
            cloud_completion_cents: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task: Task,
    pub subtasks: Vec<SubTask>,
    pub edges: Vec<Dependency>,
    /// Indexed by sub-task index minus one.
    pub solvable: Vec<bool>,
}

impl SyntheticTask {
    /// Unsolvable sub-tasks on Cloud, everything else on Device.
    pub fn optimal_scheme(&self) -> AllocationScheme {
        AllocationScheme::from_pairs(self.subtasks.iter().map(|s| {
            let tier = if self.solvable[s.index - 1] { ModelTier::Device } else { ModelTier::Cloud };
            (s.index, tier)
        }))
    }

    /// Whether `scheme` gives a correct final answer.
    pub fn is_correct(&self, scheme: &AllocationScheme) -> bool {
        self.subtasks
            .iter()
            .all(|s| self.solvable[s.index - 1] || scheme.get(s.index) == Some(ModelTier::Cloud))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub config: PopulationConfig,
    pub tasks: Vec<SyntheticTask>,
    pub device_script: MockScript,
    pub cloud_script: MockScript,
    pub exemplars: ExemplarSet,
}

fn step_pattern(s: &SubTask) -> String {
    format!("The sub-question to solve now is {}: {}", s.index, s.description)
}

fn probs(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

impl Population {
    pub fn generate(config: PopulationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tasks = Vec::with_capacity(config.tasks);
        for t in 1..=config.tasks {
            let id = format!("t{t:03}");
            let k = rng.random_range(config.min_subtasks..=config.max_subtasks);
            let subtasks: Vec<SubTask> = (1..=k)
                .map(|j| SubTask::new(j, format!("Work out component {j} of puzzle {id}.")))
                .collect();
            let mut edges = Vec::new();
            for a in 1..=k {
                for b in a + 1..=k {
                    if rng.random_bool(config.edge_rate) {
                        edges.push(Dependency::new(a, b));
                    }
                }
            }
            let solvable = (0..k).map(|_| rng.random_bool(config.solvable_rate)).collect();
            tasks.push(SyntheticTask {
                task: Task {
                    query: format!("What is the combined result of puzzle {id}?"),
                    ground_truth: format!("result-{id}"),
                    category: "puzzle".into(),
                    checker: Checker::ExactMatch,
                    id,
                },
                subtasks,
                edges,
                solvable,
            });
        }

        let mut device = MockScript::new(MockReply::new("I am not sure.", Some(vec![0.5]), config.device_seconds));
        let mut cloud = MockScript::new(MockReply::new("I am not sure.", None, config.cloud_seconds));
        for st in &tasks {
            for script in [&mut device, &mut cloud] {
                script.rules.push(plan_rule(st, config.device_seconds));
                script.rules.push(dependency_rule(st, config.device_seconds));
            }
            for s in &st.subtasks {
                let good = format!("ok-{}-{}", st.task.id, s.index);
                let device_reply = if st.solvable[s.index - 1] {
                    MockReply::new(good.clone(), Some(probs(&mut rng, config.tokens_per_answer, 0.8, 0.99)), config.device_seconds)
                } else {
                    let bad = format!("bad-{}-{}", st.task.id, s.index);
                    MockReply::new(bad, Some(probs(&mut rng, config.tokens_per_answer, 0.3, 0.7)), config.device_seconds)
                };
                device.rules.push(MockRule::new(step_pattern(s), device_reply));
                cloud.rules.push(MockRule::new(step_pattern(s), MockReply::new(good, None, config.cloud_seconds)));

                let complex = if st.solvable[s.index - 1] {
                    rng.random_bool(config.zero_shot_overrate)
                } else {
                    !rng.random_bool(config.zero_shot_miss)
                };
                cloud.rules.push(MockRule::new(
                    format!("Current sub-task: {}. {}", s.index, s.description),
                    MockReply::new(if complex { "complex" } else { "simple" }, None, config.cloud_seconds),
                ));
                device.difficulty.push(DifficultyRule {
                    pattern: s.description.clone(),
                    value: if st.solvable[s.index - 1] { -2.0 } else { 2.0 },
                });
            }
            let all_solvable = st.solvable.iter().all(|b| *b);
            cloud.rules.push(MockRule::new(
                format!("Task to route: {}", st.task.query),
                MockReply::new(if all_solvable { "simple" } else { "complex" }, None, config.cloud_seconds),
            ));
        }
        // A wrong intermediate answer spoils the final answer.
        for (script, secs) in [(&mut device, config.device_seconds), (&mut cloud, config.cloud_seconds)] {
            script.rules.push(MockRule::new("Answer: bad-", MockReply::new("unknown", None, secs)));
        }
        for st in &tasks {
            let pattern = format!("The original question is: {}", st.task.query);
            device.rules.push(MockRule::new(
                pattern.clone(),
                MockReply::new(st.task.ground_truth.clone(), None, config.device_seconds),
            ));
            cloud.rules.push(MockRule::new(pattern, MockReply::new(st.task.ground_truth.clone(), None, config.cloud_seconds)));
        }

        let exemplars = ExemplarSet(BTreeMap::from([(
            "default".to_string(),
            vec![DecomposeExemplar {
                question: "What is the total of the two halves of puzzle x?".into(),
                steps: vec![
                    "Work out the first half of puzzle x.".into(),
                    "Work out the second half of puzzle x.".into(),
                    "Add the two halves.".into(),
                ],
            }],
        )]));

        Population {
            config,
            tasks,
            device_script: device,
            cloud_script: cloud,
            exemplars,
        }
    }

    pub fn benchmark(&self) -> Vec<Task> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    pub fn device_profile(&self) -> BackendProfile {
        BackendProfile::mock(ModelTier::Device, "mock-device", 0.0, 0.0)
    }

    pub fn cloud_profile(&self) -> BackendProfile {
        BackendProfile::mock(
            ModelTier::Cloud,
            "mock-cloud",
            self.config.cloud_prompt_cents,
            self.config.cloud_completion_cents,
        )
    }

    pub fn backends(&self, seed: u64) -> Result<Backends> {
        let mut backends = Backends::new();
        backends.register_mock(self.device_profile(), self.device_script.clone(), seed)?;
        backends.register_mock(self.cloud_profile(), self.cloud_script.clone(), seed)?;
        Ok(backends)
    }

    /// Writes `benchmark.jsonl`, `exemplars.json`, `backends.json` and the
    /// two mock scripts into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        crate::alphatree::write_jsonl(&dir.join("benchmark.jsonl"), &self.benchmark())?;
        fs::write(dir.join("exemplars.json"), serde_json::to_string_pretty(&self.exemplars)?)?;
        fs::write(dir.join("device_script.json"), serde_json::to_string_pretty(&self.device_script)?)?;
        fs::write(dir.join("cloud_script.json"), serde_json::to_string_pretty(&self.cloud_script)?)?;
        let mut device = self.device_profile();
        device.mock_script = Some("device_script.json".into());
        let mut cloud = self.cloud_profile();
        cloud.mock_script = Some("cloud_script.json".into());
        let profiles = serde_json::json!({ "device": device, "cloud": cloud });
        fs::write(dir.join("backends.json"), serde_json::to_string_pretty(&profiles)?)?;
        Ok(())
    }
}

fn plan_rule(st: &SyntheticTask, secs: f64) -> MockRule {
    let mut text = format!("To solve the question \"{}\", we need to know:\n", st.task.query);
    for s in &st.subtasks {
        text.push_str(&format!("{}. {}\n", s.index, s.description));
    }
    MockRule::new(format!("Now the command is {}", st.task.query), MockReply::new(text, None, secs))
}

fn dependency_rule(st: &SyntheticTask, secs: f64) -> MockRule {
    let text = if st.edges.is_empty() {
        "No dependencies.".to_string()
    } else {
        st.edges
            .iter()
            .map(|e| {
                let from = &st.subtasks[e.from_index - 1];
                let to = &st.subtasks[e.to_index - 1];
                format!("Step {} [{}] -> Step {} [{}]\n", e.from_index, from.description, e.to_index, to.description)
            })
            .collect()
    };
    MockRule::new(format!("for question: {}", st.task.query), MockReply::new(text, None, secs))
}
