//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use divthought::adapter::{fit, MlpConfig, MlpWeights, TrainConfig};
use divthought::alphatree::{summarize, AlphaTreeConfig, Searcher, DEFAULT_ATTEMPTS};
use divthought::backend::{BackendProfile, Backends, MockReply, MockRule, MockScript};
use divthought::bench::{Bench, BenchConfig, Plan, Strategy, DEFAULT_FRACTIONS};
use divthought::decompose::{build_decompose_prompt, DecomposeExemplar};
use divthought::execute::{assemble_step_prompt, ExecConfig, Executor, StepResult};
use divthought::schedule::{build_dependency_prompt, build_graph, Dependency, DependencyGraph};
use divthought::synthetic::{Population, PopulationConfig, SyntheticTask};
use divthought::uncertainty::alpha_quantile;
use divthought::{AllocationScheme, Checker, CostLedger, ModelTier, SubTask, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:?}, limit {limit:?}"))
}

// 1 -----------------------------------------------------------------------

fn sort_interpolate(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = alpha * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn quantile_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=200);
        let p: Vec<f64> = (0..n).map(|_| 1.0 - rng.random_range(0.0..1.0)).collect();
        for alpha in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let got = alpha_quantile(&p, alpha).map_err(|e| e.to_string())?;
            worst = worst.max((got - sort_interpolate(&p, alpha)).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!("10000 sequences, max deviation {worst:e}, {:?}", start.elapsed()))
}

// 2 -----------------------------------------------------------------------

fn validate_topological(order: &[usize], k: usize, edges: &[Dependency]) -> bool {
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    pos.len() == k
        && order.len() == k
        && pos.keys().copied().eq(1..=k)
        && edges.iter().all(|e| pos[&e.from_index] < pos[&e.to_index])
}

fn has_cycle(k: usize, edges: &[Dependency]) -> bool {
    // repeatedly strip nodes without incoming edges
    let mut alive: BTreeSet<usize> = (1..=k).collect();
    loop {
        let sources: Vec<usize> = alive
            .iter()
            .copied()
            .filter(|n| !edges.iter().any(|e| e.to_index == *n && alive.contains(&e.from_index)))
            .collect();
        if sources.is_empty() {
            return !alive.is_empty();
        }
        sources.iter().for_each(|s| {
            alive.remove(s);
        });
    }
}

fn dag_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cyclic = 0;
    for case in 0..1000 {
        let k = rng.random_range(1..=12);
        let subtasks: Vec<SubTask> = (1..=k).map(|i| SubTask::new(i, format!("s{i}"))).collect();
        let deps: Vec<Dependency> = if case % 10 == 0 {
            (1..=k)
                .flat_map(|a| (1..=k).filter(move |b| *b != a).map(move |b| Dependency::new(a, b)))
                .collect()
        } else {
            let m = rng.random_range(0..=k * 3);
            (0..m)
                .map(|_| Dependency::new(rng.random_range(1..=k), rng.random_range(1..=k)))
                .collect()
        };
        let proper: Vec<Dependency> = deps.iter().copied().filter(|d| d.from_index != d.to_index).collect();
        if has_cycle(k, &proper) {
            cyclic += 1;
        }
        let g = build_graph(&subtasks, &deps);
        ensure(!has_cycle(k, &g.edges), format!("case {case}: output has a cycle"))?;
        let flat: Vec<usize> = g.batches.iter().flatten().copied().collect();
        ensure(
            flat.iter().copied().collect::<BTreeSet<_>>().len() == k && flat.len() == k,
            format!("case {case}: batches do not partition the nodes"),
        )?;
        let batch: BTreeMap<usize, usize> =
            g.batches.iter().enumerate().flat_map(|(b, ns)| ns.iter().map(move |n| (*n, b))).collect();
        ensure(
            g.edges.iter().all(|e| batch[&e.from_index] < batch[&e.to_index]),
            format!("case {case}: an edge does not advance the batch"),
        )?;
        ensure(validate_topological(&flat, k, &g.edges), format!("case {case}: not a topological order"))?;
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("1000 edge sets ({cyclic} cyclic), {:?}", start.elapsed()))
}

// 3, 4 --------------------------------------------------------------------

fn brute_force_best(st: &SyntheticTask) -> Option<AllocationScheme> {
    let k = st.subtasks.len();
    let mut best: Option<(usize, AllocationScheme)> = None;
    for mask in 0u32..(1 << k) {
        let scheme = AllocationScheme::from_pairs(
            (0..k).map(|b| (b + 1, if mask >> b & 1 == 1 { ModelTier::Device } else { ModelTier::Cloud })),
        );
        if st.is_correct(&scheme) {
            let d = scheme.count(ModelTier::Device);
            if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
                best = Some((d, scheme));
            }
        }
    }
    best.map(|(_, s)| s)
}

struct Fixture {
    pop: Population,
    backends: Backends,
}

impl Fixture {
    fn new() -> Self {
        let pop = Population::generate(PopulationConfig { tasks: 100, seed: 0, ..Default::default() });
        let backends = pop.backends(7).expect("mock backends");
        Fixture { pop, backends }
    }

    fn bench(&self) -> Bench<'_> {
        Bench::new(&self.backends, &self.pop.exemplars, BenchConfig::default()).expect("bench")
    }
}

fn plans(bench: &Bench, pop: &Population) -> Result<Vec<Plan>, String> {
    bench
        .plan_all(&pop.benchmark())
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())
}

fn alpha_tree_optimality(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let bench = fx.bench();
    let plans = plans(&bench, &fx.pop)?;
    let searcher = Searcher::new(bench.executor());
    let jobs: Vec<_> = fx.pop.tasks.iter().zip(&plans).collect();
    let outcomes = bench.map(&jobs, |(st, p)| searcher.alpha_tree_search(&st.task, &p.subtasks, &p.graph, &AlphaTreeConfig::default()));
    let mut correct = 0;
    let mut optimal = 0;
    for ((st, _), o) in jobs.iter().zip(&outcomes) {
        let k = st.subtasks.len();
        ensure(o.evaluations <= k + 1, format!("{}: {} evaluations for k={k}", o.task_id, o.evaluations))?;
        correct += usize::from(o.final_correct);
        optimal += usize::from(brute_force_best(st).as_ref() == Some(&o.final_scheme));
    }
    ensure(correct >= 99, format!("{correct}/100 correct"))?;
    ensure(optimal >= 90, format!("{optimal}/100 match brute force"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("{correct}/100 correct, {optimal}/100 optimal, {:?}", start.elapsed()))
}

fn searcher_ordering(fx: &Fixture) -> Outcome {
    let bench = fx.bench();
    let plans = plans(&bench, &fx.pop)?;
    let searcher = Searcher::new(bench.executor());
    let jobs: Vec<_> = fx.pop.tasks.iter().zip(&plans).collect();
    let alpha = summarize(&bench.map(&jobs, |(st, p)| {
        searcher.alpha_tree_search(&st.task, &p.subtasks, &p.graph, &AlphaTreeConfig::default())
    }));
    let binary = summarize(&bench.map(&jobs, |(st, p)| {
        searcher.binary_search_baseline(&st.task, &p.subtasks, &p.graph, DEFAULT_ATTEMPTS, 11)
    }));
    let zero = summarize(&bench.map(&jobs, |(st, p)| searcher.zero_shot_search(&st.task, &p.subtasks, &p.graph)));
    ensure(
        alpha.mean_evaluations < binary.mean_evaluations,
        format!("evaluations α {} vs binary {}", alpha.mean_evaluations, binary.mean_evaluations),
    )?;
    ensure(
        alpha.slm_ratio >= binary.slm_ratio && binary.slm_ratio >= zero.slm_ratio,
        format!("SLM ratio α {} binary {} zero-shot {}", alpha.slm_ratio, binary.slm_ratio, zero.slm_ratio),
    )?;
    Ok(format!(
        "evals α {:.2} < binary {:.2}; SLM ratio α {:.3} ≥ binary {:.3} ≥ zero-shot {:.3}",
        alpha.mean_evaluations, binary.mean_evaluations, alpha.slm_ratio, binary.slm_ratio, zero.slm_ratio
    ))
}

// 5 -----------------------------------------------------------------------

fn adapter_training() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let input_dim = rng.random_range(1..=6);
        let hidden_dims: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=5)).collect();
        let w = MlpWeights::<f64>::init(&MlpConfig { input_dim, hidden_dims, seed: trial }).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=4);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=1u8))).collect();
        let grad = w.gradient(&xs, &ys).map_err(|e| e.to_string())?;
        let base = w.params();
        for (i, g) in grad.iter().enumerate() {
            let mut probe = w.clone();
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params(&p).unwrap();
            let up = probe.loss(&xs, &ys).unwrap();
            p[i] = base[i] - h;
            probe.set_params(&p).unwrap();
            let down = probe.loss(&xs, &ys).unwrap();
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8));
        }
    }
    ensure(worst < 1e-4, format!("gradient relative error {worst:e}"))?;

    let dim = 64;
    let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..200 {
        let y = (i % 2) as f64;
        let centre = if y == 1.0 { 2.0 } else { -2.0 };
        xs.push(
            dir.iter()
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    centre * d + noise
                })
                .collect::<Vec<f64>>(),
        );
        ys.push(y);
    }
    let config = MlpConfig::default();
    let tc = TrainConfig { learning_rate: 1e-3, epochs: 200, ..TrainConfig::default() };
    let (w, history) = fit(&xs, &ys, &config, &tc).map_err(|e| e.to_string())?;
    let (w2, history2) = fit(&xs, &ys, &config, &tc).map_err(|e| e.to_string())?;
    ensure(w == w2 && history == history2, "training is not deterministic")?;
    let hits = xs.iter().zip(&ys).filter(|(x, y)| (w.forward(x).unwrap() >= 0.5) == (**y == 1.0)).count();
    let acc = hits as f64 / 200.0;
    ensure(acc >= 0.95, format!("training accuracy {acc}"))?;
    Ok(format!("max gradient rel. error {worst:.1e}; cluster accuracy {acc:.3} after 200 epochs"))
}

// 6, 8 --------------------------------------------------------------------

fn routing_advantage(fx: &Fixture) -> Outcome {
    let bench = fx.bench();
    let tasks = fx.pop.benchmark();
    let run = |s| bench.run_suite(&tasks, s, None).map(|(m, _)| m).map_err(|e| e.to_string());
    let device = run(Strategy::AllDevice)?;
    let cloud = run(Strategy::AllCloud)?;
    let routed = run(Strategy::threshold(Some(0.75)))?;
    ensure(routed.accuracy >= cloud.accuracy - 0.02, format!("accuracy {} vs cloud {}", routed.accuracy, cloud.accuracy))?;
    ensure(
        routed.mean_api_cents <= 0.4 * cloud.mean_api_cents,
        format!("cents {} vs cloud {}", routed.mean_api_cents, cloud.mean_api_cents),
    )?;
    ensure(routed.accuracy >= device.accuracy + 0.2, format!("accuracy {} vs device {}", routed.accuracy, device.accuracy))?;
    Ok(format!(
        "acc device {:.2} / threshold {:.2} / cloud {:.2}; cents ratio {:.3}",
        device.accuracy,
        routed.accuracy,
        cloud.accuracy,
        routed.mean_api_cents / cloud.mean_api_cents
    ))
}

fn tradeoff_sanity(fx: &Fixture) -> Outcome {
    let bench = fx.bench();
    let tasks = fx.pop.benchmark();
    let device = bench.run_suite(&tasks, Strategy::AllDevice, None).map_err(|e| e.to_string())?.0;
    let cloud = bench.run_suite(&tasks, Strategy::AllCloud, None).map_err(|e| e.to_string())?.0;
    let sweep = bench.tradeoff_sweep(&tasks, &DEFAULT_FRACTIONS, 0.8).map_err(|e| e.to_string())?;
    ensure(sweep.first().map(|p| p.metrics) == Some(device), "f=0 differs from all-device")?;
    ensure(sweep.last().map(|p| p.metrics) == Some(cloud), "f=1 differs from all-cloud")?;
    let cents: Vec<f64> = sweep.iter().map(|p| p.metrics.mean_api_cents).collect();
    ensure(cents.windows(2).all(|w| w[0] <= w[1]), format!("cents not monotone: {cents:?}"))?;
    Ok(format!("endpoints bit-equal; cents {cents:.3?}"))
}

// 7 -----------------------------------------------------------------------

fn batch_latency() -> Outcome {
    let mut script = MockScript::new(MockReply::new("done", Some(vec![0.9]), 0.0));
    script.rules = vec![
        MockRule::new("now is 1: first", MockReply::new("a", Some(vec![0.9]), 1.0)),
        MockRule::new("now is 2: second", MockReply::new("b", Some(vec![0.9]), 3.0)),
    ];
    let mut backends = Backends::new();
    backends
        .register_mock(BackendProfile::mock(ModelTier::Device, "d", 0.0, 0.0), script, 0)
        .map_err(|e| e.to_string())?;
    let task = Task {
        id: "lat".into(),
        query: "q".into(),
        category: String::new(),
        ground_truth: "done".into(),
        checker: Checker::ExactMatch,
    };
    let st = vec![SubTask::new(1, "first"), SubTask::new(2, "second")];
    let scheme = AllocationScheme::uniform(&st, ModelTier::Device);
    let exec = Executor::new(&backends, ExecConfig::default());
    let batched = exec.run_on_graph(&task, &st, &build_graph(&st, &[]), &scheme);
    let sequential = exec.run_on_graph(&task, &st, &DependencyGraph::chain(&st), &scheme);
    ensure(batched.total.wall_seconds == 3.0, format!("batched {}", batched.total.wall_seconds))?;
    ensure(sequential.total.wall_seconds == 4.0, format!("sequential {}", sequential.total.wall_seconds))?;
    Ok("batch 3 s, sequential 4 s".into())
}

// 9 -----------------------------------------------------------------------

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_divthought"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    Population::generate(PopulationConfig { tasks: 30, seed: 9, ..Default::default() })
        .write_to(dir)
        .map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        run_cli(dir, &["--seed", "4", "--out", run, "bench", "--tasks", "benchmark.jsonl", "--strategy", "all-device,all-cloud,threshold,simple-referral", "--tradeoff"])?;
        run_cli(dir, &["--seed", "4", "--out", run, "search", "--tasks", "benchmark.jsonl", "--searcher", "binary"])?;
    }
    let read = |p: &str| std::fs::read(dir.join(p)).map_err(|e| format!("{p}: {e}"));
    ensure(read("a/report.json")? == read("b/report.json")?, "report.json differs")?;
    ensure(read("a/dataset.jsonl")? == read("b/dataset.jsonl")?, "dataset.jsonl differs")?;
    Ok("report.json and dataset.jsonl byte-identical across runs".into())
}

// 10 ----------------------------------------------------------------------

fn prompt_fidelity() -> Outcome {
    let task = Task {
        id: "p".into(),
        query: "How many apples remain?".into(),
        category: "math".into(),
        ground_truth: "3".into(),
        checker: Checker::NumericMatch,
    };
    let exemplar = DecomposeExemplar {
        question: "What is 2 + 3 * 4?".into(),
        steps: vec!["Compute 3 * 4.".into(), "Add 2.".into()],
    };
    let decompose = build_decompose_prompt(&task, &[exemplar]).map_err(|e| e.to_string())?;
    let st = vec![SubTask::new(1, "Count apples."), SubTask::new(2, "Subtract eaten apples.")];
    let dependency = build_dependency_prompt(&task, &st);
    let prior = StepResult {
        index: 1,
        question: "Count apples.".into(),
        tier_used: ModelTier::Device,
        answer: "5".into(),
        token_probs: vec![0.9],
        ledger: CostLedger::zero(),
        cached: false,
    };
    let step = assemble_step_prompt(&task, &st[1], &[&prior]);
    ensure(decompose.user.contains("please decompose it into easy-to-solve steps"), "decomposition anchor missing")?;
    ensure(dependency.user.contains("Subproblem A [xxx] -> Subproblem B [xxx]"), "dependency anchor missing")?;
    ensure(step.user.contains("Sub-question-Id: xxx; Sub-question: xxx; Answer: xxx"), "step anchor missing")?;
    Ok("all three anchors present".into())
}

fn main() {
    let fixture = Fixture::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("α-quantile oracle equivalence", Box::new(quantile_oracle)),
        ("DAG invariants", Box::new(dag_invariants)),
        ("α-Tree termination and optimality", Box::new(|| alpha_tree_optimality(&fixture))),
        ("searcher comparison", Box::new(|| searcher_ordering(&fixture))),
        ("adapter gradients and training", Box::new(adapter_training)),
        ("end-to-end routing advantage", Box::new(|| routing_advantage(&fixture))),
        ("batch latency model", Box::new(batch_latency)),
        ("trade-off sweep sanity", Box::new(|| tradeoff_sanity(&fixture))),
        ("CLI determinism", Box::new(cli_determinism)),
        ("prompt fidelity", Box::new(prompt_fidelity)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
