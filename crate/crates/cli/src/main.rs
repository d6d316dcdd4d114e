use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use divthought::adapter::{self, MlpConfig, TrainConfig};
use divthought::alphatree::{self, AlphaTreeConfig, SearchOutcome, Searcher, DEFAULT_ATTEMPTS};
use divthought::backend::Backends;
use divthought::bench::{self, Bench, BenchConfig, Plan, Strategy, DEFAULT_FRACTIONS};
use divthought::decompose::{format_subtasks, ExemplarSet};
use divthought::uncertainty::DEFAULT_ALPHA;
use divthought::{AdapterWeights, Error, ModelTier, Task};

#[derive(Parser)]
#[command(name = "divthought", version, about = "Device/cloud collaborative reasoning: decompose, schedule, allocate, benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Backends file with `device` and `cloud` profiles.
    #[arg(long, global = true, default_value = "backends.json")]
    backends: PathBuf,
    /// Decomposition exemplars (JSON, by category or a flat list).
    #[arg(long, global = true, default_value = "exemplars.json")]
    exemplars: PathBuf,
    /// Seed for mock embeddings and randomized searchers.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Tasks processed concurrently.
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Tier that decomposes and schedules.
    #[arg(long, global = true, default_value = "device", value_parser = parse_tier)]
    planner_tier: ModelTier,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose each task and print its sub-tasks.
    Decompose {
        /// Benchmark JSONL.
        #[arg(long)]
        tasks: PathBuf,
        /// Also schedule and write Graphviz files under <out>/graphs.
        #[arg(long)]
        dump_graph: bool,
    },
    /// Decompose and schedule each task and print its batches.
    Schedule {
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Search allocations and write an adapter dataset.
    Search(SearchArgs),
    /// Train the allocation adapter on a dataset.
    Train(TrainArgs),
    /// Run strategies end to end and write reports.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SearcherKind {
    AlphaTree,
    Binary,
    #[value(alias = "zeroshot")]
    ZeroShot,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_enum, default_value = "alpha-tree")]
    searcher: SearcherKind,
    /// Sub-tasks moved per α-Tree step.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Initial split; defaults to each task's median score.
    #[arg(long)]
    theta: Option<f64>,
    /// Retries per halving round for the binary searcher.
    #[arg(long, default_value_t = DEFAULT_ATTEMPTS)]
    attempts: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Hidden layer widths, comma separated; empty for logistic regression.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Share of records used for training; the rest is held out.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Tier whose hidden states embed the sub-task text.
    #[arg(long, default_value = "device", value_parser = parse_tier)]
    embed_tier: ModelTier,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    tasks: PathBuf,
    /// Strategies, comma separated: adapter, threshold, all-device,
    /// all-cloud, simple-referral, sequential.
    #[arg(long, value_delimiter = ',', default_value = "threshold")]
    strategy: Vec<Strategy>,
    /// Adapter weights for the adapter strategy.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Threshold for threshold/sequential; defaults to each task's median.
    #[arg(long)]
    theta: Option<f64>,
    /// Also sweep the cloud fraction and write tradeoff.csv.
    #[arg(long)]
    tradeoff: bool,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS.to_vec())]
    fractions: Vec<f64>,
    #[arg(long, default_value = "device", value_parser = parse_tier)]
    embed_tier: ModelTier,
}

fn parse_tier(s: &str) -> Result<ModelTier, String> {
    s.parse::<ModelTier>().map_err(|e| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Backend(_) => 3,
            Error::EmptyDataset(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Error::from(err).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(err: serde_json::Error) -> Self {
        Error::from(err).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is reserved for empty results
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Decompose { tasks, dump_graph } => cmd_decompose(&cli.global, &tasks, dump_graph),
        Command::Schedule { tasks } => cmd_schedule(&cli.global, &tasks),
        Command::Search(args) => cmd_search(&cli.global, &args),
        Command::Train(args) => cmd_train(&cli.global, &args),
        Command::Bench(args) => cmd_bench(&cli.global, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

struct Setup {
    backends: Backends,
    exemplars: ExemplarSet,
    tasks: Vec<Task>,
}

fn setup(global: &Global, tasks: &Path) -> Result<Setup, Failure> {
    let backends = Backends::from_profiles_file(&global.backends, global.seed)?;
    let exemplars = ExemplarSet::load(&global.exemplars)?;
    let tasks = bench::load_benchmark(tasks)?;
    fs::create_dir_all(&global.out)?;
    Ok(Setup {
        backends,
        exemplars,
        tasks,
    })
}

fn bench_config(global: &Global, embed_tier: ModelTier) -> BenchConfig {
    BenchConfig {
        planner_tier: global.planner_tier,
        embed_tier,
        workers: global.workers,
        ..BenchConfig::default()
    }
}

/// Plans every task; any failure is reported per task and decides the exit code.
fn plan_or_fail(bench: &Bench, tasks: &[Task]) -> Result<Vec<Plan>, Failure> {
    let mut plans = Vec::with_capacity(tasks.len());
    let mut worst: Option<Failure> = None;
    for (task, plan) in tasks.iter().zip(bench.plan_all(tasks)) {
        match plan {
            Ok(p) => plans.push(p),
            Err(e) => {
                eprintln!("task {}: {e}", task.id);
                let f = Failure::from(e);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        Some(mut f) => {
            f.message = format!("{} of {} tasks failed to plan", tasks.len() - plans.len(), tasks.len());
            Err(f)
        }
        None => Ok(plans),
    }
}

fn cmd_decompose(global: &Global, tasks: &Path, dump_graph: bool) -> CmdResult {
    let s = setup(global, tasks)?;
    let bench = Bench::new(&s.backends, &s.exemplars, bench_config(global, ModelTier::Device))?;
    let plans = plan_or_fail(&bench, &s.tasks)?;
    let mut dump = BTreeMap::new();
    for (task, plan) in s.tasks.iter().zip(&plans) {
        println!("[{}] {}", task.id, task.query);
        print!("{}", format_subtasks(&plan.subtasks));
        dump.insert(task.id.clone(), &plan.subtasks);
    }
    fs::write(global.out.join("decompositions.json"), serde_json::to_string_pretty(&dump)?)?;
    if dump_graph {
        write_graphs(&global.out, &s.tasks, &plans)?;
    }
    Ok(())
}

fn write_graphs(out: &Path, tasks: &[Task], plans: &[Plan]) -> CmdResult {
    let dir = out.join("graphs");
    fs::create_dir_all(&dir)?;
    for (task, plan) in tasks.iter().zip(plans) {
        fs::write(dir.join(format!("{}.dot", task.id)), plan.graph.to_dot(&task.id, &plan.subtasks))?;
    }
    Ok(())
}

fn cmd_schedule(global: &Global, tasks: &Path) -> CmdResult {
    let s = setup(global, tasks)?;
    let bench = Bench::new(&s.backends, &s.exemplars, bench_config(global, ModelTier::Device))?;
    let plans = plan_or_fail(&bench, &s.tasks)?;
    let mut dump = BTreeMap::new();
    for (task, plan) in s.tasks.iter().zip(&plans) {
        let batches: Vec<String> = plan
            .graph
            .batches
            .iter()
            .map(|b| format!("{{{}}}", b.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")))
            .collect();
        println!("[{}] {}", task.id, batches.join(" -> "));
        dump.insert(task.id.clone(), &plan.graph);
    }
    fs::write(global.out.join("graphs.json"), serde_json::to_string_pretty(&dump)?)?;
    write_graphs(&global.out, &s.tasks, &plans)
}

fn cmd_search(global: &Global, args: &SearchArgs) -> CmdResult {
    let s = setup(global, &args.tasks)?;
    let bench = Bench::new(&s.backends, &s.exemplars, bench_config(global, ModelTier::Device))?;
    let plans = plan_or_fail(&bench, &s.tasks)?;
    let searcher = Searcher::new(bench.executor());
    let config = AlphaTreeConfig {
        n: args.n,
        theta: args.theta,
        alpha: args.alpha,
    };
    let jobs: Vec<(&Task, &Plan)> = s.tasks.iter().zip(&plans).collect();
    let outcomes: Vec<SearchOutcome> = bench.map(&jobs, |(task, plan)| match args.searcher {
        SearcherKind::AlphaTree => searcher.alpha_tree_search(task, &plan.subtasks, &plan.graph, &config),
        SearcherKind::Binary => {
            searcher.binary_search_baseline(task, &plan.subtasks, &plan.graph, args.attempts, global.seed)
        }
        SearcherKind::ZeroShot => searcher.zero_shot_search(task, &plan.subtasks, &plan.graph),
    });
    for o in outcomes.iter().filter(|o| o.error.is_some()) {
        eprintln!("task {}: {}", o.task_id, o.error.as_deref().unwrap_or_default());
    }
    alphatree::write_jsonl(&global.out.join("search_log.jsonl"), &outcomes)?;

    let summary = alphatree::summarize(&outcomes);
    println!("tasks            {}", summary.tasks);
    println!("SLM Ratio        {:.2}%", summary.slm_ratio * 100.0);
    println!("SR               {:.2}%", summary.success_rate * 100.0);
    println!("mean evaluations {:.3}", summary.mean_evaluations);
    println!("api cents / task {:.2}", summary.mean_api_cents);

    let subtasks: BTreeMap<String, _> = jobs.iter().map(|(t, p)| (t.id.clone(), p.subtasks.clone())).collect();
    let records = alphatree::emit_adapter_dataset(&outcomes, &subtasks)?;
    alphatree::write_jsonl(&global.out.join("dataset.jsonl"), &records)?;
    println!("dataset records  {}", records.len());
    Ok(())
}

fn cmd_train(global: &Global, args: &TrainArgs) -> CmdResult {
    let mut records = alphatree::read_dataset(&args.dataset)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no records", args.dataset.display())).into());
    }
    if records.iter().any(|r| r.embedding.is_none()) {
        let backends = Backends::from_profiles_file(&global.backends, global.seed)?;
        adapter::embed_records(&backends, args.embed_tier, &mut records)?;
    }
    let input_dim = records[0].embedding.as_ref().map_or(0, Vec::len);
    let mlp = MlpConfig {
        input_dim,
        hidden_dims: args.hidden.clone(),
        seed: global.seed,
    };
    let tc = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: global.seed,
    };
    let (train, held_out) = adapter::split_records(&records, args.train_fraction, global.seed);
    let (weights, history) = adapter::train(&train, &mlp, &tc)?;

    fs::create_dir_all(&global.out)?;
    weights.save(&global.out.join("weights.json"))?;
    write_loss_csv(&global.out.join("loss.csv"), &history).map_err(|e| Failure::from(Error::Io(e.into())))?;

    println!("parameters         {}", weights.param_count);
    println!("training records   {}", train.len());
    println!("train accuracy     {:.4}", adapter::accuracy(&weights, &train)?);
    if held_out.is_empty() {
        println!("held-out accuracy  n/a");
    } else {
        println!("held-out records   {}", held_out.len());
        println!("held-out accuracy  {:.4}", adapter::accuracy(&weights, &held_out)?);
    }
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, loss) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bench(global: &Global, args: &BenchArgs) -> CmdResult {
    let s = setup(global, &args.tasks)?;
    let weights = args.weights.as_deref().map(AdapterWeights::load).transpose()?;
    let bench = Bench::new(&s.backends, &s.exemplars, bench_config(global, args.embed_tier))?;
    let plans = bench.plan_all(&s.tasks);
    for (task, plan) in s.tasks.iter().zip(&plans) {
        if let Err(e) = plan {
            eprintln!("task {}: {e}", task.id);
        }
    }

    let mut results = BTreeMap::new();
    let mut all_traces = BTreeMap::new();
    for strategy in &args.strategy {
        let strategy = strategy.with_threshold(args.theta, args.alpha);
        let (metrics, traces) = bench.run_planned(&s.tasks, &plans, strategy, weights.as_ref())?;
        println!(
            "{:<16} acc {:.4}  time {:.1}s  cost {:.2}c  slm time {:.4}  slm sub-tasks {:.4}",
            strategy.name(),
            metrics.accuracy,
            metrics.mean_wall_seconds,
            metrics.mean_api_cents,
            metrics.slm_time_fraction,
            metrics.slm_subtask_fraction
        );
        results.insert(strategy.name().to_string(), metrics);
        all_traces.insert(strategy.name().to_string(), traces);
    }

    let sweep = if args.tradeoff {
        let points = bench.tradeoff_sweep(&s.tasks, &args.fractions, args.alpha)?;
        for p in &points {
            println!(
                "cloud {:.2}  acc {:.4}  cost {:.2}c",
                p.cloud_fraction, p.metrics.accuracy, p.metrics.mean_api_cents
            );
        }
        Some(points)
    } else {
        None
    };
    bench::emit_report(&global.out, &results, sweep.as_deref(), &all_traces)?;
    Ok(())
}
