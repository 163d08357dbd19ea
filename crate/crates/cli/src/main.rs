mod render;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use voxcog::baseline::{self, Dataset, NetKind, TrainConfig};
use voxcog::evolution::{self, Archive, CellKey, Elite, Evaluator, RunConfig, TaskMode};
use voxcog::mnist::{self, LabeledSet, TrainingExample};
use voxcog::morphology::develop;
use voxcog::persist::{self, RobotResult};
use voxcog::seeding::rng_for;
use voxcog::tasks::{
    all_groupings, evaluate_rollout, fitness, generalize, ExploitFilter, PhysicsEngine, TaskSpec,
    GENERALIZATION_THRESHOLD,
};

/// Raised for bad flag combinations found after parsing; exits with code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "voxcog", version, about = "Evolve soft voxel robots that sort MNIST digits by walking")]
struct Cli {
    /// Directory with the MNIST test-split IDX files (plain or gzipped).
    #[arg(long, global = true, env = "VOXCOG_DATA", default_value = "data/mnist")]
    data_dir: PathBuf,
    /// JSON settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for rollouts and training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run MAP-Elites and write checkpoints plus a history log.
    Evolve(EvolveArgs),
    /// Re-run an elite on its training stimuli.
    Eval(EvalArgs),
    /// Score elites on held-out images.
    Generalize(GeneralizeArgs),
    /// Append a baseline sweep and capacity estimate to a report.
    Capacity(CapacityArgs),
    /// Draw an elite's rollout as SVG.
    Render(RenderArgs),
    /// Summarize an archive or one of its cells.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct EvolveArgs {
    /// Classes, `0,1` for the two-class task or four digits for the grouping task.
    #[arg(long, value_parser = parse_classes)]
    task: Option<Classes>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    parents: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    /// Seed for picking the training images.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    init_budget: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    cell: CellKey,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GeneralizeArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    cell: Option<CellKey>,
    /// Pick this many elites with positive fitness at random.
    #[arg(long)]
    random: Option<usize>,
    /// Held-out images, split evenly across the task's classes.
    #[arg(long)]
    images: Option<usize>,
    /// Seed for the held-out set and the random pick.
    #[arg(long)]
    seed: Option<u64>,
    /// Minimum |dx| in voxel lengths for a decision.
    #[arg(long)]
    threshold: Option<f64>,
    /// Grouping index for four-digit archives.
    #[arg(long)]
    task_index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: NetKind,
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    /// Widths as `lo-hi` or a comma list.
    #[arg(long, default_value = "1-45", value_parser = parse_widths)]
    widths: Widths,
    /// Seed for network initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Spacetime,
    Frames,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    cell: CellKey,
    /// Stimulus classes in presentation order (default: the task's classes).
    #[arg(long, value_parser = parse_classes)]
    images: Option<Classes>,
    #[arg(long, value_enum, default_value = "spacetime")]
    format: Format,
    /// Output file for spacetime, directory for frames.
    #[arg(long)]
    out: PathBuf,
    /// Cycles per stimulus (default: the archive's setting).
    #[arg(long)]
    cycles: Option<usize>,
    /// Keep one spacetime silhouette per this many samples.
    #[arg(long, default_value_t = 10)]
    every: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    cell: Option<CellKey>,
}

#[derive(Debug, Clone, PartialEq)]
struct Classes(Vec<u8>);

#[derive(Debug, Clone, PartialEq)]
struct Widths(Vec<usize>);

fn parse_classes(s: &str) -> Result<Classes, String> {
    let v: Vec<u8> = s
        .split(',')
        .map(|c| c.trim().parse::<u8>().map_err(|e| format!("bad class {c:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.iter().any(|&c| c > 9) {
        return Err("classes are digits 0-9".into());
    }
    let mut d = v.clone();
    d.sort_unstable();
    d.dedup();
    if d.len() != v.len() {
        return Err("classes must be distinct".into());
    }
    Ok(Classes(v))
}

fn parse_kind(s: &str) -> Result<NetKind, String> {
    s.parse()
}

fn parse_widths(s: &str) -> Result<Widths, String> {
    let bad = |e: std::num::ParseIntError| format!("bad width list {s:?}: {e}");
    let v: Vec<usize> = match s.split_once('-') {
        Some((lo, hi)) => (lo.trim().parse().map_err(bad)?..=hi.trim().parse().map_err(bad)?).collect(),
        None => s.split(',').map(|w| w.trim().parse().map_err(bad)).collect::<Result<_, _>>()?,
    };
    if v.is_empty() || v.iter().any(|w| !(baseline::MIN_WIDTH..=baseline::MAX_WIDTH).contains(w)) {
        return Err(format!("widths must lie in [{}, {}]", baseline::MIN_WIDTH, baseline::MAX_WIDTH));
    }
    Ok(Widths(v))
}

/// Everything a config file may set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    run: RunConfig,
    exploit: ExploitFilter,
    threshold: f64,
    eval_images: usize,
    eval_seed: u64,
    train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            run: RunConfig::default(),
            exploit: ExploitFilter::default(),
            threshold: GENERALIZATION_THRESHOLD,
            eval_images: 1000,
            eval_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    let Some(path) = path else {
        return Ok(Settings::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Settings recorded in a generalization report, enough to rebuild its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportConfig {
    run: RunConfig,
    task: TaskSpec,
    eval_images: usize,
    eval_seed: u64,
    threshold: f64,
    exploit: ExploitFilter,
}

fn load_mnist(dir: &Path) -> Result<LabeledSet> {
    if !dir.is_dir() {
        bail!("MNIST data directory {} not found (set --data-dir or VOXCOG_DATA)", dir.display());
    }
    mnist::load_test_split(dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn training(set: &LabeledSet, cfg: &RunConfig) -> Result<Vec<TrainingExample>> {
    Ok(mnist::select_training_examples(set, &cfg.classes, cfg.data_seed)?)
}

fn held_out(set: &LabeledSet, train: &[TrainingExample], task: &TaskSpec, total: usize, seed: u64) -> Result<LabeledSet> {
    let exclude: Vec<usize> = train.iter().map(|t| t.source_index).collect();
    Ok(mnist::build_eval_set(set, &task.classes(), total, seed, &exclude)?)
}

fn load_archive(path: &Path) -> Result<Archive> {
    persist::load_checkpoint(path).with_context(|| format!("loading archive {}", path.display()))
}

fn elite<'a>(a: &'a Archive, cell: &CellKey) -> Result<&'a Elite> {
    a.cells.get(cell).ok_or_else(|| anyhow!("cell {cell} is empty in this archive"))
}

fn task_of(a: &Archive, e: &Elite) -> Result<TaskSpec> {
    let tasks = a.config.tasks()?;
    Ok(tasks[e.task.unwrap_or(0)].clone())
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => persist::write_atomic(p, text.as_bytes()).map_err(Into::into),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_evolve(cli: &Cli, args: &EvolveArgs) -> Result<()> {
    let mut s = load_settings(cli.config.as_deref())?;
    let r = &mut s.run;
    if let Some(Classes(c)) = &args.task {
        r.mode = match c.len() {
            2 => TaskMode::TwoClass,
            4 => TaskMode::FourDigit,
            n => return Err(usage(format!("--task needs 2 or 4 classes, got {n}"))),
        };
        r.classes = c.clone();
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = args.$flag { r.$field = v; })* };
    }
    set!(seed => master_seed, generations => generations, parents => parents, cycles => cycles_per_image,
         data_seed => data_seed, checkpoint_interval => checkpoint_interval, init_budget => init_budget);
    r.validate().map_err(|e| usage(e.to_string()))?;
    let set = load_mnist(&cli.data_dir)?;
    let train = training(&set, &s.run)?;
    let engine = PhysicsEngine::new(s.run.world.clone());
    let eval = Evaluator::new(&engine, &s.run, &train)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    persist::write_atomic(&args.out.join("config.json"), (serde_json::to_string_pretty(&s)? + "\n").as_bytes())?;
    let history_path = args.out.join("history.txt");
    let mut history = std::io::BufWriter::new(
        fs::File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?,
    );
    let ck_path = args.out.join("checkpoint.json");
    let interval = s.run.checkpoint_interval;
    let mut failure: Option<anyhow::Error> = None;
    let (archive, log) = evolution::run(&s.run, &eval, &mut |a, h| {
        if failure.is_some() || a.generation == 0 {
            return;
        }
        let res = writeln!(history, "{}", h.to_line()).map_err(anyhow::Error::from).and_then(|_| {
            if interval > 0 && a.generation % interval == 0 {
                persist::save_checkpoint(a, &ck_path)?;
            }
            Ok(())
        });
        if let Err(e) = res {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    history.flush()?;
    persist::save_checkpoint(&archive, &args.out.join("archive.json"))?;
    let last = log.last().expect("history has the initial entry");
    println!(
        "generation {} filled {} best {} mean {} -> {}",
        last.generation,
        last.filled,
        last.best,
        last.mean,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let a = load_archive(&args.archive)?;
    let e = elite(&a, &args.cell)?;
    let set = load_mnist(&cli.data_dir)?;
    let train = training(&set, &a.config)?;
    let engine = PhysicsEngine::new(a.config.world.clone());
    let body = develop(&e.genome)?;
    let stimuli: Vec<(u8, &mnist::Image)> = train.iter().map(|t| (t.class, &t.image)).collect();
    let res = evaluate_rollout(&engine, &body, &stimuli, a.config.cycles_per_image)?;
    let task = task_of(&a, e)?;
    let rep = fitness(&res, &task)?;
    let mut out = String::from("voxcog-eval 1\n");
    out += &format!("config {}\n", serde_json::to_string(&a.config)?);
    out += &format!("cell {}\ntask {}\n", args.cell, task.label());
    for d in &res.records {
        out += &format!("stimulus {} {}\n", d.class, d.dx);
    }
    out += &format!(
        "fitness {} mapping {} stored {}\n",
        rep.fitness,
        persist::mapping_name(rep.mapping),
        e.fitness
    );
    write_output(args.out.as_deref(), &out)
}

fn cmd_generalize(cli: &Cli, args: &GeneralizeArgs) -> Result<()> {
    let s = load_settings(cli.config.as_deref())?;
    let a = load_archive(&args.archive)?;
    let four = a.config.mode == TaskMode::FourDigit;
    let task_index = match (four, args.task_index) {
        (true, None) => return Err(usage("four-digit archives need --task-index (0-6)")),
        (true, Some(t)) if t >= 7 => return Err(usage("--task-index must be in 0-6")),
        (false, Some(_)) => return Err(usage("--task-index applies only to four-digit archives")),
        (_, t) => t,
    };
    let seed = args.seed.unwrap_or(s.eval_seed);
    let total = args.images.unwrap_or(s.eval_images);
    let threshold = args.threshold.unwrap_or(s.threshold);
    let task = match task_index {
        Some(t) => all_groupings(&a.config.classes)?[t].clone(),
        None => a.config.tasks()?[0].clone(),
    };

    let cells: Vec<CellKey> = match (&args.cell, args.random) {
        (Some(c), _) => {
            let e = elite(&a, c)?;
            if e.task != task_index {
                bail!("cell {c} does not belong to task slice {task_index:?}");
            }
            vec![*c]
        }
        (None, Some(k)) => {
            let eligible: Vec<CellKey> =
                a.cells.iter().filter(|(_, e)| e.fitness > 0.0 && e.task == task_index).map(|(k, _)| *k).collect();
            let mut rng = rng_for(&[seed, 0x7069_636b]);
            let mut picked: Vec<CellKey> =
                sample(&mut rng, eligible.len(), k.min(eligible.len())).into_iter().map(|i| eligible[i]).collect();
            picked.sort();
            picked
        }
        (None, None) => unreachable!("clap requires --cell or --random"),
    };

    let set = load_mnist(&cli.data_dir)?;
    let train = training(&set, &a.config)?;
    let eval_set = held_out(&set, &train, &task, total, seed)?;
    let engine = PhysicsEngine::new(a.config.world.clone());
    let stimuli: Vec<&mnist::Image> = train.iter().map(|t| &t.image).collect();
    let mut robots = Vec::new();
    let mut skipped = Vec::new();
    for cell in &cells {
        let e = &a.cells[cell];
        let body = develop(&e.genome)?;
        let verdict = s.exploit.check(&engine, &body, &stimuli, a.config.cycles_per_image);
        if !verdict.pass {
            skipped.push((*cell, verdict.reason.unwrap_or_default()));
            continue;
        }
        let report = generalize(&engine, &body, &eval_set, &task, e.mapping, a.config.cycles_per_image, threshold)?;
        robots.push(RobotResult { cell: *cell, mapping: e.mapping, report });
    }
    if robots.is_empty() {
        let why: Vec<String> = skipped.iter().map(|(c, r)| format!("{c}: {r}")).collect();
        bail!("no eligible elites (selected {}; {})", cells.len(), if why.is_empty() { "none with positive fitness".into() } else { why.join("; ") });
    }
    let rc = ReportConfig {
        run: a.config.clone(),
        task: task.clone(),
        eval_images: total,
        eval_seed: seed,
        threshold,
        exploit: s.exploit,
    };
    let text = persist::render_generalization(&serde_json::to_string(&rc)?, &task, &robots, &skipped);
    persist::write_atomic(&args.out, text.as_bytes())?;
    for r in &robots {
        println!("{} accuracy {:.4}", r.cell, r.report.accuracy);
    }
    println!("mean accuracy {:.4} over {} robots", persist::report_mean_accuracy(&text)?, robots.len());
    Ok(())
}

fn cmd_capacity(cli: &Cli, args: &CapacityArgs) -> Result<()> {
    let s = load_settings(cli.config.as_deref())?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let text = fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let robot = persist::report_mean_accuracy(&text)?;
    let rc: ReportConfig = text
        .lines()
        .find_map(|l| l.strip_prefix("config "))
        .ok_or_else(|| anyhow!("report has no config line"))
        .and_then(|c| serde_json::from_str(c).context("parsing report config"))?;
    let set = load_mnist(&cli.data_dir)?;
    let train = training(&set, &rc.run)?;
    let eval_set = held_out(&set, &train, &rc.task, rc.eval_images, rc.eval_seed)?;
    let task_train: Vec<TrainingExample> = train.into_iter().filter(|t| rc.task.in_left(t.class).is_some()).collect();
    let tr = Dataset::from_training(&task_train, &rc.task)?;
    let te = Dataset::from_set(&eval_set, &rc.task)?;
    let rows = baseline::sweep(args.kind, &args.widths.0, args.seeds, args.seed, &tr, &te, &s.train)?;
    let fit = baseline::capacity(&rows.iter().map(|r| (r.width, r.mean)).collect::<Vec<_>>(), robot)?;
    let mut out = String::new();
    for r in &rows {
        out += &format!("sweep {}\n", r.to_line());
    }
    let [a, b, c] = fit.coeffs;
    out += &format!(
        "capacity {} {} robot_accuracy {} seeds {} init_seed {} fit {} {} {}{}\n",
        args.kind,
        fit.capacity,
        robot,
        args.seeds,
        args.seed,
        a,
        b,
        c,
        if fit.degenerate { " degenerate" } else { "" }
    );
    out += &format!("capacity_config {}\n", serde_json::to_string(&s.train)?);
    persist::append_lines(&args.report, &out)?;
    println!("{} capacity: {}", args.kind, fit.capacity);
    Ok(())
}

fn cmd_render(cli: &Cli, args: &RenderArgs) -> Result<()> {
    let a = load_archive(&args.archive)?;
    let e = elite(&a, &args.cell)?;
    let classes = args.images.clone().map_or_else(|| a.config.classes.clone(), |c| c.0);
    let set = load_mnist(&cli.data_dir)?;
    let cfg = RunConfig { classes: classes.clone(), ..a.config.clone() };
    let train = mnist::select_training_examples(&set, &cfg.classes, cfg.data_seed)?;
    let stimuli: Vec<(u8, &mnist::Image)> = train.iter().map(|t| (t.class, &t.image)).collect();
    let engine = PhysicsEngine::new(a.config.world.clone());
    let body = develop(&e.genome)?;
    let rec = render::record(&engine, &body, &stimuli, args.cycles.unwrap_or(a.config.cycles_per_image))?;
    match args.format {
        Format::Spacetime => {
            persist::write_atomic(&args.out, render::spacetime_svg(&rec, args.every).as_bytes())?;
            println!("wrote {}", args.out.display());
        }
        Format::Frames => {
            fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            let frames = render::frame_svgs(&rec);
            for (i, f) in frames.iter().enumerate() {
                let p = args.out.join(format!("frame_{i:05}.svg"));
                fs::write(&p, f).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("wrote {} frames to {}", frames.len(), args.out.display());
        }
    }
    let dx: Vec<String> = rec.classes.iter().zip(&rec.dx).map(|(c, d)| format!("{c}:{d:.3}")).collect();
    println!("dx {}", dx.join(" "));
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let a = load_archive(&args.archive)?;
    let mut out = String::new();
    match &args.cell {
        None => {
            let h = a.stats();
            out += &format!("generation {} filled {} best {} mean {}\n", h.generation, h.filled, h.best, h.mean);
            for (k, e) in &a.cells {
                let d = e.descriptors;
                out += &format!(
                    "cell {k} fitness {} muscle {} sensor {} total {} generation {}\n",
                    e.fitness, d.n_muscle, d.n_sensor, d.n_total, e.generation
                );
            }
        }
        Some(c) => {
            let e = elite(&a, c)?;
            let d = e.descriptors;
            out += &format!("cell {c}\nfitness {}\nmapping {}\n", e.fitness, persist::mapping_name(e.mapping));
            out += &format!("muscle {} sensor {} total {}\n", d.n_muscle, d.n_sensor, d.n_total);
            out += &format!("task {}\n", task_of(&a, e)?.label());
            out += &develop(&e.genome)?.to_text();
            if !out.ends_with('\n') {
                out.push('\n');
            }
            out += &e.genome.to_json();
            out.push('\n');
        }
    }
    print!("{out}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Evolve(a) => cmd_evolve(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Generalize(a) => cmd_generalize(cli, a),
        Command::Capacity(a) => cmd_capacity(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 1 } else { 2 })
        }
    }
}
