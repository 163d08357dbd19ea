//! MAP-Elites over CPPN genomes.
//!
//! Cells are indexed by the binned muscle, sensor and total voxel counts, plus
//! a task axis in four-digit mode where one rollout is scored against all
//! seven groupings. Every random draw comes from a seed derived from the master
//! seed, the generation and the child index, and insertions happen in child
//! order after the whole generation is evaluated, so the archive does not
//! depend on how many threads evaluate it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cppn::{random_genome, Genome};
use crate::mnist::{Image, TrainingExample};
use crate::morphology::{develop, Descriptors};
use crate::physics::WorldConfig;
use crate::seeding::{mix, rng_for};
use crate::tasks::{all_groupings, evaluate_rollout, fitness, Mapping, RolloutEngine, TaskError, TaskSpec};

const INIT_SALT: u64 = 0x696e_6974;
const PARENT_SALT: u64 = 0x7061_7265;
const CHILD_SALT: u64 = 0x6368_696c;

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("no valid individual among {0} initial genomes")]
    InitFailure(usize),
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// One binary task, one cell axis set.
    TwoClass,
    /// Four classes; the archive gains a task axis over the seven groupings.
    FourDigit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generations: usize,
    pub parents: usize,
    pub mode: TaskMode,
    pub classes: Vec<u8>,
    pub master_seed: u64,
    /// Seed for picking the training images.
    pub data_seed: u64,
    pub cycles_per_image: usize,
    /// Random genomes tried at most while filling the initial archive.
    pub init_budget: usize,
    pub checkpoint_interval: usize,
    pub world: WorldConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generations: 30_000,
            parents: 20,
            mode: TaskMode::TwoClass,
            classes: vec![0, 1],
            master_seed: 0,
            data_seed: 0,
            cycles_per_image: crate::tasks::DEFAULT_CYCLES_PER_IMAGE,
            init_budget: 500,
            checkpoint_interval: 100,
            world: WorldConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::BadConfig(m.to_string()));
        if self.parents == 0 {
            return bad("parents must be at least 1");
        }
        if self.cycles_per_image == 0 {
            return bad("cycles per image must be at least 1");
        }
        if self.init_budget == 0 {
            return bad("init budget must be at least 1");
        }
        match (&self.mode, self.classes.len()) {
            (TaskMode::TwoClass, 2) | (TaskMode::FourDigit, 4) => {}
            _ => return bad("two-class mode needs 2 classes, four-digit mode needs 4"),
        }
        self.world.validate().map_err(|e| EvolutionError::BadConfig(e.to_string()))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>, EvolutionError> {
        Ok(match self.mode {
            TaskMode::TwoClass => vec![TaskSpec::new(vec![self.classes[0]], vec![self.classes[1]])?],
            TaskMode::FourDigit => all_groupings(&self.classes)?,
        })
    }
}

/// Archive coordinates: descriptor bins and, in four-digit mode, the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub muscle: u8,
    pub sensor: u8,
    pub total: u8,
    pub task: Option<u8>,
}

impl CellKey {
    pub fn new(d: &Descriptors, task: Option<usize>) -> CellKey {
        let [m, s, t] = d.bins();
        CellKey { muscle: m as u8, sensor: s as u8, total: t as u8, task: task.map(|t| t as u8) }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.muscle, self.sensor, self.total)?;
        if let Some(t) = self.task {
            write!(f, "/{t}")?;
        }
        Ok(())
    }
}

impl FromStr for CellKey {
    type Err = String;

    /// Parses `m-s-t` or `m-s-t/task`.
    fn from_str(s: &str) -> Result<CellKey, String> {
        let (bins, task) = match s.split_once('/') {
            Some((b, t)) => (b, Some(t.parse::<u8>().map_err(|e| format!("bad task in {s:?}: {e}"))?)),
            None => (s, None),
        };
        let parts: Vec<u8> = bins
            .split('-')
            .map(|p| p.parse::<u8>().map_err(|e| format!("bad cell key {s:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [muscle, sensor, total] => Ok(CellKey { muscle, sensor, total, task }),
            _ => Err(format!("cell key {s:?} must look like m-s-t or m-s-t/task")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elite {
    pub genome: Genome,
    pub descriptors: Descriptors,
    pub fitness: f64,
    pub task: Option<usize>,
    pub mapping: Mapping,
    pub generation: usize,
    pub eval_seed: u64,
}

impl Elite {
    pub fn key(&self) -> CellKey {
        CellKey::new(&self.descriptors, self.task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub cells: BTreeMap<CellKey, Elite>,
    pub generation: usize,
    pub config: RunConfig,
}

impl Archive {
    pub fn new(config: RunConfig) -> Archive {
        Archive { cells: BTreeMap::new(), generation: 0, config }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Standard MAP-Elites replacement: an empty cell or a strictly better
    /// fitness wins; ties keep the incumbent.
    pub fn insert(&mut self, candidate: Elite) -> bool {
        let key = candidate.key();
        match self.cells.get(&key) {
            Some(incumbent) if candidate.fitness <= incumbent.fitness => false,
            _ => {
                self.cells.insert(key, candidate);
                true
            }
        }
    }

    pub fn best(&self) -> Option<&Elite> {
        self.cells.values().max_by(|a, b| a.fitness.total_cmp(&b.fitness))
    }

    pub fn stats(&self) -> HistoryEntry {
        let n = self.cells.len();
        let best = self.cells.values().map(|e| e.fitness).fold(f64::NEG_INFINITY, f64::max);
        let mean = if n == 0 { f64::NAN } else { self.cells.values().map(|e| e.fitness).sum::<f64>() / n as f64 };
        HistoryEntry { generation: self.generation, filled: n, best, mean }
    }
}

/// One line of the run history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub generation: usize,
    pub filled: usize,
    pub best: f64,
    pub mean: f64,
}

impl HistoryEntry {
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.generation, self.filled, self.best, self.mean)
    }
}

/// Scores genomes on the training stimuli.
pub struct Evaluator<'a> {
    pub engine: &'a dyn RolloutEngine,
    pub tasks: Vec<TaskSpec>,
    pub stimuli: Vec<(u8, Image)>,
    pub cycles: usize,
    pub task_axis: bool,
}

/// Fitness of one genome on one task slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub task: Option<usize>,
    pub fitness: f64,
    pub mapping: Mapping,
}

impl<'a> Evaluator<'a> {
    pub fn new(engine: &'a dyn RolloutEngine, cfg: &RunConfig, train: &[TrainingExample]) -> Result<Self, EvolutionError> {
        cfg.validate()?;
        let stimuli = cfg
            .classes
            .iter()
            .map(|&c| {
                train
                    .iter()
                    .find(|t| t.class == c)
                    .map(|t| (c, t.image.clone()))
                    .ok_or_else(|| EvolutionError::BadConfig(format!("no training image for class {c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Evaluator {
            engine,
            tasks: cfg.tasks()?,
            stimuli,
            cycles: cfg.cycles_per_image,
            task_axis: cfg.mode == TaskMode::FourDigit,
        })
    }

    /// Develops and rolls out `genome` once, scoring every task. `None` for
    /// invalid phenotypes and unstable simulations.
    pub fn evaluate(&self, genome: &Genome) -> Option<(Descriptors, Vec<Scored>)> {
        let body = develop(genome).ok()?;
        let stimuli: Vec<(u8, &Image)> = self.stimuli.iter().map(|(c, i)| (*c, i)).collect();
        let res = evaluate_rollout(self.engine, &body, &stimuli, self.cycles).ok()?;
        let mut scored = Vec::with_capacity(self.tasks.len());
        for (ti, task) in self.tasks.iter().enumerate() {
            let rep = fitness(&res, task).ok()?;
            if !rep.fitness.is_finite() {
                return None;
            }
            scored.push(Scored {
                task: self.task_axis.then_some(ti),
                fitness: rep.fitness,
                mapping: rep.mapping,
            });
        }
        Some((body.descriptors(), scored))
    }

    fn elites(&self, genome: &Genome, generation: usize) -> Vec<Elite> {
        match self.evaluate(genome) {
            None => Vec::new(),
            Some((descriptors, scored)) => scored
                .into_iter()
                .map(|s| Elite {
                    genome: genome.clone(),
                    descriptors,
                    fitness: s.fitness,
                    task: s.task,
                    mapping: s.mapping,
                    generation,
                    eval_seed: genome.seed,
                })
                .collect(),
        }
    }

    /// Re-scores a stored elite from its genome alone.
    pub fn reevaluate(&self, elite: &Elite) -> Option<f64> {
        let (d, scored) = self.evaluate(&elite.genome)?;
        if d != elite.descriptors {
            return None;
        }
        scored.into_iter().find(|s| s.task == elite.task).map(|s| s.fitness)
    }
}

/// Fills the generation-0 archive with random genomes, a batch of
/// `cfg.parents` at a time, until `cfg.parents` cells are filled or the
/// budget runs out.
pub fn init_archive(cfg: &RunConfig, eval: &Evaluator) -> Result<Archive, EvolutionError> {
    cfg.validate()?;
    let mut archive = Archive::new(cfg.clone());
    let mut tried = 0;
    while tried < cfg.init_budget && archive.len() < cfg.parents {
        let batch = cfg.parents.min(cfg.init_budget - tried);
        let results: Vec<Vec<Elite>> = (tried..tried + batch)
            .into_par_iter()
            .map(|i| {
                let seed = mix(&[cfg.master_seed, 0, INIT_SALT, i as u64]);
                let genome = random_genome(&mut rng_for(&[seed]), seed);
                eval.elites(&genome, 0)
            })
            .collect();
        for elite in results.into_iter().flatten() {
            archive.insert(elite);
        }
        tried += batch;
    }
    if archive.is_empty() {
        return Err(EvolutionError::InitFailure(tried));
    }
    Ok(archive)
}

/// Outcome of one generation, for logging and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub parents: Vec<CellKey>,
    pub attempts: usize,
    pub accepted: usize,
    pub invalid_children: usize,
}

/// Mutates `cfg.parents` uniformly drawn elites, evaluates the children and
/// inserts them in child order.
pub fn generation_step(archive: &mut Archive, eval: &Evaluator) -> StepReport {
    let cfg = archive.config.clone();
    let generation = archive.generation + 1;
    let keys: Vec<CellKey> = archive.cells.keys().copied().collect();
    assert!(!keys.is_empty(), "generation_step needs a non-empty archive");
    let mut pick = rng_for(&[cfg.master_seed, generation as u64, PARENT_SALT]);
    let parents: Vec<CellKey> = (0..cfg.parents).map(|_| keys[pick.random_range(0..keys.len())]).collect();
    let jobs: Vec<(u64, &Genome)> = parents
        .iter()
        .enumerate()
        .map(|(i, k)| (mix(&[cfg.master_seed, generation as u64, CHILD_SALT, i as u64]), &archive.cells[k].genome))
        .collect();
    let results: Vec<Vec<Elite>> = jobs
        .par_iter()
        .map(|&(seed, parent)| {
            let (mut child, _) = parent.mutate(&mut rng_for(&[seed]));
            child.seed = seed;
            eval.elites(&child, generation)
        })
        .collect();
    let mut report = StepReport { parents, ..StepReport::default() };
    for elites in results {
        if elites.is_empty() {
            report.invalid_children += 1;
        }
        for e in elites {
            report.attempts += 1;
            if archive.insert(e) {
                report.accepted += 1;
            }
        }
    }
    archive.generation = generation;
    report
}

/// Initializes and runs `cfg.generations` steps. `on_generation` sees the
/// archive after initialization and after every step.
pub fn run(
    cfg: &RunConfig,
    eval: &Evaluator,
    on_generation: &mut dyn FnMut(&Archive, &HistoryEntry),
) -> Result<(Archive, Vec<HistoryEntry>), EvolutionError> {
    let mut archive = init_archive(cfg, eval)?;
    let mut history = vec![archive.stats()];
    on_generation(&archive, &history[0]);
    for _ in 0..cfg.generations {
        generation_step(&mut archive, eval);
        let h = archive.stats();
        on_generation(&archive, &h);
        history.push(h);
    }
    Ok((archive, history))
}
