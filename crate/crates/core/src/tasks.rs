//! Classification tasks: stimulus scheduling, rollouts, the displacement
//! fitness, generalization scoring and the exploit screen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mnist::{Image, LabeledSet};
use crate::morphology::Body;
use crate::physics::{build_world, PhysicsError, WorldConfig, WorldState};

pub const DEFAULT_CYCLES_PER_IMAGE: usize = 10;
/// Generalization counts an image as misclassified unless the robot travels
/// more than this many voxel lengths.
pub const GENERALIZATION_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("class {0} is not part of the task")]
    UnknownClass(u8),
    #[error("expected 4 distinct classes, got {0:?}")]
    WrongArity(Vec<u8>),
    #[error("invalid grouping: {0}")]
    BadGrouping(String),
    #[error("training fitness {0} is not positive, direction cannot be calibrated")]
    Uncalibrated(f64),
    #[error("simulation blew up: {0}")]
    SimulationBlowup(PhysicsError),
    #[error("no images to present")]
    NoImages,
}

/// A binary split of the task's classes. Which group goes left is decided by
/// the robot, not by the task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
}

impl TaskSpec {
    pub fn new(left: Vec<u8>, right: Vec<u8>) -> Result<TaskSpec, TaskError> {
        if left.is_empty() || right.is_empty() {
            return Err(TaskError::BadGrouping("both groups must be non-empty".into()));
        }
        if left.iter().any(|c| right.contains(c)) {
            return Err(TaskError::BadGrouping("groups overlap".into()));
        }
        Ok(TaskSpec { left, right })
    }

    pub fn classes(&self) -> Vec<u8> {
        let mut all: Vec<u8> = self.left.iter().chain(&self.right).copied().collect();
        all.sort_unstable();
        all
    }

    /// `Some(true)` for the left group, `Some(false)` for the right group.
    pub fn in_left(&self, class: u8) -> Option<bool> {
        if self.left.contains(&class) {
            Some(true)
        } else if self.right.contains(&class) {
            Some(false)
        } else {
            None
        }
    }

    pub fn label(&self) -> String {
        let join = |g: &[u8]| g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!("{} / {}", join(&self.left), join(&self.right))
    }
}

/// The seven binary groupings of four classes: four one-vs-rest splits then
/// three two-vs-two splits.
pub fn all_groupings(classes: &[u8]) -> Result<Vec<TaskSpec>, TaskError> {
    let mut distinct = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if classes.len() != 4 || distinct.len() != 4 {
        return Err(TaskError::WrongArity(classes.to_vec()));
    }
    let c = classes;
    let rest = |keep: &[usize]| -> Vec<u8> {
        (0..4).filter(|i| !keep.contains(i)).map(|i| c[i]).collect()
    };
    let mut out = Vec::with_capacity(7);
    for i in 0..4 {
        out.push(TaskSpec::new(vec![c[i]], rest(&[i]))?);
    }
    for j in 1..4 {
        out.push(TaskSpec::new(vec![c[0], c[j]], rest(&[0, j]))?);
    }
    Ok(out)
}

/// Sign assigned to the left group's displacement; the right group takes the
/// opposite sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mapping {
    LeftNegative,
    LeftPositive,
}

impl Mapping {
    pub fn expected_sign(self, in_left: bool) -> f64 {
        match (self, in_left) {
            (Mapping::LeftNegative, true) | (Mapping::LeftPositive, false) => -1.0,
            _ => 1.0,
        }
    }

    pub fn swapped(self) -> Mapping {
        match self {
            Mapping::LeftNegative => Mapping::LeftPositive,
            Mapping::LeftPositive => Mapping::LeftNegative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub class: u8,
    pub dx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub records: Vec<Displacement>,
    pub cycles_per_image: usize,
}

impl EvalResult {
    pub fn from_pairs(pairs: &[(u8, f64)]) -> EvalResult {
        EvalResult {
            records: pairs.iter().map(|&(class, dx)| Displacement { class, dx }).collect(),
            cycles_per_image: DEFAULT_CYCLES_PER_IMAGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub fitness: f64,
    pub mapping: Mapping,
    /// Indices into `EvalResult::records`.
    pub misclassified: Vec<usize>,
}

fn score(res: &EvalResult, task: &TaskSpec, mapping: Mapping) -> Result<FitnessReport, TaskError> {
    let mut misclassified = Vec::new();
    let mut min_ok = f64::INFINITY;
    let mut max_bad: f64 = 0.0;
    for (i, r) in res.records.iter().enumerate() {
        let left = task.in_left(r.class).ok_or(TaskError::UnknownClass(r.class))?;
        if r.dx * mapping.expected_sign(left) > 0.0 {
            min_ok = min_ok.min(r.dx.abs());
        } else {
            misclassified.push(i);
            max_bad = max_bad.max(r.dx.abs());
        }
    }
    let fitness = if misclassified.is_empty() { min_ok } else { -max_bad };
    Ok(FitnessReport { fitness, mapping, misclassified })
}

/// Scores both direction mappings and keeps the better one. A consistent
/// robot scores its smallest displacement; otherwise the largest displacement
/// among misclassified images, negated.
pub fn fitness(res: &EvalResult, task: &TaskSpec) -> Result<FitnessReport, TaskError> {
    if res.records.is_empty() {
        return Err(TaskError::NoImages);
    }
    let a = score(res, task, Mapping::LeftNegative)?;
    let b = score(res, task, Mapping::LeftPositive)?;
    Ok(if b.fitness > a.fitness { b } else { a })
}

/// Direction mapping learned from the training rollout.
pub fn calibrate_direction(res: &EvalResult, task: &TaskSpec) -> Result<Mapping, TaskError> {
    let report = fitness(res, task)?;
    if report.fitness > 0.0 {
        Ok(report.mapping)
    } else {
        Err(TaskError::Uncalibrated(report.fitness))
    }
}

/// Anything that can turn a body and a stimulus sequence into per-stimulus
/// displacements. The physics engine is the real implementation; tests swap
/// in scripted tables.
pub trait RolloutEngine: Sync {
    /// One continuous lifetime: a settle cycle under the first stimulus, then
    /// `cycles` actuation cycles per stimulus. Returns one dx per stimulus.
    fn rollout(&self, body: &Body, images: &[&Image], cycles: usize) -> Result<Vec<f64>, PhysicsError>;
}

#[derive(Debug, Clone, Default)]
pub struct PhysicsEngine {
    pub cfg: WorldConfig,
}

impl PhysicsEngine {
    pub fn new(cfg: WorldConfig) -> PhysicsEngine {
        PhysicsEngine { cfg }
    }

    /// Rollout with a per-step observer and a callback at every stimulus switch.
    pub fn rollout_observed(
        &self,
        body: &Body,
        images: &[&Image],
        cycles: usize,
        observer: &mut dyn FnMut(&WorldState),
        on_switch: &mut dyn FnMut(usize, &WorldState),
    ) -> Result<Vec<f64>, PhysicsError> {
        let mut world = build_world(body, &self.cfg)?;
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        world.run_segment(Some(first), 1, observer)?;
        let mut out = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            on_switch(i, &world);
            out.push(world.run_segment(Some(img), cycles, observer)?);
        }
        Ok(out)
    }
}

impl RolloutEngine for PhysicsEngine {
    fn rollout(&self, body: &Body, images: &[&Image], cycles: usize) -> Result<Vec<f64>, PhysicsError> {
        self.rollout_observed(body, images, cycles, &mut |_| {}, &mut |_, _| {})
    }
}

/// Presents `stimuli` in order within one lifetime.
pub fn evaluate_rollout(
    engine: &dyn RolloutEngine,
    body: &Body,
    stimuli: &[(u8, &Image)],
    cycles: usize,
) -> Result<EvalResult, TaskError> {
    if stimuli.is_empty() {
        return Err(TaskError::NoImages);
    }
    let images: Vec<&Image> = stimuli.iter().map(|&(_, img)| img).collect();
    let dxs = engine.rollout(body, &images, cycles).map_err(TaskError::SimulationBlowup)?;
    Ok(EvalResult {
        records: stimuli.iter().zip(dxs).map(|(&(class, _), dx)| Displacement { class, dx }).collect(),
        cycles_per_image: cycles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub class: u8,
    /// `None` when the rollout blew up.
    pub dx: Option<f64>,
    /// `Some(true)` if the robot chose the left group, `None` if it did not
    /// travel far enough to count.
    pub predicted_left: Option<bool>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub class: u8,
    pub predicted_left: usize,
    pub predicted_right: usize,
    pub no_decision: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub rows: Vec<GeneralizationRow>,
    pub confusion: Vec<ConfusionRow>,
}

/// Scores one robot on a held-out set, each image in a fresh lifetime.
pub fn generalize(
    engine: &dyn RolloutEngine,
    body: &Body,
    eval_set: &LabeledSet,
    task: &TaskSpec,
    mapping: Mapping,
    cycles: usize,
    threshold: f64,
) -> Result<GeneralizationReport, TaskError> {
    for &c in &eval_set.labels {
        task.in_left(c).ok_or(TaskError::UnknownClass(c))?;
    }
    let rows: Vec<GeneralizationRow> = (0..eval_set.len())
        .into_par_iter()
        .map(|i| {
            let class = eval_set.labels[i];
            let in_left = task.in_left(class).expect("checked above");
            let dx = engine.rollout(body, &[&eval_set.images[i]], cycles).ok().map(|v| v[0]);
            let predicted_left = match dx {
                Some(dx) if dx.abs() > threshold => Some(dx.signum() == mapping.expected_sign(true)),
                _ => None,
            };
            GeneralizationRow { class, dx, predicted_left, correct: predicted_left == Some(in_left) }
        })
        .collect();
    let correct = rows.iter().filter(|r| r.correct).count();
    let mut classes = task.classes();
    classes.retain(|c| eval_set.labels.contains(c));
    let confusion = classes
        .iter()
        .map(|&class| {
            let of = rows.iter().filter(|r| r.class == class);
            ConfusionRow {
                class,
                predicted_left: of.clone().filter(|r| r.predicted_left == Some(true)).count(),
                predicted_right: of.clone().filter(|r| r.predicted_left == Some(false)).count(),
                no_decision: of.filter(|r| r.predicted_left.is_none()).count(),
            }
        })
        .collect();
    let total = rows.len();
    Ok(GeneralizationReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        rows,
        confusion,
    })
}

/// Thresholds for screening out robots that move by exploiting the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploitFilter {
    /// Largest point-mass speed allowed, voxel lengths per second.
    pub max_speed: f64,
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for ExploitFilter {
    fn default() -> Self {
        ExploitFilter { max_speed: 150.0, min_area: 0.1, max_area: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitVerdict {
    pub pass: bool,
    pub reason: Option<String>,
}

impl ExploitFilter {
    /// Runs the reference rollout (the training stimuli) and watches point
    /// speeds and voxel areas.
    pub fn check(&self, engine: &PhysicsEngine, body: &Body, images: &[&Image], cycles: usize) -> ExploitVerdict {
        let mut reason: Option<String> = None;
        let mut observer = |w: &WorldState| {
            if reason.is_some() {
                return;
            }
            let speed = w.max_speed();
            if speed > self.max_speed {
                reason = Some(format!("point speed {speed:.2} exceeds {:.2} at t = {:.3}", self.max_speed, w.time));
                return;
            }
            for v in 0..w.n_voxels() {
                let a = w.voxel_area(v);
                if a < self.min_area || a > self.max_area {
                    reason = Some(format!("voxel {v} area {a:.3} outside [{}, {}]", self.min_area, self.max_area));
                    return;
                }
            }
        };
        match engine.rollout_observed(body, images, cycles, &mut observer, &mut |_, _| {}) {
            Err(e) => ExploitVerdict { pass: false, reason: Some(e.to_string()) },
            Ok(_) => ExploitVerdict { pass: reason.is_none(), reason },
        }
    }
}
