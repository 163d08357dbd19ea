//! On-disk formats: archive checkpoints and text reports.
//!
//! Checkpoints are pretty-printed JSON with a version field and full-precision
//! floats, written to a temporary name and renamed into place. Reports are
//! line-oriented text, one record per line, so that later commands can append
//! to them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cppn::{Genome, GenomeFile};
use crate::evolution::{Archive, CellKey, Elite, RunConfig};
use crate::morphology::{develop, Descriptors};
use crate::tasks::{GeneralizationReport, Mapping, TaskSpec};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_HEADER: &str = "voxcog-report 1";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptEnvelope(String),
    #[error("cannot access {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub genome: GenomeFile,
    pub fitness: f64,
    pub descriptors: Descriptors,
    pub task: Option<usize>,
    pub mapping: Mapping,
    pub generation: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEnvelope {
    pub version: u32,
    pub config: RunConfig,
    pub master_seed: u64,
    pub generation: usize,
    pub cells: Vec<CellRecord>,
}

impl CheckpointEnvelope {
    pub fn from_archive(a: &Archive) -> CheckpointEnvelope {
        CheckpointEnvelope {
            version: CHECKPOINT_VERSION,
            config: a.config.clone(),
            master_seed: a.config.master_seed,
            generation: a.generation,
            cells: a
                .cells
                .iter()
                .map(|(k, e)| CellRecord {
                    key: k.to_string(),
                    genome: GenomeFile::from(&e.genome),
                    fitness: e.fitness,
                    descriptors: e.descriptors,
                    task: e.task,
                    mapping: e.mapping,
                    generation: e.generation,
                    eval_seed: e.eval_seed,
                })
                .collect(),
        }
    }

    /// Rebuilds the archive, checking that every genome re-develops to its
    /// stored descriptors and cell.
    pub fn into_archive(self) -> Result<Archive, PersistError> {
        let corrupt = PersistError::CorruptEnvelope;
        if self.master_seed != self.config.master_seed {
            return Err(corrupt("master seed disagrees with config".into()));
        }
        let mut archive = Archive::new(self.config);
        archive.generation = self.generation;
        for rec in self.cells {
            let key: CellKey = rec.key.parse().map_err(corrupt)?;
            let genome = Genome::try_from(rec.genome).map_err(|e| corrupt(format!("cell {key}: {e}")))?;
            let body = develop(&genome).map_err(|e| corrupt(format!("cell {key}: {e}")))?;
            if body.descriptors() != rec.descriptors {
                return Err(corrupt(format!("cell {key}: genome develops to different descriptors")));
            }
            if !rec.fitness.is_finite() {
                return Err(corrupt(format!("cell {key}: non-finite fitness")));
            }
            let elite = Elite {
                genome,
                descriptors: rec.descriptors,
                fitness: rec.fitness,
                task: rec.task,
                mapping: rec.mapping,
                generation: rec.generation,
                eval_seed: rec.eval_seed,
            };
            if elite.key() != key {
                return Err(corrupt(format!("cell {key}: elite belongs in {}", elite.key())));
            }
            if archive.cells.insert(key, elite).is_some() {
                return Err(corrupt(format!("cell {key} appears twice")));
            }
        }
        Ok(archive)
    }
}

pub fn checkpoint_to_string(a: &Archive) -> String {
    let mut s = serde_json::to_string_pretty(&CheckpointEnvelope::from_archive(a)).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<Archive, PersistError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| PersistError::CorruptEnvelope(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(found) => return Err(PersistError::VersionMismatch { found, expected: CHECKPOINT_VERSION }),
        None => return Err(PersistError::CorruptEnvelope("missing version".into())),
    }
    let env: CheckpointEnvelope =
        serde_json::from_value(value).map_err(|e| PersistError::CorruptEnvelope(e.to_string()))?;
    env.into_archive()
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PersistError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(contents).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(a: &Archive, path: &Path) -> Result<(), PersistError> {
    write_atomic(path, checkpoint_to_string(a).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Archive, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    checkpoint_from_str(&text)
}

/// One robot's held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotResult {
    pub cell: CellKey,
    pub mapping: Mapping,
    pub report: GeneralizationReport,
}

/// Generalization report: per-image rows, confusion counts and the mean
/// accuracy over robots. `config` is a single-line JSON rendering of the
/// resolved settings.
pub fn render_generalization(
    config: &str,
    task: &TaskSpec,
    robots: &[RobotResult],
    skipped: &[(CellKey, String)],
) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(REPORT_HEADER.to_string());
    line(format!("config {config}"));
    line(format!("task {}", task.label()));
    for r in robots {
        let rep = &r.report;
        line(format!(
            "robot {} mapping {} accuracy {} correct {} total {}",
            r.cell,
            mapping_name(r.mapping),
            rep.accuracy,
            rep.correct,
            rep.total
        ));
        for row in &rep.rows {
            let dx = row.dx.map_or("nan".to_string(), |d| d.to_string());
            let pred = match row.predicted_left {
                Some(true) => "left",
                Some(false) => "right",
                None => "none",
            };
            line(format!("image {} {} {} {} {}", r.cell, row.class, dx, pred, u8::from(row.correct)));
        }
        for c in &rep.confusion {
            line(format!("confusion {} {} {} {} {}", r.cell, c.class, c.predicted_left, c.predicted_right, c.no_decision));
        }
    }
    for (cell, reason) in skipped {
        line(format!("skipped {cell} {reason}"));
    }
    if !robots.is_empty() {
        let mean = robots.iter().map(|r| r.report.accuracy).sum::<f64>() / robots.len() as f64;
        line(format!("mean_accuracy {mean}"));
    }
    out
}

pub fn mapping_name(m: Mapping) -> &'static str {
    match m {
        Mapping::LeftNegative => "left_negative",
        Mapping::LeftPositive => "left_positive",
    }
}

/// Last `mean_accuracy` value in a report.
pub fn report_mean_accuracy(text: &str) -> Result<f64, PersistError> {
    if text.lines().next() != Some(REPORT_HEADER) {
        return Err(PersistError::CorruptEnvelope("not a voxcog report".into()));
    }
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix("mean_accuracy "))
        .ok_or_else(|| PersistError::CorruptEnvelope("report has no mean_accuracy line".into()))?
        .trim()
        .parse()
        .map_err(|e| PersistError::CorruptEnvelope(format!("bad mean_accuracy: {e}")))
}

/// Task line of a report, as written by `render_generalization`.
pub fn report_task(text: &str) -> Result<TaskSpec, PersistError> {
    let corrupt = |m: String| PersistError::CorruptEnvelope(m);
    let spec = text
        .lines()
        .find_map(|l| l.strip_prefix("task "))
        .ok_or_else(|| corrupt("report has no task line".into()))?;
    let (l, r) = spec.split_once(" / ").ok_or_else(|| corrupt(format!("bad task line {spec:?}")))?;
    let parse = |g: &str| -> Result<Vec<u8>, PersistError> {
        g.split(',').map(|c| c.trim().parse::<u8>().map_err(|e| corrupt(format!("bad class {c:?}: {e}")))).collect()
    };
    TaskSpec::new(parse(l)?, parse(r)?).map_err(|e| corrupt(e.to_string()))
}

/// Appends lines to an existing file.
pub fn append_lines(path: &Path, lines: &str) -> Result<(), PersistError> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    f.write_all(lines.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::TaskMode;
    use crate::tasks::{ConfusionRow, GeneralizationRow};

    fn archive() -> Archive {
        let cfg = RunConfig { master_seed: 4, mode: TaskMode::FourDigit, classes: vec![0, 1, 2, 3], ..RunConfig::default() };
        let mut a = Archive::new(cfg);
        a.generation = 12;
        for (i, out) in [1usize, 2, 3, 4, 5].into_iter().enumerate() {
            let mut g = Genome::minimal(i as u64);
            g.add_edge(Genome::input_id(2), Genome::output_id(out), 1.0 + i as f64 / 3.0).unwrap();
            let d = develop(&g).unwrap().descriptors();
            a.cells.insert(
                CellKey::new(&d, Some(i)),
                Elite {
                    genome: g,
                    descriptors: d,
                    fitness: 0.1 * i as f64 - 0.123456789012345,
                    task: Some(i),
                    mapping: Mapping::LeftPositive,
                    generation: i,
                    eval_seed: 99 + i as u64,
                },
            );
        }
        a
    }

    #[test]
    fn round_trip() {
        let a = archive();
        assert_eq!(a.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        save_checkpoint(&a, &p).unwrap();
        let b = load_checkpoint(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(checkpoint_to_string(&b), fs::read_to_string(&p).unwrap());
    }

    #[test]
    fn truncated_is_corrupt() {
        let text = checkpoint_to_string(&archive());
        let cut = &text[..text.len() / 2];
        assert!(matches!(checkpoint_from_str(cut), Err(PersistError::CorruptEnvelope(_))));
    }

    #[test]
    fn unknown_version() {
        let text = checkpoint_to_string(&archive()).replacen("\"version\": 1", "\"version\": 999", 1);
        assert!(matches!(checkpoint_from_str(&text), Err(PersistError::VersionMismatch { found: 999, .. })));
    }

    #[test]
    fn tampered_descriptors_rejected() {
        let mut env = CheckpointEnvelope::from_archive(&archive());
        env.cells[0].descriptors.n_total += 1;
        assert!(matches!(env.into_archive(), Err(PersistError::CorruptEnvelope(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/ck.json")), Err(PersistError::IoFailure { .. })));
    }

    #[test]
    fn report_round_trip() {
        let task = TaskSpec::new(vec![0], vec![1]).unwrap();
        let report = GeneralizationReport {
            accuracy: 0.5,
            correct: 1,
            total: 2,
            rows: vec![
                GeneralizationRow { class: 0, dx: Some(-4.0), predicted_left: Some(true), correct: true },
                GeneralizationRow { class: 1, dx: None, predicted_left: None, correct: false },
            ],
            confusion: vec![
                ConfusionRow { class: 0, predicted_left: 1, predicted_right: 0, no_decision: 0 },
                ConfusionRow { class: 1, predicted_left: 0, predicted_right: 0, no_decision: 1 },
            ],
        };
        let cell: CellKey = "1-1-3".parse().unwrap();
        let robots = [
            RobotResult { cell, mapping: Mapping::LeftNegative, report: report.clone() },
            RobotResult { cell, mapping: Mapping::LeftNegative, report: GeneralizationReport { accuracy: 1.0, ..report } },
        ];
        let text = render_generalization("{}", &task, &robots, &[]);
        assert!(text.contains("image 1-1-3 1 nan none 0\n"));
        assert_eq!(report_mean_accuracy(&text).unwrap(), 0.75);
        assert_eq!(report_task(&text).unwrap(), task);
        assert!(report_mean_accuracy("hello").is_err());
    }
}
