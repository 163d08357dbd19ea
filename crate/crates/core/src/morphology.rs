//! Genotype-to-phenotype development and morphological descriptors.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cppn::{CppnError, Genome};
use crate::voxel::VoxelType;
use crate::GRID;

/// Number of bins per descriptor axis.
pub const BINS: usize = 7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MorphologyError {
    #[error("phenotype has no voxels")]
    EmptyBody,
    #[error(transparent)]
    Cppn(#[from] CppnError),
    #[error("bad body text: {0}")]
    BadText(String),
}

/// Voxel counts used as archive coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptors {
    pub n_muscle: usize,
    pub n_sensor: usize,
    pub n_total: usize,
}

impl Descriptors {
    pub fn bins(&self) -> [usize; 3] {
        bin_index(self)
    }
}

fn bin_of(count: usize) -> usize {
    let cells = GRID * GRID;
    (count * BINS / (cells + 1)).min(BINS - 1)
}

/// Equal-width binning of each count over `[0, 196]`.
pub fn bin_index(d: &Descriptors) -> [usize; 3] {
    [bin_of(d.n_muscle), bin_of(d.n_sensor), bin_of(d.n_total)]
}

/// A 14x14 voxel grid, row 0 at the top.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Body {
    grid: Vec<VoxelType>,
}

impl fmt::Debug for Body {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Body(\n{}\n)", self.to_text())
    }
}

impl Body {
    pub fn empty() -> Body {
        Body { grid: vec![VoxelType::Empty; GRID * GRID] }
    }

    pub fn size(&self) -> usize {
        GRID
    }

    pub fn get(&self, row: usize, col: usize) -> VoxelType {
        self.grid[row * GRID + col]
    }

    pub fn set(&mut self, row: usize, col: usize, vt: VoxelType) {
        self.grid[row * GRID + col] = vt;
    }

    pub fn cells(&self) -> &[VoxelType] {
        &self.grid
    }

    /// Non-empty cells in row-major order as `(row, col, type)`.
    pub fn occupied(&self) -> Vec<(usize, usize, VoxelType)> {
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, &vt)| vt != VoxelType::Empty)
            .map(|(i, &vt)| (i / GRID, i % GRID, vt))
            .collect()
    }

    pub fn descriptors(&self) -> Descriptors {
        Descriptors {
            n_muscle: self.grid.iter().filter(|v| v.is_muscle()).count(),
            n_sensor: self.grid.iter().filter(|v| v.is_sensor()).count(),
            n_total: self.grid.iter().filter(|&&v| v != VoxelType::Empty).count(),
        }
    }

    /// 4-connected components of non-empty cells, each sorted, listed in order
    /// of their smallest row-major index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; GRID * GRID];
        let mut out = Vec::new();
        for start in 0..GRID * GRID {
            if seen[start] || self.grid[start] == VoxelType::Empty {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                let (r, c) = (i / GRID, i % GRID);
                let mut visit = |j: usize| {
                    if !seen[j] && self.grid[j] != VoxelType::Empty {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if r > 0 {
                    visit(i - GRID);
                }
                if r + 1 < GRID {
                    visit(i + GRID);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < GRID {
                    visit(i + 1);
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }

    /// Keeps only the largest component; ties go to the component holding the
    /// smallest row-major index.
    pub fn keep_largest_component(&mut self) {
        let comps = self.components();
        // components() is ordered by smallest index, so max_by keeps the first of equals
        let Some(best) = comps.iter().enumerate().max_by(|(ia, a), (ib, b)| {
            a.len().cmp(&b.len()).then(ib.cmp(ia))
        }) else {
            return;
        };
        let mut keep = vec![false; GRID * GRID];
        for &i in best.1 {
            keep[i] = true;
        }
        for (i, cell) in self.grid.iter_mut().enumerate() {
            if !keep[i] {
                *cell = VoxelType::Empty;
            }
        }
    }

    /// 14 lines of 14 glyphs, see [`VoxelType::glyph`].
    pub fn to_text(&self) -> String {
        self.grid
            .chunks(GRID)
            .map(|row| row.iter().map(|v| v.glyph()).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Parses the text format. Fewer than 14 rows or columns are padded with
    /// empty cells on the bottom and right.
    pub fn from_text(text: &str) -> Result<Body, MorphologyError> {
        let mut body = Body::empty();
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() > GRID {
            return Err(MorphologyError::BadText(format!("{} rows, at most {GRID} allowed", lines.len())));
        }
        for (r, line) in lines.iter().enumerate() {
            let glyphs: Vec<char> = line.trim().chars().collect();
            if glyphs.len() > GRID {
                return Err(MorphologyError::BadText(format!("row {r} has {} cells", glyphs.len())));
            }
            for (c, g) in glyphs.into_iter().enumerate() {
                let vt = VoxelType::from_glyph(g)
                    .ok_or_else(|| MorphologyError::BadText(format!("unknown glyph {g:?}")))?;
                body.set(r, c, vt);
            }
        }
        Ok(body)
    }

    /// Checks every structural invariant of a developed body.
    pub fn check_invariants(&self) -> Result<(), String> {
        let d = self.descriptors();
        if d.n_total == 0 {
            return Err("body is empty".into());
        }
        if d.n_muscle + d.n_sensor > d.n_total {
            return Err("active counts exceed total".into());
        }
        if !self.is_connected() {
            return Err("body is not 4-connected".into());
        }
        Ok(())
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Body {
        let mut out = Body::empty();
        for r in 0..GRID {
            for c in 0..GRID {
                out.set(r, GRID - 1 - c, self.get(r, c));
            }
        }
        out
    }
}

/// CPPN inputs for grid cell `(row, col)`: `x` and `y` in `[-1, 1]` (y up) and
/// the distance to the grid centre scaled to `[0, 1]`.
pub fn cell_inputs(row: usize, col: usize) -> [f64; 3] {
    let span = (GRID - 1) as f64;
    let x = -1.0 + 2.0 * col as f64 / span;
    let y = 1.0 - 2.0 * row as f64 / span;
    let d = (x * x + y * y).sqrt() / std::f64::consts::SQRT_2;
    [x, y, d]
}

/// Index of the largest score; the lowest index wins ties.
fn argmax(scores: &[f64; 7]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Queries the CPPN at every cell, assigns the arg-max voxel type and keeps
/// the largest connected component.
pub fn develop(genome: &Genome) -> Result<Body, MorphologyError> {
    let plan = genome.compile()?;
    let mut body = Body::empty();
    let mut scratch = Vec::new();
    for r in 0..GRID {
        for c in 0..GRID {
            let [x, y, d] = cell_inputs(r, c);
            let out = plan.eval_with(x, y, d, &mut scratch);
            body.set(r, c, VoxelType::ALL[argmax(&out)]);
        }
    }
    body.keep_largest_component();
    if body.descriptors().n_total == 0 {
        return Err(MorphologyError::EmptyBody);
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cppn::{Activation, Genome, NodeKind};

    #[test]
    fn bins_examples() {
        let d = |m, s, t| Descriptors { n_muscle: m, n_sensor: s, n_total: t };
        assert_eq!(bin_index(&d(0, 0, 1)), [0, 0, 0]);
        assert_eq!(bin_index(&d(0, 0, 196)), [0, 0, 6]);
        assert_eq!(bin_index(&d(100, 50, 180)), [3, 1, 6]);
    }

    #[test]
    fn bins_monotone_and_cover() {
        let mut last = 0;
        for n in 0..=196 {
            let b = bin_of(n);
            assert!(b >= last);
            last = b;
        }
        assert_eq!(bin_of(0), 0);
        assert_eq!(bin_of(196), 6);
    }

    #[test]
    fn constant_rigid_block() {
        // d > 0 at every cell (the centre falls between cells), so Rigid wins everywhere
        let mut g = Genome::minimal(0);
        g.add_edge(2, Genome::output_id(VoxelType::Rigid.index()), 1.0).unwrap();
        let body = develop(&g).unwrap();
        assert_eq!(body.descriptors(), Descriptors { n_muscle: 0, n_sensor: 0, n_total: 196 });
        assert!(body.cells().iter().all(|&v| v == VoxelType::Rigid));
    }

    #[test]
    fn all_zero_is_empty() {
        let g = Genome::minimal(0);
        assert_eq!(develop(&g).unwrap_err(), MorphologyError::EmptyBody);
    }

    #[test]
    fn keeps_largest_blob() {
        let mut b = Body::from_text("##...\n.....\n..###").unwrap();
        b.keep_largest_component();
        assert_eq!(b.to_text().lines().next().unwrap(), ".".repeat(14));
        assert_eq!(b.descriptors().n_total, 3);
        assert_eq!(b.get(2, 2), VoxelType::Rigid);

        let mut tie = Body::from_text("##.\n...\n.##").unwrap();
        tie.keep_largest_component();
        assert_eq!(tie.get(0, 0), VoxelType::Rigid);
        assert_eq!(tie.get(2, 1), VoxelType::Empty);
    }

    #[test]
    fn develop_filters_disconnected_blobs() {
        // Rigid = sin(6x) gives two full-height stripes, columns 0..=3 and 7..=9
        let mut g = Genome::minimal(1);
        let h = g.add_node(NodeKind::Hidden, Some(Activation::Sin));
        g.add_edge(0, h, 6.0).unwrap();
        g.add_edge(h, Genome::output_id(VoxelType::Rigid.index()), 1.0).unwrap();
        let body = develop(&g).unwrap();
        assert!(body.check_invariants().is_ok());

        let mut raw = Body::empty();
        for r in 0..GRID {
            for c in 0..GRID {
                let [x, _, _] = cell_inputs(r, c);
                if (6.0 * x).sin() > 0.0 {
                    raw.set(r, c, VoxelType::Rigid);
                }
            }
        }
        let sizes: Vec<usize> = raw.components().iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![56, 42]);
        assert_eq!(body.descriptors().n_total, 56);
        assert!((0..GRID).all(|r| body.get(r, 0) == VoxelType::Rigid && body.get(r, 8) == VoxelType::Empty));
    }

    #[test]
    fn text_round_trip() {
        let b = Body::from_text("M#+\nW-o").unwrap();
        assert_eq!(Body::from_text(&b.to_text()).unwrap(), b);
        assert_eq!(b.descriptors(), Descriptors { n_muscle: 2, n_sensor: 2, n_total: 6 });
        assert!(Body::from_text("X").is_err());
    }

    #[test]
    fn inputs_are_normalised() {
        assert_eq!(cell_inputs(0, 0), [-1.0, 1.0, 1.0]);
        assert_eq!(cell_inputs(13, 13)[0], 1.0);
        let centre = cell_inputs(6, 6)[2];
        assert!(centre > 0.0 && centre < 0.1);
    }
}
