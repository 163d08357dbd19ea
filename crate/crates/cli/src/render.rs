//! SVG renderings of a rollout: a space-time strip and per-sample frames.

use std::cell::RefCell;
use std::fmt::Write;

use voxcog::mnist::Image;
use voxcog::morphology::Body;
use voxcog::physics::{PhysicsError, WorldState};
use voxcog::tasks::PhysicsEngine;
use voxcog::voxel::VoxelType;

pub const SAMPLES_PER_CYCLE: usize = 20;
const SCALE: f64 = 12.0;

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub segment: usize,
    pub quads: Vec<([[f64; 2]; 4], VoxelType)>,
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub snapshots: Vec<Snapshot>,
    pub classes: Vec<u8>,
    pub dx: Vec<f64>,
}

fn snapshot(w: &WorldState, segment: usize) -> Snapshot {
    let quads = w
        .voxels
        .iter()
        .map(|v| (v.corners.map(|c| w.pos[c]), v.kind))
        .collect();
    Snapshot { time: w.time, segment, quads }
}

/// Rolls out `stimuli` in one lifetime and keeps `SAMPLES_PER_CYCLE`
/// snapshots per measured cycle. The settle cycle is not recorded.
pub fn record(
    engine: &PhysicsEngine,
    body: &Body,
    stimuli: &[(u8, &Image)],
    cycles: usize,
) -> Result<Recording, PhysicsError> {
    let spc = engine.cfg.steps_per_cycle();
    // (segment, steps into segment), None during settling
    let state: RefCell<Option<(usize, usize)>> = RefCell::new(None);
    let snaps = RefCell::new(Vec::new());
    let images: Vec<&Image> = stimuli.iter().map(|s| s.1).collect();
    let dx = engine.rollout_observed(
        body,
        &images,
        cycles,
        &mut |w| {
            let mut st = state.borrow_mut();
            if let Some((seg, k)) = st.as_mut() {
                *k += 1;
                let within = (*k - 1) % spc + 1;
                if within * SAMPLES_PER_CYCLE / spc > (within - 1) * SAMPLES_PER_CYCLE / spc {
                    snaps.borrow_mut().push(snapshot(w, *seg));
                }
            }
        },
        &mut |i, _| *state.borrow_mut() = Some((i, 0)),
    )?;
    Ok(Recording { snapshots: snaps.into_inner(), classes: stimuli.iter().map(|s| s.0).collect(), dx })
}

fn color(vt: VoxelType) -> &'static str {
    match vt {
        VoxelType::Empty => "none",
        VoxelType::Rigid => "#404040",
        VoxelType::Soft => "#9ecae1",
        VoxelType::MusclePhase0 => "#e6550d",
        VoxelType::MusclePhasePi => "#fdae6b",
        VoxelType::SensorExpand => "#31a354",
        VoxelType::SensorShrink => "#a1d99b",
    }
}

struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

fn bounds<'a>(snaps: impl Iterator<Item = &'a Snapshot>) -> Bounds {
    let mut b = Bounds { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
    for s in snaps {
        for (q, _) in &s.quads {
            for p in q {
                b.x0 = b.x0.min(p[0]);
                b.x1 = b.x1.max(p[0]);
                b.y0 = b.y0.min(p[1]);
                b.y1 = b.y1.max(p[1]);
            }
        }
    }
    if !b.x0.is_finite() {
        b = Bounds { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
    }
    b.y0 = b.y0.min(0.0);
    b
}

fn polygons(out: &mut String, s: &Snapshot, map: impl Fn([f64; 2]) -> (f64, f64), opacity: f64) {
    for (q, vt) in &s.quads {
        let pts: Vec<String> = q
            .iter()
            .map(|&p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="{}" fill-opacity="{opacity}" stroke="#000" stroke-width="0.3"/>"##,
            pts.join(" "),
            color(*vt)
        );
    }
}

/// Silhouettes stacked downward in time at their true x positions, with a
/// dashed line wherever the stimulus changes. `every` keeps one snapshot in
/// `every`.
pub fn spacetime_svg(rec: &Recording, every: usize) -> String {
    let every = every.max(1);
    let kept: Vec<&Snapshot> = rec.snapshots.iter().step_by(every).collect();
    let b = bounds(kept.iter().copied());
    let row = (b.y1 - b.y0 + 1.0) * SCALE;
    let margin = 40.0;
    let width = (b.x1 - b.x0) * SCALE + 2.0 * margin;
    let height = kept.len() as f64 * row + 2.0 * margin;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">"##
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let mut last_segment = None;
    for (i, s) in kept.iter().enumerate() {
        let top = margin + i as f64 * row;
        if last_segment != Some(s.segment) {
            let class = rec.classes.get(s.segment).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                r##"<line x1="0" y1="{top:.2}" x2="{width:.2}" y2="{top:.2}" stroke="#c00" stroke-dasharray="6,4"/>"##
            );
            let _ = writeln!(out, r##"<text x="4" y="{:.2}" font-size="12" fill="#c00">stimulus {class}</text>"##, top + 12.0);
            last_segment = Some(s.segment);
        }
        let base = top + (b.y1 + 0.5 - b.y0) * SCALE;
        polygons(&mut out, s, |p| (margin + (p[0] - b.x0) * SCALE, base - (p[1] - b.y0) * SCALE), 0.8);
        let _ = writeln!(out, r##"<text x="{:.2}" y="{:.2}" font-size="9" fill="#666">t={:.2}</text>"##, width - margin + 2.0, base, s.time);
    }
    out.push_str("</svg>\n");
    out
}

/// One frame per snapshot, all drawn in the same window.
pub fn frame_svgs(rec: &Recording) -> Vec<String> {
    let b = bounds(rec.snapshots.iter());
    let margin = 20.0;
    let width = (b.x1 - b.x0) * SCALE + 2.0 * margin;
    let height = (b.y1 - b.y0) * SCALE + 2.0 * margin;
    let ground = margin + (b.y1 - 0.0) * SCALE;
    rec.snapshots
        .iter()
        .map(|s| {
            let mut out = String::new();
            let _ = writeln!(
                out,
                r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">"##
            );
            let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
            let _ = writeln!(out, r##"<line x1="0" y1="{ground:.2}" x2="{width:.2}" y2="{ground:.2}" stroke="#888"/>"##);
            polygons(&mut out, s, |p| (margin + (p[0] - b.x0) * SCALE, margin + (b.y1 - p[1]) * SCALE), 1.0);
            let class = rec.classes.get(s.segment).copied().unwrap_or(0);
            let _ = writeln!(out, r##"<text x="4" y="14" font-size="12">t={:.3} stimulus {class}</text>"##, s.time);
            out.push_str("</svg>\n");
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passive() -> Body {
        Body::from_text("###\n###").unwrap()
    }

    #[test]
    fn twenty_samples_per_cycle() {
        let engine = PhysicsEngine::default();
        let img = Image::filled(14, 14, 0.0);
        let rec = record(&engine, &passive(), &[(0, &img)], 10).unwrap();
        assert_eq!(rec.snapshots.len(), 10 * SAMPLES_PER_CYCLE);
        assert_eq!(frame_svgs(&rec).len(), 200);
    }

    #[test]
    fn passive_silhouettes_stay_aligned() {
        let engine = PhysicsEngine::default();
        let img = Image::filled(14, 14, 0.0);
        let rec = record(&engine, &passive(), &[(0, &img), (1, &img)], 2).unwrap();
        let xs: Vec<f64> = rec.snapshots.iter().map(|s| s.quads[0].0[0][0]).collect();
        let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-2, "{spread}");
        let svg = spacetime_svg(&rec, 5);
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
    }
}
