//! 2D mass-spring soft-body simulation.
//!
//! A voxel is four point masses joined by four edge springs and two diagonals.
//! Neighbouring voxels share corners and edge springs. Actuation scales spring
//! rest lengths per voxel: horizontal edges by the multiplier `m`, diagonals by
//! `sqrt((m^2 + 1) / 2)` so that the rest shape is an `m x 1` rectangle, and
//! vertical edges not at all. The floor is a one-sided penalty spring with
//! Coulomb-clamped friction. Integration is semi-implicit Euler.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::mnist::Image;
use crate::morphology::Body;
use crate::voxel::{ActuationParams, VoxelType};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhysicsError {
    #[error("body has no voxels")]
    EmptyBody,
    #[error("body is not 4-connected")]
    DisconnectedBody,
    #[error("numerical blow-up at t = {time:.4} s (point {point})")]
    NumericalBlowup { time: f64, point: usize },
    #[error("expected {expected} multipliers, got {found}")]
    MultiplierCount { expected: usize, found: usize },
    #[error("multiplier {value} for voxel {voxel} outside [{min}, {max}]")]
    MultiplierOutOfRange { voxel: usize, value: f64, min: f64, max: f64 },
    #[error("invalid world config: {0}")]
    BadConfig(String),
}

/// Physical constants and integration settings. Lengths are in voxel rest
/// lengths, time in simulated seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub gravity: f64,
    pub dt: f64,
    /// Physics steps per actuation-signal sample.
    pub substeps: usize,
    pub ground_y: f64,
    pub friction: f64,
    pub contact_stiffness: f64,
    /// Fraction of critical damping applied to the contact spring of each point.
    pub contact_damping_ratio: f64,
    /// Mass of one voxel, spread equally over its four corners.
    pub voxel_mass: f64,
    pub rigid_stiffness: f64,
    pub soft_stiffness: f64,
    /// Diagonal stiffness as a fraction of the owning voxel's edge stiffness.
    pub diagonal_factor: f64,
    /// Spring damping as a fraction of critical damping for one corner mass.
    pub damping_ratio: f64,
    /// Largest change of an applied multiplier per simulated second. Sampled
    /// targets are approached at this rate; `None` applies them at once.
    pub max_multiplier_rate: Option<f64>,
    pub actuation: ActuationParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            gravity: 9.8,
            dt: 1.0 / 2400.0,
            substeps: 40,
            ground_y: 0.0,
            friction: 0.6,
            contact_stiffness: 500.0,
            contact_damping_ratio: 0.5,
            voxel_mass: 0.0003,
            rigid_stiffness: 60.0,
            soft_stiffness: 12.0,
            diagonal_factor: 0.7,
            damping_ratio: 0.3,
            max_multiplier_rate: Some(10.0),
            actuation: ActuationParams::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |m: String| Err(PhysicsError::BadConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if !(self.friction >= 0.0) {
            return bad(format!("friction must be non-negative, got {}", self.friction));
        }
        if !(self.voxel_mass > 0.0) {
            return bad(format!("voxel mass must be positive, got {}", self.voxel_mass));
        }
        if !(self.rigid_stiffness > 0.0 && self.soft_stiffness > 0.0 && self.diagonal_factor > 0.0) {
            return bad("spring stiffnesses must be positive".into());
        }
        if !(self.contact_stiffness > 0.0 && self.damping_ratio >= 0.0 && self.contact_damping_ratio >= 0.0) {
            return bad("contact stiffness must be positive and damping non-negative".into());
        }
        if let Some(r) = self.max_multiplier_rate {
            if !(r > 0.0) {
                return bad(format!("multiplier rate must be positive, got {r}"));
            }
        }
        self.actuation.validate().map_err(PhysicsError::BadConfig)
    }

    /// Physics steps in one actuation cycle.
    pub fn steps_per_cycle(&self) -> usize {
        (self.actuation.period() / self.dt).round().max(1.0) as usize
    }

    pub fn stiffness_for(&self, vt: VoxelType) -> f64 {
        if vt.is_stiff() {
            self.rigid_stiffness
        } else {
            self.soft_stiffness
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpringKind {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub kind: SpringKind,
    /// Voxels that own this spring (one or two for edges, one for diagonals).
    pub owners: Vec<usize>,
}

/// One voxel's place in the world: its grid cell, material and corner points
/// in counter-clockwise order (bottom-left, bottom-right, top-right, top-left).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBinding {
    pub row: usize,
    pub col: usize,
    pub kind: VoxelType,
    pub corners: [usize; 4],
    /// Row-major index of the sensed pixel, fixed at build time.
    pub pixel: usize,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub cfg: WorldConfig,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub mass: Vec<f64>,
    pub springs: Vec<Spring>,
    pub voxels: Vec<VoxelBinding>,
    pub time: f64,
    rest_now: Vec<f64>,
    applied: Vec<f64>,
    force: Vec<[f64; 2]>,
}

fn corner_key(r: usize, c: usize) -> (usize, usize) {
    (r, c)
}

/// Builds the mass-spring system for `body`, standing on the floor and
/// horizontally centred on the grid's centre column line.
pub fn build_world(body: &Body, cfg: &WorldConfig) -> Result<WorldState, PhysicsError> {
    cfg.validate()?;
    let cells = body.occupied();
    if cells.is_empty() {
        return Err(PhysicsError::EmptyBody);
    }
    if !body.is_connected() {
        return Err(PhysicsError::DisconnectedBody);
    }
    let grid = body.size();
    let lowest_row = cells.iter().map(|&(r, _, _)| r).max().unwrap_or(0);
    let corner_mass = cfg.voxel_mass / 4.0;

    let mut point_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pos = Vec::new();
    let mut mass = Vec::new();
    let mut point = |r: usize, c: usize, pos: &mut Vec<[f64; 2]>, mass: &mut Vec<f64>| -> usize {
        let idx = *point_of.entry(corner_key(r, c)).or_insert_with(|| {
            pos.push([
                c as f64 - grid as f64 / 2.0,
                cfg.ground_y + (lowest_row + 1 - r) as f64,
            ]);
            mass.push(0.0);
            pos.len() - 1
        });
        mass[idx] += corner_mass;
        idx
    };

    let mut voxels = Vec::with_capacity(cells.len());
    for &(r, c, kind) in &cells {
        // grid row r spans corner rows r (top) and r + 1 (bottom)
        let bl = point(r + 1, c, &mut pos, &mut mass);
        let br = point(r + 1, c + 1, &mut pos, &mut mass);
        let tr = point(r, c + 1, &mut pos, &mut mass);
        let tl = point(r, c, &mut pos, &mut mass);
        voxels.push(VoxelBinding { row: r, col: c, kind, corners: [bl, br, tr, tl], pixel: r * grid + c });
    }

    let mut springs: Vec<Spring> = Vec::new();
    let mut edge_of: HashMap<(usize, usize), usize> = HashMap::new();
    for (vi, v) in voxels.iter().enumerate() {
        let [bl, br, tr, tl] = v.corners;
        let edges = [
            (bl, br, SpringKind::Horizontal),
            (tl, tr, SpringKind::Horizontal),
            (bl, tl, SpringKind::Vertical),
            (br, tr, SpringKind::Vertical),
        ];
        for (a, b, kind) in edges {
            let key = (a.min(b), a.max(b));
            match edge_of.get(&key) {
                Some(&si) => springs[si].owners.push(vi),
                None => {
                    edge_of.insert(key, springs.len());
                    springs.push(Spring {
                        a,
                        b,
                        rest_length: 1.0,
                        stiffness: 0.0,
                        damping: 0.0,
                        kind,
                        owners: vec![vi],
                    });
                }
            }
        }
        for (a, b) in [(bl, tr), (br, tl)] {
            springs.push(Spring {
                a,
                b,
                rest_length: std::f64::consts::SQRT_2,
                stiffness: 0.0,
                damping: 0.0,
                kind: SpringKind::Diagonal,
                owners: vec![vi],
            });
        }
    }
    for s in &mut springs {
        let k = s.owners.iter().map(|&o| cfg.stiffness_for(voxels[o].kind)).sum::<f64>()
            / s.owners.len() as f64;
        s.stiffness = if s.kind == SpringKind::Diagonal { k * cfg.diagonal_factor } else { k };
        s.damping = cfg.damping_ratio * 2.0 * (s.stiffness * corner_mass).sqrt();
    }

    let n_points = pos.len();
    let n_voxels = voxels.len();
    let rest_now = springs.iter().map(|s| s.rest_length).collect();
    Ok(WorldState {
        cfg: cfg.clone(),
        vel: vec![[0.0; 2]; n_points],
        force: vec![[0.0; 2]; n_points],
        pos,
        mass,
        springs,
        voxels,
        time: 0.0,
        rest_now,
        applied: vec![1.0; n_voxels],
    })
}

impl WorldState {
    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    /// Current rest length of every spring for the given voxel multipliers.
    fn apply_multipliers(&mut self, mult: &[f64]) -> Result<(), PhysicsError> {
        if mult.len() != self.voxels.len() {
            return Err(PhysicsError::MultiplierCount { expected: self.voxels.len(), found: mult.len() });
        }
        let act = &self.cfg.actuation;
        for (voxel, &value) in mult.iter().enumerate() {
            if !(value >= act.u_min && value <= act.u_max) {
                return Err(PhysicsError::MultiplierOutOfRange { voxel, value, min: act.u_min, max: act.u_max });
            }
        }
        for (s, rest) in self.springs.iter().zip(self.rest_now.iter_mut()) {
            *rest = match s.kind {
                SpringKind::Vertical => s.rest_length,
                SpringKind::Horizontal => {
                    let m = s.owners.iter().map(|&o| mult[o]).sum::<f64>() / s.owners.len() as f64;
                    s.rest_length * m
                }
                SpringKind::Diagonal => {
                    let m = mult[s.owners[0]];
                    s.rest_length * ((m * m + 1.0) / 2.0).sqrt()
                }
            };
        }
        Ok(())
    }

    /// Advances the world by one `dt` with the given per-voxel rest multipliers.
    pub fn step(&mut self, mult: &[f64]) -> Result<(), PhysicsError> {
        self.apply_multipliers(mult)?;
        self.applied.clear();
        self.applied.extend_from_slice(mult);
        self.integrate();
        self.check_finite()
    }

    fn integrate(&mut self) {
        let cfg = &self.cfg;
        let dt = cfg.dt;
        for (f, &m) in self.force.iter_mut().zip(&self.mass) {
            *f = [0.0, -m * cfg.gravity];
        }
        for (s, &rest) in self.springs.iter().zip(&self.rest_now) {
            let pa = self.pos[s.a];
            let pb = self.pos[s.b];
            let d = [pb[0] - pa[0], pb[1] - pa[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len <= 1e-12 {
                continue;
            }
            let u = [d[0] / len, d[1] / len];
            let va = self.vel[s.a];
            let vb = self.vel[s.b];
            let rel = (vb[0] - va[0]) * u[0] + (vb[1] - va[1]) * u[1];
            let mag = s.stiffness * (len - rest) + s.damping * rel;
            self.force[s.a][0] += mag * u[0];
            self.force[s.a][1] += mag * u[1];
            self.force[s.b][0] -= mag * u[0];
            self.force[s.b][1] -= mag * u[1];
        }
        for i in 0..self.pos.len() {
            let m = self.mass[i];
            let f = self.force[i];
            let pen = cfg.ground_y - self.pos[i][1];
            let v = &mut self.vel[i];
            v[0] += f[0] / m * dt;
            v[1] += f[1] / m * dt;
            let mut normal = 0.0;
            if pen > 0.0 {
                // contact spring and damper evaluated at the end of the step
                let k = cfg.contact_stiffness;
                let c = cfg.contact_damping_ratio * 2.0 * (k * m).sqrt();
                let vy = (v[1] + dt / m * k * pen) / (1.0 + dt * (k * dt + c) / m);
                normal = (k * (pen - dt * vy) - c * vy).max(0.0);
                v[1] += normal / m * dt;
            }
            if normal > 0.0 {
                // friction removes tangential velocity up to the Coulomb bound
                let max_dv = cfg.friction * normal * dt / m;
                v[0] -= v[0].clamp(-max_dv, max_dv);
            }
            self.pos[i][0] += v[0] * dt;
            self.pos[i][1] += v[1] * dt;
        }
        self.time += dt;
    }

    fn check_finite(&self) -> Result<(), PhysicsError> {
        for (i, (p, v)) in self.pos.iter().zip(&self.vel).enumerate() {
            if !(p[0].is_finite() && p[1].is_finite() && v[0].is_finite() && v[1].is_finite())
                || p[0].abs() > 1e6
                || p[1].abs() > 1e6
            {
                return Err(PhysicsError::NumericalBlowup { time: self.time, point: i });
            }
        }
        Ok(())
    }

    pub fn center_of_mass(&self) -> [f64; 2] {
        center_of_mass(&self.pos, &self.mass)
    }

    pub fn voxel_area(&self, voxel: usize) -> f64 {
        let c = self.voxels[voxel].corners;
        polygon_area(&c.map(|i| self.pos[i]))
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.vel
            .iter()
            .zip(&self.mass)
            .map(|(v, m)| 0.5 * m * (v[0] * v[0] + v[1] * v[1]))
            .sum()
    }

    pub fn max_speed(&self) -> f64 {
        self.vel.iter().map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).fold(0.0, f64::max)
    }

    pub fn min_y(&self) -> f64 {
        self.pos.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)
    }

    /// Rest multipliers of all voxels at the current time for stimulus `image`.
    pub fn drive(&self, image: Option<&Image>, out: &mut Vec<f64>) {
        let act = &self.cfg.actuation;
        out.clear();
        out.extend(self.voxels.iter().map(|v| {
            let p = image.map_or(0.0, |img| img.pixels.get(v.pixel).copied().unwrap_or(0.0));
            act.rest_multiplier(v.kind, self.time, p)
        }));
    }

    /// Runs `n_cycles` actuation cycles driven by `image`, sampling the rest
    /// multipliers every `cfg.substeps` physics steps. Returns the horizontal
    /// displacement of the centre of mass. `observer` sees the state after
    /// every physics step.
    pub fn run_segment(
        &mut self,
        image: Option<&Image>,
        n_cycles: usize,
        observer: &mut dyn FnMut(&WorldState),
    ) -> Result<f64, PhysicsError> {
        let mut source = |state: &WorldState, out: &mut Vec<f64>| state.drive(image, out);
        self.run_with(&mut source, n_cycles, observer)
    }

    /// Like [`WorldState::run_segment`] with an arbitrary multiplier source.
    pub fn run_with(
        &mut self,
        source: &mut dyn FnMut(&WorldState, &mut Vec<f64>),
        n_cycles: usize,
        observer: &mut dyn FnMut(&WorldState),
    ) -> Result<f64, PhysicsError> {
        let start = self.center_of_mass()[0];
        let steps = n_cycles * self.cfg.steps_per_cycle();
        let mut mult = Vec::with_capacity(self.voxels.len());
        for k in 0..steps {
            if k % self.cfg.substeps == 0 {
                source(self, &mut mult);
                self.slew(&mut mult);
                self.apply_multipliers(&mult)?;
            }
            self.integrate();
            self.check_finite()?;
            observer(self);
        }
        Ok(self.center_of_mass()[0] - start)
    }

    /// Moves the applied multipliers toward `target` by at most one control
    /// interval's worth of the configured rate and leaves the result in `target`.
    fn slew(&mut self, target: &mut [f64]) {
        if let Some(rate) = self.cfg.max_multiplier_rate {
            let max = rate * self.cfg.dt * self.cfg.substeps as f64;
            for (t, a) in target.iter_mut().zip(&self.applied) {
                *t = a + (*t - a).clamp(-max, max);
            }
        }
        self.applied.clear();
        self.applied.extend_from_slice(target);
    }

    /// One line of the trajectory stream: time followed by x y pairs.
    pub fn trajectory_line(&self) -> String {
        let mut line = format!("{:.6}", self.time);
        for p in &self.pos {
            line.push_str(&format!(" {:.6} {:.6}", p[0], p[1]));
        }
        line
    }
}

pub fn center_of_mass(pos: &[[f64; 2]], mass: &[f64]) -> [f64; 2] {
    let total: f64 = mass.iter().sum();
    let mut c = [0.0; 2];
    for (p, m) in pos.iter().zip(mass) {
        c[0] += m * p[0];
        c[1] += m * p[1];
    }
    [c[0] / total, c[1] / total]
}

/// Shoelace area of a polygon given in counter-clockwise order.
pub fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * twice.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::Body;

    fn body(rows: &[&str]) -> Body {
        Body::from_text(&rows.join("\n")).unwrap()
    }

    fn no_gravity() -> WorldConfig {
        WorldConfig { gravity: 0.0, ..WorldConfig::default() }
    }

    #[test]
    fn single_voxel_counts() {
        let w = build_world(&body(&["#"]), &WorldConfig::default()).unwrap();
        assert_eq!(w.pos.len(), 4);
        assert_eq!(w.springs.len(), 6);
        assert!((w.mass.iter().sum::<f64>() - WorldConfig::default().voxel_mass).abs() < 1e-15);
    }

    #[test]
    fn pair_shares_an_edge() {
        let w = build_world(&body(&["##"]), &WorldConfig::default()).unwrap();
        assert_eq!(w.pos.len(), 6);
        assert_eq!(w.springs.len(), 11);
        let shared = w.springs.iter().filter(|s| s.owners.len() == 2).count();
        assert_eq!(shared, 1);
    }

    #[test]
    fn rests_on_ground() {
        let w = build_world(&body(&["..#", ".##"]), &WorldConfig::default()).unwrap();
        assert_eq!(w.min_y(), 0.0);
    }

    #[test]
    fn empty_and_disconnected() {
        let empty = Body::empty();
        assert_eq!(build_world(&empty, &WorldConfig::default()).unwrap_err(), PhysicsError::EmptyBody);
        let split = body(&["#.#"]);
        assert_eq!(build_world(&split, &WorldConfig::default()).unwrap_err(), PhysicsError::DisconnectedBody);
    }

    #[test]
    fn equilibrium_is_unchanged() {
        let mut w = build_world(&body(&["#"]), &no_gravity()).unwrap();
        let before = w.pos.clone();
        for _ in 0..100 {
            w.step(&[1.0]).unwrap();
        }
        assert_eq!(w.pos, before);
    }

    #[test]
    fn stretched_spring_force() {
        // hand evaluation of Hooke's law for L = 2 L0: |F| = k L0
        let mut w = build_world(&body(&["#"]), &no_gravity()).unwrap();
        w.springs.retain(|s| s.kind == SpringKind::Horizontal && s.a == 0);
        w.rest_now = w.springs.iter().map(|s| s.rest_length).collect();
        for s in &mut w.springs {
            s.damping = 0.0;
        }
        let (a, b) = (w.springs[0].a, w.springs[0].b);
        w.pos[b][0] = w.pos[a][0] + 2.0;
        let k = w.springs[0].stiffness;
        let m = w.mass[a];
        w.integrate();
        // velocity after one step is F dt / m
        let fa = w.vel[a][0] * m / w.cfg.dt;
        let fb = w.vel[b][0] * m / w.cfg.dt;
        assert!((fa - k).abs() < 1e-9, "{fa} vs {k}");
        assert!((fb + k).abs() < 1e-9);
    }

    #[test]
    fn multiplier_contract() {
        let mut w = build_world(&body(&["M"]), &WorldConfig::default()).unwrap();
        assert!(matches!(w.step(&[1.7]), Err(PhysicsError::MultiplierOutOfRange { .. })));
        assert!(matches!(w.step(&[0.59]), Err(PhysicsError::MultiplierOutOfRange { .. })));
        assert!(matches!(w.step(&[1.0, 1.0]), Err(PhysicsError::MultiplierCount { .. })));
    }

    #[test]
    fn centre_of_mass_examples() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(center_of_mass(&sq, &[1.0; 4]), [0.5, 0.5]);
        assert_eq!(center_of_mass(&[[0.0, 0.0], [2.0, 0.0]], &[1.0, 1.0])[0], 1.0);
        assert_eq!(center_of_mass(&[[0.0, 0.0], [4.0, 0.0]], &[1.0, 3.0])[0], 3.0);
    }

    #[test]
    fn area_examples() {
        let unit = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(polygon_area(&unit), 1.0);
        let wide = unit.map(|p| [p[0] * 1.6, p[1]]);
        assert!((polygon_area(&wide) - 1.6).abs() < 1e-15);
        let line = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert_eq!(polygon_area(&line), 0.0);
        let w = build_world(&body(&["#"]), &WorldConfig::default()).unwrap();
        assert_eq!(w.voxel_area(0), 1.0);
    }

    #[test]
    fn passive_robot_stays_put() {
        let mut w = build_world(&body(&["##", "#o"]), &WorldConfig::default()).unwrap();
        w.run_segment(None, 1, &mut |_| {}).unwrap();
        let dx = w.run_segment(None, 10, &mut |_| {}).unwrap();
        assert!(dx.abs() < 1e-3, "dx = {dx}");
    }

    #[test]
    fn deterministic_trajectory() {
        let b = body(&["M#+", "W-M"]);
        let img = Image::filled(14, 14, 0.7);
        let run = || {
            let mut w = build_world(&b, &WorldConfig::default()).unwrap();
            let dx = w.run_segment(Some(&img), 3, &mut |_| {}).unwrap();
            (dx, w.pos)
        };
        let (a, pa) = run();
        let (b2, pb) = run();
        assert_eq!(a.to_bits(), b2.to_bits());
        assert_eq!(pa, pb);
    }

    #[test]
    fn rectangle_spring_count() {
        for (w, h) in [(1usize, 1usize), (3, 2), (4, 5), (14, 14)] {
            let rows: Vec<String> = (0..h).map(|_| "#".repeat(w)).collect();
            let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
            let world = build_world(&body(&refs), &WorldConfig::default()).unwrap();
            assert_eq!(world.springs.len(), 2 * w * h + w * (h + 1) + h * (w + 1));
            assert_eq!(world.pos.len(), (w + 1) * (h + 1));
        }
    }

    #[test]
    fn sampled_steps_are_slewed() {
        let cfg = WorldConfig::default();
        let per_sample = cfg.max_multiplier_rate.unwrap() * cfg.dt * cfg.substeps as f64;
        let mut w = build_world(&body(&["o"]), &no_gravity()).unwrap();
        let mut seen = Vec::new();
        w.run_with(
            &mut |state: &WorldState, out: &mut Vec<f64>| {
                seen.push(state.applied[0]);
                out.clear();
                out.push(1.6);
            },
            1,
            &mut |_| {},
        )
        .unwrap();
        for (i, a) in seen.iter().enumerate() {
            let expected = (1.0 + i as f64 * per_sample).min(1.6);
            assert!((a - expected).abs() < 1e-12, "sample {i}: {a} vs {expected}");
        }
        assert_eq!(*seen.last().unwrap(), 1.6);
    }

    #[test]
    fn passive_block_settles() {
        let mut w = build_world(&body(&["###", "###", "###"]), &WorldConfig::default()).unwrap();
        // excite the block, then release every multiplier back to 1
        let excite = |s: &WorldState, out: &mut Vec<f64>| {
            out.clear();
            out.extend((0..s.n_voxels()).map(|v| if v % 2 == 0 { 1.4 } else { 0.8 }));
        };
        w.run_with(&mut { excite }, 1, &mut |_| {}).unwrap();
        let initial = w.kinetic_energy();
        assert!(initial > 0.0);
        let cycles = (5.0 / w.cfg.actuation.period()).round() as usize;
        let mut rest = |s: &WorldState, out: &mut Vec<f64>| {
            out.clear();
            out.resize(s.n_voxels(), 1.0);
        };
        w.run_with(&mut rest, cycles, &mut |_| {}).unwrap();
        assert!(w.kinetic_energy() < 1e-6 * initial, "{} vs {initial}", w.kinetic_energy());
    }

    #[test]
    fn ground_is_not_penetrated() {
        let b = body(&["M+W#", "oMMW", "W--M"]);
        let img = Image::filled(14, 14, 0.8);
        let mut w = build_world(&b, &WorldConfig::default()).unwrap();
        let mut lowest = f64::INFINITY;
        w.run_segment(Some(&img), 10, &mut |s| lowest = lowest.min(s.min_y())).unwrap();
        assert!(lowest >= -0.05, "{lowest}");
    }

    #[test]
    fn mirror_symmetric_body_stays_centred() {
        let b = body(&["M#M", "WoW", "+M+"]);
        let img = Image::filled(14, 14, 0.5);
        let mut w = build_world(&b, &WorldConfig::default()).unwrap();
        let dx = w.run_segment(Some(&img), 10, &mut |_| {}).unwrap();
        assert!(dx.abs() < 1e-2, "{dx}");
    }

    #[test]
    fn equilibrium_area_grows_with_multiplier() {
        let mut last = 0.0;
        for i in 0..=10 {
            let m = 0.6 + 0.1 * i as f64;
            let mut w = build_world(&body(&["o"]), &no_gravity()).unwrap();
            let mut hold = |_: &WorldState, out: &mut Vec<f64>| {
                out.clear();
                out.push(m);
            };
            w.run_with(&mut hold, 4, &mut |_| {}).unwrap();
            let area = w.voxel_area(0);
            assert!(area > last, "m = {m}: {area} <= {last}");
            assert!((area - m).abs() < 1e-3, "m = {m}: {area}");
            last = area;
        }
    }

    #[test]
    fn trajectory_line_lists_every_point() {
        let w = build_world(&body(&["##"]), &WorldConfig::default()).unwrap();
        let line = w.trajectory_line();
        let fields: Vec<f64> = line.split(' ').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 1 + 2 * w.pos.len());
        assert_eq!(fields[0], 0.0);
        assert_eq!(&fields[1..3], &w.pos[0]);
    }

    #[test]
    fn blowup_is_reported() {
        let cfg = WorldConfig { dt: 0.5, ..WorldConfig::default() };
        let mut w = build_world(&body(&["MW", "WM"]), &cfg).unwrap();
        let res = w.run_segment(None, 50, &mut |_| {});
        assert!(matches!(res, Err(PhysicsError::NumericalBlowup { .. })));
    }
}
