//! Voxel materials and their rest-length behaviour.
//!
//! Every material is a horizontally actuating voxel whose only control channel
//! is a scalar rest-length multiplier. Passive voxels hold it at 1, muscles
//! oscillate it sinusoidally and sensors track the intensity of the pixel bound
//! to their grid position.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::GRID;

/// Material of one grid cell. The discriminants are the CPPN output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum VoxelType {
    Empty = 0,
    Rigid = 1,
    Soft = 2,
    MusclePhase0 = 3,
    MusclePhasePi = 4,
    SensorExpand = 5,
    SensorShrink = 6,
}

impl VoxelType {
    pub const ALL: [VoxelType; 7] = [
        VoxelType::Empty,
        VoxelType::Rigid,
        VoxelType::Soft,
        VoxelType::MusclePhase0,
        VoxelType::MusclePhasePi,
        VoxelType::SensorExpand,
        VoxelType::SensorShrink,
    ];

    pub fn from_index(i: usize) -> Option<VoxelType> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_muscle(self) -> bool {
        matches!(self, VoxelType::MusclePhase0 | VoxelType::MusclePhasePi)
    }

    pub fn is_sensor(self) -> bool {
        matches!(self, VoxelType::SensorExpand | VoxelType::SensorShrink)
    }

    /// Rigid voxels get the stiff spring constant, everything else the soft one.
    pub fn is_stiff(self) -> bool {
        matches!(self, VoxelType::Rigid)
    }

    /// Glyph used by the body text format.
    pub fn glyph(self) -> char {
        match self {
            VoxelType::Empty => '.',
            VoxelType::Rigid => '#',
            VoxelType::Soft => 'o',
            VoxelType::MusclePhase0 => 'M',
            VoxelType::MusclePhasePi => 'W',
            VoxelType::SensorExpand => '+',
            VoxelType::SensorShrink => '-',
        }
    }

    pub fn from_glyph(c: char) -> Option<VoxelType> {
        Self::ALL.iter().copied().find(|t| t.glyph() == c)
    }
}

/// Amplitude, frequency and rest-length bounds shared by all active voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationParams {
    pub amplitude: f64,
    /// Muscle cycles per simulated second. One actuation cycle is `1 / frequency`.
    pub frequency: f64,
    pub sensor_gain: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ActuationParams {
    fn default() -> Self {
        ActuationParams {
            amplitude: 0.6,
            frequency: 2.0,
            sensor_gain: 1.0,
            u_min: 0.6,
            u_max: 1.6,
        }
    }
}

impl ActuationParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.u_min > 0.0 && self.u_min <= 1.0 && self.u_max >= 1.0) {
            return Err(format!(
                "actuation range [{}, {}] must bracket 1 with u_min > 0",
                self.u_min, self.u_max
            ));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= self.u_max - 1.0 + 1e-12) {
            return Err(format!(
                "amplitude {} must lie in (0, u_max - 1]",
                self.amplitude
            ));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(format!("frequency {} must be positive", self.frequency));
        }
        if !(self.sensor_gain >= 0.0) {
            return Err(format!("sensor gain {} must be non-negative", self.sensor_gain));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }

    /// Multiplier before clamping. Exposed so antiphase can be checked exactly.
    pub fn raw_multiplier(&self, vt: VoxelType, t: f64, p: f64) -> f64 {
        let phase = 2.0 * PI * self.frequency * t;
        match vt {
            VoxelType::Empty | VoxelType::Rigid | VoxelType::Soft => 1.0,
            VoxelType::MusclePhase0 => 1.0 + self.amplitude * phase.sin(),
            VoxelType::MusclePhasePi => 1.0 - self.amplitude * phase.sin(),
            VoxelType::SensorExpand => 1.0 + self.sensor_gain * (self.u_max - 1.0) * p,
            VoxelType::SensorShrink => 1.0 - self.sensor_gain * (1.0 - self.u_min) * p,
        }
    }

    /// Rest-length multiplier of a voxel of type `vt` at time `t` sensing intensity `p`.
    pub fn rest_multiplier(&self, vt: VoxelType, t: f64, p: f64) -> f64 {
        self.raw_multiplier(vt, t, p).clamp(self.u_min, self.u_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("grid position ({0}, {1}) lies outside the {GRID}x{GRID} grid")]
pub struct OutOfGrid(pub usize, pub usize);

/// Pixel sensed by the voxel at grid position `(row, col)`. The binding is fixed
/// at construction time and ignores the robot's motion.
pub fn pixel_for_voxel(row: usize, col: usize) -> Result<(usize, usize), OutOfGrid> {
    if row >= GRID || col >= GRID {
        return Err(OutOfGrid(row, col));
    }
    Ok((row, col))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passive_is_constant() {
        let p = ActuationParams::default();
        for vt in [VoxelType::Rigid, VoxelType::Soft, VoxelType::Empty] {
            for &(t, px) in &[(0.0, 0.0), (0.37, 0.5), (12.1, 1.0)] {
                assert_eq!(p.rest_multiplier(vt, t, px), 1.0);
            }
        }
    }

    #[test]
    fn muscle_quarter_period() {
        let p = ActuationParams::default();
        let t = 1.0 / (4.0 * p.frequency);
        assert!((p.rest_multiplier(VoxelType::MusclePhase0, t, 0.0) - 1.6).abs() < 1e-12);
        // 0.4 before clamping
        assert!((p.raw_multiplier(VoxelType::MusclePhasePi, t, 0.0) - 0.4).abs() < 1e-12);
        assert_eq!(p.rest_multiplier(VoxelType::MusclePhasePi, t, 0.0), 0.6);
    }

    #[test]
    fn sensor_endpoints() {
        let p = ActuationParams::default();
        assert_eq!(p.rest_multiplier(VoxelType::SensorExpand, 3.0, 0.0), 1.0);
        assert_eq!(p.rest_multiplier(VoxelType::SensorExpand, 3.0, 1.0), 1.6);
        assert_eq!(p.rest_multiplier(VoxelType::SensorShrink, 3.0, 0.0), 1.0);
        assert_eq!(p.rest_multiplier(VoxelType::SensorShrink, 3.0, 1.0), 0.6);
    }

    #[test]
    fn pixel_binding() {
        assert_eq!(pixel_for_voxel(0, 0), Ok((0, 0)));
        assert_eq!(pixel_for_voxel(13, 13), Ok((13, 13)));
        assert_eq!(pixel_for_voxel(14, 0), Err(OutOfGrid(14, 0)));
    }

    #[test]
    fn glyphs_are_unique() {
        for vt in VoxelType::ALL {
            assert_eq!(VoxelType::from_glyph(vt.glyph()), Some(vt));
            assert_eq!(VoxelType::from_index(vt.index()), Some(vt));
        }
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = ActuationParams::default();
        p.amplitude = 0.7;
        assert!(p.validate().is_err());
        p.amplitude = 0.6;
        p.frequency = 0.0;
        assert!(p.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn muscles_periodic_and_antiphase(t in 0.0f64..100.0) {
                let p = ActuationParams::default();
                for vt in [VoxelType::MusclePhase0, VoxelType::MusclePhasePi] {
                    let a = p.rest_multiplier(vt, t, 0.0);
                    let b = p.rest_multiplier(vt, t + p.period(), 0.0);
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let m0 = p.raw_multiplier(VoxelType::MusclePhase0, t, 0.0) - 1.0;
                let mpi = p.raw_multiplier(VoxelType::MusclePhasePi, t, 0.0) - 1.0;
                prop_assert!((m0 + mpi).abs() < 1e-12);
            }

            #[test]
            fn sensors_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
                prop_assume!(a < b);
                let p = ActuationParams::default();
                prop_assert!(p.rest_multiplier(VoxelType::SensorExpand, 0.0, a)
                    < p.rest_multiplier(VoxelType::SensorExpand, 0.0, b));
                prop_assert!(p.rest_multiplier(VoxelType::SensorShrink, 0.0, a)
                    > p.rest_multiplier(VoxelType::SensorShrink, 0.0, b));
            }
        }
    }
}
