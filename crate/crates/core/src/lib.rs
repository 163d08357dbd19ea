//! Evolving voxel-based soft robots that classify MNIST digits by walking.
//!
//! Robots are built only from fixed-behaviour materials: passive voxels,
//! sinusoidal muscles and sensors whose area follows one pixel of the shown
//! image. A CPPN genome develops into a 14x14 body, a mass-spring simulation
//! measures how far the body walks under each stimulus, and MAP-Elites keeps
//! the best robot per morphological niche. Small neural-network baselines
//! trained on the same single examples put a number on what the bodies
//! compute.

pub mod baseline;
pub mod cppn;
pub mod evolution;
pub mod mnist;
pub mod morphology;
pub mod persist;
pub mod physics;
pub mod seeding;
pub mod tasks;
pub mod voxel;

/// Side length of the body grid and of the downscaled images.
pub const GRID: usize = 14;
