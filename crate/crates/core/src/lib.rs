//! Simulation and scaling-limit toolkit for a three-compartment
//! multi-scale branching model of hematopoiesis.
//!
//! Compartment 1 holds stem cells, compartment 2 progenitors and compartment 3
//! mature cells. Rates carry powers of the scale parameter `K`, so the three
//! compartments live on different size and time scales.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod fluct;
pub mod limits;
pub mod model;
pub mod rng;
pub mod ssa;

pub use model::{EventKind, ModelParams, PopulationState};
pub use ssa::{SimulationConfig, TimeScale, Trajectory};
