//! Synthetic measurement generator.
//!
//! A scenario fixes the hidden end-effector offsets of both sources, the
//! camera, the board and the noise. [`generate`] draws reference poses,
//! computes the chains each source would report for them, perturbs those,
//! and projects the board corners. Identical scenarios give identical bytes.

pub mod generate;
pub mod sampler;
pub mod scenario;

pub use generate::{generate, Manifest, SimOutput, SimSample};
pub use scenario::{default_paper_scenario, trajectory_scenario, NoiseSpec, PoseSampler, ScenarioFile, SimScenario};
