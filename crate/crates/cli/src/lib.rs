//! Receding-horizon experiments over the dbnplan planners: seeded
//! simulation, the algorithm registry, scoring and CSV output.

pub mod checks;
pub mod episode;
pub mod experiment;
pub mod manifest;
pub mod planners;
pub mod score;

pub use episode::{run_episode, simulate_step, EpisodeConfig, EpisodeTrace};
pub use experiment::{run_experiment, run_grid, write_outputs, ExperimentResults};
pub use manifest::Manifest;
pub use planners::{build_planner, Planner, ALGORITHMS};
