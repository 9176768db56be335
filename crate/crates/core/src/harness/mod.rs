//! Experiment orchestration: training loops, the continual protocol, noise
//! sweeps, grid search, run logs, and plot data.

pub mod continual;
pub mod experiment;
pub mod grid;
pub mod plot;
pub mod presets;
pub mod record;
pub mod sweep;
pub mod train;

pub use continual::{continual, TaskResult};
pub use experiment::{run, DataCache, Experiment, ExperimentConfig, Outcome};
pub use grid::{grid_search, GridOutcome, GridPoint, GridSpec};
pub use plot::{emit_plotdata, figures_from_events, Figure, Series};
pub use record::{read_events, Event, RunRecord};
pub use sweep::{noise_sweep, NoiseRow};
pub use train::{evaluate, train, EpochMetrics, TrainConfig, TrainData, TrainOutcome};
