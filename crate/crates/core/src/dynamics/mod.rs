//! Noisy training: minibatch SGD and Langevin dynamics, free energy, escape
//! times, stability Jacobians, the scalar mean-regression information
//! experiment and plane projections of training paths.

mod escape;
mod stability;
mod toy;
mod train;

pub use escape::{
    descend, escape_time_mc, find_saddle, find_saddle_1d, find_saddle_string, free_energy, linear_fit, toy_free_energy,
    BentDoubleWell, DoubleWell, EscapeTimeStats, Region, Saddle, ScalarLoss, Washboard, STRING_NODES,
};
pub use stability::{
    dataset_jacobian, dataset_jacobian_with, plane_projection, EllipseAxis, PerturbationScheme, PlaneReport, Trainer,
    CONVERGENCE_TOL, MIN_PLANE_ANGLE,
};
pub use toy::{
    sample_mean_entropy, toy_pipeline, toy_polish, toy_train, Endpoint, ToyBatchResult, ToyPipelineConfig, ToyReport,
};
pub use train::{sgd_train, NoiseMode, Snapshot, TrainConfig, TrainTrace, DIVERGENCE_LOSS};
