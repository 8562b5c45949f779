//! Contrast-agent concentration estimation from magnitude and phase MRI data
//! with Gaussian Markov random field priors.

pub mod checks;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod grid;
pub mod io;
pub mod phantom;
pub mod phase;
pub mod priors;

pub use error::{Error, FormatError, Result};
pub use estimators::{
    dense_posterior, estimate_small_image, hyperparameter_posterior, log_marginal_likelihood,
    map_estimate, mle_estimate, CgOptions, DensePosterior, Estimate, ExactContext, HyperPriorSpec,
    ObservationNoise, PosteriorSummary, SigmaMode,
};
pub use eval::{run_experiment, ExperimentConfig, Method, RmseTable};
pub use grid::{GridDims, TimeGrid, Tissue, TissueMap, Volume};
pub use phantom::{NoiseModel, PhantomSpec, SimulatedDataset};
pub use phase::{DipoleKernel, PhaseOperator};
pub use priors::{NeighborGraph, PrecisionOperator, PriorChoice, PriorKind, SpatialPrior, Theta};

pub use faer;
