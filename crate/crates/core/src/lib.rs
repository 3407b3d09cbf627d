//! Conservative interacting particle systems on the complete graph with
//! site-dependent rates: exact simulation, graphical coupling, mean-field
//! limits, fluctuation fields and Ornstein-Uhlenbeck covariance.

pub mod error;
pub mod fields;
pub mod graphical;
pub mod meanfield;
pub mod model;
pub mod ou;
pub mod par;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod torus;

pub use error::{Error, Result};
pub use model::{make_preset, Capacity, ModelPreset, OccupancyLaw, RatePolicy};
pub use sim::{
    run_replicas, sample_initial, simulate, Configuration, InitialProfile, ReplicaEnsemble,
    Trajectory,
};
pub use torus::{FourierSeries, Kernel, TorusFn};
