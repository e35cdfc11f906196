//! Moment-based admission control for cloud clusters.

pub mod belief;
pub mod error;
mod fastmath;
pub mod moments;
pub mod policies;
pub mod population;
pub mod pricing;
pub mod rng;
pub mod simulator;
pub mod trace_fit;

pub use belief::{init_belief, BeliefState, InfoLevel};
pub use error::{Error, Result};
pub use population::{DeploymentParams, GammaParams, InitialSize, PopulationModel, ProcessKind};
pub use moments::{moment_profile, LookaheadGrid, MomentProfile};
pub use policies::{on_arrival, ClusterMomentState, Decision, PolicyConfig, PolicyKind};
pub use simulator::{calibrate_and_run, calibrate_threshold, default_search, run_experiment, run_replication, CalibrationReport, SimConfig, SimResult};
pub use pricing::{hourly_price, labeling_savings, mixture_variance, LabeledType, PricingConfig};
pub use trace_fit::{FitConfig, FitMethod, FitReport, TraceEvent, TraceEventKind};
