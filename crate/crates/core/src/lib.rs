//! Connected cruise control of an automated vehicle behind a chain of human
//! drivers: delayed closed-loop simulation, a barrier-function safety filter,
//! frequency-domain stability analysis and closed-form safety charts.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which is what the analyses are tuned for.

// Validation is written as `!(x > 0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod models;
pub mod presets;
pub mod safety;
pub mod scalar;
pub mod sim;
pub mod stability;

pub use control::{ControlSnapshot, FilterOutcome};
pub use error::{Error, Result};
pub use models::{CavParams, CavState, CbfParams, Chain, ConnectedLink, HvParams, HvState};
pub use safety::{BoundVariant, ChartGrid, ChartSpec, GammaChoice, SafeBounds, SafetyEnvelope};
pub use scalar::Scalar;
pub use sim::{Controller, HeadProfile, InitialCondition, Scenario, Trajectory};
pub use stability::{FrequencyGrid, Plane, StabilityFlags};

pub type HvParams64 = HvParams<f64>;
pub type CavParams64 = CavParams<f64>;
pub type CbfParams64 = CbfParams<f64>;
pub type CavState64 = CavState<f64>;
pub type Chain64 = Chain<f64>;
pub type SafetyEnvelope64 = SafetyEnvelope<f64>;
pub type SafeBounds64 = SafeBounds<f64>;
pub type ChartSpec64 = ChartSpec<f64>;
pub type ChartGrid64 = ChartGrid<f64>;
pub type Scenario64 = Scenario<f64>;
pub type Trajectory64 = Trajectory<f64>;
pub type StabilityFlags64 = StabilityFlags<f64>;
