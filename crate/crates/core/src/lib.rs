//! Grey-box battery modeling: a first-order equivalent circuit whose
//! parameters are identified online by forgetting-factor RLS, corrected by
//! three small neural networks trained through the circuit's own
//! discretized dynamics, and used by an EKF for state-of-charge estimation.
//!
//! Module map:
//!
//! - [`ecm`]: OCV curve, coulomb counting, RC recurrence, terminal voltage.
//! - [`ffrls`]: streaming identification and the regression-coefficient algebra.
//! - [`nn`]: dense networks, backpropagation, Adagrad/Adam.
//! - [`hybrid`]: parameter correction, windowed training, model files.
//! - [`ekf`]: SOC estimation.
//! - [`synth`]: synthetic truth cell and current profiles.
//! - [`data`]: CSV ingestion, resampling, metrics.

pub mod data;
pub mod ecm;
pub mod ekf;
pub mod error;
pub mod ffrls;
pub mod hybrid;
pub mod nn;
pub mod synth;

pub use data::{improvement_pct, mse, rmse, SeriesData};
pub use ecm::{BatteryConfig, BatteryState, EcmParams, OcvCurve, TauBounds};
pub use ekf::{EkfConfig, EkfState, Estimation, ParamSource, SocReference};
pub use error::{Error, Result};
pub use ffrls::{FfrlsOptions, FfrlsState, Identification, ThetaVector};
pub use hybrid::{HybridModel, TrainOptions, TrainReport, TrainingWindowing};
pub use nn::{FnnConfig, FnnModel};
