//! Case-mix standardized meta-analysis combining trials with individual
//! participant data (IPD) and trials reported only as arm-level summaries.

pub mod basis;
pub mod covariance;
pub mod data;
pub mod error;
pub mod linalg;
pub mod meta;
pub mod pseudo;
pub mod sandwich;
pub mod seed;
pub mod sim;
pub mod weights;

pub use basis::{BasisSpec, BasisTerm};
pub use data::{AggregatedTrial, EffectScale, IpdTrial, Study, StudyCollection};
pub use error::{Error, ErrorKind, Result};
