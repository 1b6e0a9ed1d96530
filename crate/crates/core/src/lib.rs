//! Federated-learning simulator comparing FedAvg, FedProx and FedDropoutAvg
//! on synthetic or CSV-loaded multi-center tabular data.
//!
//! ```
//! use fedsim::{ParameterSet, LayerTensor, LayerKind};
//!
//! let a = ParameterSet::new(vec![LayerTensor::new("w", LayerKind::Weight, vec![2], vec![1.0, 2.0])?])?;
//! let b = a.scaled(0.5)?;
//! assert_eq!(b.flatten(), vec![0.5, 1.0]);
//! # Ok::<(), fedsim::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod param;
pub mod rng;

pub use error::{Error, Result};
pub use param::{DropoutMask, LayerKind, LayerTensor, ParameterSet};
pub use rng::{Purpose, RngStream};
