//! Conditional generation of seismic wavefields with operator networks and
//! rectified flow matching.

pub mod calibration;
pub mod error;
pub mod fft;
pub mod flowmatch;
pub mod metrics;
pub mod operators;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod specops;
pub mod subspace;
pub mod tape;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::{Dtype, Tensor};
