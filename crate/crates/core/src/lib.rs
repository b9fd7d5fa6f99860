//! Selecting which attention heads keep full causal attention and which
//! switch to a sliding window, on a toy transformer with a planted retrieval
//! circuit.

pub mod error;
pub mod masks;
pub mod model;

pub use error::{Error, Result};
pub use masks::{HeadMask, MaskShape};
pub use model::{ModelSpec, PlantedCircuit, ToyModel};
pub mod calibration;
pub mod presets;
pub mod objective;
pub mod optimizer;
pub mod pipeline;
pub mod baselines;
pub mod analysis;
pub mod io;
pub mod commands;
