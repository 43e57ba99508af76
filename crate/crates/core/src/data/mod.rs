//! Dataset synthesis, density targets, evaluation metrics and file formats.

pub mod density;
pub mod io;
pub mod metrics;
pub mod synth;

pub use density::{make_density, DensityMap, HeadAnnotations};
pub use metrics::{game, mae_rmse};
pub use synth::{synth_dataset, SyntheticScene};
