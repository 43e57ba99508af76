pub mod adam;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod train;
