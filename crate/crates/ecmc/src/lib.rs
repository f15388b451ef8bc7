//! File formats, dataset directories, run configuration and the `ecmc`
//! command line on top of [`ecmc_core`].

pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod runconfig;

pub use ecmc_core as core;
