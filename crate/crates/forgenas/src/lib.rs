//! File formats, image directories, run configuration and the command line
//! around [`forgenas_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod images;
pub mod manifest;

pub use forgenas_core as core;
