//! Corpus generation, run configuration, training and evaluation drivers,
//! and heatmap export.

pub mod config;
pub mod data;
pub mod maps;
pub mod run;
