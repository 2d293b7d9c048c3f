//! Command-line front end for the jade-core estimators: dataset
//! simulation, single fits, penalty tuning, replicated studies, and
//! fit-versus-truth scoring, all exchanged through CSV and JSON files.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
