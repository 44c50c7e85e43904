//! Command-line tools and the HTTP session service for the cryoloop simulator.

pub mod api;
pub mod cli;
pub mod estimate;
pub mod files;
pub mod report;
