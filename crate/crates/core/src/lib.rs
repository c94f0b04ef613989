//! Head-to-head autonomous racing kit.

pub mod cli;
pub mod config;
pub mod eval;
pub mod expert;
pub mod geom;
pub mod policy;
pub mod scenario;
pub mod seed;
pub mod sim;
pub mod track;
pub mod trainer;
