//! Alpha mining by searching over register-machine programs.

pub mod cli;
pub mod data;
pub mod dimensions;
pub mod env;
pub mod evaluator;
pub mod expr;
pub mod metrics;
pub mod program;
pub mod search;
pub mod strategy;
