//! Command line and HTTP service for the reward-design workbench.

pub mod api;
pub mod backend;
pub mod commands;
pub mod labels;
