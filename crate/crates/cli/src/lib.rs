//! Operator commands and the synthetic-recipient simulator.

pub mod commands;
pub mod sim;
