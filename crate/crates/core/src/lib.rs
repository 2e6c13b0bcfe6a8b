//! A deterministic autonomous-racing reinforcement-learning laboratory.

pub mod track;
pub mod plant;
pub mod controllers;
pub mod env;
pub mod experiment;
pub mod nn;
pub mod orchestrator;
pub mod rates;
pub mod sac;
