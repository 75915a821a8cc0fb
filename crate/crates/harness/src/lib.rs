pub mod commands;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod pipeline;
pub mod report;
pub mod service;
pub mod synth;
