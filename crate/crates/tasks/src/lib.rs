//! Downstream fault-analysis models over encoder service vectors.

pub mod eap;
pub mod fct;
pub mod kpi;
pub mod rca;
