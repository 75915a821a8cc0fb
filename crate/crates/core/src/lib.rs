//! Core of the knowledge-enhanced tele-domain encoder.
//!
//! The crate is organised bottom-up: [`corpus`] ingests raw records,
//! [`prompting`] wraps them into unit sequences, [`tokenizer`] maps them to
//! ids and plans masks, [`backbone`] is the transformer encoder with its
//! self-supervised heads, [`anenc`] encodes tag-named numeric values,
//! [`ke`] injects knowledge triples and [`schedule`] drives multi-task
//! re-training. [`metrics`] and [`checkpoint`] are shared utilities.

pub mod anenc;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod ke;
pub mod metrics;
pub mod nn;
pub mod prompting;
pub mod schedule;
pub mod tokenizer;

pub use error::{Error, Result};
