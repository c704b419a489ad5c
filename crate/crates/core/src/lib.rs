//! Entire-space conversion-rate modeling over a micro/macro behavior graph.
//!
//! The crate is organised bottom-up: [`graph`] composes head probabilities into
//! task targets, [`synth`] generates labelled impression logs, [`nn`] is a small
//! embedding + MLP engine, [`models`] wires the two into trainable variants,
//! [`metrics`] scores them, and [`harness`] runs experiments end to end.

pub mod graph;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;
