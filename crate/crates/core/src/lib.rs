//! Adaptive testing of black-box decision-making agents.
//!
//! A surrogate prediction model estimates the failure probability of each
//! initial test state. Test states are drawn from an acquisition distribution
//! that mixes the naturalistic distribution with its restriction to the
//! states the surrogate flags as critical, and the surrogate is corrected
//! online from test outcomes: by fine-tuning the network directly when tests
//! are plentiful ([`engine::run_data_rich`]), or by re-fitting the convex
//! combination coefficients of several pre-trained surrogates with
//! importance-weighted fine-tuning when tests are scarce
//! ([`engine::run_data_limited`]).

pub mod acquisition;
pub mod bench;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod isweights;
pub mod mixture;
pub mod rng;
pub mod spm;
pub mod types;

pub use data::Dataset;
pub use error::{Error, Result};
pub use rng::{make_rng, Rng};
pub use types::{
    gap, ConstantModel, FnModel, NaturalisticDistribution, Outcome, PredictionModel,
    SystemUnderTest, TestState, TruncatedNormal, UniformBox, VisitedRecord, VisitedSet,
};
