// SPDX-License-Identifier: Apache-2.0

//! Experiment runner behind the `fedsc` binary: configuration parsing, paired
//! FedSC / FedAvg+SC runs, sweeps, and the invariant suites.

pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;

pub use error::CliError;
