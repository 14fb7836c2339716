// SPDX-License-Identifier: Apache-2.0

//! Federated spectral contrastive learning with shared, differentially
//! private correlation matrices, at desk scale.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod federation;
pub mod numerics;
pub mod objective;
pub mod privacy;

pub use error::{Error, Result};
