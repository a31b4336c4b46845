//! Ontology-guided multi-aspect contrastive pretraining at desk scale.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod ontology;

pub use error::{Error, Result};
