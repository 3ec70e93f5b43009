//! Inferring shopping needs ("concepts") from user behavior over a concept net.
//!
//! The pieces, bottom up: [`concept_net`] holds the typed graph and its
//! tf-idf edge scores, [`paths`] enumerates and ranks user→concept path
//! instances, [`dataset`] featurizes and generates data, [`model`] is the
//! three-tower network with the attention cube, [`train`] runs Adam over
//! mini-batches and [`metrics`] scores the result.

pub mod concept_net;
pub mod dataset;
pub mod paths;
pub mod records;
pub mod model;
pub mod metrics;
pub mod train;
